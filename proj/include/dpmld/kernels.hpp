// Copyright 2026 The dpmld Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense matrix kernels used by the autodiff tape. All kernels accumulate into
// the output buffer (callers zero it first when they want plain assignment).
// Parallelism is over output rows only and every output element is produced
// by a single thread running the same sequential inner loop, so results are
// bit-identical for every thread count.

#ifndef DPMLD_KERNELS_HPP_
#define DPMLD_KERNELS_HPP_

#include <cstddef>

#include "dpmld/parallel.hpp"

namespace dpmld::ad {

// C[n,m] += A[n,k] * B[k,m]
void mm_nn(const double* a, const double* b, double* c, std::size_t n,
           std::size_t k, std::size_t m, const ExecPolicy& policy);

// C[n,m] += A[n,k] * B[m,k]^T
void mm_nt(const double* a, const double* b, double* c, std::size_t n,
           std::size_t k, std::size_t m, const ExecPolicy& policy);

// C[k,m] += A[n,k]^T * B[n,m]
void mm_tn(const double* a, const double* b, double* c, std::size_t n,
           std::size_t k, std::size_t m, const ExecPolicy& policy);

// Grouped variants over `groups` independent row blocks stacked vertically,
// used for per-sample attention inside a batched graph.
//
// S[g,p,q] += sum_d X[g,p,d] * Y[g,q,d]
void gmm_nt(const double* x, const double* y, double* s, std::size_t groups,
            std::size_t p, std::size_t q, std::size_t d,
            const ExecPolicy& policy);

// O[g,p,d] += sum_q X[g,p,q] * Y[g,q,d]
void gmm_nn(const double* x, const double* y, double* o, std::size_t groups,
            std::size_t p, std::size_t q, std::size_t d,
            const ExecPolicy& policy);

// O[g,q,d] += sum_p X[g,p,q] * Y[g,p,d]
void gmm_tn(const double* x, const double* y, double* o, std::size_t groups,
            std::size_t p, std::size_t q, std::size_t d,
            const ExecPolicy& policy);

}  // namespace dpmld::ad

#endif  // DPMLD_KERNELS_HPP_
