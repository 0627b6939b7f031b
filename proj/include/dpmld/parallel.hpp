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

#ifndef DPMLD_PARALLEL_HPP_
#define DPMLD_PARALLEL_HPP_

#include <cstddef>

namespace dpmld {

// Execution policy for data-parallel kernels. threads <= 1 selects the plain
// serial loop, which doubles as the reference implementation in tests; any
// larger value enables the OpenMP path with that many threads.
struct ExecPolicy {
  int threads = 1;
};

// Runs fn(i) for i in [0, n). The body must write only locations owned by
// iteration i and must not carry reductions across iterations; under that
// contract the result is bit-identical for every thread count.
template <typename Fn>
void parallel_for(std::size_t n, const ExecPolicy& policy, Fn&& fn) {
  if (policy.threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(policy.threads)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    fn(static_cast<std::size_t>(i));
  }
#else
  for (std::size_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace dpmld

#endif  // DPMLD_PARALLEL_HPP_
