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

#ifndef DPMLD_UTIL_HPP_
#define DPMLD_UTIL_HPP_

#include <cstdint>
#include <optional>
#include <string>

namespace dpmld {

// %.{digits}g formatting. digits=9 is the on-disk dataset contract,
// digits=17 round-trips a double exactly.
std::string format_sig(double v, int digits);

// Nearest double representable by a 9-significant-digit decimal string.
// Values passed through this are fixpoints of format_sig(v, 9) + strtod,
// which is what makes dataset serialization lossless.
double quantize_sig9(double v);

// FNV-1a over a byte range / a whole file (missing file -> 0).
std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::string& path);

// Seed fallback from the DPMLD_SEED environment variable.
std::optional<std::uint64_t> env_seed();

}  // namespace dpmld

#endif  // DPMLD_UTIL_HPP_
