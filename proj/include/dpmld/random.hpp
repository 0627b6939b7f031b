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

#ifndef DPMLD_RANDOM_HPP_
#define DPMLD_RANDOM_HPP_

#include <cstdint>
#include <random>

namespace dpmld {

// SplitMix64 finalizer. Decorrelates user-chosen seeds and fork tags before
// they reach the engine.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic pseudorandom stream with named forks.
//
// fork(tag) derives a child stream from the parent's seed and the tag alone,
// never from the parent's draw position, so a forked stream is reproducible
// no matter how many draws the parent has already produced. Forking twice
// with the same tag yields the same stream; callers pick distinct tags.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed)
      : seed_(seed), engine_(splitmix64(seed)) {}

  RandomStream fork(std::uint64_t tag) const {
    return RandomStream(
        splitmix64(seed_ ^ splitmix64(tag + 0x632be59bd9b4e019ULL)));
  }

  // Uniform draw strictly inside (0, 1); safe to feed to log().
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t bits() { return engine_(); }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace dpmld

#endif  // DPMLD_RANDOM_HPP_
