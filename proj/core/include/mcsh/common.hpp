// Copyright 2026 The mcsh Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MCSH_COMMON_HPP
#define MCSH_COMMON_HPP

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mcsh {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad shapes, out-of-range indices, contract violations on tensor ops.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid or inconsistent run configuration / file inputs. CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// Bit-allocation problem has no feasible assignment. CLI exit code 3.
struct InfeasibleError : Error {
  using Error::Error;
};

// NaN/Inf encountered, factorization failure, diverged training. CLI exit 4.
struct NumericError : Error {
  using Error::Error;
};

// splitmix64; used to derive independent named seed streams from one seed.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  uint64_t s = base ^ h;
  return splitmix64(s);
}

// FNV-1a over bytes; stable content hashes for config provenance.
inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v);

// Runs fn(i) for i in [0, n) on up to max_threads workers. Results must be
// written to disjoint, preallocated slots; the index->work mapping is fixed,
// so output is identical for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn,
                  int max_threads = 0);

}  // namespace mcsh

#endif  // MCSH_COMMON_HPP
