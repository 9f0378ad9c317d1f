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

#ifndef MCSH_CORPUS_HPP
#define MCSH_CORPUS_HPP

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "mcsh/common.hpp"

namespace mcsh {

// Seeded order-2 Markov chain over a symbol vocabulary. The candidate
// successors of a state (a, b) depend on b alone while their mixture weights
// depend on the full (a, b) pair; a memoryless per-token model can therefore
// learn a concentrated next-symbol distribution from this corpus family.
// All structure is derived from the seed by hashing, so there is no
// transition table to store.
class MarkovChain {
 public:
  static constexpr int kBranch = 4;

  MarkovChain(int vocab, uint64_t seed) : vocab_(vocab), seed_(seed) {
    if (vocab < 2) throw ConfigError("markov chain needs vocab >= 2");
  }

  struct Successors {
    std::array<int, kBranch> symbol;
    std::array<double, kBranch> prob;
  };

  Successors successors(int a, int b) const;
  int vocab() const { return vocab_; }

  std::vector<int> sample(int length, std::mt19937_64& rng) const;

 private:
  int vocab_;
  uint64_t seed_;
};

// A bag of token-id sequences sampled from one chain; doubles as calibration
// data, teacher-training stream source and held-out evaluation split
// depending on the stream seed.
struct TokenSet {
  std::vector<std::vector<int>> sequences;
  uint64_t stream_seed = 0;

  int64_t total_tokens() const {
    int64_t n = 0;
    for (const auto& s : sequences) n += static_cast<int64_t>(s.size());
    return n;
  }
};

TokenSet sample_token_set(const MarkovChain& chain, int num_sequences,
                          int seq_len, uint64_t stream_seed);

}  // namespace mcsh

#endif  // MCSH_CORPUS_HPP
