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

#include "mcsh/corpus.hpp"

namespace mcsh {

namespace {

uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b * 0x9e3779b97f4a7c15ULL);
  return splitmix64(s);
}

}  // namespace

MarkovChain::Successors MarkovChain::successors(int a, int b) const {
  Successors out;
  const uint64_t hb = mix(seed_, static_cast<uint64_t>(b) + 1);
  const uint64_t hab =
      mix(hb, (static_cast<uint64_t>(a) << 20) ^ static_cast<uint64_t>(b));
  double total = 0.0;
  for (int i = 0; i < kBranch; ++i) {
    out.symbol[static_cast<size_t>(i)] =
        static_cast<int>(mix(hb, static_cast<uint64_t>(i) + 17) %
                         static_cast<uint64_t>(vocab_));
    const double w =
        1.0 + static_cast<double>(mix(hab, static_cast<uint64_t>(i) + 101) % 8);
    out.prob[static_cast<size_t>(i)] = w;
    total += w;
  }
  for (auto& p : out.prob) p /= total;
  return out;
}

std::vector<int> MarkovChain::sample(int length, std::mt19937_64& rng) const {
  std::vector<int> seq;
  seq.reserve(static_cast<size_t>(length));
  std::uniform_int_distribution<int> uni(0, vocab_ - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int a = uni(rng), b = uni(rng);
  for (int t = 0; t < length; ++t) {
    const Successors s = successors(a, b);
    double u = unit(rng);
    int next = s.symbol[kBranch - 1];
    for (int i = 0; i < kBranch; ++i) {
      u -= s.prob[static_cast<size_t>(i)];
      if (u <= 0.0) {
        next = s.symbol[static_cast<size_t>(i)];
        break;
      }
    }
    seq.push_back(next);
    a = b;
    b = next;
  }
  return seq;
}

TokenSet sample_token_set(const MarkovChain& chain, int num_sequences,
                          int seq_len, uint64_t stream_seed) {
  if (num_sequences < 1 || seq_len < 1)
    throw ConfigError("token set needs at least one sequence of length >= 1");
  TokenSet set;
  set.stream_seed = stream_seed;
  std::mt19937_64 rng(stream_seed);
  set.sequences.reserve(static_cast<size_t>(num_sequences));
  for (int i = 0; i < num_sequences; ++i)
    set.sequences.push_back(chain.sample(seq_len, rng));
  return set;
}

}  // namespace mcsh
