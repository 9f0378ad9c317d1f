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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mcsh/importance.hpp"

using namespace mcsh;

namespace {

MoEConfig small_config() {
  MoEConfig c;
  c.num_layers = 2;
  c.hidden = 24;
  c.ffn_inner = 32;
  c.num_experts = 4;
  c.top_k = 2;
  c.vocab = 48;
  c.num_shared_experts = 1;
  c.seed = 23;
  return c;
}

}  // namespace

TEST_CASE("single-token calibration matches the routing record directly") {
  MoEConfig c = small_config();
  MoEModel m = init_model(c);
  TokenSet one;
  one.sequences = {{7}};
  CalibrationStats stats = collect_stats(m, one);
  std::vector<RoutingRecord> recs;
  token_logits(m, 7, &recs);
  CHECK(stats.total_tokens == 1);
  for (int l = 0; l < c.num_layers; ++l) {
    int64_t n_total = 0;
    for (int e = 0; e < c.num_experts; ++e) {
      const bool sel = std::find(recs[static_cast<size_t>(l)].selected.begin(),
                                 recs[static_cast<size_t>(l)].selected.end(),
                                 e) != recs[static_cast<size_t>(l)].selected.end();
      n_total += stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)];
      if (sel) {
        CHECK(stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)] == 1);
        const size_t rank = static_cast<size_t>(
            std::find(recs[static_cast<size_t>(l)].selected.begin(),
                      recs[static_cast<size_t>(l)].selected.end(), e) -
            recs[static_cast<size_t>(l)].selected.begin());
        CHECK(stats.weight[static_cast<size_t>(l)][static_cast<size_t>(e)] ==
              doctest::Approx(recs[static_cast<size_t>(l)].weights[rank])
                  .epsilon(1e-12));
      } else {
        CHECK(stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)] == 0);
        CHECK(stats.weight[static_cast<size_t>(l)][static_cast<size_t>(e)] == 0.0);
      }
    }
    CHECK(n_total == c.top_k);
  }
}

TEST_CASE("accounting identities: sum phi = k, sum w = 1, w <= phi") {
  MoEConfig c = small_config();
  MoEModel m = init_model(c);
  const TokenSet calib = sample_token_set(model_chain(c), 24, 12, 321);
  CalibrationStats stats = collect_stats(m, calib);
  CHECK(stats.total_tokens == 24 * 12);
  for (int l = 0; l < c.num_layers; ++l) {
    int64_t counts = 0;
    double phi_sum = 0.0, w_sum = 0.0;
    for (int e = 0; e < c.num_experts; ++e) {
      counts += stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)];
      phi_sum += stats.phi[static_cast<size_t>(l)][static_cast<size_t>(e)];
      w_sum += stats.weight[static_cast<size_t>(l)][static_cast<size_t>(e)];
      CHECK(stats.weight[static_cast<size_t>(l)][static_cast<size_t>(e)] <=
            stats.phi[static_cast<size_t>(l)][static_cast<size_t>(e)] + 1e-12);
    }
    CHECK(counts == stats.total_tokens * c.top_k);  // sum phi = k exactly
    CHECK(phi_sum == doctest::Approx(c.top_k).epsilon(1e-12));
    CHECK(std::abs(w_sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("expert counts are binomially stable across disjoint samples") {
  MoEConfig c = small_config();
  c.vocab = 512;  // many distinct tokens so occurrence noise dominates
  MoEModel m = init_model(c);
  const TokenSet a = sample_token_set(model_chain(c), 64, 16, 1001);
  const TokenSet b = sample_token_set(model_chain(c), 64, 16, 2002);
  CalibrationStats sa = collect_stats(m, a);
  CalibrationStats sb = collect_stats(m, b);
  const double n = static_cast<double>(sb.total_tokens);
  for (int l = 0; l < c.num_layers; ++l)
    for (int e = 0; e < c.num_experts; ++e) {
      const double p = sa.phi[static_cast<size_t>(l)][static_cast<size_t>(e)];
      const double expect = p * n;
      // Both samples are noisy and adjacent tokens correlate through the
      // chain, so the tolerance is a coarse stability band, not a strict
      // binomial 3-sigma.
      const double sigma = std::sqrt(std::max(1.0, 2.0 * n * p * (1.0 - p)));
      const double got = static_cast<double>(
          sb.counts[static_cast<size_t>(l)][static_cast<size_t>(e)]);
      CHECK(std::abs(got - expect) <= 6.0 * sigma + 10.0);
    }
}

TEST_CASE("never-activated experts have phi = 0 and eps = 0") {
  MoEConfig c = small_config();
  MoEModel m = init_model(c);
  // Tie expert E-1's gating column with columns 0 and 1: equal scores break
  // toward lower indices, so the last expert never enters the top-2.
  const int dead = c.num_experts - 1;
  for (int h = 0; h < c.hidden; ++h) {
    m.layers[0].gating.at(h, 1) = m.layers[0].gating.at(h, 0);
    m.layers[0].gating.at(h, dead) = m.layers[0].gating.at(h, 0);
  }
  const TokenSet calib = sample_token_set(model_chain(c), 16, 12, 55);
  CalibrationCapture cap = run_calibration(m, calib);
  CHECK(cap.stats.counts[0][static_cast<size_t>(dead)] == 0);
  CHECK(cap.stats.phi[0][static_cast<size_t>(dead)] == 0.0);
  for (int bits : {1, 2, 3})
    CHECK(compute_quant_error(m, cap, 0, dead, bits) == 0.0);
}

TEST_CASE("identity replacement produces exactly zero eps") {
  MoEConfig c = small_config();
  MoEModel m = init_model(c);
  const TokenSet calib = sample_token_set(model_chain(c), 8, 10, 77);
  CalibrationCapture cap = run_calibration(m, calib);
  for (int l = 0; l < c.num_layers; ++l)
    for (int e = 0; e < c.num_experts; ++e) {
      const ExpertWeights& orig =
          m.layers[static_cast<size_t>(l)].experts[static_cast<size_t>(e)];
      CHECK(quant_error_for_replacement(m, cap, l, e, orig) == 0.0);
    }
}

TEST_CASE("eps shrinks with more bits on the busiest experts") {
  MoEConfig c = small_config();
  MoEModel m = gen_synthetic_model(c, {.teacher_steps = 80, .teacher_batch = 12});
  const TokenSet calib = sample_token_set(model_chain(c), 32, 16, 88);
  CalibrationCapture cap = run_calibration(m, calib);
  QuantErrorTable table = compute_quant_error_table(m, cap);
  for (int l = 0; l < c.num_layers; ++l) {
    // busiest expert of the layer
    int best = 0;
    for (int e = 1; e < c.num_experts; ++e)
      if (cap.stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)] >
          cap.stats.counts[static_cast<size_t>(l)][static_cast<size_t>(best)])
        best = e;
    const auto& eps = table.eps[static_cast<size_t>(l)][static_cast<size_t>(best)];
    CHECK(eps[2] <= eps[0]);  // 3-bit distortion <= 1-bit distortion
    CHECK(eps[0] > 0.0);
  }
}

TEST_CASE("eps equals a from-scratch recomputation ofper-sequence norms") {
  MoEConfig c = small_config();
  MoEModel m = init_model(c);
  const TokenSet calib = sample_token_set(model_chain(c), 6, 8, 99);
  CalibrationCapture cap = run_calibration(m, calib);
  const int l = 1, e = 2, bits = 2;

  // Oracle: quantize the expert identically, then rebuild logits for every
  // token with a full forward through the patched model.
  QuantizedExpert qe = quantize_expert(
      m.layers[static_cast<size_t>(l)].experts[static_cast<size_t>(e)], bits,
      cap.hess_input(l, e), cap.hess_hidden(l, e), QuantOptions{});
  const ExpertWeights dense = qe.dense();
  ExpertPatch patch{l, e, &dense};
  ForwardHooks hooks;
  hooks.patch = &patch;
  double total = 0.0;
  for (const auto& seq : calib.sequences) {
    double sq = 0.0;
    for (int id : seq) {
      Tensor noisy = token_logits(m, id, nullptr, &hooks);
      Tensor clean = token_logits(m, id);
      for (int64_t i = 0; i < noisy.numel(); ++i) {
        const double d = noisy[i] - clean[i];
        sq += d * d;
      }
    }
    total += std::sqrt(sq);
  }
  const double oracle = total / static_cast<double>(calib.sequences.size());
  const double got = compute_quant_error(m, cap, l, e, bits);
  CHECK(got == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("importance cost collapses, zeroes and multiplies correctly") {
  CalibrationStats stats;
  stats.total_tokens = 10;
  stats.counts = {{6, 0}};
  stats.phi = {{0.6, 0.0}};
  stats.weight = {{0.45, 0.0}};
  QuantErrorTable errors;
  errors.eps = {{{3.0, 2.0, 1.0}, {5.0, 4.0, 3.0}}};

  // alpha=beta=0, gamma=1: exactly the F-norm table (for live experts).
  CostTable fn = importance_cost(stats, errors, 0, 0, 1);
  for (int j = 0; j < 3; ++j) CHECK(fn[0][0][static_cast<size_t>(j)] == errors.eps[0][0][static_cast<size_t>(j)]);
  // Dead expert is free at every width even with zero exponents.
  for (int j = 0; j < 3; ++j) CHECK(fn[0][1][static_cast<size_t>(j)] == 0.0);

  // alpha=beta=gamma=1: hand-computed products.
  CostTable c1 = importance_cost(stats, errors, 1, 1, 1);
  CHECK(c1[0][0][0] == doctest::Approx(0.6 * 0.45 * 3.0).epsilon(1e-15));
  CHECK(c1[0][0][2] == doctest::Approx(0.6 * 0.45 * 1.0).epsilon(1e-15));

  // Monotone in j whenever eps is.
  for (int j = 1; j < 3; ++j)
    CHECK(c1[0][0][static_cast<size_t>(j)] <= c1[0][0][static_cast<size_t>(j - 1)]);

  CHECK_THROWS_AS(importance_cost(stats, errors, -1, 0, 0), ConfigError);
}

TEST_CASE("hessian sensitivity matches a direct recomputation") {
  MoEConfig c = small_config();
  MoEModel m = init_model(c);
  const TokenSet calib = sample_token_set(model_chain(c), 8, 8, 13);
  CalibrationCapture cap = run_calibration(m, calib);
  CostTable sens = hessian_sensitivity(m, cap);

  const int l = 0, e = 1;
  auto frob_sq = [](const Tensor& a, const Tensor& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double d = a[i] - b[i];
      acc += d * d;
    }
    return acc;
  };
  auto trace = [](const Tensor& h) {
    double t = 0;
    for (int i = 0; i < h.rows(); ++i) t += h.at(i, i);
    return t;
  };
  const ExpertWeights& w = m.layers[0].experts[1];
  const double tr_in = trace(cap.hess_input(l, e).matrix());
  const double tr_hid = trace(cap.hess_hidden(l, e).matrix());
  const int j = 2;  // 2-bit
  const double expect =
      tr_in * (frob_sq(w.w_gate, dequantize(rtn_quantize(w.w_gate, j, 32))) +
               frob_sq(w.w_up, dequantize(rtn_quantize(w.w_up, j, 32)))) +
      tr_hid * frob_sq(w.w_down, dequantize(rtn_quantize(w.w_down, j, 32)));
  CHECK(sens[0][1][1] == doctest::Approx(expect).epsilon(1e-12));
}
