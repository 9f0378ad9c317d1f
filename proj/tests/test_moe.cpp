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

#include "mcsh/moe.hpp"
#include "mcsh/serialize.hpp"

using namespace mcsh;

namespace {

MoEConfig tiny_config() {
  MoEConfig c;
  c.num_layers = 2;
  c.hidden = 16;
  c.ffn_inner = 24;
  c.num_experts = 4;
  c.top_k = 2;
  c.vocab = 32;
  c.num_shared_experts = 1;
  c.seed = 17;
  return c;
}

}  // namespace

TEST_CASE("gate_scores: zero gating gives uniform probabilities") {
  MoELayer layer;
  layer.gating = Tensor({8, 4});
  Tensor t = Tensor::full({1, 8}, 0.3);
  Tensor probs = gate_scores(layer, t);
  for (int e = 0; e < 4; ++e)
    CHECK(probs[e] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("routing selects and renormalizes the top-k") {
  // Gating row 0 produces logits [1,1,0,0] for token [1,0,...].
  MoELayer layer;
  layer.gating = Tensor({4, 4});
  layer.gating.at(0, 0) = 1.0;
  layer.gating.at(0, 1) = 1.0;
  Tensor t({1, 4});
  t.at(0, 0) = 1.0;
  RoutingRecord rec = route_token(layer, t, 2);
  CHECK(rec.selected == std::vector<int>{0, 1});
  CHECK(rec.weights[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rec.weights[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("renormalized weights sum to one on random models") {
  MoEModel m = init_model(tiny_config());
  for (int id = 0; id < 16; ++id) {
    std::vector<RoutingRecord> recs;
    token_logits(m, id, &recs);
    for (const auto& rec : recs) {
      double s = 0;
      for (double w : rec.weights) s += w;
      CHECK(std::abs(s - 1.0) <= 1e-9);
      CHECK(static_cast<int>(rec.selected.size()) == 2);
    }
  }
}

TEST_CASE("identical experts make the output selection-invariant") {
  MoEConfig c = tiny_config();
  MoEModel m = init_model(c);
  // Copy expert 0 into all slots of layer 0.
  for (int e = 1; e < c.num_experts; ++e)
    m.layers[0].experts[static_cast<size_t>(e)] = m.layers[0].experts[0];
  std::mt19937_64 rng(5);
  Tensor t = kern::rms_norm(Tensor::randn({1, c.hidden}, 1.0, rng));
  Tensor y = moe_forward(m, 0, t);
  // Oracle: expert output + shared output (weights sum to 1).
  Tensor expect = kern::add(expert_forward(m.layers[0].experts[0], t),
                            expert_forward(*m.layers[0].shared, t));
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("moe_forward equals the dense-mixture oracle") {
  MoEConfig c = tiny_config();
  MoEModel m = init_model(c);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = kern::rms_norm(Tensor::randn({1, c.hidden}, 1.0, rng));
    const int layer = trial % c.num_layers;
    RoutingRecord rec;
    Tensor y = moe_forward(m, layer, t, &rec);

    // Dense mixture: every expert evaluated, non-selected weights zeroed.
    std::vector<double> w(static_cast<size_t>(c.num_experts), 0.0);
    for (size_t r = 0; r < rec.selected.size(); ++r)
      w[static_cast<size_t>(rec.selected[r])] = rec.weights[r];
    Tensor expect({1, c.hidden});
    for (int e = 0; e < c.num_experts; ++e) {
      Tensor out =
          expert_forward(m.layers[static_cast<size_t>(layer)].experts[static_cast<size_t>(e)], t);
      for (int64_t i = 0; i < out.numel(); ++i)
        expect[i] += w[static_cast<size_t>(e)] * out[i];
    }
    Tensor shared =
        expert_forward(*m.layers[static_cast<size_t>(layer)].shared, t);
    for (int64_t i = 0; i < shared.numel(); ++i) expect[i] += shared[i];

    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(std::abs(y[i] - expect[i]) < 1e-9);
  }
}

TEST_CASE("shared expert contributes unconditionally") {
  MoEConfig c = tiny_config();
  MoEModel with = init_model(c);
  MoEModel without = with;
  without.layers[0].shared.reset();
  std::mt19937_64 rng(11);
  Tensor t = kern::rms_norm(Tensor::randn({1, c.hidden}, 1.0, rng));
  Tensor a = moe_forward(with, 0, t);
  Tensor b = moe_forward(without, 0, t);
  Tensor shared = expert_forward(*with.layers[0].shared, t);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a[i] == doctest::Approx(b[i] + shared[i]).epsilon(1e-12));
}

TEST_CASE("model_forward shapes, determinism and id validation") {
  MoEConfig c = tiny_config();
  MoEModel m = init_model(c);
  Tensor logits = model_forward(m, {1, 5, 1});
  CHECK(logits.shape() == std::vector<int>{3, c.vocab});
  // No attention: repeated ids give identical rows.
  for (int v = 0; v < c.vocab; ++v) CHECK(logits.at(0, v) == logits.at(2, v));

  Tensor again = model_forward(m, {1, 5, 1});
  for (int64_t i = 0; i < logits.numel(); ++i) CHECK(logits[i] == again[i]);

  CHECK_THROWS_AS(model_forward(m, {c.vocab}), ConfigError);
}

TEST_CASE("fixed seed reproduces the model bit for bit") {
  MoEModel a = init_model(tiny_config());
  MoEModel b = init_model(tiny_config());
  auto pa = a.named_params();
  auto pb = b.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    for (int64_t j = 0; j < pa[i].second->numel(); ++j)
      CHECK((*pa[i].second)[j] == (*pb[i].second)[j]);
  }
}

TEST_CASE("tape forward matches the plain forward bit for bit") {
  MoEConfig c = tiny_config();
  MoEModel m = init_model(c);
  Tape tape;
  TapeModel tm = bind_model(tape, m, false);
  for (int id = 0; id < 8; ++id) {
    std::vector<RoutingRecord> plain_recs, tape_recs;
    Tensor plain = token_logits(m, id, &plain_recs);
    Var v = token_logits_tape(tape, tm, id, nullptr, &tape_recs);
    const Tensor& tv = tape.value(v);
    REQUIRE(tv.numel() == plain.numel());
    for (int64_t i = 0; i < plain.numel(); ++i) CHECK(plain[i] == tv[i]);
    REQUIRE(plain_recs.size() == tape_recs.size());
    for (size_t l = 0; l < plain_recs.size(); ++l) {
      CHECK(plain_recs[l].selected == tape_recs[l].selected);
      for (size_t r = 0; r < plain_recs[l].weights.size(); ++r)
        CHECK(plain_recs[l].weights[r] == tape_recs[l].weights[r]);
    }
  }
}

TEST_CASE("teacher training reduces held-out loss and skews routing") {
  MoEConfig c = tiny_config();
  c.vocab = 64;
  c.num_experts = 8;
  c.hidden = 32;
  c.ffn_inner = 48;
  GenOptions opts;
  opts.teacher_steps = 150;
  opts.teacher_batch = 16;
  TeacherStats stats;
  MoEModel m = gen_synthetic_model(c, opts, &stats);
  CHECK(stats.loss_trained < stats.loss_untrained);

  // Frequency imbalance: max/min phi > 1.5 in at least half the layers.
  const TokenSet calib = sample_token_set(model_chain(c), 32, 16, 999);
  std::map<int, std::vector<RoutingRecord>> cache;
  std::vector<std::vector<int64_t>> counts(
      static_cast<size_t>(c.num_layers),
      std::vector<int64_t>(static_cast<size_t>(c.num_experts), 0));
  for (const auto& seq : calib.sequences)
    for (int id : seq) {
      if (!cache.count(id)) token_logits(m, id, &cache[id]);
      for (int l = 0; l < c.num_layers; ++l)
        for (int e : cache[id][static_cast<size_t>(l)].selected)
          ++counts[static_cast<size_t>(l)][static_cast<size_t>(e)];
    }
  int skewed = 0;
  for (const auto& layer : counts) {
    const auto [mn, mx] = std::minmax_element(layer.begin(), layer.end());
    const double ratio =
        *mn == 0 ? std::numeric_limits<double>::infinity()
                 : static_cast<double>(*mx) / static_cast<double>(*mn);
    if (ratio > 1.5) ++skewed;
  }
  CHECK(skewed * 2 >= c.num_layers);
}

TEST_CASE("checkpoint round trip is bit exact") {
  MoEConfig c = tiny_config();
  MoEModel m = init_model(c);
  const std::string path = "/tmp/mcsh_test_ckpt.bin";
  save_checkpoint(m, path);
  MoEModel loaded = load_checkpoint(path);
  auto pa = m.named_params();
  auto pb = loaded.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i)
    for (int64_t j = 0; j < pa[i].second->numel(); ++j)
      CHECK((*pa[i].second)[j] == (*pb[i].second)[j]);

  const TokenSet eval = sample_token_set(model_chain(c), 8, 12, 5);
  CHECK(eval_nll(m, eval) == eval_nll(loaded, eval));
}

TEST_CASE("eval_nll equals a direct per-position computation") {
  MoEConfig c = tiny_config();
  MoEModel m = init_model(c);
  const TokenSet data = sample_token_set(model_chain(c), 4, 6, 77);
  double nll = 0.0;
  int64_t n = 0;
  for (const auto& seq : data.sequences)
    for (size_t i = 0; i + 1 < seq.size(); ++i) {
      Tensor logits = token_logits(m, seq[i]);
      nll += kern::logsumexp(logits) - logits[seq[i + 1]];
      ++n;
    }
  CHECK(eval_nll(m, data) == doctest::Approx(nll / n).epsilon(1e-15));
}
