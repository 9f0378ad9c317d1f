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

#include <random>

#include "test_util.hpp"

using namespace mcsh;
using mcsh::testing::grad_check;
using mcsh::testing::GradCheckResult;

TEST_CASE("loss = sum(w) gives an all-ones gradient") {
  Tape tape;
  std::mt19937_64 rng(1);
  Var w = tape.leaf(Tensor::randn({3, 4}, 1.0, rng));
  tape.backward(tape.sum(w));
  const Tensor& g = tape.grad(w);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("untouched leaves of a disjoint subgraph keep zero gradient") {
  Tape tape;
  std::mt19937_64 rng(2);
  Var a = tape.leaf(Tensor::randn({4}, 1.0, rng));
  Var b = tape.leaf(Tensor::randn({4}, 1.0, rng));
  Var unused = tape.mean(b);  // separate subgraph
  (void)unused;
  tape.backward(tape.sum(a));
  const Tensor& gb = tape.grad(b);
  for (int64_t i = 0; i < gb.numel(); ++i) CHECK(gb[i] == 0.0);
}

TEST_CASE("matmul gradient vs central finite differences") {
  std::mt19937_64 rng(3);
  auto res = grad_check(
      {Tensor::randn({5, 7}, 1.0, rng), Tensor::randn({7, 3}, 1.0, rng)},
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum(t.matmul(v[0], v[1]));
      });
  CHECK(res.pass_fraction() == 1.0);
  CHECK(res.max_rel < 1e-4);
}

TEST_CASE("elementwise and reduction ops pass the finite-difference oracle") {
  std::mt19937_64 rng(4);
  GradCheckResult agg;
  auto note = [&](const GradCheckResult& r) {
    agg.total += r.total;
    agg.passed += r.passed;
    agg.max_rel = std::max(agg.max_rel, r.max_rel);
  };

  note(grad_check({Tensor::randn({6}, 1.0, rng), Tensor::randn({6}, 1.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.sum(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
                  }));
  note(grad_check({Tensor::randn({8}, 2.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.sum(t.silu(v[0]));
                  }));
  note(grad_check({Tensor::randn({5}, 0.5, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.mean(t.exp(v[0]));
                  }));
  {
    Tensor pos({6});
    for (int i = 0; i < 6; ++i) pos[i] = 0.3 + 0.4 * i;
    note(grad_check({pos}, [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.log(v[0]));
    }));
  }
  {
    Tensor away({7});  // keep |x| >> h so the l1 kink is never crossed
    for (int i = 0; i < 7; ++i) away[i] = (i % 2 ? 1.0 : -1.0) * (0.2 + 0.1 * i);
    note(grad_check({away}, [](Tape& t, const std::vector<Var>& v) {
      return t.l1_norm(v[0]);
    }));
  }
  note(grad_check({Tensor::randn({3, 5}, 1.5, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.sum(t.softmax(v[0], 1));
                  }));
  note(grad_check({Tensor::randn({9}, 1.5, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    Var w = t.constant(Tensor::full({9}, 0.3));
                    return t.sum(t.mul(t.log_softmax(v[0], 0), w));
                  }));
  note(grad_check({Tensor::randn({10}, 1.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.logsumexp(v[0]);
                  }));
  note(grad_check({Tensor::randn({4}, 1.0, rng), Tensor::randn({4}, 1.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.sum(t.concat(v[0], v[1]));
                  }));
  note(grad_check({Tensor::randn({5, 3}, 1.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    Var rows = t.take_rows(v[0], {0, 2, 2});
                    return t.sum(t.mul(rows, rows));
                  }));
  note(grad_check({Tensor::randn({8}, 1.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    Var e = t.take_elems(v[0], {1, 1, 6});
                    return t.sum(t.silu(e));
                  }));
  note(grad_check({Tensor::randn({2, 12}, 2.0, rng)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.sum(t.rms_norm(v[0]));
                  }));
  note(grad_check({Tensor::randn({6}, 1.0, rng), Tensor::scalar(0.7)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.sum(t.scale_by(v[0], v[1]));
                  }));
  note(grad_check({Tensor::scalar(1.7)},
                  [](Tape& t, const std::vector<Var>& v) {
                    return t.reciprocal(v[0]);
                  }));

  CHECK(agg.pass_fraction() >= 0.99);
  CHECK(agg.max_rel < 1e-4);
}

TEST_CASE("kl divergence gradient in both arguments") {
  std::mt19937_64 rng(5);
  Tensor lp = Tensor::randn({6}, 1.0, rng);
  Tensor lq = Tensor::randn({6}, 1.0, rng);
  Tensor p = kern::softmax(lp, 0);
  Tensor q = kern::softmax(lq, 0);
  auto res = grad_check({p, q}, [](Tape& t, const std::vector<Var>& v) {
    return t.kl_div(v[0], v[1]);
  });
  CHECK(res.pass_fraction() == 1.0);
}

TEST_CASE("KL(softmax(Wx) || target) end-to-end gradient") {
  std::mt19937_64 rng(6);
  Tensor w = Tensor::randn({4, 5}, 1.0, rng);
  Tensor x = Tensor::randn({1, 4}, 1.0, rng);
  Tensor target = kern::softmax(Tensor::randn({1, 5}, 1.0, rng), 1);
  auto res = grad_check({w}, [&](Tape& t, const std::vector<Var>& v) {
    Var logits = t.matmul(t.constant(x), v[0]);
    return t.kl_div(t.constant(target), t.softmax(logits, 1));
  });
  CHECK(res.pass_fraction() == 1.0);
  CHECK(res.max_rel < 1e-4);
}

TEST_CASE("straight-through hard one-hot forwards argmax, backprops soft") {
  Tape tape;
  Tensor logits({3}, {0.2, 1.4, -0.5});
  Var soft = tape.softmax(tape.leaf(logits), 0);
  Var hard = tape.hard_onehot_st(soft);
  const Tensor& h = tape.value(hard);
  CHECK(h[0] == 0.0);
  CHECK(h[1] == 1.0);
  CHECK(h[2] == 0.0);

  // Gradient passes through unchanged: d(sum(w*hard))/dlogits equals the
  // gradient of sum(w*soft).
  Tape t2;
  Var l2 = t2.leaf(logits);
  Var s2 = t2.softmax(l2, 0);
  Tensor wt({3}, {0.3, -0.2, 0.9});
  t2.backward(t2.sum(t2.mul(t2.hard_onehot_st(s2), t2.constant(wt))));
  Tape t3;
  Var l3 = t3.leaf(logits);
  t3.backward(t3.sum(t3.mul(t3.softmax(l3, 0), t3.constant(wt))));
  for (int i = 0; i < 3; ++i) CHECK(t2.grad(l2)[i] == t3.grad(l3)[i]);
}

TEST_CASE("backward is deterministic bit for bit") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tape tape;
    Var a = tape.leaf(Tensor::randn({6, 6}, 1.0, rng));
    Var b = tape.leaf(Tensor::randn({6, 6}, 1.0, rng));
    Var loss = tape.mean(tape.silu(tape.matmul(a, b)));
    tape.backward(loss);
    return std::make_pair(tape.value(loss)[0], tape.grad(a));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  for (int64_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  std::mt19937_64 rng(1);
  Var a = tape.leaf(Tensor::randn({3}, 1.0, rng));
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
}

TEST_CASE("adam steps toward a quadratic minimum") {
  std::mt19937_64 rng(8);
  Tensor w = Tensor::randn({4}, 1.0, rng);
  Adam adam(0.05);
  for (int step = 0; step < 400; ++step) {
    Tape tape;
    Var v = tape.leaf(w);
    tape.backward(tape.sum(tape.mul(v, v)));
    adam.step({&w}, {&tape.grad(v)});
  }
  for (int i = 0; i < 4; ++i) CHECK(std::abs(w[i]) < 1e-2);
}
