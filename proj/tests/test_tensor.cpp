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
#include <random>

#include "mcsh/tensor.hpp"

using namespace mcsh;

TEST_CASE("matmul identity and hand cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {2, 3, 4, 5});
  Tensor c = kern::matmul(eye, b);
  for (int i = 0; i < 4; ++i) CHECK(c[i] == b[i]);

  Tensor a({1, 2}, {1, 2});
  Tensor v({2, 1}, {3, 4});
  Tensor r = kern::matmul(a, v);
  CHECK(r.numel() == 1);
  CHECK(r[0] == 11.0);
}

TEST_CASE("matmul shape mismatch throws") {
  Tensor a({2, 3});
  Tensor b({2, 3});
  CHECK_THROWS_AS(kern::matmul(a, b), ShapeError);
}

TEST_CASE("softmax symmetry, stabilization and direct formula") {
  Tensor z({3}, {0, 0, 0});
  Tensor s = kern::softmax(z, 0);
  for (int i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Tensor big({2}, {1000, 0});
  Tensor sb = kern::softmax(big, 0);
  CHECK(std::abs(sb[0] - 1.0) < 1e-12);
  CHECK(std::abs(sb[1] - 0.0) < 1e-12);

  Tensor x({3}, {1, 2, 3});
  Tensor sx = kern::softmax(x, 0);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) {
    const double expect = std::exp(x[i]) / denom;
    CHECK(std::abs(sx[i] - expect) / expect < 1e-12);
  }
}

TEST_CASE("softmax rows/columns sum to one") {
  std::mt19937_64 rng(7);
  Tensor m = Tensor::randn({5, 9}, 2.0, rng);
  Tensor rows = kern::softmax(m, 1);
  for (int i = 0; i < 5; ++i) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += rows.at(i, j);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  Tensor cols = kern::softmax(m, 0);
  for (int j = 0; j < 9; ++j) {
    double s = 0;
    for (int i = 0; i < 5; ++i) s += cols.at(i, j);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("topk selection and tie rule") {
  Tensor x({3}, {0.1, 0.9, 0.5});
  TopK t = topk(x, 2);
  CHECK(t.indices == std::vector<int>{1, 2});
  CHECK(t.values[0] == 0.9);

  Tensor tie({3}, {0.5, 0.5, 0.1});
  TopK t2 = topk(tie, 1);
  CHECK(t2.indices == std::vector<int>{0});

  CHECK_THROWS_AS(topk(x, 0), ShapeError);
  CHECK_THROWS_AS(topk(x, 4), ShapeError);
}

TEST_CASE("topk equals full-sort prefix on random vectors") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 40);
    const int k = 1 + static_cast<int>(rng() % n);
    Tensor x = Tensor::randn({n}, 1.0, rng);
    if (trial % 3 == 0 && n > 2) x[1] = x[0];  // exercise ties
    TopK t = topk(x, k);

    // Oracle: stable sort of (value desc, index asc) pairs.
    std::vector<std::pair<double, int>> pairs;
    for (int i = 0; i < n; ++i) pairs.emplace_back(-x[i], i);
    std::sort(pairs.begin(), pairs.end());
    for (int i = 0; i < k; ++i) {
      CHECK(t.indices[static_cast<size_t>(i)] == pairs[static_cast<size_t>(i)].second);
      CHECK(t.values[static_cast<size_t>(i)] == -pairs[static_cast<size_t>(i)].first);
    }
  }
}

TEST_CASE("non-finite results are rejected") {
  Tensor x({1}, {1000.0});
  CHECK_THROWS_AS(kern::exp(x), NumericError);
  Tensor neg({1}, {-1.0});
  CHECK_THROWS_AS(kern::log(neg), NumericError);
}

TEST_CASE("seeded randn is bit-identical run to run") {
  std::mt19937_64 a(42), b(42);
  Tensor ta = Tensor::randn({16, 16}, 1.0, a);
  Tensor tb = Tensor::randn({16, 16}, 1.0, b);
  for (int64_t i = 0; i < ta.numel(); ++i) CHECK(ta[i] == tb[i]);
}

TEST_CASE("rms_norm normalizes each row") {
  std::mt19937_64 rng(3);
  Tensor m = Tensor::randn({4, 32}, 3.0, rng);
  Tensor n = kern::rms_norm(m);
  for (int i = 0; i < 4; ++i) {
    double ms = 0;
    for (int j = 0; j < 32; ++j) ms += n.at(i, j) * n.at(i, j);
    CHECK(ms / 32 == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("concat and take ops") {
  Tensor a({2}, {1, 2});
  Tensor b({3}, {3, 4, 5});
  Tensor c = kern::concat(a, b);
  CHECK(c.numel() == 5);
  CHECK(c[4] == 5.0);

  Tensor m({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor rows = kern::take_rows(m, {2, 0});
  CHECK(rows.at(0, 0) == 5.0);
  CHECK(rows.at(1, 1) == 2.0);
  CHECK_THROWS_AS(kern::take_rows(m, {3}), ShapeError);

  Tensor e = kern::take_elems(c, {0, 4});
  CHECK(e[0] == 1.0);
  CHECK(e[1] == 5.0);
}
