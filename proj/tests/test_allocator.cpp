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

#include "mcsh/allocator.hpp"

using namespace mcsh;

namespace {

AllocationProblem random_problem(std::mt19937_64& rng, int max_n = 10,
                                 bool monotone = false) {
  AllocationProblem p;
  p.n = 1 + static_cast<int>(rng() % static_cast<uint64_t>(max_n));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < p.n; ++i) {
    std::array<double, 3> c{unit(rng), unit(rng), unit(rng)};
    if (monotone) std::sort(c.rbegin(), c.rend());
    p.cost.push_back(c);
  }
  const bool cov = p.n >= 2;
  const int lo = cov ? p.n + 3 : p.n;
  const int hi = cov ? 3 * p.n - 1 : 3 * p.n;
  p.budget = lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
  return p;
}

void check_constraints(const AllocationProblem& p, const BitAllocation& a) {
  REQUIRE(static_cast<int>(a.bits.size()) == p.n);
  int total = 0;
  bool has3 = false, has2 = false;
  for (int b : a.bits) {
    REQUIRE(b >= 1);
    REQUIRE(b <= 3);
    total += b;
    has3 |= b == 3;
    has2 |= b == 2;
  }
  CHECK(total == p.budget);
  if (p.n >= 2) {
    if (p.require_three_bit) CHECK(has3);
    if (p.require_two_bit) CHECK(has2);
  }
}

}  // namespace

TEST_CASE("two experts and budget five force a {3,2} split") {
  AllocationProblem p;
  p.n = 2;
  p.cost = {{9, 5, 1}, {9, 2, 8}};
  p.budget = 5;
  BitAllocation a = solve_dp(p);
  check_constraints(p, a);
  // Feasible points: [3,2] cost 1+2=3 and [2,3] cost 5+8=13.
  CHECK(a.bits == std::vector<int>{3, 2});
  CHECK(a.objective == doctest::Approx(3.0));
}

TEST_CASE("mixtral-style block: eight experts at two average bits") {
  std::mt19937_64 rng(3);
  AllocationProblem p;
  p.n = 8;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 8; ++i) {
    std::array<double, 3> c{unit(rng), unit(rng), unit(rng)};
    std::sort(c.rbegin(), c.rend());
    p.cost.push_back(c);
  }
  p.budget = layer_budget(8, 2.0);
  CHECK(p.budget == 16);  // n*k with k=2
  BitAllocation a = solve_dp(p);
  check_constraints(p, a);
}

TEST_CASE("dp matches the brute-force oracle exactly") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 300; ++trial) {
    AllocationProblem p = random_problem(rng);
    BitAllocation dp = solve_dp(p);
    BitAllocation bf = solve_bruteforce(p);
    CHECK(dp.objective == bf.objective);  // exact, same fold order
    CHECK(dp.bits == bf.bits);            // lexicographic tie rule
    check_constraints(p, dp);
  }
}

TEST_CASE("ties resolve to the lexicographically smallest vector") {
  AllocationProblem p;
  p.n = 3;
  p.cost = {{1, 1, 1}, {1, 1, 1}, {1, 1, 1}};
  p.budget = 6;
  p.require_three_bit = false;
  p.require_two_bit = false;
  BitAllocation a = solve_dp(p);
  CHECK(a.bits == std::vector<int>{1, 2, 3});
  CHECK(a.bits == solve_bruteforce(p).bits);
}

TEST_CASE("single expert ignores coverage") {
  AllocationProblem p;
  p.n = 1;
  p.cost = {{3, 2, 1}};
  p.budget = 2;
  BitAllocation a = solve_dp(p);
  CHECK(a.bits == std::vector<int>{2});
}

TEST_CASE("infeasible budgets name the violated constraint") {
  AllocationProblem p;
  p.n = 2;
  p.cost = {{1, 1, 1}, {1, 1, 1}};

  p.budget = 4;  // below the n+3 coverage minimum
  CHECK_THROWS_WITH_AS(solve_dp(p),
                       doctest::Contains("coverage"), InfeasibleError);

  p.budget = 1;  // below one bit per expert
  CHECK_THROWS_WITH_AS(solve_dp(p),
                       doctest::Contains("at least 1 bit"), InfeasibleError);

  p.budget = 6;  // coverage pins one expert at 2 bits
  CHECK_THROWS_AS(solve_dp(p), InfeasibleError);

  p.require_three_bit = false;
  p.require_two_bit = false;
  p.budget = 7;  // above 3 bits per expert
  CHECK_THROWS_AS(solve_dp(p), InfeasibleError);

  CHECK_THROWS_AS(solve_bruteforce(p), InfeasibleError);
}

TEST_CASE("objective is monotone non-increasing in the budget") {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 50; ++trial) {
    AllocationProblem p = random_problem(rng, 8, /*monotone=*/true);
    const bool cov = p.n >= 2;
    const int lo = cov ? p.n + 3 : p.n;
    const int hi = cov ? 3 * p.n - 1 : 3 * p.n;
    double prev = -1.0;
    for (int budget = lo; budget <= hi; ++budget) {
      p.budget = budget;
      const double obj = solve_dp(p).objective;
      if (prev >= 0.0) CHECK(obj <= prev);
      prev = obj;
    }
  }
}

TEST_CASE("positive cost scaling leaves the allocation unchanged") {
  std::mt19937_64 rng(61);
  // Continuous costs with random scales.
  for (int trial = 0; trial < 40; ++trial) {
    AllocationProblem p = random_problem(rng, 9);
    BitAllocation base = solve_dp(p);
    std::uniform_real_distribution<double> unit(0.1, 10.0);
    AllocationProblem scaled = p;
    const double lambda = unit(rng);
    for (auto& row : scaled.cost)
      for (auto& c : row) c *= lambda;
    CHECK(solve_dp(scaled).bits == base.bits);
  }
  // Tie-rich integer costs with exact power-of-two scaling.
  AllocationProblem p;
  p.n = 4;
  p.cost = {{2, 1, 1}, {1, 1, 2}, {2, 2, 1}, {1, 2, 1}};
  p.budget = 9;
  BitAllocation base = solve_dp(p);
  for (double lambda : {0.5, 2.0, 8.0}) {
    AllocationProblem scaled = p;
    for (auto& row : scaled.cost)
      for (auto& c : row) c *= lambda;
    CHECK(solve_dp(scaled).bits == base.bits);
  }
}

TEST_CASE("baseline cost tables") {
  CalibrationStats stats;
  stats.total_tokens = 100;
  stats.counts = {{80, 60, 40, 20}};
  stats.phi = {{0.8, 0.6, 0.4, 0.2}};
  stats.weight = {{0.5, 0.3, 0.15, 0.05}};
  QuantErrorTable errors;
  errors.eps = {{{4, 2, 1}, {8, 5, 2}, {3, 1, 0.5}, {2, 1.5, 0.25}}};

  // fnorm is definitionally importance_cost with alpha=beta=0, gamma=1.
  CostTable fn = baseline_cost(stats, errors, CostKind::kFnorm);
  CostTable imp = importance_cost(stats, errors, 0, 0, 1);
  for (size_t e = 0; e < 4; ++e)
    for (size_t j = 0; j < 3; ++j) CHECK(fn[0][e][j] == imp[0][e][j]);

  // frequency ranks by phi: the most frequent expert gets the widest width.
  CostTable freq = baseline_cost(stats, errors, CostKind::kFrequency);
  AllocationProblem p;
  p.n = 4;
  p.cost.assign(freq[0].begin(), freq[0].end());
  p.budget = 8;  // average 2 bits
  BitAllocation a = solve_dp(p);
  CHECK(a.bits[0] == 3);  // phi=0.8
  CHECK(a.bits[3] == 1);  // phi=0.2
  CHECK(a.bits[0] >= a.bits[1]);
  CHECK(a.bits[1] >= a.bits[2]);
  CHECK(a.bits[2] >= a.bits[3]);

  // random is reproducible under the same seed and differs across seeds.
  CostTable r1 = baseline_cost(stats, errors, CostKind::kRandom, 7);
  CostTable r2 = baseline_cost(stats, errors, CostKind::kRandom, 7);
  CostTable r3 = baseline_cost(stats, errors, CostKind::kRandom, 8);
  CHECK(r1[0][2][1] == r2[0][2][1]);
  CHECK(r1[0][2][1] != r3[0][2][1]);

  CHECK_THROWS_AS(baseline_cost(stats, errors, CostKind::kHessian), ConfigError);
  CHECK_THROWS_AS(baseline_cost(stats, errors, CostKind::kPmq), ConfigError);
  CHECK_THROWS_AS(cost_kind_from_string("bogus"), ConfigError);
  CHECK(cost_kind_from_string("pmq") == CostKind::kPmq);
}

TEST_CASE("allocation sweep: saturated budget and monotone objective") {
  std::mt19937_64 rng(71);
  CostTable cost(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& layer : cost) {
    layer.resize(6);
    for (auto& row : layer) {
      row = {unit(rng), unit(rng), unit(rng)};
      std::sort(row.rbegin(), row.rend());
    }
  }
  // Saturated budget with coverage off: everything lands on 3 bits.
  ModelAllocation sat = allocate_model(cost, 3.0, /*coverage=*/false);
  for (size_t l = 0; l < 2; ++l) {
    double expect = 0.0;
    for (size_t i = cost[l].size(); i-- > 0;) expect = cost[l][i][2] + expect;
    for (int b : sat.layers[l].bits) CHECK(b == 3);
    CHECK(sat.layers[l].objective == expect);
  }

  const std::vector<double> grid{1.5, 1.75, 2.0, 2.25, 2.5};
  auto sweep = allocation_sweep(cost, grid);
  REQUIRE(sweep.size() == grid.size());
  for (size_t i = 1; i < sweep.size(); ++i)
    CHECK(sweep[i].allocation.total_objective <=
          sweep[i - 1].allocation.total_objective);
}

TEST_CASE("global budget mode pools the whole model") {
  CostTable cost(3);
  for (auto& layer : cost) layer.assign(4, {3.0, 2.0, 1.0});
  ModelAllocation g = allocate_model(cost, 2.0, true, /*global_budget=*/true);
  int total = 0;
  for (const auto& l : g.layers)
    for (int b : l.bits) total += b;
  CHECK(total == layer_budget(12, 2.0));
  CHECK(g.layers.size() == 3);
}
