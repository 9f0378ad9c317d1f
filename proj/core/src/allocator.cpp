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

#include "mcsh/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace mcsh {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Coverage {
  bool need3 = false;
  bool need2 = false;
};

void validate_problem(const AllocationProblem& p, Coverage* cov) {
  if (p.n < 1) throw ConfigError("allocation: need at least one expert");
  if (static_cast<int>(p.cost.size()) != p.n)
    throw ConfigError("allocation: cost table size mismatch");
  for (const auto& row : p.cost)
    for (double c : row)
      if (!(c >= 0.0) || !std::isfinite(c))
        throw ConfigError("allocation: costs must be finite and >= 0");
  // The paper's coverage constraints concern blocks with several experts.
  cov->need3 = p.require_three_bit && p.n >= 2;
  cov->need2 = p.require_two_bit && p.n >= 2;
  const int min_budget = p.n + (cov->need3 ? 2 : 0) + (cov->need2 ? 1 : 0);
  const int max_budget = 3 * p.n - (cov->need2 ? 1 : 0);
  if (p.budget < p.n)
    throw InfeasibleError("infeasible budget " + std::to_string(p.budget) +
                          ": every expert needs at least 1 bit (min " +
                          std::to_string(p.n) + ")");
  if (p.budget < min_budget)
    throw InfeasibleError(
        "infeasible budget " + std::to_string(p.budget) +
        ": coverage requires >=1 expert at 3-bit and >=1 at 2-bit (min " +
        std::to_string(min_budget) + ")");
  if (cov->need2 && p.budget > max_budget)
    throw InfeasibleError("infeasible budget " + std::to_string(p.budget) +
                          ": coverage pins one expert at 2-bit (max " +
                          std::to_string(max_budget) + ")");
  if (p.budget > 3 * p.n)
    throw InfeasibleError("infeasible budget " + std::to_string(p.budget) +
                          ": experts cap at 3 bits (max " +
                          std::to_string(3 * p.n) + ")");
}

}  // namespace

BitAllocation solve_dp(const AllocationProblem& p) {
  Coverage cov;
  validate_problem(p, &cov);
  const int n = p.n, budget = p.budget;

  // g[i][b][need3][need2]: min cost of assigning experts i..n-1 exactly b
  // bits with the given coverage still outstanding.
  const auto idx = [budget](int i, int b, int n3, int n2) {
    return ((static_cast<size_t>(i) * (budget + 1) + b) << 2) |
           (static_cast<size_t>(n3) << 1) | static_cast<size_t>(n2);
  };
  std::vector<double> g(static_cast<size_t>(n + 1) * (budget + 1) * 4, kInf);
  g[idx(n, 0, 0, 0)] = 0.0;
  for (int i = n - 1; i >= 0; --i) {
    for (int b = 0; b <= budget; ++b) {
      for (int n3 = 0; n3 < 2; ++n3) {
        for (int n2 = 0; n2 < 2; ++n2) {
          double best = kInf;
          for (int j = 1; j <= 3; ++j) {
            if (j > b) break;
            const int m3 = n3 && j != 3, m2 = n2 && j != 2;
            const double tail = g[idx(i + 1, b - j, m3, m2)];
            if (tail == kInf) continue;
            const double v = p.cost[static_cast<size_t>(i)][static_cast<size_t>(j - 1)] + tail;
            if (v < best) best = v;
          }
          g[idx(i, b, n3, n2)] = best;
        }
      }
    }
  }

  const double opt = g[idx(0, budget, cov.need3, cov.need2)];
  if (opt == kInf)
    throw InfeasibleError("infeasible allocation: no assignment meets budget "
                          "and coverage");

  // Reconstruction: smallest width first yields the lexicographically
  // smallest optimal vector. Sums are recomputed exactly as in the DP, so
  // float equality is exact.
  BitAllocation out;
  out.budget = budget;
  out.objective = opt;
  out.bits.reserve(static_cast<size_t>(n));
  int b = budget, n3 = cov.need3, n2 = cov.need2;
  for (int i = 0; i < n; ++i) {
    const double target = g[idx(i, b, n3, n2)];
    for (int j = 1; j <= 3; ++j) {
      if (j > b) break;
      const int m3 = n3 && j != 3, m2 = n2 && j != 2;
      const double tail = g[idx(i + 1, b - j, m3, m2)];
      if (tail == kInf) continue;
      if (p.cost[static_cast<size_t>(i)][static_cast<size_t>(j - 1)] + tail == target) {
        out.bits.push_back(j);
        b -= j;
        n3 = m3;
        n2 = m2;
        break;
      }
    }
  }
  return out;
}

BitAllocation solve_bruteforce(const AllocationProblem& p) {
  if (p.n > 12) throw ConfigError("solve_bruteforce: n must be <= 12");
  Coverage cov;
  validate_problem(p, &cov);
  const int n = p.n;

  std::vector<int> bits(static_cast<size_t>(n), 1);
  std::vector<int> best_bits;
  double best = kInf;
  for (;;) {
    int total = 0;
    bool has3 = false, has2 = false;
    for (int v : bits) {
      total += v;
      has3 |= v == 3;
      has2 |= v == 2;
    }
    if (total == p.budget && (!cov.need3 || has3) && (!cov.need2 || has2)) {
      // Suffix fold mirrors the DP's addition order exactly.
      double obj = 0.0;
      for (int i = n - 1; i >= 0; --i)
        obj = p.cost[static_cast<size_t>(i)][static_cast<size_t>(bits[static_cast<size_t>(i)] - 1)] + obj;
      if (obj < best || (obj == best && bits < best_bits)) {
        best = obj;
        best_bits = bits;
      }
    }
    int carry = n - 1;
    while (carry >= 0 && bits[static_cast<size_t>(carry)] == 3) {
      bits[static_cast<size_t>(carry)] = 1;
      --carry;
    }
    if (carry < 0) break;
    ++bits[static_cast<size_t>(carry)];
  }
  if (best == kInf)
    throw InfeasibleError("infeasible allocation: no assignment meets budget "
                          "and coverage");
  return {best_bits, p.budget, best};
}

CostKind cost_kind_from_string(const std::string& s) {
  if (s == "pmq") return CostKind::kPmq;
  if (s == "frequency") return CostKind::kFrequency;
  if (s == "weight") return CostKind::kWeight;
  if (s == "fnorm") return CostKind::kFnorm;
  if (s == "hessian") return CostKind::kHessian;
  if (s == "random") return CostKind::kRandom;
  throw ConfigError("unknown cost kind: " + s);
}

std::string to_string(CostKind k) {
  switch (k) {
    case CostKind::kPmq: return "pmq";
    case CostKind::kFrequency: return "frequency";
    case CostKind::kWeight: return "weight";
    case CostKind::kFnorm: return "fnorm";
    case CostKind::kHessian: return "hessian";
    case CostKind::kRandom: return "random";
  }
  throw ConfigError("unknown cost kind");
}

CostTable baseline_cost(const CalibrationStats& stats,
                        const QuantErrorTable& errors, CostKind kind,
                        uint64_t random_seed, const CostTable* hessian_sens) {
  const size_t B = stats.phi.size();
  CostTable cost(B);
  std::mt19937_64 rng(random_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (size_t l = 0; l < B; ++l) {
    const size_t E = stats.phi[l].size();
    cost[l].assign(E, {0.0, 0.0, 0.0});
    for (size_t e = 0; e < E; ++e) {
      for (size_t j = 0; j < 3; ++j) {
        const double width = static_cast<double>(j + 1);
        switch (kind) {
          case CostKind::kFrequency:
            cost[l][e][j] = stats.phi[l][e] * (3.0 - width);
            break;
          case CostKind::kWeight:
            cost[l][e][j] = stats.weight[l][e] * (3.0 - width);
            break;
          case CostKind::kFnorm:
            cost[l][e][j] = errors.eps[l][e][j];
            break;
          case CostKind::kHessian:
            if (!hessian_sens)
              throw ConfigError("hessian cost kind needs a sensitivity table");
            cost[l][e][j] = (*hessian_sens)[l][e][j];
            break;
          case CostKind::kRandom:
            cost[l][e][j] = unit(rng);
            break;
          case CostKind::kPmq:
            throw ConfigError("pmq cost comes from importance_cost");
        }
      }
    }
  }
  return cost;
}

int layer_budget(int num_experts, double b_avg) {
  if (b_avg <= 0.0) throw ConfigError("b_avg must be positive");
  return static_cast<int>(std::llround(num_experts * b_avg));
}

ModelAllocation allocate_model(const CostTable& cost, double b_avg,
                               bool coverage, bool global_budget) {
  ModelAllocation out;
  if (cost.empty()) throw ConfigError("allocate_model: empty cost table");
  if (!global_budget) {
    for (const auto& layer_cost : cost) {
      AllocationProblem p;
      p.n = static_cast<int>(layer_cost.size());
      p.cost = layer_cost;
      p.budget = layer_budget(p.n, b_avg);
      p.require_three_bit = coverage;
      p.require_two_bit = coverage;
      BitAllocation a = solve_dp(p);
      out.total_objective += a.objective;
      out.layers.push_back(std::move(a));
    }
    return out;
  }
  // Cross-layer mode: one pooled budget, coverage applied globally.
  AllocationProblem p;
  for (const auto& layer_cost : cost)
    p.cost.insert(p.cost.end(), layer_cost.begin(), layer_cost.end());
  p.n = static_cast<int>(p.cost.size());
  p.budget = layer_budget(p.n, b_avg);
  p.require_three_bit = coverage;
  p.require_two_bit = coverage;
  BitAllocation flat = solve_dp(p);
  out.total_objective = flat.objective;
  size_t pos = 0;
  for (const auto& layer_cost : cost) {
    BitAllocation a;
    a.bits.assign(flat.bits.begin() + static_cast<int64_t>(pos),
                  flat.bits.begin() + static_cast<int64_t>(pos + layer_cost.size()));
    a.budget = 0;
    for (int v : a.bits) a.budget += v;
    double obj = 0.0;
    for (size_t i = layer_cost.size(); i-- > 0;)
      obj = layer_cost[i][static_cast<size_t>(a.bits[i] - 1)] + obj;
    a.objective = obj;
    pos += layer_cost.size();
    out.layers.push_back(std::move(a));
  }
  return out;
}

std::vector<SweepPoint> allocation_sweep(const CostTable& cost,
                                         const std::vector<double>& b_avgs,
                                         bool coverage) {
  std::vector<SweepPoint> out;
  out.reserve(b_avgs.size());
  for (double b : b_avgs)
    out.push_back({b, allocate_model(cost, b, coverage, false)});
  return out;
}

}  // namespace mcsh
