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

#ifndef MCSH_ALLOCATOR_HPP
#define MCSH_ALLOCATOR_HPP

#include <array>
#include <string>
#include <vector>

#include "mcsh/importance.hpp"

namespace mcsh {

// One MoE block's bit-allocation instance: pick a width in {1,2,3} per expert
// minimizing total cost subject to an exact bit budget and, when enabled, at
// least one 3-bit and one 2-bit expert.
struct AllocationProblem {
  int n = 0;
  std::vector<std::array<double, 3>> cost;  // [expert][width-1]
  int budget = 0;
  bool require_three_bit = true;
  bool require_two_bit = true;
};

struct BitAllocation {
  std::vector<int> bits;
  int budget = 0;
  double objective = 0.0;
};

// Exact DP over (expert, remaining budget, outstanding coverage); global
// minimum with ties broken toward the lexicographically smallest bits vector.
// Coverage flags are ignored for n < 2. Throws InfeasibleError naming the
// violated constraint when no assignment exists.
BitAllocation solve_dp(const AllocationProblem& p);

// 3^n enumeration oracle, n <= 12. Same objective summation order and tie
// rule as solve_dp so results match exactly.
BitAllocation solve_bruteforce(const AllocationProblem& p);

enum class CostKind { kPmq, kFrequency, kWeight, kFnorm, kHessian, kRandom };

CostKind cost_kind_from_string(const std::string& s);
std::string to_string(CostKind k);

// Comparison cost tables fed to the same solver so sweeps isolate the cost
// function. Importance-only kinds (frequency / weight) use cost
// importance*(3-j): minimizing it pushes wide widths onto important experts.
// kHessian requires the precomputed sensitivity table; kRandom is seeded.
CostTable baseline_cost(const CalibrationStats& stats,
                        const QuantErrorTable& errors, CostKind kind,
                        uint64_t random_seed = 0,
                        const CostTable* hessian_sens = nullptr);

int layer_budget(int num_experts, double b_avg);

struct ModelAllocation {
  std::vector<BitAllocation> layers;
  double total_objective = 0.0;
};

// Independent per-layer solves by default; the cross-layer mode pools one
// budget over all experts with coverage applied globally.
ModelAllocation allocate_model(const CostTable& cost, double b_avg,
                               bool coverage = true,
                               bool global_budget = false);

struct SweepPoint {
  double b_avg = 0.0;
  ModelAllocation allocation;
};

// Allocations over a grid of target average widths; downstream metrics are
// attached by the pipeline sweep.
std::vector<SweepPoint> allocation_sweep(const CostTable& cost,
                                         const std::vector<double>& b_avgs,
                                         bool coverage = true);

}  // namespace mcsh

#endif  // MCSH_ALLOCATOR_HPP
