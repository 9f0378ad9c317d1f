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

#ifndef MCSH_IMPORTANCE_HPP
#define MCSH_IMPORTANCE_HPP

#include <array>
#include <vector>

#include "mcsh/corpus.hpp"
#include "mcsh/moe.hpp"
#include "mcsh/quant.hpp"

namespace mcsh {

// Per (layer, expert) calibration statistics. phi_i = n_i / N sums to top_k
// per layer; w_i is the mean renormalized routing weight the expert received
// (zero whenever it was not selected), so the per-layer w column sums to 1.
struct CalibrationStats {
  int64_t total_tokens = 0;  // N
  std::vector<std::vector<int64_t>> counts;  // n_i
  std::vector<std::vector<double>> phi;
  std::vector<std::vector<double>> weight;
};

// eps[layer][expert][j-1]: Frobenius distortion of final logits when only
// that expert is quantized to j in {1,2,3} bits, mean of per-sequence norms.
struct QuantErrorTable {
  std::vector<std::vector<std::array<double, 3>>> eps;
};

// cost[layer][expert][j-1]
using CostTable = std::vector<std::vector<std::array<double, 3>>>;

// Everything captured by the single full-precision calibration pass. The toy
// block is context-free, so clean activations are cached once per distinct
// token id and re-weighted by occurrence counts.
struct CalibrationCapture {
  CalibrationStats stats;
  std::vector<HessianAccumulator> h_input;   // [layer*E + e]
  std::vector<HessianAccumulator> h_hidden;
  int num_experts = 0;

  std::vector<int> ids;                      // sorted distinct token ids
  std::vector<int64_t> occurrences;          // per id slot
  std::vector<std::vector<Tensor>> block_inputs;  // [slot][layer]
  std::vector<Tensor> clean_logits;          // [slot], 1×V
  std::vector<std::vector<RoutingRecord>> routing;  // [slot][layer]
  std::vector<std::vector<int>> seq_slots;   // calibration sequences as slots

  int slot_of(int id) const;
  const HessianAccumulator& hess_input(int layer, int expert) const {
    return h_input[static_cast<size_t>(layer) * num_experts + expert];
  }
  const HessianAccumulator& hess_hidden(int layer, int expert) const {
    return h_hidden[static_cast<size_t>(layer) * num_experts + expert];
  }
};

CalibrationCapture run_calibration(const MoEModel& model, const TokenSet& calib,
                                   int max_threads = 0);

// Stats-only convenience wrapper over run_calibration.
CalibrationStats collect_stats(const MoEModel& model, const TokenSet& calib);

// eps_{i,j} for a single expert: quantize just that expert (GPTQ path),
// re-run the affected tokens from the expert's layer, and take the mean of
// per-sequence Frobenius norms of the logits difference.
double compute_quant_error(const MoEModel& model,
                           const CalibrationCapture& capture, int layer,
                           int expert, int bits, const QuantOptions& opts = {});

// Same distortion measure against an arbitrary replacement for the expert;
// replacing an expert with its own weights yields exactly zero.
double quant_error_for_replacement(const MoEModel& model,
                                   const CalibrationCapture& capture, int layer,
                                   int expert, const ExpertWeights& replacement);

QuantErrorTable compute_quant_error_table(const MoEModel& model,
                                          const CalibrationCapture& capture,
                                          const QuantOptions& opts = {},
                                          int max_threads = 0);

// c[l][i][j] = phi^alpha * w^beta * eps^gamma, with zero-frequency experts
// pinned to zero cost at every width.
CostTable importance_cost(const CalibrationStats& stats,
                          const QuantErrorTable& errors, double alpha,
                          double beta, double gamma);

// HAWQ-style comparison cost: tr(H_input)*|W - Q_j(W)|_F^2 summed over the
// expert's matrices, with plain RTN/binarization inside Q_j.
CostTable hessian_sensitivity(const MoEModel& model,
                              const CalibrationCapture& capture,
                              const QuantOptions& opts = {});

}  // namespace mcsh

#endif  // MCSH_IMPORTANCE_HPP
