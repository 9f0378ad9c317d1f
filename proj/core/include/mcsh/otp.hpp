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

#ifndef MCSH_OTP_HPP
#define MCSH_OTP_HPP

#include <vector>

#include "mcsh/importance.hpp"
#include "mcsh/moe.hpp"

namespace mcsh {

// The k prefix masks over rank-sorted routed experts: row r keeps the top
// (k-r) experts. Multiplying a distribution over rows by this matrix gives
// per-rank soft multipliers that never zero the top-1 expert.
struct MaskCandidateSet {
  int k = 0;
  Tensor matrix;  // k×k, row r = [1]*(k-r) + [0]*r

  bool keeps(int r, int rank) const { return rank < k - r; }
};

MaskCandidateSet build_candidate_set(int k);

// Two-linear-layer mask router for one MoE layer. Input: the token state and
// its k renormalized gate weights; output: logits over the k candidates.
// logits = silu(concat(t*fc1, w)) * fc2.
struct RouterParams {
  Tensor fc1;  // H×k
  Tensor fc2;  // 2k×k
};

std::vector<RouterParams> init_routers(const MoEConfig& config, uint64_t seed);

Tensor router_logits(const RouterParams& r, const Tensor& t,
                     const std::vector<double>& gate_weights);
Var router_logits_tape(Tape& tape, Var fc1, Var fc2, Var t,
                       const Tensor& gate_weights);

struct GumbelSampler {
  double tau = 1.0;
  std::mt19937_64 rng;

  GumbelSampler(double tau_, uint64_t seed) : tau(tau_), rng(seed) {
    if (!(tau > 0.0)) throw ConfigError("gumbel temperature must be > 0");
  }
  // g = -log(-log u), u uniform clipped to [1e-12, 1-1e-12].
  Tensor noise(int k);
};

enum class SampleMode { kSoft, kHard };

// Soft: softmax((logits + g)/tau). Hard: one-hot argmax(logits + g) with the
// soft sample's gradient (straight-through).
Var gumbel_sample(Tape& tape, Var logits, GumbelSampler& sampler, SampleMode mode);
Tensor gumbel_sample_plain(const Tensor& logits, GumbelSampler& sampler,
                           SampleMode mode);

// Soft multipliers per rank: y_hat × candidate matrix.
Var mask_multipliers(Tape& tape, Var y_hat, const MaskCandidateSet& cands);

// Eq.-style training loss: distillation on final logits plus lambda times the
// mean mask l1 (lower l1 = more pruning).
struct OtpLossParts {
  Var total, distill, sparsity;
};
OtpLossParts otp_loss(Tape& tape, const std::vector<Var>& student_logits,
                      const std::vector<Tensor>& teacher_logits,
                      const std::vector<Var>& mask_sums, double lambda,
                      bool mse_distill = false);

struct OTPTrainConfig {
  double lambda = 1.0;
  int steps = 500;
  int batch = 24;
  double lr = 1e-3;
  double tau_start = 1.0;
  double tau_end = 0.1;
  uint64_t seed = 0;
  bool mse_distill = false;
  bool hard_samples = false;  // straight-through instead of soft masks
  int curve_every = 10;
};

struct CurvePoint {
  int step;
  double distill;
  double sparsity;     // mean mask l1 over the batch
  double mask_ratio;   // 1 - sparsity/k (soft pruned fraction)
};

struct TrainRouterResult {
  std::vector<RouterParams> routers;
  std::vector<CurvePoint> curve;
  double final_hard_mask_ratio = 0.0;  // argmax masks, no noise
  bool diverged = false;
  int steps_completed = 0;
};

// End-to-end router training through the frozen student model, distilling
// against the frozen teacher's logits. Aborts with the last finite
// checkpoint if the loss goes non-finite.
TrainRouterResult train_router(const MoEModel& student, const MoEModel& teacher,
                               const TokenSet& train_data,
                               const OTPTrainConfig& config);

struct OtpEvalResult {
  double eval_nll = 0.0;
  double mask_ratio = 0.0;           // pruned slots / (k * tokens * layers)
  double mean_kept_per_token = 0.0;  // kept routed experts per (token, layer)
  std::vector<std::vector<int64_t>> kept_counts;  // [layer][expert]
  int64_t tokens = 0;
};

// Deterministic hard-mask inference (argmax router logits, no noise) with an
// activation ledger for the accounting report.
OtpEvalResult inference_with_otp(const MoEModel& student,
                                 const std::vector<RouterParams>& routers,
                                 const MaskCandidateSet& cands,
                                 const TokenSet& data, int max_threads = 0);

// Random-pruning control: drops the lowest-ranked expert with probability
// `ratio` per (token, layer), seeded.
OtpEvalResult inference_with_random_pruning(const MoEModel& student,
                                            double ratio, uint64_t seed,
                                            const TokenSet& data);

// ---- rule-based top-2 baseline ----

// Per-layer thresholds: the median of w1/w0 over calibration tokens.
std::vector<double> rule_thresholds(const MoEModel& model, const TokenSet& calib);

// Drops the weaker of two routed experts when w1/w0 < mu; keeps both
// otherwise. Refuses k != 2.
RoutingRecord rule_based_prune(const RoutingRecord& rec, double mu);

}  // namespace mcsh

#endif  // MCSH_OTP_HPP
