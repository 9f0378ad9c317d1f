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

#ifndef MCSH_MOE_HPP
#define MCSH_MOE_HPP

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcsh/autograd.hpp"
#include "mcsh/corpus.hpp"
#include "mcsh/tensor.hpp"

namespace mcsh {

struct MoEConfig {
  int num_layers = 4;       // B: decoder blocks
  int hidden = 64;          // H
  int ffn_inner = 128;      // F
  int num_experts = 8;      // E routed experts per layer
  int top_k = 2;            // experts activated per token
  int vocab = 256;          // V
  int num_shared_experts = 1;  // 0 or 1
  uint64_t seed = 1;

  void validate() const;
  bool operator==(const MoEConfig&) const = default;
};

// Gated FFN expert: down( silu(t*w_gate) ⊙ (t*w_up) ).
struct ExpertWeights {
  Tensor w_gate;  // H×F
  Tensor w_up;    // H×F
  Tensor w_down;  // F×H
};

struct DenseMlp {
  Tensor w1;  // H×F
  Tensor w2;  // F×H
};

struct MoELayer {
  Tensor gating;  // H×E
  std::vector<ExpertWeights> experts;
  std::optional<ExpertWeights> shared;
};

// Toy decoder block: residual dense MLP followed by a residual MoE, both
// pre-normalized. No attention, so every position is independent of the rest
// of the sequence.
struct MoEModel {
  MoEConfig config;
  Tensor embedding;  // V×H
  std::vector<DenseMlp> mlps;
  std::vector<MoELayer> layers;
  Tensor head;  // H×V

  int64_t param_count() const;
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
};

// Per token per layer routing outcome.
struct RoutingRecord {
  std::vector<int> selected;     // k expert ids, ranked by weight descending
  std::vector<double> weights;   // renormalized over the selection, sum 1
  Tensor gate_probs;             // full softmax over all E experts
};

// Full-softmax gate probabilities over the E experts.
Tensor gate_scores(const MoELayer& layer, const Tensor& token);

// Top-k selection plus renormalization over the selected experts.
RoutingRecord route_token(const MoELayer& layer, const Tensor& token, int top_k);

// Swap in replacement weights for a single expert without copying the model.
struct ExpertPatch {
  int layer = -1;
  int expert = -1;
  const ExpertWeights* weights = nullptr;
};

struct ForwardHooks {
  const ExpertPatch* patch = nullptr;
  // Per-expert multipliers in rank order (OTP masking); empty -> no mask.
  std::function<std::vector<double>(int layer, const Tensor& t,
                                    const RoutingRecord&)> mask;
  std::function<void(int layer, const Tensor& t, const RoutingRecord&)> on_route;
  // hidden: pre-w_down activations of a routed expert (Hessian capture).
  std::function<void(int layer, int expert, const Tensor& t,
                     const Tensor& hidden)> on_expert;
};

Tensor expert_forward(const ExpertWeights& e, const Tensor& t,
                      Tensor* hidden_out = nullptr);

// y = sum_j w_j F_j(t) + F_s(t) over the routed top-k plus the unconditional
// shared expert.
Tensor moe_forward(const MoEModel& model, int layer, const Tensor& t,
                   RoutingRecord* rec = nullptr,
                   const ForwardHooks* hooks = nullptr);

Tensor block_forward(const MoEModel& model, int layer, const Tensor& x,
                     RoutingRecord* rec = nullptr,
                     const ForwardHooks* hooks = nullptr);

// Logits (1×V) for one token id.
Tensor token_logits(const MoEModel& model, int token_id,
                    std::vector<RoutingRecord>* recs = nullptr,
                    const ForwardHooks* hooks = nullptr);

// Resume a forward pass from a cached block input.
Tensor token_logits_from(const MoEModel& model, Tensor x, int start_layer,
                         std::vector<RoutingRecord>* recs = nullptr,
                         const ForwardHooks* hooks = nullptr);

// Logits for a sequence, L×V, with optional per-position routing records.
Tensor model_forward(const MoEModel& model, const std::vector<int>& ids,
                     std::vector<std::vector<RoutingRecord>>* recs = nullptr);

// Mean next-token negative log-likelihood over a token set. Positions are
// context-free, so logits are memoized per distinct token id.
double eval_nll(const MoEModel& model, const TokenSet& data,
                int max_threads = 0);

// ---- tape (training) forward ----

struct TapeModel {
  struct TapeExpert {
    Var w_gate, w_up, w_down;
  };
  struct TapeLayer {
    Var gating;
    Var mlp_w1, mlp_w2;
    std::vector<TapeExpert> experts;
    std::optional<TapeExpert> shared;
  };
  MoEConfig config;
  Var embedding, head;
  std::vector<TapeLayer> layers;
};

// Leaf/constant vars in MoEModel::named_params() order.
std::vector<Var> tape_param_vars(const TapeModel& tm);

TapeModel bind_model(Tape& tape, const MoEModel& model, bool trainable);

// Returns multipliers (k scalar vars, rank order) for the routed experts.
using TapeMaskFn = std::function<std::vector<Var>(
    Tape&, int layer, Var t, const RoutingRecord&)>;

// Same computation as token_logits, node for node, so values are
// bit-identical to the plain path; usable for end-to-end training.
Var token_logits_tape(Tape& tape, const TapeModel& tm, int token_id,
                      const TapeMaskFn* mask_fn = nullptr,
                      std::vector<RoutingRecord>* recs = nullptr);

// ---- synthetic model generation ----

struct GenOptions {
  int teacher_steps = 350;
  int teacher_batch = 24;
  double teacher_lr = 1e-3;
  int stream_tokens = 16384;  // teacher sampling pool
  int val_sequences = 16;
  int val_seq_len = 16;
};

struct TeacherStats {
  double loss_untrained = 0.0;
  double loss_trained = 0.0;
  std::vector<double> curve;  // per-step batch loss
};

MoEModel init_model(const MoEConfig& config);

// The corpus family a model is generated/trained against.
MarkovChain model_chain(const MoEConfig& config);

TeacherStats teacher_train(MoEModel& model, const MarkovChain& chain,
                           const GenOptions& opts, uint64_t seed);

// Seeded init followed by a short teacher-training phase so routing
// statistics come out non-degenerate.
MoEModel gen_synthetic_model(const MoEConfig& config,
                             const GenOptions& opts = {},
                             TeacherStats* stats = nullptr);

}  // namespace mcsh

#endif  // MCSH_MOE_HPP
