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

#include "mcsh/importance.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mcsh {

int CalibrationCapture::slot_of(int id) const {
  auto it = std::lower_bound(ids.begin(), ids.end(), id);
  if (it == ids.end() || *it != id) throw Error("calibration: unknown token id");
  return static_cast<int>(it - ids.begin());
}

namespace {

struct PerIdCapture {
  std::vector<Tensor> block_inputs;             // per layer
  std::vector<RoutingRecord> recs;              // per layer
  std::vector<Tensor> moe_inputs;               // per layer (expert input t)
  std::vector<std::vector<std::pair<int, Tensor>>> hiddens;  // per layer
  Tensor logits;
};

PerIdCapture capture_token(const MoEModel& model, int id) {
  const int B = model.config.num_layers;
  PerIdCapture cap;
  cap.block_inputs.reserve(static_cast<size_t>(B));
  cap.moe_inputs.resize(static_cast<size_t>(B));
  cap.hiddens.resize(static_cast<size_t>(B));
  cap.recs.resize(static_cast<size_t>(B));

  ForwardHooks hooks;
  int current_layer = 0;
  hooks.on_route = [&](int layer, const Tensor& t, const RoutingRecord& rec) {
    cap.moe_inputs[static_cast<size_t>(layer)] = t;
    cap.recs[static_cast<size_t>(layer)] = rec;
  };
  hooks.on_expert = [&](int layer, int expert, const Tensor&, const Tensor& hidden) {
    cap.hiddens[static_cast<size_t>(layer)].emplace_back(expert, hidden);
  };

  Tensor x = kern::take_rows(model.embedding, {id});
  for (int l = 0; l < B; ++l) {
    cap.block_inputs.push_back(x);
    current_layer = l;
    (void)current_layer;
    x = block_forward(model, l, x, nullptr, &hooks);
  }
  cap.logits = kern::matmul(kern::rms_norm(x), model.head);
  return cap;
}

}  // namespace

CalibrationCapture run_calibration(const MoEModel& model, const TokenSet& calib,
                                   int max_threads) {
  if (calib.total_tokens() < 1) throw ConfigError("calibration set is empty");
  const int B = model.config.num_layers;
  const int E = model.config.num_experts;
  const int H = model.config.hidden;
  const int F = model.config.ffn_inner;

  CalibrationCapture out;
  out.num_experts = E;

  std::set<int> distinct;
  for (const auto& seq : calib.sequences)
    for (int id : seq) distinct.insert(id);
  out.ids.assign(distinct.begin(), distinct.end());
  const size_t n_ids = out.ids.size();
  out.occurrences.assign(n_ids, 0);
  for (const auto& seq : calib.sequences) {
    std::vector<int> slots;
    slots.reserve(seq.size());
    for (int id : seq) {
      const int s = out.slot_of(id);
      slots.push_back(s);
      ++out.occurrences[static_cast<size_t>(s)];
    }
    out.seq_slots.push_back(std::move(slots));
  }

  std::vector<PerIdCapture> caps(n_ids);
  parallel_for(
      static_cast<int64_t>(n_ids),
      [&](int64_t i) {
        caps[static_cast<size_t>(i)] =
            capture_token(model, out.ids[static_cast<size_t>(i)]);
      },
      max_threads);

  // Deterministic aggregation in slot order, occurrence-weighted.
  out.stats.total_tokens = calib.total_tokens();
  out.stats.counts.assign(static_cast<size_t>(B), std::vector<int64_t>(static_cast<size_t>(E), 0));
  out.stats.phi.assign(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(E), 0.0));
  out.stats.weight.assign(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(E), 0.0));
  for (int l = 0; l < B; ++l)
    for (int e = 0; e < E; ++e) {
      out.h_input.emplace_back(H);
      out.h_hidden.emplace_back(F);
    }

  for (size_t s = 0; s < n_ids; ++s) {
    const auto occ = static_cast<double>(out.occurrences[s]);
    PerIdCapture& cap = caps[s];
    for (int l = 0; l < B; ++l) {
      const RoutingRecord& rec = cap.recs[static_cast<size_t>(l)];
      for (size_t r = 0; r < rec.selected.size(); ++r) {
        const int e = rec.selected[r];
        out.stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)] +=
            out.occurrences[s];
        out.stats.weight[static_cast<size_t>(l)][static_cast<size_t>(e)] +=
            occ * rec.weights[r];
        out.h_input[static_cast<size_t>(l) * E + e].add_weighted(
            cap.moe_inputs[static_cast<size_t>(l)], occ);
      }
      for (const auto& [e, hidden] : cap.hiddens[static_cast<size_t>(l)])
        out.h_hidden[static_cast<size_t>(l) * E + e].add_weighted(hidden, occ);
    }
    out.block_inputs.push_back(std::move(cap.block_inputs));
    out.clean_logits.push_back(std::move(cap.logits));
    out.routing.push_back(std::move(cap.recs));
  }

  const double n = static_cast<double>(out.stats.total_tokens);
  for (int l = 0; l < B; ++l)
    for (int e = 0; e < E; ++e) {
      out.stats.phi[static_cast<size_t>(l)][static_cast<size_t>(e)] =
          static_cast<double>(out.stats.counts[static_cast<size_t>(l)][static_cast<size_t>(e)]) / n;
      out.stats.weight[static_cast<size_t>(l)][static_cast<size_t>(e)] /= n;
    }
  return out;
}

CalibrationStats collect_stats(const MoEModel& model, const TokenSet& calib) {
  return run_calibration(model, calib).stats;
}

namespace {

// Mean over sequences of the Frobenius norm of the per-sequence logits
// change, computed from per-slot squared norms. Tokens that never route to
// the patched expert contribute zero exactly.
double mean_sequence_norm(const CalibrationCapture& capture,
                          const std::vector<double>& sq_by_slot) {
  double total = 0.0;
  for (const auto& slots : capture.seq_slots) {
    double sq = 0.0;
    for (int s : slots) sq += sq_by_slot[static_cast<size_t>(s)];
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(capture.seq_slots.size());
}

}  // namespace

double quant_error_for_replacement(const MoEModel& model,
                                   const CalibrationCapture& capture, int layer,
                                   int expert, const ExpertWeights& replacement) {
  std::vector<double> sq(capture.ids.size(), 0.0);
  ExpertPatch patch{layer, expert, &replacement};
  ForwardHooks hooks;
  hooks.patch = &patch;
  for (size_t s = 0; s < capture.ids.size(); ++s) {
    const RoutingRecord& rec = capture.routing[s][static_cast<size_t>(layer)];
    const bool affected =
        std::find(rec.selected.begin(), rec.selected.end(), expert) !=
        rec.selected.end();
    if (!affected) continue;  // identical prefix + unselected expert => no change
    Tensor logits = token_logits_from(
        model, capture.block_inputs[s][static_cast<size_t>(layer)], layer,
        nullptr, &hooks);
    const Tensor& clean = capture.clean_logits[s];
    double acc = 0.0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
      const double d = logits[i] - clean[i];
      acc += d * d;
    }
    sq[s] = acc;
  }
  return mean_sequence_norm(capture, sq);
}

double compute_quant_error(const MoEModel& model,
                           const CalibrationCapture& capture, int layer,
                           int expert, int bits, const QuantOptions& opts) {
  const int E = model.config.num_experts;
  if (layer < 0 || layer >= model.config.num_layers || expert < 0 || expert >= E)
    throw ConfigError("compute_quant_error: layer/expert out of range");
  bool activated = false;
  for (size_t s = 0; s < capture.ids.size() && !activated; ++s) {
    const auto& sel = capture.routing[s][static_cast<size_t>(layer)].selected;
    activated = std::find(sel.begin(), sel.end(), expert) != sel.end();
  }
  if (!activated) return 0.0;

  const ExpertWeights& e =
      model.layers[static_cast<size_t>(layer)].experts[static_cast<size_t>(expert)];
  QuantizedExpert qe =
      quantize_expert(e, bits, capture.hess_input(layer, expert),
                      capture.hess_hidden(layer, expert), opts);
  const ExpertWeights dense = qe.dense();
  return quant_error_for_replacement(model, capture, layer, expert, dense);
}

QuantErrorTable compute_quant_error_table(const MoEModel& model,
                                          const CalibrationCapture& capture,
                                          const QuantOptions& opts,
                                          int max_threads) {
  const int B = model.config.num_layers;
  const int E = model.config.num_experts;
  QuantErrorTable table;
  table.eps.assign(static_cast<size_t>(B),
                   std::vector<std::array<double, 3>>(
                       static_cast<size_t>(E), {0.0, 0.0, 0.0}));
  const int64_t tasks = static_cast<int64_t>(B) * E * 3;
  parallel_for(
      tasks,
      [&](int64_t t) {
        const int j = static_cast<int>(t % 3);
        const int e = static_cast<int>((t / 3) % E);
        const int l = static_cast<int>(t / (3 * E));
        table.eps[static_cast<size_t>(l)][static_cast<size_t>(e)][static_cast<size_t>(j)] =
            compute_quant_error(model, capture, l, e, j + 1, opts);
      },
      max_threads);
  return table;
}

namespace {

double pow_or_one(double x, double e) { return e == 0.0 ? 1.0 : std::pow(x, e); }

}  // namespace

CostTable importance_cost(const CalibrationStats& stats,
                          const QuantErrorTable& errors, double alpha,
                          double beta, double gamma) {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
    throw ConfigError("importance exponents must be >= 0");
  const size_t B = stats.phi.size();
  CostTable cost(B);
  for (size_t l = 0; l < B; ++l) {
    const size_t E = stats.phi[l].size();
    cost[l].assign(E, {0.0, 0.0, 0.0});
    for (size_t e = 0; e < E; ++e) {
      if (stats.phi[l][e] == 0.0) continue;  // dead expert: free at any width
      const double imp = pow_or_one(stats.phi[l][e], alpha) *
                         pow_or_one(stats.weight[l][e], beta);
      for (size_t j = 0; j < 3; ++j)
        cost[l][e][j] = imp * pow_or_one(errors.eps[l][e][j], gamma);
    }
  }
  return cost;
}

CostTable hessian_sensitivity(const MoEModel& model,
                              const CalibrationCapture& capture,
                              const QuantOptions& opts) {
  const int B = model.config.num_layers;
  const int E = model.config.num_experts;
  auto trace = [](const Tensor& h) {
    double t = 0.0;
    for (int i = 0; i < h.rows(); ++i) t += h.at(i, i);
    return t;
  };
  auto sqerr = [&](const Tensor& w, int bits) {
    Tensor q = bits == 1 ? dequantize(binarize(w, opts.binary_mode))
                         : dequantize(rtn_quantize(w, bits, opts.group_size));
    double acc = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) {
      const double d = w[i] - q[i];
      acc += d * d;
    }
    return acc;
  };
  CostTable cost(static_cast<size_t>(B));
  for (int l = 0; l < B; ++l) {
    cost[static_cast<size_t>(l)].assign(static_cast<size_t>(E), {0.0, 0.0, 0.0});
    for (int e = 0; e < E; ++e) {
      const ExpertWeights& w =
          model.layers[static_cast<size_t>(l)].experts[static_cast<size_t>(e)];
      const double tr_in = trace(capture.hess_input(l, e).matrix());
      const double tr_hid = trace(capture.hess_hidden(l, e).matrix());
      for (int j = 1; j <= 3; ++j) {
        const double s = tr_in * (sqerr(w.w_gate, j) + sqerr(w.w_up, j)) +
                         tr_hid * sqerr(w.w_down, j);
        cost[static_cast<size_t>(l)][static_cast<size_t>(e)][static_cast<size_t>(j - 1)] = s;
      }
    }
  }
  return cost;
}

}  // namespace mcsh
