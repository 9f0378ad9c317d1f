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

#include "mcsh/moe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace mcsh {

void MoEConfig::validate() const {
  if (num_layers < 1 || hidden < 1 || ffn_inner < 1 || num_experts < 1)
    throw ConfigError("model dims must be >= 1");
  if (top_k < 1 || top_k > num_experts)
    throw ConfigError("top_k must be in [1, num_experts]");
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (num_shared_experts != 0 && num_shared_experts != 1)
    throw ConfigError("num_shared_experts must be 0 or 1");
}

namespace {

std::string lkey(int l, const char* rest) {
  return "layer" + std::to_string(l) + "." + rest;
}

std::string ekey(int l, int e, const char* rest) {
  return "layer" + std::to_string(l) + ".expert" + std::to_string(e) + "." + rest;
}

template <typename ModelT, typename TensorPtr>
std::vector<std::pair<std::string, TensorPtr>> collect_params(ModelT& m) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("embedding", &m.embedding);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const int li = static_cast<int>(l);
    out.emplace_back(lkey(li, "mlp.w1"), &m.mlps[l].w1);
    out.emplace_back(lkey(li, "mlp.w2"), &m.mlps[l].w2);
    out.emplace_back(lkey(li, "gating"), &m.layers[l].gating);
    for (size_t e = 0; e < m.layers[l].experts.size(); ++e) {
      const int ei = static_cast<int>(e);
      out.emplace_back(ekey(li, ei, "w_gate"), &m.layers[l].experts[e].w_gate);
      out.emplace_back(ekey(li, ei, "w_up"), &m.layers[l].experts[e].w_up);
      out.emplace_back(ekey(li, ei, "w_down"), &m.layers[l].experts[e].w_down);
    }
    if (m.layers[l].shared) {
      out.emplace_back(lkey(li, "shared.w_gate"), &m.layers[l].shared->w_gate);
      out.emplace_back(lkey(li, "shared.w_up"), &m.layers[l].shared->w_up);
      out.emplace_back(lkey(li, "shared.w_down"), &m.layers[l].shared->w_down);
    }
  }
  out.emplace_back("head", &m.head);
  return out;
}

Tensor flatten_row(const Tensor& t) {
  return Tensor({static_cast<int>(t.numel())}, t.data());
}

RoutingRecord make_record(const Tensor& gate_probs_row, int k) {
  RoutingRecord rec;
  rec.gate_probs = flatten_row(gate_probs_row);
  TopK tk = topk(rec.gate_probs, k);
  rec.selected = tk.indices;
  double s = 0.0;
  for (double v : tk.values) s += v;
  const double inv = 1.0 / s;
  rec.weights.reserve(tk.values.size());
  for (double v : tk.values) rec.weights.push_back(v * inv);
  return rec;
}

const ExpertWeights* pick_expert(const MoEModel& model, int layer, int expert,
                                 const ForwardHooks* hooks) {
  if (hooks && hooks->patch && hooks->patch->layer == layer &&
      hooks->patch->expert == expert)
    return hooks->patch->weights;
  return &model.layers[static_cast<size_t>(layer)].experts[static_cast<size_t>(expert)];
}

}  // namespace

int64_t MoEModel::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_params()) n += t->numel();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> MoEModel::named_params() {
  return collect_params<MoEModel, Tensor*>(*this);
}

std::vector<std::pair<std::string, const Tensor*>> MoEModel::named_params() const {
  return collect_params<const MoEModel, const Tensor*>(*this);
}

Tensor gate_scores(const MoELayer& layer, const Tensor& token) {
  return kern::softmax(kern::matmul(token, layer.gating), 1);
}

RoutingRecord route_token(const MoELayer& layer, const Tensor& token, int top_k) {
  return make_record(gate_scores(layer, token), top_k);
}

Tensor expert_forward(const ExpertWeights& e, const Tensor& t, Tensor* hidden_out) {
  Tensor hidden = kern::mul(kern::silu(kern::matmul(t, e.w_gate)),
                            kern::matmul(t, e.w_up));
  Tensor out = kern::matmul(hidden, e.w_down);
  if (hidden_out) *hidden_out = std::move(hidden);
  return out;
}

Tensor moe_forward(const MoEModel& model, int layer, const Tensor& t,
                   RoutingRecord* rec_out, const ForwardHooks* hooks) {
  const MoELayer& L = model.layers[static_cast<size_t>(layer)];
  RoutingRecord rec = route_token(L, t, model.config.top_k);
  if (hooks && hooks->on_route) hooks->on_route(layer, t, rec);
  std::vector<double> mult;
  if (hooks && hooks->mask) mult = hooks->mask(layer, t, rec);
  const int k = model.config.top_k;
  const int h = model.config.hidden;

  Tensor acc;
  for (int rank = 0; rank < k; ++rank) {
    const int e = rec.selected[static_cast<size_t>(rank)];
    const double m = mult.empty() ? 1.0 : mult[static_cast<size_t>(rank)];
    Tensor contrib;
    if (m == 0.0) {
      contrib = Tensor({1, h});  // pruned: expert not evaluated
    } else {
      const ExpertWeights* ew = pick_expert(model, layer, e, hooks);
      Tensor hidden;
      const bool want_hidden = hooks && hooks->on_expert;
      Tensor out = expert_forward(*ew, t, want_hidden ? &hidden : nullptr);
      if (want_hidden) hooks->on_expert(layer, e, t, hidden);
      contrib = kern::scale(out, rec.weights[static_cast<size_t>(rank)]);
      if (!mult.empty()) contrib = kern::scale(contrib, m);
    }
    acc = (rank == 0) ? std::move(contrib) : kern::add(acc, contrib);
  }
  if (L.shared) acc = kern::add(acc, expert_forward(*L.shared, t));
  if (rec_out) *rec_out = std::move(rec);
  return acc;
}

Tensor block_forward(const MoEModel& model, int layer, const Tensor& x,
                     RoutingRecord* rec, const ForwardHooks* hooks) {
  const DenseMlp& mlp = model.mlps[static_cast<size_t>(layer)];
  Tensor t1 = kern::rms_norm(x);
  Tensor h = kern::silu(kern::matmul(t1, mlp.w1));
  Tensor x1 = kern::add(x, kern::matmul(h, mlp.w2));
  Tensor t2 = kern::rms_norm(x1);
  Tensor y = moe_forward(model, layer, t2, rec, hooks);
  return kern::add(x1, y);
}

Tensor token_logits_from(const MoEModel& model, Tensor x, int start_layer,
                         std::vector<RoutingRecord>* recs,
                         const ForwardHooks* hooks) {
  for (int l = start_layer; l < model.config.num_layers; ++l) {
    RoutingRecord rec;
    x = block_forward(model, l, x, recs ? &rec : nullptr, hooks);
    if (recs) recs->push_back(std::move(rec));
  }
  return kern::matmul(kern::rms_norm(x), model.head);
}

Tensor token_logits(const MoEModel& model, int token_id,
                    std::vector<RoutingRecord>* recs, const ForwardHooks* hooks) {
  if (token_id < 0 || token_id >= model.config.vocab)
    throw ConfigError("token id out of range");
  Tensor x = kern::take_rows(model.embedding, {token_id});
  return token_logits_from(model, std::move(x), 0, recs, hooks);
}

Tensor model_forward(const MoEModel& model, const std::vector<int>& ids,
                     std::vector<std::vector<RoutingRecord>>* recs) {
  Tensor out({static_cast<int>(ids.size()), model.config.vocab});
  for (size_t i = 0; i < ids.size(); ++i) {
    std::vector<RoutingRecord> r;
    Tensor logits = token_logits(model, ids[i], recs ? &r : nullptr);
    std::copy(logits.data().begin(), logits.data().end(),
              out.data().begin() + static_cast<int64_t>(i) * model.config.vocab);
    if (recs) recs->push_back(std::move(r));
  }
  return out;
}

double eval_nll(const MoEModel& model, const TokenSet& data, int max_threads) {
  // Every position is context-free, so compute logits once per distinct
  // input id and reuse across occurrences.
  std::set<int> distinct;
  for (const auto& seq : data.sequences)
    for (size_t i = 0; i + 1 < seq.size(); ++i) distinct.insert(seq[i]);
  std::vector<int> ids(distinct.begin(), distinct.end());
  std::vector<Tensor> logits(ids.size());
  std::vector<double> lse(ids.size());
  parallel_for(
      static_cast<int64_t>(ids.size()),
      [&](int64_t i) {
        logits[static_cast<size_t>(i)] =
            token_logits(model, ids[static_cast<size_t>(i)]);
        lse[static_cast<size_t>(i)] =
            kern::logsumexp(logits[static_cast<size_t>(i)]);
      },
      max_threads);
  std::map<int, size_t> slot;
  for (size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;

  double nll = 0.0;
  int64_t count = 0;
  for (const auto& seq : data.sequences) {
    for (size_t i = 0; i + 1 < seq.size(); ++i) {
      const size_t s = slot[seq[i]];
      nll += lse[s] - logits[s][seq[i + 1]];
      ++count;
    }
  }
  if (count == 0) throw ConfigError("eval set has no next-token positions");
  return nll / static_cast<double>(count);
}

// ---- tape forward ----

TapeModel bind_model(Tape& tape, const MoEModel& model, bool trainable) {
  auto bind = [&](const Tensor& t) {
    return trainable ? tape.leaf(t) : tape.constant(t);
  };
  TapeModel tm;
  tm.config = model.config;
  tm.embedding = bind(model.embedding);
  for (size_t l = 0; l < model.layers.size(); ++l) {
    TapeModel::TapeLayer tl;
    tl.mlp_w1 = bind(model.mlps[l].w1);
    tl.mlp_w2 = bind(model.mlps[l].w2);
    tl.gating = bind(model.layers[l].gating);
    for (const auto& e : model.layers[l].experts)
      tl.experts.push_back({bind(e.w_gate), bind(e.w_up), bind(e.w_down)});
    if (model.layers[l].shared) {
      const auto& s = *model.layers[l].shared;
      tl.shared = TapeModel::TapeExpert{bind(s.w_gate), bind(s.w_up), bind(s.w_down)};
    }
    tm.layers.push_back(std::move(tl));
  }
  tm.head = bind(model.head);
  return tm;
}

std::vector<Var> tape_param_vars(const TapeModel& tm) {
  std::vector<Var> out;
  out.push_back(tm.embedding);
  for (const auto& tl : tm.layers) {
    out.push_back(tl.mlp_w1);
    out.push_back(tl.mlp_w2);
    out.push_back(tl.gating);
    for (const auto& e : tl.experts) {
      out.push_back(e.w_gate);
      out.push_back(e.w_up);
      out.push_back(e.w_down);
    }
    if (tl.shared) {
      out.push_back(tl.shared->w_gate);
      out.push_back(tl.shared->w_up);
      out.push_back(tl.shared->w_down);
    }
  }
  out.push_back(tm.head);
  return out;
}

namespace {

Var expert_forward_tape(Tape& tape, const TapeModel::TapeExpert& e, Var t) {
  Var hidden = tape.mul(tape.silu(tape.matmul(t, e.w_gate)),
                        tape.matmul(t, e.w_up));
  return tape.matmul(hidden, e.w_down);
}

}  // namespace

Var token_logits_tape(Tape& tape, const TapeModel& tm, int token_id,
                      const TapeMaskFn* mask_fn,
                      std::vector<RoutingRecord>* recs) {
  if (token_id < 0 || token_id >= tm.config.vocab)
    throw ConfigError("token id out of range");
  const int k = tm.config.top_k;
  Var x = tape.take_rows(tm.embedding, {token_id});
  for (int l = 0; l < tm.config.num_layers; ++l) {
    const auto& tl = tm.layers[static_cast<size_t>(l)];
    Var t1 = tape.rms_norm(x);
    Var h = tape.silu(tape.matmul(t1, tl.mlp_w1));
    x = tape.add(x, tape.matmul(h, tl.mlp_w2));
    Var t2 = tape.rms_norm(x);

    // Routing: the selection itself is discrete; the selected weights stay
    // on the tape so gradients reach the gating matrix.
    Var probs = tape.softmax(tape.matmul(t2, tl.gating), 1);
    RoutingRecord rec = make_record(tape.value(probs), k);
    Var w_raw = tape.take_elems(probs, rec.selected);
    Var inv = tape.reciprocal(tape.sum(w_raw));
    Var w_ren = tape.scale_by(w_raw, inv);

    std::vector<Var> mult;
    if (mask_fn && *mask_fn) mult = (*mask_fn)(tape, l, t2, rec);

    Var acc;
    for (int rank = 0; rank < k; ++rank) {
      const int e = rec.selected[static_cast<size_t>(rank)];
      Var out = expert_forward_tape(tape, tl.experts[static_cast<size_t>(e)], t2);
      Var w_r = tape.take_elems(w_ren, {rank});
      Var contrib = tape.scale_by(out, w_r);
      if (!mult.empty())
        contrib = tape.scale_by(contrib, mult[static_cast<size_t>(rank)]);
      acc = (rank == 0) ? contrib : tape.add(acc, contrib);
    }
    if (tl.shared) acc = tape.add(acc, expert_forward_tape(tape, *tl.shared, t2));
    x = tape.add(x, acc);
    if (recs) recs->push_back(std::move(rec));
  }
  return tape.matmul(tape.rms_norm(x), tm.head);
}

// ---- synthetic model generation ----

MoEModel init_model(const MoEConfig& config) {
  config.validate();
  std::mt19937_64 rng(derive_seed(config.seed, "init"));
  const int H = config.hidden, F = config.ffn_inner, E = config.num_experts;
  const int V = config.vocab;
  const double sh = 1.0 / std::sqrt(static_cast<double>(H));
  const double sf = 1.0 / std::sqrt(static_cast<double>(F));

  MoEModel m;
  m.config = config;
  m.embedding = Tensor::randn({V, H}, 1.0, rng);
  for (int l = 0; l < config.num_layers; ++l) {
    DenseMlp mlp;
    mlp.w1 = Tensor::randn({H, F}, sh, rng);
    mlp.w2 = Tensor::randn({F, H}, sf, rng);
    m.mlps.push_back(std::move(mlp));
    MoELayer layer;
    layer.gating = Tensor::randn({H, E}, sh, rng);
    for (int e = 0; e < E; ++e) {
      ExpertWeights w;
      w.w_gate = Tensor::randn({H, F}, sh, rng);
      w.w_up = Tensor::randn({H, F}, sh, rng);
      w.w_down = Tensor::randn({F, H}, sf, rng);
      layer.experts.push_back(std::move(w));
    }
    if (config.num_shared_experts == 1) {
      ExpertWeights w;
      w.w_gate = Tensor::randn({H, F}, sh, rng);
      w.w_up = Tensor::randn({H, F}, sh, rng);
      w.w_down = Tensor::randn({F, H}, sf, rng);
      layer.shared = std::move(w);
    }
    m.layers.push_back(std::move(layer));
  }
  m.head = Tensor::randn({H, V}, sh, rng);
  return m;
}

MarkovChain model_chain(const MoEConfig& config) {
  return MarkovChain(config.vocab, derive_seed(config.seed, "corpus"));
}

TeacherStats teacher_train(MoEModel& model, const MarkovChain& chain,
                           const GenOptions& opts, uint64_t seed) {
  TeacherStats stats;
  std::mt19937_64 rng(derive_seed(seed, "teacher"));
  const std::vector<int> stream = chain.sample(opts.stream_tokens, rng);
  const TokenSet val = sample_token_set(chain, opts.val_sequences,
                                        opts.val_seq_len,
                                        derive_seed(seed, "teacher-val"));
  stats.loss_untrained = eval_nll(model, val);

  auto params = model.named_params();
  std::vector<Tensor*> param_ptrs;
  for (auto& [name, t] : params) param_ptrs.push_back(t);
  Adam adam(opts.teacher_lr);
  std::uniform_int_distribution<size_t> pick(0, stream.size() - 2);

  for (int step = 0; step < opts.teacher_steps; ++step) {
    Tape tape;
    TapeModel tm = bind_model(tape, model, /*trainable=*/true);
    Var loss;
    for (int b = 0; b < opts.teacher_batch; ++b) {
      const size_t i = pick(rng);
      Var logits = token_logits_tape(tape, tm, stream[i]);
      Var nll = tape.sub(tape.logsumexp(logits),
                         tape.take_elems(logits, {stream[i + 1]}));
      loss = (b == 0) ? nll : tape.add(loss, nll);
    }
    loss = tape.scale(loss, 1.0 / opts.teacher_batch);
    tape.backward(loss);
    std::vector<const Tensor*> grad_ptrs;
    for (Var v : tape_param_vars(tm)) grad_ptrs.push_back(&tape.grad(v));
    adam.step(param_ptrs, grad_ptrs);
    stats.curve.push_back(tape.value(loss)[0]);
  }
  stats.loss_trained = eval_nll(model, val);
  return stats;
}

MoEModel gen_synthetic_model(const MoEConfig& config, const GenOptions& opts,
                             TeacherStats* stats_out) {
  MoEModel model = init_model(config);
  TeacherStats stats = teacher_train(model, model_chain(config), opts, config.seed);
  if (stats_out) *stats_out = stats;
  return model;
}

}  // namespace mcsh
