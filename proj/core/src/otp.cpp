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

#include "mcsh/otp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>

namespace mcsh {

MaskCandidateSet build_candidate_set(int k) {
  if (k < 1) throw ConfigError("candidate set needs k >= 1");
  MaskCandidateSet out;
  out.k = k;
  out.matrix = Tensor({k, k});
  for (int r = 0; r < k; ++r)
    for (int p = 0; p < k - r; ++p) out.matrix.at(r, p) = 1.0;
  return out;
}

std::vector<RouterParams> init_routers(const MoEConfig& config, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int h = config.hidden, k = config.top_k;
  std::vector<RouterParams> out;
  out.reserve(static_cast<size_t>(config.num_layers));
  for (int l = 0; l < config.num_layers; ++l) {
    RouterParams r;
    r.fc1 = Tensor::randn({h, k}, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    r.fc2 = Tensor::randn({2 * k, k}, 1.0 / std::sqrt(2.0 * k), rng);
    out.push_back(std::move(r));
  }
  return out;
}

Tensor router_logits(const RouterParams& r, const Tensor& t,
                     const std::vector<double>& gate_weights) {
  Tensor w({static_cast<int>(gate_weights.size())}, gate_weights);
  Tensor cat = kern::concat(kern::matmul(t, r.fc1), w);
  return kern::matmul(kern::silu(cat), r.fc2);
}

Var router_logits_tape(Tape& tape, Var fc1, Var fc2, Var t,
                       const Tensor& gate_weights) {
  Var cat = tape.concat(tape.matmul(t, fc1), tape.constant(gate_weights));
  return tape.matmul(tape.silu(cat), fc2);
}

Tensor GumbelSampler::noise(int k) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor g({k});
  for (int i = 0; i < k; ++i) {
    const double u = std::clamp(unit(rng), 1e-12, 1.0 - 1e-12);
    g[i] = -std::log(-std::log(u));
  }
  return g;
}

Var gumbel_sample(Tape& tape, Var logits, GumbelSampler& sampler,
                  SampleMode mode) {
  const int k = static_cast<int>(tape.value(logits).numel());
  Var z = tape.add(logits, tape.constant(sampler.noise(k)));
  Var soft = tape.softmax(tape.scale(z, 1.0 / sampler.tau), 0);
  return mode == SampleMode::kSoft ? soft : tape.hard_onehot_st(soft);
}

Tensor gumbel_sample_plain(const Tensor& logits, GumbelSampler& sampler,
                           SampleMode mode) {
  const int k = static_cast<int>(logits.numel());
  Tensor z = kern::add(logits, sampler.noise(k));
  Tensor soft = kern::softmax(kern::scale(z, 1.0 / sampler.tau), 0);
  if (mode == SampleMode::kSoft) return soft;
  Tensor hard(soft.shape());
  hard[argmax(soft)] = 1.0;
  return hard;
}

Var mask_multipliers(Tape& tape, Var y_hat, const MaskCandidateSet& cands) {
  return tape.matmul(y_hat, tape.constant(cands.matrix));
}

OtpLossParts otp_loss(Tape& tape, const std::vector<Var>& student_logits,
                      const std::vector<Tensor>& teacher_logits,
                      const std::vector<Var>& mask_sums, double lambda,
                      bool mse_distill) {
  if (student_logits.empty())
    throw ConfigError("otp_loss: need at least one position");
  if (student_logits.size() != teacher_logits.size())
    throw ShapeError("otp_loss: student/teacher count mismatch");
  if (lambda < 0.0) throw ConfigError("otp_loss: lambda must be >= 0");

  OtpLossParts parts;
  for (size_t i = 0; i < student_logits.size(); ++i) {
    Var term;
    if (mse_distill) {
      Var diff = tape.sub(student_logits[i], tape.constant(teacher_logits[i]));
      term = tape.mean(tape.mul(diff, diff));
    } else {
      Var p = tape.constant(kern::softmax(teacher_logits[i], 1));
      Var q = tape.softmax(student_logits[i], 1);
      term = tape.kl_div(p, q);
    }
    parts.distill = (i == 0) ? term : tape.add(parts.distill, term);
  }
  parts.distill =
      tape.scale(parts.distill, 1.0 / static_cast<double>(student_logits.size()));

  if (mask_sums.empty()) {
    parts.sparsity = tape.constant(Tensor::scalar(0.0));
  } else {
    for (size_t i = 0; i < mask_sums.size(); ++i)
      parts.sparsity =
          (i == 0) ? mask_sums[i] : tape.add(parts.sparsity, mask_sums[i]);
    parts.sparsity =
        tape.scale(parts.sparsity, 1.0 / static_cast<double>(mask_sums.size()));
  }
  parts.total = tape.add(parts.distill, tape.scale(parts.sparsity, lambda));
  return parts;
}

namespace {

std::vector<double> hard_prefix_multipliers(int pruned, int k) {
  std::vector<double> m(static_cast<size_t>(k), 1.0);
  for (int rank = k - pruned; rank < k; ++rank) m[static_cast<size_t>(rank)] = 0.0;
  return m;
}

}  // namespace

TrainRouterResult train_router(const MoEModel& student, const MoEModel& teacher,
                               const TokenSet& train_data,
                               const OTPTrainConfig& config) {
  if (!(student.config == teacher.config))
    throw ConfigError("train_router: student/teacher configs differ");
  if (config.steps < 1 || config.batch < 1)
    throw ConfigError("train_router: steps and batch must be >= 1");
  const MoEConfig& mc = student.config;
  const int k = mc.top_k;
  const MaskCandidateSet cands = build_candidate_set(k);

  TrainRouterResult result;
  result.routers = init_routers(mc, derive_seed(config.seed, "router-init"));
  std::vector<RouterParams> last_good = result.routers;

  GumbelSampler sampler(config.tau_start, derive_seed(config.seed, "gumbel"));
  std::mt19937_64 batch_rng(derive_seed(config.seed, "otp-batch"));

  std::vector<int> pool;
  for (const auto& seq : train_data.sequences)
    pool.insert(pool.end(), seq.begin(), seq.end());
  if (pool.empty()) throw ConfigError("train_router: empty training data");
  std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);

  // The teacher is frozen and the block context-free: memoize its logits.
  std::vector<std::optional<Tensor>> teacher_memo(static_cast<size_t>(mc.vocab));
  auto teacher_logits_of = [&](int id) -> const Tensor& {
    auto& slot = teacher_memo[static_cast<size_t>(id)];
    if (!slot) slot = token_logits(teacher, id);
    return *slot;
  };

  Adam adam(config.lr);
  const double tau_decay =
      config.steps > 1
          ? std::pow(config.tau_end / config.tau_start,
                     1.0 / static_cast<double>(config.steps - 1))
          : 1.0;

  for (int step = 0; step < config.steps; ++step) {
    sampler.tau = config.tau_start * std::pow(tau_decay, step);
    try {
      Tape tape;
      TapeModel tm = bind_model(tape, student, /*trainable=*/false);
      std::vector<Var> fc1v, fc2v;
      std::vector<Tensor*> param_ptrs;
      for (auto& r : result.routers) {
        fc1v.push_back(tape.leaf(r.fc1));
        fc2v.push_back(tape.leaf(r.fc2));
        param_ptrs.push_back(&r.fc1);
        param_ptrs.push_back(&r.fc2);
      }

      std::vector<Var> mask_sums;
      TapeMaskFn mask_fn = [&](Tape& tp, int layer, Var t,
                               const RoutingRecord& rec) {
        Tensor w({k}, rec.weights);
        Var logits = router_logits_tape(tp, fc1v[static_cast<size_t>(layer)],
                                        fc2v[static_cast<size_t>(layer)], t, w);
        Var y = gumbel_sample(tp, logits, sampler,
                              config.hard_samples ? SampleMode::kHard
                                                  : SampleMode::kSoft);
        Var mult = mask_multipliers(tp, y, cands);
        mask_sums.push_back(tp.sum(mult));
        std::vector<Var> out;
        out.reserve(static_cast<size_t>(k));
        for (int rank = 0; rank < k; ++rank)
          out.push_back(tp.take_elems(mult, {rank}));
        return out;
      };

      std::vector<Var> student_logits;
      std::vector<Tensor> teacher_batch;
      for (int b = 0; b < config.batch; ++b) {
        const int id = pool[pick(batch_rng)];
        student_logits.push_back(token_logits_tape(tape, tm, id, &mask_fn));
        teacher_batch.push_back(teacher_logits_of(id));
      }

      OtpLossParts loss = otp_loss(tape, student_logits, teacher_batch,
                                   mask_sums, config.lambda, config.mse_distill);
      tape.backward(loss.total);
      std::vector<const Tensor*> grad_ptrs;
      for (size_t l = 0; l < fc1v.size(); ++l) {
        grad_ptrs.push_back(&tape.grad(fc1v[l]));
        grad_ptrs.push_back(&tape.grad(fc2v[l]));
      }
      adam.step(param_ptrs, grad_ptrs);

      const double sparsity = tape.value(loss.sparsity)[0];
      if (step % config.curve_every == 0 || step == config.steps - 1)
        result.curve.push_back({step, tape.value(loss.distill)[0], sparsity,
                                1.0 - sparsity / k});
      last_good = result.routers;
      result.steps_completed = step + 1;
    } catch (const NumericError&) {
      result.routers = last_good;
      result.diverged = true;
      break;
    }
  }

  result.final_hard_mask_ratio =
      inference_with_otp(student, result.routers, cands, train_data).mask_ratio;
  return result;
}

OtpEvalResult inference_with_otp(const MoEModel& student,
                                 const std::vector<RouterParams>& routers,
                                 const MaskCandidateSet& cands,
                                 const TokenSet& data, int max_threads) {
  (void)cands;
  const MoEConfig& mc = student.config;
  if (static_cast<int>(routers.size()) != mc.num_layers)
    throw ConfigError("inference_with_otp: router count mismatch");
  const int k = mc.top_k, B = mc.num_layers;

  std::set<int> distinct;
  for (const auto& seq : data.sequences)
    for (int id : seq) distinct.insert(id);
  std::vector<int> ids(distinct.begin(), distinct.end());

  struct PerId {
    Tensor logits;
    double lse = 0.0;
    int64_t pruned_slots = 0;
    std::vector<std::pair<int, int>> kept;  // (layer, expert)
  };
  std::vector<PerId> per_id(ids.size());

  parallel_for(
      static_cast<int64_t>(ids.size()),
      [&](int64_t i) {
        PerId& slot = per_id[static_cast<size_t>(i)];
        ForwardHooks hooks;
        hooks.mask = [&](int layer, const Tensor& t, const RoutingRecord& rec) {
          Tensor logits =
              router_logits(routers[static_cast<size_t>(layer)], t, rec.weights);
          const int pruned = argmax(logits);  // candidate r prunes r experts
          slot.pruned_slots += pruned;
          for (int rank = 0; rank < k - pruned; ++rank)
            slot.kept.emplace_back(layer,
                                   rec.selected[static_cast<size_t>(rank)]);
          return hard_prefix_multipliers(pruned, k);
        };
        slot.logits =
            token_logits(student, ids[static_cast<size_t>(i)], nullptr, &hooks);
        slot.lse = kern::logsumexp(slot.logits);
      },
      max_threads);

  std::map<int, size_t> slot_of;
  for (size_t i = 0; i < ids.size(); ++i) slot_of[ids[i]] = i;

  OtpEvalResult out;
  out.kept_counts.assign(static_cast<size_t>(B),
                         std::vector<int64_t>(static_cast<size_t>(mc.num_experts), 0));
  int64_t pruned_total = 0, kept_total = 0;
  double nll = 0.0;
  int64_t positions = 0;
  for (const auto& seq : data.sequences) {
    for (size_t i = 0; i < seq.size(); ++i) {
      const PerId& s = per_id[slot_of[seq[i]]];
      pruned_total += s.pruned_slots;
      kept_total += static_cast<int64_t>(s.kept.size());
      for (const auto& [l, e] : s.kept)
        ++out.kept_counts[static_cast<size_t>(l)][static_cast<size_t>(e)];
      if (i + 1 < seq.size()) {
        nll += s.lse - s.logits[seq[i + 1]];
        ++positions;
      }
      ++out.tokens;
    }
  }
  out.mask_ratio = static_cast<double>(pruned_total) /
                   (static_cast<double>(out.tokens) * B * k);
  out.mean_kept_per_token =
      static_cast<double>(kept_total) / (static_cast<double>(out.tokens) * B);
  out.eval_nll = positions > 0 ? nll / static_cast<double>(positions) : 0.0;
  return out;
}

OtpEvalResult inference_with_random_pruning(const MoEModel& student,
                                            double ratio, uint64_t seed,
                                            const TokenSet& data) {
  if (ratio < 0.0 || ratio > 1.0)
    throw ConfigError("random pruning ratio must be in [0,1]");
  const MoEConfig& mc = student.config;
  const int k = mc.top_k, B = mc.num_layers;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Per (token, layer) prune a rank-tail of expected size ratio*k.
  const double target = ratio * k;
  const int base = static_cast<int>(std::floor(target));
  const double frac = target - base;

  OtpEvalResult out;
  out.kept_counts.assign(static_cast<size_t>(B),
                         std::vector<int64_t>(static_cast<size_t>(mc.num_experts), 0));
  int64_t pruned_total = 0, kept_total = 0;
  double nll = 0.0;
  int64_t positions = 0;
  for (const auto& seq : data.sequences) {
    for (size_t i = 0; i < seq.size(); ++i) {
      int64_t pruned_token = 0;
      ForwardHooks hooks;
      hooks.mask = [&](int layer, const Tensor&, const RoutingRecord& rec) {
        int pruned = base + (unit(rng) < frac ? 1 : 0);
        pruned = std::min(pruned, k - 1);  // never the top expert
        pruned_token += pruned;
        for (int rank = 0; rank < k - pruned; ++rank)
          ++out.kept_counts[static_cast<size_t>(layer)][static_cast<size_t>(
              rec.selected[static_cast<size_t>(rank)])];
        return hard_prefix_multipliers(pruned, k);
      };
      Tensor logits = token_logits(student, seq[i], nullptr, &hooks);
      pruned_total += pruned_token;
      kept_total += static_cast<int64_t>(B) * k - pruned_token;
      if (i + 1 < seq.size()) {
        nll += kern::logsumexp(logits) - logits[seq[i + 1]];
        ++positions;
      }
      ++out.tokens;
    }
  }
  out.mask_ratio = static_cast<double>(pruned_total) /
                   (static_cast<double>(out.tokens) * B * k);
  out.mean_kept_per_token =
      static_cast<double>(kept_total) / (static_cast<double>(out.tokens) * B);
  out.eval_nll = positions > 0 ? nll / static_cast<double>(positions) : 0.0;
  return out;
}

std::vector<double> rule_thresholds(const MoEModel& model, const TokenSet& calib) {
  if (model.config.top_k != 2)
    throw ConfigError("rule-based pruning is defined for top-2 routing only");
  const int B = model.config.num_layers;

  std::set<int> distinct;
  for (const auto& seq : calib.sequences)
    for (int id : seq) distinct.insert(id);

  std::map<int, std::vector<double>> ratio_by_id;
  for (int id : distinct) {
    std::vector<RoutingRecord> recs;
    token_logits(model, id, &recs);
    std::vector<double> r;
    r.reserve(static_cast<size_t>(B));
    for (const auto& rec : recs) r.push_back(rec.weights[1] / rec.weights[0]);
    ratio_by_id[id] = std::move(r);
  }

  std::vector<std::vector<double>> ratios(static_cast<size_t>(B));
  for (const auto& seq : calib.sequences)
    for (int id : seq) {
      const auto& r = ratio_by_id[id];
      for (int l = 0; l < B; ++l)
        ratios[static_cast<size_t>(l)].push_back(r[static_cast<size_t>(l)]);
    }

  std::vector<double> mu(static_cast<size_t>(B));
  for (int l = 0; l < B; ++l) {
    auto& v = ratios[static_cast<size_t>(l)];
    std::sort(v.begin(), v.end());
    mu[static_cast<size_t>(l)] = v[(v.size() - 1) / 2];
  }
  return mu;
}

RoutingRecord rule_based_prune(const RoutingRecord& rec, double mu) {
  if (rec.selected.size() != 2)
    throw ConfigError("rule-based pruning is defined for top-2 routing only");
  RoutingRecord out = rec;
  if (rec.weights[1] / rec.weights[0] < mu) {
    out.selected = {rec.selected[0]};
    out.weights = {1.0};
  }
  return out;
}

}  // namespace mcsh
