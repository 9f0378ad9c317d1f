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

#include "mcsh/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include <json.hpp>

namespace mcsh {

using nlohmann::json;

namespace {

std::string fp17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

std::string join_path(const std::string& dir, const char* name) {
  return (std::filesystem::path(dir) / name).string();
}

json model_config_json(const MoEConfig& c) {
  return json::parse(config_to_json(c));
}

}  // namespace

// ---- RunConfig ----

void RunConfig::validate() const {
  model.validate();
  if (calib_sequences < 1 || calib_seq_len < 1 || eval_sequences < 1 ||
      eval_seq_len < 1)
    throw ConfigError("calibration/eval set sizes must be >= 1");
  if (b_avg < 1.0 || b_avg > 3.0)
    throw ConfigError("b_avg must lie in [1, 3]");
  if (alpha < 0 || beta < 0 || gamma < 0)
    throw ConfigError("alpha/beta/gamma must be >= 0");
  if (quant.group_size < 1) throw ConfigError("group_size must be >= 1");
  if (nonexpert_bits < 2 || nonexpert_bits > 4)
    throw ConfigError("nonexpert_bits must be in [2, 4]");
  if (otp.lambda < 0) throw ConfigError("otp lambda must be >= 0");
  if (otp.steps < 1 || otp.batch < 1)
    throw ConfigError("otp steps/batch must be >= 1");
  for (double b : sweep_b_avgs)
    if (b < 1.0 || b > 3.0) throw ConfigError("sweep b_avg outside [1, 3]");
}

std::string RunConfig::canonical_json() const {
  json j;
  j["model"] = model_config_json(model);
  j["seeds"] = {{"model", seed_model},
                {"calib", seed_calib},
                {"eval", seed_eval},
                {"gumbel", seed_gumbel},
                {"sweep", seed_sweep}};
  j["calibration"] = {{"sequences", calib_sequences}, {"seq_len", calib_seq_len}};
  j["eval"] = {{"sequences", eval_sequences}, {"seq_len", eval_seq_len}};
  j["teacher"] = {{"steps", gen.teacher_steps},
                  {"batch", gen.teacher_batch},
                  {"lr", gen.teacher_lr},
                  {"stream_tokens", gen.stream_tokens}};
  j["quant"] = {{"b_avg", b_avg},
                {"cost_kind", to_string(cost_kind)},
                {"alpha", alpha},
                {"beta", beta},
                {"gamma", gamma},
                {"group_size", quant.group_size},
                {"binary_scale",
                 quant.binary_mode == BinaryScaleMode::kChannel ? "channel" : "matrix"},
                {"hessian_damp", quant.hessian_damp},
                {"nonexpert_bits", nonexpert_bits},
                {"coverage", coverage},
                {"global_budget", global_budget}};
  j["otp"] = {{"lambda", otp.lambda},
              {"steps", otp.steps},
              {"batch", otp.batch},
              {"lr", otp.lr},
              {"tau_start", otp.tau_start},
              {"tau_end", otp.tau_end},
              {"mse_distill", otp.mse_distill},
              {"hard_samples", otp.hard_samples},
              {"fp_teacher", otp_fp_teacher}};
  json kinds = json::array();
  for (CostKind k : sweep_kinds) kinds.push_back(to_string(k));
  j["sweep"] = {{"b_avgs", sweep_b_avgs}, {"cost_kinds", kinds}};
  return j.dump();
}

std::string RunConfig::hash() const { return hex64(fnv1a64(canonical_json())); }

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad run config json: ") + e.what());
  }
  RunConfig c;
  try {
    if (j.contains("model")) {
      const json& m = j["model"];
      c.model.num_layers = m.value("num_layers", c.model.num_layers);
      c.model.hidden = m.value("hidden", c.model.hidden);
      c.model.ffn_inner = m.value("ffn_inner", c.model.ffn_inner);
      c.model.num_experts = m.value("num_experts", c.model.num_experts);
      c.model.top_k = m.value("top_k", c.model.top_k);
      c.model.vocab = m.value("vocab", c.model.vocab);
      c.model.num_shared_experts =
          m.value("num_shared_experts", c.model.num_shared_experts);
    }
    if (j.contains("seeds")) {
      const json& s = j["seeds"];
      c.seed_model = s.value("model", c.seed_model);
      c.seed_calib = s.value("calib", c.seed_calib);
      c.seed_eval = s.value("eval", c.seed_eval);
      c.seed_gumbel = s.value("gumbel", c.seed_gumbel);
      c.seed_sweep = s.value("sweep", c.seed_sweep);
    }
    if (j.contains("calibration")) {
      c.calib_sequences = j["calibration"].value("sequences", c.calib_sequences);
      c.calib_seq_len = j["calibration"].value("seq_len", c.calib_seq_len);
    }
    if (j.contains("eval")) {
      c.eval_sequences = j["eval"].value("sequences", c.eval_sequences);
      c.eval_seq_len = j["eval"].value("seq_len", c.eval_seq_len);
    }
    if (j.contains("teacher")) {
      const json& t = j["teacher"];
      c.gen.teacher_steps = t.value("steps", c.gen.teacher_steps);
      c.gen.teacher_batch = t.value("batch", c.gen.teacher_batch);
      c.gen.teacher_lr = t.value("lr", c.gen.teacher_lr);
      c.gen.stream_tokens = t.value("stream_tokens", c.gen.stream_tokens);
    }
    if (j.contains("quant")) {
      const json& q = j["quant"];
      c.b_avg = q.value("b_avg", c.b_avg);
      if (q.contains("cost_kind"))
        c.cost_kind = cost_kind_from_string(q["cost_kind"].get<std::string>());
      c.alpha = q.value("alpha", c.alpha);
      c.beta = q.value("beta", c.beta);
      c.gamma = q.value("gamma", c.gamma);
      c.quant.group_size = q.value("group_size", c.quant.group_size);
      c.quant.hessian_damp = q.value("hessian_damp", c.quant.hessian_damp);
      if (q.contains("binary_scale")) {
        const std::string s = q["binary_scale"].get<std::string>();
        if (s == "channel") c.quant.binary_mode = BinaryScaleMode::kChannel;
        else if (s == "matrix") c.quant.binary_mode = BinaryScaleMode::kMatrix;
        else throw ConfigError("binary_scale must be channel or matrix");
      }
      c.nonexpert_bits = q.value("nonexpert_bits", c.nonexpert_bits);
      c.coverage = q.value("coverage", c.coverage);
      c.global_budget = q.value("global_budget", c.global_budget);
    }
    if (j.contains("otp")) {
      const json& o = j["otp"];
      c.otp.lambda = o.value("lambda", c.otp.lambda);
      c.otp.steps = o.value("steps", c.otp.steps);
      c.otp.batch = o.value("batch", c.otp.batch);
      c.otp.lr = o.value("lr", c.otp.lr);
      c.otp.tau_start = o.value("tau_start", c.otp.tau_start);
      c.otp.tau_end = o.value("tau_end", c.otp.tau_end);
      c.otp.mse_distill = o.value("mse_distill", c.otp.mse_distill);
      c.otp.hard_samples = o.value("hard_samples", c.otp.hard_samples);
      c.otp_fp_teacher = o.value("fp_teacher", c.otp_fp_teacher);
    }
    if (j.contains("sweep")) {
      const json& s = j["sweep"];
      if (s.contains("b_avgs"))
        c.sweep_b_avgs = s["b_avgs"].get<std::vector<double>>();
      if (s.contains("cost_kinds")) {
        c.sweep_kinds.clear();
        for (const auto& k : s["cost_kinds"])
          c.sweep_kinds.push_back(cost_kind_from_string(k.get<std::string>()));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad run config value: ") + e.what());
  }
  c.model.seed = c.seed_model;
  c.otp.seed = c.seed_gumbel;
  c.validate();
  return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  return from_json_text(read_text_file(path));
}

void RunConfig::apply_master_seed(uint64_t seed) {
  seed_model = derive_seed(seed, "model");
  seed_calib = derive_seed(seed, "calib");
  seed_eval = derive_seed(seed, "eval");
  seed_gumbel = derive_seed(seed, "gumbel");
  seed_sweep = derive_seed(seed, "sweep");
  model.seed = seed_model;
  otp.seed = seed_gumbel;
}

TokenSet RunConfig::calibration_set() const {
  return sample_token_set(model_chain(model), calib_sequences, calib_seq_len,
                          seed_calib);
}

TokenSet RunConfig::eval_set() const {
  return sample_token_set(model_chain(model), eval_sequences, eval_seq_len,
                          seed_eval);
}

// ---- quantized model assembly ----

MatrixSizes sizes_of(const QuantMatrix& q) {
  MatrixSizes s;
  s.payload = q.payload_bytes();
  s.scales = q.scale_bytes();
  s.zeros = q.zero_bytes();
  s.elements = q.elements();
  s.bits = q.bits();
  return s;
}

int64_t QuantizedModel::router_bytes() const {
  if (!routers) return 0;
  int64_t n = 0;
  for (const auto& r : *routers) n += (r.fc1.numel() + r.fc2.numel()) * 8;
  return n;
}

std::map<std::string, MatrixSizes> QuantizedModel::size_map() const {
  std::map<std::string, MatrixSizes> out;
  for (const auto& [name, q] : matrices) out[name] = sizes_of(q);
  MatrixSizes emb;
  emb.payload = dense.embedding.numel() * 8;
  emb.elements = dense.embedding.numel();
  emb.bits = 64;
  out["embedding"] = emb;
  return out;
}

QuantizedModel wrap_fp_model(const MoEModel& model) {
  QuantizedModel q;
  q.dense = model;
  // No packed matrices: size_map() then reports only the embedding, so build
  // synthetic 64-bit entries for every parameter instead.
  return q;
}

QuantizedModel quantize_model(const MoEModel& fp,
                              const CalibrationCapture& capture,
                              const ModelAllocation& allocation,
                              const QuantOptions& opts, int nonexpert_bits,
                              int max_threads) {
  const MoEConfig& mc = fp.config;
  if (static_cast<int>(allocation.layers.size()) != mc.num_layers)
    throw ConfigError("allocation layer count does not match model");
  for (const auto& layer : allocation.layers)
    if (static_cast<int>(layer.bits.size()) != mc.num_experts)
      throw ConfigError("allocation expert count does not match model");

  QuantizedModel out;
  out.dense = fp;
  out.allocation = allocation;

  // Routed experts: GPTQ at the allocated widths, independent tasks.
  const int E = mc.num_experts;
  std::vector<QuantizedExpert> experts(static_cast<size_t>(mc.num_layers) * E);
  parallel_for(
      static_cast<int64_t>(experts.size()),
      [&](int64_t t) {
        const int l = static_cast<int>(t) / E;
        const int e = static_cast<int>(t) % E;
        const int bits =
            allocation.layers[static_cast<size_t>(l)].bits[static_cast<size_t>(e)];
        experts[static_cast<size_t>(t)] = quantize_expert(
            fp.layers[static_cast<size_t>(l)].experts[static_cast<size_t>(e)],
            bits, capture.hess_input(l, e), capture.hess_hidden(l, e), opts);
      },
      max_threads);

  auto ename = [](int l, int e, const char* part) {
    return "layer" + std::to_string(l) + ".expert" + std::to_string(e) + "." + part;
  };
  for (int l = 0; l < mc.num_layers; ++l)
    for (int e = 0; e < E; ++e) {
      QuantizedExpert& qe = experts[static_cast<size_t>(l) * E + e];
      out.dense.layers[static_cast<size_t>(l)].experts[static_cast<size_t>(e)] =
          qe.dense();
      out.matrices[ename(l, e, "w_gate")] = std::move(qe.gate);
      out.matrices[ename(l, e, "w_up")] = std::move(qe.up);
      out.matrices[ename(l, e, "w_down")] = std::move(qe.down);
    }

  // Everything else (dense stand-in, gating, shared expert, head) is uniform
  // low-bit RTN; the embedding stays float64.
  auto rtn_into = [&](const std::string& name, Tensor& dst) {
    QuantMatrix q = quantize_matrix_rtn(dst, nonexpert_bits, opts.group_size);
    dst = q.dense;
    out.matrices[name] = std::move(q);
  };
  for (int l = 0; l < mc.num_layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    rtn_into(lp + "mlp.w1", out.dense.mlps[static_cast<size_t>(l)].w1);
    rtn_into(lp + "mlp.w2", out.dense.mlps[static_cast<size_t>(l)].w2);
    rtn_into(lp + "gating", out.dense.layers[static_cast<size_t>(l)].gating);
    if (out.dense.layers[static_cast<size_t>(l)].shared) {
      auto& sh = *out.dense.layers[static_cast<size_t>(l)].shared;
      rtn_into(lp + "shared.w_gate", sh.w_gate);
      rtn_into(lp + "shared.w_up", sh.w_up);
      rtn_into(lp + "shared.w_down", sh.w_down);
    }
  }
  rtn_into("head", out.dense.head);
  return out;
}

PackedModelFile to_packed_file(const MoEModel& fp, const QuantizedModel& q,
                               const std::string& allocation_json) {
  PackedModelFile file;
  file.config = fp.config;
  file.allocation_json = allocation_json;
  for (const auto& [name, t] : fp.named_params()) {
    (void)t;
    if (name == "embedding") {
      file.sections.push_back(
          {name, kSectionRawTensor, encode_raw_tensor(q.dense.embedding)});
      continue;
    }
    auto it = q.matrices.find(name);
    if (it == q.matrices.end())
      throw ConfigError("packed model is missing matrix " + name);
    file.sections.push_back(
        {name, kSectionPackedMatrix, encode_packed_matrix(it->second)});
  }
  if (q.routers)
    file.sections.push_back({"routers", kSectionRouters, encode_routers(*q.routers)});
  return file;
}

namespace {

ModelAllocation allocation_from_json_text(const std::string& text) {
  ModelAllocation out;
  if (text.empty()) return out;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad allocation json: ") + e.what());
  }
  if (!j.contains("layers")) return out;
  const json& layers = j["layers"];
  for (size_t l = 0; l < layers.size(); ++l) {
    const json& jl = layers.at(std::to_string(l));
    BitAllocation a;
    a.bits = jl.at("bits").get<std::vector<int>>();
    a.budget = jl.at("budget").get<int>();
    a.objective = jl.at("objective").get<double>();
    out.total_objective += a.objective;
    out.layers.push_back(std::move(a));
  }
  return out;
}

}  // namespace

QuantizedModel from_packed_file(const PackedModelFile& file) {
  QuantizedModel out;
  out.dense = init_model(file.config);
  out.allocation = allocation_from_json_text(file.allocation_json);

  auto named = out.dense.named_params();
  std::map<std::string, Tensor*> by_name(named.begin(), named.end());
  for (const auto& s : file.sections) {
    if (s.kind == kSectionRouters) {
      out.routers = decode_routers(s.bytes);
      continue;
    }
    auto it = by_name.find(s.name);
    if (it == by_name.end())
      throw ConfigError("packed model has unknown section " + s.name);
    if (s.kind == kSectionRawTensor) {
      Tensor t = decode_raw_tensor(s.bytes);
      if (!t.same_shape(*it->second))
        throw ConfigError("packed model shape mismatch for " + s.name);
      *it->second = std::move(t);
    } else if (s.kind == kSectionPackedMatrix) {
      QuantMatrix q = decode_packed_matrix(s.bytes);
      if (!q.dense.same_shape(*it->second))
        throw ConfigError("packed model shape mismatch for " + s.name);
      *it->second = q.dense;
      out.matrices[s.name] = std::move(q);
    } else {
      throw ConfigError("packed model has unknown section kind");
    }
  }
  for (const auto& [name, t] : named) {
    (void)t;
    if (name != "embedding" && out.matrices.find(name) == out.matrices.end())
      throw ConfigError("packed model is missing section " + name);
  }
  return out;
}

// ---- accounting ----

double SizeBreakdown::avg_expert_bits() const {
  return expert_elements == 0
             ? 0.0
             : static_cast<double>((expert_payload + expert_scales + expert_zeros) * 8) /
                   static_cast<double>(expert_elements);
}

double SizeBreakdown::avg_expert_bits_payload() const {
  return expert_elements == 0
             ? 0.0
             : static_cast<double>(expert_payload * 8) /
                   static_cast<double>(expert_elements);
}

double SizeBreakdown::avg_model_bits() const {
  return total_elements == 0
             ? 0.0
             : static_cast<double>(
                   (expert_payload + expert_scales + expert_zeros + other_stored +
                    embedding_bytes) *
                   8) /
                   static_cast<double>(total_elements);
}

SizeBreakdown size_breakdown(const QuantizedModel& q) {
  SizeBreakdown out;
  bool have_packed = !q.matrices.empty();
  if (!have_packed) {
    // Uncompressed wrap: every parameter is a raw float64 payload.
    for (const auto& [name, t] : q.dense.named_params()) {
      const int64_t bytes = t->numel() * 8;
      if (name.find(".expert") != std::string::npos) {
        out.expert_payload += bytes;
        out.expert_elements += t->numel();
      } else if (name == "embedding") {
        out.embedding_bytes += bytes;
      } else {
        out.other_stored += bytes;
      }
      out.total_elements += t->numel();
    }
    out.router_bytes = q.router_bytes();
    return out;
  }
  for (const auto& [name, s] : q.size_map()) {
    out.total_elements += s.elements;
    if (name.find(".expert") != std::string::npos) {
      out.expert_payload += s.payload;
      out.expert_scales += s.scales;
      out.expert_zeros += s.zeros;
      out.expert_elements += s.elements;
    } else if (name == "embedding") {
      out.embedding_bytes += s.payload;
    } else {
      out.other_stored += s.stored();
    }
  }
  out.router_bytes = q.router_bytes();
  return out;
}

namespace {

// Expert MAC cost per token for one expert at a given width: binary matmuls
// need one multiplication per output channel, linear widths dequantize to a
// dense d*m product.
int64_t expert_macs(const MoEConfig& mc, int bits) {
  const int64_t h = mc.hidden, f = mc.ffn_inner;
  if (bits == 1) return f + f + h;
  return h * f + h * f + f * h;
}

struct EvalLedger {
  double nll = 0.0;
  double mask_ratio = 0.0;
  double mean_kept = 0.0;
  std::vector<std::vector<int64_t>> kept_counts;
  int64_t tokens = 0;
};

// Routing statistics without masks: every selected expert counts as kept.
EvalLedger plain_eval_ledger(const MoEModel& model, const TokenSet& data,
                             int max_threads) {
  const MoEConfig& mc = model.config;
  std::set<int> distinct;
  for (const auto& seq : data.sequences)
    for (int id : seq) distinct.insert(id);
  std::vector<int> ids(distinct.begin(), distinct.end());
  std::vector<Tensor> logits(ids.size());
  std::vector<double> lse(ids.size());
  std::vector<std::vector<RoutingRecord>> recs(ids.size());
  parallel_for(
      static_cast<int64_t>(ids.size()),
      [&](int64_t i) {
        logits[static_cast<size_t>(i)] = token_logits(
            model, ids[static_cast<size_t>(i)], &recs[static_cast<size_t>(i)]);
        lse[static_cast<size_t>(i)] = kern::logsumexp(logits[static_cast<size_t>(i)]);
      },
      max_threads);
  std::map<int, size_t> slot;
  for (size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;

  EvalLedger out;
  out.kept_counts.assign(static_cast<size_t>(mc.num_layers),
                         std::vector<int64_t>(static_cast<size_t>(mc.num_experts), 0));
  int64_t positions = 0;
  for (const auto& seq : data.sequences) {
    for (size_t i = 0; i < seq.size(); ++i) {
      const size_t s = slot[seq[i]];
      for (int l = 0; l < mc.num_layers; ++l)
        for (int e : recs[s][static_cast<size_t>(l)].selected)
          ++out.kept_counts[static_cast<size_t>(l)][static_cast<size_t>(e)];
      if (i + 1 < seq.size()) {
        out.nll += lse[s] - logits[s][seq[i + 1]];
        ++positions;
      }
      ++out.tokens;
    }
  }
  out.nll = positions > 0 ? out.nll / static_cast<double>(positions) : 0.0;
  out.mean_kept = static_cast<double>(mc.top_k);
  out.mask_ratio = 0.0;
  return out;
}

}  // namespace

Report build_report(const RunConfig& config, const QuantizedModel& q,
                    bool use_otp) {
  const MoEConfig& mc = q.dense.config;
  const TokenSet eval = config.eval_set();

  EvalLedger ledger;
  bool otp_applied = false;
  if (use_otp && q.routers) {
    OtpEvalResult r = inference_with_otp(q.dense, *q.routers,
                                         build_candidate_set(mc.top_k), eval,
                                         config.threads);
    ledger.nll = r.eval_nll;
    ledger.mask_ratio = r.mask_ratio;
    ledger.mean_kept = r.mean_kept_per_token;
    ledger.kept_counts = r.kept_counts;
    ledger.tokens = r.tokens;
    otp_applied = true;
  } else {
    ledger = plain_eval_ledger(q.dense, eval, config.threads);
  }

  const SizeBreakdown sizes = size_breakdown(q);
  const auto size_map = q.size_map();
  const bool packed = !q.matrices.empty();

  // Stored bytes of one expert / per-name lookup with the fp64 fallback.
  auto stored_of = [&](const std::string& name) -> int64_t {
    if (packed) {
      auto it = size_map.find(name);
      if (it == size_map.end()) throw ConfigError("missing size entry " + name);
      return it->second.stored();
    }
    for (const auto& [n, t] : q.dense.named_params())
      if (n == name) return t->numel() * 8;
    throw ConfigError("missing parameter " + name);
  };

  // Activated footprint per token: embedding row + dense stand-in + shared
  // expert + mean stored size of the experts actually kept by the mask.
  double activated = static_cast<double>(mc.hidden) * 8.0;
  int64_t fixed_macs = static_cast<int64_t>(mc.hidden) * mc.vocab;  // head
  for (int l = 0; l < mc.num_layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    activated += static_cast<double>(stored_of(lp + "mlp.w1") +
                                     stored_of(lp + "mlp.w2"));
    fixed_macs += static_cast<int64_t>(mc.hidden) * mc.ffn_inner +
                  static_cast<int64_t>(mc.ffn_inner) * mc.hidden;
    fixed_macs += static_cast<int64_t>(mc.hidden) * mc.num_experts;  // gating
    if (q.dense.layers[static_cast<size_t>(l)].shared) {
      activated += static_cast<double>(stored_of(lp + "shared.w_gate") +
                                       stored_of(lp + "shared.w_up") +
                                       stored_of(lp + "shared.w_down"));
      fixed_macs += 2LL * mc.hidden * mc.ffn_inner +
                    static_cast<int64_t>(mc.ffn_inner) * mc.hidden;
    }
  }
  double kept_bytes = 0.0, kept_macs = 0.0;
  for (int l = 0; l < mc.num_layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".expert";
    for (int e = 0; e < mc.num_experts; ++e) {
      const int64_t n = ledger.kept_counts.empty()
                            ? 0
                            : ledger.kept_counts[static_cast<size_t>(l)]
                                                [static_cast<size_t>(e)];
      if (n == 0) continue;
      const std::string ep = lp + std::to_string(e) + ".";
      const int64_t bytes = stored_of(ep + "w_gate") + stored_of(ep + "w_up") +
                            stored_of(ep + "w_down");
      const int bits =
          q.allocation.layers.empty()
              ? 64
              : q.allocation.layers[static_cast<size_t>(l)].bits[static_cast<size_t>(e)];
      kept_bytes += static_cast<double>(n) * static_cast<double>(bytes);
      kept_macs += static_cast<double>(n) *
                   static_cast<double>(expert_macs(mc, packed ? bits : 64));
    }
  }
  const double tokens = std::max<double>(1.0, static_cast<double>(ledger.tokens));
  activated += kept_bytes / tokens;

  Report rep;
  rep.config_hash = config.hash();
  rep.eval_nll = ledger.nll;
  rep.ppl_proxy = std::exp(ledger.nll);
  rep.avg_expert_bits = sizes.avg_expert_bits();
  rep.avg_expert_bits_payload = sizes.avg_expert_bits_payload();
  rep.avg_model_bits = sizes.avg_model_bits();
  rep.total_param_bytes = sizes.total_stored();
  rep.fp64_baseline_bytes = sizes.total_elements * 8;
  rep.compression_ratio =
      static_cast<double>(rep.fp64_baseline_bytes) /
      static_cast<double>(std::max<int64_t>(1, rep.total_param_bytes));
  rep.activated_bytes_per_token = activated;
  rep.activated_macs_per_token =
      static_cast<double>(fixed_macs) + kept_macs / tokens;
  rep.expert_prune_ratio = ledger.mask_ratio;
  rep.mean_kept_experts = ledger.mean_kept;
  rep.otp_applied = otp_applied;
  return rep;
}

std::string Report::to_json_text() const {
  json j;
  j["config_hash"] = config_hash;
  j["eval_nll"] = eval_nll;
  j["ppl_proxy"] = ppl_proxy;
  j["avg_expert_bits"] = avg_expert_bits;
  j["avg_expert_bits_payload"] = avg_expert_bits_payload;
  j["avg_model_bits"] = avg_model_bits;
  j["total_param_bytes"] = total_param_bytes;
  j["fp64_baseline_bytes"] = fp64_baseline_bytes;
  j["compression_ratio"] = compression_ratio;
  j["activated_bytes_per_token"] = activated_bytes_per_token;
  j["activated_macs_per_token"] = activated_macs_per_token;
  j["expert_prune_ratio"] = expert_prune_ratio;
  j["mean_kept_experts"] = mean_kept_experts;
  j["otp_applied"] = otp_applied;
  return j.dump(2) + "\n";
}

Report Report::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad report json: ") + e.what());
  }
  Report r;
  r.config_hash = j.value("config_hash", "");
  r.eval_nll = j.value("eval_nll", 0.0);
  r.ppl_proxy = j.value("ppl_proxy", 0.0);
  r.avg_expert_bits = j.value("avg_expert_bits", 0.0);
  r.avg_expert_bits_payload = j.value("avg_expert_bits_payload", 0.0);
  r.avg_model_bits = j.value("avg_model_bits", 0.0);
  r.total_param_bytes = j.value("total_param_bytes", int64_t{0});
  r.fp64_baseline_bytes = j.value("fp64_baseline_bytes", int64_t{0});
  r.compression_ratio = j.value("compression_ratio", 0.0);
  r.activated_bytes_per_token = j.value("activated_bytes_per_token", 0.0);
  r.activated_macs_per_token = j.value("activated_macs_per_token", 0.0);
  r.expert_prune_ratio = j.value("expert_prune_ratio", 0.0);
  r.mean_kept_experts = j.value("mean_kept_experts", 0.0);
  r.otp_applied = j.value("otp_applied", false);
  return r;
}

// ---- stage outputs ----

namespace {

void append_runlog(const std::string& outdir, const std::string& stage,
                   const std::string& hash) {
  const std::string path = join_path(outdir, files::kRunLog);
  json log = json::array();
  try {
    log = json::parse(read_text_file(path));
  } catch (const Error&) {
    // first stage in this directory
  } catch (const json::exception&) {
    log = json::array();
  }
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  log.push_back(
      {{"stage", stage},
       {"config_hash", hash},
       {"unix_ms",
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count()}});
  atomic_write_text(path, log.dump(2) + "\n");
}

void write_stats_json(const RunConfig& config, const CalibrationStats& stats,
                      const std::string& path) {
  json layers = json::object();
  for (size_t l = 0; l < stats.phi.size(); ++l) {
    json arr = json::array();
    for (size_t e = 0; e < stats.phi[l].size(); ++e)
      arr.push_back({{"expert", e},
                     {"n", stats.counts[l][e]},
                     {"phi", stats.phi[l][e]},
                     {"w", stats.weight[l][e]}});
    layers[std::to_string(l)] = arr;
  }
  json j = {{"config_hash", config.hash()},
            {"seed_model", config.seed_model},
            {"seed_calib", config.seed_calib},
            {"total_tokens", stats.total_tokens},
            {"layers", layers}};
  atomic_write_text(path, j.dump(2) + "\n");
}

CalibrationStats read_stats_json(const RunConfig& config, const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad stats json: ") + e.what());
  }
  if (j.value("config_hash", "") != config.hash())
    throw ConfigError("stats.json config hash mismatch: rerun calibrate");
  CalibrationStats stats;
  stats.total_tokens = j.at("total_tokens").get<int64_t>();
  const json& layers = j.at("layers");
  stats.counts.resize(layers.size());
  stats.phi.resize(layers.size());
  stats.weight.resize(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    const json& arr = layers.at(std::to_string(l));
    for (const auto& row : arr) {
      stats.counts[l].push_back(row.at("n").get<int64_t>());
      stats.phi[l].push_back(row.at("phi").get<double>());
      stats.weight[l].push_back(row.at("w").get<double>());
    }
  }
  return stats;
}

void write_errors_json(const RunConfig& config, const QuantErrorTable& table,
                       const std::string& path) {
  json layers = json::object();
  for (size_t l = 0; l < table.eps.size(); ++l) {
    json arr = json::array();
    for (size_t e = 0; e < table.eps[l].size(); ++e)
      arr.push_back({{"expert", e},
                     {"eps1", table.eps[l][e][0]},
                     {"eps2", table.eps[l][e][1]},
                     {"eps3", table.eps[l][e][2]}});
    layers[std::to_string(l)] = arr;
  }
  json j = {{"config_hash", config.hash()},
            {"seed_model", config.seed_model},
            {"seed_calib", config.seed_calib},
            {"layers", layers}};
  atomic_write_text(path, j.dump(2) + "\n");
}

QuantErrorTable read_errors_json(const RunConfig& config, const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad errors json: ") + e.what());
  }
  if (j.value("config_hash", "") != config.hash())
    throw ConfigError("errors.json config hash mismatch: rerun calibrate");
  QuantErrorTable table;
  const json& layers = j.at("layers");
  table.eps.resize(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    const json& arr = layers.at(std::to_string(l));
    for (const auto& row : arr)
      table.eps[l].push_back({row.at("eps1").get<double>(),
                              row.at("eps2").get<double>(),
                              row.at("eps3").get<double>()});
  }
  return table;
}

std::string allocation_to_json_text(const RunConfig& config,
                                    const ModelAllocation& alloc) {
  json layers = json::object();
  for (size_t l = 0; l < alloc.layers.size(); ++l) {
    layers[std::to_string(l)] = {{"bits", alloc.layers[l].bits},
                                 {"budget", alloc.layers[l].budget},
                                 {"objective", alloc.layers[l].objective}};
  }
  json j = {{"config_hash", config.hash()},
            {"b_avg", config.b_avg},
            {"cost_kind", to_string(config.cost_kind)},
            {"alpha", config.alpha},
            {"beta", config.beta},
            {"gamma", config.gamma},
            {"layers", layers}};
  return j.dump(2) + "\n";
}

ModelAllocation read_allocation_json(const RunConfig& config,
                                     const std::string& path) {
  const std::string text = read_text_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad allocation json: ") + e.what());
  }
  if (j.value("config_hash", "") != config.hash())
    throw ConfigError("allocation.json config hash mismatch: rerun allocate");
  return allocation_from_json_text(text);
}

CostTable cost_table_for(const RunConfig& config, const MoEModel& model,
                         const CalibrationCapture& capture,
                         const QuantErrorTable& errors, CostKind kind) {
  switch (kind) {
    case CostKind::kPmq:
      return importance_cost(capture.stats, errors, config.alpha, config.beta,
                             config.gamma);
    case CostKind::kHessian: {
      const CostTable sens = hessian_sensitivity(model, capture, config.quant);
      return baseline_cost(capture.stats, errors, kind, 0, &sens);
    }
    case CostKind::kRandom:
      return baseline_cost(capture.stats, errors, kind,
                           derive_seed(config.seed_sweep, "random-cost"));
    default:
      return baseline_cost(capture.stats, errors, kind);
  }
}

}  // namespace

void cmd_gen(const RunConfig& config, const std::string& outdir) {
  MoEModel model = gen_synthetic_model(config.model, config.gen);
  save_checkpoint(model, join_path(outdir, files::kCheckpoint));
  append_runlog(outdir, "gen", config.hash());
}

void cmd_calibrate(const RunConfig& config, const std::string& outdir) {
  MoEModel model = load_checkpoint(join_path(outdir, files::kCheckpoint));
  if (!(model.config == config.model))
    throw ConfigError("checkpoint config does not match run config");
  const TokenSet calib = config.calibration_set();
  const CalibrationCapture capture = run_calibration(model, calib, config.threads);
  const QuantErrorTable table =
      compute_quant_error_table(model, capture, config.quant, config.threads);
  write_stats_json(config, capture.stats, join_path(outdir, files::kStats));
  write_errors_json(config, table, join_path(outdir, files::kErrors));
  append_runlog(outdir, "calibrate", config.hash());
}

void cmd_allocate(const RunConfig& config, const std::string& outdir) {
  const CalibrationStats stats =
      read_stats_json(config, join_path(outdir, files::kStats));
  const QuantErrorTable errors =
      read_errors_json(config, join_path(outdir, files::kErrors));
  CostTable cost;
  if (config.cost_kind == CostKind::kPmq) {
    cost = importance_cost(stats, errors, config.alpha, config.beta, config.gamma);
  } else if (config.cost_kind == CostKind::kHessian) {
    MoEModel model = load_checkpoint(join_path(outdir, files::kCheckpoint));
    const CalibrationCapture capture =
        run_calibration(model, config.calibration_set(), config.threads);
    const CostTable sens = hessian_sensitivity(model, capture, config.quant);
    cost = baseline_cost(stats, errors, config.cost_kind, 0, &sens);
  } else if (config.cost_kind == CostKind::kRandom) {
    cost = baseline_cost(stats, errors, config.cost_kind,
                         derive_seed(config.seed_sweep, "random-cost"));
  } else {
    cost = baseline_cost(stats, errors, config.cost_kind);
  }
  const ModelAllocation alloc =
      allocate_model(cost, config.b_avg, config.coverage, config.global_budget);
  atomic_write_text(join_path(outdir, files::kAllocation),
                    allocation_to_json_text(config, alloc));
  append_runlog(outdir, "allocate", config.hash());
}

void cmd_quantize(const RunConfig& config, const std::string& outdir) {
  MoEModel model = load_checkpoint(join_path(outdir, files::kCheckpoint));
  if (!(model.config == config.model))
    throw ConfigError("checkpoint config does not match run config");
  const ModelAllocation alloc =
      read_allocation_json(config, join_path(outdir, files::kAllocation));
  const CalibrationCapture capture =
      run_calibration(model, config.calibration_set(), config.threads);
  const QuantizedModel q = quantize_model(model, capture, alloc, config.quant,
                                          config.nonexpert_bits, config.threads);
  const std::string alloc_text =
      read_text_file(join_path(outdir, files::kAllocation));
  save_packed_file(to_packed_file(model, q, alloc_text),
                   join_path(outdir, files::kPacked));
  append_runlog(outdir, "quantize", config.hash());
}

void cmd_train_router(const RunConfig& config, const std::string& outdir) {
  PackedModelFile file = load_packed_file(join_path(outdir, files::kPacked));
  QuantizedModel q = from_packed_file(file);
  MoEModel teacher = q.dense;
  if (config.otp_fp_teacher)
    teacher = load_checkpoint(join_path(outdir, files::kCheckpoint));

  OTPTrainConfig otp = config.otp;
  otp.seed = config.seed_gumbel;
  const TrainRouterResult result =
      train_router(q.dense, teacher, config.calibration_set(), otp);
  if (result.diverged && result.steps_completed == 0)
    throw NumericError("router training diverged at the first step");

  std::string csv = "step,distill_loss,sparsity,mask_ratio\n";
  for (const auto& p : result.curve)
    csv += std::to_string(p.step) + "," + fp17(p.distill) + "," +
           fp17(p.sparsity) + "," + fp17(p.mask_ratio) + "\n";
  atomic_write_text(join_path(outdir, files::kCurve), csv);

  std::erase_if(file.sections,
                [](const PackedSection& s) { return s.kind == kSectionRouters; });
  file.sections.push_back(
      {"routers", kSectionRouters, encode_routers(result.routers)});
  save_packed_file(file, join_path(outdir, files::kPacked));
  append_runlog(outdir, "train-router", config.hash());
}

Report cmd_eval(const RunConfig& config, const std::string& outdir, bool use_otp) {
  const std::string packed_path = join_path(outdir, files::kPacked);
  Report rep;
  if (std::filesystem::exists(packed_path)) {
    const QuantizedModel q = from_packed_file(load_packed_file(packed_path));
    rep = build_report(config, q, use_otp);
  } else {
    MoEModel model = load_checkpoint(join_path(outdir, files::kCheckpoint));
    rep = build_report(config, wrap_fp_model(model), false);
  }
  atomic_write_text(join_path(outdir, files::kReport), rep.to_json_text());
  append_runlog(outdir, "eval", config.hash());
  return rep;
}

void cmd_report(const RunConfig& config, const std::string& outdir) {
  std::string csv =
      "source,cost_kind,b_avg,avg_expert_bits,eval_nll,ppl_proxy,"
      "activated_bytes_per_token,expert_prune_ratio,compression_ratio\n";
  bool any = false;
  const std::string report_path = join_path(outdir, files::kReport);
  if (std::filesystem::exists(report_path)) {
    const Report r = Report::from_json_text(read_text_file(report_path));
    csv += std::string("run,") + to_string(config.cost_kind) + "," +
           fp17(config.b_avg) + "," + fp17(r.avg_expert_bits) + "," +
           fp17(r.eval_nll) + "," + fp17(r.ppl_proxy) + "," +
           fp17(r.activated_bytes_per_token) + "," +
           fp17(r.expert_prune_ratio) + "," + fp17(r.compression_ratio) + "\n";
    any = true;
  }
  const std::string sweep_path = join_path(outdir, files::kSweep);
  if (std::filesystem::exists(sweep_path)) {
    const std::string sweep = read_text_file(sweep_path);
    size_t start = sweep.find('\n');  // skip header
    if (start != std::string::npos) {
      std::string body = sweep.substr(start + 1);
      size_t pos = 0;
      while (pos < body.size()) {
        size_t end = body.find('\n', pos);
        if (end == std::string::npos) end = body.size();
        const std::string line = body.substr(pos, end - pos);
        if (!line.empty()) {
          // sweep rows: kind,b_avg,budget,objective,avg_bits,nll,ppl
          csv += "sweep," + line + "\n";
          any = true;
        }
        pos = end + 1;
      }
    }
  }
  if (!any)
    throw ConfigError("nothing to report: run eval or sweep first");
  atomic_write_text(join_path(outdir, files::kReportCsv), csv);
  append_runlog(outdir, "report", config.hash());
}

void cmd_sweep(const RunConfig& config, const std::string& outdir) {
  MoEModel model = load_checkpoint(join_path(outdir, files::kCheckpoint));
  if (!(model.config == config.model))
    throw ConfigError("checkpoint config does not match run config");
  const TokenSet calib = config.calibration_set();
  const TokenSet eval = config.eval_set();
  const CalibrationCapture capture = run_calibration(model, calib, config.threads);
  const QuantErrorTable errors =
      compute_quant_error_table(model, capture, config.quant, config.threads);

  std::string csv =
      "cost_kind,b_avg,budget,objective,avg_expert_bits,eval_nll,ppl_proxy\n";
  for (CostKind kind : config.sweep_kinds) {
    const CostTable cost = cost_table_for(config, model, capture, errors, kind);
    for (double b_avg : config.sweep_b_avgs) {
      const ModelAllocation alloc =
          allocate_model(cost, b_avg, config.coverage, config.global_budget);
      const QuantizedModel q = quantize_model(
          model, capture, alloc, config.quant, config.nonexpert_bits, config.threads);
      const double nll = eval_nll(q.dense, eval, config.threads);
      const SizeBreakdown sizes = size_breakdown(q);
      int budget_total = 0;
      for (const auto& l : alloc.layers) budget_total += l.budget;
      csv += to_string(kind) + "," + fp17(b_avg) + "," +
             std::to_string(budget_total) + "," + fp17(alloc.total_objective) +
             "," + fp17(sizes.avg_expert_bits()) + "," + fp17(nll) + "," +
             fp17(std::exp(nll)) + "\n";
    }
  }
  atomic_write_text(join_path(outdir, files::kSweep), csv);
  append_runlog(outdir, "sweep", config.hash());
}

}  // namespace mcsh
