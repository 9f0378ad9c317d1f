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

#ifndef MCSH_PIPELINE_HPP
#define MCSH_PIPELINE_HPP

#include <map>
#include <optional>
#include <string>

#include "mcsh/allocator.hpp"
#include "mcsh/otp.hpp"
#include "mcsh/serialize.hpp"

namespace mcsh {

// One run's full configuration. All randomness flows through the named seeds;
// the canonical JSON hash stamps every stage output so stages can verify they
// were produced by the same configuration.
struct RunConfig {
  MoEConfig model;

  uint64_t seed_model = 1;
  uint64_t seed_calib = 2;
  uint64_t seed_eval = 3;
  uint64_t seed_gumbel = 4;
  uint64_t seed_sweep = 5;

  int calib_sequences = 128;
  int calib_seq_len = 16;
  int eval_sequences = 32;
  int eval_seq_len = 16;

  GenOptions gen;

  double b_avg = 2.0;
  CostKind cost_kind = CostKind::kPmq;
  double alpha = 1.0, beta = 1.0, gamma = 1.0;
  QuantOptions quant;
  int nonexpert_bits = 4;
  bool coverage = true;
  bool global_budget = false;

  OTPTrainConfig otp;
  bool otp_fp_teacher = false;

  std::vector<double> sweep_b_avgs{1.5, 1.75, 2.0, 2.25, 2.5};
  std::vector<CostKind> sweep_kinds{CostKind::kPmq, CostKind::kFrequency,
                                    CostKind::kWeight, CostKind::kFnorm,
                                    CostKind::kHessian, CostKind::kRandom};

  int threads = 0;  // 0: hardware concurrency

  void validate() const;
  std::string canonical_json() const;
  std::string hash() const;  // hex fnv-1a of canonical_json()

  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_json_file(const std::string& path);

  // Rederives the five named seeds from one master seed.
  void apply_master_seed(uint64_t seed);

  TokenSet calibration_set() const;
  TokenSet eval_set() const;
};

struct MatrixSizes {
  int64_t payload = 0;  // bytes
  int64_t scales = 0;
  int64_t zeros = 0;
  int64_t elements = 0;
  int bits = 0;
  int64_t stored() const { return payload + scales + zeros; }
};

MatrixSizes sizes_of(const QuantMatrix& q);

// A dequantized model plus the packed matrices behind it. The embedding stays
// float64 (it is not an expert and the spec's 4-bit rule covers only the
// dense stand-in, gating, shared expert and head).
struct QuantizedModel {
  MoEModel dense;
  ModelAllocation allocation;
  std::map<std::string, QuantMatrix> matrices;  // keyed by parameter name
  std::optional<std::vector<RouterParams>> routers;

  int64_t router_bytes() const;
  // Per-name stored sizes including a synthesized float64 embedding entry.
  std::map<std::string, MatrixSizes> size_map() const;
};

// Wraps an uncompressed model so the same reporting path applies (64-bit
// entries, no packed payloads).
QuantizedModel wrap_fp_model(const MoEModel& model);

QuantizedModel quantize_model(const MoEModel& fp,
                              const CalibrationCapture& capture,
                              const ModelAllocation& allocation,
                              const QuantOptions& opts, int nonexpert_bits,
                              int max_threads = 0);

PackedModelFile to_packed_file(const MoEModel& fp, const QuantizedModel& q,
                               const std::string& allocation_json);
QuantizedModel from_packed_file(const PackedModelFile& file);

// Accounting per the size ledger. Average bits include the quantizer
// parameter overhead (scales and zero points).
struct Report {
  std::string config_hash;
  double eval_nll = 0.0;
  double ppl_proxy = 0.0;
  double avg_expert_bits = 0.0;
  double avg_expert_bits_payload = 0.0;
  double avg_model_bits = 0.0;
  int64_t total_param_bytes = 0;
  int64_t fp64_baseline_bytes = 0;
  double compression_ratio = 0.0;
  double activated_bytes_per_token = 0.0;
  double activated_macs_per_token = 0.0;
  double expert_prune_ratio = 0.0;
  double mean_kept_experts = 0.0;  // per (token, layer)
  bool otp_applied = false;

  std::string to_json_text() const;
  static Report from_json_text(const std::string& text);
};

// Size-ledger roll-up used both by the report path and by the independent
// recomputation from a saved file.
struct SizeBreakdown {
  int64_t expert_payload = 0, expert_scales = 0, expert_zeros = 0;
  int64_t expert_elements = 0;
  int64_t other_stored = 0;     // packed non-expert matrices
  int64_t embedding_bytes = 0;  // raw float64 section
  int64_t router_bytes = 0;
  int64_t total_elements = 0;
  int64_t total_stored() const {
    return expert_payload + expert_scales + expert_zeros + other_stored +
           embedding_bytes + router_bytes;
  }
  double avg_expert_bits() const;
  double avg_expert_bits_payload() const;
  double avg_model_bits() const;
};

SizeBreakdown size_breakdown(const QuantizedModel& q);

Report build_report(const RunConfig& config, const QuantizedModel& q,
                    bool use_otp);

// ---- pipeline stages ----
// Each stage reads its inputs from `outdir`, writes its outputs atomically,
// and stamps them with the config hash. Timestamps only ever go to the
// runlog sidecar, so reruns are byte-identical.

namespace files {
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kStats = "stats.json";
inline constexpr const char* kErrors = "errors.json";
inline constexpr const char* kAllocation = "allocation.json";
inline constexpr const char* kPacked = "model.mcsh";
inline constexpr const char* kCurve = "curve.csv";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kReportCsv = "report.csv";
inline constexpr const char* kSweep = "sweep.csv";
inline constexpr const char* kRunLog = "runlog.json";
}  // namespace files

void cmd_gen(const RunConfig& config, const std::string& outdir);
void cmd_calibrate(const RunConfig& config, const std::string& outdir);
void cmd_allocate(const RunConfig& config, const std::string& outdir);
void cmd_quantize(const RunConfig& config, const std::string& outdir);
void cmd_train_router(const RunConfig& config, const std::string& outdir);
Report cmd_eval(const RunConfig& config, const std::string& outdir, bool use_otp);
void cmd_report(const RunConfig& config, const std::string& outdir);
void cmd_sweep(const RunConfig& config, const std::string& outdir);

}  // namespace mcsh

#endif  // MCSH_PIPELINE_HPP
