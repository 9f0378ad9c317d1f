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

// mcsh: mixed-precision quantization and learnable expert pruning for toy
// MoE models. Stages:
//   gen -> calibrate -> allocate -> quantize -> train-router -> eval -> report
// plus `sweep` for the cost-function / bit-width comparison grid.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "mcsh/pipeline.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  std::string outdir = "out";
  uint64_t seed = 0;
  bool seed_set = false;
  double b_avg = 0.0;
  bool b_avg_set = false;
  std::string cost_kind;
  double lambda = -1.0;
  std::string otp_mode = "on";
  int threads = 0;
};

mcsh::RunConfig make_config(const CliArgs& args) {
  mcsh::RunConfig config;
  if (!args.config_path.empty())
    config = mcsh::RunConfig::from_json_file(args.config_path);
  if (args.seed_set) config.apply_master_seed(args.seed);
  if (args.b_avg_set) config.b_avg = args.b_avg;
  if (!args.cost_kind.empty())
    config.cost_kind = mcsh::cost_kind_from_string(args.cost_kind);
  if (args.lambda >= 0.0) config.otp.lambda = args.lambda;
  config.threads = args.threads;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture compressor for toy MoE models"};
  app.require_subcommand(1);

  CliArgs args;
  app.add_option("--config", args.config_path, "run configuration JSON");
  app.add_option("--out", args.outdir, "output directory");
  app.add_option("--seed", args.seed, "master seed (derives all named seeds)")
      ->each([&](const std::string&) { args.seed_set = true; });
  app.add_option("--b-avg", args.b_avg, "target average expert bit-width")
      ->each([&](const std::string&) { args.b_avg_set = true; });
  app.add_option("--cost-kind", args.cost_kind,
                 "pmq|frequency|weight|fnorm|hessian|random");
  app.add_option("--lambda", args.lambda, "OTP sparsity weight");
  app.add_option("--otp", args.otp_mode, "on|off: apply router masks in eval")
      ->check(CLI::IsMember({"on", "off"}));
  app.add_option("--threads", args.threads, "worker threads (0 = all cores)");

  auto* gen = app.add_subcommand("gen", "generate + teacher-train a toy model");
  auto* calibrate =
      app.add_subcommand("calibrate", "collect stats and the quant-error table");
  auto* allocate = app.add_subcommand("allocate", "solve the bit allocation");
  auto* quantize = app.add_subcommand("quantize", "pack the model at the allocation");
  auto* train_router = app.add_subcommand("train-router", "train the OTP mask router");
  auto* eval = app.add_subcommand("eval", "evaluate and write the report");
  auto* report = app.add_subcommand("report", "emit plot-ready CSV from results");
  auto* sweep = app.add_subcommand("sweep", "cost-kind x b_avg comparison grid");

  CLI11_PARSE(app, argc, argv);

  try {
    const mcsh::RunConfig config = make_config(args);
    if (gen->parsed()) mcsh::cmd_gen(config, args.outdir);
    if (calibrate->parsed()) mcsh::cmd_calibrate(config, args.outdir);
    if (allocate->parsed()) mcsh::cmd_allocate(config, args.outdir);
    if (quantize->parsed()) mcsh::cmd_quantize(config, args.outdir);
    if (train_router->parsed()) mcsh::cmd_train_router(config, args.outdir);
    if (eval->parsed()) {
      const mcsh::Report rep =
          mcsh::cmd_eval(config, args.outdir, args.otp_mode == "on");
      std::printf("eval_nll=%.6f ppl_proxy=%.6f avg_expert_bits=%.4f "
                  "prune_ratio=%.4f\n",
                  rep.eval_nll, rep.ppl_proxy, rep.avg_expert_bits,
                  rep.expert_prune_ratio);
    }
    if (report->parsed()) mcsh::cmd_report(config, args.outdir);
    if (sweep->parsed()) mcsh::cmd_sweep(config, args.outdir);
  } catch (const mcsh::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const mcsh::InfeasibleError& e) {
    std::fprintf(stderr, "infeasible allocation: %s\n", e.what());
    return 3;
  } catch (const mcsh::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
