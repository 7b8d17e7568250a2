// SPDX-License-Identifier: Apache-2.0
//
// abmlora run|race|ablate|validate|inspect-checkpoint --config <path> [--out <dir>] [--workers N]
//
// Exit status: 0 ok, 1 invalid config or input, 2 a run failed,
// 3 a consistency check failed (bound violation or modified base weights).
#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "abmlora/errors.hpp"
#include "abmlora/harness.hpp"
#include "abmlora/lora.hpp"

namespace {

using namespace abmlora;

int inspect(const std::string& path) {
  const auto adapters = load_checkpoint(path);
  std::printf("%-12s %6s %6s %4s %8s %8s %10s %12s %12s\n", "layer", "d", "k", "r", "alpha", "eta",
              "trainable", "|A|_F", "|B|_F");
  std::size_t total = 0;
  for (const auto& [layer, ad] : adapters) {
    std::printf("%-12s %6zu %6zu %4zu %8g %8g %10zu %12.6g %12.6g\n", layer.c_str(), ad.d(), ad.k(),
                ad.rank(), ad.alpha(), ad.eta(), ad.trainable_count(), frobenius_norm(ad.a()),
                frobenius_norm(ad.b()));
    total += ad.trainable_count();
  }
  std::printf("%zu adapters, %zu trainable parameters\n", adapters.size(), total);
  return 0;
}

void describe(const ExperimentConfig& cfg) {
  std::printf("config ok: %zu schemes, %zu seeds, output %s\n", cfg.schemes.size(), cfg.seeds.size(),
              cfg.output.string().c_str());
  for (const auto& s : cfg.schemes) {
    std::printf("  scheme %s%s\n", s.label.c_str(), s.abm ? " (stage 1)" : "");
  }
  if (!cfg.grid.empty()) {
    std::printf("  grid: %zu cells\n", cfg.grid.expand(cfg.abm ? cfg.abm->cfg : AbmConfig{}).size());
  }
}

void summarize(const ExperimentReport& rep) {
  std::printf("pretrain accuracy %.4f", rep.pretrain_accuracy);
  if (rep.reference_accuracy) std::printf(", reference adapter accuracy %.4f", *rep.reference_accuracy);
  std::printf("\n");
  for (const auto& r : rep.runs) {
    if (!r.ok) {
      std::printf("cell %zu %-12s seed %-4llu FAILED: %s\n", r.cell, r.scheme.c_str(),
                  static_cast<unsigned long long>(r.seed), r.error.c_str());
      continue;
    }
    std::printf("cell %zu %-12s seed %-4llu loss@10 %.5f acc %.4f info20 %.5g violations %zu\n", r.cell,
                r.scheme.c_str(), static_cast<unsigned long long>(r.seed), r.step10_loss, r.final_acc,
                r.early_info_total, r.bound_violations);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoRA adapters with activation boundary matching"};
  app.require_subcommand(1);
  std::string config;
  std::string out;
  std::size_t workers = 1;
  std::string checkpoint;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON experiment config")->required();
    sub->add_option("--out", out, "output directory (overrides the config)");
    sub->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);
  };
  CLI::App* run = app.add_subcommand("run", "run every scheme and seed");
  CLI::App* race = app.add_subcommand("race", "compare two or more schemes on shared seeds");
  CLI::App* ablate = app.add_subcommand("ablate", "Stage-1 grid over the config's grid axes");
  CLI::App* validate = app.add_subcommand("validate", "parse and check a config");
  CLI::App* inspect_cmd = app.add_subcommand("inspect-checkpoint", "describe an adapter checkpoint");
  for (auto* sub : {run, race, ablate}) add_common(sub);
  validate->add_option("--config", config, "JSON experiment config")->required();
  inspect_cmd->add_option("--config,path", checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (inspect_cmd->parsed()) {
    try {
      return inspect(checkpoint);
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(config);
    if (!out.empty()) cfg.output = out;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  if (validate->parsed()) {
    describe(cfg);
    return 0;
  }

  const Mode mode = run->parsed() ? Mode::run : race->parsed() ? Mode::race : Mode::ablate;
  try {
    const ExperimentReport rep = run_experiment(cfg, mode, workers);
    summarize(rep);
    const int code = rep.exit_code();
    if (code == 3) std::cerr << "consistency check failed; see metrics.json\n";
    if (code == 2) std::cerr << "one or more runs failed; see metrics.json\n";
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
