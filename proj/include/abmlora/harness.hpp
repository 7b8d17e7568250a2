// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiments: single runs, initialization races and Stage-1
// ablation grids over a shared scenario.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "abmlora/abm.hpp"
#include "abmlora/lora.hpp"
#include "abmlora/tasks.hpp"
#include "abmlora/trainer.hpp"

namespace abmlora {

/// One adapter initialization under test.
struct SchemeSpec {
  std::string label;  // as written in the config; names the output directory
  bool abm = false;   // Stage 1 runs after `init`
  InitScheme init;
  std::optional<double> learning_rate;  // overrides train.learning_rate

  /// "vanilla" (= "kaiming_a_zero_b"), "orthogonal", "gaussian", "abm" or
  /// "checkpoint:<path>".
  static SchemeSpec parse(std::string_view text);
};

struct AbmSection {
  AbmConfig cfg;
  /// Factors Stage 1 starts from.
  InitScheme start;
  /// Boundaries to match: "scenario" uses the scenario's reference adapter
  /// when it has one and the bare base otherwise; "base" always the bare base;
  /// "checkpoint:<path>" adapters from a file.
  std::string reference = "scenario";
};

/// Axes of an ablation grid. An empty axis keeps the abm block's value.
struct AblationGrid {
  std::vector<double> margin;
  std::vector<LayerSelection> layer_selection;
  std::vector<Weighting> weighting;
  std::vector<std::size_t> steps;
  std::vector<AbmScope> scope;

  bool empty() const noexcept;
  /// Cartesian product in axis order margin, layer_selection, weighting,
  /// steps, scope (last axis fastest).
  std::vector<AbmConfig> expand(const AbmConfig& base) const;
};

struct ExperimentConfig {
  ScenarioSpec scenario;
  std::size_t rank = 4;
  double alpha = 8.0;
  std::vector<SchemeSpec> schemes;
  std::optional<AbmSection> abm;
  TrainConfig train;
  ProbeSchedule probe;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output = "results";
  std::size_t checkpoint_every = 0;  // 0: only the final adapters
  AblationGrid grid;

  /// Throws ConfigError whose message starts with the offending field path.
  void validate() const;
};

/// Parses the JSON config format documented in the README. Unknown keys are
/// errors. Relative checkpoint and csv paths resolve against `base_dir`.
ExperimentConfig parse_config(std::string_view json_text,
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

enum class Mode { run, race, ablate };
std::string_view mode_name(Mode m) noexcept;

/// Result of one (grid cell, scheme, seed) job.
struct RunOutcome {
  std::size_t cell = 0;
  std::string scheme;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double step10_loss = 0.0;       // train loss at step 10 (last step if shorter)
  double final_acc = 0.0;         // eval accuracy after training
  double early_info_total = 0.0;  // sum of `total` over probed steps < 20
  std::size_t bound_violations = 0;
  std::size_t trainable_parameters = 0;
  std::size_t full_parameters = 0;
  bool base_unchanged = true;
  std::optional<double> stage1_initial_mismatch;
  std::optional<double> stage1_final_mismatch;
  TrainResult train;
  std::optional<Stage1Result> stage1;
};

/// One job, fully in memory. `run_dir` empty: no files written.
RunOutcome run_one(const Scenario& scenario, const ExperimentConfig& cfg, const SchemeSpec& scheme,
                   const std::optional<AbmConfig>& abm_override, std::uint64_t seed,
                   const std::filesystem::path& run_dir = {});

struct ExperimentReport {
  Mode mode = Mode::run;
  std::vector<AbmConfig> cells;  // one per grid cell (a single cell outside ablate)
  std::vector<RunOutcome> runs;  // ordered by cell, scheme, seed
  double pretrain_accuracy = 0.0;
  std::optional<double> reference_accuracy;
  /// 0 success, 2 a run failed, 3 a consistency check failed.
  int exit_code() const noexcept;
};

/// Builds the scenario once, runs every job on `workers` threads and writes
/// all artifacts under cfg.output. Output bytes do not depend on `workers`.
ExperimentReport run_experiment(const ExperimentConfig& cfg, Mode mode, std::size_t workers);

/// Header plus rows of string cells; used to read emitted CSVs back.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
/// Throws DataError for a missing file or a row whose width differs from the header.
CsvTable read_table(const std::filesystem::path& path);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace abmlora
