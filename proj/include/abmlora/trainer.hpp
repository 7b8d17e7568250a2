// SPDX-License-Identifier: Apache-2.0
//
// Supervised training: full-parameter pretraining of a base model and
// adapter-only fine-tuning with optional information-loss probes.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "abmlora/dataset.hpp"
#include "abmlora/infoloss.hpp"
#include "abmlora/lora.hpp"
#include "abmlora/model.hpp"
#include "abmlora/optim.hpp"

namespace abmlora {

enum class Schedule { constant, cosine };

Schedule parse_schedule(std::string_view name);
std::string_view schedule_name(Schedule s) noexcept;

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  Schedule schedule = Schedule::cosine;
  double warmup_ratio = 0.03;
  std::optional<double> max_grad_norm;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  /// Stop after this many steps even if epochs remain.
  std::optional<std::size_t> max_steps;
  /// Evaluate every N steps (0: only after the last step).
  std::size_t eval_every = 0;

  void validate() const;
};

/// epochs * ceil(n / batch_size), capped by max_steps.
std::size_t total_steps(const TrainConfig& cfg, std::size_t dataset_size);

/// Learning rate for the update made at `step` (0-based) of `total` steps:
/// linear warmup from 0 over ceil(warmup_ratio * total) steps, then constant
/// or cosine decay reaching 0 at step == total.
double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t total);

/// Which steps get an information-loss probe.
struct ProbeSchedule {
  bool enabled = true;
  std::size_t dense_steps = 20;  // probe every step below this
  std::size_t every = 10;        // then every Nth step

  bool due(std::size_t step) const noexcept;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> eval_acc;
  /// Summed over adapted layers.
  std::optional<InfoLossReport> info;
  /// Layers whose reducible term exceeded its bound at this step.
  std::size_t bound_violations = 0;
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::vector<NamedAdapter> adapters;
  double final_eval_acc = 0.0;
  std::size_t bound_violations = 0;
};

/// Called after each step's update with that step's record.
using StepHook = std::function<void(const StepRecord&, const Model&)>;

/// Trains only the attached adapters on `train` with the base weights frozen.
/// At probed steps, g comes from a pass with every adapter detached and
/// grad_delta from the training pass, both on the step's minibatch, and the
/// tangent projection uses the factors before that step's update.
/// Throws DataError for an empty dataset, ConfigError when no adapter is
/// attached, NumericalError when the loss stops being finite.
TrainResult fine_tune(Model& model, const Dataset& train, const Dataset* eval,
                      const TrainConfig& cfg, const ProbeSchedule& probe,
                      const StepHook& hook = {});

/// Full-parameter training of every base weight (adapters must be detached).
/// Returns the mean loss of the final epoch.
double pretrain(Model& model, const Dataset& train, const TrainConfig& cfg);

/// Argmax accuracy of the adapted model. Ties go to the lowest class index.
double evaluate(const Model& model, const Dataset& data);

}  // namespace abmlora
