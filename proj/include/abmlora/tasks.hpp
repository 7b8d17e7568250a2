// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tasks, CSV datasets and pretrain -> fine-tune scenarios.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "abmlora/dataset.hpp"
#include "abmlora/model.hpp"
#include "abmlora/trainer.hpp"

namespace abmlora {

/// Gaussian clusters: class means ~ N(0, I), samples = mean + spread * N(0, I).
/// Rows are grouped by class. Throws ConfigError on zero counts or spread <= 0.
Dataset gen_blobs(std::size_t num_classes, std::size_t dims, std::size_t per_class, double spread,
                  std::uint64_t seed);

/// A random network labels N(0, I) inputs by argmax. Draws are repeated with
/// derived seeds until every class occurs (when n >= num_classes); DataError
/// if that never happens.
std::pair<Dataset, Model> gen_teacher_task(const ModelSpec& teacher, std::size_t n,
                                           std::uint64_t seed);

/// Inputs ~ N(0, I) labeled by argmax of `labeler`.
Dataset label_with(const Model& labeler, std::size_t n, std::uint64_t seed, std::string name);

struct CsvSchema {
  std::optional<std::size_t> features;     // required feature count, if known
  std::optional<std::size_t> num_classes;  // labels must be below this, if known
};

/// Header row, then one row per sample: feature columns followed by an integer
/// "label" column. Throws DataError naming the line for malformed rows and for
/// an empty file. num_classes is the schema's, else max label + 1.
Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
/// Writes doubles in shortest round-trip form, so load_csv(write_csv(d)) == d.
void write_csv(const std::filesystem::path& path, const Dataset& data);

/// Where a task's samples come from:
///  - teacher: a fresh random network of the model's shape labels the inputs
///  - shifted_base: the pretrained base with every weight perturbed by
///    `shift` times its layer's RMS (fine-tuning tasks only)
///  - blobs: gen_blobs with `spread`
///  - csv: rows from `path`; the last fifth is held out for evaluation
struct TaskSource {
  enum class Kind { teacher, shifted_base, blobs, csv };
  Kind kind = Kind::teacher;
  std::size_t samples = 1024;
  double shift = 0.5;   // shifted_base: relative weight perturbation
  double spread = 0.5;  // blobs
  std::filesystem::path path;  // csv
};

TaskSource::Kind parse_task_kind(std::string_view name);
std::string_view task_kind_name(TaskSource::Kind kind) noexcept;

/// An adapter trained on the base before the race, whose activation
/// boundaries Stage 1 can match instead of the bare base's:
///  - none: no reference adapter
///  - same_task: vanilla adapter trained on a disjoint sample of the fine-tuning task
///  - cross_task: vanilla adapter trained on a second task drawn like the
///    fine-tuning task under another seed
struct ReferenceSpec {
  enum class Kind { none, same_task, cross_task };
  Kind kind = Kind::none;
  std::size_t samples = 1024;
  std::size_t rank = 4;
  double alpha = 8.0;
  TrainConfig train;
};

ReferenceSpec::Kind parse_reference_kind(std::string_view name);
std::string_view reference_kind_name(ReferenceSpec::Kind kind) noexcept;

/// A frozen base model pretrained on one task and a fine-tuning task that
/// shares its input dimensionality.
struct ScenarioSpec {
  ModelSpec model;
  TaskSource pretrain_task;
  TaskSource finetune_task;  // defaults to shifted_base
  std::size_t eval_samples = 512;
  TrainConfig pretrain;
  ReferenceSpec reference;
  std::vector<std::string> placement;  // empty: the model's default placement
  std::string notes;
  std::uint64_t seed = 0;

  ScenarioSpec();
  void validate() const;
};

struct Scenario {
  Model base;  // pretrained, no adapters
  Dataset pretrain_data;
  Dataset finetune_train;
  Dataset finetune_eval;
  std::vector<std::string> placement;
  double pretrain_accuracy = 0.0;
  std::optional<std::vector<NamedAdapter>> reference_adapters;
  double reference_accuracy = 0.0;  // on finetune_eval
};

/// Pure function of the spec (including its seed). Throws DataError when the
/// two tasks disagree on input dimensionality or class count.
Scenario build_scenario(const ScenarioSpec& spec);

}  // namespace abmlora
