// SPDX-License-Identifier: Apache-2.0
#include "abmlora/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "abmlora/errors.hpp"
#include "abmlora/random.hpp"

namespace abmlora {

void Dataset::validate() const {
  if (inputs.rows() != labels.size()) {
    throw DataError("dataset '" + name + "': " + std::to_string(inputs.rows()) + " rows but " +
                    std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw DataError("dataset '" + name + "': label " + std::to_string(labels[i]) + " at row " +
                      std::to_string(i) + " is not below " + std::to_string(num_classes));
    }
  }
  if (!all_finite(inputs)) throw DataError("dataset '" + name + "' has non-finite inputs");
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.inputs = Tensor2(rows.size(), inputs.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(inputs.row(rows[i]).begin(), inputs.cols(), out.inputs.row(i).begin());
    out.labels.push_back(labels[rows[i]]);
  }
  out.num_classes = num_classes;
  out.name = name;
  out.seed = seed;
  return out;
}

Dataset gen_blobs(std::size_t num_classes, std::size_t dims, std::size_t per_class, double spread,
                  std::uint64_t seed) {
  if (num_classes == 0 || dims == 0 || per_class == 0) {
    throw ConfigError("gen_blobs: counts must be at least 1");
  }
  if (!(spread > 0.0)) throw ConfigError("gen_blobs: spread must be positive");
  Rng rng(seed);
  const Tensor2 means = random_normal(num_classes, dims, 1.0, rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset d;
  d.inputs = Tensor2(num_classes * per_class, dims);
  d.num_classes = num_classes;
  d.name = "blobs";
  d.seed = seed;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      auto row = d.inputs.row(c * per_class + i);
      for (std::size_t j = 0; j < dims; ++j) row[j] = means(c, j) + spread * noise(rng);
      d.labels.push_back(c);
    }
  }
  return d;
}

Dataset label_with(const Model& labeler, std::size_t n, std::uint64_t seed, std::string name) {
  Rng rng(seed);
  Dataset d;
  d.inputs = random_normal(n, labeler.spec().input_dim, 1.0, rng);
  d.num_classes = labeler.spec().num_classes;
  d.name = std::move(name);
  d.seed = seed;
  if (n == 0) return d;
  const Tensor2 logits = labeler.logits(d.inputs);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    d.labels.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return d;
}

namespace {

bool covers_all_classes(const Dataset& d) {
  std::vector<bool> seen(d.num_classes, false);
  for (std::size_t l : d.labels) seen[l] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

constexpr int kMaxRedraws = 100;

}  // namespace

std::pair<Dataset, Model> gen_teacher_task(const ModelSpec& teacher, std::size_t n,
                                           std::uint64_t seed) {
  if (n == 0) throw ConfigError("gen_teacher_task: n must be at least 1");
  const bool need_all = n >= teacher.num_classes;
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, "redraw/" + std::to_string(attempt));
    Model t = Model::random(teacher, derive_seed(s, "teacher/weights"));
    Dataset d = label_with(t, n, derive_seed(s, "teacher/inputs"), "teacher");
    d.seed = seed;
    if (!need_all || covers_all_classes(d)) return {std::move(d), std::move(t)};
  }
  throw DataError("gen_teacher_task: no draw produced every class in " + std::to_string(n) +
                  " samples");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_csv_line(trim(line));
      break;
    }
  }
  if (header.empty()) throw DataError("'" + path.string() + "' is empty");
  if (header.size() < 2 || trim(header.back()) != "label") {
    throw DataError(path.string() + ":" + std::to_string(line_no) +
                    ": header must list feature columns followed by 'label'");
  }
  const std::size_t features = header.size() - 1;
  if (schema.features && *schema.features != features) {
    throw DataError(path.string() + ": " + std::to_string(features) + " feature columns, expected " +
                    std::to_string(*schema.features));
  }
  std::vector<double> values;
  Dataset d;
  d.name = path.filename().string();
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto cells = split_csv_line(t);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != header.size()) {
      throw DataError(where + ": expected " + std::to_string(header.size()) + " columns, found " +
                      std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < features; ++j) {
      const std::string c = trim(cells[j]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size() || !std::isfinite(v)) {
        throw DataError(where + ": column " + std::to_string(j + 1) + " is not a finite number");
      }
      values.push_back(v);
    }
    const std::string lc = trim(cells.back());
    std::size_t label = 0;
    const auto [ptr, ec] = std::from_chars(lc.data(), lc.data() + lc.size(), label);
    if (ec != std::errc() || ptr != lc.data() + lc.size()) {
      throw DataError(where + ": label '" + lc + "' is not a class index");
    }
    if (schema.num_classes && label >= *schema.num_classes) {
      throw DataError(where + ": label " + std::to_string(label) + " is not below " +
                      std::to_string(*schema.num_classes));
    }
    d.labels.push_back(label);
  }
  if (d.labels.empty()) throw DataError("'" + path.string() + "' has no data rows");
  d.inputs = Tensor2(d.labels.size(), features, std::move(values));
  d.num_classes = schema.num_classes
                      ? *schema.num_classes
                      : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

void write_csv(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (std::size_t j = 0; j < data.features(); ++j) out << 'x' << j << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.inputs.row(i)) {
      const auto res = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << data.labels[i] << '\n';
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

TaskSource::Kind parse_task_kind(std::string_view name) {
  if (name == "teacher") return TaskSource::Kind::teacher;
  if (name == "shifted_base") return TaskSource::Kind::shifted_base;
  if (name == "blobs") return TaskSource::Kind::blobs;
  if (name == "csv") return TaskSource::Kind::csv;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

std::string_view task_kind_name(TaskSource::Kind kind) noexcept {
  switch (kind) {
    case TaskSource::Kind::teacher:
      return "teacher";
    case TaskSource::Kind::shifted_base:
      return "shifted_base";
    case TaskSource::Kind::blobs:
      return "blobs";
    case TaskSource::Kind::csv:
      return "csv";
  }
  return "?";
}

ReferenceSpec::Kind parse_reference_kind(std::string_view name) {
  if (name == "none") return ReferenceSpec::Kind::none;
  if (name == "same_task") return ReferenceSpec::Kind::same_task;
  if (name == "cross_task") return ReferenceSpec::Kind::cross_task;
  throw ConfigError("unknown reference kind '" + std::string(name) + "'");
}

std::string_view reference_kind_name(ReferenceSpec::Kind kind) noexcept {
  switch (kind) {
    case ReferenceSpec::Kind::none:
      return "none";
    case ReferenceSpec::Kind::same_task:
      return "same_task";
    case ReferenceSpec::Kind::cross_task:
      return "cross_task";
  }
  return "?";
}

ScenarioSpec::ScenarioSpec() {
  pretrain_task.samples = 2048;
  finetune_task.kind = TaskSource::Kind::shifted_base;
  pretrain.learning_rate = 1e-2;
  pretrain.epochs = 30;
  pretrain.batch_size = 64;
  pretrain.schedule = Schedule::cosine;
  pretrain.warmup_ratio = 0.0;
  pretrain.optimizer = OptimizerKind::adamw;
  reference.train.learning_rate = 3e-3;
  reference.train.epochs = 5;
  reference.train.batch_size = 32;
  reference.train.warmup_ratio = 0.0;
}

void ScenarioSpec::validate() const {
  model.validate();
  pretrain.validate();
  if (pretrain_task.kind == TaskSource::Kind::shifted_base) {
    throw ConfigError("scenario.pretrain_task: shifted_base needs a pretrained base");
  }
  for (const TaskSource* t : {&pretrain_task, &finetune_task}) {
    if (t->kind != TaskSource::Kind::csv && t->samples == 0) {
      throw ConfigError("scenario: task samples must be at least 1");
    }
    if (t->kind == TaskSource::Kind::csv && t->path.empty()) {
      throw ConfigError("scenario: csv task needs a path");
    }
    if (t->kind == TaskSource::Kind::blobs && !(t->spread > 0.0)) {
      throw ConfigError("scenario: blobs spread must be positive");
    }
    if (t->kind == TaskSource::Kind::shifted_base && !(t->shift >= 0.0)) {
      throw ConfigError("scenario: shift must be non-negative");
    }
  }
  if (eval_samples == 0) throw ConfigError("scenario.eval_samples must be at least 1");
  if (reference.kind != ReferenceSpec::Kind::none) {
    reference.train.validate();
    if (reference.samples == 0) throw ConfigError("scenario.reference.samples must be at least 1");
    if (reference.rank == 0) throw ConfigError("scenario.reference.rank must be at least 1");
    if (!(reference.alpha > 0.0)) throw ConfigError("scenario.reference.alpha must be positive");
  }
}

namespace {

// Shuffles deterministically and cuts consecutive parts of the given sizes.
std::vector<Dataset> split(const Dataset& d, std::span<const std::size_t> sizes, std::uint64_t seed) {
  const std::size_t need = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (need > d.size() || std::find(sizes.begin(), sizes.end(), 0u) != sizes.end()) {
    throw DataError("dataset '" + d.name + "' is too small to split");
  }
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Dataset> parts;
  std::size_t at = 0;
  for (std::size_t n : sizes) {
    parts.push_back(d.subset(std::span(idx).subspan(at, n)));
    at += n;
  }
  return parts;
}

Model shifted(const Model& base, double shift, std::uint64_t seed) {
  Model m = base;
  Rng rng(seed);
  for (auto& l : m.layers()) {
    const double rms = frobenius_norm(l.w0) / std::sqrt(static_cast<double>(l.w0.size()));
    axpy_inplace(l.w0, shift * rms, random_normal(l.w0.rows(), l.w0.cols(), 1.0, rng));
  }
  return m;
}

Dataset make_task(const TaskSource& src, const ModelSpec& spec, const Model* base,
                  std::size_t count, std::uint64_t seed) {
  switch (src.kind) {
    case TaskSource::Kind::teacher:
      return gen_teacher_task(spec, count, seed).first;
    case TaskSource::Kind::shifted_base:
      return label_with(shifted(*base, src.shift, derive_seed(seed, "shift")), count,
                        derive_seed(seed, "inputs"), "shifted_base");
    case TaskSource::Kind::blobs: {
      const std::size_t per_class = (count + spec.num_classes - 1) / spec.num_classes;
      return gen_blobs(spec.num_classes, spec.input_dim, per_class, src.spread, seed);
    }
    case TaskSource::Kind::csv:
      return load_csv(src.path, {spec.input_dim, spec.num_classes});
  }
  throw ConfigError("unknown task kind");
}

}  // namespace

Scenario build_scenario(const ScenarioSpec& spec) {
  spec.validate();
  Scenario sc;
  sc.pretrain_data = make_task(spec.pretrain_task, spec.model, nullptr, spec.pretrain_task.samples,
                               derive_seed(spec.seed, "scenario/pretrain"));
  sc.base = Model::random(spec.model, derive_seed(spec.seed, "scenario/base"));
  TrainConfig pcfg = spec.pretrain;
  pcfg.seed = derive_seed(spec.seed, "scenario/pretrain_run");
  pretrain(sc.base, sc.pretrain_data, pcfg);
  sc.pretrain_accuracy = evaluate(sc.base, sc.pretrain_data);

  const auto& ft = spec.finetune_task;
  const auto& ref = spec.reference;
  const bool same_task = ref.kind == ReferenceSpec::Kind::same_task;
  const std::uint64_t ft_seed = derive_seed(spec.seed, "scenario/finetune");
  Dataset reference_data;
  if (ft.kind == TaskSource::Kind::csv) {
    const Dataset all = make_task(ft, spec.model, &sc.base, 0, ft_seed);
    const std::size_t held = std::max<std::size_t>(1, all.size() / 5);
    std::vector<std::size_t> sizes{all.size() - held - (same_task ? held : 0), held};
    if (same_task) sizes.push_back(held);
    auto parts = split(all, sizes, ft_seed);
    sc.finetune_train = std::move(parts[0]);
    sc.finetune_eval = std::move(parts[1]);
    if (same_task) reference_data = std::move(parts[2]);
  } else {
    std::vector<std::size_t> sizes{ft.samples, spec.eval_samples};
    if (same_task) sizes.push_back(ref.samples);
    const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    auto parts = split(make_task(ft, spec.model, &sc.base, n, ft_seed), sizes, ft_seed);
    sc.finetune_train = std::move(parts[0]);
    sc.finetune_eval = std::move(parts[1]);
    if (same_task) reference_data = std::move(parts[2]);
  }
  if (sc.finetune_train.features() != sc.pretrain_data.features()) {
    throw DataError("scenario: pretrain task has " + std::to_string(sc.pretrain_data.features()) +
                    " features but the fine-tuning task has " +
                    std::to_string(sc.finetune_train.features()));
  }
  if (sc.finetune_train.num_classes != sc.pretrain_data.num_classes) {
    throw DataError("scenario: the two tasks disagree on the class count");
  }
  sc.placement = spec.placement.empty() ? sc.base.default_placement() : spec.placement;
  for (const auto& name : sc.placement) sc.base.layer(name);

  if (ref.kind == ReferenceSpec::Kind::cross_task) {
    if (ft.kind == TaskSource::Kind::csv) {
      throw ConfigError("scenario.reference: cross_task needs a generated fine-tuning task");
    }
    reference_data = make_task(ft, spec.model, &sc.base, ref.samples,
                               derive_seed(spec.seed, "scenario/reference_task"));
  }
  if (ref.kind != ReferenceSpec::Kind::none) {
    Model m = sc.base;
    m.attach_adapters(sc.placement, ref.rank, ref.alpha, InitScheme{},
                      derive_seed(spec.seed, "scenario/reference_init"));
    TrainConfig rcfg = ref.train;
    rcfg.seed = derive_seed(spec.seed, "scenario/reference_run");
    ProbeSchedule off;
    off.enabled = false;
    const auto res = fine_tune(m, reference_data, &sc.finetune_eval, rcfg, off);
    sc.reference_adapters = res.adapters;
    sc.reference_accuracy = res.final_eval_acc;
  }
  return sc;
}

}  // namespace abmlora
