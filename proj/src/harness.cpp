// SPDX-License-Identifier: Apache-2.0
#include "abmlora/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "abmlora/errors.hpp"
#include "abmlora/random.hpp"

namespace abmlora {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Schemes, grid, validation

SchemeSpec SchemeSpec::parse(std::string_view text) {
  SchemeSpec s;
  s.label = std::string(text);
  if (text == "abm") {
    s.abm = true;
  } else if (text == "vanilla") {
    s.init = InitScheme{};
  } else {
    s.init = InitScheme::parse(text);
  }
  return s;
}

bool AblationGrid::empty() const noexcept {
  return margin.empty() && layer_selection.empty() && weighting.empty() && steps.empty() &&
         scope.empty();
}

std::vector<AbmConfig> AblationGrid::expand(const AbmConfig& base) const {
  std::vector<AbmConfig> out{base};
  auto axis = [&out](const auto& values, auto apply) {
    if (values.empty()) return;
    std::vector<AbmConfig> next;
    for (const auto& cfg : out) {
      for (const auto& v : values) {
        AbmConfig c = cfg;
        apply(c, v);
        next.push_back(std::move(c));
      }
    }
    out = std::move(next);
  };
  axis(margin, [](AbmConfig& c, double v) { c.margin = v; });
  axis(layer_selection, [](AbmConfig& c, const LayerSelection& v) { c.selection = v; });
  axis(weighting, [](AbmConfig& c, Weighting v) { c.weighting = v; });
  axis(steps, [](AbmConfig& c, std::size_t v) { c.steps = v; });
  axis(scope, [](AbmConfig& c, AbmScope v) { c.scope = v; });
  return out;
}

namespace {

template <class F>
void with_path(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string_view what = e.what();
    if (what.starts_with(path)) throw;
    throw ConfigError(path + ": " + std::string(what));
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  with_path("scenario", [&] { scenario.validate(); });
  if (rank == 0) throw ConfigError("adapter.rank: must be at least 1");
  if (!(alpha > 0.0)) throw ConfigError("adapter.alpha: must be positive");
  if (schemes.empty()) throw ConfigError("schemes: at least one scheme is required");
  for (std::size_t i = 0; i < schemes.size(); ++i) {
    if (schemes[i].abm && !abm) {
      throw ConfigError("abm: required by scheme '" + schemes[i].label + "' (schemes[" +
                        std::to_string(i) + "])");
    }
    if (schemes[i].learning_rate && !(*schemes[i].learning_rate > 0.0)) {
      throw ConfigError("schemes[" + std::to_string(i) + "].learning_rate: must be positive");
    }
  }
  if (abm) {
    abm->cfg.validate();
    const auto& ref = abm->reference;
    if (ref != "scenario" && ref != "base" && ref.rfind("checkpoint:", 0) != 0) {
      throw ConfigError("abm.reference: expected 'scenario', 'base' or 'checkpoint:<path>'");
    }
  }
  train.validate();
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (output.empty()) throw ConfigError("output: must not be empty");
  if (!grid.empty() && !abm) throw ConfigError("grid: needs an abm block");
  for (double m : grid.margin) {
    if (!(m > 0.0)) throw ConfigError("grid.margin: values must be positive");
  }
  for (std::size_t s : grid.steps) {
    if (s == 0) throw ConfigError("grid.steps: values must be at least 1");
  }
}

// ---------------------------------------------------------------------------
// JSON config

namespace {

std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

void only_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> keys) {
  if (!obj.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [k, v] : obj.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError(join(path, k) + ": unknown field");
    }
  }
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + ": expected a number");
  return v.get<double>();
}

std::size_t as_count(const json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError(path + ": expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + ": expected a string");
  return v.get<std::string>();
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
  return v.get<bool>();
}

template <class T, class F>
void read(const json& obj, const std::string& path, std::string_view key, T& out, F conv) {
  const auto it = obj.find(std::string(key));
  if (it == obj.end()) return;
  const std::string p = join(path, key);
  with_path(p, [&] { out = conv(*it, p); });
}

auto number = [](const json& v, const std::string& p) { return as_number(v, p); };
auto count = [](const json& v, const std::string& p) { return as_count(v, p); };
auto string = [](const json& v, const std::string& p) { return as_string(v, p); };
auto boolean = [](const json& v, const std::string& p) { return as_bool(v, p); };

template <class F>
auto parsed(F parse) {
  return [parse](const json& v, const std::string& p) { return parse(as_string(v, p)); };
}

template <class F>
auto list_of(F item) {
  return [item](const json& v, const std::string& p) {
    if (!v.is_array()) throw ConfigError(p + ": expected a list");
    std::vector<decltype(item(v, p))> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(item(v[i], p + "[" + std::to_string(i) + "]"));
    return out;
  };
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::string resolve_checkpoint_text(const std::filesystem::path& base, std::string text) {
  constexpr std::string_view prefix = "checkpoint:";
  if (text.rfind(prefix, 0) == 0) {
    return std::string(prefix) + resolve(base, text.substr(prefix.size())).string();
  }
  return text;
}

void parse_train(const json& j, const std::string& path, TrainConfig& t) {
  only_keys(j, path, {"learning_rate", "epochs", "batch_size", "schedule", "warmup_ratio",
                      "max_grad_norm", "optimizer", "weight_decay", "max_steps", "eval_every"});
  read(j, path, "learning_rate", t.learning_rate, number);
  read(j, path, "epochs", t.epochs, count);
  read(j, path, "batch_size", t.batch_size, count);
  read(j, path, "schedule", t.schedule, parsed(parse_schedule));
  read(j, path, "warmup_ratio", t.warmup_ratio, number);
  read(j, path, "max_grad_norm", t.max_grad_norm,
       [](const json& v, const std::string& p) -> std::optional<double> {
         if (v.is_null()) return std::nullopt;
         return as_number(v, p);
       });
  read(j, path, "optimizer", t.optimizer, parsed(parse_optimizer));
  read(j, path, "weight_decay", t.weight_decay, number);
  read(j, path, "max_steps", t.max_steps,
       [](const json& v, const std::string& p) -> std::optional<std::size_t> {
         if (v.is_null()) return std::nullopt;
         return as_count(v, p);
       });
  read(j, path, "eval_every", t.eval_every, count);
}

void parse_task(const json& j, const std::string& path, TaskSource& t,
                const std::filesystem::path& base_dir) {
  only_keys(j, path, {"kind", "samples", "shift", "spread", "path"});
  read(j, path, "kind", t.kind, parsed(parse_task_kind));
  read(j, path, "samples", t.samples, count);
  read(j, path, "shift", t.shift, number);
  read(j, path, "spread", t.spread, number);
  read(j, path, "path", t.path, [&](const json& v, const std::string& p) {
    return resolve(base_dir, as_string(v, p));
  });
}

void parse_model(const json& j, const std::string& path, ModelSpec& m) {
  only_keys(j, path, {"arch", "input_dim", "num_classes", "activation", "hidden", "tokens",
                      "model_dim", "ff_dim"});
  read(j, path, "arch", m.arch, parsed(parse_architecture));
  read(j, path, "input_dim", m.input_dim, count);
  read(j, path, "num_classes", m.num_classes, count);
  read(j, path, "activation", m.act, parsed(parse_activation));
  read(j, path, "hidden", m.hidden, list_of(count));
  read(j, path, "tokens", m.tokens, count);
  read(j, path, "model_dim", m.model_dim, count);
  read(j, path, "ff_dim", m.ff_dim, count);
}

void parse_scenario(const json& j, const std::string& path, ScenarioSpec& s,
                    const std::filesystem::path& base_dir) {
  only_keys(j, path, {"seed", "model", "pretrain_task", "finetune_task", "eval_samples", "pretrain",
                      "reference", "placement", "notes"});
  read(j, path, "seed", s.seed, [](const json& v, const std::string& p) {
    return static_cast<std::uint64_t>(as_count(v, p));
  });
  if (j.contains("model")) parse_model(j["model"], join(path, "model"), s.model);
  if (j.contains("pretrain_task")) {
    parse_task(j["pretrain_task"], join(path, "pretrain_task"), s.pretrain_task, base_dir);
  }
  if (j.contains("finetune_task")) {
    parse_task(j["finetune_task"], join(path, "finetune_task"), s.finetune_task, base_dir);
  }
  read(j, path, "eval_samples", s.eval_samples, count);
  if (j.contains("pretrain")) parse_train(j["pretrain"], join(path, "pretrain"), s.pretrain);
  if (j.contains("reference")) {
    const std::string rp = join(path, "reference");
    const json& r = j["reference"];
    only_keys(r, rp, {"kind", "samples", "rank", "alpha", "train"});
    read(r, rp, "kind", s.reference.kind, parsed(parse_reference_kind));
    read(r, rp, "samples", s.reference.samples, count);
    read(r, rp, "rank", s.reference.rank, count);
    read(r, rp, "alpha", s.reference.alpha, number);
    if (r.contains("train")) parse_train(r["train"], join(rp, "train"), s.reference.train);
  }
  read(j, path, "placement", s.placement, list_of(string));
  read(j, path, "notes", s.notes, string);
}

void parse_abm(const json& j, const std::string& path, AbmSection& a,
               const std::filesystem::path& base_dir) {
  only_keys(j, path, {"margin", "steps", "step_size", "layers", "weighting", "batch_policy",
                      "batch_size", "optimizer", "scope", "start", "reference"});
  read(j, path, "margin", a.cfg.margin, number);
  read(j, path, "steps", a.cfg.steps, count);
  read(j, path, "step_size", a.cfg.step_size, number);
  read(j, path, "layers", a.cfg.selection, [](const json& v, const std::string& p) {
    if (v.is_array()) {
      LayerSelection s;
      s.preset = LayerSelection::Preset::named;
      s.names = list_of(string)(v, p);
      return s;
    }
    return LayerSelection::parse(as_string(v, p));
  });
  read(j, path, "weighting", a.cfg.weighting, parsed(parse_weighting));
  read(j, path, "batch_policy", a.cfg.batch_policy, parsed(parse_batch_policy));
  read(j, path, "batch_size", a.cfg.batch_size, count);
  read(j, path, "optimizer", a.cfg.optimizer, parsed(parse_optimizer));
  read(j, path, "scope", a.cfg.scope, parsed(parse_scope));
  read(j, path, "start", a.start, [&](const json& v, const std::string& p) {
    return InitScheme::parse(resolve_checkpoint_text(base_dir, as_string(v, p)));
  });
  read(j, path, "reference", a.reference, [&](const json& v, const std::string& p) {
    return resolve_checkpoint_text(base_dir, as_string(v, p));
  });
}

SchemeSpec parse_scheme(const json& v, const std::string& path, const std::filesystem::path& base_dir) {
  SchemeSpec s;
  with_path(path, [&] {
    if (v.is_string()) {
      s = SchemeSpec::parse(resolve_checkpoint_text(base_dir, v.get<std::string>()));
      s.label = v.get<std::string>();
      return;
    }
    only_keys(v, path, {"name", "learning_rate"});
    if (!v.contains("name")) throw ConfigError("name: missing");
    const std::string name = as_string(v["name"], join(path, "name"));
    s = SchemeSpec::parse(resolve_checkpoint_text(base_dir, name));
    s.label = name;
    if (v.contains("learning_rate")) s.learning_rate = as_number(v["learning_rate"], join(path, "learning_rate"));
  });
  return s;
}

}  // namespace

ExperimentConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  only_keys(j, "", {"scenario", "adapter", "schemes", "abm", "train", "probe", "seeds", "output",
                    "checkpoint_every", "grid"});
  if (j.contains("scenario")) parse_scenario(j["scenario"], "scenario", cfg.scenario, base_dir);
  if (j.contains("adapter")) {
    only_keys(j["adapter"], "adapter", {"rank", "alpha"});
    read(j["adapter"], "adapter", "rank", cfg.rank, count);
    read(j["adapter"], "adapter", "alpha", cfg.alpha, number);
  }
  if (j.contains("schemes")) {
    if (!j["schemes"].is_array()) throw ConfigError("schemes: expected a list");
    for (std::size_t i = 0; i < j["schemes"].size(); ++i) {
      cfg.schemes.push_back(parse_scheme(j["schemes"][i], "schemes[" + std::to_string(i) + "]", base_dir));
    }
  }
  if (j.contains("abm")) {
    cfg.abm.emplace();
    parse_abm(j["abm"], "abm", *cfg.abm, base_dir);
  }
  if (j.contains("train")) parse_train(j["train"], "train", cfg.train);
  if (j.contains("probe")) {
    only_keys(j["probe"], "probe", {"enabled", "dense_steps", "every"});
    read(j["probe"], "probe", "enabled", cfg.probe.enabled, boolean);
    read(j["probe"], "probe", "dense_steps", cfg.probe.dense_steps, count);
    read(j["probe"], "probe", "every", cfg.probe.every, count);
  }
  read(j, "", "seeds", cfg.seeds, list_of([](const json& v, const std::string& p) {
         return static_cast<std::uint64_t>(as_count(v, p));
       }));
  cfg.output = resolve(base_dir, cfg.output.string());
  read(j, "", "output", cfg.output, [&](const json& v, const std::string& p) {
    return resolve(base_dir, as_string(v, p));
  });
  read(j, "", "checkpoint_every", cfg.checkpoint_every, count);
  if (j.contains("grid")) {
    const json& g = j["grid"];
    only_keys(g, "grid", {"margin", "layer_selection", "weighting", "steps", "scope"});
    read(g, "grid", "margin", cfg.grid.margin, list_of(number));
    read(g, "grid", "layer_selection", cfg.grid.layer_selection,
         list_of(parsed(LayerSelection::parse)));
    read(g, "grid", "weighting", cfg.grid.weighting, list_of(parsed(parse_weighting)));
    read(g, "grid", "steps", cfg.grid.steps, list_of(count));
    read(g, "grid", "scope", cfg.grid.scope, list_of(parsed(parse_scope)));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.parent_path());
}

std::string_view mode_name(Mode m) noexcept {
  switch (m) {
    case Mode::run:
      return "run";
    case Mode::race:
      return "race";
    case Mode::ablate:
      return "ablate";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Runs

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string trace_csv(const TrainResult& r) {
  std::string s = "step,lr,train_loss,eval_acc,total,unavoidable,reducible,upper_bound\n";
  for (const auto& rec : r.trace) {
    s += std::to_string(rec.step) + "," + format_double(rec.lr) + "," + format_double(rec.train_loss) + ",";
    if (rec.eval_acc) s += format_double(*rec.eval_acc);
    if (rec.info) {
      s += "," + format_double(rec.info->total) + "," + format_double(rec.info->unavoidable) + "," +
           format_double(rec.info->reducible) + "," + format_double(rec.info->upper_bound);
    } else {
      s += ",,,,";
    }
    s += "\n";
  }
  return s;
}

std::string stage1_csv(const Stage1Result& r) {
  std::string s = "step,loss,mismatch_rate";
  for (const auto& l : r.layers) s += ",share_" + l;
  s += "\n";
  for (const auto& rec : r.trace) {
    s += std::to_string(rec.step) + "," + format_double(rec.loss) + "," + format_double(rec.mismatch_rate);
    for (double v : rec.layer_share) s += "," + format_double(v);
    s += "\n";
  }
  return s;
}

std::vector<NamedAdapter> resolve_reference(const Scenario& sc, const AbmSection& abm) {
  if (abm.reference == "base") return {};
  if (abm.reference == "scenario") return sc.reference_adapters.value_or(std::vector<NamedAdapter>{});
  return load_checkpoint(abm.reference.substr(std::string_view("checkpoint:").size()));
}

}  // namespace

RunOutcome run_one(const Scenario& scenario, const ExperimentConfig& cfg, const SchemeSpec& scheme,
                   const std::optional<AbmConfig>& abm_override, std::uint64_t seed,
                   const std::filesystem::path& run_dir) {
  RunOutcome out;
  out.scheme = scheme.label;
  out.seed = seed;
  if (!run_dir.empty()) std::filesystem::create_directories(run_dir);
  try {
    Model model = scenario.base;
    model.attach_adapters(scenario.placement, cfg.rank, cfg.alpha,
                          scheme.abm ? cfg.abm->start : scheme.init,
                          derive_seed(seed, "run/adapter_init"));
    out.trainable_parameters = model.trainable_parameter_count();
    out.full_parameters = model.adapted_full_parameter_count();

    if (scheme.abm) {
      PretrainedRef ref;
      auto adapters = resolve_reference(scenario, *cfg.abm);
      if (!adapters.empty()) ref.adapters = std::move(adapters);
      const AbmConfig abm_cfg = abm_override.value_or(cfg.abm->cfg);
      out.stage1 = run_stage1(model, ref, scenario.finetune_train.inputs, abm_cfg,
                              derive_seed(seed, "run/stage1"));
      out.stage1_initial_mismatch = out.stage1->initial_pool_mismatch;
      out.stage1_final_mismatch = out.stage1->final_pool_mismatch;
      if (!run_dir.empty()) write_file(run_dir / "stage1.csv", stage1_csv(*out.stage1));
    }

    TrainConfig tc = cfg.train;
    if (scheme.learning_rate) tc.learning_rate = *scheme.learning_rate;
    tc.seed = derive_seed(seed, "run/train");
    StepHook hook;
    if (!run_dir.empty() && cfg.checkpoint_every != 0) {
      hook = [&](const StepRecord& rec, const Model& m) {
        if ((rec.step + 1) % cfg.checkpoint_every == 0) {
          save_checkpoint(run_dir / ("adapters_step" + std::to_string(rec.step + 1) + ".ckpt"),
                          m.adapters());
        }
      };
    }
    out.train = fine_tune(model, scenario.finetune_train, &scenario.finetune_eval, tc, cfg.probe, hook);

    for (std::size_t i = 0; i < model.layers().size(); ++i) {
      if (!(model.layers()[i].w0 == scenario.base.layers()[i].w0)) out.base_unchanged = false;
    }
    const auto& trace = out.train.trace;
    out.step10_loss = trace.size() > 10 ? trace[10].train_loss : trace.back().train_loss;
    out.final_acc = out.train.final_eval_acc;
    for (const auto& rec : trace) {
      if (rec.step < 20 && rec.info) out.early_info_total += rec.info->total;
    }
    out.bound_violations = out.train.bound_violations;
    if (!run_dir.empty()) {
      write_file(run_dir / "trace.csv", trace_csv(out.train));
      save_checkpoint(run_dir / "adapters.ckpt", out.train.adapters);
    }
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
    if (!run_dir.empty()) write_file(run_dir / "FAILED", out.error + "\n");
  }
  return out;
}

int ExperimentReport::exit_code() const noexcept {
  bool inconsistent = false;
  for (const auto& r : runs) {
    if (!r.ok) return 2;
    if (r.bound_violations != 0 || !r.base_unchanged) inconsistent = true;
  }
  return inconsistent ? 3 : 0;
}

namespace {

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

// Mean and sample standard deviation (0 for a single value).
Stat stat(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double sq = 0.0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(v.size() - 1));
  }
  return s;
}

ojson stat_json(const std::vector<double>& v) {
  const Stat s = stat(v);
  ojson j;
  j["mean"] = s.mean;
  j["std"] = s.std;
  return j;
}

ojson abm_json(const AbmConfig& c) {
  ojson j;
  j["margin"] = c.margin;
  j["steps"] = c.steps;
  j["step_size"] = c.step_size;
  j["layers"] = c.selection.str();
  j["weighting"] = weighting_name(c.weighting);
  j["batch_policy"] = batch_policy_name(c.batch_policy);
  j["batch_size"] = c.batch_size;
  j["optimizer"] = optimizer_name(c.optimizer);
  j["scope"] = scope_name(c.scope);
  return j;
}

std::string dir_label(std::size_t index, const std::string& label) {
  std::string s = std::to_string(index) + "_";
  for (char c : label) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    s += keep ? c : '_';
  }
  return s;
}

std::string metrics_json(const ExperimentConfig& cfg, const ExperimentReport& rep,
                         const Scenario& sc) {
  ojson j;
  j["mode"] = mode_name(rep.mode);
  const int code = rep.exit_code();
  j["status"] = code == 0 ? "ok" : code == 2 ? "failed" : "inconsistent";
  ojson scen;
  scen["pretrain_accuracy"] = rep.pretrain_accuracy;
  scen["reference_accuracy"] = rep.reference_accuracy ? ojson(*rep.reference_accuracy) : ojson();
  scen["train_samples"] = sc.finetune_train.size();
  scen["eval_samples"] = sc.finetune_eval.size();
  scen["placement"] = sc.placement;
  j["scenario"] = scen;
  j["seeds"] = cfg.seeds;
  ojson cells = ojson::array();
  ojson failures = ojson::array();
  const std::size_t per_cell = cfg.schemes.size() * cfg.seeds.size();
  for (std::size_t c = 0; c < rep.cells.size(); ++c) {
    ojson cell;
    cell["abm"] = cfg.abm ? abm_json(rep.cells[c]) : ojson();
    ojson schemes = ojson::array();
    for (std::size_t s = 0; s < cfg.schemes.size(); ++s) {
      std::vector<double> loss, acc, info, mis0, mis1;
      std::size_t violations = 0, ok = 0;
      bool unchanged = true;
      std::size_t trainable = 0, full = 0;
      for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
        const RunOutcome& r = rep.runs[c * per_cell + s * cfg.seeds.size() + k];
        if (!r.ok) {
          ojson f;
          f["cell"] = c;
          f["scheme"] = r.scheme;
          f["seed"] = r.seed;
          f["error"] = r.error;
          failures.push_back(f);
          continue;
        }
        ++ok;
        loss.push_back(r.step10_loss);
        acc.push_back(r.final_acc);
        info.push_back(r.early_info_total);
        if (r.stage1_initial_mismatch) mis0.push_back(*r.stage1_initial_mismatch);
        if (r.stage1_final_mismatch) mis1.push_back(*r.stage1_final_mismatch);
        violations += r.bound_violations;
        unchanged = unchanged && r.base_unchanged;
        trainable = r.trainable_parameters;
        full = r.full_parameters;
      }
      ojson sj;
      sj["scheme"] = cfg.schemes[s].label;
      sj["learning_rate"] = cfg.schemes[s].learning_rate.value_or(cfg.train.learning_rate);
      sj["runs_ok"] = ok;
      sj["step10_loss"] = stat_json(loss);
      sj["final_acc"] = stat_json(acc);
      sj["early_info_total"] = stat_json(info);
      if (!mis0.empty()) {
        sj["stage1_initial_mismatch"] = stat_json(mis0);
        sj["stage1_final_mismatch"] = stat_json(mis1);
      }
      sj["bound_violations"] = violations;
      sj["trainable_parameters"] = trainable;
      sj["full_parameters"] = full;
      sj["base_unchanged"] = unchanged;
      schemes.push_back(sj);
    }
    cell["schemes"] = schemes;
    cells.push_back(cell);
  }
  j["cells"] = cells;
  j["failures"] = failures;
  return j.dump(2) + "\n";
}

std::string race_row(const RunOutcome& r) {
  if (!r.ok) return r.scheme + "," + std::to_string(r.seed) + ",,,";
  return r.scheme + "," + std::to_string(r.seed) + "," + format_double(r.step10_loss) + "," +
         format_double(r.final_acc) + "," + format_double(r.early_info_total);
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, Mode mode, std::size_t workers) {
  cfg.validate();
  if (mode == Mode::race && cfg.schemes.size() < 2) {
    throw ConfigError("schemes: a race needs at least two schemes");
  }
  if (mode == Mode::ablate && cfg.grid.empty()) throw ConfigError("grid: ablate needs at least one axis");

  const Scenario sc = build_scenario(cfg.scenario);
  ExperimentReport rep;
  rep.mode = mode;
  rep.pretrain_accuracy = sc.pretrain_accuracy;
  if (sc.reference_adapters) rep.reference_accuracy = sc.reference_accuracy;
  const AbmConfig base_abm = cfg.abm ? cfg.abm->cfg : AbmConfig{};
  rep.cells = mode == Mode::ablate ? cfg.grid.expand(base_abm) : std::vector<AbmConfig>{base_abm};

  struct Job {
    std::size_t cell, scheme, seed;
    std::filesystem::path dir;
  };
  std::vector<Job> jobs;
  const std::filesystem::path runs = cfg.output / "runs";
  for (std::size_t c = 0; c < rep.cells.size(); ++c) {
    for (std::size_t s = 0; s < cfg.schemes.size(); ++s) {
      for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
        std::filesystem::path dir = runs;
        if (mode == Mode::ablate) dir /= "cell_" + std::to_string(c);
        dir /= dir_label(s, cfg.schemes[s].label);
        dir /= "seed_" + std::to_string(cfg.seeds[k]);
        jobs.push_back({c, s, k, dir});
      }
    }
  }
  std::filesystem::create_directories(cfg.output);
  rep.runs.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      std::optional<AbmConfig> cell_cfg;
      if (cfg.abm) cell_cfg = rep.cells[job.cell];
      rep.runs[i] = run_one(sc, cfg, cfg.schemes[job.scheme], cell_cfg, cfg.seeds[job.seed], job.dir);
      rep.runs[i].cell = job.cell;
    }
  };
  const std::size_t n = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  write_file(cfg.output / "metrics.json", metrics_json(cfg, rep, sc));
  if (mode == Mode::race) {
    std::string csv = "scheme,seed,step10_loss,final_acc,early_info_total\n";
    for (const auto& r : rep.runs) csv += race_row(r) + "\n";
    write_file(cfg.output / "race.csv", csv);
  } else if (mode == Mode::ablate) {
    std::string csv =
        "margin,layer_selection,weighting,steps,scope,scheme,seed,step10_loss,final_acc,"
        "early_info_total\n";
    for (const auto& r : rep.runs) {
      const AbmConfig& c = rep.cells[r.cell];
      std::string sel = c.selection.str();
      std::replace(sel.begin(), sel.end(), ',', '+');
      csv += format_double(c.margin) + "," + sel + "," + std::string(weighting_name(c.weighting)) +
             "," + std::to_string(c.steps) + "," + std::string(scope_name(c.scope)) + "," +
             race_row(r) + "\n";
    }
    write_file(cfg.output / "ablate.csv", csv);
  }
  return rep;
}

CsvTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  auto cells = [](const std::string& line) {
    std::vector<std::string> out{""};
    for (char ch : line) {
      if (ch == ',') {
        out.emplace_back();
      } else if (ch != '\r') {
        out.back() += ch;
      }
    }
    return out;
  };
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw DataError("'" + path.string() + "' is empty");
  ++line_no;
  t.header = cells(line);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto row = cells(line);
    if (row.size() != t.header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " +
                      std::to_string(row.size()) + " cells, header has " +
                      std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace abmlora
