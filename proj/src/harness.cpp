// Copyright 2026 The clforge Authors
//
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

#include "clforge/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "clforge/checkpoint.hpp"
#include "clforge/params.hpp"

namespace clforge {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config text locations

/// Maps JSON pointers of a (valid) document to the line their value starts.
class Locator {
 public:
  explicit Locator(std::string_view text) : s_(text) {
    skip_ws();
    if (i_ < s_.size()) value("");
  }

  int line(const std::string& pointer) const {
    std::string p = pointer;
    while (true) {
      const auto it = lines_.find(p);
      if (it != lines_.end()) return it->second;
      const auto cut = p.rfind('/');
      if (cut == std::string::npos) return 0;
      p.resize(cut);
    }
  }

 private:
  void skip_ws() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) {
      if (s_[i_] == '\n') ++line_;
      ++i_;
    }
  }

  std::string string_token() {
    std::string out;
    ++i_; // opening quote
    while (i_ < s_.size() && s_[i_] != '"') {
      if (s_[i_] == '\\' && i_ + 1 < s_.size()) ++i_;
      out += s_[i_++];
    }
    ++i_;
    return out;
  }

  static std::string escape(const std::string& key) {
    std::string out;
    for (char c : key) {
      if (c == '~') out += "~0";
      else if (c == '/') out += "~1";
      else out += c;
    }
    return out;
  }

  void value(const std::string& path) {
    skip_ws();
    if (i_ >= s_.size()) return;
    lines_.emplace(path, line_);
    const char c = s_[i_];
    if (c == '{') {
      ++i_;
      while (true) {
        skip_ws();
        if (i_ >= s_.size() || s_[i_] == '}') break;
        if (s_[i_] == ',') {
          ++i_;
          continue;
        }
        const std::string key = string_token();
        const int key_line = line_;
        skip_ws();
        ++i_; // ':'
        const std::string child = path + "/" + escape(key);
        value(child);
        lines_[child] = key_line;
      }
      ++i_;
    } else if (c == '[') {
      ++i_;
      std::size_t index = 0;
      while (true) {
        skip_ws();
        if (i_ >= s_.size() || s_[i_] == ']') break;
        if (s_[i_] == ',') {
          ++i_;
          continue;
        }
        value(path + "/" + std::to_string(index++));
      }
      ++i_;
    } else if (c == '"') {
      string_token();
    } else {
      while (i_ < s_.size() && s_[i_] != ',' && s_[i_] != ']' && s_[i_] != '}' &&
             !std::isspace(static_cast<unsigned char>(s_[i_]))) {
        ++i_;
      }
    }
  }

  std::string_view s_;
  std::size_t i_ = 0;
  int line_ = 1;
  std::map<std::string, int> lines_;
};

/// "/strategies/1/memory" -> "strategies[1].memory"
std::string display_path(const std::string& pointer) {
  std::string out;
  std::size_t pos = 1;
  while (pos <= pointer.size() && !pointer.empty()) {
    const auto next = pointer.find('/', pos);
    std::string part = pointer.substr(pos, next == std::string::npos ? std::string::npos
                                                                      : next - pos);
    const bool index = !part.empty() &&
                       std::all_of(part.begin(), part.end(),
                                   [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
    if (index) {
      out += "[" + part + "]";
    } else {
      if (!out.empty()) out += ".";
      out += part;
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

/// Typed, path-aware reader for one JSON object that rejects unknown keys.
class Section {
 public:
  Section(const json& j, std::string pointer, const Locator& loc)
      : j_(j), pointer_(std::move(pointer)), loc_(loc) {
    if (!j_.is_object()) fail_here("must be an object");
  }

  [[noreturn]] void fail(std::string_view key, const std::string& msg) const {
    const std::string p = pointer_ + "/" + std::string(key);
    throw ConfigError(display_path(p), loc_.line(p), msg);
  }
  [[noreturn]] void fail_here(const std::string& msg) const {
    throw ConfigError(display_path(pointer_), loc_.line(pointer_), msg);
  }

  const json* raw(std::string_view key) {
    used_.insert(std::string(key));
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  Section child(std::string_view key) {
    const json* v = raw(key);
    if (v == nullptr) fail(key, "missing section");
    return Section(*v, pointer_ + "/" + std::string(key), loc_);
  }
  bool has(std::string_view key) const { return j_.contains(key); }
  std::string pointer(std::string_view key) const {
    return pointer_ + "/" + std::string(key);
  }

  void number(std::string_view key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) fail(key, "must be finite");
    }
  }
  template <class T>
  void integer(std::string_view key, T& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v->is_number_unsigned() || v->get<std::int64_t>() >= 0) {
          out = static_cast<T>(v->get<std::uint64_t>());
          return;
        }
        fail(key, "must be >= 0");
      } else {
        out = static_cast<T>(v->get<std::int64_t>());
      }
    }
  }
  void boolean(std::string_view key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void string(std::string_view key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  void range(std::string_view key, IntRange& out) {
    if (const json* v = raw(key)) {
      if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number_integer() ||
          !(*v)[1].is_number_integer()) {
        fail(key, "expected [lo, hi] integers");
      }
      out = {(*v)[0].get<int>(), (*v)[1].get<int>()};
    }
  }

  /// Runs `fn` and re-raises its Error as a ConfigError on this section.
  template <class Fn>
  void check(Fn&& fn) const {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      fail_here(e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.contains(key)) fail(key, "unknown key");
    }
  }

 private:
  const json& j_;
  std::string pointer_;
  const Locator& loc_;
  std::set<std::string> used_;
};

void read_train(Section& s, TrainConfig& t) {
  s.number("learning_rate", t.learning_rate);
  s.integer("batch_size", t.batch_size);
  s.integer("max_epochs", t.max_epochs);
  s.integer("patience", t.patience);
  s.number("clip_norm", t.clip_norm);
  s.finish();
  s.check([&] { t.validate(); });
}

void read_loss(Section& s, LossConfig& l) {
  s.number("alpha", l.alpha);
  s.number("lambda", l.lambda);
  s.boolean("kd_mean", l.kd_mean);
}

void read_suite(Section& s, SuiteConfig& c, bool& fixed_seed) {
  std::string kind = std::string(to_string(c.kind));
  s.string("kind", kind);
  try {
    c.kind = parse_suite_kind(kind);
  } catch (const Error& e) {
    s.fail("kind", e.what());
  }
  s.integer("tasks", c.tasks);
  s.integer("vocab", c.vocab);
  s.integer("feature_dim", c.feature_dim);
  s.number("similarity", c.similarity);
  s.number("perturbation_scale", c.perturbation_scale);
  s.integer("n_train_first", c.n_train_first);
  s.integer("n_train", c.n_train);
  s.integer("n_val", c.n_val);
  s.integer("n_test", c.n_test);
  s.number("noise_sigma", c.noise_sigma);
  if (const json* v = s.raw("noise_overrides")) {
    if (!v->is_object()) s.fail("noise_overrides", "expected an object of task -> sigma");
    for (const auto& [task, sigma] : v->items()) {
      const std::string p = "noise_overrides/" + task;
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(task, &used);
        if (used != task.size()) throw std::invalid_argument(task);
      } catch (const std::exception&) {
        s.fail(p, "task ids must be integers");
      }
      if (!sigma.is_number()) s.fail(p, "expected a number");
      c.noise_overrides[id] = sigma.get<double>();
    }
  }
  s.range("frames_per_token", c.frames_per_token);
  s.range("target_len", c.target_len);
  fixed_seed = s.has("seed");
  s.integer("seed", c.seed);
  s.finish();
  s.check([&] { c.validate(); });
}

void read_model(Section& s, ModelConfig& m) {
  s.integer("hidden", m.hidden);
  s.integer("blocks", m.blocks);
  s.integer("context", m.context);
  s.number("frames_per_token", m.frames_per_token);
  s.number("init_range", m.init_range);
  s.number("location_init", m.location_init);
  s.finish();
  s.check([&] { m.validate(); });
}

std::string eta_column(const StrategyConfig& s) {
  if (!s.averages()) return "";
  if (s.schedule.is_harmonic()) return "t^-1";
  char buf[32];
  std::snprintf(buf, sizeof buf, "=%.2f", s.schedule.constant_eta());
  return buf;
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string sanitize(std::string_view label) {
  std::string out;
  for (char c : label) {
    out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'
               ? c
               : '_';
  }
  return out.empty() ? "run" : out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  try {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error(Errc::io, "cannot write " + tmp.string());
      out << text;
      if (!out) throw Error(Errc::io, "write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
  } catch (const fs::filesystem_error& e) {
    throw Error(Errc::io, e.what());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json metrics_json(const SummaryMetrics& m) {
  return {{"avg", m.avg}, {"bwt", m.bwt},
          {"fwt", m.fwt ? json(*m.fwt) : json(nullptr)}};
}

json wer_json(const WerMatrix& r) {
  json rows = json::array();
  for (std::size_t i = 1; i <= r.tasks(); ++i) {
    json row = json::array();
    for (std::size_t j = 1; j <= r.tasks(); ++j) {
      const auto v = r.at(i, j);
      row.push_back(v ? json(*v) : json(nullptr));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

json logs_json(const std::vector<TaskLog>& logs) {
  json out = json::array();
  for (const auto& l : logs) {
    json epochs = json::array();
    for (const auto& e : l.epochs) {
      epochs.push_back({{"stage", e.stage}, {"epoch", e.epoch},
                        {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
    }
    out.push_back({{"task_id", l.task_id},
                   {"head_stage_best_epoch", l.head_stage_best_epoch},
                   {"best_epoch", l.best_epoch},
                   {"stopped_epoch", l.stopped_epoch},
                   {"eta", l.eta ? json(*l.eta) : json(nullptr)},
                   {"seconds", l.seconds},
                   {"epochs", std::move(epochs)}});
  }
  return out;
}

/// Dataset provider backed by an on-disk cache keyed by the suite hash.
class CachedProvider {
 public:
  explicit CachedProvider(fs::path root) : root_(std::move(root)) {}

  std::shared_ptr<const DataSource> get(const SuiteConfig& suite,
                                        const TaskSpec& spec, Split split) {
    const std::string key = hex64(suite.hash());
    std::lock_guard lock(mu_);
    auto& slot = cache_[{key, spec.task_id, static_cast<int>(split)}];
    if (slot) return slot;
    const fs::path file = root_ / key /
                          ("task" + std::to_string(spec.task_id) + "_" +
                           std::string(to_string(split)) + ".bin");
    std::shared_ptr<const Dataset> data;
    if (fs::exists(file)) {
      data = std::make_shared<const Dataset>(load_dataset(file));
    } else {
      auto fresh = std::make_shared<Dataset>(synthesize(spec, split));
      fs::create_directories(file.parent_path());
      const fs::path tmp = file.string() + ".tmp";
      save_dataset(tmp, *fresh);
      fs::rename(tmp, file);
      data = std::move(fresh);
    }
    slot = std::make_shared<DatasetSource>(std::move(data));
    return slot;
  }

 private:
  fs::path root_;
  std::mutex mu_;
  std::map<std::tuple<std::string, int, int>, std::shared_ptr<const DataSource>> cache_;
};

std::string schedule_text(const StrategyConfig& s) {
  return s.schedule.to_string();
}

} // namespace

// ---------------------------------------------------------------------------

ConfigError::ConfigError(std::string field, int line, const std::string& message)
    : Error(Errc::configuration,
            (line > 0 ? "line " + std::to_string(line) + ": " : std::string()) +
                (field.empty() ? std::string() : field + ": ") + message),
      field_(std::move(field)),
      line_(line) {}

SuiteConfig ExperimentConfig::suite_for(std::uint64_t seed) const {
  SuiteConfig s = suite;
  if (!fixed_data_seed) s.seed = seed;
  return s;
}

const std::string& ExperimentConfig::baseline_label() const {
  for (const auto& s : strategies) {
    if (s.config.kind == StrategyKind::fine_tune) return s.label;
  }
  throw Error(Errc::missing_baseline, "experiment has no Fine-Tuning run");
}

ExperimentConfig parse_experiment_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    int line = 1;
    const std::size_t end = std::min<std::size_t>(e.byte, text.size());
    for (std::size_t i = 0; i + 1 < end; ++i) {
      if (text[i] == '\n') ++line;
    }
    throw ConfigError("", line, "malformed JSON: " + std::string(e.what()));
  }
  const Locator loc(text);
  Section root(doc, "", loc);
  ExperimentConfig cfg;

  if (root.has("suite")) {
    Section s = root.child("suite");
    read_suite(s, cfg.suite, cfg.fixed_data_seed);
  } else {
    root.raw("suite");
  }

  cfg.model = ModelConfig::for_vocab(cfg.suite.vocab);
  cfg.model.input_dim = cfg.suite.feature_dim;
  if (root.has("model")) {
    Section s = root.child("model");
    read_model(s, cfg.model);
  } else {
    root.raw("model");
  }

  TrainConfig train;
  if (root.has("train")) {
    Section s = root.child("train");
    read_train(s, train);
  } else {
    root.raw("train");
  }
  LossConfig loss;
  if (root.has("loss")) {
    Section s = root.child("loss");
    read_loss(s, loss);
    s.finish();
    s.check([&] { loss.validate(); });
  } else {
    root.raw("loss");
  }

  const json* strategies = root.raw("strategies");
  if (strategies == nullptr) root.fail("strategies", "missing list of strategies");
  if (!strategies->is_array()) root.fail("strategies", "expected a list");
  if (strategies->empty()) root.fail("strategies", "at least one strategy is required");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < strategies->size(); ++i) {
    Section s((*strategies)[i], "/strategies/" + std::to_string(i), loc);
    LabeledStrategy ls;
    ls.config.train = train;
    ls.config.loss = loss;
    std::string kind;
    s.string("kind", kind);
    if (kind.empty()) s.fail("kind", "missing strategy kind");
    try {
      ls.config.kind = parse_strategy_kind(kind);
    } catch (const Error& e) {
      s.fail("kind", e.what());
    }
    ls.label = std::string(to_string(ls.config.kind));
    s.string("label", ls.label);
    if (ls.label.empty()) s.fail("label", "must not be empty");
    if (!labels.insert(ls.label).second) s.fail("label", "duplicate label '" + ls.label + "'");
    s.integer("memory", ls.config.memory);
    if (const json* v = s.raw("schedule")) {
      try {
        if (v->is_number()) {
          ls.config.schedule = AveragingSchedule::constant(v->get<double>());
        } else if (v->is_string()) {
          ls.config.schedule = AveragingSchedule::parse(v->get<std::string>());
        } else {
          s.fail("schedule", "expected \"harmonic\" or a number in [0, 1]");
        }
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        s.fail("schedule", e.what());
      }
    }
    read_loss(s, ls.config.loss);
    s.boolean("two_stage", ls.config.two_stage);
    if (s.has("train")) {
      Section t = s.child("train");
      read_train(t, ls.config.train);
    } else {
      s.raw("train");
    }
    s.finish();
    s.check([&] { ls.config.validate(); });
    cfg.strategies.push_back(std::move(ls));
  }
  const bool has_ft = std::any_of(cfg.strategies.begin(), cfg.strategies.end(),
                                  [](const LabeledStrategy& s) {
                                    return s.config.kind == StrategyKind::fine_tune;
                                  });
  if (!has_ft) {
    LabeledStrategy ft;
    ft.label = labels.contains("Fine-Tuning") ? "Fine-Tuning (reference)" : "Fine-Tuning";
    ft.config.kind = StrategyKind::fine_tune;
    ft.config.train = train;
    ft.config.loss = loss;
    cfg.strategies.insert(cfg.strategies.begin(), std::move(ft));
  }

  if (const json* v = root.raw("seeds")) {
    if (!v->is_array() || v->empty()) root.fail("seeds", "expected a non-empty list");
    cfg.seeds.clear();
    std::set<std::uint64_t> seen;
    for (std::size_t i = 0; i < v->size(); ++i) {
      const auto& e = (*v)[i];
      if (!e.is_number_unsigned()) {
        root.fail("seeds/" + std::to_string(i), "seeds must be non-negative integers");
      }
      if (!seen.insert(e.get<std::uint64_t>()).second) {
        root.fail("seeds/" + std::to_string(i), "duplicate seed");
      }
      cfg.seeds.push_back(e.get<std::uint64_t>());
    }
  }
  std::string out_dir = cfg.output_dir.string();
  root.string("output_dir", out_dir);
  if (out_dir.empty()) root.fail("output_dir", "must not be empty");
  cfg.output_dir = out_dir;
  root.integer("workers", cfg.workers);
  root.finish();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(read_text(path));
}

json model_config_to_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim},   {"hidden", c.hidden},
          {"blocks", c.blocks},         {"context", c.context},
          {"vocab", c.vocab},           {"blank_id", c.blank_id},
          {"sos_id", c.sos_id},         {"eos_id", c.eos_id},
          {"frames_per_token", c.frames_per_token},
          {"init_range", c.init_range}, {"location_init", c.location_init}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.context = j.at("context").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.blank_id = j.at("blank_id").get<int>();
    c.sos_id = j.at("sos_id").get<int>();
    c.eos_id = j.at("eos_id").get<int>();
    c.frames_per_token = j.at("frames_per_token").get<double>();
    c.init_range = j.at("init_range").get<double>();
    c.location_init = j.at("location_init").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(Errc::parse, std::string("model config: ") + e.what());
  }
}

std::uint64_t model_config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : model_config_to_json(config).dump()) {
    h = (h ^ c) * 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json CheckpointManifest::to_json() const {
  return {{"format", "clforge-checkpoint"},
          {"model", model_config_to_json(model)},
          {"config_hash", hex64(model_config_hash(model))},
          {"task_history", task_history},
          {"schedule", schedule ? json(*schedule) : json(nullptr)},
          {"eta", eta ? json(*eta) : json(nullptr)},
          {"strategy", strategy},
          {"seed", seed}};
}

CheckpointManifest CheckpointManifest::from_json(const json& j) {
  try {
    CheckpointManifest m;
    m.model = model_config_from_json(j.at("model"));
    if (j.at("config_hash").get<std::string>() != hex64(model_config_hash(m.model))) {
      throw Error(Errc::parse, "manifest config_hash does not match its model config");
    }
    m.task_history = j.at("task_history").get<std::vector<int>>();
    if (!j.at("schedule").is_null()) m.schedule = j.at("schedule").get<std::string>();
    if (!j.at("eta").is_null()) m.eta = j.at("eta").get<double>();
    m.strategy = j.at("strategy").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
  } catch (const json::exception& e) {
    throw Error(Errc::parse, std::string("checkpoint manifest: ") + e.what());
  }
}

fs::path manifest_path(const fs::path& checkpoint) {
  return checkpoint.string() + ".json";
}

void save_manifest(const fs::path& checkpoint, const CheckpointManifest& manifest) {
  write_text_atomic(manifest_path(checkpoint), manifest.to_json().dump(2) + "\n");
}

CheckpointManifest load_manifest(const fs::path& checkpoint) {
  const auto path = manifest_path(checkpoint);
  if (!fs::exists(path)) throw Error(Errc::io, "missing manifest " + path.string());
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw Error(Errc::parse, path.string() + ": " + e.what());
  }
  return CheckpointManifest::from_json(j);
}

const RunRecord* RunReport::find(std::string_view label, std::uint64_t seed) const {
  for (const auto& r : runs) {
    if (r.label == label && r.seed == seed) return &r;
  }
  return nullptr;
}

RunReport run_experiment(const ExperimentConfig& config, std::ostream* progress) {
  struct Job {
    const LabeledStrategy* strategy;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& s : config.strategies) {
    for (auto seed : config.seeds) jobs.push_back({&s, seed});
  }

  const fs::path root = config.output_dir;
  fs::create_directories(root);
  CachedProvider cache(root / "datasets");
  const Model model(config.model);

  std::vector<RunRecord> records(jobs.size());
  std::vector<std::exception_ptr> failures(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;

  auto work = [&] {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs.size()) return;
      const auto& job = jobs[k];
      try {
        const auto started = std::chrono::steady_clock::now();
        const SuiteConfig suite_cfg = config.suite_for(job.seed);
        const auto suite = gen_task_suite(suite_cfg);
        const fs::path dir = root / "runs" / sanitize(job.strategy->label) /
                             ("seed" + std::to_string(job.seed));
        fs::create_directories(dir);
        const DataProvider provider = [&](const TaskSpec& spec, Split split) {
          return cache.get(suite_cfg, spec, split);
        };
        RunOptions options;
        options.diagnostics_dir = dir;
        RunResult result = run_sequence(suite, model, job.strategy->config,
                                        job.seed, provider, options);

        RunRecord& rec = records[k];
        rec.label = job.strategy->label;
        rec.kind = job.strategy->config.kind;
        rec.seed = job.seed;
        rec.wer = result.wer.scaled(100.0);
        rec.logs = result.state.logs;
        std::vector<int> history;
        for (std::size_t t = 0; t < result.state.finals.size(); ++t) {
          history.push_back(static_cast<int>(t + 1));
          const fs::path ckpt = dir / ("task" + std::to_string(t + 1) + ".ckpt");
          save_checkpoint(ckpt, result.state.finals[t]);
          CheckpointManifest m;
          m.model = config.model;
          m.task_history = history;
          if (job.strategy->config.averages()) {
            m.schedule = schedule_text(job.strategy->config);
            m.eta = result.state.logs[t].eta;
          }
          m.strategy = job.strategy->label;
          m.seed = job.seed;
          save_manifest(ckpt, m);
          rec.checkpoints.push_back(ckpt);
        }
        rec.wer_csv = dir / "wer.csv";
        std::ostringstream csv;
        write_wer_csv(csv, rec.wer);
        write_text_atomic(rec.wer_csv, csv.str());
        write_text_atomic(dir / "log.json", logs_json(rec.logs).dump(2) + "\n");
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                          .count();
        if (progress != nullptr) {
          std::lock_guard lock(log_mu);
          *progress << "finished " << rec.label << " seed " << rec.seed << " in "
                    << fmt2(rec.seconds) << " s\n";
        }
      } catch (...) {
        failures[k] = std::current_exception();
      }
    }
  };

  unsigned workers = config.workers;
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, jobs.size()));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  RunReport report;
  report.runs = std::move(records);
  const std::string& baseline = config.baseline_label();
  for (auto& rec : report.runs) {
    const RunRecord* ft = report.find(baseline, rec.seed);
    rec.metrics = summarize(rec.wer, ft != nullptr ? &ft->wer : nullptr);
  }

  report.summary_markdown = root / "summary.md";
  write_text_atomic(report.summary_markdown, format_summary_markdown(config, report));

  json runs = json::array();
  for (const auto& rec : report.runs) {
    json ckpts = json::array();
    for (const auto& c : rec.checkpoints) ckpts.push_back(c.string());
    runs.push_back({{"label", rec.label},
                    {"strategy", to_string(rec.kind)},
                    {"seed", rec.seed},
                    {"wer_percent", wer_json(rec.wer)},
                    {"metrics", metrics_json(rec.metrics)},
                    {"seconds", rec.seconds},
                    {"wer_csv", rec.wer_csv.string()},
                    {"checkpoints", std::move(ckpts)},
                    {"tasks", logs_json(rec.logs)}});
  }
  json summary = {{"baseline", baseline},
                  {"suite_hash", hex64(config.suite.hash())},
                  {"model_config_hash", hex64(model_config_hash(config.model))},
                  {"runs", std::move(runs)}};
  report.summary_json = root / "report.json";
  write_text_atomic(report.summary_json, summary.dump(2) + "\n");
  return report;
}

std::string format_summary_markdown(const ExperimentConfig& config,
                                    const RunReport& report) {
  const std::size_t tasks = static_cast<std::size_t>(config.suite.tasks);
  std::ostringstream md;
  auto header = [&] {
    md << "| Model | η | Mem. |";
    for (std::size_t j = 1; j <= tasks; ++j) md << " T" << j << " |";
    md << " AVG | BWT | FWT |\n|---|---|---|";
    for (std::size_t j = 1; j <= tasks; ++j) md << "---|";
    md << "---|---|---|\n";
  };
  auto memory_column = [](const StrategyConfig& s) {
    return s.uses_memory() ? std::to_string(s.memory) : std::string();
  };

  md << "WER (%) per task on the final model.\n\n";
  header();
  for (const auto& s : config.strategies) {
    for (auto seed : config.seeds) {
      const RunRecord* rec = report.find(s.label, seed);
      if (rec == nullptr) continue;
      md << "| " << s.label;
      if (config.seeds.size() > 1) md << " (seed " << seed << ")";
      md << " | " << eta_column(s.config) << " | " << memory_column(s.config) << " |";
      for (std::size_t j = 1; j <= tasks; ++j) md << " " << fmt2(rec->wer.get(tasks, j)) << " |";
      md << " " << fmt2(rec->metrics.avg) << " | " << fmt2(rec->metrics.bwt) << " | "
         << (rec->metrics.fwt ? fmt2(*rec->metrics.fwt) : std::string()) << " |\n";
    }
  }

  if (config.seeds.size() > 1) {
    md << "\nMean over " << config.seeds.size() << " seeds.\n\n";
    header();
    for (const auto& s : config.strategies) {
      std::vector<double> cells(tasks, 0.0);
      double a = 0.0, b = 0.0, f = 0.0;
      bool has_fwt = true;
      std::size_t n = 0;
      for (auto seed : config.seeds) {
        const RunRecord* rec = report.find(s.label, seed);
        if (rec == nullptr) continue;
        ++n;
        for (std::size_t j = 1; j <= tasks; ++j) cells[j - 1] += rec->wer.get(tasks, j);
        a += rec->metrics.avg;
        b += rec->metrics.bwt;
        if (rec->metrics.fwt) f += *rec->metrics.fwt;
        else has_fwt = false;
      }
      if (n == 0) continue;
      const double inv = 1.0 / static_cast<double>(n);
      md << "| " << s.label << " | " << eta_column(s.config) << " | "
         << memory_column(s.config) << " |";
      for (double c : cells) md << " " << fmt2(c * inv) << " |";
      md << " " << fmt2(a * inv) << " | " << fmt2(b * inv) << " | "
         << (has_fwt ? fmt2(f * inv) : std::string()) << " |\n";
    }
  }
  return md.str();
}

int cmd_run(const fs::path& config_path, std::ostream& out, std::ostream& err,
            RunReport* report_out) {
  ExperimentConfig config;
  try {
    config = load_experiment_config(config_path);
  } catch (const ConfigError& e) {
    err << "invalid config " << config_path.string() << ": " << e.what() << "\n";
    return exit_usage;
  } catch (const Error& e) {
    err << "cannot load config: " << e.what() << "\n";
    return exit_usage;
  }
  if (const char* env = std::getenv("CLFORGE_OUT"); env != nullptr && *env != '\0') {
    config.output_dir = env;
  }
  try {
    RunReport report = run_experiment(config, &err);
    out << format_summary_markdown(config, report);
    out << "\nsummary: " << report.summary_markdown.string() << "\nreport: "
        << report.summary_json.string() << "\n";
    if (report_out != nullptr) *report_out = std::move(report);
    return exit_ok;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << "\n";
    if (!e.dump_path().empty()) err << "see " << e.dump_path().string() << "\n";
    return exit_divergence;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return exit_failure;
  }
}

int cmd_average(const AverageArgs& args, std::ostream& out, std::ostream& err) {
  if (args.eta.has_value() == args.task_index.has_value()) {
    err << "give either an eta or a task index (with a schedule)\n";
    return exit_usage;
  }
  if (args.schedule && !args.task_index) {
    err << "--schedule requires --task-index\n";
    return exit_usage;
  }
  double eta = 0.0;
  AveragingSchedule schedule = AveragingSchedule::harmonic();
  try {
    if (args.eta) {
      schedule = AveragingSchedule::constant(*args.eta);
      eta = *args.eta;
    } else {
      if (args.schedule) schedule = AveragingSchedule::parse(*args.schedule);
      eta = eta_for_task(schedule, *args.task_index);
    }
  } catch (const Error& e) {
    err << "invalid averaging weight: " << e.what() << "\n";
    return exit_usage;
  }

  CheckpointManifest old_m, adapted_m;
  try {
    old_m = load_manifest(args.old_checkpoint);
    adapted_m = load_manifest(args.adapted_checkpoint);
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_usage;
  }
  if (model_config_hash(old_m.model) != model_config_hash(adapted_m.model)) {
    err << "manifest mismatch: model config hashes "
        << hex64(model_config_hash(old_m.model)) << " and "
        << hex64(model_config_hash(adapted_m.model)) << " differ\n";
    return exit_usage;
  }
  try {
    const ParamStore old_p = load_checkpoint(args.old_checkpoint);
    const ParamStore adapted_p = load_checkpoint(args.adapted_checkpoint);
    const ParamStore result = average(old_p, adapted_p, eta);
    save_checkpoint(args.output, result);
    CheckpointManifest m = adapted_m;
    m.eta = eta;
    m.schedule = schedule.to_string();
    save_manifest(args.output, m);
  } catch (const Error& e) {
    err << "averaging failed: " << e.what() << "\n";
    return e.code() == Errc::io ? exit_failure : exit_usage;
  } catch (const std::exception& e) {
    err << "averaging failed: " << e.what() << "\n";
    return exit_failure;
  }
  out << "eta " << format_exact(eta) << "\n";
  return exit_ok;
}

int cmd_metrics(const MetricsArgs& args, std::ostream& out, std::ostream& err) {
  auto load = [&](const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw Error(Errc::io, "cannot read " + p.string());
    return read_wer_csv(in);
  };
  if (args.require_fwt && !args.baseline_csv) {
    err << "FWT requested but no Fine-Tuning reference was given\n";
    return exit_usage;
  }
  try {
    const WerMatrix r = load(args.wer_csv);
    SummaryMetrics m;
    m.avg = avg(r);
    m.bwt = bwt(r);
    if (args.baseline_csv) {
      const WerMatrix ft = load(*args.baseline_csv);
      m.fwt = fwt(r, ft);
    }
    out << "AVG " << fmt2(m.avg) << "\nBWT " << fmt2(m.bwt) << "\nFWT "
        << (m.fwt ? fmt2(*m.fwt) : std::string("n/a")) << "\n";
    fs::path json_path = args.json_output.value_or(
        fs::path(args.wer_csv).replace_extension(".metrics.json"));
    json j = metrics_json(m);
    j["tasks"] = r.tasks();
    j["wer_csv"] = args.wer_csv.string();
    if (args.baseline_csv) j["baseline_csv"] = args.baseline_csv->string();
    write_text_atomic(json_path, j.dump(2) + "\n");
    return exit_ok;
  } catch (const Error& e) {
    err << "metrics: " << e.what() << "\n";
    return exit_usage;
  } catch (const std::exception& e) {
    err << "metrics: " << e.what() << "\n";
    return exit_failure;
  }
}

int cmd_gen_tasks(const fs::path& config_path, const fs::path& output_dir,
                  std::uint64_t seed, std::ostream& out, std::ostream& err) {
  ExperimentConfig config;
  try {
    config = load_experiment_config(config_path);
  } catch (const Error& e) {
    err << "invalid config " << config_path.string() << ": " << e.what() << "\n";
    return exit_usage;
  }
  try {
    const auto suite = gen_task_suite(config.suite_for(seed));
    fs::create_directories(output_dir);
    std::size_t files = 0;
    for (const auto& spec : suite) {
      for (Split split : {Split::train, Split::val, Split::test}) {
        const fs::path p = output_dir / ("task" + std::to_string(spec.task_id) + "_" +
                                         std::string(to_string(split)) + ".bin");
        save_dataset(p, synthesize(spec, split));
        ++files;
      }
    }
    out << "wrote " << files << " datasets to " << output_dir.string() << "\n";
    return exit_ok;
  } catch (const Error& e) {
    err << "gen-tasks: " << e.what() << "\n";
    return exit_failure;
  } catch (const std::exception& e) {
    err << "gen-tasks: " << e.what() << "\n";
    return exit_failure;
  }
}

int cmd_eval(const fs::path& checkpoint, const fs::path& dataset,
             std::optional<int> task_id, std::ostream& out, std::ostream& err) {
  try {
    const CheckpointManifest m = load_manifest(checkpoint);
    const ParamStore params = load_checkpoint(checkpoint);
    auto data = std::make_shared<const Dataset>(load_dataset(dataset));
    const Model model(m.model);
    const DatasetSource source(data);
    const double w = evaluate_wer(model, params, source, task_id.value_or(data->task_id));
    out << "WER " << fmt2(100.0 * w) << "\n";
    return exit_ok;
  } catch (const Error& e) {
    err << "eval: " << e.what() << "\n";
    return e.code() == Errc::io ? exit_failure : exit_usage;
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << "\n";
    return exit_failure;
  }
}

} // namespace clforge
