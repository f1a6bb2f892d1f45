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

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "clforge/error.hpp"
#include "clforge/metrics.hpp"
#include "clforge/nn.hpp"
#include "clforge/strategies.hpp"
#include "clforge/tasks.hpp"

namespace clforge {

/// Process exit codes of the CLI verbs.
enum ExitCode : int {
  exit_ok = 0,
  exit_failure = 1,
  exit_usage = 2,
  exit_divergence = 3,
};

/// Invalid experiment configuration, located by line and field.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, int line, const std::string& message);
  /// Dotted path such as "strategies[1].memory" (empty for syntax errors).
  const std::string& field() const { return field_; }
  /// 1-based line in the config text; 0 when unknown.
  int line() const { return line_; }

 private:
  std::string field_;
  int line_;
};

struct LabeledStrategy {
  std::string label;
  StrategyConfig config;
};

struct ExperimentConfig {
  SuiteConfig suite;
  /// When false, every run synthesizes its data with its own seed.
  bool fixed_data_seed = false;
  /// input_dim and vocab (and the reserved ids) follow the suite.
  ModelConfig model;
  std::vector<LabeledStrategy> strategies;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "clforge_out";
  /// Parallel runs; 0 = one per hardware thread.
  unsigned workers = 1;

  /// The suite actually used by a run with `seed`.
  SuiteConfig suite_for(std::uint64_t seed) const;
  /// Label of the Fine-Tuning run used as the FWT reference.
  const std::string& baseline_label() const;
};

/// Parses a JSON experiment document. Fine-Tuning is appended (label
/// "Fine-Tuning") when no strategy of that kind is present.
/// Throws ConfigError.
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
/// FNV-1a of the canonical JSON of `config`.
std::uint64_t model_config_hash(const ModelConfig& config);
std::string hex64(std::uint64_t v);

/// Sidecar written next to every checkpoint as "<checkpoint>.json".
struct CheckpointManifest {
  ModelConfig model;
  std::vector<int> task_history;
  std::optional<std::string> schedule;
  std::optional<double> eta;
  std::string strategy;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Throws Error(parse).
  static CheckpointManifest from_json(const nlohmann::json& j);
};

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint);
void save_manifest(const std::filesystem::path& checkpoint,
                   const CheckpointManifest& manifest);
/// Throws Error(io) when absent and Error(parse) when malformed.
CheckpointManifest load_manifest(const std::filesystem::path& checkpoint);

struct RunRecord {
  std::string label;
  StrategyKind kind = StrategyKind::fine_tune;
  std::uint64_t seed = 0;
  WerMatrix wer; // percent
  SummaryMetrics metrics;
  double seconds = 0.0;
  std::filesystem::path wer_csv;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<TaskLog> logs;
};

struct RunReport {
  std::vector<RunRecord> runs; // strategy-major, then seed
  std::filesystem::path summary_markdown;
  std::filesystem::path summary_json;

  const RunRecord* find(std::string_view label, std::uint64_t seed) const;
};

/// Executes every strategy x seed run and writes all artifacts under
/// config.output_dir. Throws DivergenceError, Error.
RunReport run_experiment(const ExperimentConfig& config,
                         std::ostream* progress = nullptr);

/// Markdown table in the layout of the reference results: one row per run,
/// then the seed means when there are several seeds.
std::string format_summary_markdown(const ExperimentConfig& config,
                                    const RunReport& report);

// CLI verbs. Each returns a process exit code and reports on out/err.

int cmd_run(const std::filesystem::path& config_path, std::ostream& out,
            std::ostream& err, RunReport* report = nullptr);

struct AverageArgs {
  std::filesystem::path old_checkpoint;
  std::filesystem::path adapted_checkpoint;
  std::filesystem::path output;
  std::optional<double> eta;
  std::optional<int> task_index;
  std::optional<std::string> schedule;
};
int cmd_average(const AverageArgs& args, std::ostream& out, std::ostream& err);

struct MetricsArgs {
  std::filesystem::path wer_csv;
  /// WER matrix of the Fine-Tuning run whose diagonal is the FWT reference.
  std::optional<std::filesystem::path> baseline_csv;
  /// Fail (exit 2) unless FWT can be computed.
  bool require_fwt = false;
  /// Defaults to the CSV path with extension ".metrics.json".
  std::optional<std::filesystem::path> json_output;
};
int cmd_metrics(const MetricsArgs& args, std::ostream& out, std::ostream& err);

/// Writes every split of every task of the configured suite (run seed
/// `seed`) to `output_dir` as task<t>_<split>.bin.
int cmd_gen_tasks(const std::filesystem::path& config_path,
                  const std::filesystem::path& output_dir, std::uint64_t seed,
                  std::ostream& out, std::ostream& err);

/// Prints the WER (percent) of a checkpoint on a dataset file.
int cmd_eval(const std::filesystem::path& checkpoint,
             const std::filesystem::path& dataset, std::optional<int> task_id,
             std::ostream& out, std::ostream& err);

} // namespace clforge
