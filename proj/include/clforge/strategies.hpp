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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "clforge/error.hpp"
#include "clforge/losses.hpp"
#include "clforge/metrics.hpp"
#include "clforge/nn.hpp"
#include "clforge/params.hpp"
#include "clforge/tasks.hpp"

namespace clforge {

enum class StrategyKind {
  fine_tune,
  separate_model,
  freeze_shared,
  experience_replay,
  kd_rehearsal,
  lwf,
  fta,
  lwfa,
};

std::string_view to_string(StrategyKind kind);
StrategyKind parse_strategy_kind(std::string_view text);

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t batch_size = 16;
  int max_epochs = 40;
  /// Epochs without a validation improvement before stopping.
  int patience = 3;
  /// Global gradient-norm clip.
  double clip_norm = 5.0;

  void validate() const;
};

struct StrategyConfig {
  StrategyKind kind = StrategyKind::fine_tune;
  /// Rehearsal capacity M (experience_replay, kd_rehearsal).
  std::size_t memory = 0;
  /// Averaging schedule (fta, lwfa).
  AveragingSchedule schedule = AveragingSchedule::harmonic();
  TrainConfig train;
  /// alpha for every strategy; lambda for lwf, lwfa and kd_rehearsal.
  LossConfig loss;
  /// Train a new task-owned head alone (shared entries frozen) before
  /// training everything.
  bool two_stage = true;

  /// Throws Error(configuration).
  void validate() const;

  bool uses_memory() const;
  bool averages() const;
  bool distills_new_task() const;
};

/// Read-only view of one task split. Training only ever receives the
/// current task's sources; everything older reaches it through the memory.
class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual int task_id() const = 0;
  virtual std::size_t size() const = 0;
  virtual const Utterance& at(std::size_t i) const = 0;
};

class DatasetSource : public DataSource {
 public:
  explicit DatasetSource(std::shared_ptr<const Dataset> data)
      : data_(std::move(data)) {}
  int task_id() const override { return data_->task_id; }
  std::size_t size() const override { return data_->utterances.size(); }
  const Utterance& at(std::size_t i) const override {
    return data_->utterances[i];
  }

 private:
  std::shared_ptr<const Dataset> data_;
};

struct MemoryItem {
  Utterance utterance;
  int task_id = 1;
  std::size_t source_index = 0; // index in the task's training split
};

/// Rehearsal memory with capacity M split evenly over the seen tasks.
class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<MemoryItem>& items() const { return items_; }
  std::size_t count_for(int task_id) const;
  /// Distinct task ids in insertion order.
  std::vector<int> task_ids() const;

 private:
  std::size_t capacity_;
  std::vector<MemoryItem> items_; // grouped by task, oldest task first

  friend MemoryBuffer rebalance_memory(const MemoryBuffer&, const DataSource&,
                                       int, std::uint64_t);
};

/// After learning the t-th task (t = number of distinct tasks including the
/// new one): every task keeps floor(M/t) utterances. Old slots are
/// subsampled uniformly from what they already hold; the new task is
/// sampled uniformly from its training split (all of it if smaller).
/// Throws Error(quota_underflow) when M < t.
MemoryBuffer rebalance_memory(const MemoryBuffer& buffer,
                              const DataSource& new_task_train, int t,
                              std::uint64_t seed);

struct EpochLog {
  int stage = 2;
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TaskLog {
  int task_id = 0;
  std::vector<EpochLog> epochs;
  /// Best (restored) epoch per stage; 0 when the stage did not run.
  int head_stage_best_epoch = 0;
  int best_epoch = 0;
  int stopped_epoch = 0;
  /// Averaging weight applied, when the strategy averages.
  std::optional<double> eta;
  double seconds = 0.0;
};

struct SequenceState {
  ParamStore params;               // model after the latest task
  std::vector<ParamStore> adapted; // adapted (pre-averaging) model per task
  std::vector<ParamStore> finals;  // model after each task
  MemoryBuffer memory;
  std::vector<TaskLog> logs;

  int tasks_learned() const { return static_cast<int>(finals.size()); }
};

/// Fresh state: initialized parameters (heads per `mode`) and an empty
/// memory of the strategy's capacity.
SequenceState initial_state(const Model& model, const StrategyConfig& strategy,
                            HeadMode mode, std::uint64_t seed);

struct TaskData {
  const DataSource* train = nullptr;
  const DataSource* val = nullptr;
};

/// Raised when a loss or gradient becomes non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::filesystem::path dump)
      : Error(Errc::non_finite, what), dump_(std::move(dump)) {}
  const std::filesystem::path& dump_path() const { return dump_; }

 private:
  std::filesystem::path dump_;
};

struct RunOptions {
  /// Where divergence diagnostics are written (nothing written if empty).
  std::filesystem::path diagnostics_dir;
};

/// Learns `task` (which must be task tasks_learned()+1) under `strategy`.
SequenceState train_task(SequenceState state, const Model& model,
                         const TaskSpec& task, const TaskData& data,
                         const StrategyConfig& strategy, std::uint64_t seed,
                         const RunOptions& options = {});

/// Corpus-level token error rate of greedy decoding: total edits over total
/// reference tokens.
double evaluate_wer(const Model& model, const ParamStore& params,
                    const DataSource& test, int task_id);

/// Mean hybrid loss over a split.
double evaluate_loss(const Model& model, const ParamStore& params,
                     const DataSource& data, int task_id,
                     const LossConfig& loss);

using DataProvider =
    std::function<std::shared_ptr<const DataSource>(const TaskSpec&, Split)>;

/// Provider that synthesizes splits on demand.
DataProvider synthesizing_provider();

struct RunResult {
  WerMatrix wer;
  SequenceState state;
};

/// Trains the suite's tasks in order and, after each, evaluates every task
/// seen so far on its test split. SeparateModel scores task j with the model
/// saved after task j.
RunResult run_sequence(const std::vector<TaskSpec>& suite, const Model& model,
                       const StrategyConfig& strategy, std::uint64_t seed,
                       const DataProvider& provider = synthesizing_provider(),
                       const RunOptions& options = {});

} // namespace clforge
