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

#include "clforge/strategies.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>

#include <json.hpp>

#include "clforge/checkpoint.hpp"
#include "clforge/kernels.hpp"
#include "clforge/rng.hpp"

namespace clforge {
namespace {

constexpr std::uint64_t kInitStream = stream_tag("init");
constexpr std::uint64_t kTaskStream = stream_tag("task");
constexpr std::uint64_t kHeadStream = stream_tag("head");
constexpr std::uint64_t kMemoryStream = stream_tag("memory");
constexpr std::uint64_t kShuffleStream = stream_tag("shuffle");
constexpr std::uint64_t kReplayStream = stream_tag("replay-batches");

struct Range {
  std::size_t offset;
  std::size_t count;
};

enum class Rehearsal { none, replay, distill };

/// Everything one training stage needs.
struct Stage {
  int number = 2;
  int task_id = 1;
  const DataSource* train = nullptr;
  const DataSource* val = nullptr;
  std::vector<Range> trainable;
  bool train_shared = true;
  LossConfig loss;
  /// Teacher outputs per training utterance (LWF-style distillation).
  const std::vector<OutputDistributions>* new_task_teacher = nullptr;
  Rehearsal rehearsal = Rehearsal::none;
  const MemoryBuffer* memory = nullptr;
  const std::vector<OutputDistributions>* memory_teacher = nullptr;
  std::uint64_t seed = 0;
};

std::vector<Range> ranges_where(const ParamStore& p, auto&& pred) {
  std::vector<Range> out;
  for (const auto& e : p.entries()) {
    if (pred(e)) out.push_back({e.offset, e.count});
  }
  return out;
}

[[noreturn]] void diverged(const RunOptions& options, const ParamStore& params,
                           const Stage& stage, int epoch, std::size_t batch,
                           double loss, double grad_norm) {
  std::string what = "non-finite training signal on task " +
                     std::to_string(stage.task_id) + ", stage " +
                     std::to_string(stage.number) + ", epoch " +
                     std::to_string(epoch) + ", batch " + std::to_string(batch);
  std::filesystem::path dump;
  if (!options.diagnostics_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.diagnostics_dir, ec);
    dump = options.diagnostics_dir /
           ("divergence_task" + std::to_string(stage.task_id) + ".json");
    nlohmann::json j = {{"task_id", stage.task_id},
                        {"stage", stage.number},
                        {"epoch", epoch},
                        {"batch", batch},
                        {"loss", std::isfinite(loss) ? nlohmann::json(loss)
                                                     : nlohmann::json(std::to_string(loss))},
                        {"grad_norm", std::isfinite(grad_norm)
                                          ? nlohmann::json(grad_norm)
                                          : nlohmann::json(std::to_string(grad_norm))},
                        {"params_checkpoint", "divergence_params.ckpt"}};
    std::ofstream(dump) << j.dump(2) << '\n';
    try {
      save_checkpoint(options.diagnostics_dir / "divergence_params.ckpt", params);
    } catch (const Error&) {
      // The parameters themselves may be non-finite; the JSON is enough.
    }
    what += " (diagnostics: " + dump.string() + ")";
  }
  throw DivergenceError(what, dump);
}

/// SGD with gradient clipping and early stopping on validation loss; returns
/// the best-epoch parameters.
ParamStore fit(const Model& model, ParamStore params, const Stage& stage,
               const TrainConfig& cfg, TaskLog& log, const RunOptions& options,
               int& best_epoch_out) {
  best_epoch_out = 0;
  if (stage.trainable.empty()) return params;

  const std::size_t n = stage.train->size();
  std::vector<double> grad(params.value_count(), 0.0);
  std::vector<double> masked(params.value_count(), 0.0);
  CounterRng replay_rng(derive_seed(stage.seed, kReplayStream));

  LossSpec new_spec = LossSpec::hybrid(stage.loss);
  new_spec.train_shared = stage.train_shared;

  std::optional<ParamStore> best;
  double best_val = INFINITY;
  int bad_epochs = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    CounterRng shuffle(derive_seed(stage.seed, kShuffleStream,
                                   static_cast<std::uint64_t>(epoch)));
    const auto order = permutation(n, shuffle);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const double share = stage.rehearsal == Rehearsal::replay ? 0.5 : 1.0;
      const double w_new = share / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        LossSpec spec = new_spec;
        if (stage.new_task_teacher != nullptr) {
          spec.teacher = &(*stage.new_task_teacher)[idx];
          spec.lambda = stage.loss.lambda;
        }
        loss += w_new * model.accumulate_gradient(params, stage.train->at(idx),
                                                  stage.task_id, spec, w_new, grad)
                            .total;
      }
      if (stage.rehearsal != Rehearsal::none) {
        const auto& items = stage.memory->items();
        const auto picks = sample_without_replacement(
            items.size(), std::min(cfg.batch_size, items.size()), replay_rng);
        const double w_mem =
            (stage.rehearsal == Rehearsal::replay ? 0.5 : 1.0) /
            static_cast<double>(picks.size());
        for (std::size_t m : picks) {
          LossSpec spec = LossSpec::hybrid(stage.loss);
          spec.train_shared = stage.train_shared;
          if (stage.rehearsal == Rehearsal::distill) {
            spec.hybrid_weight = 0.0;
            spec.lambda = stage.loss.lambda;
            spec.teacher = &(*stage.memory_teacher)[m];
          }
          loss += w_mem * model.accumulate_gradient(params, items[m].utterance,
                                                    items[m].task_id, spec,
                                                    w_mem, grad)
                              .total;
        }
      }

      // Only the trainable ranges take part in clipping and the update.
      double norm2 = 0.0;
      for (const auto& r : stage.trainable) {
        const std::span<const double> g(grad.data() + r.offset, r.count);
        norm2 += kernels::dot(g, g);
      }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(loss) || !std::isfinite(norm)) {
        diverged(options, params, stage, epoch, batches, loss, norm);
      }
      const double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
      auto flat = params.mutable_flat();
      for (const auto& r : stage.trainable) {
        kernels::axpy(-cfg.learning_rate * scale,
                      std::span<const double>(grad.data() + r.offset, r.count),
                      flat.subspan(r.offset, r.count));
      }
      epoch_loss += loss;
      ++batches;
    }

    const double val = evaluate_loss(model, params, *stage.val, stage.task_id, stage.loss);
    if (!std::isfinite(val)) diverged(options, params, stage, epoch, batches, val, 0.0);
    log.epochs.push_back({stage.number, epoch,
                          epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)),
                          val});
    if (val < best_val) {
      best_val = val;
      best = params;
      best_epoch_out = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }
  return best ? std::move(*best) : params;
}

std::vector<OutputDistributions> teacher_outputs(
    const Model& model, const ParamStore& teacher, const DataSource& data,
    int task_id) {
  std::vector<OutputDistributions> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    ForwardOut fo = model.forward(teacher, data.at(i), task_id);
    out.push_back({std::move(fo.ctc_logprobs), std::move(fo.dec_logprobs)});
  }
  return out;
}

} // namespace

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::fine_tune: return "finetune";
    case StrategyKind::separate_model: return "separate";
    case StrategyKind::freeze_shared: return "freeze";
    case StrategyKind::experience_replay: return "er";
    case StrategyKind::kd_rehearsal: return "kd";
    case StrategyKind::lwf: return "lwf";
    case StrategyKind::fta: return "fta";
    case StrategyKind::lwfa: return "lwfa";
  }
  return "?";
}

StrategyKind parse_strategy_kind(std::string_view text) {
  static const std::map<std::string_view, StrategyKind> names = {
      {"finetune", StrategyKind::fine_tune},
      {"fine_tune", StrategyKind::fine_tune},
      {"separate", StrategyKind::separate_model},
      {"separate_model", StrategyKind::separate_model},
      {"freeze", StrategyKind::freeze_shared},
      {"freeze_shared", StrategyKind::freeze_shared},
      {"er", StrategyKind::experience_replay},
      {"experience_replay", StrategyKind::experience_replay},
      {"kd", StrategyKind::kd_rehearsal},
      {"kd_rehearsal", StrategyKind::kd_rehearsal},
      {"lwf", StrategyKind::lwf},
      {"fta", StrategyKind::fta},
      {"lwfa", StrategyKind::lwfa},
  };
  const auto it = names.find(text);
  if (it == names.end()) {
    throw Error(Errc::parse, "unknown strategy '" + std::string(text) + "'");
  }
  return it->second;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw Error(Errc::configuration, "train config: " + msg);
  };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    fail("learning_rate must be positive");
  }
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
}

void StrategyConfig::validate() const {
  train.validate();
  try {
    loss.validate();
  } catch (const Error& e) {
    throw Error(Errc::configuration, e.what());
  }
  if (uses_memory() && memory < 1) {
    throw Error(Errc::configuration, "rehearsal strategies need memory >= 1");
  }
}

bool StrategyConfig::uses_memory() const {
  return kind == StrategyKind::experience_replay ||
         kind == StrategyKind::kd_rehearsal;
}

bool StrategyConfig::averages() const {
  return kind == StrategyKind::fta || kind == StrategyKind::lwfa;
}

bool StrategyConfig::distills_new_task() const {
  return kind == StrategyKind::lwf || kind == StrategyKind::lwfa;
}

std::size_t MemoryBuffer::count_for(int task_id) const {
  return static_cast<std::size_t>(std::count_if(
      items_.begin(), items_.end(),
      [&](const MemoryItem& m) { return m.task_id == task_id; }));
}

std::vector<int> MemoryBuffer::task_ids() const {
  std::vector<int> ids;
  for (const auto& m : items_) {
    if (ids.empty() || ids.back() != m.task_id) ids.push_back(m.task_id);
  }
  return ids;
}

MemoryBuffer rebalance_memory(const MemoryBuffer& buffer,
                              const DataSource& new_task_train, int t,
                              std::uint64_t seed) {
  if (t < 1) throw Error(Errc::invalid_index, "task count must be >= 1");
  const auto tasks = static_cast<std::size_t>(t);
  if (buffer.capacity() < tasks) {
    throw Error(Errc::quota_underflow,
                "memory of " + std::to_string(buffer.capacity()) +
                    " utterances cannot hold " + std::to_string(t) + " tasks");
  }
  const auto old_ids = buffer.task_ids();
  if (old_ids.size() + 1 != tasks) {
    throw Error(Errc::configuration,
                "memory holds " + std::to_string(old_ids.size()) +
                    " tasks; expected " + std::to_string(t - 1));
  }
  const std::size_t quota = buffer.capacity() / tasks;

  MemoryBuffer out(buffer.capacity());
  for (int id : old_ids) {
    std::vector<const MemoryItem*> slot;
    for (const auto& m : buffer.items_) {
      if (m.task_id == id) slot.push_back(&m);
    }
    CounterRng rng(derive_seed(seed, kMemoryStream,
                               (static_cast<std::uint64_t>(t) << 20) +
                                   static_cast<std::uint64_t>(id)));
    auto keep = sample_without_replacement(slot.size(), quota, rng);
    std::sort(keep.begin(), keep.end());
    for (auto k : keep) out.items_.push_back(*slot[k]);
  }
  CounterRng rng(derive_seed(seed, kMemoryStream,
                             (static_cast<std::uint64_t>(t) << 20)));
  auto picks = sample_without_replacement(new_task_train.size(), quota, rng);
  std::sort(picks.begin(), picks.end());
  for (auto k : picks) {
    out.items_.push_back({new_task_train.at(k), new_task_train.task_id(), k});
  }
  return out;
}

SequenceState initial_state(const Model& model, const StrategyConfig& strategy,
                            HeadMode mode, std::uint64_t seed) {
  SequenceState s;
  s.params = model.init_params(derive_seed(seed, kInitStream), mode);
  s.memory = MemoryBuffer(strategy.uses_memory() ? strategy.memory : 0);
  return s;
}

double evaluate_loss(const Model& model, const ParamStore& params,
                     const DataSource& data, int task_id,
                     const LossConfig& loss) {
  if (data.size() == 0) return 0.0;
  const LossSpec spec = LossSpec::hybrid(loss);
  double sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    sum += model.loss(params, data.at(i), task_id, spec).total;
  }
  return sum / static_cast<double>(data.size());
}

double evaluate_wer(const Model& model, const ParamStore& params,
                    const DataSource& test, int task_id) {
  std::size_t edits = 0;
  std::size_t words = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& u = test.at(i);
    const auto hyp = model.greedy_decode(params, u.features, task_id, u.features.rows);
    edits += edit_distance(hyp, u.target);
    words += u.target.size();
  }
  if (words == 0) {
    throw Error(Errc::undefined_reference, "test split has no reference tokens");
  }
  return static_cast<double>(edits) / static_cast<double>(words);
}

SequenceState train_task(SequenceState state, const Model& model,
                         const TaskSpec& task, const TaskData& data,
                         const StrategyConfig& strategy, std::uint64_t seed,
                         const RunOptions& options) {
  strategy.validate();
  const auto started = std::chrono::steady_clock::now();
  const int t = task.task_id;
  if (t != state.tasks_learned() + 1) {
    throw Error(Errc::configuration,
                "tasks must be learned in order: expected task " +
                    std::to_string(state.tasks_learned() + 1) + ", got " +
                    std::to_string(t));
  }
  if (data.train == nullptr || data.train->size() == 0) {
    throw Error(Errc::configuration, "task " + std::to_string(t) + " has no training data");
  }
  if (data.val == nullptr || data.val->size() == 0) {
    throw Error(Errc::configuration, "task " + std::to_string(t) + " has no validation split");
  }
  if (strategy.uses_memory() && t >= 2 && state.memory.empty()) {
    throw Error(Errc::configuration, "rehearsal strategy has an empty memory at task " +
                                         std::to_string(t));
  }

  const std::uint64_t task_seed =
      derive_seed(seed, kTaskStream, static_cast<std::uint64_t>(t));
  const ParamStore& previous = state.params;
  const std::uint64_t previous_checksum = previous.checksum();
  const bool own_head = task.head_mode == HeadMode::own;

  ParamStore working = previous;
  if (own_head && !working.has_task_head(t)) {
    working = model.add_task_head(working, t, derive_seed(seed, kHeadStream,
                                                          static_cast<std::uint64_t>(t)));
  }

  TaskLog log;
  log.task_id = t;
  const auto head_ranges = ranges_where(working, [t](const EntryInfo& e) {
    return !e.tag.is_shared() && e.tag.task_id() == t;
  });
  const auto all_ranges = ranges_where(working, [t](const EntryInfo& e) {
    return e.tag.is_shared() || e.tag.task_id() == t;
  });

  Stage base;
  base.task_id = t;
  base.train = data.train;
  base.val = data.val;
  base.loss = strategy.loss;

  const bool frozen = strategy.kind == StrategyKind::freeze_shared && t >= 2;
  if (frozen) {
    // Only the task's own head (if any) learns.
    Stage stage = base;
    stage.number = 2;
    stage.trainable = head_ranges;
    stage.train_shared = false;
    stage.seed = derive_seed(task_seed, stream_tag("stage"), 2);
    working = fit(model, std::move(working), stage, strategy.train, log, options,
                  log.best_epoch);
  } else {
    if (strategy.two_stage && own_head && t >= 2) {
      Stage stage = base;
      stage.number = 1;
      stage.trainable = head_ranges;
      stage.train_shared = false;
      stage.seed = derive_seed(task_seed, stream_tag("stage"), 1);
      working = fit(model, std::move(working), stage, strategy.train, log, options,
                    log.head_stage_best_epoch);
    }

    Stage stage = base;
    stage.number = 2;
    stage.trainable = all_ranges;
    stage.seed = derive_seed(task_seed, stream_tag("stage"), 2);

    // The distillation teacher is the old shared model routed through this
    // task's head as it stands now (identical to the old model when heads
    // are shared).
    std::vector<OutputDistributions> new_teacher, memory_teacher;
    const bool distill = strategy.distills_new_task() && t >= 2 &&
                         strategy.loss.lambda != 0.0;
    if (distill) {
      new_teacher = teacher_outputs(model, working, *data.train, t);
      stage.new_task_teacher = &new_teacher;
    }
    if (strategy.uses_memory() && t >= 2) {
      stage.memory = &state.memory;
      if (strategy.kind == StrategyKind::experience_replay) {
        stage.rehearsal = Rehearsal::replay;
      } else {
        stage.rehearsal = Rehearsal::distill;
        memory_teacher.reserve(state.memory.size());
        for (const auto& m : state.memory.items()) {
          ForwardOut fo = model.forward(previous, m.utterance, m.task_id);
          memory_teacher.push_back({std::move(fo.ctc_logprobs), std::move(fo.dec_logprobs)});
        }
        stage.memory_teacher = &memory_teacher;
      }
    }
    working = fit(model, std::move(working), stage, strategy.train, log, options,
                  log.best_epoch);
  }
  log.stopped_epoch = log.epochs.empty() ? 0 : log.epochs.back().epoch;

  if (previous.checksum() != previous_checksum) {
    throw Error(Errc::configuration, "previous model changed during adaptation");
  }

  ParamStore next;
  if (strategy.averages()) {
    const double eta = t == 1 ? 1.0 : eta_for_task(strategy.schedule, t);
    next = average(previous, working, eta, t);
    log.eta = eta;
  } else {
    next = working;
  }

  if (strategy.uses_memory()) {
    state.memory = rebalance_memory(state.memory, *data.train, t,
                                    derive_seed(seed, kMemoryStream));
  }
  state.adapted.push_back(std::move(working));
  state.finals.push_back(next);
  state.params = std::move(next);
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  state.logs.push_back(std::move(log));
  return state;
}

DataProvider synthesizing_provider() {
  struct Cache {
    std::mutex mu;
    std::map<std::pair<std::uint64_t, int>, std::shared_ptr<const DataSource>> sources;
  };
  auto cache = std::make_shared<Cache>();
  return [cache](const TaskSpec& spec, Split split) {
    std::lock_guard lock(cache->mu);
    auto& slot = cache->sources[{spec.seed, static_cast<int>(split)}];
    if (!slot) {
      slot = std::make_shared<DatasetSource>(
          std::make_shared<const Dataset>(synthesize(spec, split)));
    }
    return slot;
  };
}

RunResult run_sequence(const std::vector<TaskSpec>& suite, const Model& model,
                       const StrategyConfig& strategy, std::uint64_t seed,
                       const DataProvider& provider, const RunOptions& options) {
  if (suite.size() < 2) {
    throw Error(Errc::configuration, "a task sequence needs at least two tasks");
  }
  strategy.validate();
  RunResult result{WerMatrix(suite.size()),
                   initial_state(model, strategy, suite.front().head_mode, seed)};
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto& spec = suite[i];
    {
      const auto train = provider(spec, Split::train);
      const auto val = provider(spec, Split::val);
      result.state = train_task(std::move(result.state), model, spec,
                                {train.get(), val.get()}, strategy, seed, options);
    }
    const std::size_t row = i + 1;
    for (std::size_t j = 1; j <= row; ++j) {
      if (strategy.kind == StrategyKind::separate_model && j < row) {
        result.wer.set(row, j, result.wer.get(j, j));
        continue;
      }
      const auto& task_j = suite[j - 1];
      const auto test = provider(task_j, Split::test);
      const ParamStore& params = strategy.kind == StrategyKind::separate_model
                                     ? result.state.finals[j - 1]
                                     : result.state.params;
      result.wer.set(row, j, evaluate_wer(model, params, *test, task_j.task_id));
    }
  }
  return result;
}

} // namespace clforge
