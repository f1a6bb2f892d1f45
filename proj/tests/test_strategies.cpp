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


#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <map>
#include <memory>
#include <set>

#include "clforge/error.hpp"
#include "clforge/strategies.hpp"
#include "oracles.hpp"

namespace clforge {
namespace {

SuiteConfig small_suite(SuiteKind kind, int tasks = 3) {
  SuiteConfig c;
  c.kind = kind;
  c.tasks = tasks;
  c.n_train_first = 120;
  c.n_train = 60;
  c.n_val = 20;
  c.n_test = 30;
  return c;
}

Model small_model(const SuiteConfig& sc) {
  auto mc = ModelConfig::for_vocab(sc.vocab);
  mc.input_dim = sc.feature_dim;
  mc.hidden = 12;
  return Model(mc);
}

StrategyConfig quick(StrategyKind kind) {
  StrategyConfig s;
  s.kind = kind;
  s.train.max_epochs = 3;
  s.train.batch_size = 8;
  if (s.uses_memory()) s.memory = 30;
  return s;
}

std::shared_ptr<const DataSource> source_of(const TaskSpec& spec, Split split) {
  return std::make_shared<DatasetSource>(std::make_shared<const Dataset>(synthesize(spec, split)));
}

bool shared_equal(const ParamStore& a, const ParamStore& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& e = a.entry(i);
    if (!e.tag.is_shared()) continue;
    const auto x = a.values(i);
    const auto y = b.values(e.name);
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end(),
                    [](double p, double q) { return std::bit_cast<std::uint64_t>(p) ==
                                                    std::bit_cast<std::uint64_t>(q); }))
      return false;
  }
  return true;
}

TEST(StrategyKind, NamesRoundTrip) {
  for (auto k : {StrategyKind::fine_tune, StrategyKind::separate_model, StrategyKind::freeze_shared,
                 StrategyKind::experience_replay, StrategyKind::kd_rehearsal, StrategyKind::lwf,
                 StrategyKind::fta, StrategyKind::lwfa}) {
    EXPECT_EQ(parse_strategy_kind(to_string(k)), k);
  }
  EXPECT_EQ(parse_strategy_kind("experience_replay"), StrategyKind::experience_replay);
  EXPECT_THROW(parse_strategy_kind("ewc"), Error);
}

TEST(StrategyConfig, Validation) {
  auto s = quick(StrategyKind::experience_replay);
  s.memory = 0;
  EXPECT_THROW(s.validate(), Error);
  s = quick(StrategyKind::fine_tune);
  s.train.learning_rate = 0.0;
  EXPECT_THROW(s.validate(), Error);
  s = quick(StrategyKind::lwf);
  s.loss.alpha = 2.0;
  EXPECT_THROW(s.validate(), Error);
  s = quick(StrategyKind::lwfa);
  s.loss.lambda = 0.0; // allowed: reduces to FTA
  EXPECT_NO_THROW(s.validate());
  EXPECT_TRUE(s.averages());
  EXPECT_TRUE(s.distills_new_task());
  EXPECT_FALSE(s.uses_memory());
}

class MemoryTest : public ::testing::Test {
 protected:
  void SetUp() override {
    auto sc = small_suite(SuiteKind::dialect_continuum, 4);
    sc.n_train_first = 600;
    sc.n_train = 600;
    suite_ = gen_task_suite(sc);
    for (const auto& t : suite_) train_.push_back(source_of(t, Split::train));
  }
  std::vector<TaskSpec> suite_;
  std::vector<std::shared_ptr<const DataSource>> train_;
};

TEST_F(MemoryTest, QuotasFollowFloorDivision) {
  MemoryBuffer m(500);
  const std::size_t expect[] = {500, 250, 166, 125};
  for (int t = 1; t <= 4; ++t) {
    const MemoryBuffer before = m;
    m = rebalance_memory(m, *train_[t - 1], t, 7);
    EXPECT_LE(m.size(), 500u);
    EXPECT_EQ(m.task_ids().size(), static_cast<std::size_t>(t));
    for (int j = 1; j <= t; ++j) {
      EXPECT_EQ(m.count_for(j), expect[t - 1]) << "t=" << t << " task " << j;
    }
    // Items come from the right split, and old slots only shrink.
    std::set<std::pair<int, std::size_t>> old;
    for (const auto& it : before.items()) old.insert({it.task_id, it.source_index});
    for (const auto& it : m.items()) {
      ASSERT_LE(it.task_id, t);
      EXPECT_EQ(it.utterance, train_[it.task_id - 1]->at(it.source_index));
      if (it.task_id < t) {
        EXPECT_TRUE(old.count({it.task_id, it.source_index}));
      }
    }
  }
  EXPECT_EQ(m.size(), 500u);
}

TEST_F(MemoryTest, DeterministicAndDistinct) {
  const auto a = rebalance_memory(MemoryBuffer(50), *train_[0], 1, 3);
  const auto b = rebalance_memory(MemoryBuffer(50), *train_[0], 1, 3);
  const auto c = rebalance_memory(MemoryBuffer(50), *train_[0], 1, 4);
  std::vector<std::size_t> ia, ib, ic;
  for (const auto& it : a.items()) ia.push_back(it.source_index);
  for (const auto& it : b.items()) ib.push_back(it.source_index);
  for (const auto& it : c.items()) ic.push_back(it.source_index);
  EXPECT_EQ(ia, ib);
  EXPECT_NE(ia, ic);
  EXPECT_EQ(std::set<std::size_t>(ia.begin(), ia.end()).size(), ia.size());
}

TEST_F(MemoryTest, SmallSplitContributesEverything) {
  auto sc = small_suite(SuiteKind::dialect_continuum, 2);
  sc.n_train_first = 5;
  const auto tiny = source_of(gen_task_suite(sc)[0], Split::train);
  const auto m = rebalance_memory(MemoryBuffer(100), *tiny, 1, 1);
  EXPECT_EQ(m.count_for(1), 5u);
}

TEST_F(MemoryTest, Errors) {
  try {
    rebalance_memory(MemoryBuffer(2), *train_[0], 3, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::quota_underflow);
  }
  const auto one = rebalance_memory(MemoryBuffer(10), *train_[0], 1, 1);
  EXPECT_THROW(rebalance_memory(one, *train_[1], 3, 1), Error);
  EXPECT_THROW(rebalance_memory(one, *train_[1], 0, 1), Error);
}

// Counts reads per task through a wrapper around every split.
class LoggingSource : public DataSource {
 public:
  LoggingSource(std::shared_ptr<const DataSource> inner, std::map<int, long>* log)
      : inner_(std::move(inner)), log_(log) {}
  int task_id() const override { return inner_->task_id(); }
  std::size_t size() const override { return inner_->size(); }
  const Utterance& at(std::size_t i) const override {
    ++(*log_)[inner_->task_id()];
    return inner_->at(i);
  }

 private:
  std::shared_ptr<const DataSource> inner_;
  std::map<int, long>* log_;
};

class TrainingIsolation : public ::testing::TestWithParam<StrategyKind> {};

TEST_P(TrainingIsolation, TrainingReadsOnlyTheCurrentTask) {
  const auto kind = GetParam();
  const auto sc = small_suite(kind == StrategyKind::lwfa ? SuiteKind::language_family
                                                         : SuiteKind::dialect_continuum);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  const auto strategy = quick(kind);
  std::map<int, long> reads;
  std::vector<std::shared_ptr<DataSource>> train, val;
  for (const auto& t : suite) {
    train.push_back(std::make_shared<LoggingSource>(source_of(t, Split::train), &reads));
    val.push_back(std::make_shared<LoggingSource>(source_of(t, Split::val), &reads));
  }
  auto state = initial_state(model, strategy, suite[0].head_mode, 5);
  for (std::size_t i = 0; i < suite.size(); ++i) {
    reads.clear();
    state = train_task(std::move(state), model, suite[i], {train[i].get(), val[i].get()},
                       strategy, 5);
    const int t = static_cast<int>(i + 1);
    for (const auto& [task, n] : reads) EXPECT_EQ(task, t) << n << " reads";
    EXPECT_GT(reads[t], 0);
    for (int id : state.memory.task_ids()) EXPECT_LE(id, t);
    if (strategy.uses_memory()) {
      EXPECT_EQ(state.memory.count_for(t), strategy.memory / t);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, TrainingIsolation,
                         ::testing::Values(StrategyKind::fine_tune, StrategyKind::experience_replay,
                                           StrategyKind::kd_rehearsal, StrategyKind::lwf,
                                           StrategyKind::lwfa));

TEST(TrainTask, TeacherIsNotModified) {
  const auto sc = small_suite(SuiteKind::language_family);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  const auto strategy = quick(StrategyKind::lwfa);
  auto provider = synthesizing_provider();
  auto state = initial_state(model, strategy, HeadMode::own, 9);
  for (const auto& spec : suite) {
    const ParamStore before = state.params;
    const auto sum = before.checksum();
    const auto train = provider(spec, Split::train);
    const auto val = provider(spec, Split::val);
    auto next = train_task(state, model, spec, {train.get(), val.get()}, strategy, 9);
    EXPECT_EQ(state.params.checksum(), sum);
    EXPECT_TRUE(state.params.bitwise_equal(before));
    EXPECT_FALSE(next.params.bitwise_equal(before));
    EXPECT_TRUE(next.params.has_task_head(spec.task_id));
    state = std::move(next);
  }
  for (int t = 1; t <= 3; ++t) EXPECT_TRUE(state.params.has_task_head(t));
}

TEST(TrainTask, PreconditionErrors) {
  const auto sc = small_suite(SuiteKind::dialect_continuum);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  auto provider = synthesizing_provider();
  const auto train = provider(suite[0], Split::train);
  const auto val = provider(suite[0], Split::val);
  auto code = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io;
  };
  const auto ft = quick(StrategyKind::fine_tune);
  auto fresh = initial_state(model, ft, HeadMode::shared, 1);
  EXPECT_EQ(code([&] { train_task(fresh, model, suite[1], {train.get(), val.get()}, ft, 1); }),
            Errc::configuration);
  EXPECT_EQ(code([&] { train_task(fresh, model, suite[0], {train.get(), nullptr}, ft, 1); }),
            Errc::configuration);

  // A rehearsal run whose memory is empty at task 2.
  auto er = quick(StrategyKind::experience_replay);
  auto after_one = train_task(fresh, model, suite[0], {train.get(), val.get()}, ft, 1);
  after_one.memory = MemoryBuffer(er.memory);
  const auto train2 = provider(suite[1], Split::train);
  const auto val2 = provider(suite[1], Split::val);
  EXPECT_EQ(code([&] { train_task(after_one, model, suite[1], {train2.get(), val2.get()}, er, 1); }),
            Errc::configuration);
  EXPECT_EQ(code([&] { run_sequence({suite[0]}, model, ft, 1); }), Errc::configuration);
}

TEST(TrainTask, DivergenceDumpsDiagnostics) {
  const auto sc = small_suite(SuiteKind::dialect_continuum);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  auto s = quick(StrategyKind::fine_tune);
  s.train.learning_rate = 1e300;
  oracle::TempDir dir("diverge");
  try {
    run_sequence(suite, model, s, 1, synthesizing_provider(), {dir.path()});
    FAIL() << "no divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.code(), Errc::non_finite);
    EXPECT_TRUE(std::filesystem::exists(e.dump_path())) << e.dump_path();
  }
}

TEST(TrainTask, LogsRecordStagesAndEta) {
  const auto sc = small_suite(SuiteKind::language_family);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  const auto r = run_sequence(suite, model, quick(StrategyKind::fta), 2);
  ASSERT_EQ(r.state.logs.size(), 3u);
  EXPECT_EQ(r.state.logs[0].head_stage_best_epoch, 0);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto& log = r.state.logs[t];
    EXPECT_EQ(log.task_id, static_cast<int>(t + 1));
    ASSERT_TRUE(log.eta.has_value());
    EXPECT_DOUBLE_EQ(*log.eta, 1.0 / static_cast<double>(t + 1));
    EXPECT_GE(log.best_epoch, 1);
    EXPECT_LE(log.best_epoch, log.stopped_epoch);
    bool stage1 = false;
    for (const auto& e : log.epochs) {
      stage1 = stage1 || e.stage == 1;
      EXPECT_TRUE(std::isfinite(e.train_loss));
      EXPECT_TRUE(std::isfinite(e.val_loss));
    }
    EXPECT_EQ(stage1, t > 0);
    if (t > 0) {
      EXPECT_GE(log.head_stage_best_epoch, 1);
    }
  }
}

TEST(RunSequence, LowerTriangularAndDeterministic) {
  const auto sc = small_suite(SuiteKind::dialect_continuum);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  const auto a = run_sequence(suite, model, quick(StrategyKind::experience_replay), 3);
  const auto b = run_sequence(suite, model, quick(StrategyKind::experience_replay), 3);
  for (std::size_t i = 1; i <= 3; ++i) {
    for (std::size_t j = 1; j <= 3; ++j) EXPECT_EQ(a.wer.at(i, j).has_value(), j <= i);
  }
  EXPECT_EQ(a.wer, b.wer);
  EXPECT_TRUE(a.state.params.bitwise_equal(b.state.params));
}

TEST(RunSequence, SeparateModelKeepsOldRows) {
  const auto sc = small_suite(SuiteKind::dialect_continuum);
  const Model model = small_model(sc);
  const auto r = run_sequence(gen_task_suite(sc), model, quick(StrategyKind::separate_model), 4);
  for (std::size_t i = 1; i <= 3; ++i)
    for (std::size_t j = 1; j <= i; ++j) EXPECT_EQ(r.wer.get(i, j), r.wer.get(j, j));
  EXPECT_EQ(bwt(r.wer), 0.0);
}

TEST(Identities, FtaWithEtaOneIsFineTuning) {
  const auto sc = small_suite(SuiteKind::dialect_continuum);
  const auto suite = gen_task_suite(sc);
  const Model model = small_model(sc);
  auto fta = quick(StrategyKind::fta);
  fta.schedule = AveragingSchedule::constant(1.0);
  const auto a = run_sequence(suite, model, quick(StrategyKind::fine_tune), 6);
  const auto b = run_sequence(suite, model, fta, 6);
  EXPECT_EQ(a.wer, b.wer);
  EXPECT_TRUE(a.state.params.bitwise_equal(b.state.params));
}

TEST(Identities, LwfaWithoutDistillationIsFta) {
  for (auto kind : {SuiteKind::dialect_continuum, SuiteKind::language_family}) {
    const auto sc = small_suite(kind);
    const auto suite = gen_task_suite(sc);
    const Model model = small_model(sc);
    auto lwfa = quick(StrategyKind::lwfa);
    lwfa.loss.lambda = 0.0;
    const auto a = run_sequence(suite, model, quick(StrategyKind::fta), 7);
    const auto b = run_sequence(suite, model, lwfa, 7);
    EXPECT_EQ(a.wer, b.wer);
    for (std::size_t t = 0; t < 3; ++t) {
      EXPECT_TRUE(a.state.adapted[t].bitwise_equal(b.state.adapted[t]));
      EXPECT_TRUE(a.state.finals[t].bitwise_equal(b.state.finals[t]));
      ASSERT_EQ(a.state.logs[t].epochs.size(), b.state.logs[t].epochs.size());
      for (std::size_t e = 0; e < a.state.logs[t].epochs.size(); ++e)
        EXPECT_EQ(a.state.logs[t].epochs[e].train_loss, b.state.logs[t].epochs[e].train_loss);
    }
  }
}

TEST(Identities, FreezeSharedKeepsTheEncoder) {
  for (auto kind : {SuiteKind::dialect_continuum, SuiteKind::language_family}) {
    const auto sc = small_suite(kind);
    const Model model = small_model(sc);
    const auto r = run_sequence(gen_task_suite(sc), model, quick(StrategyKind::freeze_shared), 8);
    for (std::size_t t = 1; t < 3; ++t) EXPECT_TRUE(shared_equal(r.state.finals[0], r.state.finals[t]));
    if (kind == SuiteKind::language_family) {
      // Heads of later tasks still learn.
      EXPECT_FALSE(r.state.finals[2].bitwise_equal(r.state.finals[1]));
    }
  }
}

TEST(Averaging, HarmonicEndToEndIsUniformMean) {
  for (auto kind : {StrategyKind::fta, StrategyKind::lwfa}) {
    auto sc = small_suite(SuiteKind::language_family, 4);
    const Model model = small_model(sc);
    const auto r = run_sequence(gen_task_suite(sc), model, quick(kind), 10);
    const auto& final = r.state.params;
    for (std::size_t i = 0; i < final.size(); ++i) {
      const auto& e = final.entry(i);
      if (!e.tag.is_shared()) continue;
      const auto v = final.values(i);
      for (std::size_t k = 0; k < v.size(); ++k) {
        double mean = 0.0;
        for (const auto& a : r.state.adapted) mean += a.values(e.name)[k];
        mean /= static_cast<double>(r.state.adapted.size());
        EXPECT_NEAR(v[k], mean, 1e-9);
      }
    }
  }
}

TEST(Averaging, HeadsOfPastTasksAreCarriedOver) {
  const auto sc = small_suite(SuiteKind::language_family);
  const Model model = small_model(sc);
  const auto r = run_sequence(gen_task_suite(sc), model, quick(StrategyKind::lwfa), 11);
  for (std::size_t i = 0; i < r.state.params.size(); ++i) {
    const auto& e = r.state.params.entry(i);
    if (e.tag.is_shared()) continue;
    const auto& src = r.state.adapted[static_cast<std::size_t>(e.tag.task_id()) - 1];
    const auto x = r.state.params.values(i);
    const auto y = src.values(e.name);
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << e.name;
  }
}

} // namespace
} // namespace clforge
