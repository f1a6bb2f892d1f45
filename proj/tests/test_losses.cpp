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

#include <cmath>
#include <vector>

#include "clforge/error.hpp"
#include "clforge/losses.hpp"
#include "clforge/rng.hpp"
#include "oracles.hpp"

namespace clforge {
namespace {

Matrix log_of(std::initializer_list<std::initializer_list<double>> probs) {
  Matrix m(probs.size(), probs.begin()->size());
  std::size_t r = 0;
  for (const auto& row : probs) {
    std::size_t c = 0;
    for (double p : row) m(r, c++) = std::log(p);
    ++r;
  }
  return m;
}

TEST(Ctc, SingleFrameSinglePath) {
  const auto lp = log_of({{0.2, 0.5, 0.3}});
  const std::vector<int> target{1};
  EXPECT_NEAR(ctc_loss(lp, target, 2).value, -std::log(0.5), 1e-12);
}

TEST(Ctc, TwoFramesOneToken) {
  const auto lp = log_of({{0.6, 0.4}, {0.3, 0.7}}); // columns: a, blank
  const double p = 0.6 * 0.3 + 0.6 * 0.7 + 0.4 * 0.3;
  const std::vector<int> target{0};
  EXPECT_NEAR(ctc_loss(lp, target, 1).value, -std::log(p), 1e-12);
}

TEST(Ctc, MatchesEnumerationOnRandomInstances) {
  CounterRng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t V = 1 + rng.below(3);
    const std::size_t W = 1 + rng.below(3);
    std::vector<int> target;
    for (std::size_t i = 0; i < W; ++i) target.push_back(static_cast<int>(rng.below(V)));
    const std::size_t L = ctc_min_frames(target) + rng.below(3);
    if (L > 6) continue;
    const auto lp = oracle::random_logprobs(L, V + 1, rng);
    const double ref = oracle::ctc_by_enumeration(lp, target);
    const double got = ctc_loss(lp, target, V).value;
    EXPECT_LE(std::abs(got - ref), 1e-9 * std::abs(ref)) << "trial " << trial;
  }
}

TEST(Ctc, GradientMatchesFiniteDifferencesOfOracle) {
  CounterRng rng(22);
  const std::vector<int> target{0, 2, 2};
  const auto lp = oracle::random_logprobs(6, 4, rng);
  const auto l = ctc_loss(lp, target, 3);
  Matrix x = lp;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double numeric = oracle::central_difference(
        x.data, i, 1e-6, [&] { return oracle::ctc_by_enumeration(x, target); });
    EXPECT_NEAR(l.grad.data[i], numeric, 1e-6);
  }
}

TEST(Ctc, RaisingAnAlignmentLowersTheLoss) {
  CounterRng rng(23);
  const std::vector<int> target{1, 0};
  // Admissible alignment of length 5: 1 1 _ 0 _
  const std::vector<int> path{1, 1, 2, 0, 2};
  for (int trial = 0; trial < 20; ++trial) {
    auto lp = oracle::random_logprobs(5, 3, rng);
    const double before = ctc_loss(lp, target, 2).value;
    for (std::size_t t = 0; t < path.size(); ++t) lp(t, path[t]) += 0.1;
    EXPECT_LT(ctc_loss(lp, target, 2).value, before);
  }
}

TEST(Ctc, MinFramesCountsRepeats) {
  EXPECT_EQ(ctc_min_frames(std::vector<int>{1, 2, 3}), 3u);
  EXPECT_EQ(ctc_min_frames(std::vector<int>{1, 1, 1}), 5u);
  EXPECT_EQ(ctc_min_frames(std::vector<int>{1, 2, 2}), 4u);
}

TEST(Ctc, Errors) {
  CounterRng rng(24);
  const auto lp = oracle::random_logprobs(2, 3, rng);
  auto code = [&](std::vector<int> target) {
    try {
      ctc_loss(lp, target, 2);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io;
  };
  EXPECT_EQ(code({0, 0}), Errc::infeasible_alignment);
  EXPECT_EQ(code({0, 1, 0}), Errc::infeasible_alignment);
  EXPECT_EQ(code({}), Errc::structural_mismatch);
  EXPECT_EQ(code({2}), Errc::structural_mismatch);
}

TEST(Ce, PerfectPredictionIsZero) {
  Matrix lp(3, 4, -INFINITY);
  lp(0, 2) = 0.0;
  lp(1, 0) = 0.0;
  lp(2, 3) = 0.0; // eos
  EXPECT_EQ(ce_loss(lp, std::vector<int>{2, 0}, 3).value, 0.0);
}

TEST(Ce, UniformRowsGiveLogClasses) {
  const std::size_t V = 5;
  Matrix lp(4, V + 2, -std::log(static_cast<double>(V + 2)));
  EXPECT_NEAR(ce_loss(lp, std::vector<int>{1, 2, 3}, V + 1).value,
              std::log(static_cast<double>(V + 2)), 1e-12);
}

TEST(Ce, MatchesDirectSummationAndGradient) {
  CounterRng rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t W = 1 + rng.below(5);
    std::vector<int> target;
    for (std::size_t i = 0; i < W; ++i) target.push_back(static_cast<int>(rng.below(4)));
    const auto lp = oracle::random_logprobs(W + 1, 6, rng);
    double sum = 0.0;
    for (std::size_t i = 0; i < W; ++i) sum -= lp(i, target[i]);
    sum -= lp(W, 5);
    const auto l = ce_loss(lp, target, 5);
    EXPECT_NEAR(l.value, sum / static_cast<double>(W + 1), 1e-12);
    for (std::size_t r = 0; r <= W; ++r) {
      const std::size_t ref = r < W ? static_cast<std::size_t>(target[r]) : 5;
      for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_EQ(l.grad(r, c), c == ref ? -1.0 / static_cast<double>(W + 1) : 0.0);
      }
    }
  }
}

TEST(Ce, LengthMismatchIsStructural) {
  Matrix lp(2, 4, -std::log(4.0));
  try {
    ce_loss(lp, std::vector<int>{0, 1}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::structural_mismatch);
  }
}

TEST(Hybrid, Arithmetic) {
  EXPECT_DOUBLE_EQ(hybrid_loss(2.0, 1.0, 0.3), 1.3);
  EXPECT_EQ(hybrid_loss(2.0, 1.0, 1.0), 2.0);
  EXPECT_EQ(hybrid_loss(2.0, 1.0, 0.0), 1.0);
  EXPECT_EQ(total_loss(1.5, 0.5, 0.0), 1.5);
  EXPECT_EQ(total_loss(1.5, 0.5, 1.0), 2.0);
  EXPECT_EQ(total_loss(0.0, 0.25, 2.0), 0.5);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 1.2;
  EXPECT_THROW(c.validate(), Error);
  c.alpha = 0.3;
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

OutputDistributions random_outputs(std::size_t L, std::size_t W, std::size_t V,
                                   CounterRng& rng) {
  return {oracle::random_logprobs(L, V + 1, rng),
          oracle::random_logprobs(W + 1, V + 2, rng)};
}

double entropy_sum(const Matrix& lp) {
  double h = 0.0;
  for (double v : lp.data) h -= std::exp(v) * v;
  return h;
}

TEST(Kd, HandExample) {
  OutputDistributions teacher{log_of({{0.5, 0.5}}), log_of({{1.0, 1e-300}})};
  OutputDistributions student{log_of({{0.25, 0.75}}), teacher.dec_logprobs};
  const double expect = -(0.5 * std::log(0.25) + 0.5 * std::log(0.75));
  EXPECT_NEAR(kd_loss(teacher, student, 1.0).value, expect, 1e-12);
  EXPECT_NEAR(expect, 0.83699, 5e-6);
}

TEST(Kd, SelfDistillationEqualsEntropyAndIsMinimal) {
  CounterRng rng(26);
  for (int trial = 0; trial < 20; ++trial) {
    const auto t = random_outputs(5, 3, 4, rng);
    const double alpha = rng.uniform();
    const double self = kd_loss(t, t, alpha).value;
    EXPECT_NEAR(self,
                alpha * entropy_sum(t.ctc_logprobs) +
                    (1 - alpha) * entropy_sum(t.dec_logprobs),
                1e-12);
    for (int k = 0; k < 10; ++k) {
      auto s = random_outputs(5, 3, 4, rng);
      EXPECT_GE(kd_loss(t, s, alpha).value, self - 1e-12);
    }
  }
}

TEST(Kd, GradientIsNegatedTeacherProbabilities) {
  CounterRng rng(27);
  const auto t = random_outputs(4, 2, 3, rng);
  const auto s = random_outputs(4, 2, 3, rng);
  const auto sum = kd_loss(t, s, 0.3);
  const auto mean = kd_loss(t, s, 0.3, true);
  for (std::size_t i = 0; i < t.ctc_logprobs.data.size(); ++i) {
    const double p = std::exp(t.ctc_logprobs.data[i]);
    EXPECT_NEAR(sum.ctc_grad.data[i], -0.3 * p, 1e-15);
    EXPECT_NEAR(mean.ctc_grad.data[i], -0.3 * p / 4.0, 1e-15);
  }
  for (std::size_t i = 0; i < t.dec_logprobs.data.size(); ++i) {
    const double p = std::exp(t.dec_logprobs.data[i]);
    EXPECT_NEAR(sum.dec_grad.data[i], -0.7 * p, 1e-15);
    EXPECT_NEAR(mean.dec_grad.data[i], -0.7 * p / 3.0, 1e-15);
  }
  double ctc = 0.0, dec = 0.0;
  for (std::size_t i = 0; i < t.ctc_logprobs.data.size(); ++i)
    ctc -= std::exp(t.ctc_logprobs.data[i]) * s.ctc_logprobs.data[i];
  for (std::size_t i = 0; i < t.dec_logprobs.data.size(); ++i)
    dec -= std::exp(t.dec_logprobs.data[i]) * s.dec_logprobs.data[i];
  EXPECT_NEAR(sum.value, 0.3 * ctc + 0.7 * dec, 1e-12);
  EXPECT_NEAR(mean.value, 0.3 * ctc / 4.0 + 0.7 * dec / 3.0, 1e-12);
}

TEST(Kd, ShapeMismatchIsStructural) {
  CounterRng rng(28);
  const auto t = random_outputs(4, 2, 3, rng);
  const auto s = random_outputs(5, 2, 3, rng);
  try {
    kd_loss(t, s, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::structural_mismatch);
  }
}

} // namespace
} // namespace clforge
