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

#include <bit>
#include <cmath>
#include <vector>

#include "clforge/kernels.hpp"
#include "clforge/rng.hpp"

namespace clforge {
namespace {

using kernels::Isa;

std::vector<double> random_vector(std::size_t n, CounterRng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-3.0, 3.0);
  return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i]))
      return false;
  }
  return true;
}


TEST(Kernels, ScalarDotMatchesNaiveSum) {
  CounterRng rng(1);
  for (std::size_t n : {0u, 1u, 7u, 64u}) {
    auto a = random_vector(n, rng);
    auto b = random_vector(n, rng);
    double expect = 0.0;
    for (std::size_t i = 0; i < n; ++i) expect += a[i] * b[i];
    EXPECT_EQ(kernels::scalar::dot(a.data(), b.data(), n), expect);
  }
}

TEST(Kernels, ScalarBlendEndpoints) {
  CounterRng rng(2);
  auto a = random_vector(33, rng);
  auto b = random_vector(33, rng);
  std::vector<double> out(33);
  kernels::scalar::blend(a.data(), b.data(), 0.0, out.data(), 33);
  EXPECT_TRUE(bitwise_equal(out, a));
  kernels::scalar::blend(a.data(), b.data(), 1.0, out.data(), 33);
  for (std::size_t i = 0; i < 33; ++i) EXPECT_NEAR(out[i], b[i], 1e-15 * (1.0 + std::abs(a[i])));
}

TEST(Kernels, BlendStaysBetweenOperands) {
  CounterRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_vector(17, rng);
    auto b = random_vector(17, rng);
    const double eta = rng.uniform();
    std::vector<double> out(17);
    kernels::scalar::blend(a.data(), b.data(), eta, out.data(), 17);
    for (std::size_t i = 0; i < 17; ++i) {
      EXPECT_GE(out[i], std::min(a[i], b[i]));
      EXPECT_LE(out[i], std::max(a[i], b[i]));
    }
  }
}

#if defined(CLFORGE_HAVE_AVX2)

class Avx2Equivalence : public ::testing::Test {
 protected:
  void SetUp() override {
    if (!kernels::cpu_supports(Isa::avx2)) GTEST_SKIP() << "no AVX2 on this CPU";
  }
};

TEST_F(Avx2Equivalence, DotAgreesWithinRounding) {
  CounterRng rng(4);
  for (std::size_t n = 0; n <= 70; ++n) {
    for (std::size_t offset : {0u, 1u, 3u}) {
      auto a = random_vector(n + offset, rng);
      auto b = random_vector(n + offset, rng);
      const double s = kernels::scalar::dot(a.data() + offset, b.data() + offset, n);
      const double v = kernels::avx2::dot(a.data() + offset, b.data() + offset, n);
      double mag = 0.0;
      for (std::size_t i = offset; i < n + offset; ++i) mag += std::abs(a[i] * b[i]);
      EXPECT_LE(std::abs(s - v), 1e-14 * (mag + 1.0)) << "n=" << n;
    }
  }
}

TEST_F(Avx2Equivalence, AxpyIsBitwiseIdentical) {
  CounterRng rng(5);
  for (std::size_t n = 0; n <= 70; ++n) {
    for (std::size_t offset : {0u, 1u, 2u}) {
      auto x = random_vector(n + offset, rng);
      auto y = random_vector(n + offset, rng);
      auto y2 = y;
      const double alpha = rng.uniform(-2.0, 2.0);
      kernels::scalar::axpy(alpha, x.data() + offset, y.data() + offset, n);
      kernels::avx2::axpy(alpha, x.data() + offset, y2.data() + offset, n);
      EXPECT_TRUE(bitwise_equal(y, y2)) << "n=" << n;
    }
  }
}

TEST_F(Avx2Equivalence, BlendIsBitwiseIdentical) {
  CounterRng rng(6);
  for (std::size_t n = 0; n <= 70; ++n) {
    auto a = random_vector(n, rng);
    auto b = random_vector(n, rng);
    // Ties and signed zeros exercise the min/max operand choice.
    if (n > 2) {
      b[0] = a[0];
      a[1] = 0.0;
      b[1] = -0.0;
    }
    for (double eta : {0.0, 0.5, 1.0, 1.0 / 3.0, rng.uniform()}) {
      std::vector<double> s(n), v(n);
      kernels::scalar::blend(a.data(), b.data(), eta, s.data(), n);
      kernels::avx2::blend(a.data(), b.data(), eta, v.data(), n);
      EXPECT_TRUE(bitwise_equal(s, v)) << "n=" << n << " eta=" << eta;
    }
  }
}

TEST_F(Avx2Equivalence, DispatchSelectsRequestedTable) {
  const Isa saved = kernels::active_isa();
  kernels::set_isa(Isa::scalar);
  EXPECT_EQ(kernels::active().dot, kernels::table_for(Isa::scalar).dot);
  kernels::set_isa(Isa::avx2);
  EXPECT_EQ(kernels::active().dot, kernels::table_for(Isa::avx2).dot);
  EXPECT_EQ(kernels::active_isa(), Isa::avx2);
  kernels::set_isa(saved);
}

#endif

TEST(Kernels, AffineMatchesLoops) {
  CounterRng rng(7);
  const std::size_t out = 5, in = 7;
  auto w = random_vector(out * in, rng);
  auto b = random_vector(out, rng);
  auto x = random_vector(in, rng);
  std::vector<double> y(out);
  kernels::affine(w, b, x, y);
  for (std::size_t o = 0; o < out; ++o) {
    double e = b[o];
    for (std::size_t i = 0; i < in; ++i) e += w[o * in + i] * x[i];
    EXPECT_NEAR(y[o], e, 1e-12);
  }

  auto dy = random_vector(out, rng);
  std::vector<double> dx(in, 0.0), dw(out * in, 0.0), db(out, 0.0);
  kernels::affine_backward_input(w, dy, dx);
  kernels::affine_backward_params(dy, x, dw, db);
  for (std::size_t i = 0; i < in; ++i) {
    double e = 0.0;
    for (std::size_t o = 0; o < out; ++o) e += w[o * in + i] * dy[o];
    EXPECT_NEAR(dx[i], e, 1e-12);
  }
  for (std::size_t o = 0; o < out; ++o) {
    EXPECT_EQ(db[o], dy[o]);
    for (std::size_t i = 0; i < in; ++i) EXPECT_NEAR(dw[o * in + i], dy[o] * x[i], 1e-15);
  }
}

TEST(Kernels, IsaNames) {
  EXPECT_EQ(kernels::to_string(Isa::scalar), "scalar");
  EXPECT_EQ(kernels::to_string(Isa::avx2), "avx2");
  EXPECT_TRUE(kernels::cpu_supports(Isa::scalar));
}

} // namespace
} // namespace clforge
