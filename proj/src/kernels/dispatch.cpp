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

#include <atomic>
#include <cstdlib>
#include <string>

#include "clforge/error.hpp"
#include "clforge/kernels.hpp"

namespace clforge::kernels {
namespace {

constexpr Table kScalar{Isa::scalar, &scalar::dot, &scalar::axpy,
                        &scalar::blend};
#if defined(CLFORGE_HAVE_AVX2)
constexpr Table kAvx2{Isa::avx2, &avx2::dot, &avx2::axpy, &avx2::blend};
#endif

const Table* initial_table() {
  if (const char* env = std::getenv("CLFORGE_SIMD")) {
    const std::string want(env);
    if (want == "scalar") return &kScalar;
#if defined(CLFORGE_HAVE_AVX2)
    if (want == "avx2" && cpu_supports(Isa::avx2)) return &kAvx2;
#endif
  }
#if defined(CLFORGE_HAVE_AVX2)
  if (cpu_supports(Isa::avx2)) return &kAvx2;
#endif
  return &kScalar;
}

std::atomic<const Table*>& current() {
  static std::atomic<const Table*> t{initial_table()};
  return t;
}

} // namespace

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(CLFORGE_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const Table& table_for(Isa isa) {
  if (!cpu_supports(isa)) {
    throw Error(Errc::configuration,
                "kernel ISA not available: " + std::string(to_string(isa)));
  }
#if defined(CLFORGE_HAVE_AVX2)
  if (isa == Isa::avx2) return kAvx2;
#endif
  return kScalar;
}

const Table& active() { return *current().load(std::memory_order_relaxed); }

Isa active_isa() { return active().isa; }

void set_isa(Isa isa) { current().store(&table_for(isa)); }

std::string_view to_string(Isa isa) {
  return isa == Isa::avx2 ? "avx2" : "scalar";
}

void affine(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y) {
  const Table& t = active();
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < y.size(); ++r) {
    y[r] = b[r] + t.dot(w.data() + r * cols, x.data(), cols);
  }
}

void affine_backward_input(std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx) {
  const Table& t = active();
  const std::size_t cols = dx.size();
  for (std::size_t r = 0; r < dy.size(); ++r) {
    if (dy[r] != 0.0) t.axpy(dy[r], w.data() + r * cols, dx.data(), cols);
  }
}

void affine_backward_params(std::span<const double> dy,
                            std::span<const double> x, std::span<double> dw,
                            std::span<double> db) {
  const Table& t = active();
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < dy.size(); ++r) {
    if (dy[r] == 0.0) continue;
    t.axpy(dy[r], x.data(), dw.data() + r * cols, cols);
    db[r] += dy[r];
  }
}

} // namespace clforge::kernels
