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

// Inner-loop arithmetic. Every kernel has a portable scalar reference in
// kernels::scalar and, on x86-64 builds, an AVX2 variant in kernels::avx2.
// The variant used by the free functions at the bottom of this header is
// chosen once at startup from CPUID and can be pinned with the
// CLFORGE_SIMD environment variable ("scalar" or "avx2") or set_isa().
//
// Elementwise kernels (axpy, blend) are bitwise identical across variants.
// Reductions (dot) differ only in summation order.

#include <cstddef>
#include <span>
#include <string_view>

namespace clforge::kernels {

enum class Isa { scalar, avx2 };

struct Table {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out = clamp(old + eta * (adapted - old), min(old, adapted), max(old, adapted))
  void (*blend)(const double* old_values, const double* adapted, double eta,
                double* out, std::size_t n);
};

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void blend(const double* old_values, const double* adapted, double eta,
           double* out, std::size_t n);
} // namespace scalar

#if defined(CLFORGE_HAVE_AVX2)
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void blend(const double* old_values, const double* adapted, double eta,
           double* out, std::size_t n);
} // namespace avx2
#endif

bool cpu_supports(Isa isa);
const Table& table_for(Isa isa);
const Table& active();
Isa active_isa();
/// Throws clforge::Error(configuration) if the ISA is not available.
void set_isa(Isa isa);
std::string_view to_string(Isa isa);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

inline void blend(std::span<const double> old_values,
                  std::span<const double> adapted, double eta,
                  std::span<double> out) {
  active().blend(old_values.data(), adapted.data(), eta, out.data(),
                 out.size());
}

/// y = W x + b, W row-major (y.size() x x.size()).
void affine(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y);

/// dx += W^T dy.
void affine_backward_input(std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx);

/// dW += dy x^T, db += dy.
void affine_backward_params(std::span<const double> dy,
                            std::span<const double> x, std::span<double> dw,
                            std::span<double> db);

} // namespace clforge::kernels
