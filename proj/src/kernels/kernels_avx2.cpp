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

#include "clforge/kernels.hpp"

#include <immintrin.h>

#include <algorithm>

// Compiled with -mavx2 -mfma. FMA is deliberately not used in the
// elementwise kernels so they round exactly like the scalar reference.

namespace clforge::kernels::avx2 {

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4),
                           _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  acc0 = _mm256_add_pd(acc0, acc1);
  const __m128d lo = _mm256_castpd256_pd128(acc0);
  const __m128d hi = _mm256_extractf128_pd(acc0, 1);
  __m128d s = _mm_add_pd(lo, hi);
  s = _mm_add_sd(s, _mm_unpackhi_pd(s, s));
  double acc = _mm_cvtsd_f64(s);
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void blend(const double* old_values, const double* adapted, double eta,
           double* out, std::size_t n) {
  const __m256d ve = _mm256_set1_pd(eta);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d a = _mm256_loadu_pd(old_values + i);
    const __m256d b = _mm256_loadu_pd(adapted + i);
    const __m256d v = _mm256_add_pd(a, _mm256_mul_pd(ve, _mm256_sub_pd(b, a)));
    // Compare-and-select reproduces std::min/std::max exactly, including
    // which operand is returned on ties (signed zeros).
    const __m256d lo = _mm256_blendv_pd(a, b, _mm256_cmp_pd(b, a, _CMP_LT_OQ));
    const __m256d hi = _mm256_blendv_pd(a, b, _mm256_cmp_pd(a, b, _CMP_LT_OQ));
    const __m256d m = _mm256_blendv_pd(v, lo, _mm256_cmp_pd(v, lo, _CMP_LT_OQ));
    _mm256_storeu_pd(out + i,
                     _mm256_blendv_pd(m, hi, _mm256_cmp_pd(hi, m, _CMP_LT_OQ)));
  }
  for (; i < n; ++i) {
    const double a = old_values[i];
    const double b = adapted[i];
    const double v = a + eta * (b - a);
    out[i] = std::min(std::max(v, std::min(a, b)), std::max(a, b));
  }
}

} // namespace clforge::kernels::avx2
