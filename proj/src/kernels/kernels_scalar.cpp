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

#include <algorithm>

namespace clforge::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void blend(const double* old_values, const double* adapted, double eta,
           double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double a = old_values[i];
    const double b = adapted[i];
    const double v = a + eta * (b - a);
    out[i] = std::min(std::max(v, std::min(a, b)), std::max(a, b));
  }
}

} // namespace clforge::kernels::scalar
