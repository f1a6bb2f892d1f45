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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <unistd.h>

#include "clforge/matrix.hpp"
#include "clforge/nn.hpp"
#include "clforge/rng.hpp"
#include "clforge/tasks.hpp"

// Independent reference implementations used by the unit tests and the
// acceptance binary. None of them call into the library's algorithms.
namespace clforge::oracle {

inline double log_add(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// Collapses a frame labeling: merge repeats, then drop blanks.
inline std::vector<int> collapse(const std::vector<int>& path, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int s : path) {
    if (s != prev && s != blank) out.push_back(s);
    prev = s;
  }
  return out;
}

/// -log sum over every length-L labeling that collapses to `target`.
/// Enumerates all (V+1)^L paths.
inline double ctc_by_enumeration(const Matrix& logprobs,
                                 const std::vector<int>& target) {
  const std::size_t L = logprobs.rows;
  const std::size_t K = logprobs.cols;
  const int blank = static_cast<int>(K) - 1;
  std::vector<int> path(L, 0);
  double total = -INFINITY;
  while (true) {
    if (collapse(path, blank) == target) {
      double lp = 0.0;
      for (std::size_t t = 0; t < L; ++t) lp += logprobs(t, path[t]);
      total = log_add(total, lp);
    }
    std::size_t i = 0;
    while (i < L && ++path[i] == static_cast<int>(K)) path[i++] = 0;
    if (i == L) break;
  }
  return -total;
}

/// Edit distance by exhaustive recursion over the last symbols.
inline std::size_t edit_distance_recursive(const std::vector<int>& a,
                                           std::size_t n,
                                           const std::vector<int>& b,
                                           std::size_t m) {
  if (n == 0) return m;
  if (m == 0) return n;
  const std::size_t sub = edit_distance_recursive(a, n - 1, b, m - 1) +
                          (a[n - 1] == b[m - 1] ? 0 : 1);
  const std::size_t del = edit_distance_recursive(a, n - 1, b, m) + 1;
  const std::size_t ins = edit_distance_recursive(a, n, b, m - 1) + 1;
  return std::min({sub, del, ins});
}

/// Every sequence over {0..alphabet-1} of length 0..max_len.
inline std::vector<std::vector<int>> all_sequences(int alphabet,
                                                   std::size_t max_len) {
  std::vector<std::vector<int>> out{{}};
  std::vector<std::vector<int>> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& s : frontier) {
      for (int c = 0; c < alphabet; ++c) {
        auto t = s;
        t.push_back(c);
        next.push_back(t);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

/// Random L x K matrix of row-normalized log-probabilities.
inline Matrix random_logprobs(std::size_t rows, std::size_t cols,
                              CounterRng& rng, double spread = 2.0) {
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      m(r, c) = rng.uniform(-spread, spread);
      s += std::exp(m(r, c));
    }
    for (std::size_t c = 0; c < cols; ++c) m(r, c) -= std::log(s);
  }
  return m;
}

/// Small model and utterance for gradient checks.
inline ModelConfig tiny_model(std::size_t vocab = 4) {
  ModelConfig c = ModelConfig::for_vocab(vocab);
  c.input_dim = 3;
  c.hidden = 5;
  c.blocks = 2;
  c.context = 1;
  c.init_range = 0.5;
  return c;
}

inline Utterance random_utterance(const ModelConfig& c, std::size_t frames,
                                  std::size_t tokens, std::uint64_t seed,
                                  int task_id = 1) {
  CounterRng rng(seed);
  Utterance u;
  u.task_id = task_id;
  u.features = Matrix(frames, c.input_dim);
  for (double& v : u.features.data) v = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < tokens; ++i) {
    int tok;
    do {
      tok = static_cast<int>(rng.below(c.vocab));
    } while (!u.target.empty() && tok == u.target.back());
    u.target.push_back(tok);
  }
  return u;
}

/// Central finite difference of `f` along coordinate `i` of `x`.
inline double central_difference(std::vector<double>& x, std::size_t i,
                                 double step,
                                 const std::function<double()>& f) {
  const double saved = x[i];
  x[i] = saved + step;
  const double up = f();
  x[i] = saved - step;
  const double down = f();
  x[i] = saved;
  return (up - down) / (2.0 * step);
}

/// Relative error with a floor that keeps tiny gradients from dominating.
inline double relative_error(double analytic, double numeric,
                             double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
};

/// Compares the analytic gradient of `spec` against central differences
/// (step 1e-5) on every entry's first value plus random extra coordinates.
inline GradCheck check_gradient(const Model& model, ParamStore params,
                                const Utterance& utt, int task_id,
                                const LossSpec& spec, std::size_t extra,
                                std::uint64_t seed) {
  const auto g = model.backward(params, utt, task_id, spec);
  std::vector<std::size_t> coords;
  for (const auto& e : params.entries()) coords.push_back(e.offset);
  CounterRng rng(seed);
  for (std::size_t i = 0; i < extra; ++i) coords.push_back(rng.below(params.value_count()));
  std::vector<double> x(params.flat().begin(), params.flat().end());
  GradCheck out;
  for (std::size_t c : coords) {
    const double numeric = central_difference(x, c, 1e-5, [&] {
      std::copy(x.begin(), x.end(), params.mutable_flat().begin());
      return model.loss(params, utt, task_id, spec).total;
    });
    out.worst = std::max(out.worst, relative_error(g.grad.flat()[c], numeric));
    ++out.checked;
  }
  return out;
}

/// Per-task WERs and reported AVG of every row of the two reference tables.
struct ReferenceRow {
  std::string table;
  std::string label;
  std::vector<double> wers;
  double avg;
};

inline const std::vector<ReferenceRow>& reference_rows() {
  static const std::vector<ReferenceRow> rows = {
      {"mono", "Sep. Model", {17.3, 10.8, 10.6, 16.7, 12.1, 11.4}, 13.14},
      {"mono", "Fine-Tuning", {19.4, 12.7, 14.0, 20.6, 13.4, 11.4}, 15.25},
      {"mono", "KD 0.5k", {18.4, 12.2, 13.7, 20.2, 12.8, 10.8}, 14.67},
      {"mono", "ER 0.5k", {18.4, 12.1, 13.6, 18.8, 13.0, 11.1}, 14.49},
      {"mono", "ER 2.0k", {18.1, 12.0, 13.0, 18.6, 12.7, 10.8}, 14.20},
      {"mono", "LWF", {19.0, 12.2, 13.7, 20.7, 12.6, 11.1}, 14.88},
      {"mono", "FTA 0.50", {17.5, 11.4, 12.8, 19.6, 12.0, 10.4}, 13.94},
      {"mono", "FTA 1/t", {17.2, 11.1, 12.0, 19.3, 12.4, 10.4}, 13.72},
      {"mono", "LWFA 0.50", {17.2, 11.2, 12.7, 19.2, 11.9, 10.5}, 13.79},
      {"mono", "LWFA 1/t", {17.1, 11.1, 11.9, 19.5, 12.4, 10.3}, 13.72},
      {"multi", "Sep. Model", {17.3, 10.5, 38.0, 8.1, 11.0}, 16.97},
      {"multi", "Freeze Enc.", {17.3, 17.9, 55.1, 13.8, 21.2}, 25.06},
      {"multi", "Fine-Tuning", {59.4, 30.7, 61.7, 10.9, 11.0}, 34.73},
      {"multi", "KD 0.5k", {37.5, 36.1, 59.8, 13.1, 12.2}, 31.71},
      {"multi", "ER 0.5k", {36.8, 20.4, 57.4, 11.2, 12.4}, 27.64},
      {"multi", "ER 2.0k", {31.0, 16.0, 49.3, 9.9, 12.0}, 23.65},
      {"multi", "LWF", {54.4, 34.3, 57.2, 8.9, 10.0}, 32.93},
      {"multi", "FTA 0.50", {28.1, 15.6, 44.2, 8.4, 12.5}, 21.76},
      {"multi", "FTA 1/t", {21.2, 13.3, 41.2, 10.2, 15.5}, 20.28},
      {"multi", "LWFA 0.50", {26.8, 14.8, 43.7, 8.2, 12.1}, 21.12},
      {"multi", "LWFA 1/t", {20.4, 12.7, 39.6, 10.1, 14.8}, 19.54},
  };
  return rows;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("clforge_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

} // namespace clforge::oracle
