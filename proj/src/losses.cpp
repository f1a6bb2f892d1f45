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

#include "clforge/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "clforge/error.hpp"

namespace clforge {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = a > b ? a : b;
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

void check_tokens(std::span<const int> target, std::size_t limit,
                  const char* what) {
  for (int tok : target) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= limit) {
      throw Error(Errc::structural_mismatch,
                  std::string(what) + ": token " + std::to_string(tok) +
                      " outside the output alphabet");
    }
  }
}

} // namespace

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(Errc::domain, "alpha must lie in [0, 1]");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw Error(Errc::domain, "lambda must be finite and >= 0");
  }
}

std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++n;
  }
  return n;
}

LossGrad ctc_loss(const Matrix& logprobs, std::span<const int> target,
                  std::size_t blank) {
  if (target.empty()) {
    throw Error(Errc::structural_mismatch, "ctc_loss: empty target");
  }
  if (blank >= logprobs.cols) {
    throw Error(Errc::structural_mismatch, "ctc_loss: blank outside columns");
  }
  check_tokens(target, logprobs.cols, "ctc_loss");
  if (std::find(target.begin(), target.end(), static_cast<int>(blank)) != target.end()) {
    throw Error(Errc::structural_mismatch, "ctc_loss: target contains the blank");
  }
  const std::size_t frames = logprobs.rows;
  if (frames < ctc_min_frames(target)) {
    throw Error(Errc::infeasible_alignment,
                "ctc_loss: " + std::to_string(frames) +
                    " frames cannot align a target needing " +
                    std::to_string(ctc_min_frames(target)));
  }

  // Blank-augmented label sequence: blank, y1, blank, y2, ..., yW, blank.
  const std::size_t states = 2 * target.size() + 1;
  std::vector<std::size_t> ext(states, blank);
  for (std::size_t i = 0; i < target.size(); ++i) {
    ext[2 * i + 1] = static_cast<std::size_t>(target[i]);
  }
  auto can_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
  };

  Matrix alpha(frames, states, kNegInf);
  alpha(0, 0) = logprobs(0, ext[0]);
  alpha(0, 1) = logprobs(0, ext[1]);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + logprobs(t, ext[s]);
    }
  }
  const double log_total =
      log_add(alpha(frames - 1, states - 1), alpha(frames - 1, states - 2));
  if (log_total == kNegInf || std::isnan(log_total)) {
    throw Error(Errc::infeasible_alignment,
                "ctc_loss: every alignment has zero probability");
  }

  // beta(t, s): log-probability of completing the target from state s at
  // frame t, excluding the emission at t.
  Matrix beta(frames, states, kNegInf);
  beta(frames - 1, states - 1) = 0.0;
  beta(frames - 1, states - 2) = 0.0;
  for (std::size_t t = frames - 1; t-- > 0;) {
    for (std::size_t s = 0; s < states; ++s) {
      double b = beta(t + 1, s) + logprobs(t + 1, ext[s]);
      if (s + 1 < states) {
        b = log_add(b, beta(t + 1, s + 1) + logprobs(t + 1, ext[s + 1]));
      }
      if (s + 2 < states && can_skip(s + 2)) {
        b = log_add(b, beta(t + 1, s + 2) + logprobs(t + 1, ext[s + 2]));
      }
      beta(t, s) = b;
    }
  }

  LossGrad out;
  out.value = -log_total;
  out.grad = Matrix(frames, logprobs.cols, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      const double g = alpha(t, s) + beta(t, s);
      if (g == kNegInf) continue;
      out.grad(t, ext[s]) -= std::exp(g - log_total);
    }
  }
  return out;
}

LossGrad ce_loss(const Matrix& dec_logprobs, std::span<const int> target,
                 std::size_t eos) {
  if (dec_logprobs.rows != target.size() + 1) {
    throw Error(Errc::structural_mismatch,
                "ce_loss: expected " + std::to_string(target.size() + 1) +
                    " decoder positions, got " +
                    std::to_string(dec_logprobs.rows));
  }
  if (eos >= dec_logprobs.cols) {
    throw Error(Errc::structural_mismatch, "ce_loss: eos outside columns");
  }
  check_tokens(target, dec_logprobs.cols, "ce_loss");
  const double scale = 1.0 / static_cast<double>(dec_logprobs.rows);
  LossGrad out;
  out.grad = Matrix(dec_logprobs.rows, dec_logprobs.cols, 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < dec_logprobs.rows; ++i) {
    const std::size_t ref =
        i < target.size() ? static_cast<std::size_t>(target[i]) : eos;
    sum -= dec_logprobs(i, ref);
    out.grad(i, ref) = -scale;
  }
  out.value = sum * scale;
  return out;
}

KdGrad kd_loss(const OutputDistributions& teacher,
               const OutputDistributions& student, double alpha, bool mean) {
  auto check = [](const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows != b.rows || a.cols != b.cols) {
      throw Error(Errc::structural_mismatch,
                  std::string("kd_loss: teacher and student ") + what +
                      " outputs differ in shape");
    }
  };
  check(teacher.ctc_logprobs, student.ctc_logprobs, "CTC");
  check(teacher.dec_logprobs, student.dec_logprobs, "decoder");

  KdGrad out;
  auto part = [](const Matrix& p_log, const Matrix& q_log, double weight,
                 Matrix& grad) {
    grad = Matrix(p_log.rows, p_log.cols, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < p_log.data.size(); ++i) {
      const double p = std::exp(p_log.data[i]);
      if (p == 0.0) continue;
      sum -= p * q_log.data[i];
      grad.data[i] = -weight * p;
    }
    return weight * sum;
  };
  double w_ctc = alpha;
  double w_dec = 1.0 - alpha;
  if (mean) {
    if (teacher.ctc_logprobs.rows > 0) {
      w_ctc /= static_cast<double>(teacher.ctc_logprobs.rows);
    }
    if (teacher.dec_logprobs.rows > 0) {
      w_dec /= static_cast<double>(teacher.dec_logprobs.rows);
    }
  }
  out.value = part(teacher.ctc_logprobs, student.ctc_logprobs, w_ctc,
                   out.ctc_grad) +
              part(teacher.dec_logprobs, student.dec_logprobs, w_dec,
                   out.dec_grad);
  return out;
}

} // namespace clforge
