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

#include <cstddef>
#include <span>

#include "clforge/matrix.hpp"

namespace clforge {

/// Row-normalized log-probabilities produced by the two output heads.
/// ctc_logprobs is L x (V+1) with the blank in the last column;
/// dec_logprobs is (W+1) x (V+2) with sos and eos in the last two columns.
struct OutputDistributions {
  Matrix ctc_logprobs;
  Matrix dec_logprobs;
};

struct LossConfig {
  /// Weight of the CTC term in the hybrid loss.
  double alpha = 0.3;
  /// Weight of the distillation term; 0 disables it.
  double lambda = 0.5;
  /// Average the distillation term over frames/positions instead of summing.
  bool kd_mean = true;

  /// Throws Error(domain) when alpha is outside [0, 1] or lambda < 0.
  void validate() const;
};

/// Loss value together with its gradient with respect to the log-probability
/// matrix it was computed from.
struct LossGrad {
  double value = 0.0;
  Matrix grad;
};

/// Minimum number of frames for which `target` has a CTC alignment:
/// one per token plus a separating blank between equal neighbours.
std::size_t ctc_min_frames(std::span<const int> target);

/// Negative log of the total probability of all blank-augmented alignments
/// of `target`, summed over the utterance (not normalized per frame).
/// Throws Error(infeasible_alignment) when the frames cannot fit the target
/// and Error(structural_mismatch) on empty targets or bad token ids.
LossGrad ctc_loss(const Matrix& logprobs, std::span<const int> target,
                  std::size_t blank);

/// Mean over the W+1 teacher-forced positions of -log p(reference), where
/// the reference is the target followed by `eos`.
LossGrad ce_loss(const Matrix& dec_logprobs, std::span<const int> target,
                 std::size_t eos);

inline double hybrid_loss(double ctc, double ce, double alpha) {
  return alpha * ctc + (1.0 - alpha) * ce;
}

struct KdGrad {
  double value = 0.0;
  Matrix ctc_grad;
  Matrix dec_grad;
};

/// Distillation from a frozen teacher:
///   alpha * sum_t sum_k -p_teacher log p_student   (CTC frames)
/// + (1 - alpha) * sum_i sum_k -p_teacher log p_student   (decoder steps)
/// This is the cross-entropy (note the minus sign on sum p log q), so
/// adding it to the training loss pulls the student towards the teacher. With `mean`, each part is divided by its row count.
KdGrad kd_loss(const OutputDistributions& teacher,
               const OutputDistributions& student, double alpha,
               bool mean = false);

inline double total_loss(double hybrid, double kd, double lambda) {
  return hybrid + lambda * kd;
}

} // namespace clforge
