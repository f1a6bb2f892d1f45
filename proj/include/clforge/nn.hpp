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
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clforge/losses.hpp"
#include "clforge/matrix.hpp"
#include "clforge/params.hpp"

namespace clforge {

/// Whether the output heads (CTC projection and decoder) are shared by all
/// tasks or owned by each task.
enum class HeadMode { shared, own };

struct ModelConfig {
  std::size_t input_dim = 8;
  std::size_t hidden = 32;
  std::size_t blocks = 2;
  /// Frames on each side that an encoder block aggregates.
  std::size_t context = 1;
  std::size_t vocab = 20;
  int blank_id = 20;
  int sos_id = 21;
  int eos_id = 22;
  /// Expected spacing, in frames, between consecutive tokens. Centers the
  /// location prior of the decoder attention.
  double frames_per_token = 2.0;
  double init_range = 0.08;
  /// Initial weight of the location prior (a learned scalar).
  double location_init = 0.5;

  /// Config for vocabulary size v with reserved ids v, v+1, v+2.
  static ModelConfig for_vocab(std::size_t v);

  /// Throws Error(configuration) on zero sizes or reserved ids that collide
  /// or fall inside [0, vocab).
  void validate() const;

  std::size_t ctc_classes() const { return vocab + 1; }
  std::size_t dec_classes() const { return vocab + 2; }
  // Output column layout: tokens first, then the reserved symbols.
  std::size_t blank_column() const { return vocab; }
  std::size_t sos_column() const { return vocab; }
  std::size_t eos_column() const { return vocab + 1; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Utterance {
  Matrix features;         // L x input_dim
  std::vector<int> target; // W tokens in [0, vocab)
  int task_id = 1;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

/// Intermediate values kept by forward() for backward().
struct Activations {
  std::vector<Matrix> blocks;          // encoder block outputs
  std::vector<std::size_t> dec_inputs; // embedding row fed at each step
  Matrix queries;                      // (W+1) x hidden
  Matrix attention;                    // (W+1) x (L+1), last column the end slot
  std::vector<double> positions;       // expected attended frame per step
  Matrix contexts;                     // (W+1) x hidden
};

struct ForwardOut : OutputDistributions {
  Activations acts;
};

/// Which loss terms a gradient is taken of:
///   hybrid_weight * (alpha * CTC + (1 - alpha) * CE) + lambda * KD(teacher)
/// Terms with zero weight (or no teacher) are skipped entirely.
struct LossSpec {
  double hybrid_weight = 1.0;
  double alpha = 0.3;
  double lambda = 0.0;
  bool kd_mean = false;
  const OutputDistributions* teacher = nullptr;
  /// false leaves every Shared entry with an exactly-zero gradient.
  bool train_shared = true;

  static LossSpec hybrid(const LossConfig& cfg);
  static LossSpec with_teacher(const LossConfig& cfg,
                               const OutputDistributions& teacher);
};

struct LossTerms {
  double total = 0.0;
  double ctc = 0.0;
  double ce = 0.0;
  double kd = 0.0;
};

struct Gradient {
  LossTerms loss;
  ParamStore grad;
};

/// Minimal encoder-decoder with a CTC head and an attention decoder.
///
/// Encoder: `blocks` layers of h_t = tanh(W [x_{t-c} .. x_{t+c}] + b) with
/// zero padding at the edges. CTC head: affine h -> V+1 and log-softmax.
/// Decoder, one step per output position: the previous token's embedding e
/// gives a query q = Wq e + bq, attention scores are
///   q . h_t - beta * (t - p_prev - frames_per_token)^2
/// where p_prev is the expected frame attended at the previous step and beta
/// is learned. Slot t = L holds a learned end-of-input vector in place of
/// an encoder state, so attention can move past the last frame. The context
/// c = sum_t a_t h_t and e feed an affine layer to V+2 logits. Teacher forcing conditions step i on target token i-1.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Encoder entries are Shared. In HeadMode::own the heads are created for
  /// task 1 and tagged TaskSpecific(1).
  ParamStore init_params(std::uint64_t seed,
                         HeadMode mode = HeadMode::shared) const;

  /// Entry names and shapes of a task-owned head.
  std::vector<EntrySpec> head_spec(int task_id) const;

  /// init_task_head() with this model's head layout and initialization.
  ParamStore add_task_head(const ParamStore& params, int task_id,
                           std::uint64_t seed) const;

  /// Teacher-forced forward pass on utt.target.
  /// Throws Error(missing_head) when no head serves task_id and
  /// Error(structural_mismatch) on dimension mismatches.
  ForwardOut forward(const ParamStore& params, const Utterance& utt,
                     int task_id) const;

  LossTerms loss(const ParamStore& params, const Utterance& utt, int task_id,
                 const LossSpec& spec) const;

  Gradient backward(const ParamStore& params, const Utterance& utt,
                    int task_id, const LossSpec& spec) const;

  /// Adds weight * d(loss)/d(params) into `grad` (laid out like params.flat())
  /// and returns the unweighted loss terms.
  LossTerms accumulate_gradient(const ParamStore& params, const Utterance& utt,
                                int task_id, const LossSpec& spec,
                                double weight, std::span<double> grad) const;

  /// Argmax decoding from sos until eos or max_len tokens; ties go to the
  /// lower index. The sos column is never emitted.
  std::vector<int> greedy_decode(const ParamStore& params,
                                 const Matrix& features, int task_id,
                                 std::size_t max_len) const;

 private:
  ModelConfig config_;
};

} // namespace clforge
