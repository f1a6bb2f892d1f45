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
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string_view>
#include <vector>

#include "clforge/matrix.hpp"
#include "clforge/nn.hpp"

namespace clforge {

/// DialectContinuum: tasks perturb one shared prototype space and share the
/// output heads. LanguageFamily: every task draws independent prototypes
/// and owns its heads.
enum class SuiteKind { dialect_continuum, language_family };

enum class Split { train, val, test };

std::string_view to_string(SuiteKind kind);
std::string_view to_string(Split split);
SuiteKind parse_suite_kind(std::string_view text);
Split parse_split(std::string_view text);

struct IntRange {
  int lo = 1;
  int hi = 1;
  friend bool operator==(IntRange, IntRange) = default;
};

struct SuiteConfig {
  SuiteKind kind = SuiteKind::dialect_continuum;
  int tasks = 4;
  std::size_t vocab = 20;
  std::size_t feature_dim = 8;
  /// 1 = identical prototype spaces, 0 = independent (dialect suites only).
  double similarity = 0.8;
  /// Standard deviation of the per-task perturbation relative to the base
  /// prototypes (dialect suites only).
  double perturbation_scale = 2.0;
  /// The first task is the largest one.
  std::size_t n_train_first = 2000;
  std::size_t n_train = 500;
  std::size_t n_val = 100;
  std::size_t n_test = 200;
  double noise_sigma = 0.3;
  std::map<int, double> noise_overrides; // task id -> sigma
  IntRange frames_per_token{1, 3};
  IntRange target_len{3, 8};
  std::uint64_t seed = 1;

  /// Throws Error(configuration).
  void validate() const;
  /// Stable 64-bit hash of every field (dataset cache key).
  std::uint64_t hash() const;

  friend bool operator==(const SuiteConfig&, const SuiteConfig&) = default;
};

struct TaskSpec {
  int task_id = 1;
  Matrix prototypes; // vocab x feature_dim, unit-norm rows
  std::size_t vocab = 0;
  HeadMode head_mode = HeadMode::shared;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  double noise_sigma = 0.0;
  IntRange frames_per_token;
  IntRange target_len;
  std::uint64_t seed = 0; // derived from (master seed, task id)

  std::size_t split_size(Split split) const;
};

struct Dataset {
  int task_id = 1;
  Split split = Split::train;
  std::size_t vocab = 0;
  std::size_t feature_dim = 0;
  std::uint64_t seed = 0;
  std::vector<Utterance> utterances;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

std::vector<TaskSpec> gen_task_suite(const SuiteConfig& config);

/// Utterance `index` of a split, reproducible in isolation. A token that
/// repeats its predecessor gets at least two frames so a CTC alignment
/// always exists.
Utterance synthesize_utterance(const TaskSpec& spec, Split split,
                               std::size_t index);

Dataset synthesize(const TaskSpec& spec, Split split);

// Dataset file: one JSON header line
//   {"count":N,"feature_dim":D,"seed":S,"split":"train","task_id":T,"vocab":V}
// followed by N little-endian records:
//   u32 W, W x u32 tokens, u32 L, u32 D, L*D x f64 row-major features.
void write_dataset(std::ostream& out, const Dataset& data);
Dataset read_dataset(std::istream& in);
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

} // namespace clforge
