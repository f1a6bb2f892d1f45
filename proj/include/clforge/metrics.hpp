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
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clforge {

/// R[i][j]: error rate on task j after learning task i (1-based, j <= i).
/// Cells above the diagonal are never defined; cells below it may be unset
/// until filled in.
class WerMatrix {
 public:
  WerMatrix() = default;
  explicit WerMatrix(std::size_t tasks);

  std::size_t tasks() const { return tasks_; }

  std::optional<double> at(std::size_t i, std::size_t j) const;
  /// Throws Error(incomplete_matrix) when the cell is unset.
  double get(std::size_t i, std::size_t j) const;
  /// Throws Error(invalid_index) above the diagonal and Error(domain) for
  /// negative or non-finite values.
  void set(std::size_t i, std::size_t j, double value);

  /// R[j][j] for j = 1..T (unset cells stay empty).
  std::vector<std::optional<double>> diagonal() const;
  WerMatrix scaled(double factor) const;

  friend bool operator==(const WerMatrix&, const WerMatrix&) = default;

 private:
  std::size_t index(std::size_t i, std::size_t j) const;
  std::size_t tasks_ = 0;
  std::vector<std::optional<double>> cells_;
};

/// Minimum number of substitutions, deletions and insertions turning hyp
/// into ref.
std::size_t edit_distance(std::span<const int> hyp, std::span<const int> ref);

/// edit_distance / |ref|. Throws Error(undefined_reference) for empty ref.
double wer(std::span<const int> hyp, std::span<const int> ref);

/// Mean of the final row.
double avg(const WerMatrix& r);

/// (1/(T-1)) sum_{j<T} (R[j][j] - R[T][j]); negative means forgetting.
double bwt(const WerMatrix& r);

/// (1/(T-1)) sum_{j=2..T} (ft_diag[j] - R[j][j]); positive means new tasks
/// are learned better than by fine-tuning. ft_diag[k] holds task k+1.
double fwt(const WerMatrix& r, std::span<const std::optional<double>> ft_diag);
double fwt(const WerMatrix& r, const WerMatrix& fine_tuning);

struct SummaryMetrics {
  double avg = 0.0;
  double bwt = 0.0;
  std::optional<double> fwt;
};

SummaryMetrics summarize(const WerMatrix& r,
                         const WerMatrix* fine_tuning = nullptr);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_exact(double v);

// CSV: header ",1,2,...,T"; then rows "after_task_i,v1,...,vT" with empty
// cells where undefined.
void write_wer_csv(std::ostream& out, const WerMatrix& r);
WerMatrix read_wer_csv(std::istream& in);

} // namespace clforge
