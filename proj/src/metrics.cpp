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

#include "clforge/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "clforge/error.hpp"

namespace clforge {

WerMatrix::WerMatrix(std::size_t tasks)
    : tasks_(tasks), cells_(tasks * tasks) {}

std::size_t WerMatrix::index(std::size_t i, std::size_t j) const {
  if (i < 1 || j < 1 || i > tasks_ || j > tasks_) {
    throw Error(Errc::invalid_index, "WER cell (" + std::to_string(i) + ", " +
                                         std::to_string(j) + ") out of range");
  }
  return (i - 1) * tasks_ + (j - 1);
}

std::optional<double> WerMatrix::at(std::size_t i, std::size_t j) const {
  if (j > i) return std::nullopt;
  return cells_[index(i, j)];
}

double WerMatrix::get(std::size_t i, std::size_t j) const {
  const auto v = at(i, j);
  if (!v) {
    throw Error(Errc::incomplete_matrix, "WER cell (" + std::to_string(i) +
                                             ", " + std::to_string(j) +
                                             ") is undefined");
  }
  return *v;
}

void WerMatrix::set(std::size_t i, std::size_t j, double value) {
  const auto k = index(i, j);
  if (j > i) {
    throw Error(Errc::invalid_index, "WER cell above the diagonal");
  }
  if (!(value >= 0.0) || !std::isfinite(value)) {
    throw Error(Errc::domain, "WER must be finite and non-negative");
  }
  cells_[k] = value;
}

std::vector<std::optional<double>> WerMatrix::diagonal() const {
  std::vector<std::optional<double>> d(tasks_);
  for (std::size_t j = 1; j <= tasks_; ++j) d[j - 1] = at(j, j);
  return d;
}

WerMatrix WerMatrix::scaled(double factor) const {
  WerMatrix out = *this;
  for (auto& c : out.cells_) {
    if (c) *c *= factor;
  }
  return out;
}

std::size_t edit_distance(std::span<const int> hyp, std::span<const int> ref) {
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

double wer(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) {
    throw Error(Errc::undefined_reference, "WER of an empty reference");
  }
  return static_cast<double>(edit_distance(hyp, ref)) /
         static_cast<double>(ref.size());
}

double avg(const WerMatrix& r) {
  const std::size_t t = r.tasks();
  if (t == 0) throw Error(Errc::incomplete_matrix, "empty WER matrix");
  double sum = 0.0;
  for (std::size_t j = 1; j <= t; ++j) sum += r.get(t, j);
  return sum / static_cast<double>(t);
}

double bwt(const WerMatrix& r) {
  const std::size_t t = r.tasks();
  if (t < 2) throw Error(Errc::undefined_metric, "BWT needs at least two tasks");
  double sum = 0.0;
  for (std::size_t j = 1; j < t; ++j) sum += r.get(j, j) - r.get(t, j);
  return sum / static_cast<double>(t - 1);
}

double fwt(const WerMatrix& r, std::span<const std::optional<double>> ft_diag) {
  const std::size_t t = r.tasks();
  if (t < 2) throw Error(Errc::undefined_metric, "FWT needs at least two tasks");
  double sum = 0.0;
  for (std::size_t j = 2; j <= t; ++j) {
    if (ft_diag.size() < j || !ft_diag[j - 1]) {
      throw Error(Errc::missing_baseline,
                  "no fine-tuning reference for task " + std::to_string(j));
    }
    sum += *ft_diag[j - 1] - r.get(j, j);
  }
  return sum / static_cast<double>(t - 1);
}

double fwt(const WerMatrix& r, const WerMatrix& fine_tuning) {
  const auto d = fine_tuning.diagonal();
  return fwt(r, d);
}

SummaryMetrics summarize(const WerMatrix& r, const WerMatrix* fine_tuning) {
  SummaryMetrics s;
  s.avg = avg(r);
  s.bwt = bwt(r);
  if (fine_tuning != nullptr) s.fwt = fwt(r, *fine_tuning);
  return s;
}

std::string format_exact(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_wer_csv(std::ostream& out, const WerMatrix& r) {
  for (std::size_t j = 1; j <= r.tasks(); ++j) out << ',' << j;
  out << '\n';
  for (std::size_t i = 1; i <= r.tasks(); ++i) {
    out << "after_task_" << i;
    for (std::size_t j = 1; j <= r.tasks(); ++j) {
      out << ',';
      if (const auto v = r.at(i, j)) out << format_exact(*v);
    }
    out << '\n';
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  for (auto& c : cells) {
    while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
    while (!c.empty() && c.front() == ' ') c.erase(c.begin());
  }
  return cells;
}

} // namespace

WerMatrix read_wer_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::parse, "WER CSV: empty input");
  const auto header = split_csv_line(line);
  if (header.size() < 2) throw Error(Errc::parse, "WER CSV: header has no task columns");
  const std::size_t t = header.size() - 1;
  for (std::size_t j = 1; j <= t; ++j) {
    if (header[j] != std::to_string(j)) {
      throw Error(Errc::parse, "WER CSV: header column " + std::to_string(j) +
                                   " should be '" + std::to_string(j) + "'");
    }
  }
  WerMatrix r(t);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto cells = split_csv_line(line);
    const std::string label = "after_task_" + std::to_string(row);
    if (row > t || cells.size() != t + 1 || cells[0] != label) {
      throw Error(Errc::parse, "WER CSV: malformed row " + std::to_string(row));
    }
    for (std::size_t j = 1; j <= t; ++j) {
      const auto& c = cells[j];
      if (c.empty()) continue;
      if (j > row) {
        throw Error(Errc::parse, "WER CSV: value above the diagonal in row " +
                                     std::to_string(row));
      }
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size()) {
        throw Error(Errc::parse, "WER CSV: bad number '" + c + "' in row " +
                                     std::to_string(row));
      }
      try {
        r.set(row, j, v);
      } catch (const Error& e) {
        throw Error(Errc::parse, std::string("WER CSV: ") + e.what());
      }
    }
  }
  if (row != t) {
    throw Error(Errc::parse, "WER CSV: expected " + std::to_string(t) +
                                 " rows, found " + std::to_string(row));
  }
  return r;
}

} // namespace clforge
