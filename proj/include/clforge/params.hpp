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
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clforge {

/// Which part of the model an entry belongs to: the shared trunk or the
/// head owned by one task (task ids start at 1).
class PartitionTag {
 public:
  static PartitionTag shared() { return PartitionTag(0); }
  static PartitionTag task_specific(int task_id);

  bool is_shared() const { return task_ == 0; }
  /// 0 for shared entries.
  int task_id() const { return task_; }
  std::string to_string() const;

  friend bool operator==(PartitionTag, PartitionTag) = default;

 private:
  explicit PartitionTag(int task) : task_(task) {}
  int task_;
};

struct EntrySpec {
  std::string name;
  std::vector<std::size_t> shape;
};

struct EntryInfo {
  std::string name;
  std::vector<std::size_t> shape;
  PartitionTag tag = PartitionTag::shared();
  std::size_t offset = 0; // into the flat value buffer
  std::size_t count = 0;  // product of shape
};

std::size_t shape_count(std::span<const std::size_t> shape);

/// Named, shaped, partition-tagged parameter arrays backed by one flat
/// buffer of doubles. Entry metadata is immutable and shared between copies,
/// so copying a store copies only the values. Stores are plain values: the
/// library's operations return new stores, and the only mutating access is
/// the explicit mutable_* family used by optimizers.
class ParamStore {
 public:
  class Builder {
   public:
    Builder& add(std::string name, std::vector<std::size_t> shape,
                 PartitionTag tag, std::vector<double> values);
    /// Validates unique names, value counts and finiteness.
    ParamStore build() &&;

   private:
    std::vector<EntryInfo> entries_;
    std::vector<double> values_;
  };

  ParamStore();

  std::size_t size() const { return layout_->entries.size(); }
  std::size_t value_count() const { return values_.size(); }
  std::span<const EntryInfo> entries() const { return layout_->entries; }
  const EntryInfo& entry(std::size_t i) const { return layout_->entries[i]; }

  std::optional<std::size_t> find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name).has_value(); }
  /// Throws Error(structural_mismatch) when absent.
  std::size_t index_of(std::string_view name) const;

  std::span<const double> values(std::size_t i) const {
    const auto& e = entry(i);
    return {values_.data() + e.offset, e.count};
  }
  std::span<const double> values(std::string_view name) const {
    return values(index_of(name));
  }
  std::span<double> mutable_values(std::size_t i) {
    const auto& e = entry(i);
    return {values_.data() + e.offset, e.count};
  }
  std::span<const double> flat() const { return values_; }
  std::span<double> mutable_flat() { return values_; }

  /// Same names, shapes and tags with every value 0.
  ParamStore zeros_like() const;
  /// Same names, shapes and tags in the same order.
  bool same_structure(const ParamStore& other) const;
  bool bitwise_equal(const ParamStore& other) const;

  /// Sorted ids of all tasks owning at least one entry.
  std::vector<int> task_ids() const;
  bool has_task_head(int task_id) const;

  /// FNV-1a over names, tags, shapes and value bits.
  std::uint64_t checksum() const;

 private:
  struct Layout {
    std::vector<EntryInfo> entries;
    std::unordered_map<std::string, std::size_t> index;
  };

  ParamStore(std::shared_ptr<const Layout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {}

  std::shared_ptr<const Layout> layout_;
  std::vector<double> values_;

  friend ParamStore average(const ParamStore&, const ParamStore&, double, int);
};

/// Interpolation weight given to the adapted model.
class AveragingSchedule {
 public:
  /// Throws Error(domain) unless 0 <= eta <= 1.
  static AveragingSchedule constant(double eta);
  /// eta_t = 1/t: the running uniform mean of all adapted checkpoints.
  static AveragingSchedule harmonic() { return AveragingSchedule(true, 0.0); }
  /// Accepts "harmonic", "1/t" or a number in [0, 1].
  static AveragingSchedule parse(std::string_view text);

  bool is_harmonic() const { return harmonic_; }
  double constant_eta() const { return eta_; }
  /// "harmonic" or the constant formatted with shortest round-trip digits.
  std::string to_string() const;

  friend bool operator==(const AveragingSchedule&,
                         const AveragingSchedule&) = default;

 private:
  AveragingSchedule(bool harmonic, double eta)
      : harmonic_(harmonic), eta_(eta) {}
  bool harmonic_;
  double eta_;
};

/// Throws Error(invalid_index) for t < 1.
double eta_for_task(const AveragingSchedule& schedule, int t);

/// Weight averaging after adapting to a task:
///   shared entries       -> (1 - eta) * old + eta * adapted
///   head of current_task -> copied from adapted
///   heads of other tasks -> copied from old
/// `adapted` must contain every entry of `old` with the same shape and tag;
/// it may add the current task's head. The result has adapted's layout.
/// eta = 0 and eta = 1 copy old/adapted bitwise; otherwise the update is
/// old + eta * (adapted - old), clamped to the segment between the two.
ParamStore average(const ParamStore& old, const ParamStore& adapted,
                   double eta, int current_task);

/// As above with current_task = the highest task id owning an entry of
/// `adapted` (0 when the model is fully shared).
ParamStore average(const ParamStore& old, const ParamStore& adapted,
                   double eta);

/// Uniform values in [-range, range] from a stream keyed by (seed, name).
std::vector<double> init_uniform(std::size_t count, std::uint64_t seed,
                                 std::string_view name, double range);

/// Extends `store` with freshly initialized TaskSpecific(task_id) entries.
/// Throws Error(duplicate_head) if the task already owns entries.
ParamStore init_task_head(const ParamStore& store, int task_id,
                          std::span<const EntrySpec> head,
                          std::uint64_t seed, double init_range = 0.08);

} // namespace clforge
