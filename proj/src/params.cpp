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

#include "clforge/params.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <set>

#include "clforge/error.hpp"
#include "clforge/kernels.hpp"
#include "clforge/rng.hpp"

namespace clforge {

PartitionTag PartitionTag::task_specific(int task_id) {
  if (task_id < 1) {
    throw Error(Errc::invalid_index,
                "task-specific tag needs task id >= 1, got " +
                    std::to_string(task_id));
  }
  return PartitionTag(task_id);
}

std::string PartitionTag::to_string() const {
  return is_shared() ? std::string("shared")
                     : "task:" + std::to_string(task_);
}

std::size_t shape_count(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

ParamStore::Builder& ParamStore::Builder::add(std::string name,
                                              std::vector<std::size_t> shape,
                                              PartitionTag tag,
                                              std::vector<double> values) {
  const std::size_t count = shape_count(shape);
  if (values.size() != count) {
    throw Error(Errc::structural_mismatch,
                "entry '" + name + "' has " + std::to_string(values.size()) +
                    " values for a shape holding " + std::to_string(count));
  }
  EntryInfo e;
  e.name = std::move(name);
  e.shape = std::move(shape);
  e.tag = tag;
  e.offset = values_.size();
  e.count = count;
  entries_.push_back(std::move(e));
  values_.insert(values_.end(), values.begin(), values.end());
  return *this;
}

ParamStore ParamStore::Builder::build() && {
  auto layout = std::make_shared<Layout>();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!layout->index.emplace(entries_[i].name, i).second) {
      throw Error(Errc::structural_mismatch,
                  "duplicate entry name '" + entries_[i].name + "'");
    }
  }
  for (const auto& e : entries_) {
    for (std::size_t k = 0; k < e.count; ++k) {
      if (!std::isfinite(values_[e.offset + k])) {
        throw Error(Errc::non_finite, "entry '" + e.name +
                                          "' holds a non-finite value");
      }
    }
  }
  layout->entries = std::move(entries_);
  return ParamStore(std::move(layout), std::move(values_));
}

ParamStore::ParamStore() : layout_(std::make_shared<Layout>()) {}

std::optional<std::size_t> ParamStore::find(std::string_view name) const {
  auto it = layout_->index.find(std::string(name));
  if (it == layout_->index.end()) return std::nullopt;
  return it->second;
}

std::size_t ParamStore::index_of(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw Error(Errc::structural_mismatch,
              "no parameter named '" + std::string(name) + "'");
}

ParamStore ParamStore::zeros_like() const {
  return ParamStore(layout_, std::vector<double>(values_.size(), 0.0));
}

bool ParamStore::same_structure(const ParamStore& other) const {
  if (layout_ == other.layout_) return true;
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& a = entry(i);
    const auto& b = other.entry(i);
    if (a.name != b.name || a.shape != b.shape || !(a.tag == b.tag)) {
      return false;
    }
  }
  return true;
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  return same_structure(other) &&
         std::memcmp(values_.data(), other.values_.data(),
                     values_.size() * sizeof(double)) == 0;
}

std::vector<int> ParamStore::task_ids() const {
  std::set<int> ids;
  for (const auto& e : entries()) {
    if (!e.tag.is_shared()) ids.insert(e.tag.task_id());
  }
  return {ids.begin(), ids.end()};
}

bool ParamStore::has_task_head(int task_id) const {
  return std::any_of(entries().begin(), entries().end(), [&](const auto& e) {
    return !e.tag.is_shared() && e.tag.task_id() == task_id;
  });
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries()) {
    feed(e.name.data(), e.name.size());
    const int tag = e.tag.task_id();
    feed(&tag, sizeof(tag));
    for (auto d : e.shape) feed(&d, sizeof(d));
  }
  feed(values_.data(), values_.size() * sizeof(double));
  return h;
}

AveragingSchedule AveragingSchedule::constant(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw Error(Errc::domain, "averaging weight must lie in [0, 1], got " +
                                  std::to_string(eta));
  }
  return AveragingSchedule(false, eta);
}

AveragingSchedule AveragingSchedule::parse(std::string_view text) {
  if (text == "harmonic" || text == "1/t") return harmonic();
  if (text.starts_with("constant:")) text.remove_prefix(9);
  double eta = 0.0;
  const auto [ptr, ec] =
      std::from_chars(text.data(), text.data() + text.size(), eta);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(Errc::parse,
                "unrecognized averaging schedule '" + std::string(text) + "'");
  }
  return constant(eta);
}

std::string AveragingSchedule::to_string() const {
  if (harmonic_) return "harmonic";
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), eta_);
  return std::string(buf, ptr);
}

double eta_for_task(const AveragingSchedule& schedule, int t) {
  if (t < 1) {
    throw Error(Errc::invalid_index,
                "task index must be >= 1, got " + std::to_string(t));
  }
  return schedule.is_harmonic() ? 1.0 / static_cast<double>(t)
                                : schedule.constant_eta();
}

ParamStore average(const ParamStore& old, const ParamStore& adapted,
                   double eta, int current_task) {
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw Error(Errc::domain, "averaging weight must lie in [0, 1], got " +
                                  std::to_string(eta));
  }
  for (const auto& e : old.entries()) {
    const auto j = adapted.find(e.name);
    if (!j) {
      throw Error(Errc::structural_mismatch,
                  "adapted model lacks entry '" + e.name + "'");
    }
    const auto& a = adapted.entry(*j);
    if (a.shape != e.shape || !(a.tag == e.tag)) {
      throw Error(Errc::structural_mismatch,
                  "entry '" + e.name + "' differs in shape or partition");
    }
  }

  std::vector<double> out(adapted.value_count());
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    const auto& e = adapted.entry(i);
    const auto src = adapted.values(i);
    std::span<double> dst(out.data() + e.offset, e.count);
    if (e.tag.is_shared()) {
      if (!old.contains(e.name)) {
        throw Error(Errc::structural_mismatch,
                    "shared entry '" + e.name + "' is missing from old model");
      }
      const auto prev = old.values(e.name);
      if (eta == 0.0) {
        std::copy(prev.begin(), prev.end(), dst.begin());
      } else if (eta == 1.0) {
        std::copy(src.begin(), src.end(), dst.begin());
      } else {
        kernels::blend(prev, src, eta, dst);
      }
    } else if (e.tag.task_id() == current_task || !old.contains(e.name)) {
      // The current task's head, or a head the old model never had.
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      const auto prev = old.values(e.name);
      std::copy(prev.begin(), prev.end(), dst.begin());
    }
  }
  return ParamStore(adapted.layout_, std::move(out));
}

ParamStore average(const ParamStore& old, const ParamStore& adapted,
                   double eta) {
  const auto ids = adapted.task_ids();
  return average(old, adapted, eta, ids.empty() ? 0 : ids.back());
}

std::vector<double> init_uniform(std::size_t count, std::uint64_t seed,
                                 std::string_view name, double range) {
  CounterRng rng(derive_seed(seed, stream_tag(name)));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-range, range);
  return v;
}

ParamStore init_task_head(const ParamStore& store, int task_id,
                          std::span<const EntrySpec> head, std::uint64_t seed,
                          double init_range) {
  const auto tag = PartitionTag::task_specific(task_id);
  if (store.has_task_head(task_id)) {
    throw Error(Errc::duplicate_head,
                "task " + std::to_string(task_id) + " already has a head");
  }
  ParamStore::Builder b;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    const auto v = store.values(i);
    b.add(e.name, e.shape, e.tag, {v.begin(), v.end()});
  }
  for (const auto& spec : head) {
    b.add(spec.name, spec.shape, tag,
          init_uniform(shape_count(spec.shape), seed, spec.name, init_range));
  }
  return std::move(b).build();
}

} // namespace clforge
