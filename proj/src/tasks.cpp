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

#include "clforge/tasks.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "clforge/binary_io.hpp"
#include "clforge/error.hpp"
#include "clforge/rng.hpp"

namespace clforge {
namespace {

constexpr std::uint64_t kTaskStream = stream_tag("task");
constexpr std::uint64_t kBaseStream = stream_tag("prototype-base");
constexpr std::uint64_t kPerturbStream = stream_tag("prototype-perturbation");

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t key) {
  CounterRng rng(key);
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal();
  return m;
}

void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    double n = 0.0;
    for (double v : row) n += v * v;
    n = std::sqrt(n);
    if (n == 0.0) {
      row[0] = 1.0;
      continue;
    }
    for (double& v : row) v /= n;
  }
}

std::uint64_t split_stream(Split split) {
  switch (split) {
    case Split::train: return stream_tag("split-train");
    case Split::val: return stream_tag("split-val");
    case Split::test: return stream_tag("split-test");
  }
  return 0;
}

} // namespace

std::string_view to_string(SuiteKind kind) {
  return kind == SuiteKind::dialect_continuum ? "dialect" : "language";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

SuiteKind parse_suite_kind(std::string_view text) {
  if (text == "dialect" || text == "dialect_continuum") {
    return SuiteKind::dialect_continuum;
  }
  if (text == "language" || text == "language_family") {
    return SuiteKind::language_family;
  }
  throw Error(Errc::parse, "unknown suite kind '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw Error(Errc::parse, "unknown split '" + std::string(text) + "'");
}

void SuiteConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw Error(Errc::configuration, "suite config: " + msg);
  };
  if (tasks < 2) fail("at least two tasks are required");
  if (vocab < 1) fail("vocab must be >= 1");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (!(similarity >= 0.0 && similarity <= 1.0)) fail("similarity must lie in [0, 1]");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!(perturbation_scale >= 0.0) || !std::isfinite(perturbation_scale)) {
    fail("perturbation_scale must be >= 0");
  }
  for (const auto& [task, sigma] : noise_overrides) {
    if (task < 1 || task > tasks) fail("noise override for unknown task");
    if (!(sigma >= 0.0)) fail("noise override must be >= 0");
  }
  if (frames_per_token.lo < 1 || frames_per_token.hi < frames_per_token.lo) {
    fail("frames_per_token must satisfy 1 <= lo <= hi");
  }
  if (target_len.lo < 1 || target_len.hi < target_len.lo) {
    fail("target_len must satisfy 1 <= lo <= hi");
  }
  if (n_train_first < 1 || n_train < 1 || n_val < 1 || n_test < 1) {
    fail("split sizes must be >= 1");
  }
}

std::uint64_t SuiteConfig::hash() const {
  nlohmann::json j = {{"kind", to_string(kind)},
                      {"tasks", tasks},
                      {"vocab", vocab},
                      {"feature_dim", feature_dim},
                      {"similarity", similarity},
                      {"perturbation_scale", perturbation_scale},
                      {"n_train_first", n_train_first},
                      {"n_train", n_train},
                      {"n_val", n_val},
                      {"n_test", n_test},
                      {"noise_sigma", noise_sigma},
                      {"frames_per_token", {frames_per_token.lo, frames_per_token.hi}},
                      {"target_len", {target_len.lo, target_len.hi}},
                      {"seed", seed}};
  for (const auto& [task, sigma] : noise_overrides) {
    j["noise_overrides"][std::to_string(task)] = sigma;
  }
  return stream_tag(j.dump());
}

std::size_t TaskSpec::split_size(Split split) const {
  switch (split) {
    case Split::train: return n_train;
    case Split::val: return n_val;
    case Split::test: return n_test;
  }
  return 0;
}

std::vector<TaskSpec> gen_task_suite(const SuiteConfig& config) {
  config.validate();
  const Matrix base = gaussian_matrix(config.vocab, config.feature_dim,
                                      derive_seed(config.seed, kBaseStream));
  std::vector<TaskSpec> suite;
  for (int t = 1; t <= config.tasks; ++t) {
    TaskSpec spec;
    spec.task_id = t;
    spec.vocab = config.vocab;
    spec.seed = derive_seed(config.seed, kTaskStream, static_cast<std::uint64_t>(t));
    spec.n_train = t == 1 ? config.n_train_first : config.n_train;
    spec.n_val = config.n_val;
    spec.n_test = config.n_test;
    const auto ov = config.noise_overrides.find(t);
    spec.noise_sigma = ov != config.noise_overrides.end() ? ov->second
                                                          : config.noise_sigma;
    spec.frames_per_token = config.frames_per_token;
    spec.target_len = config.target_len;

    Matrix perturb = gaussian_matrix(
        config.vocab, config.feature_dim,
        derive_seed(config.seed, kPerturbStream, static_cast<std::uint64_t>(t)));
    if (config.kind == SuiteKind::dialect_continuum) {
      const double s = config.similarity;
      for (std::size_t i = 0; i < perturb.data.size(); ++i) {
        perturb.data[i] = s * base.data[i] +
                          (1.0 - s) * config.perturbation_scale * perturb.data[i];
      }
      spec.head_mode = HeadMode::shared;
    } else {
      spec.head_mode = HeadMode::own;
    }
    normalize_rows(perturb);
    spec.prototypes = std::move(perturb);
    suite.push_back(std::move(spec));
  }
  return suite;
}

Utterance synthesize_utterance(const TaskSpec& spec, Split split,
                               std::size_t index) {
  CounterRng rng(derive_seed(spec.seed, split_stream(split), index));
  const std::size_t dim = spec.prototypes.cols;
  Utterance u;
  u.task_id = spec.task_id;
  const auto words = rng.range(spec.target_len.lo, spec.target_len.hi);
  u.target.resize(static_cast<std::size_t>(words));
  for (auto& tok : u.target) tok = static_cast<int>(rng.below(spec.vocab));

  std::vector<std::size_t> frames(u.target.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < u.target.size(); ++i) {
    auto f = rng.range(spec.frames_per_token.lo, spec.frames_per_token.hi);
    if (i > 0 && u.target[i] == u.target[i - 1] && f < 2) f = 2;
    frames[i] = static_cast<std::size_t>(f);
    total += frames[i];
  }
  u.features = Matrix(total, dim);
  std::size_t row = 0;
  for (std::size_t i = 0; i < u.target.size(); ++i) {
    const auto proto = spec.prototypes.row(static_cast<std::size_t>(u.target[i]));
    for (std::size_t f = 0; f < frames[i]; ++f, ++row) {
      auto dst = u.features.row(row);
      for (std::size_t d = 0; d < dim; ++d) {
        dst[d] = spec.noise_sigma == 0.0
                     ? proto[d]
                     : proto[d] + spec.noise_sigma * rng.normal();
      }
    }
  }
  return u;
}

Dataset synthesize(const TaskSpec& spec, Split split) {
  Dataset d;
  d.task_id = spec.task_id;
  d.split = split;
  d.vocab = spec.vocab;
  d.feature_dim = spec.prototypes.cols;
  d.seed = spec.seed;
  const std::size_t n = spec.split_size(split);
  d.utterances.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.utterances.push_back(synthesize_utterance(spec, split, i));
  }
  return d;
}

void write_dataset(std::ostream& out, const Dataset& data) {
  const nlohmann::json header = {{"task_id", data.task_id},
                                 {"split", to_string(data.split)},
                                 {"vocab", data.vocab},
                                 {"feature_dim", data.feature_dim},
                                 {"count", data.utterances.size()},
                                 {"seed", data.seed}};
  out << header.dump() << '\n';
  for (const auto& u : data.utterances) {
    binio::put_u32(out, static_cast<std::uint32_t>(u.target.size()));
    for (int tok : u.target) binio::put_u32(out, static_cast<std::uint32_t>(tok));
    binio::put_u32(out, static_cast<std::uint32_t>(u.features.rows));
    binio::put_u32(out, static_cast<std::uint32_t>(u.features.cols));
    for (double v : u.features.data) binio::put_f64(out, v);
  }
  if (!out) throw Error(Errc::io, "failed writing dataset");
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::parse, "dataset: missing header");
  Dataset d;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    d.task_id = header.at("task_id").get<int>();
    d.split = parse_split(header.at("split").get<std::string>());
    d.vocab = header.at("vocab").get<std::size_t>();
    d.feature_dim = header.at("feature_dim").get<std::size_t>();
    d.seed = header.at("seed").get<std::uint64_t>();
    count = header.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, std::string("dataset header: ") + e.what());
  }
  d.utterances.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    Utterance u;
    u.task_id = d.task_id;
    const auto words = binio::get_u32(in, "target length");
    if (words > (1u << 20)) throw Error(Errc::parse, "dataset: unreasonable target length");
    u.target.resize(words);
    for (auto& tok : u.target) tok = static_cast<int>(binio::get_u32(in, "token"));
    const auto frames = binio::get_u32(in, "frame count");
    const auto dim = binio::get_u32(in, "feature dim");
    if (dim != d.feature_dim || frames > (1u << 24)) {
      throw Error(Errc::parse, "dataset: record shape disagrees with header");
    }
    u.features = Matrix(frames, dim);
    for (double& v : u.features.data) v = binio::get_f64(in, "features");
    d.utterances.push_back(std::move(u));
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot open " + path.string());
  write_dataset(out, data);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return read_dataset(in);
}

} // namespace clforge
