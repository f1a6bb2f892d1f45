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

#include "clforge/checkpoint.hpp"

#include <fstream>
#include <limits>

#include "clforge/binary_io.hpp"

namespace clforge {

namespace {
constexpr char kMagic[4] = {'C', 'L', 'F', 'G'};
}

void write_checkpoint(std::ostream& out, const ParamStore& store) {
  out.write(kMagic, 4);
  binio::put_u32(out, kCheckpointVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    binio::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    if (e.tag.is_shared()) {
      out.put(0);
    } else {
      out.put(1);
      binio::put_u32(out, static_cast<std::uint32_t>(e.tag.task_id()));
    }
    binio::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) binio::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : store.values(i)) binio::put_f64(out, v);
  }
  if (!out) throw Error(Errc::io, "failed writing checkpoint");
}

ParamStore read_checkpoint(std::istream& in) {
  char magic[4];
  binio::read_exact(in, magic, 4, "checkpoint magic");
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw Error(Errc::parse, "not a checkpoint (bad magic)");
  }
  const auto version = binio::get_u32(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw Error(Errc::parse, "unsupported checkpoint version " +
                                 std::to_string(version));
  }
  const auto count = binio::get_u32(in, "entry count");
  ParamStore::Builder b;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = binio::get_u32(in, "name length");
    if (len > (1u << 20)) throw Error(Errc::parse, "unreasonable name length");
    std::string name(len, '\0');
    binio::read_exact(in, name.data(), len, "entry name");
    const auto tag_byte = binio::get_u8(in, "partition tag");
    PartitionTag tag = PartitionTag::shared();
    if (tag_byte == 1) {
      tag = PartitionTag::task_specific(
          static_cast<int>(binio::get_u32(in, "task id")));
    } else if (tag_byte != 0) {
      throw Error(Errc::parse, "invalid partition tag byte for '" + name + "'");
    }
    const auto rank = binio::get_u32(in, "rank");
    if (rank > 16) throw Error(Errc::parse, "unreasonable rank for '" + name + "'");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = binio::get_u32(in, "dimension");
      if (d != 0 && n > (std::numeric_limits<std::size_t>::max() >> 4) / d) {
        throw Error(Errc::parse, "shape overflow for '" + name + "'");
      }
      n *= d;
    }
    std::vector<double> values(n);
    for (auto& v : values) v = binio::get_f64(in, "values");
    b.add(std::move(name), std::move(shape), tag, std::move(values));
  }
  return std::move(b).build();
}

void save_checkpoint(const std::filesystem::path& path,
                     const ParamStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot open " + path.string());
  write_checkpoint(out, store);
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return read_checkpoint(in);
}

} // namespace clforge
