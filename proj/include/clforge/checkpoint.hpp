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

#include <filesystem>
#include <iosfwd>

#include "clforge/params.hpp"

namespace clforge {

// Binary checkpoint layout, all integers and floats little-endian:
//
//   "CLFG"  u32 version  u32 entry_count
//   per entry:
//     u32 name_length, name bytes (UTF-8)
//     u8 tag (0 = shared, 1 = task-specific), [u32 task_id if tag == 1]
//     u32 rank, rank x u32 dims
//     product(dims) x f64 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const ParamStore& store);
ParamStore read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path,
                     const ParamStore& store);
ParamStore load_checkpoint(const std::filesystem::path& path);

} // namespace clforge
