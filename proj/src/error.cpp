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

#include "clforge/error.hpp"

namespace clforge {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_index: return "invalid index";
    case Errc::structural_mismatch: return "structural mismatch";
    case Errc::domain: return "domain error";
    case Errc::duplicate_head: return "duplicate head";
    case Errc::missing_head: return "missing head";
    case Errc::infeasible_alignment: return "infeasible alignment";
    case Errc::quota_underflow: return "quota underflow";
    case Errc::configuration: return "configuration error";
    case Errc::undefined_reference: return "undefined reference";
    case Errc::incomplete_matrix: return "incomplete matrix";
    case Errc::undefined_metric: return "undefined metric";
    case Errc::missing_baseline: return "missing baseline";
    case Errc::non_finite: return "non-finite value";
    case Errc::io: return "i/o error";
    case Errc::parse: return "parse error";
  }
  return "unknown error";
}

} // namespace clforge
