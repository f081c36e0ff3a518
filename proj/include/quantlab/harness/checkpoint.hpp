// Copyright 2026 The quantlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include "quantlab/model/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace quantlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian layout: "QLAB", version, model config block, precision,
/// tensor table, CRC-32 of every preceding byte. Projections whose stored
/// weights equal the dequantized packed block are written packed; all other
/// tensors are written as f32.
std::vector<std::uint8_t> serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Atomic write through a temporary file in the same directory.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Throws FormatError on a bad magic, version, checksum or tensor table.
Model load_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);

} // namespace quantlab
