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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace quantlab {

/// Byte-level tokenization: one token per byte.
std::vector<std::int64_t> tokenize_bytes(const std::string& text);

/// Reads a file as bytes. Throws InputError for a missing or empty file.
std::vector<std::int64_t> ingest_corpus(const std::filesystem::path& path);

struct CorpusSplit {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> heldout;
};

/// Deterministic 90/10 split by shuffling fixed-size blocks with `seed`.
CorpusSplit split_corpus(const std::vector<std::int64_t>& tokens, std::uint64_t seed, std::int64_t block = 4096);

/// English-like text from a seeded stochastic grammar (no corpus is shipped).
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

} // namespace quantlab
