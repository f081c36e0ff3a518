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

#include "quantlab/lgp/lgp.hpp"
#include "quantlab/lgr/lgr.hpp"
#include "quantlab/model/model.hpp"
#include "quantlab/neighborhood/neighborhood.hpp"
#include "quantlab/quant/quant.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace quantlab {

struct SmoothnessSettings {
    int sequences = 64;
    std::int64_t seq_len = 64;
    /// layer whose input the gradient is taken against
    int layer = 1;
    int bins = 32;
};

struct CalibrationSettings {
    int sequences = 16;
    std::int64_t seq_len = 64;
};

/// Everything a subcommand needs; the single input of a run.
struct ExperimentConfig {
    ModelConfig model;
    QuantSpec quant;
    LgpConfig lgp;
    /// lgr.schedule also drives baseline training
    LgrConfig lgr;
    NeighborhoodSpec neighborhood;
    SmoothnessSettings smoothness;
    CalibrationSettings calibration;
    std::vector<std::uint64_t> seeds{0};
    /// empty selects the built-in synthetic corpus
    std::string corpus_path;
    std::string output_dir = "runs";

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

inline constexpr std::size_t kSyntheticCorpusBytes = 1 << 20;

/// Parses JSON text. Missing keys keep their defaults; unknown keys, wrong
/// types and out-of-range values throw ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON: every field, keys sorted, doubles in round-trip form.
std::string canonical_json(const ExperimentConfig& config);

/// 64-bit FNV-1a of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

std::string fnv1a_hex(const std::string& bytes);

} // namespace quantlab
