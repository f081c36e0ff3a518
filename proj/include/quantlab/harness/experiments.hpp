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

#include "quantlab/harness/config.hpp"
#include "quantlab/harness/corpus.hpp"
#include "quantlab/harness/run.hpp"
#include "quantlab/model/model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace quantlab {

/// One invocation of a subcommand. Options a subcommand does not use must be
/// left at their defaults, otherwise the request is rejected with ConfigError.
struct RunRequest {
    std::string subcommand;
    ExperimentConfig config;
    /// overrides config.seeds when non-empty
    std::vector<std::uint64_t> seeds;
    /// overrides config.quant.bits when non-empty
    std::vector<int> bits;
    std::vector<std::filesystem::path> checkpoints;
    std::filesystem::path model_q;
    std::filesystem::path model_ref;
    /// train: fp | ternary | lgr; quantize: rtn | gptq | lgp
    std::string variant;
    /// anisotropy target projection
    std::string layer;
    std::vector<int> reg_layers;
    int contexts = 0;

    std::vector<std::uint64_t> effective_seeds() const;
    std::vector<int> effective_bits() const;
};

struct NamedModel {
    std::string file;
    Model model;
};

struct RunOutput {
    std::vector<CsvTable> tables;
    std::vector<NamedModel> models;
};

std::vector<std::string> subcommand_names();

/// Token stream of the configured corpus (or the synthetic one), split 90/10.
CorpusSplit load_corpus(const ExperimentConfig& config);

/// Runs a subcommand in memory. Throws ConfigError for a subcommand/option mismatch.
RunOutput run_experiment(const RunRequest& request);

RunManifest make_manifest(const RunRequest& request);

/// Runs a subcommand and publishes manifest.json, its CSVs and checkpoints
/// under `out`. Returns the manifest hash.
std::string execute(const RunRequest& request, const std::filesystem::path& out);

} // namespace quantlab
