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

#include <span>
#include <vector>

namespace quantlab {

enum class ScoringScope : std::uint8_t {
    /// mean NLL over every predicted position of the extended sequence
    full_sequence,
    /// NLL of the appended token alone
    appended_token_only,
};

enum class ContextAggregation : std::uint8_t {
    /// exp of the mean over contexts of the mean NLL
    log_mean,
    /// arithmetic mean over contexts of the per-context perplexity
    arithmetic_mean,
};

std::string to_string(ScoringScope s);
std::string to_string(ContextAggregation a);

struct NeighborhoodSpec {
    std::int64_t context_length = 128;
    int k_max = 40;
    ScoringScope scope = ScoringScope::full_sequence;
    ContextAggregation aggregation = ContextAggregation::log_mean;

    void validate(const ModelConfig& config) const;
};

struct RpplCurve {
    /// 1..k_max
    std::vector<int> k_values;
    std::vector<double> rppl;
    std::int64_t n_contexts = 0;
    std::int64_t context_length = 0;
    ScoringScope scope = ScoringScope::full_sequence;
    ContextAggregation aggregation = ContextAggregation::log_mean;
    /// per_context[c][k-1]: mean NLL of context c extended by its rank-k token
    std::vector<std::vector<double>> per_context_nll;

    /// (rppl(k_max) - rppl(1)) / rppl(1)
    double normalized_slope() const;
};

/// Random windows of `length` tokens drawn with a fixed seed.
std::vector<std::vector<std::int64_t>> sample_contexts(std::span<const std::int64_t> corpus, int count,
                                                       std::int64_t length, std::uint64_t seed);

/// Extends each context with the k-th most likely token under `model_q` and
/// scores the extension under `model_ref`.
RpplCurve rppl_curve(const Model& model_q, const Model& model_ref,
                     std::span<const std::vector<std::int64_t>> contexts, const NeighborhoodSpec& spec);

/// Mean NLL of context + token under `model_ref`.
double directional_derivative(const Model& model_ref, const std::vector<std::int64_t>& context, std::int64_t token,
                              ScoringScope scope = ScoringScope::full_sequence);

inline constexpr double kDefaultEffectiveThreshold = 1.5;

/// Largest k such that every rppl-j, j <= k, stays within threshold_ratio * rppl-1.
int effective_count(std::span<const double> rppl_by_k, double threshold_ratio = kDefaultEffectiveThreshold);

struct EffectiveCandidates {
    double threshold_ratio = kDefaultEffectiveThreshold;
    std::vector<int> per_context;
    double mean = 0.0;
};

EffectiveCandidates effective_candidates(const RpplCurve& curve,
                                         double threshold_ratio = kDefaultEffectiveThreshold);

} // namespace quantlab
