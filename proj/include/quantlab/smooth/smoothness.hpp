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

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace quantlab {

/// How per-token input gradients of one sequence become a single score.
enum class SequenceAggregation : std::uint8_t {
    /// 2-norm of the concatenation of all per-token gradients
    concatenated_norm,
    /// mean of the per-token 2-norms
    per_token_mean,
};

struct SmoothnessReport {
    double c_avg = 0.0;
    double c_lower = 0.0;
    std::vector<double> per_sequence_scores;
    std::vector<double> per_token_norms;
    std::int64_t sample_count = 0;
    SequenceAggregation aggregation = SequenceAggregation::concatenated_norm;
};

/// Builds a report from per-sequence lists of per-token gradient norms.
SmoothnessReport summarize_gradients(const std::vector<std::vector<double>>& token_norms,
                                     SequenceAggregation aggregation = SequenceAggregation::concatenated_norm);

/// Per-token input-gradient norms at `layer` for each sequence (all of equal length).
std::vector<std::vector<double>> token_gradient_norms(const Model& model,
                                                      std::span<const std::vector<std::int64_t>> sequences, int layer = 0,
                                                      int batch_size = 16);

SmoothnessReport smoothness_report(const Model& model, std::span<const std::vector<std::int64_t>> sequences,
                                   int layer = 0,
                                   SequenceAggregation aggregation = SequenceAggregation::concatenated_norm);

double compute_c_avg(const Model& model, std::span<const std::vector<std::int64_t>> sequences, int layer = 0);
double compute_c_lower(const Model& model, std::span<const std::vector<std::int64_t>> sequences, int layer = 0);

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::int64_t> counts;
};

/// Equal-width bins over [lo, hi]; the last bin is closed.
Histogram make_histogram(std::span<const double> values, double lo, double hi, int bins = 32);

struct ScoreDistribution {
    std::vector<double> scores;
    Histogram histogram;
    double median = 0.0;
};

/// Per-sequence scores of each model binned over a range shared by all models.
std::vector<ScoreDistribution> smoothness_score_distribution(std::span<const Model* const> models,
                                                             std::span<const std::vector<std::int64_t>> sequences,
                                                             int bins = 32);

double median(std::vector<double> values);
double percentile(std::vector<double> values, double q);

struct ProfileEntry {
    int layer = 0;
    TapSite site = TapSite::input_layernorm_in;
    double mean_norm = 0.0;
};

/// Mean per-token gradient norm at every tap. Layer n_layer's entry is the
/// input of the final normalization.
struct LayerGradientProfile {
    std::string model_tag;
    std::vector<ProfileEntry> entries;

    double at(int layer, TapSite site) const;
    /// mean over the four layer sites of layers [first, last]
    double mean_over_layers(int first, int last) const;
};

LayerGradientProfile layer_gradient_profile(const Model& model, const TokenBatch& batch, std::string tag = {});

/// Product of spectral norms: an upper bound on the input-gradient norm of a linear chain.
double c_upper_linear_chain(std::span<const Eigen::MatrixXd> weights);

} // namespace quantlab
