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

#include "quantlab/smooth/smoothness.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace quantlab {

SmoothnessReport summarize_gradients(const std::vector<std::vector<double>>& token_norms,
                                     SequenceAggregation aggregation)
{
    if (token_norms.empty())
        throw InputError("smoothness: empty sample set");
    SmoothnessReport rep;
    rep.aggregation = aggregation;
    rep.sample_count = static_cast<std::int64_t>(token_norms.size());
    for (const auto& seq : token_norms) {
        double score = 0.0;
        if (aggregation == SequenceAggregation::concatenated_norm) {
            for (double n : seq)
                score += n * n;
            score = std::sqrt(score);
        } else {
            score = seq.empty() ? 0.0 : std::accumulate(seq.begin(), seq.end(), 0.0) / static_cast<double>(seq.size());
        }
        rep.per_sequence_scores.push_back(score);
        rep.per_token_norms.insert(rep.per_token_norms.end(), seq.begin(), seq.end());
    }
    rep.c_avg = std::accumulate(rep.per_sequence_scores.begin(), rep.per_sequence_scores.end(), 0.0)
                / static_cast<double>(rep.sample_count);
    rep.c_lower = *std::max_element(rep.per_sequence_scores.begin(), rep.per_sequence_scores.end());
    // the mean of finitely many values never exceeds their maximum; guard rounding
    rep.c_avg = std::min(rep.c_avg, rep.c_lower);
    return rep;
}

std::vector<std::vector<double>> token_gradient_norms(const Model& model,
                                                      std::span<const std::vector<std::int64_t>> sequences, int layer,
                                                      int batch_size)
{
    if (sequences.empty())
        throw InputError("smoothness: empty sample set");
    const auto seq = static_cast<std::int64_t>(sequences.front().size());
    std::vector<std::vector<double>> out;
    for (std::size_t start = 0; start < sequences.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(sequences.size(), start + static_cast<std::size_t>(batch_size));
        TokenBatch b;
        b.batch = static_cast<std::int64_t>(stop - start);
        b.seq = seq;
        for (std::size_t i = start; i < stop; ++i) {
            if (static_cast<std::int64_t>(sequences[i].size()) != seq)
                throw InputError("smoothness: sequences must share a length");
            b.ids.insert(b.ids.end(), sequences[i].begin(), sequences[i].end());
        }
        const InputGradient ig = input_gradient(model, b, layer);
        const auto d = ig.grad.dim(-1);
        for (std::int64_t s = 0; s < b.batch; ++s) {
            std::vector<double> norms;
            for (std::int64_t t = 0; t < seq; ++t) {
                double sq = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double v = ig.grad.at((s * seq + t) * d + j);
                    sq += v * v;
                }
                norms.push_back(std::sqrt(sq));
            }
            out.push_back(std::move(norms));
        }
    }
    return out;
}

SmoothnessReport smoothness_report(const Model& model, std::span<const std::vector<std::int64_t>> sequences, int layer,
                                   SequenceAggregation aggregation)
{
    return summarize_gradients(token_gradient_norms(model, sequences, layer), aggregation);
}

double compute_c_avg(const Model& model, std::span<const std::vector<std::int64_t>> sequences, int layer)
{
    return smoothness_report(model, sequences, layer).c_avg;
}

double compute_c_lower(const Model& model, std::span<const std::vector<std::int64_t>> sequences, int layer)
{
    return smoothness_report(model, sequences, layer).c_lower;
}

Histogram make_histogram(std::span<const double> values, double lo, double hi, int bins)
{
    if (bins < 1)
        throw InputError("histogram needs at least one bin");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    const double width = hi > lo ? (hi - lo) / bins : 1.0;
    for (double v : values) {
        auto b = static_cast<std::int64_t>(std::floor((v - lo) / width));
        b = std::clamp<std::int64_t>(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

double percentile(std::vector<double> values, double q)
{
    if (values.empty())
        throw InputError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

double median(std::vector<double> values)
{
    return percentile(std::move(values), 0.5);
}

std::vector<ScoreDistribution> smoothness_score_distribution(std::span<const Model* const> models,
                                                             std::span<const std::vector<std::int64_t>> sequences,
                                                             int bins)
{
    std::vector<ScoreDistribution> out;
    double lo = INFINITY;
    double hi = -INFINITY;
    for (const Model* m : models) {
        ScoreDistribution d;
        d.scores = smoothness_report(*m, sequences).per_sequence_scores;
        d.median = median(d.scores);
        for (double s : d.scores) {
            lo = std::min(lo, s);
            hi = std::max(hi, s);
        }
        out.push_back(std::move(d));
    }
    for (auto& d : out)
        d.histogram = make_histogram(d.scores, lo, hi, bins);
    return out;
}

double LayerGradientProfile::at(int layer, TapSite site) const
{
    for (const auto& e : entries)
        if (e.layer == layer && e.site == site)
            return e.mean_norm;
    throw ContractError("profile has no entry for layer " + std::to_string(layer) + " site " + to_string(site));
}

double LayerGradientProfile::mean_over_layers(int first, int last) const
{
    double acc = 0.0;
    int n = 0;
    for (const auto& e : entries)
        if (e.layer >= first && e.layer <= last && e.site != TapSite::embedding_out) {
            acc += e.mean_norm;
            ++n;
        }
    if (n == 0)
        throw ContractError("profile has no entries in the requested layer range");
    return acc / n;
}

LayerGradientProfile layer_gradient_profile(const Model& model, const TokenBatch& batch, std::string tag)
{
    Graph g(DType::f32);
    ForwardOptions opt;
    opt.reduction = LossReduction::sum_of_sequence_means;
    ForwardTrace tr = forward(g, model, batch, opt);
    const int n = model.config().n_layer;
    std::vector<Var> taps;
    for (int l = 0; l < n; ++l)
        for (TapSite s : kLayerSites)
            taps.push_back(tr.tap(l, s));
    taps.push_back(tr.hidden.back());
    Gradients grads = backward(tr.loss, taps);

    auto mean_norm = [](const Tensor& t) {
        const auto d = t.dim(-1);
        const auto rows = t.size() / d;
        double acc = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) {
            double sq = 0.0;
            for (std::int64_t j = 0; j < d; ++j)
                sq += t.at(r * d + j) * t.at(r * d + j);
            acc += std::sqrt(sq);
        }
        return acc / static_cast<double>(rows);
    };
    LayerGradientProfile prof;
    prof.model_tag = std::move(tag);
    std::size_t i = 0;
    for (int l = 0; l < n; ++l)
        for (TapSite s : kLayerSites) {
            const double v = mean_norm(grads[taps[i++]].value());
            prof.entries.push_back({l, s, v});
            if (l == 0 && s == TapSite::input_layernorm_in)
                prof.entries.push_back({0, TapSite::embedding_out, v});
        }
    prof.entries.push_back({n, TapSite::input_layernorm_in, mean_norm(grads[taps[i]].value())});
    return prof;
}

double c_upper_linear_chain(std::span<const Eigen::MatrixXd> weights)
{
    double prod = 1.0;
    for (const auto& w : weights) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
        prod *= svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    }
    return prod;
}

} // namespace quantlab
