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

#include "model_fixture.hpp"
#include "test_helpers.hpp"

#include "quantlab/error.hpp"
#include "quantlab/gptq/gptq.hpp"
#include "quantlab/quant/quant.hpp"
#include "quantlab/smooth/smoothness.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace quantlab;
using quantlab::testing::sample_sequences;
using quantlab::testing::small_trained_model;

TEST(SmoothnessProbe, HandExampleAggregations)
{
    const std::vector<std::vector<double>> norms{{3.0, 4.0}, {1.0}};
    const SmoothnessReport cat = summarize_gradients(norms);
    EXPECT_DOUBLE_EQ(cat.per_sequence_scores[0], 5.0);
    EXPECT_DOUBLE_EQ(cat.per_sequence_scores[1], 1.0);
    EXPECT_DOUBLE_EQ(cat.c_avg, 3.0);
    EXPECT_DOUBLE_EQ(cat.c_lower, 5.0);
    EXPECT_EQ(cat.sample_count, 2);
    const SmoothnessReport mean = summarize_gradients(norms, SequenceAggregation::per_token_mean);
    EXPECT_DOUBLE_EQ(mean.per_sequence_scores[0], 3.5);
    EXPECT_DOUBLE_EQ(mean.c_lower, 3.5);
    EXPECT_DOUBLE_EQ(mean.c_avg, 2.25);
}

TEST(SmoothnessProbe, AverageNeverExceedsLowerBound)
{
    std::mt19937_64 rng(5);
    std::exponential_distribution<double> e(1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::vector<double>> norms(1 + rng() % 20);
        for (auto& s : norms)
            for (std::uint64_t t = 0; t < 1 + rng() % 8; ++t)
                s.push_back(e(rng));
        const auto rep = summarize_gradients(norms);
        EXPECT_LE(rep.c_avg, rep.c_lower);
    }
}

TEST(SmoothnessProbe, EmptySampleSetRejected)
{
    EXPECT_THROW(summarize_gradients({}), InputError);
    std::vector<std::vector<std::int64_t>> none;
    EXPECT_THROW(compute_c_avg(small_trained_model(), none), InputError);
}

TEST(SmoothnessProbe, LinearChainIsSandwiched)
{
    // f(x) = c^T W2 W1 x has a constant input gradient, so every sample gives the same score
    std::mt19937_64 rng(11);
    const Tensor w1 = quantlab::testing::random_tensor({6, 5}, rng, -1.0, 1.0);
    const Tensor w2 = quantlab::testing::random_tensor({4, 6}, rng, -1.0, 1.0);
    const Tensor c = quantlab::testing::random_tensor({1, 4}, rng, -1.0, 1.0);
    std::vector<std::vector<double>> norms;
    for (int s = 0; s < 16; ++s) {
        Graph g(DType::f64);
        Var x = g.param(quantlab::testing::random_tensor({5, 1}, rng));
        Var f = matmul(g.constant(c), matmul(g.constant(w2), matmul(g.constant(w1), x)));
        Gradients gr = backward(sum(f), {x});
        double sq = 0.0;
        for (double v : gr[x].value().to_vector())
            sq += v * v;
        norms.push_back({std::sqrt(sq)});
    }
    const auto rep = summarize_gradients(norms);
    EXPECT_NEAR(rep.c_avg, rep.c_lower, 1e-12 * rep.c_lower);
    const std::vector<Eigen::MatrixXd> chain{to_matrix(w1), to_matrix(w2), to_matrix(c)};
    EXPECT_LE(rep.c_lower, c_upper_linear_chain(chain) * (1 + 1e-12));
}

TEST(SmoothnessProbe, ScoresIndependentOfBatching)
{
    const Model& m = small_trained_model();
    const auto seqs = sample_sequences(6, 16, 21);
    const auto batched = token_gradient_norms(m, seqs, 1, 4);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto single = token_gradient_norms(m, std::span(seqs).subspan(i, 1), 1, 1);
        ASSERT_EQ(single[0].size(), batched[i].size());
        for (std::size_t t = 0; t < single[0].size(); ++t)
            EXPECT_NEAR(single[0][t], batched[i][t], 1e-5 * (1 + single[0][t]));
    }
}

TEST(SmoothnessProbe, TrainedModelReport)
{
    const Model& m = small_trained_model();
    const auto seqs = sample_sequences(24, 32, 22);
    const auto rep = smoothness_report(m, seqs);
    EXPECT_EQ(rep.sample_count, 24);
    EXPECT_EQ(rep.per_token_norms.size(), 24u * 32u);
    EXPECT_GT(rep.c_avg, 0.0);
    EXPECT_TRUE(std::isfinite(rep.c_lower));
    EXPECT_LE(rep.c_avg, rep.c_lower);
    EXPECT_DOUBLE_EQ(compute_c_avg(m, seqs), rep.c_avg);
    EXPECT_DOUBLE_EQ(compute_c_lower(m, seqs), rep.c_lower);

    Model t = m;
    t.set_precision(Precision::ternary);
    const auto tern = smoothness_report(t, seqs);
    EXPECT_TRUE(std::isfinite(tern.c_lower));
    EXPECT_NE(tern.c_avg, rep.c_avg);
}

TEST(SmoothnessProbe, LowerBoundStabilizes)
{
    const Model& m = small_trained_model();
    const auto seqs = sample_sequences(64, 32, 23);
    const auto scores = smoothness_report(m, seqs).per_sequence_scores;
    double half = 0.0;
    double full = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        full = std::max(full, scores[i]);
        if (i + 1 == scores.size() / 2)
            half = full;
    }
    EXPECT_LT((full - half) / full, 0.05);
}

TEST(SmoothnessProbe, HistogramSharedRange)
{
    const std::vector<double> v{0.0, 0.5, 1.0, 1.0, 0.26};
    const Histogram h = make_histogram(v, 0.0, 1.0, 4);
    EXPECT_EQ(h.counts, (std::vector<std::int64_t>{1, 1, 1, 2}));
    EXPECT_THROW(make_histogram(v, 0.0, 1.0, 0), InputError);

    const Model& fp = small_trained_model();
    const Model q = quantize_model_rtn(fp, QuantSpec{2, 32});
    const auto seqs = sample_sequences(12, 16, 24);
    const std::vector<const Model*> models{&fp, &q};
    const auto dist = smoothness_score_distribution(models, seqs, 32);
    ASSERT_EQ(dist.size(), 2u);
    EXPECT_EQ(dist[0].histogram.lo, dist[1].histogram.lo);
    EXPECT_EQ(dist[0].histogram.hi, dist[1].histogram.hi);
    for (const auto& d : dist) {
        std::int64_t total = 0;
        for (auto c : d.histogram.counts)
            total += c;
        EXPECT_EQ(total, 12);
        EXPECT_EQ(d.histogram.counts.size(), 32u);
    }
}

TEST(SmoothnessProbe, MedianAndPercentile)
{
    EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
    EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
    EXPECT_DOUBLE_EQ(percentile({0.0, 10.0}, 0.9), 9.0);
}

TEST(SmoothnessProbe, LayerProfileComplete)
{
    const Model& m = small_trained_model();
    TokenBatch b;
    b.batch = 2;
    b.seq = 16;
    for (const auto& s : sample_sequences(2, 16, 25))
        b.ids.insert(b.ids.end(), s.begin(), s.end());
    const auto prof = layer_gradient_profile(m, b, "fp");
    const int n = m.config().n_layer;
    for (int l = 0; l < n; ++l)
        for (TapSite s : kLayerSites)
            EXPECT_GT(prof.at(l, s), 0.0);
    EXPECT_GT(prof.at(n, TapSite::input_layernorm_in), 0.0);
    EXPECT_DOUBLE_EQ(prof.at(0, TapSite::embedding_out), prof.at(0, TapSite::input_layernorm_in));
    EXPECT_THROW(prof.at(n + 1, TapSite::input_layernorm_in), ContractError);

    // the tap at layer l equals the per-token mean of the input gradient used by the probe
    const auto norms = token_gradient_norms(m, std::vector<std::vector<std::int64_t>>{
                                                   {b.ids.begin(), b.ids.begin() + 16}, {b.ids.begin() + 16, b.ids.end()}},
                                            1);
    double acc = 0.0;
    for (const auto& s : norms)
        for (double v : s)
            acc += v;
    EXPECT_NEAR(prof.at(1, TapSite::input_layernorm_in), acc / 32.0, 1e-4 * acc / 32.0);
}
