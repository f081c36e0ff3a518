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

#include "quantlab/error.hpp"
#include "quantlab/neighborhood/neighborhood.hpp"
#include "quantlab/quant/quant.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace quantlab;
using quantlab::testing::small_corpus;
using quantlab::testing::small_trained_model;

namespace {

NeighborhoodSpec small_spec(ScoringScope scope = ScoringScope::full_sequence)
{
    NeighborhoodSpec s;
    s.context_length = 24;
    s.k_max = 40;
    s.scope = scope;
    return s;
}

} // namespace

TEST(NeighborhoodEval, EffectiveCountArithmetic)
{
    const std::vector<double> a{2.0, 3.0, 9.0, 2.0};
    EXPECT_EQ(effective_count(a, 1.6), 2);
    const std::vector<double> flat(40, 5.0);
    EXPECT_EQ(effective_count(flat, 1.5), 40);
    EXPECT_THROW(effective_count(a, 1.0), InputError);
    EXPECT_EQ(effective_count(std::vector<double>{}, 1.5), 0);
}

TEST(NeighborhoodEval, SelfReferenceMonotoneEveryContext)
{
    const Model& m = small_trained_model();
    const auto ctx = sample_contexts(small_corpus(), 20, 24, 31);
    for (ScoringScope scope : {ScoringScope::full_sequence, ScoringScope::appended_token_only}) {
        const RpplCurve curve = rppl_curve(m, m, ctx, small_spec(scope));
        ASSERT_EQ(curve.per_context_nll.size(), 20u);
        for (const auto& c : curve.per_context_nll)
            for (std::size_t k = 1; k < c.size(); ++k)
                EXPECT_LE(c[k - 1], c[k]) << to_string(scope) << " k=" << k;
        for (std::size_t k = 1; k < curve.rppl.size(); ++k)
            EXPECT_LE(curve.rppl[k - 1], curve.rppl[k]);
        for (double r : curve.rppl)
            EXPECT_GE(r, 1.0);
        EXPECT_EQ(curve.k_values.front(), 1);
        EXPECT_EQ(curve.k_values.back(), 40);
    }
}

TEST(NeighborhoodEval, GreedyRpplMatchesIndependentPerplexity)
{
    const Model& m = small_trained_model();
    const auto ctx = sample_contexts(small_corpus(), 6, 24, 32);
    const RpplCurve curve = rppl_curve(m, m, ctx, small_spec());
    for (std::size_t c = 0; c < ctx.size(); ++c) {
        const auto top = next_token_ranking(m, ctx[c], 1).front().token;
        const double direct = std::exp(directional_derivative(m, ctx[c], top));
        EXPECT_NEAR(std::exp(curve.per_context_nll[c][0]), direct, 1e-5 * direct);

        std::vector<std::int64_t> ext = ctx[c];
        ext.push_back(top);
        EXPECT_NEAR(curve.per_context_nll[c][0], lm_loss(m, ext), 1e-5);
    }
}

TEST(NeighborhoodEval, AppendedScopeIsLastTokenNll)
{
    const Model& m = small_trained_model();
    const auto ctx = sample_contexts(small_corpus(), 3, 24, 33);
    const RpplCurve curve = rppl_curve(m, m, ctx, small_spec(ScoringScope::appended_token_only));
    for (std::size_t c = 0; c < ctx.size(); ++c) {
        const auto ranked = next_token_ranking(m, ctx[c], 5);
        for (int k = 0; k < 5; ++k)
            EXPECT_NEAR(curve.per_context_nll[c][static_cast<std::size_t>(k)],
                        directional_derivative(m, ctx[c], ranked[static_cast<std::size_t>(k)].token,
                                               ScoringScope::appended_token_only),
                        1e-5);
    }
}

TEST(NeighborhoodEval, TrueContinuationBeatsRandomToken)
{
    const Model& m = small_trained_model();
    const auto windows = sample_contexts(small_corpus(), 40, 25, 34);
    std::mt19937_64 rng(35);
    std::uniform_int_distribution<std::int64_t> tok(0, 255);
    int wins = 0;
    for (const auto& w : windows) {
        const std::vector<std::int64_t> ctx(w.begin(), w.end() - 1);
        const double truth = directional_derivative(m, ctx, w.back());
        const double random = directional_derivative(m, ctx, tok(rng));
        wins += truth <= random ? 1 : 0;
    }
    EXPECT_GT(wins, 20);
}

TEST(NeighborhoodEval, DeterministicAndOrderInvariant)
{
    const Model& fp = small_trained_model();
    const Model q = quantize_model_rtn(fp, QuantSpec{2, 32});
    auto ctx = sample_contexts(small_corpus(), 18, 24, 36);
    const RpplCurve a = rppl_curve(q, fp, ctx, small_spec());
    const RpplCurve b = rppl_curve(q, fp, ctx, small_spec());
    EXPECT_EQ(a.rppl, b.rppl);
    EXPECT_DOUBLE_EQ(directional_derivative(fp, ctx[0], 7), directional_derivative(fp, ctx[0], 7));

    std::reverse(ctx.begin(), ctx.end());
    const RpplCurve r = rppl_curve(q, fp, ctx, small_spec());
    for (std::size_t k = 0; k < a.rppl.size(); ++k)
        EXPECT_NEAR(a.rppl[k], r.rppl[k], 1e-9 * a.rppl[k]);
}

TEST(NeighborhoodEval, AggregationModes)
{
    const Model& m = small_trained_model();
    const auto ctx = sample_contexts(small_corpus(), 8, 24, 37);
    NeighborhoodSpec s = small_spec();
    const RpplCurve geo = rppl_curve(m, m, ctx, s);
    s.aggregation = ContextAggregation::arithmetic_mean;
    const RpplCurve arith = rppl_curve(m, m, ctx, s);
    for (std::size_t k = 0; k < geo.rppl.size(); ++k)
        EXPECT_GE(arith.rppl[k], geo.rppl[k] * (1 - 1e-12));

    double acc = 0.0;
    for (const auto& c : geo.per_context_nll)
        acc += c[0];
    EXPECT_NEAR(geo.rppl[0], std::exp(acc / 8.0), 1e-12 * geo.rppl[0]);
}

TEST(NeighborhoodEval, EffectiveCandidatesPerContext)
{
    const Model& m = small_trained_model();
    const auto ctx = sample_contexts(small_corpus(), 8, 24, 38);
    const RpplCurve curve = rppl_curve(m, m, ctx, small_spec(ScoringScope::appended_token_only));
    const auto eff = effective_candidates(curve, 1.5);
    ASSERT_EQ(eff.per_context.size(), 8u);
    double acc = 0.0;
    for (int c : eff.per_context) {
        EXPECT_GE(c, 1);
        EXPECT_LE(c, 40);
        acc += c;
    }
    EXPECT_DOUBLE_EQ(eff.mean, acc / 8.0);
}

TEST(NeighborhoodEval, ContractViolations)
{
    const Model& m = small_trained_model();
    ModelConfig other = m.config();
    other.vocab_size = 128;
    const Model small_vocab(other, 1);
    const auto ctx = sample_contexts(small_corpus(), 2, 24, 39);
    EXPECT_THROW(rppl_curve(small_vocab, m, ctx, small_spec()), ContractError);

    NeighborhoodSpec too_long = small_spec();
    too_long.context_length = 32;
    const auto long_ctx = sample_contexts(small_corpus(), 2, 32, 39);
    EXPECT_THROW(rppl_curve(m, m, long_ctx, too_long), ConfigError);

    NeighborhoodSpec wide = small_spec();
    wide.k_max = 300;
    EXPECT_THROW(rppl_curve(m, m, ctx, wide), ConfigError);
    EXPECT_THROW(directional_derivative(m, ctx[0], 256), InputError);
}
