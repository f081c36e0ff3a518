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

#include "test_helpers.hpp"

#include "quantlab/error.hpp"
#include "quantlab/harness/corpus.hpp"
#include "quantlab/model/model.hpp"
#include "quantlab/model/train.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace quantlab;

namespace {

ModelConfig tiny_config()
{
    ModelConfig c;
    c.n_layer = 2;
    c.n_head = 2;
    c.d_hidden = 16;
    c.d_inter = 32;
    c.max_seq_len = 16;
    return c;
}

/// Loss of a single sequence recomputed from a replaced hidden state x^(layer).
double loss_from_hidden(const Model& m, const std::vector<std::int64_t>& tokens, int layer, const Tensor& hidden)
{
    Graph g(DType::f64);
    auto weight = [&](const std::string& n) { return g.constant(m.param(n)); };
    Var x = g.constant(hidden);
    const auto seq = static_cast<std::int64_t>(tokens.size());
    for (int l = layer; l < m.config().n_layer; ++l)
        x = layer_forward(g, m, l, x, 1, seq, weight);
    Var logits = matmul(mul(rms_norm(x), weight("final_norm")), weight("lm_head"), false, true);
    auto targets = std::make_shared<std::vector<std::int64_t>>(tokens.begin() + 1, tokens.end());
    targets->push_back(-1);
    return cross_entropy(logits, targets).value().at(0);
}

} // namespace

TEST(LmModel, ParameterCountMatchesHandCount)
{
    ModelConfig c;
    c.n_layer = 2;
    c.n_head = 2;
    c.d_hidden = 32;
    c.d_inter = 64;
    c.max_seq_len = 64;
    Model m(c, 0);
    // 256*32 (tokens) + 64*32 (positions) + 256*32 (head) + 32 (final gain)
    // + 2 * (4*32*32 + 3*32*64 + 2*32) = 39072
    EXPECT_EQ(m.parameter_count(), 39072);
    EXPECT_EQ(expected_parameter_count(c), 39072);
    EXPECT_EQ(m.linear_names().size(), 14u);
}

TEST(LmModel, InvalidConfigIsRejected)
{
    ModelConfig c = tiny_config();
    c.n_head = 3;
    EXPECT_THROW(Model(c, 0), ConfigError);
    c = tiny_config();
    c.n_layer = 0;
    EXPECT_THROW(Model(c, 0), ConfigError);
}

TEST(LmModel, SeedDeterminism)
{
    Model a(tiny_config(), 7);
    Model b(tiny_config(), 7);
    Model c(tiny_config(), 8);
    for (const auto& [name, t] : a.params())
        EXPECT_TRUE(t.identical(b.param(name))) << name;
    EXPECT_FALSE(a.param("layers.0.q_proj").identical(c.param("layers.0.q_proj")));
}

TEST(LmModel, FreshLossNearUniform)
{
    Model m(tiny_config(), 1);
    std::vector<std::int64_t> tokens{72, 101, 108, 108, 111, 32, 119, 111, 114, 108, 100};
    EXPECT_NEAR(lm_loss(m, tokens), std::log(256.0), 0.1);
}

TEST(LmModel, TwoTokenLossIsSinglePrediction)
{
    Model m(tiny_config(), 2);
    const double loss = lm_loss(m, TokenBatch::single({5, 9}), false, DType::f64);
    const auto probs = next_token_probabilities(m, {{5}}).front();
    EXPECT_NEAR(loss, -std::log(probs[9]), 1e-5);
}

TEST(LmModel, OneHotUnembeddingDrivesLossToZero)
{
    ModelConfig c = tiny_config();
    Model m(c, 3);
    const std::int64_t d = c.d_hidden;
    for (int l = 0; l < c.n_layer; ++l) {
        m.set_param(layer_param(l, "o_proj"), Tensor({d, d}, DType::f32));
        m.set_param(layer_param(l, "down_proj"), Tensor({d, c.d_inter}, DType::f32));
    }
    m.set_param("pos_emb", Tensor({c.max_seq_len, d}, DType::f32));
    Tensor emb({c.vocab_size, d}, DType::f32);
    Tensor head({c.vocab_size, d}, DType::f32);
    for (std::int64_t t = 0; t < d; ++t) {
        emb.set(t * d + t, 1.0);
        if (t + 1 < c.vocab_size)
            head.set((t + 1) * d + t, 100.0);
    }
    m.set_param("tok_emb", emb);
    m.set_param("lm_head", head);
    EXPECT_LT(lm_loss(m, std::vector<std::int64_t>{1, 2, 3, 4, 5, 6}), 1e-6);
}

TEST(LmModel, TokenOutOfVocabularyIsInputError)
{
    Model m(tiny_config(), 1);
    EXPECT_THROW(lm_loss(m, std::vector<std::int64_t>{1, 256}), InputError);
}

TEST(LmModel, LossIsCovariantUnderVocabularyRelabeling)
{
    Model m(tiny_config(), 4);
    std::vector<std::int64_t> perm(256);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(11);
    std::shuffle(perm.begin(), perm.end(), rng);
    Model p = m;
    const auto d = m.config().d_hidden;
    Tensor emb = m.param("tok_emb");
    Tensor head = m.param("lm_head");
    Tensor emb2 = emb;
    Tensor head2 = head;
    for (std::int64_t t = 0; t < 256; ++t)
        for (std::int64_t j = 0; j < d; ++j) {
            emb2.set(perm[static_cast<std::size_t>(t)] * d + j, emb.at(t * d + j));
            head2.set(perm[static_cast<std::size_t>(t)] * d + j, head.at(t * d + j));
        }
    p.set_param("tok_emb", emb2);
    p.set_param("lm_head", head2);
    std::vector<std::int64_t> tokens{10, 200, 3, 77, 77, 150, 9};
    std::vector<std::int64_t> relabeled;
    for (auto t : tokens)
        relabeled.push_back(perm[static_cast<std::size_t>(t)]);
    EXPECT_NEAR(lm_loss(m, TokenBatch::single(tokens), false, DType::f64),
                lm_loss(p, TokenBatch::single(relabeled), false, DType::f64), 1e-12);
}

TEST(LmModel, InputGradientMatchesFiniteDifferences)
{
    Model m(tiny_config(), 5);
    std::vector<std::int64_t> tokens{3, 14, 15, 92, 65, 35};
    for (int layer = 0; layer <= m.config().n_layer; ++layer) {
        InputGradient ig = input_gradient(m, TokenBatch::single(tokens), layer, false, DType::f64);
        Tensor fd = finite_diff_oracle([&](const Tensor& x) { return loss_from_hidden(m, tokens, layer, x); },
                                       ig.hidden, 1e-6);
        EXPECT_LT(max_relative_error(ig.grad, fd), 1e-4) << "layer " << layer;
    }
}

TEST(LmModel, LayerZeroGradientEqualsEmbeddingRowGradient)
{
    Model m(tiny_config(), 6);
    TokenBatch b = TokenBatch::single({40, 41});
    InputGradient ig = input_gradient(m, b, 0, false, DType::f64);
    Graph g(DType::f64);
    ForwardTrace tr = forward(g, m, b);
    Var emb = tr.weights.at("tok_emb");
    Tensor ge = backward(tr.loss, {emb})[emb].value();
    const auto d = m.config().d_hidden;
    for (std::int64_t j = 0; j < d; ++j)
        EXPECT_NEAR(ge.at(40 * d + j), ig.grad.at(j), 1e-14);
}

TEST(LmModel, BatchedInputGradientEqualsPerSequence)
{
    Model m(tiny_config(), 6);
    TokenBatch b;
    b.batch = 2;
    b.seq = 4;
    b.ids = {1, 2, 3, 4, 9, 8, 7, 6};
    InputGradient both = input_gradient(m, b, 1, false, DType::f64);
    InputGradient second = input_gradient(m, TokenBatch::single({9, 8, 7, 6}), 1, false, DType::f64);
    const auto d = m.config().d_hidden;
    for (std::int64_t i = 0; i < 4 * d; ++i)
        EXPECT_NEAR(both.grad.at(4 * d + i), second.grad.at(i), 1e-12);
}

TEST(LmModel, InputGradientLayerRange)
{
    Model m(tiny_config(), 1);
    EXPECT_THROW(input_gradient(m, TokenBatch::single({1, 2}), 3), ContractError);
    EXPECT_THROW(input_gradient(m, TokenBatch::single({1, 2}), -1), ContractError);
}

TEST(LmModel, NextTokenRanking)
{
    Model m(tiny_config(), 8);
    std::vector<std::int64_t> ctx{1, 2, 3};
    auto full = next_token_ranking(m, ctx, 256);
    double total = 0.0;
    std::vector<std::int64_t> ids;
    for (std::size_t i = 0; i < full.size(); ++i) {
        total += full[i].probability;
        ids.push_back(full[i].token);
        if (i > 0) {
            EXPECT_LE(full[i].probability, full[i - 1].probability);
            if (full[i].probability == full[i - 1].probability)
                EXPECT_GT(full[i].token, full[i - 1].token);
        }
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    std::sort(ids.begin(), ids.end());
    for (std::int64_t i = 0; i < 256; ++i)
        EXPECT_EQ(ids[static_cast<std::size_t>(i)], i);
    auto probs = next_token_probabilities(m, {ctx}).front();
    const auto argmax = std::max_element(probs.begin(), probs.end()) - probs.begin();
    EXPECT_EQ(full.front().token, argmax);
}

TEST(LmModel, RmsNormVariantChangesForward)
{
    ModelConfig c = toggle_rmsnorm_variant(tiny_config());
    EXPECT_TRUE(c.use_rms_norm_before_linear);
    Model a(tiny_config(), 3);
    Model b(c, 3);
    EXPECT_NE(lm_loss(a, TokenBatch::single({1, 2, 3, 4})), lm_loss(b, TokenBatch::single({1, 2, 3, 4})));
    // with the variant, every projection input is produced by a normalization node
    Graph g(DType::f64);
    ForwardTrace tr = forward(g, b, TokenBatch::single({1, 2, 3, 4}));
    for (const auto& layer : tr.layers)
        for (const auto& [name, in] : layer.linear_in)
            EXPECT_EQ(g.node(in.id()).kind, OpKind::rms_norm) << name;
    Graph h(DType::f64);
    ForwardTrace plain = forward(h, a, TokenBatch::single({1, 2, 3, 4}));
    EXPECT_NE(h.node(plain.layers[0].linear_in.at("layers.0.o_proj").id()).kind, OpKind::rms_norm);
}

TEST(LmModel, TrainingZeroStepsLeavesParameters)
{
    Model m(tiny_config(), 1);
    Model before = m;
    auto corpus = tokenize_bytes(synthetic_corpus(20000, 1));
    TrainSchedule s;
    s.steps = 0;
    s.seq_len = 16;
    train_baseline(m, corpus, s);
    for (const auto& [name, t] : m.params())
        EXPECT_TRUE(t.identical(before.param(name)));
}

TEST(LmModel, TrainingIsReproducibleAndLearns)
{
    auto corpus = tokenize_bytes(synthetic_corpus(200000, 2));
    TrainSchedule s;
    s.steps = 120;
    s.batch = 8;
    s.seq_len = 16;
    s.warmup = 10;
    s.learning_rate = 1e-2;
    Model a(tiny_config(), 1);
    Model b(tiny_config(), 1);
    auto ra = train_baseline(a, corpus, s);
    auto rb = train_baseline(b, corpus, s);
    EXPECT_EQ(ra.loss, rb.loss);
    EXPECT_LT(ra.loss.back(), ra.loss.front());
    BatchSampler eval(corpus, 16, 16, 123);
    EXPECT_LT(lm_loss(a, eval.next()), std::log(256.0) - 1.0);
}

TEST(LmModel, CorpusHelpers)
{
    EXPECT_EQ(tokenize_bytes("abc"), (std::vector<std::int64_t>{97, 98, 99}));
    auto tokens = tokenize_bytes(synthetic_corpus(100000, 3));
    auto s1 = split_corpus(tokens, 5);
    auto s2 = split_corpus(tokens, 5);
    EXPECT_EQ(s1.train, s2.train);
    EXPECT_EQ(s1.train.size() + s1.heldout.size(), tokens.size());
    EXPECT_NEAR(static_cast<double>(s1.heldout.size()), 10000.0, 4096.0);
    EXPECT_EQ(synthetic_corpus(5000, 9), synthetic_corpus(5000, 9));
}
