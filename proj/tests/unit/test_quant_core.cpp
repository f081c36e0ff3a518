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
#include "quantlab/quant/quant.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace quantlab;
using quantlab::testing::random_tensor;

TEST(QuantCore, ExactGrid)
{
    std::vector<double> g{0, 1, 2, 3};
    QuantParams p = quant_params(g, 2);
    EXPECT_EQ(p.scale, 1.0f);
    EXPECT_EQ(p.zero_point, 0);
    QuantSpec spec{2, 64};
    QuantizedLinear q = quantize(Tensor::from({4}, {0, 1, 2, 3}), spec);
    EXPECT_EQ(q.codes(), (std::vector<std::uint8_t>{0, 1, 2, 3}));
    EXPECT_EQ(dequantize(q).to_vector(), (std::vector<double>{0, 1, 2, 3}));
}

TEST(QuantCore, HandComputedAsymmetricExample)
{
    // scale = (0.5 + 1.5) / 3 = 2/3; zero-point = -round(-2.25) = 2; codes round(-2.25)+2 = 0, round(0.75)+2 = 3
    std::vector<double> g{-1.5, 0.5};
    QuantParams p = quant_params(g, 2);
    EXPECT_NEAR(p.scale, 2.0 / 3.0, 1e-7);
    EXPECT_EQ(p.zero_point, 2);
    QuantizedLinear q = quantize(Tensor::from({2}, {-1.5, 0.5}), QuantSpec{2, 64});
    EXPECT_EQ(q.codes(), (std::vector<std::uint8_t>{0, 3}));
    Tensor w = dequantize(q);
    EXPECT_NEAR(w.at(0), -4.0 / 3.0, 1e-6);
    EXPECT_NEAR(w.at(1), 2.0 / 3.0, 1e-6);
    EXPECT_LE(std::abs(w.at(0) + 1.5), p.scale);
    EXPECT_LE(std::abs(w.at(1) - 0.5), p.scale);
}

TEST(QuantCore, ConstantGroupIsExact)
{
    for (double c : {5.0, -2.5, 0.0}) {
        QuantizedLinear q = quantize(Tensor::from({3}, {c, c, c}), QuantSpec{3, 64});
        auto codes = q.codes();
        EXPECT_EQ(codes[0], codes[1]);
        EXPECT_EQ(codes[1], codes[2]);
        Tensor w = dequantize(q);
        for (int i = 0; i < 3; ++i)
            EXPECT_LT(std::abs(w.at(i) - c), 1e-6);
    }
    EXPECT_EQ(quant_params(std::vector<double>{0, 0}, 4).scale, static_cast<float>(kConstantGroupScale));
}

TEST(QuantCore, RoundTripWithinScaleOnRandomGroups)
{
    std::mt19937_64 rng(21);
    for (int bits : {2, 3, 4, 8}) {
        for (int trial = 0; trial < 1000; ++trial) {
            Tensor w = random_tensor({1, 64}, rng, -3.0, 3.0);
            QuantizedLinear q = quantize(w, QuantSpec{bits, 64});
            Tensor back = dequantize(q);
            const double step = q.params[0].scale;
            for (std::int64_t i = 0; i < 64; ++i)
                ASSERT_LE(std::abs(back.at(i) - w.at(i)), step) << "bits " << bits;
            if (bits == 8) {
                double lo = w.at(0), hi = w.at(0);
                for (std::int64_t i = 0; i < 64; ++i) {
                    lo = std::min(lo, w.at(i));
                    hi = std::max(hi, w.at(i));
                }
                ASSERT_LE(step, (hi - lo) / 255.0 * (1 + 1e-6));
            }
        }
    }
}

TEST(QuantCore, OneSignedGroupsStayWithinBound)
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor w = random_tensor({1, 16}, rng, 0.5, 3.0);
        QuantizedLinear q = quantize(w, QuantSpec{2, 16});
        Tensor back = dequantize(q);
        for (std::int64_t i = 0; i < 16; ++i)
            ASSERT_LE(std::abs(back.at(i) - w.at(i)), q.params[0].scale);
    }
}

TEST(QuantCore, DequantizeIsIdempotentOnGrid)
{
    std::mt19937_64 rng(5);
    Tensor w = random_tensor({6, 40}, rng);
    QuantSpec spec{3, 16};
    Tensor once = dequantize(quantize(w, spec));
    Tensor twice = dequantize(quantize(once, spec));
    for (std::int64_t i = 0; i < once.size(); ++i)
        EXPECT_NEAR(once.at(i), twice.at(i), 1e-5);
}

TEST(QuantCore, PackingRoundTripsForAllWidths)
{
    std::mt19937_64 rng(6);
    for (int bits = 1; bits <= 8; ++bits) {
        std::vector<std::uint8_t> codes(1003);
        for (auto& c : codes)
            c = static_cast<std::uint8_t>(rng() % (1u << bits));
        auto packed = pack_codes(codes, bits);
        EXPECT_EQ(packed.size(), (codes.size() * static_cast<std::size_t>(bits) + 7) / 8);
        EXPECT_EQ(unpack_codes(packed, static_cast<std::int64_t>(codes.size()), bits), codes);
    }
    EXPECT_THROW(unpack_codes(std::vector<std::uint8_t>(3), 10, 4), FormatError);
    // LSB-first: codes 1,2 at 4 bits -> byte 0x21
    EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{1, 2}, 4), (std::vector<std::uint8_t>{0x21}));
}

TEST(QuantCore, CodesAreMonotoneWithinGroup)
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor w = random_tensor({1, 32}, rng);
        QuantizedLinear q = quantize(w, QuantSpec{static_cast<int>(1 + trial % 8), 32});
        auto codes = q.codes();
        for (std::int64_t i = 0; i < 32; ++i)
            for (std::int64_t j = 0; j < 32; ++j)
                if (w.at(i) <= w.at(j))
                    ASSERT_LE(codes[static_cast<std::size_t>(i)], codes[static_cast<std::size_t>(j)]);
    }
}

TEST(QuantCore, RaggedFinalGroupAndOutputAxis)
{
    std::mt19937_64 rng(8);
    Tensor w = random_tensor({3, 10}, rng);
    QuantizedLinear q = quantize(w, QuantSpec{4, 4});
    EXPECT_EQ(q.groups_per_line(), 3);
    EXPECT_EQ(q.params.size(), 9u);
    QuantizedLinear qo = quantize(w, QuantSpec{4, 2}, {}, GroupAxis::output);
    EXPECT_EQ(qo.groups_per_line(), 2);
    EXPECT_EQ(qo.params.size(), 20u);
    Tensor back = dequantize(qo);
    for (std::int64_t r = 0; r < 3; ++r)
        for (std::int64_t c = 0; c < 10; ++c)
            EXPECT_LE(std::abs(back.at(r * 10 + c) - w.at(r * 10 + c)), qo.params_at(r, c).scale);
}

TEST(QuantCore, ClippingShrinksRange)
{
    std::vector<double> g{-1.0, 0.0, 2.0};
    QuantParams full = quant_params(g, 4);
    QuantParams clipped = quant_params(g, 4, ClipParams{0.5, 0.5});
    EXPECT_NEAR(clipped.scale, full.scale * 0.5, 1e-7);
}

TEST(QuantCore, NonFiniteWeightsRejected)
{
    Tensor w = Tensor::from({2}, {1.0, std::nan("")});
    EXPECT_THROW(quantize(w, QuantSpec{}), InputError);
}

TEST(QuantCore, Ternarize)
{
    Ternary a = ternarize(std::vector<double>{1, -1, 1, -1});
    EXPECT_EQ(a.scale, 1.0);
    EXPECT_EQ(a.codes, (std::vector<std::int8_t>{1, -1, 1, -1}));
    // scale = 1.2; 0.4/1.2 -> 0, 2.0/1.2 -> 1
    Ternary b = ternarize(std::vector<double>{0.4, 2.0});
    EXPECT_NEAR(b.scale, 1.2, 1e-15);
    EXPECT_EQ(b.codes, (std::vector<std::int8_t>{0, 1}));
    Ternary zeros = ternarize(std::vector<double>{0, 0, 0});
    EXPECT_EQ(zeros.codes, (std::vector<std::int8_t>{0, 0, 0}));

    std::mt19937_64 rng(9);
    Tensor w = random_tensor({5, 7}, rng);
    auto v = w.to_vector();
    double mean_abs = 0.0;
    for (double x : v)
        mean_abs += std::abs(x);
    EXPECT_EQ(ternarize(v).scale, mean_abs / 35.0);
}

TEST(QuantCore, TernarizeMatchesForwardStraightThrough)
{
    std::mt19937_64 rng(10);
    Tensor w = random_tensor({4, 6}, rng).cast(DType::f32);
    Graph g(DType::f32);
    Tensor st = straight_through(g.param(w), StraightThrough::ternary_absmean).value();
    Tensor deq = ternary_dequantize(ternarize(w.to_vector()), w.shape());
    for (std::int64_t i = 0; i < w.size(); ++i)
        EXPECT_EQ(st.at(i), deq.at(i));
}

class QuantModel : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        ModelConfig c;
        c.n_layer = 2;
        c.n_head = 2;
        c.d_hidden = 32;
        c.d_inter = 64;
        c.max_seq_len = 32;
        model_ = new Model(c, 3);
        auto corpus = tokenize_bytes(synthetic_corpus(200000, 4));
        TrainSchedule s;
        s.steps = 150;
        s.batch = 8;
        s.seq_len = 32;
        s.warmup = 10;
        s.learning_rate = 1e-2;
        train_baseline(*model_, corpus, s);
        BatchSampler eval(corpus, 16, 32, 77);
        batch_ = new TokenBatch(eval.next());
    }
    static void TearDownTestSuite()
    {
        delete model_;
        delete batch_;
    }
    static Model* model_;
    static TokenBatch* batch_;
};

Model* QuantModel::model_ = nullptr;
TokenBatch* QuantModel::batch_ = nullptr;

TEST_F(QuantModel, EightBitBarelyChangesLoss)
{
    const double fp = lm_loss(*model_, *batch_);
    const double q8 = lm_loss(quantize_model_rtn(*model_, QuantSpec{8, 64}), *batch_);
    EXPECT_LT(std::abs(q8 - fp) / fp, 0.01);
}

TEST_F(QuantModel, TwoBitIncreasesLoss)
{
    const double fp = lm_loss(*model_, *batch_);
    const double q2 = lm_loss(quantize_model_rtn(*model_, QuantSpec{2, 64}), *batch_);
    EXPECT_GT(q2, fp);
}

TEST_F(QuantModel, DisabledSpecIsPassthrough)
{
    QuantSpec off;
    off.enabled = false;
    Model same = quantize_model_rtn(*model_, off);
    for (const auto& [name, t] : model_->params())
        EXPECT_TRUE(t.identical(same.param(name)));
    EXPECT_EQ(same.precision(), Precision::fp);
}

TEST_F(QuantModel, OnlyProjectionsAreQuantized)
{
    Model q = quantize_model_rtn(*model_, QuantSpec{2, 64});
    EXPECT_EQ(q.quantized().size(), model_->linear_names().size());
    for (const char* keep : {"tok_emb", "pos_emb", "lm_head", "final_norm", "layers.0.attn_norm"})
        EXPECT_TRUE(q.param(keep).identical(model_->param(keep))) << keep;
    EXPECT_FALSE(q.param("layers.1.up_proj").identical(model_->param("layers.1.up_proj")));
}
