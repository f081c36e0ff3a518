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

#include "matrix_oracles.hpp"
#include "test_helpers.hpp"

#include "quantlab/error.hpp"
#include "quantlab/gptq/gptq.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

using namespace quantlab;

using quantlab::testing::brute_force_row;
using quantlab::testing::bwd_error;
using quantlab::testing::correlated;
using quantlab::testing::fwd_error;
using quantlab::testing::random_matrix;


TEST(GptqSolver, HessianExamples)
{
    HessianEst eye = build_hessian(Eigen::MatrixXd::Identity(5, 5));
    EXPECT_TRUE(eye.matrix.isApprox(1.01 * Eigen::MatrixXd::Identity(5, 5), 1e-15));
    EXPECT_FALSE(eye.degenerate);

    HessianEst zero = build_hessian(Eigen::MatrixXd::Zero(4, 3));
    EXPECT_TRUE(zero.degenerate);
    EXPECT_GT(zero.matrix(0, 0), 0.0);
    EXPECT_EQ(zero.matrix(0, 1), 0.0);

    std::mt19937_64 rng(1);
    HessianEst h = build_hessian(random_matrix(8, 32, rng));
    EXPECT_LT((h.matrix - h.matrix.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h.matrix);
    EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
    EXPECT_THROW(build_hessian(Eigen::MatrixXd(0, 3)), InputError);
}

TEST(GptqSolver, DiagonalHessianEqualsRtnExactly)
{
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        Eigen::MatrixXd weight = random_matrix(6, 24, rng);
        Eigen::MatrixXd inputs = Eigen::MatrixXd::Zero(24, 24);
        for (int i = 0; i < 24; ++i)
            inputs(i, i) = 0.5 + i;
        QuantSpec spec{2, 8};
        QuantizedLinear g = gptq_quantize(weight, build_hessian(inputs), spec);
        QuantizedLinear r = rtn_quantize(weight, spec);
        EXPECT_EQ(g.codes(), r.codes());
        EXPECT_TRUE(dequantize(g).identical(dequantize(r)));
    }
}

TEST(GptqSolver, SingleRowBeatsRtn)
{
    std::mt19937_64 rng(3);
    Eigen::MatrixXd weight(1, 4);
    weight << 0.1, 0.9, 2.1, 2.9;
    Eigen::MatrixXd inputs = correlated(4, 64, rng);
    QuantSpec spec{2, 4};
    const double g = fwd_error(weight, dequantize_matrix(gptq_quantize(weight, build_hessian(inputs), spec)), inputs);
    const double r = fwd_error(weight, dequantize_matrix(rtn_quantize(weight, spec)), inputs);
    EXPECT_LE(g, r + 1e-12);
}

TEST(GptqSolver, BeatsOrTiesRtnOnMostRandomInstances)
{
    std::mt19937_64 rng(4);
    int wins = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Eigen::MatrixXd weight = random_matrix(8, 32, rng);
        Eigen::MatrixXd inputs = correlated(32, 128, rng);
        QuantSpec spec{2, 16};
        const double g = fwd_error(weight, dequantize_matrix(gptq_quantize(weight, build_hessian(inputs), spec)), inputs);
        const double r = fwd_error(weight, dequantize_matrix(rtn_quantize(weight, spec)), inputs);
        wins += g <= r * (1 + 1e-12);
    }
    EXPECT_GE(wins, 95);
}

TEST(GptqSolver, WithinFactorOfBruteForceOptimum)
{
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index n = 4 + trial % 3;
        Eigen::MatrixXd weight = random_matrix(4, n, rng);
        Eigen::MatrixXd inputs = random_matrix(n, 48, rng);
        QuantSpec spec{2, static_cast<int>(n)};
        GptqOptions opt;
        opt.static_groups = true;
        QuantizedLinear q = gptq_quantize(weight, build_hessian(inputs), spec, opt);
        Eigen::MatrixXd quantized = dequantize_matrix(q);
        for (Eigen::Index r = 0; r < weight.rows(); ++r) {
            const double err = ((weight.row(r) - quantized.row(r)) * inputs).squaredNorm();
            const double best = brute_force_row(weight.row(r), q, r, inputs);
            EXPECT_LE(std::sqrt(err), 1.5 * std::sqrt(best) + 1e-12) << "trial " << trial << " row " << r;
        }
    }
}

TEST(GptqSolver, EightBitRelativeErrorSmall)
{
    std::mt19937_64 rng(6);
    Eigen::MatrixXd weight = random_matrix(16, 64, rng);
    Eigen::MatrixXd inputs = correlated(64, 256, rng);
    Eigen::MatrixXd quantized = dequantize_matrix(gptq_quantize(weight, build_hessian(inputs), QuantSpec{8, 64}));
    EXPECT_LT(fwd_error(weight, quantized, inputs) / (weight * inputs).norm(), 1e-2);
}

TEST(GptqSolver, ActOrderOptionRuns)
{
    std::mt19937_64 rng(7);
    Eigen::MatrixXd weight = random_matrix(4, 16, rng);
    Eigen::MatrixXd inputs = correlated(16, 64, rng);
    GptqOptions opt;
    opt.act_order = true;
    QuantSpec spec{3, 8};
    const double g = fwd_error(weight, dequantize_matrix(gptq_quantize(weight, build_hessian(inputs), spec, opt)), inputs);
    const double r = fwd_error(weight, dequantize_matrix(rtn_quantize(weight, spec)), inputs);
    EXPECT_LT(g, r);
}

TEST(GptqSolver, BackwardSolverOnDiagonalGradientIsTransposedRtn)
{
    std::mt19937_64 rng(8);
    Eigen::MatrixXd weight = random_matrix(12, 8, rng);
    Eigen::MatrixXd grads = Eigen::MatrixXd::Zero(12, 12);
    for (int i = 0; i < 12; ++i)
        grads(i, i) = 1.0 + 0.1 * i;
    QuantSpec spec{2, 4};
    QuantizedLinear s = gptq_backward(weight, grads, spec);
    QuantizedLinear r = rtn_quantize(weight, spec, GroupAxis::output);
    EXPECT_EQ(s.axis, GroupAxis::output);
    EXPECT_EQ(s.codes(), r.codes());
    EXPECT_TRUE(dequantize(s).identical(dequantize(r)));

    QuantizedLinear z = gptq_backward(weight, Eigen::MatrixXd::Zero(12, 30), spec);
    EXPECT_TRUE(dequantize(z).identical(dequantize(r)));
}

TEST(GptqSolver, BackwardSolverPreservesGradientsBetter)
{
    std::mt19937_64 rng(9);
    int better = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::MatrixXd weight = random_matrix(16, 16, rng);
        Eigen::MatrixXd inputs = correlated(16, 64, rng);
        Eigen::MatrixXd grads = correlated(16, 64, rng);
        QuantSpec spec{2, 8};
        Eigen::MatrixXd Wa = dequantize_matrix(gptq_quantize(weight, build_hessian(inputs), spec));
        Eigen::MatrixXd Ws = dequantize_matrix(gptq_backward(weight, grads, spec));
        better += bwd_error(weight, Ws, grads) <= bwd_error(weight, Wa, grads);
        if (trial == 0)
            EXPECT_LE(bwd_error(weight, Ws, grads), bwd_error(weight, Wa, grads));
    }
    EXPECT_GE(better, 18);
}

TEST(GptqSolver, BackwardSolverIsDeterministic)
{
    std::mt19937_64 rng(10);
    Eigen::MatrixXd weight = random_matrix(8, 12, rng);
    Eigen::MatrixXd grads = correlated(8, 40, rng);
    QuantSpec spec{3, 4};
    EXPECT_TRUE(dequantize(gptq_backward(weight, grads, spec)).identical(dequantize(gptq_backward(weight, grads, spec))));
}

TEST(GptqSolver, CalibrationConsistentWithInputGradients)
{
    ModelConfig c;
    c.n_layer = 2;
    c.n_head = 2;
    c.d_hidden = 16;
    c.d_inter = 32;
    c.max_seq_len = 16;
    Model m(c, 3);
    TokenBatch b;
    b.batch = 2;
    b.seq = 6;
    b.ids = {1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9};
    std::vector<TokenBatch> batches{b};
    auto calib = capture_calibration(m, batches, DType::f64);
    EXPECT_EQ(calib.size(), 14u);
    EXPECT_EQ(calib.at("layers.0.q_proj").inputs.cols(), 12);

    Graph g(DType::f64);
    ForwardOptions opt;
    opt.reduction = LossReduction::sum_of_sequence_means;
    ForwardTrace tr = forward(g, m, b, opt);
    const auto& l0 = tr.layers[0];
    Var attn_in = l0.linear_in.at("layers.0.q_proj");
    Var o_in = l0.linear_in.at("layers.0.o_proj");
    Var d_in = l0.linear_in.at("layers.0.down_proj");
    Gradients grads = backward(tr.loss, {attn_in, o_in, d_in});

    // q/k/v share their input, so the tapped gradient is the sum of the three products
    Eigen::MatrixXd shared = Eigen::MatrixXd::Zero(16, 12);
    for (const char* p : {"q_proj", "k_proj", "v_proj"}) {
        const auto& rec = calib.at(layer_param(0, p));
        shared += to_matrix(m.param(layer_param(0, p))).transpose() * rec.grads;
    }
    EXPECT_LT((shared - to_matrix(grads[attn_in].value()).transpose()).norm(), 1e-6);
    EXPECT_TRUE(calib.at("layers.0.q_proj").inputs.isApprox(to_matrix(attn_in.value()).transpose()));
    for (const char* p : {"o_proj", "down_proj"}) {
        const auto& rec = calib.at(layer_param(0, p));
        Var in = l0.linear_in.at(layer_param(0, p));
        Eigen::MatrixXd wg = to_matrix(m.param(layer_param(0, p))).transpose() * rec.grads;
        EXPECT_LT((wg - to_matrix(grads[in].value()).transpose()).norm(), 1e-6) << p;
    }
    EXPECT_THROW(capture_calibration(m, std::span<const TokenBatch>{}), InputError);
}

TEST(GptqSolver, ImportantColumnsLimitAndConstructedSparsity)
{
    std::mt19937_64 rng(11);
    Eigen::MatrixXd weight = random_matrix(6, 10, rng);
    Eigen::MatrixXd inputs = correlated(10, 30, rng);
    Eigen::MatrixXd grads = correlated(6, 30, rng);
    Eigen::MatrixXd quantized = dequantize_matrix(rtn_quantize(weight, QuantSpec{2, 5}));
    auto all = select_important_columns(weight, quantized, inputs, grads, 1.0, ImportanceCriterion::grad_magnitude);
    EXPECT_EQ(all.columns.size(), 10u);
    EXPECT_TRUE(all.weights == weight);

    // only output channel 2 carries gradient; it is fed by columns 1, 4 and 7
    Eigen::MatrixXd Ws = weight;
    Ws.row(2).setZero();
    Ws(2, 1) = 0.7;
    Ws(2, 4) = -1.3;
    Ws(2, 7) = 0.2;
    Eigen::MatrixXd Gs = Eigen::MatrixXd::Zero(6, 30);
    Gs.row(2) = random_matrix(1, 30, rng);
    auto pick = select_important_columns(Ws, quantized, inputs, Gs, 0.3, ImportanceCriterion::grad_magnitude);
    EXPECT_EQ(pick.columns, (std::vector<std::int64_t>{1, 4, 7}));
    EXPECT_THROW(select_important_columns(weight, quantized, inputs, grads, 0.0, ImportanceCriterion::grad_magnitude), InputError);
}

TEST(GptqSolver, MixedPrecisionLowersGradientErrorAndIsMonotone)
{
    std::mt19937_64 rng(12);
    Eigen::MatrixXd weight = random_matrix(32, 40, rng);
    Eigen::MatrixXd inputs = correlated(40, 128, rng);
    Eigen::MatrixXd grads = correlated(32, 128, rng);
    Eigen::MatrixXd quantized = dequantize_matrix(gptq_quantize(weight, build_hessian(inputs), QuantSpec{2, 8}));
    auto sel = select_important_columns(weight, quantized, inputs, grads, 0.05, ImportanceCriterion::grad_magnitude);
    EXPECT_LT(bwd_error(weight, sel.weights, grads), bwd_error(weight, quantized, grads));

    // restoring a column removes one row of (W - W_hat)^T G, so the gradient
    // metric is separable and must be monotone in the budget
    double prev = INFINITY;
    for (int step = 1; step <= 10; ++step) {
        const double budget = 0.1 * step;
        const double eg = bwd_error(
            weight, select_important_columns(weight, quantized, inputs, grads, budget, ImportanceCriterion::grad_magnitude).weights, grads);
        EXPECT_LE(eg, prev + 1e-12);
        prev = eg;
    }
    EXPECT_EQ(bwd_error(weight, select_important_columns(weight, quantized, inputs, grads, 1.0, ImportanceCriterion::grad_magnitude).weights, grads),
              0.0);
    // the activation metric couples columns through X; only the score mass is monotone
    double prev_mass = INFINITY;
    for (int step = 1; step <= 10; ++step) {
        auto sel_a = select_important_columns(weight, quantized, inputs, grads, 0.1 * step, ImportanceCriterion::activation_error);
        double mass = 0.0;
        for (Eigen::Index c = 0; c < weight.cols(); ++c)
            if (!std::binary_search(sel_a.columns.begin(), sel_a.columns.end(), c))
                mass += sel_a.scores(c);
        EXPECT_LE(mass, prev_mass);
        prev_mass = mass;
    }
    EXPECT_EQ(fwd_error(weight, select_important_columns(weight, quantized, inputs, grads, 1.0, ImportanceCriterion::activation_error).weights, inputs),
              0.0);
}
