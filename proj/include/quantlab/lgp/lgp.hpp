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
#include "quantlab/quant/quant.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace quantlab {

/// How gradients reach the clipping factors through the rounding steps.
enum class ClipGradient : std::uint8_t {
    /// rounding passes gradients through unchanged (used for training)
    straight_through,
    /// codes and zero-points held at their current values; the exact
    /// derivative wherever no code sits on a rounding boundary
    frozen_codes,
};

inline constexpr double kClipMin = 0.01;

enum class ClipOptimizer : std::uint8_t { gradient_descent, adam };

struct LgpConfig {
    /// weight of the gradient-preservation term
    double grad_weight = 0.0;
    int epochs = 40;
    double learning_rate = 0.01;
    QuantSpec spec{2, 64};
    ClipGradient gradient = ClipGradient::frozen_codes;
    ClipOptimizer optimizer = ClipOptimizer::gradient_descent;

    void validate() const;
};

/// Group-wise fake quantization of a [d_out, d_in] weight, differentiable in
/// the clipping factors. upper and lower are [groups, 1] in QuantizedLinear
/// params order. Groups run along the input dimension, which must be a
/// multiple of the group size.
Var fake_quantize(Graph& g, const Tensor& weight, Var upper, Var lower, const QuantSpec& spec,
                  ClipGradient mode = ClipGradient::straight_through);

struct JointObjective {
    Var fit;
    Var grad;
    Var total;
};

/// ||target_out - out||^2 + grad_weight * ||target_grad - J^T g_out||^2 where J is
/// the Jacobian of `out` with respect to the leaf `x`.
JointObjective joint_objective(Var out, Var x, const Tensor& target_out, const Tensor& g_out,
                               const Tensor& target_grad, double grad_weight);

/// Full-precision block outputs and loss gradients at the block input.
struct BlockTargets {
    int block = 0;
    std::vector<Tensor> outputs;
    std::vector<Tensor> input_grads;
};

/// Block inputs and loss gradients at the block output of a (partly quantized) model.
struct BlockObservation {
    std::vector<Tensor> inputs;
    std::vector<Tensor> output_grads;
};

BlockTargets capture_block_targets(const Model& fp_model, std::span<const TokenBatch> calib, int block);
BlockObservation observe_block(const Model& model, std::span<const TokenBatch> calib, int block);

/// Clipping factors per projection name, one entry per group.
using ClipSet = std::map<std::string, std::vector<ClipParams>>;

ClipSet unit_clip(const Model& model, int block, const QuantSpec& spec);

struct LossTerms {
    double fit = 0.0;
    double grad = 0.0;

    double joint(double grad_weight) const { return fit + grad_weight * grad; }
};

/// Objective of one block with its projections quantized under `clip`.
LossTerms block_loss(const Model& model, int block, const ClipSet& clip, const QuantSpec& spec,
                     const BlockTargets& targets, const BlockObservation& obs, std::span<const TokenBatch> calib);

struct BlockTrace {
    int block = 0;
    /// entry 0 holds the initial terms, entry e the terms after epoch e
    std::vector<LossTerms> epochs;
    ClipSet clip;
    LossTerms initial;
    LossTerms final;
    double learning_rate = 0.0;
    int restarts = 0;
};

/// Trains the block's clipping factors, then writes its quantized projections into `model`.
BlockTrace lgp_distill_block(Model& model, int block, const BlockTargets& targets, std::span<const TokenBatch> calib,
                             const LgpConfig& cfg);

struct LgpResult {
    Model model;
    std::vector<BlockTrace> blocks;

    double fit_residual() const;
    double grad_residual() const;
};

/// Shallow-to-deep layer-wise distillation of every block.
LgpResult lgp_quantize_model(const Model& fp_model, std::span<const TokenBatch> calib, const LgpConfig& cfg);

struct GradWeightChoice {
    double grad_weight = 0.0;
    std::vector<double> qualifying;
    /// gradient term was zero, so grad_weight has no effect
    bool degenerate = false;
};

/// Picks the magnitude bringing grad_weight * grad within [0.1, 10] x fit. Several
/// candidates are resolved by `downstream` (lower is better) when supplied,
/// otherwise by the ratio closest to one.
GradWeightChoice choose_grad_weight(double fit, double grad, std::span<const double> magnitudes,
                           const std::function<double(double)>& downstream = {});

GradWeightChoice grad_weight_scale_search(const Model& fp_model, std::span<const TokenBatch> calib, int block,
                                 const QuantSpec& spec, std::span<const double> magnitudes,
                                 const std::function<double(double)>& downstream = {});

/// 1, 10, ..., 1e8
std::vector<double> default_grad_weight_magnitudes();

} // namespace quantlab
