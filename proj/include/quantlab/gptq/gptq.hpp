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

#include <Eigen/Dense>

#include <map>
#include <span>
#include <string>
#include <vector>

namespace quantlab {

/// Inputs and output gradients of one projection, one column per token.
struct CalibrationRecord {
    std::string layer_name;
    /// [d_in, n]
    Eigen::MatrixXd inputs;
    /// [d_out, n], gradient of the per-sequence loss with respect to the projection output
    Eigen::MatrixXd grads;
};

/// Captures inputs and output gradients for every projection from forward/backward passes of `model`.
std::map<std::string, CalibrationRecord> capture_calibration(const Model& model, std::span<const TokenBatch> batches,
                                                             DType dtype = DType::f32);

struct HessianEst {
    Eigen::MatrixXd matrix;
    /// damping fraction finally applied (after any escalation)
    double damping = 0.0;
    /// absolute diagonal shift
    double shift = 0.0;
    int escalations = 0;
    /// the inputs carried no energy; the matrix is a guard multiple of the identity
    bool degenerate = false;
};

inline constexpr double kDegenerateHessianGuard = 1e-8;

/// H = X X^T + damping * mean(diag(X X^T)) * I, escalating damping x10 (three
/// times at most) until the Cholesky factorization succeeds.
HessianEst build_hessian(const Eigen::MatrixXd& inputs, double damping_frac = 0.01);

struct GptqOptions {
    /// quantization parameters from the uncompensated weights instead of lazily
    /// from the running, error-compensated ones
    bool static_groups = false;
    /// process columns by descending Hessian diagonal (forces static groups)
    bool act_order = false;
};

/// Column-sequential quantization with Hessian-based error compensation.
QuantizedLinear gptq_quantize(const Eigen::MatrixXd& weight, const HessianEst& hessian, const QuantSpec& spec,
                              const GptqOptions& options = {});

/// The transposed problem: minimizes ||(W - W_hat)^T G||_F. Groups run along the output dimension.
QuantizedLinear gptq_backward(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& grads, const QuantSpec& spec,
                              double damping_frac = 0.01, const GptqOptions& options = {});

/// Round-to-nearest with the same grouping convention, for comparisons.
QuantizedLinear rtn_quantize(const Eigen::MatrixXd& weight, const QuantSpec& spec, GroupAxis axis = GroupAxis::input);

Eigen::MatrixXd to_matrix(const Tensor& t);
Tensor to_tensor(const Eigen::MatrixXd& m, DType dtype = DType::f32);
Eigen::MatrixXd dequantize_matrix(const QuantizedLinear& q);

enum class ImportanceCriterion : std::uint8_t { activation_error, grad_magnitude };

struct MixedPrecisionLayer {
    std::vector<std::int64_t> columns;
    Eigen::VectorXd scores;
    /// `approx` with the selected columns restored to full precision
    Eigen::MatrixXd weights;
};

/// Restores the ceil(budget * d_in) most important input columns to full precision.
MixedPrecisionLayer select_important_columns(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& approx,
                                             const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& grads, double budget,
                                             ImportanceCriterion criterion);

/// Every projection quantized with GPTQ using calibration captured from `model`.
Model quantize_model_gptq(const Model& model, const std::map<std::string, CalibrationRecord>& calib,
                          const QuantSpec& spec, double damping_frac = 0.01);

} // namespace quantlab
