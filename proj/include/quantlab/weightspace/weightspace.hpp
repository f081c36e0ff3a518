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

#include "quantlab/gptq/gptq.hpp"
#include "quantlab/quant/quant.hpp"

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace quantlab {

struct Preservation {
    /// cosine between vec(W X) and vec(W_hat X)
    double cos_fwd = 0.0;
    /// cosine between vec(W^T G) and vec(W_hat^T G)
    double cos_bwd = 0.0;
};

/// Flattened cosine similarity; 1 when both are zero, 0 when exactly one is.
double flat_cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

Preservation preservation(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& approx, const Eigen::MatrixXd& inputs,
                          const Eigen::MatrixXd& grads);

struct AnisotropyPoint {
    double blend = 0.0;
    double cos_fwd = 0.0;
    double cos_bwd = 0.0;
    int bits = 0;
};

/// Scores along (1 - blend) * fwd_weight + blend * bwd_weight. Interior points are in
/// general not on the quantization grid.
std::vector<AnisotropyPoint> anisotropy_sweep(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& fwd_weight,
                                              const Eigen::MatrixXd& bwd_weight, const Eigen::MatrixXd& inputs,
                                              const Eigen::MatrixXd& grads, std::span<const double> blend_grid,
                                              int bits = 0);

/// The endpoints come from forward GPTQ on `inputs` and backward GPTQ on `grads`.
std::vector<AnisotropyPoint> anisotropy_sweep(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& inputs,
                                              const Eigen::MatrixXd& grads, const QuantSpec& spec,
                                              std::span<const double> blend_grid, double damping_frac = 0.01);

/// 0, 0.1, ..., 1
std::vector<double> default_blend_grid();

struct NumericalRank {
    std::int64_t rank = 0;
    double tolerance = 0.0;
    /// a singular value lies within 10x of the tolerance
    bool borderline = false;
};

/// Rank at tolerance sigma_max * max(rows, cols) * eps * 64.
NumericalRank numerical_rank(const Eigen::MatrixXd& matrix);

struct FeasibilityReport {
    std::int64_t rank_x = 0;
    std::int64_t rank_g = 0;
    std::int64_t d_in = 0;
    std::int64_t d_out = 0;
    /// rank(X) + rank(G) < min(d_in, d_out)
    bool condition_holds = false;
    bool borderline = false;
    /// nonzero dW with dW X = 0 and dW^T G = 0, present whenever both null spaces are nontrivial
    std::optional<Eigen::MatrixXd> witness;
    double residual_fwd = 0.0;
    double residual_bwd = 0.0;
};

/// `inputs` is [d_in, n], `grads` is [d_out, m].
FeasibilityReport nullspace_feasibility(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& grads);

struct RankProfileEntry {
    std::string layer_name;
    FeasibilityReport report;
};

std::vector<RankProfileEntry> rank_profile(const std::map<std::string, CalibrationRecord>& calib);

} // namespace quantlab
