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

#include "quantlab/weightspace/weightspace.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace quantlab {

double flat_cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("cosine of differently shaped matrices");
    // one reduction shape for all three sums, so identical inputs give exactly 1
    const double aa = a.cwiseProduct(a).sum();
    const double bb = b.cwiseProduct(b).sum();
    const double ab = a.cwiseProduct(b).sum();
    if (aa == 0.0 && bb == 0.0)
        return 1.0;
    if (aa == 0.0 || bb == 0.0)
        return 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

Preservation preservation(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& approx, const Eigen::MatrixXd& inputs,
                          const Eigen::MatrixXd& grads)
{
    if (weight.rows() != approx.rows() || weight.cols() != approx.cols() || inputs.rows() != weight.cols() || grads.rows() != weight.rows())
        throw ShapeError("preservation: weight, approx, inputs and grads do not conform");
    return {flat_cosine(weight * inputs, approx * inputs), flat_cosine(weight.transpose() * grads, approx.transpose() * grads)};
}

std::vector<AnisotropyPoint> anisotropy_sweep(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& fwd_weight,
                                              const Eigen::MatrixXd& bwd_weight, const Eigen::MatrixXd& inputs,
                                              const Eigen::MatrixXd& grads, std::span<const double> blend_grid, int bits)
{
    std::vector<AnisotropyPoint> out;
    for (double a : blend_grid) {
        if (a < 0.0 || a > 1.0)
            throw InputError("anisotropy blend must lie in [0, 1]");
        // endpoints use the solver outputs exactly
        const Eigen::MatrixXd approx = a == 0.0 ? fwd_weight : a == 1.0 ? bwd_weight : ((1.0 - a) * fwd_weight + a * bwd_weight).eval();
        const Preservation p = preservation(weight, approx, inputs, grads);
        out.push_back({a, p.cos_fwd, p.cos_bwd, bits});
    }
    return out;
}

std::vector<AnisotropyPoint> anisotropy_sweep(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& inputs,
                                              const Eigen::MatrixXd& grads, const QuantSpec& spec,
                                              std::span<const double> blend_grid, double damping_frac)
{
    const Eigen::MatrixXd fwd = dequantize_matrix(gptq_quantize(weight, build_hessian(inputs, damping_frac), spec));
    const Eigen::MatrixXd bwd = dequantize_matrix(gptq_backward(weight, grads, spec, damping_frac));
    return anisotropy_sweep(weight, fwd, bwd, inputs, grads, blend_grid, spec.bits);
}

std::vector<double> default_blend_grid()
{
    std::vector<double> g;
    for (int i = 0; i <= 10; ++i)
        g.push_back(i / 10.0);
    return g;
}

namespace {

NumericalRank rank_from(const Eigen::VectorXd& sv, Eigen::Index rows, Eigen::Index cols)
{
    NumericalRank r;
    const double smax = sv.size() ? sv(0) : 0.0;
    r.tolerance = smax * static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() * 64.0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > r.tolerance)
            ++r.rank;
        if (sv(i) > 0.0 && sv(i) > r.tolerance / 10.0 && sv(i) < r.tolerance * 10.0)
            r.borderline = true;
    }
    return r;
}

} // namespace

NumericalRank numerical_rank(const Eigen::MatrixXd& matrix)
{
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(matrix);
    return rank_from(svd.singularValues(), matrix.rows(), matrix.cols());
}

FeasibilityReport nullspace_feasibility(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& grads)
{
    FeasibilityReport rep;
    rep.d_in = inputs.rows();
    rep.d_out = grads.rows();
    if (rep.d_in < 1 || rep.d_out < 1)
        throw ShapeError("feasibility: inputs and grads need at least one row");
    Eigen::JacobiSVD<Eigen::MatrixXd> sx(inputs, Eigen::ComputeFullU);
    Eigen::JacobiSVD<Eigen::MatrixXd> sg(grads, Eigen::ComputeFullU);
    const NumericalRank rx = rank_from(sx.singularValues(), inputs.rows(), inputs.cols());
    const NumericalRank rg = rank_from(sg.singularValues(), grads.rows(), grads.cols());
    rep.rank_x = rx.rank;
    rep.rank_g = rg.rank;
    rep.borderline = rx.borderline || rg.borderline;
    rep.condition_holds = rep.rank_x + rep.rank_g < std::min(rep.d_in, rep.d_out);
    if (rep.rank_x < rep.d_in && rep.rank_g < rep.d_out) {
        // v spans part of N(X^T), u part of N(G^T): u v^T annihilates both
        const Eigen::VectorXd v = sx.matrixU().col(rep.rank_x);
        const Eigen::VectorXd u = sg.matrixU().col(rep.rank_g);
        const Eigen::MatrixXd dw = u * v.transpose();
        rep.residual_fwd = (dw * inputs).norm();
        rep.residual_bwd = (dw.transpose() * grads).norm();
        rep.witness = dw;
    }
    return rep;
}

std::vector<RankProfileEntry> rank_profile(const std::map<std::string, CalibrationRecord>& calib)
{
    std::vector<RankProfileEntry> out;
    for (const auto& [name, rec] : calib)
        out.push_back({name, nullspace_feasibility(rec.inputs, rec.grads)});
    return out;
}

} // namespace quantlab
