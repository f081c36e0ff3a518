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

#include "quantlab/gptq/gptq.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace quantlab {

Eigen::MatrixXd to_matrix(const Tensor& t)
{
    if (t.rank() != 2)
        throw ShapeError("to_matrix expects a 2-D tensor, got " + shape_str(t.shape()));
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (std::int64_t r = 0; r < t.dim(0); ++r)
        for (std::int64_t c = 0; c < t.dim(1); ++c)
            m(r, c) = t.at(r * t.dim(1) + c);
    return m;
}

Tensor to_tensor(const Eigen::MatrixXd& m, DType dtype)
{
    Tensor t({m.rows(), m.cols()}, dtype);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            t.set(r * m.cols() + c, m(r, c));
    return t;
}

Eigen::MatrixXd dequantize_matrix(const QuantizedLinear& q)
{
    return to_matrix(dequantize(q));
}

std::map<std::string, CalibrationRecord> capture_calibration(const Model& model, std::span<const TokenBatch> batches,
                                                             DType dtype)
{
    if (batches.empty())
        throw InputError("capture_calibration: no calibration batches");
    std::map<std::string, std::vector<Eigen::MatrixXd>> xs;
    std::map<std::string, std::vector<Eigen::MatrixXd>> gs;
    for (const TokenBatch& batch : batches) {
        Graph g(dtype);
        ForwardOptions opt;
        opt.reduction = LossReduction::sum_of_sequence_means;
        ForwardTrace tr = forward(g, model, batch, opt);
        std::vector<Var> outs;
        std::vector<std::string> names;
        for (const auto& layer : tr.layers)
            for (const auto& [name, y] : layer.linear_out) {
                outs.push_back(y);
                names.push_back(name);
            }
        Gradients grads = backward(tr.loss, outs);
        std::size_t i = 0;
        for (const auto& layer : tr.layers)
            for (const auto& [name, y] : layer.linear_out) {
                xs[name].push_back(to_matrix(layer.linear_in.at(name).value()).transpose());
                gs[name].push_back(to_matrix(grads[outs[i]].value()).transpose());
                ++i;
            }
    }
    std::map<std::string, CalibrationRecord> out;
    for (auto& [name, parts] : xs) {
        CalibrationRecord rec;
        rec.layer_name = name;
        Eigen::Index n = 0;
        for (const auto& p : parts)
            n += p.cols();
        rec.inputs.resize(parts.front().rows(), n);
        rec.grads.resize(gs[name].front().rows(), n);
        Eigen::Index at = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            rec.inputs.middleCols(at, parts[k].cols()) = parts[k];
            rec.grads.middleCols(at, parts[k].cols()) = gs[name][k];
            at += parts[k].cols();
        }
        out.emplace(name, std::move(rec));
    }
    return out;
}

HessianEst build_hessian(const Eigen::MatrixXd& inputs, double damping_frac)
{
    if (inputs.rows() == 0 || inputs.cols() == 0)
        throw InputError("build_hessian: empty activation matrix");
    HessianEst est;
    Eigen::MatrixXd xxt = inputs * inputs.transpose();
    xxt = 0.5 * (xxt + xxt.transpose());
    const double mean_diag = xxt.diagonal().mean();
    if (!std::isfinite(mean_diag))
        throw NumericalError("build_hessian: non-finite activations");
    const auto d = inputs.rows();
    if (mean_diag <= 0.0) {
        est.degenerate = true;
        est.damping = damping_frac;
        est.shift = damping_frac * kDegenerateHessianGuard;
        est.matrix = est.shift * Eigen::MatrixXd::Identity(d, d);
        return est;
    }
    double frac = damping_frac;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        est.matrix = xxt;
        est.shift = frac * mean_diag;
        est.matrix.diagonal().array() += est.shift;
        Eigen::LLT<Eigen::MatrixXd> llt(est.matrix);
        if (llt.info() == Eigen::Success) {
            est.damping = frac;
            est.escalations = attempt;
            return est;
        }
        frac *= 10.0;
    }
    throw NumericalError("build_hessian: Cholesky failed after 3 damping escalations");
}

namespace {

/// Upper Cholesky factor U of H^{-1} (H^{-1} = U^T U).
Eigen::MatrixXd inverse_cholesky_upper(const Eigen::MatrixXd& hessian)
{
    const auto d = hessian.rows();
    Eigen::LLT<Eigen::MatrixXd> llt(hessian);
    if (llt.info() != Eigen::Success)
        throw NumericalError("gptq: Hessian is not positive definite");
    Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
    inv = 0.5 * (inv + inv.transpose());
    Eigen::LLT<Eigen::MatrixXd> inv_llt(inv);
    if (inv_llt.info() != Eigen::Success)
        throw NumericalError("gptq: inverse Hessian is not positive definite");
    return inv_llt.matrixU();
}

std::vector<double> row_span(const Eigen::MatrixXd& weight, Eigen::Index r, Eigen::Index c0, Eigen::Index c1)
{
    std::vector<double> v;
    for (Eigen::Index c = c0; c < c1; ++c)
        v.push_back(weight(r, c));
    return v;
}

} // namespace

QuantizedLinear gptq_quantize(const Eigen::MatrixXd& weight, const HessianEst& hessian, const QuantSpec& spec,
                              const GptqOptions& options)
{
    spec.validate();
    const Eigen::Index rows = weight.rows();
    const Eigen::Index cols = weight.cols();
    if (hessian.matrix.rows() != cols || hessian.matrix.cols() != cols)
        throw ShapeError("gptq: Hessian is " + std::to_string(hessian.matrix.rows()) + "x" + std::to_string(hessian.matrix.cols())
                         + " for " + std::to_string(cols) + " input columns");
    if (!weight.allFinite())
        throw InputError("gptq: weights contain NaN or Inf");

    const Eigen::Index gs = spec.group_size;
    const Eigen::Index groups = (cols + gs - 1) / gs;
    const bool static_groups = options.static_groups || options.act_order;

    std::vector<QuantParams> params(static_cast<std::size_t>(rows * groups));
    auto param_ref = [&](Eigen::Index r, Eigen::Index col) -> QuantParams& {
        return params[static_cast<std::size_t>(r * groups + col / gs)];
    };
    auto fill_group = [&](const Eigen::MatrixXd& source, Eigen::Index g) {
        const Eigen::Index c0 = g * gs;
        const Eigen::Index c1 = std::min(cols, c0 + gs);
        for (Eigen::Index r = 0; r < rows; ++r)
            params[static_cast<std::size_t>(r * groups + g)]
                = quant_params(row_span(source, r, c0, c1), spec.bits, std::nullopt, spec.symmetric);
    };
    if (static_groups)
        for (Eigen::Index g = 0; g < groups; ++g)
            fill_group(weight, g);

    std::vector<Eigen::Index> order(static_cast<std::size_t>(cols));
    std::iota(order.begin(), order.end(), 0);
    if (options.act_order)
        std::stable_sort(order.begin(), order.end(),
                         [&](Eigen::Index a, Eigen::Index b) { return hessian.matrix(a, a) > hessian.matrix(b, b); });

    Eigen::MatrixXd permuted_hessian(cols, cols);
    Eigen::MatrixXd permuted(rows, cols);
    for (Eigen::Index i = 0; i < cols; ++i) {
        permuted.col(i) = weight.col(order[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = 0; j < cols; ++j)
            permuted_hessian(i, j) = hessian.matrix(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    const Eigen::MatrixXd inv_chol = inverse_cholesky_upper(permuted_hessian);

    std::vector<std::uint8_t> codes(static_cast<std::size_t>(rows * cols));
    for (Eigen::Index i = 0; i < cols; ++i) {
        const Eigen::Index col = order[static_cast<std::size_t>(i)];
        if (!static_groups && col % gs == 0) {
            // lazy group parameters from the compensated weights (natural order only)
            fill_group(permuted, col / gs);
        }
        const double d = inv_chol(i, i);
        Eigen::VectorXd err(rows);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const QuantParams& p = param_ref(r, col);
            const int code = quantize_value(permuted(r, i), p, spec.bits);
            codes[static_cast<std::size_t>(r * cols + col)] = static_cast<std::uint8_t>(code);
            err(r) = (permuted(r, i) - dequantize_value(code, p)) / d;
        }
        if (i + 1 < cols)
            permuted.rightCols(cols - i - 1).noalias() -= err * inv_chol.row(i).tail(cols - i - 1);
    }
    return make_quantized({rows, cols}, spec.bits, spec.group_size, GroupAxis::input, std::move(params), codes);
}

QuantizedLinear gptq_backward(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& grads, const QuantSpec& spec,
                              double damping_frac, const GptqOptions& options)
{
    if (grads.rows() != weight.rows())
        throw ShapeError("gptq_backward: grads has " + std::to_string(grads.rows()) + " rows for " + std::to_string(weight.rows())
                         + " outputs");
    const Eigen::MatrixXd transposed = weight.transpose();
    const QuantizedLinear qt = gptq_quantize(transposed, build_hessian(grads, damping_frac), spec, options);
    const auto codes_t = qt.codes();
    std::vector<std::uint8_t> codes(codes_t.size());
    const Eigen::Index rows = weight.rows();
    const Eigen::Index cols = weight.cols();
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            codes[static_cast<std::size_t>(r * cols + c)] = codes_t[static_cast<std::size_t>(c * rows + r)];
    return make_quantized({rows, cols}, spec.bits, spec.group_size, GroupAxis::output, qt.params, codes);
}

QuantizedLinear rtn_quantize(const Eigen::MatrixXd& weight, const QuantSpec& spec, GroupAxis axis)
{
    return quantize(to_tensor(weight, DType::f64), spec, {}, axis);
}

MixedPrecisionLayer select_important_columns(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& approx,
                                             const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& grads, double budget,
                                             ImportanceCriterion criterion)
{
    if (!(budget > 0.0 && budget <= 1.0))
        throw InputError("select_important_columns: budget must lie in (0, 1]");
    if (weight.rows() != approx.rows() || weight.cols() != approx.cols())
        throw ShapeError("select_important_columns: weight and approx differ in shape");
    const Eigen::Index d_in = weight.cols();
    MixedPrecisionLayer out;
    if (criterion == ImportanceCriterion::grad_magnitude) {
        if (grads.rows() != weight.rows())
            throw ShapeError("select_important_columns: grads rows must equal d_out");
        out.scores = (weight.transpose() * grads).rowwise().norm();
    } else {
        if (inputs.rows() != d_in)
            throw ShapeError("select_important_columns: inputs rows must equal d_in");
        out.scores = (weight - approx).colwise().norm().transpose().cwiseProduct(inputs.rowwise().norm());
    }
    const auto count = static_cast<Eigen::Index>(std::ceil(budget * static_cast<double>(d_in) - 1e-9));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(d_in));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) { return out.scores(a) > out.scores(b); });
    idx.resize(static_cast<std::size_t>(std::min(count, d_in)));
    std::sort(idx.begin(), idx.end());
    out.columns = idx;
    out.weights = approx;
    for (auto c : idx)
        out.weights.col(c) = weight.col(c);
    return out;
}

Model quantize_model_gptq(const Model& model, const std::map<std::string, CalibrationRecord>& calib,
                          const QuantSpec& spec, double damping_frac)
{
    Model out = model;
    if (!spec.enabled)
        return out;
    for (const auto& name : model.linear_names()) {
        const auto it = calib.find(name);
        if (it == calib.end())
            throw InputError("quantize_model_gptq: no calibration for '" + name + "'");
        const Eigen::MatrixXd weight = to_matrix(model.param(name));
        auto q = std::make_shared<QuantizedLinear>(gptq_quantize(weight, build_hessian(it->second.inputs, damping_frac), spec));
        out.set_param(name, dequantize(*q));
        out.set_quantized(name, std::move(q));
    }
    out.set_precision(Precision::quantized);
    return out;
}

} // namespace quantlab
