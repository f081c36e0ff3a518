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

#include "quantlab/lgp/lgp.hpp"

#include "quantlab/error.hpp"
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace quantlab {

void LgpConfig::validate() const
{
    spec.validate();
    if (!(grad_weight >= 0.0))
        throw ConfigError("grad_weight must be >= 0");
    if (epochs < 0)
        throw ConfigError("epochs must be >= 0");
    if (!(learning_rate > 0.0))
        throw ConfigError("learning rate must be positive");
    if (spec.symmetric)
        throw ConfigError("learnable clipping needs asymmetric quantization");
}

Var fake_quantize(Graph& g, const Tensor& weight, Var upper, Var lower, const QuantSpec& spec, ClipGradient mode)
{
    if (weight.rank() != 2)
        throw ShapeError("fake_quantize expects a matrix, got " + shape_str(weight.shape()));
    const std::int64_t rows = weight.dim(0);
    const std::int64_t cols = weight.dim(1);
    if (cols % spec.group_size != 0)
        throw ConfigError("learnable clipping needs d_in (" + std::to_string(cols) + ") divisible by group_size "
                          + std::to_string(spec.group_size));
    const std::int64_t per_row = cols / spec.group_size;
    const std::int64_t groups = rows * per_row;
    const Shape gshape{groups, 1};
    if (upper.shape() != gshape || lower.shape() != gshape)
        throw ShapeError("clip factors must be " + shape_str(gshape));

    const std::int64_t gs = spec.group_size;
    const std::vector<double> w = weight.to_vector();
    Tensor wg({groups, gs}, DType::f64);
    Tensor mx(gshape, DType::f64);
    Tensor mn(gshape, DType::f64);
    Tensor keep({groups, gs}, DType::f64);
    Tensor passthrough({groups, gs}, DType::f64);
    for (std::int64_t r = 0; r < groups; ++r) {
        const auto first = w.begin() + r * gs;
        const auto [lo, hi] = std::minmax_element(first, first + gs);
        const bool constant = *lo == *hi;
        // constant groups are represented exactly; their quantization path is masked out
        mx.set(r, constant ? 1.0 : *hi);
        mn.set(r, constant ? 0.0 : *lo);
        for (std::int64_t i = 0; i < gs; ++i) {
            wg.set(r * gs + i, w[static_cast<std::size_t>(r * gs + i)]);
            keep.set(r * gs + i, constant ? 0.0 : 1.0);
            passthrough.set(r * gs + i, constant ? w[static_cast<std::size_t>(r * gs + i)] : 0.0);
        }
    }
    const double levels = spec.max_code();
    Var h = scale(sub(mul(upper, g.constant(mx)), mul(lower, g.constant(mn))), 1.0 / levels);
    Var inv_h = pow(h, -1.0);
    Var zero = straight_through(scale(mul(mul(lower, g.constant(mn)), inv_h), -1.0), StraightThrough::round_half_even);
    Var codes = clamp(add(straight_through(mul(g.constant(wg), inv_h), StraightThrough::round_half_even), zero), 0.0,
                      levels);
    Var offset = sub(codes, zero);
    if (mode == ClipGradient::frozen_codes)
        offset = g.constant(offset.value());
    Var deq = add(mul(mul(h, offset), g.constant(keep)), g.constant(passthrough));
    return reshape(deq, {rows, cols});
}

JointObjective joint_objective(Var out, Var x, const Tensor& target_out, const Tensor& g_out,
                               const Tensor& target_grad, double grad_weight)
{
    Graph& g = out.graph();
    JointObjective j;
    j.fit = frobenius_sq(sub(out, g.constant(target_out)));
    Gradients gx = backward(sum(mul(out, g.constant(g_out))), {x});
    j.grad = frobenius_sq(sub(gx[x], g.constant(target_grad)));
    j.total = grad_weight == 0.0 ? j.fit : add(j.fit, scale(j.grad, grad_weight));
    return j;
}

namespace {

ForwardTrace full_pass(Graph& g, const Model& model, const TokenBatch& batch)
{
    ForwardOptions opt;
    opt.reduction = LossReduction::sum_of_sequence_means;
    return forward(g, model, batch, opt);
}

void check_block(const Model& model, int block)
{
    if (block < 0 || block >= model.config().n_layer)
        throw ContractError("block index " + std::to_string(block) + " outside [0, "
                            + std::to_string(model.config().n_layer) + ")");
}

struct ClipLeaves {
    std::map<std::string, Var> upper;
    std::map<std::string, Var> lower;
};

Tensor clip_tensor(const std::vector<ClipParams>& c, bool upper)
{
    Tensor t({static_cast<std::int64_t>(c.size()), 1}, DType::f64);
    for (std::size_t i = 0; i < c.size(); ++i)
        t.set(static_cast<std::int64_t>(i), upper ? c[i].upper : c[i].lower);
    return t;
}

/// Block objective on one calibration batch with the clip factors as leaves.
JointObjective batch_objective(Graph& g, const Model& model, int block, const ClipSet& clip, const QuantSpec& spec,
                               ClipGradient mode, const Tensor& input, const Tensor& target_out,
                               const Tensor& g_out, const Tensor& target_grad, const TokenBatch& batch,
                               double grad_weight, ClipLeaves* leaves)
{
    std::map<std::string, Var> weights;
    for (const auto& name : model.linear_names(block)) {
        const auto& c = clip.at(name);
        Var upper = g.param(clip_tensor(c, true));
        Var lower = g.param(clip_tensor(c, false));
        weights[name] = fake_quantize(g, model.param(name), upper, lower, spec, mode);
        if (leaves) {
            leaves->upper[name] = upper;
            leaves->lower[name] = lower;
        }
    }
    auto weight = [&](const std::string& name) {
        auto it = weights.find(name);
        return it != weights.end() ? it->second : g.constant(model.param(name));
    };
    Var x = g.param(input);
    Var out = layer_forward(g, model, block, x, batch.batch, batch.seq, weight);
    return joint_objective(out, x, target_out, g_out, target_grad, grad_weight);
}

void apply_clip(Model& model, const ClipSet& clip, const QuantSpec& spec)
{
    for (const auto& [name, c] : clip) {
        auto q = std::make_shared<QuantizedLinear>(quantize(model.param(name), spec, c));
        model.set_param(name, dequantize(*q));
        model.set_quantized(name, std::move(q));
    }
}

} // namespace

BlockTargets capture_block_targets(const Model& fp_model, std::span<const TokenBatch> calib, int block)
{
    check_block(fp_model, block);
    BlockTargets t;
    t.block = block;
    for (const auto& batch : calib) {
        Graph g(DType::f32);
        ForwardTrace tr = full_pass(g, fp_model, batch);
        Var in = tr.hidden[static_cast<std::size_t>(block)];
        Gradients grads = backward(tr.loss, {in});
        t.outputs.push_back(tr.hidden[static_cast<std::size_t>(block) + 1].value().cast(DType::f64));
        t.input_grads.push_back(grads[in].value().cast(DType::f64));
    }
    return t;
}

BlockObservation observe_block(const Model& model, std::span<const TokenBatch> calib, int block)
{
    check_block(model, block);
    BlockObservation o;
    for (const auto& batch : calib) {
        Graph g(DType::f32);
        ForwardTrace tr = full_pass(g, model, batch);
        Var out = tr.hidden[static_cast<std::size_t>(block) + 1];
        Gradients grads = backward(tr.loss, {out});
        o.inputs.push_back(tr.hidden[static_cast<std::size_t>(block)].value().cast(DType::f64));
        o.output_grads.push_back(grads[out].value().cast(DType::f64));
    }
    return o;
}

ClipSet unit_clip(const Model& model, int block, const QuantSpec& spec)
{
    ClipSet c;
    for (const auto& name : model.linear_names(block)) {
        const Tensor& w = model.param(name);
        const std::int64_t groups = w.dim(0) * ((w.dim(1) + spec.group_size - 1) / spec.group_size);
        c[name] = std::vector<ClipParams>(static_cast<std::size_t>(groups));
    }
    return c;
}

LossTerms block_loss(const Model& model, int block, const ClipSet& clip, const QuantSpec& spec,
                     const BlockTargets& targets, const BlockObservation& obs, std::span<const TokenBatch> calib)
{
    LossTerms terms;
    for (std::size_t b = 0; b < calib.size(); ++b) {
        Graph g(DType::f64);
        JointObjective j = batch_objective(g, model, block, clip, spec, ClipGradient::straight_through, obs.inputs[b],
                                           targets.outputs[b], obs.output_grads[b], targets.input_grads[b], calib[b],
                                           0.0, nullptr);
        terms.fit += j.fit.value().at(0);
        terms.grad += j.grad.value().at(0);
    }
    return terms;
}

BlockTrace lgp_distill_block(Model& model, int block, const BlockTargets& targets, std::span<const TokenBatch> calib,
                             const LgpConfig& cfg)
{
    cfg.validate();
    check_block(model, block);
    if (targets.outputs.size() != calib.size())
        throw ContractError("block targets were captured on a different calibration set");

    // the block's full-precision weights; `model` receives the quantized ones at the end
    const Model original = model;
    BlockTrace trace;
    trace.block = block;
    trace.learning_rate = cfg.learning_rate;
    ClipSet clip = unit_clip(model, block, cfg.spec);

    // block inputs and output gradients from one full pass before this block is quantized
    const BlockObservation obs = observe_block(model, calib, block);
    trace.initial = block_loss(original, block, clip, cfg.spec, targets, obs, calib);
    trace.epochs.push_back(trace.initial);
    ClipSet best = clip;
    double best_loss = trace.initial.joint(cfg.grad_weight);

    // Adam moments per projection, interleaved upper/lower
    std::map<std::string, std::vector<double>> m1;
    std::map<std::string, std::vector<double>> m2;
    int t = 0;
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const ClipSet epoch_start = clip;
        const auto m1_start = m1;
        const auto m2_start = m2;
        const int t_start = t;
        bool finite = true;
        for (std::size_t b = 0; b < calib.size() && finite; ++b) {
            Graph g(DType::f64);
            ClipLeaves leaves;
            JointObjective j = batch_objective(g, original, block, clip, cfg.spec, cfg.gradient, obs.inputs[b],
                                               targets.outputs[b], obs.output_grads[b], targets.input_grads[b],
                                               calib[b], cfg.grad_weight, &leaves);
            if (!std::isfinite(j.total.value().at(0))) {
                finite = false;
                break;
            }
            std::vector<Var> wrt;
            for (const auto& [name, v] : leaves.upper) {
                wrt.push_back(v);
                wrt.push_back(leaves.lower.at(name));
            }
            Gradients grads = backward(j.total, wrt);
            ++t;
            const double c1 = 1.0 - std::pow(b1, t);
            const double c2 = 1.0 - std::pow(b2, t);
            for (auto& [name, c] : clip) {
                const Tensor dg = grads[leaves.upper.at(name)].value();
                const Tensor db = grads[leaves.lower.at(name)].value();
                auto& a = m1[name];
                auto& v = m2[name];
                a.resize(2 * c.size(), 0.0);
                v.resize(2 * c.size(), 0.0);
                for (std::size_t i = 0; i < c.size(); ++i) {
                    for (int k = 0; k < 2; ++k) {
                        const double grad = k == 0 ? dg.at(static_cast<std::int64_t>(i)) : db.at(static_cast<std::int64_t>(i));
                        if (!std::isfinite(grad)) {
                            finite = false;
                            continue;
                        }
                        double& p = k == 0 ? c[i].upper : c[i].lower;
                        if (cfg.optimizer == ClipOptimizer::gradient_descent) {
                            p -= trace.learning_rate * grad;
                        } else {
                            const std::size_t s = 2 * i + static_cast<std::size_t>(k);
                            a[s] = b1 * a[s] + (1 - b1) * grad;
                            v[s] = b2 * v[s] + (1 - b2) * grad * grad;
                            p -= trace.learning_rate * (a[s] / c1) / (std::sqrt(v[s] / c2) + eps);
                        }
                        p = std::clamp(p, kClipMin, kClipMax);
                    }
                }
            }
        }
        if (!finite) {
            if (++trace.restarts > 3)
                throw NumericalError("LGP block " + std::to_string(block) + " diverged after 3 learning-rate halvings");
            trace.learning_rate /= 2.0;
            spdlog::warn("LGP block {} hit a non-finite loss; learning rate halved to {}", block, trace.learning_rate);
            clip = epoch_start;
            m1 = m1_start;
            m2 = m2_start;
            t = t_start;
            --epoch;
            continue;
        }
        const LossTerms terms = block_loss(original, block, clip, cfg.spec, targets, obs, calib);
        trace.epochs.push_back(terms);
        if (terms.joint(cfg.grad_weight) <= best_loss) {
            best_loss = terms.joint(cfg.grad_weight);
            best = clip;
        }
    }
    trace.clip = best;
    apply_clip(model, best, cfg.spec);
    trace.final = block_loss(original, block, best, cfg.spec, targets, obs, calib);
    return trace;
}

double LgpResult::fit_residual() const
{
    double acc = 0.0;
    for (const auto& b : blocks)
        acc += b.final.fit;
    return acc;
}

double LgpResult::grad_residual() const
{
    double acc = 0.0;
    for (const auto& b : blocks)
        acc += b.final.grad;
    return acc;
}

LgpResult lgp_quantize_model(const Model& fp_model, std::span<const TokenBatch> calib, const LgpConfig& cfg)
{
    cfg.validate();
    LgpResult res{fp_model, {}};
    if (!cfg.spec.enabled)
        return res;
    for (int l = 0; l < fp_model.config().n_layer; ++l) {
        const BlockTargets targets = capture_block_targets(fp_model, calib, l);
        res.blocks.push_back(lgp_distill_block(res.model, l, targets, calib, cfg));
    }
    res.model.set_precision(Precision::quantized);
    return res;
}

GradWeightChoice choose_grad_weight(double fit, double grad, std::span<const double> magnitudes,
                           const std::function<double(double)>& downstream)
{
    if (magnitudes.empty())
        throw InputError("grad_weight search needs at least one magnitude");
    GradWeightChoice c;
    if (grad == 0.0 || fit == 0.0) {
        c.degenerate = true;
        c.grad_weight = *std::min_element(magnitudes.begin(), magnitudes.end());
        spdlog::warn("grad_weight search: a loss term is zero, grad_weight has no balancing effect");
        return c;
    }
    for (double m : magnitudes) {
        const double ratio = m * grad / fit;
        // relative slack absorbs rounding in the ratio of powers of ten
        if (ratio >= 0.1 * (1 - 1e-12) && ratio <= 10.0 * (1 + 1e-12))
            c.qualifying.push_back(m);
    }
    const auto closeness = [&](double m) { return std::abs(std::log10(m * grad / fit)); };
    const std::vector<double>& pool = c.qualifying.empty() ? std::vector<double>(magnitudes.begin(), magnitudes.end())
                                                           : c.qualifying;
    if (c.qualifying.size() > 1 && downstream) {
        double best = std::numeric_limits<double>::infinity();
        for (double m : pool) {
            const double score = downstream(m);
            if (score < best) {
                best = score;
                c.grad_weight = m;
            }
        }
        return c;
    }
    c.grad_weight = *std::min_element(pool.begin(), pool.end(),
                                 [&](double a, double b) { return closeness(a) < closeness(b); });
    return c;
}

GradWeightChoice grad_weight_scale_search(const Model& fp_model, std::span<const TokenBatch> calib, int block,
                                 const QuantSpec& spec, std::span<const double> magnitudes,
                                 const std::function<double(double)>& downstream)
{
    const BlockTargets targets = capture_block_targets(fp_model, calib, block);
    const ClipSet clip = unit_clip(fp_model, block, spec);
    const LossTerms init = block_loss(fp_model, block, clip, spec, targets, observe_block(fp_model, calib, block), calib);
    return choose_grad_weight(init.fit, init.grad, magnitudes, downstream);
}

std::vector<double> default_grad_weight_magnitudes()
{
    std::vector<double> m;
    for (int k = 0; k <= 8; ++k)
        m.push_back(std::pow(10.0, k));
    return m;
}

} // namespace quantlab
