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

#include "quantlab/lgr/lgr.hpp"

#include "quantlab/error.hpp"
#include "quantlab/smooth/smoothness.hpp"

#include <cmath>

namespace quantlab {

void LgrConfig::validate(const ModelConfig& model) const
{
    if (!(smooth_weight >= 0.0))
        throw ConfigError("smooth_weight must be >= 0");
    if (reg_layer < 0 || reg_layer > 1 || reg_layer > model.n_layer)
        throw ConfigError("reg_layer must be 0 or 1");
    if (!(activation_fraction >= 0.0 && activation_fraction <= 1.0))
        throw ConfigError("activation_fraction must lie in [0, 1]");
    if (probe_every < 0 || probe_sequences < 1)
        throw ConfigError("invalid C_avg probe settings");
    if (probe_layer < 0 || probe_layer > model.n_layer)
        throw ConfigError("probe_layer outside [0, n_layer]");
    if (schedule.steps < 0 || schedule.batch < 1 || schedule.seq_len < 2)
        throw ConfigError("invalid training schedule");
}

int LgrConfig::activation_step() const
{
    return static_cast<int>(std::ceil(activation_fraction * schedule.steps));
}

SmoothTerms smooth_loss(const ForwardTrace& trace, const TokenBatch& batch, int reg_layer)
{
    if (reg_layer < 0 || reg_layer >= static_cast<int>(trace.hidden.size()))
        throw ContractError("reg_layer " + std::to_string(reg_layer) + " outside the traced layers");
    Var x = trace.hidden[static_cast<std::size_t>(reg_layer)];
    // per-sequence losses summed, so each token's gradient is that of its own sequence
    Var per_sequence = scale(trace.loss, static_cast<double>(batch.batch));
    Gradients grads = backward(per_sequence, {x});
    const auto predicted = static_cast<double>(batch.batch * (batch.seq - 1));
    return {trace.loss, scale(frobenius_sq(grads[x]), 1.0 / predicted)};
}

QatResult qat_train(const Model& init, std::span<const std::int64_t> corpus, const LgrConfig& cfg)
{
    cfg.validate(init.config());
    QatResult res{init, {}, {}};
    const TrainSchedule& s = cfg.schedule;
    BatchSampler sampler(corpus, s.batch, s.seq_len, s.seed);
    BatchSampler probe_sampler(corpus, 1, s.seq_len, s.seed ^ 0x5eedULL);
    std::vector<std::vector<std::int64_t>> probe;
    for (int i = 0; i < cfg.probe_sequences; ++i)
        probe.push_back(probe_sampler.next().ids);
    AdamW opt(s);
    const int activation = cfg.activation_step();

    auto sample_c_avg = [&](int step) {
        Model view = res.model;
        if (cfg.ternary)
            view.set_precision(Precision::ternary);
        res.c_avg_trace.push_back({step, compute_c_avg(view, probe, cfg.probe_layer)});
    };

    for (int step = 0; step < s.steps; ++step) {
        if (cfg.probe_every > 0 && step % cfg.probe_every == 0)
            sample_c_avg(step);
        const TokenBatch batch = sampler.next();
        Graph g(DType::f32);
        ForwardOptions fo;
        fo.ternary = cfg.ternary;
        fo.freeze_embeddings = cfg.freeze_embeddings;
        const ForwardTrace tr = forward(g, res.model, batch, fo);

        LossBreakdown lb;
        lb.step = step;
        lb.learning_rate = learning_rate_at(s, step);
        lb.smooth_active = cfg.smooth_weight > 0.0 && step >= activation;
        Var total = tr.loss;
        if (lb.smooth_active) {
            const SmoothTerms st = smooth_loss(tr, batch, cfg.reg_layer);
            total = add(st.l_lm, scale(st.l_smooth, cfg.smooth_weight));
            lb.l_smooth = st.l_smooth.value().at(0);
        }
        lb.l_lm = tr.loss.value().at(0);
        lb.total = total.value().at(0);
        if (!std::isfinite(lb.total)) {
            res.trace.push_back(lb);
            throw NumericalError("QAT diverged at step " + std::to_string(step) + " (l_lm " + std::to_string(lb.l_lm)
                                 + ", l_smooth " + std::to_string(lb.l_smooth) + ")");
        }
        res.trace.push_back(lb);

        std::vector<Var> wrt;
        std::vector<std::string> names;
        for (const auto& [name, w] : tr.weights)
            if (w.requires_grad()) {
                wrt.push_back(w);
                names.push_back(name);
            }
        Gradients grads = backward(total, wrt);
        std::map<std::string, Tensor> gmap;
        for (std::size_t i = 0; i < wrt.size(); ++i)
            gmap[names[i]] = grads[wrt[i]].value();
        clip_gradients(gmap, s.grad_clip);
        opt.step(res.model, gmap, lb.learning_rate);
    }
    if (cfg.probe_every > 0)
        sample_c_avg(s.steps);
    if (cfg.ternary)
        res.model.set_precision(Precision::ternary);
    return res;
}

} // namespace quantlab
