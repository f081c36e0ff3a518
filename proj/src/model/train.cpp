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

#include "quantlab/model/train.hpp"

#include "quantlab/error.hpp"

#include <cmath>
#include <numbers>

namespace quantlab {

double learning_rate_at(const TrainSchedule& s, int step)
{
    if (s.warmup > 0 && step < s.warmup)
        return s.learning_rate * static_cast<double>(step + 1) / static_cast<double>(s.warmup);
    const int span = std::max(1, s.steps - s.warmup);
    const double progress = std::clamp(static_cast<double>(step - s.warmup) / span, 0.0, 1.0);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return s.learning_rate * (s.min_lr_ratio + (1.0 - s.min_lr_ratio) * cosine);
}

BatchSampler::BatchSampler(std::span<const std::int64_t> corpus, int batch, int seq_len, std::uint64_t seed)
    : corpus_(corpus), batch_(batch), seq_len_(seq_len), rng_(seed)
{
    if (batch < 1 || seq_len < 2)
        throw InputError("batch sampler needs batch >= 1 and seq_len >= 2");
    if (static_cast<std::int64_t>(corpus.size()) <= seq_len)
        throw InputError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than one window");
}

TokenBatch BatchSampler::next()
{
    TokenBatch b;
    b.batch = batch_;
    b.seq = seq_len_;
    const auto max_start = static_cast<std::uint64_t>(corpus_.size()) - static_cast<std::uint64_t>(seq_len_);
    for (int i = 0; i < batch_; ++i) {
        const auto start = static_cast<std::size_t>(rng_() % (max_start + 1));
        b.ids.insert(b.ids.end(), corpus_.begin() + static_cast<std::ptrdiff_t>(start),
                     corpus_.begin() + static_cast<std::ptrdiff_t>(start) + seq_len_);
    }
    return b;
}

void AdamW::step(Model& model, const std::map<std::string, Tensor>& grads, double lr)
{
    ++t_;
    const double bc1 = 1.0 - std::pow(s_.beta1, t_);
    const double bc2 = 1.0 - std::pow(s_.beta2, t_);
    for (const auto& [name, grad] : grads) {
        Tensor w = model.param(name);
        auto wd = w.data<float>();
        const Tensor g32 = grad.cast(DType::f32);
        auto gd = g32.data<float>();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(wd.size(), 0.0f);
            v.assign(wd.size(), 0.0f);
        }
        const bool decay = w.rank() == 2;
        for (std::size_t i = 0; i < wd.size(); ++i) {
            const double gi = gd[i];
            m[i] = static_cast<float>(s_.beta1 * m[i] + (1.0 - s_.beta1) * gi);
            v[i] = static_cast<float>(s_.beta2 * v[i] + (1.0 - s_.beta2) * gi * gi);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double update = mhat / (std::sqrt(vhat) + s_.epsilon);
            if (decay)
                update += s_.weight_decay * wd[i];
            wd[i] = static_cast<float>(wd[i] - lr * update);
        }
        model.set_param(name, std::move(w));
    }
}

double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm)
{
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (std::int64_t i = 0; i < g.size(); ++i)
            sq += g.at(i) * g.at(i);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& [name, g] : grads) {
            auto d = g.data<float>();
            for (auto& x : d)
                x = static_cast<float>(x * f);
        }
    }
    return norm;
}

TrainResult train_baseline(Model& model, std::span<const std::int64_t> corpus, const TrainSchedule& schedule)
{
    TrainResult result;
    BatchSampler sampler(corpus, schedule.batch, schedule.seq_len, schedule.seed);
    AdamW opt(schedule);
    for (int step = 0; step < schedule.steps; ++step) {
        TokenBatch batch = sampler.next();
        Graph g(DType::f32);
        ForwardTrace tr = forward(g, model, batch);
        const double loss = tr.loss.value().at(0);
        if (!std::isfinite(loss))
            throw NumericalError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss)
                                 + ")");
        result.loss.push_back(loss);
        std::vector<Var> wrt;
        for (const auto& [name, w] : tr.weights)
            wrt.push_back(w);
        Gradients grads = backward(tr.loss, wrt);
        std::map<std::string, Tensor> gmap;
        for (const auto& [name, w] : tr.weights)
            gmap[name] = grads[w].value();
        clip_gradients(gmap, schedule.grad_clip);
        opt.step(model, gmap, learning_rate_at(schedule, step));
    }
    return result;
}

} // namespace quantlab
