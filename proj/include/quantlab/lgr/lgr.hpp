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
#include "quantlab/model/train.hpp"

#include <span>
#include <vector>

namespace quantlab {

struct LgrConfig {
    /// weight of the smoothness term
    double smooth_weight = 0.01;
    /// hidden-state layer whose input gradients are penalized (0 or 1)
    int reg_layer = 1;
    /// fraction of the steps after which the smoothness term switches on
    double activation_fraction = 0.5;
    TrainSchedule schedule;
    /// ternary latent-weight training; false trains in full precision
    bool ternary = true;
    bool freeze_embeddings = false;
    /// C_avg is sampled every probe_every steps (0 disables)
    int probe_every = 50;
    int probe_sequences = 16;
    /// layer at which C_avg is probed
    int probe_layer = 1;

    void validate(const ModelConfig& model) const;
    int activation_step() const;
};

struct LossBreakdown {
    int step = 0;
    double l_lm = 0.0;
    double l_smooth = 0.0;
    double total = 0.0;
    double learning_rate = 0.0;
    /// smoothness term part of the objective at this step
    bool smooth_active = false;
};

struct SmoothTerms {
    Var l_lm;
    Var l_smooth;
};

/// l_lm and the mean over predicted positions of the squared input-gradient
/// norm at `reg_layer`, both differentiable in the parameters.
SmoothTerms smooth_loss(const ForwardTrace& trace, const TokenBatch& batch, int reg_layer);

struct CavgSample {
    int step = 0;
    double c_avg = 0.0;
};

struct QatResult {
    Model model;
    std::vector<LossBreakdown> trace;
    std::vector<CavgSample> c_avg_trace;
};

/// Trains a copy of `init` with l_lm + smooth_weight * l_smooth (the latter only after
/// the activation step). The returned model carries the precision it was trained in.
QatResult qat_train(const Model& init, std::span<const std::int64_t> corpus, const LgrConfig& cfg);

} // namespace quantlab
