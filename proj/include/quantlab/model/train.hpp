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

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace quantlab {

struct TrainSchedule {
    int steps = 1000;
    int batch = 16;
    int seq_len = 64;
    double learning_rate = 3e-3;
    int warmup = 100;
    /// final learning rate as a fraction of the peak
    double min_lr_ratio = 0.1;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-8;
    /// global gradient-norm clip; <= 0 disables
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
};

/// Cosine decay after linear warmup.
double learning_rate_at(const TrainSchedule& s, int step);

/// Draws random contiguous windows from a token stream.
class BatchSampler {
public:
    BatchSampler(std::span<const std::int64_t> corpus, int batch, int seq_len, std::uint64_t seed);
    TokenBatch next();

private:
    std::span<const std::int64_t> corpus_;
    int batch_;
    int seq_len_;
    std::mt19937_64 rng_;
};

class AdamW {
public:
    explicit AdamW(const TrainSchedule& s) : s_(s) {}

    /// Applies one update; matrices receive decoupled weight decay.
    void step(Model& model, const std::map<std::string, Tensor>& grads, double lr);

private:
    TrainSchedule s_;
    std::map<std::string, std::vector<float>> m_;
    std::map<std::string, std::vector<float>> v_;
    int t_ = 0;
};

/// Scales gradients in place so their global norm is at most max_norm; returns the norm.
double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm);

struct TrainResult {
    std::vector<double> loss;
};

/// Full-precision pre-training with AdamW. Throws NumericalError on divergence.
TrainResult train_baseline(Model& model, std::span<const std::int64_t> corpus, const TrainSchedule& schedule);

} // namespace quantlab
