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

#include "quantlab/tensor/graph.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace quantlab {

struct QuantizedLinear;

struct ModelConfig {
    int n_layer = 4;
    int n_head = 4;
    int d_hidden = 128;
    int d_inter = 256;
    int vocab_size = 256;
    int max_seq_len = 256;
    /// Parameter-free RMS normalization in front of every projection.
    bool use_rms_norm_before_linear = false;

    /// Throws ConfigError naming the violated bound.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Config with pre-linear RMS normalization switched on.
ModelConfig toggle_rmsnorm_variant(ModelConfig config);

enum class Precision : std::uint8_t { fp, quantized, ternary };

std::string to_string(Precision p);

/// The five per-layer gradient observation points.
enum class TapSite : std::uint8_t {
    embedding_out,
    input_layernorm_in,
    input_layernorm_out,
    post_attention_layernorm_in,
    post_attention_layernorm_out,
};

std::string to_string(TapSite site);

inline constexpr std::array<TapSite, 4> kLayerSites{
    TapSite::input_layernorm_in, TapSite::input_layernorm_out, TapSite::post_attention_layernorm_in,
    TapSite::post_attention_layernorm_out};

/// Row-major [batch, seq] token ids.
struct TokenBatch {
    std::int64_t batch = 0;
    std::int64_t seq = 0;
    std::vector<std::int64_t> ids;

    static TokenBatch single(std::vector<std::int64_t> tokens);
    std::int64_t rows() const { return batch * seq; }
};

/// Decoder-only transformer parameters. Linear weights are stored [d_out, d_in].
class Model {
public:
    Model() = default;
    Model(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    Precision precision() const { return precision_; }
    void set_precision(Precision p) { precision_ = p; }

    const std::map<std::string, Tensor>& params() const { return params_; }
    const Tensor& param(const std::string& name) const;
    void set_param(const std::string& name, Tensor value);

    /// Attention and MLP projection names, in layer order.
    std::vector<std::string> linear_names() const;
    std::vector<std::string> linear_names(int layer) const;
    std::int64_t parameter_count() const;

    /// Packed representation of projections that were quantized.
    const std::map<std::string, std::shared_ptr<const QuantizedLinear>>& quantized() const { return quantized_; }
    void set_quantized(const std::string& name, std::shared_ptr<const QuantizedLinear> q);
    void clear_quantized() { quantized_.clear(); }

private:
    ModelConfig config_;
    Precision precision_ = Precision::fp;
    std::map<std::string, Tensor> params_;
    std::map<std::string, std::shared_ptr<const QuantizedLinear>> quantized_;
};

std::string layer_param(int layer, const std::string& leaf);

/// Analytic parameter count for a configuration.
std::int64_t expected_parameter_count(const ModelConfig& c);

enum class LossReduction : std::uint8_t {
    /// mean next-token NLL over all predicted positions
    mean,
    /// sum over sequences of each sequence's mean NLL; per-token gradients then
    /// equal those of the sequence evaluated alone
    sum_of_sequence_means,
};

struct ForwardOptions {
    /// Maps a weight leaf to the effective weight used by the forward pass.
    std::function<Var(const std::string& name, Var weight)> weight_transform;
    bool ternary = false;
    LossReduction reduction = LossReduction::mean;
    bool with_loss = true;
    /// Embedding tables are constants (frozen).
    bool freeze_embeddings = false;
};

struct LayerTrace {
    Var input;
    std::array<Var, 4> taps;
    Var output;
    std::map<std::string, Var> linear_in;
    std::map<std::string, Var> linear_out;
};

struct ForwardTrace {
    std::map<std::string, Var> weights;
    std::map<std::string, Var> effective;
    Var embedding_out;
    std::vector<LayerTrace> layers;
    /// hidden[i] is the input of layer i; hidden[n_layer] is the final stream
    std::vector<Var> hidden;
    Var logits;
    Var loss;

    Var tap(int layer, TapSite site) const;
};

/// Builds the forward graph for a batch. Hidden states are [batch*seq, d].
ForwardTrace forward(Graph& g, const Model& model, const TokenBatch& tokens, const ForwardOptions& options = {});

/// One transformer layer applied to x [batch*seq, d].
Var layer_forward(Graph& g, const Model& model, int layer, Var x, std::int64_t batch, std::int64_t seq,
                  const std::function<Var(const std::string&)>& weight, LayerTrace* trace = nullptr);

/// Mean next-token cross-entropy of one sequence.
double lm_loss(const Model& model, const std::vector<std::int64_t>& tokens);
double lm_loss(const Model& model, const TokenBatch& batch, bool ternary = false, DType dtype = DType::f32);

/// Per-sequence next-token NLL at positions 1..seq-1, in double precision.
std::vector<std::vector<double>> token_nll(const Model& model, const TokenBatch& batch, bool ternary = false);

struct InputGradient {
    /// [batch*seq, d]
    Tensor grad;
    Tensor hidden;
};

/// Gradient of the per-sequence loss with respect to x^(layer) for every token.
/// Layer 0 is the embedding output, layer i the input of layer i.
InputGradient input_gradient(const Model& model, const TokenBatch& tokens, int layer, bool ternary = false,
                             DType dtype = DType::f32);

struct RankedToken {
    std::int64_t token;
    double probability;
};

/// Next-token distribution after `context`, sorted by probability (ties by id).
std::vector<RankedToken> next_token_ranking(const Model& model, const std::vector<std::int64_t>& context,
                                            int k_max, bool ternary = false);

/// Full next-token probabilities after each context (all contexts share a length).
std::vector<std::vector<double>> next_token_probabilities(const Model& model,
                                                          const std::vector<std::vector<std::int64_t>>& contexts,
                                                          bool ternary = false);

} // namespace quantlab
