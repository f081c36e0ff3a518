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

#include "quantlab/model/model.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace quantlab {

namespace {

const std::array<const char*, 7> kLinearLeaves{"q_proj", "k_proj", "v_proj", "o_proj",
                                               "gate_proj", "up_proj", "down_proj"};

void require(bool ok, const std::string& what)
{
    if (!ok)
        throw ConfigError("model config: " + what);
}

Tensor normal_tensor(const Shape& shape, std::mt19937_64& rng, double std)
{
    std::normal_distribution<double> dist(0.0, std);
    Tensor t(shape, DType::f32);
    auto d = t.data<float>();
    for (auto& v : d)
        v = static_cast<float>(dist(rng));
    return t;
}

bool is_linear(const std::string& name)
{
    return std::any_of(kLinearLeaves.begin(), kLinearLeaves.end(), [&](const char* leaf) {
        const std::string suffix = std::string(".") + leaf;
        return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    });
}

void check_tokens(const Model& model, const TokenBatch& tokens)
{
    const auto& c = model.config();
    if (tokens.batch < 1 || tokens.seq < 1 || static_cast<std::int64_t>(tokens.ids.size()) != tokens.rows())
        throw InputError("token batch is empty or inconsistent with its shape");
    if (tokens.seq > c.max_seq_len)
        throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len "
                         + std::to_string(c.max_seq_len));
    for (auto id : tokens.ids)
        if (id < 0 || id >= c.vocab_size)
            throw InputError("token id " + std::to_string(id) + " outside vocabulary of "
                             + std::to_string(c.vocab_size));
}

} // namespace

void ModelConfig::validate() const
{
    require(n_layer >= 1, "n_layer must be >= 1");
    require(n_head >= 1, "n_head must be >= 1");
    require(d_hidden >= 1, "d_hidden must be >= 1");
    require(d_inter >= 1, "d_inter must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(max_seq_len >= 1, "max_seq_len must be >= 1");
    require(d_hidden % n_head == 0, "d_hidden (" + std::to_string(d_hidden) + ") must be divisible by n_head ("
                                        + std::to_string(n_head) + ")");
}

ModelConfig toggle_rmsnorm_variant(ModelConfig config)
{
    config.use_rms_norm_before_linear = true;
    return config;
}

std::string to_string(Precision p)
{
    switch (p) {
    case Precision::fp: return "fp";
    case Precision::quantized: return "quantized";
    case Precision::ternary: return "ternary";
    }
    return "?";
}

std::string to_string(TapSite site)
{
    switch (site) {
    case TapSite::embedding_out: return "embedding_out";
    case TapSite::input_layernorm_in: return "input_layernorm_in";
    case TapSite::input_layernorm_out: return "input_layernorm_out";
    case TapSite::post_attention_layernorm_in: return "post_attention_layernorm_in";
    case TapSite::post_attention_layernorm_out: return "post_attention_layernorm_out";
    }
    return "?";
}

TokenBatch TokenBatch::single(std::vector<std::int64_t> tokens)
{
    TokenBatch b;
    b.batch = 1;
    b.seq = static_cast<std::int64_t>(tokens.size());
    b.ids = std::move(tokens);
    return b;
}

std::string layer_param(int layer, const std::string& leaf)
{
    return "layers." + std::to_string(layer) + "." + leaf;
}

std::int64_t expected_parameter_count(const ModelConfig& c)
{
    const std::int64_t d = c.d_hidden;
    const std::int64_t per_layer = 4 * d * d + 3 * d * c.d_inter + 2 * d;
    return 2 * static_cast<std::int64_t>(c.vocab_size) * d + static_cast<std::int64_t>(c.max_seq_len) * d
           + c.n_layer * per_layer + d;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config)
{
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::int64_t d = config_.d_hidden;
    const std::int64_t m = config_.d_inter;
    const double std = 0.02;
    params_["tok_emb"] = normal_tensor({config_.vocab_size, d}, rng, std);
    params_["pos_emb"] = normal_tensor({config_.max_seq_len, d}, rng, std);
    for (int l = 0; l < config_.n_layer; ++l) {
        params_[layer_param(l, "attn_norm")] = Tensor({d}, DType::f32, 1.0);
        for (const char* p : {"q_proj", "k_proj", "v_proj", "o_proj"})
            params_[layer_param(l, p)] = normal_tensor({d, d}, rng, std);
        params_[layer_param(l, "mlp_norm")] = Tensor({d}, DType::f32, 1.0);
        params_[layer_param(l, "gate_proj")] = normal_tensor({m, d}, rng, std);
        params_[layer_param(l, "up_proj")] = normal_tensor({m, d}, rng, std);
        params_[layer_param(l, "down_proj")] = normal_tensor({d, m}, rng, std);
    }
    params_["final_norm"] = Tensor({d}, DType::f32, 1.0);
    params_["lm_head"] = normal_tensor({config_.vocab_size, d}, rng, std);
}

const Tensor& Model::param(const std::string& name) const
{
    auto it = params_.find(name);
    if (it == params_.end())
        throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

void Model::set_param(const std::string& name, Tensor value)
{
    auto it = params_.find(name);
    if (it == params_.end())
        throw ContractError("unknown parameter '" + name + "'");
    if (it->second.shape() != value.shape())
        throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", got "
                         + shape_str(value.shape()));
    it->second = value.cast(DType::f32);
}

std::vector<std::string> Model::linear_names() const
{
    std::vector<std::string> out;
    for (int l = 0; l < config_.n_layer; ++l)
        for (const auto& n : linear_names(l))
            out.push_back(n);
    return out;
}

std::vector<std::string> Model::linear_names(int layer) const
{
    std::vector<std::string> out;
    for (const char* leaf : kLinearLeaves)
        out.push_back(layer_param(layer, leaf));
    return out;
}

std::int64_t Model::parameter_count() const
{
    std::int64_t n = 0;
    for (const auto& [name, t] : params_)
        n += t.size();
    return n;
}

void Model::set_quantized(const std::string& name, std::shared_ptr<const QuantizedLinear> q)
{
    if (!is_linear(name))
        throw ContractError("'" + name + "' is not a projection weight");
    quantized_[name] = std::move(q);
}

Var ForwardTrace::tap(int layer, TapSite site) const
{
    if (site == TapSite::embedding_out)
        return embedding_out;
    const auto& taps = layers.at(static_cast<std::size_t>(layer)).taps;
    return taps[static_cast<std::size_t>(site) - 1];
}

Var layer_forward([[maybe_unused]] Graph& g, const Model& model, int layer, Var x, std::int64_t batch, std::int64_t seq,
                  const std::function<Var(const std::string&)>& weight, LayerTrace* trace)
{
    const auto& c = model.config();
    const std::int64_t d = c.d_hidden;
    const std::int64_t head_dim = d / c.n_head;
    auto name = [layer](const char* leaf) { return layer_param(layer, leaf); };

    auto linear = [&](const char* leaf, Var in) {
        Var y = matmul(in, weight(name(leaf)), false, true);
        if (trace) {
            trace->linear_in[name(leaf)] = in;
            trace->linear_out[name(leaf)] = y;
        }
        return y;
    };
    auto prenorm = [&](Var in) { return c.use_rms_norm_before_linear ? rms_norm(in) : in; };

    Var attn_in = mul(rms_norm(x), weight(name("attn_norm")));
    Var attn_lin = prenorm(attn_in);
    Var q = reshape(linear("q_proj", attn_lin), {batch, seq, d});
    Var k = reshape(linear("k_proj", attn_lin), {batch, seq, d});
    Var v = reshape(linear("v_proj", attn_lin), {batch, seq, d});
    std::vector<Var> heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int h = 0; h < c.n_head; ++h) {
        Var qh = slice(q, 2, h * head_dim, head_dim);
        Var kh = slice(k, 2, h * head_dim, head_dim);
        Var vh = slice(v, 2, h * head_dim, head_dim);
        Var p = softmax(scale(matmul(qh, kh, false, true), inv_sqrt), true);
        heads.push_back(matmul(p, vh));
    }
    Var attn = reshape(concat(heads, 2), {batch * seq, d});
    Var h = add(x, linear("o_proj", prenorm(attn)));

    Var mlp_in = mul(rms_norm(h), weight(name("mlp_norm")));
    Var mlp_lin = prenorm(mlp_in);
    Var act = mul(silu(linear("gate_proj", mlp_lin)), linear("up_proj", mlp_lin));
    Var out = add(h, linear("down_proj", prenorm(act)));

    if (trace) {
        trace->input = x;
        trace->taps = {x, attn_in, h, mlp_in};
        trace->output = out;
    }
    return out;
}

ForwardTrace forward(Graph& g, const Model& model, const TokenBatch& tokens, const ForwardOptions& options)
{
    check_tokens(model, tokens);
    const auto& c = model.config();
    const bool ternary = options.ternary || model.precision() == Precision::ternary;
    ForwardTrace tr;

    for (const auto& [name, value] : model.params()) {
        const bool frozen = options.freeze_embeddings && (name == "tok_emb" || name == "pos_emb");
        Var w = frozen ? g.constant(value, name) : g.param(value, name);
        tr.weights[name] = w;
        Var eff = w;
        if (ternary && is_linear(name))
            eff = straight_through(eff, StraightThrough::ternary_absmean);
        if (options.weight_transform)
            eff = options.weight_transform(name, eff);
        tr.effective[name] = eff;
    }
    auto weight = [&](const std::string& name) { return tr.effective.at(name); };

    auto ids = std::make_shared<const std::vector<std::int64_t>>(tokens.ids);
    auto positions = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(tokens.rows()));
    for (std::int64_t r = 0; r < tokens.rows(); ++r)
        (*positions)[static_cast<std::size_t>(r)] = r % tokens.seq;

    Var x = add(embedding(weight("tok_emb"), ids), embedding(weight("pos_emb"), positions));
    tr.embedding_out = x;
    tr.hidden.push_back(x);
    tr.layers.resize(static_cast<std::size_t>(c.n_layer));
    for (int l = 0; l < c.n_layer; ++l) {
        x = layer_forward(g, model, l, x, tokens.batch, tokens.seq, weight, &tr.layers[static_cast<std::size_t>(l)]);
        tr.hidden.push_back(x);
    }
    Var final = mul(rms_norm(x), weight("final_norm"));
    tr.logits = matmul(final, weight("lm_head"), false, true);

    if (options.with_loss) {
        if (tokens.seq < 2)
            throw InputError("language-model loss needs at least 2 tokens per sequence");
        auto targets = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(tokens.rows()), -1);
        for (std::int64_t b = 0; b < tokens.batch; ++b)
            for (std::int64_t t = 0; t + 1 < tokens.seq; ++t)
                (*targets)[static_cast<std::size_t>(b * tokens.seq + t)]
                    = tokens.ids[static_cast<std::size_t>(b * tokens.seq + t + 1)];
        tr.loss = cross_entropy(tr.logits, targets);
        if (options.reduction == LossReduction::sum_of_sequence_means && tokens.batch > 1)
            tr.loss = scale(tr.loss, static_cast<double>(tokens.batch));
    }
    return tr;
}

double lm_loss(const Model& model, const std::vector<std::int64_t>& tokens)
{
    return lm_loss(model, TokenBatch::single(tokens));
}

double lm_loss(const Model& model, const TokenBatch& batch, bool ternary, DType dtype)
{
    Graph g(dtype);
    ForwardOptions opt;
    opt.ternary = ternary;
    return forward(g, model, batch, opt).loss.value().at(0);
}

std::vector<std::vector<double>> token_nll(const Model& model, const TokenBatch& batch, bool ternary)
{
    Graph g(DType::f32);
    ForwardOptions opt;
    opt.ternary = ternary;
    opt.with_loss = false;
    const Tensor& logits = forward(g, model, batch, opt).logits.value();
    const auto v = logits.dim(-1);
    auto data = logits.data<float>();
    std::vector<std::vector<double>> out(static_cast<std::size_t>(batch.batch));
    for (std::int64_t b = 0; b < batch.batch; ++b) {
        auto& row_out = out[static_cast<std::size_t>(b)];
        for (std::int64_t t = 0; t + 1 < batch.seq; ++t) {
            const std::int64_t r = b * batch.seq + t;
            const float* row = data.data() + r * v;
            const double mx = *std::max_element(row, row + v);
            double z = 0.0;
            for (std::int64_t j = 0; j < v; ++j)
                z += std::exp(static_cast<double>(row[j]) - mx);
            const auto target = batch.ids[static_cast<std::size_t>(r + 1)];
            row_out.push_back(mx + std::log(z) - static_cast<double>(row[target]));
        }
    }
    return out;
}

InputGradient input_gradient(const Model& model, const TokenBatch& tokens, int layer, bool ternary, DType dtype)
{
    if (layer < 0 || layer > model.config().n_layer)
        throw ContractError("layer index " + std::to_string(layer) + " outside [0, "
                            + std::to_string(model.config().n_layer) + "]");
    Graph g(dtype);
    ForwardOptions opt;
    opt.ternary = ternary;
    opt.reduction = LossReduction::sum_of_sequence_means;
    ForwardTrace tr = forward(g, model, tokens, opt);
    Var x = tr.hidden[static_cast<std::size_t>(layer)];
    Gradients grads = backward(tr.loss, {x});
    return {grads[x].value(), x.value()};
}

std::vector<std::vector<double>> next_token_probabilities(const Model& model,
                                                          const std::vector<std::vector<std::int64_t>>& contexts,
                                                          bool ternary)
{
    if (contexts.empty())
        return {};
    TokenBatch batch;
    batch.batch = static_cast<std::int64_t>(contexts.size());
    batch.seq = static_cast<std::int64_t>(contexts.front().size());
    if (batch.seq < 1)
        throw InputError("empty context");
    for (const auto& c : contexts) {
        if (static_cast<std::int64_t>(c.size()) != batch.seq)
            throw InputError("contexts in one call must share a length");
        batch.ids.insert(batch.ids.end(), c.begin(), c.end());
    }
    Graph g(DType::f32);
    ForwardOptions opt;
    opt.ternary = ternary;
    opt.with_loss = false;
    const Tensor& logits = forward(g, model, batch, opt).logits.value();
    const auto v = logits.dim(-1);
    auto data = logits.data<float>();
    std::vector<std::vector<double>> out;
    for (std::int64_t b = 0; b < batch.batch; ++b) {
        const float* row = data.data() + (b * batch.seq + batch.seq - 1) * v;
        const double mx = *std::max_element(row, row + v);
        std::vector<double> p(static_cast<std::size_t>(v));
        double z = 0.0;
        for (std::int64_t j = 0; j < v; ++j)
            z += p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
        for (auto& x : p)
            x /= z;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<RankedToken> next_token_ranking(const Model& model, const std::vector<std::int64_t>& context,
                                            int k_max, bool ternary)
{
    if (context.empty())
        throw InputError("empty context");
    if (k_max < 1 || k_max > model.config().vocab_size)
        throw InputError("k_max must lie in [1, vocab_size]");
    std::vector<std::int64_t> ctx = context;
    const auto limit = static_cast<std::size_t>(model.config().max_seq_len);
    if (ctx.size() > limit)
        ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(limit));
    const auto probs = next_token_probabilities(model, {ctx}, ternary).front();
    std::vector<RankedToken> ranked;
    for (std::size_t i = 0; i < probs.size(); ++i)
        ranked.push_back({static_cast<std::int64_t>(i), probs[i]});
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const RankedToken& a, const RankedToken& b) { return a.probability > b.probability; });
    ranked.resize(static_cast<std::size_t>(k_max));
    return ranked;
}

} // namespace quantlab
