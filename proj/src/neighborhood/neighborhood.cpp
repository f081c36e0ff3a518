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

#include "quantlab/neighborhood/neighborhood.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace quantlab {

namespace {

/// NLLs of the context's own tokens and log-probabilities of every next token.
struct ContextScores {
    std::vector<double> prefix_nll;
    std::vector<double> next_log_prob;
};

std::vector<ContextScores> score_contexts(const Model& model, std::span<const std::vector<std::int64_t>> contexts)
{
    TokenBatch batch;
    batch.batch = static_cast<std::int64_t>(contexts.size());
    batch.seq = static_cast<std::int64_t>(contexts.front().size());
    for (const auto& c : contexts)
        batch.ids.insert(batch.ids.end(), c.begin(), c.end());
    Graph g(DType::f32);
    ForwardOptions opt;
    opt.with_loss = false;
    const Tensor& logits = forward(g, model, batch, opt).logits.value();
    const auto vocab = logits.dim(-1);
    auto data = logits.data<float>();

    std::vector<ContextScores> out(contexts.size());
    for (std::int64_t b = 0; b < batch.batch; ++b) {
        auto& s = out[static_cast<std::size_t>(b)];
        for (std::int64_t t = 0; t < batch.seq; ++t) {
            const std::int64_t r = b * batch.seq + t;
            const float* row = data.data() + r * vocab;
            const double mx = *std::max_element(row, row + vocab);
            double z = 0.0;
            for (std::int64_t j = 0; j < vocab; ++j)
                z += std::exp(static_cast<double>(row[j]) - mx);
            const double lse = mx + std::log(z);
            if (t + 1 < batch.seq) {
                s.prefix_nll.push_back(lse - static_cast<double>(row[batch.ids[static_cast<std::size_t>(r + 1)]]));
            } else {
                s.next_log_prob.resize(static_cast<std::size_t>(vocab));
                for (std::int64_t j = 0; j < vocab; ++j)
                    s.next_log_prob[static_cast<std::size_t>(j)] = static_cast<double>(row[j]) - lse;
            }
        }
    }
    return out;
}

constexpr std::size_t kContextBatch = 16;

} // namespace

std::string to_string(ScoringScope s)
{
    return s == ScoringScope::full_sequence ? "full_sequence" : "appended_token_only";
}

std::string to_string(ContextAggregation a)
{
    return a == ContextAggregation::log_mean ? "log_mean" : "arithmetic_mean";
}

void NeighborhoodSpec::validate(const ModelConfig& config) const
{
    if (context_length < 1)
        throw ConfigError("context length must be >= 1");
    if (context_length + 1 > config.max_seq_len)
        throw ConfigError("context length " + std::to_string(context_length) + " plus one token exceeds max_seq_len "
                          + std::to_string(config.max_seq_len));
    if (k_max < 1 || k_max > config.vocab_size)
        throw ConfigError("k_max must lie in [1, vocab_size]");
}

double RpplCurve::normalized_slope() const
{
    if (rppl.empty())
        throw ContractError("empty rPPL curve");
    return (rppl.back() - rppl.front()) / rppl.front();
}

std::vector<std::vector<std::int64_t>> sample_contexts(std::span<const std::int64_t> corpus, int count,
                                                       std::int64_t length, std::uint64_t seed)
{
    if (static_cast<std::int64_t>(corpus.size()) < length)
        throw InputError("corpus shorter than the context length");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> start(0, static_cast<std::int64_t>(corpus.size()) - length);
    std::vector<std::vector<std::int64_t>> out;
    for (int i = 0; i < count; ++i) {
        const auto s = start(rng);
        out.emplace_back(corpus.begin() + s, corpus.begin() + s + length);
    }
    return out;
}

RpplCurve rppl_curve(const Model& model_q, const Model& model_ref,
                     std::span<const std::vector<std::int64_t>> contexts, const NeighborhoodSpec& spec)
{
    if (model_q.config().vocab_size != model_ref.config().vocab_size)
        throw ContractError("rPPL models disagree on vocabulary size");
    spec.validate(model_ref.config());
    spec.validate(model_q.config());
    if (contexts.empty())
        throw InputError("rPPL needs at least one context");
    for (const auto& c : contexts)
        if (static_cast<std::int64_t>(c.size()) != spec.context_length)
            throw InputError("context length differs from the configured length");

    RpplCurve curve;
    curve.n_contexts = static_cast<std::int64_t>(contexts.size());
    curve.context_length = spec.context_length;
    curve.scope = spec.scope;
    curve.aggregation = spec.aggregation;
    const bool same = &model_q == &model_ref;
    for (std::size_t start = 0; start < contexts.size(); start += kContextBatch) {
        const auto part = contexts.subspan(start, std::min(kContextBatch, contexts.size() - start));
        const auto ref = score_contexts(model_ref, part);
        const auto q = same ? ref : score_contexts(model_q, part);
        for (std::size_t c = 0; c < part.size(); ++c) {
            std::vector<std::int64_t> order(q[c].next_log_prob.size());
            std::iota(order.begin(), order.end(), 0);
            const auto& lp = q[c].next_log_prob;
            std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
                return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)];
            });
            const double prefix = std::accumulate(ref[c].prefix_nll.begin(), ref[c].prefix_nll.end(), 0.0);
            const auto n = static_cast<double>(spec.context_length);
            std::vector<double> nll;
            for (int k = 0; k < spec.k_max; ++k) {
                const double tail = -ref[c].next_log_prob[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
                nll.push_back(spec.scope == ScoringScope::full_sequence ? (prefix + tail) / n : tail);
            }
            curve.per_context_nll.push_back(std::move(nll));
        }
    }
    for (int k = 0; k < spec.k_max; ++k) {
        double acc = 0.0;
        for (const auto& c : curve.per_context_nll)
            acc += spec.aggregation == ContextAggregation::log_mean ? c[static_cast<std::size_t>(k)]
                                                                    : std::exp(c[static_cast<std::size_t>(k)]);
        acc /= static_cast<double>(curve.n_contexts);
        curve.k_values.push_back(k + 1);
        curve.rppl.push_back(spec.aggregation == ContextAggregation::log_mean ? std::exp(acc) : acc);
    }
    return curve;
}

double directional_derivative(const Model& model_ref, const std::vector<std::int64_t>& context, std::int64_t token,
                              ScoringScope scope)
{
    if (token < 0 || token >= model_ref.config().vocab_size)
        throw InputError("token id " + std::to_string(token) + " outside the vocabulary");
    TokenBatch b;
    b.batch = 1;
    b.seq = static_cast<std::int64_t>(context.size()) + 1;
    b.ids = context;
    b.ids.push_back(token);
    const auto nll = token_nll(model_ref, b).front();
    if (scope == ScoringScope::appended_token_only)
        return nll.back();
    return std::accumulate(nll.begin(), nll.end(), 0.0) / static_cast<double>(nll.size());
}

int effective_count(std::span<const double> rppl_by_k, double threshold_ratio)
{
    if (!(threshold_ratio > 1.0))
        throw InputError("effective-candidate threshold must exceed 1");
    if (rppl_by_k.empty())
        return 0;
    const double limit = threshold_ratio * rppl_by_k.front();
    int count = 0;
    for (double v : rppl_by_k) {
        if (v > limit)
            break;
        ++count;
    }
    return count;
}

EffectiveCandidates effective_candidates(const RpplCurve& curve, double threshold_ratio)
{
    EffectiveCandidates out;
    out.threshold_ratio = threshold_ratio;
    for (const auto& nll : curve.per_context_nll) {
        std::vector<double> r;
        for (double v : nll)
            r.push_back(std::exp(v));
        out.per_context.push_back(effective_count(r, threshold_ratio));
    }
    if (!out.per_context.empty())
        out.mean = std::accumulate(out.per_context.begin(), out.per_context.end(), 0.0)
                   / static_cast<double>(out.per_context.size());
    return out;
}

} // namespace quantlab
