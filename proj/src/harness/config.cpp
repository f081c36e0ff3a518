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

#include "quantlab/harness/config.hpp"

#include "quantlab/error.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace quantlab {

using nlohmann::json;

namespace {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<ScoringScope> {
    static constexpr std::array<std::pair<ScoringScope, const char*>, 2> values{
        {{ScoringScope::full_sequence, "full_sequence"}, {ScoringScope::appended_token_only, "appended_token_only"}}};
};

template <>
struct EnumNames<ContextAggregation> {
    static constexpr std::array<std::pair<ContextAggregation, const char*>, 2> values{
        {{ContextAggregation::log_mean, "log_mean"}, {ContextAggregation::arithmetic_mean, "arithmetic_mean"}}};
};

template <>
struct EnumNames<ClipGradient> {
    static constexpr std::array<std::pair<ClipGradient, const char*>, 2> values{
        {{ClipGradient::straight_through, "straight_through"}, {ClipGradient::frozen_codes, "frozen_codes"}}};
};

template <>
struct EnumNames<ClipOptimizer> {
    static constexpr std::array<std::pair<ClipOptimizer, const char*>, 2> values{
        {{ClipOptimizer::gradient_descent, "gradient_descent"}, {ClipOptimizer::adam, "adam"}}};
};

template <typename E>
std::string enum_name(E value)
{
    for (const auto& [v, name] : EnumNames<E>::values)
        if (v == value)
            return name;
    throw ContractError("enum value without a name");
}

/// Reads one JSON object, remembering which keys were consumed.
class Reader {
public:
    Reader(const json& object, std::string path) : object_(object), path_(std::move(path))
    {
        if (!object_.is_object())
            throw ConfigError(where("") + " must be an object");
    }

    template <typename T>
    void read(const std::string& key, T& out)
    {
        seen_.insert(key);
        const auto it = object_.find(key);
        if (it == object_.end())
            return;
        convert(*it, where(key), out);
    }

    Reader child(const std::string& key)
    {
        seen_.insert(key);
        const auto it = object_.find(key);
        static const json empty = json::object();
        return Reader(it == object_.end() ? empty : *it, where(key));
    }

    void finish() const
    {
        for (const auto& [key, value] : object_.items())
            if (!seen_.contains(key))
                throw ConfigError("unknown config key '" + where(key) + "'");
    }

private:
    std::string where(const std::string& key) const
    {
        if (key.empty())
            return path_.empty() ? "config" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    static void convert(const json& v, const std::string& at, bool& out)
    {
        if (!v.is_boolean())
            throw ConfigError(at + " must be a boolean");
        out = v.get<bool>();
    }

    static void convert(const json& v, const std::string& at, double& out)
    {
        if (!v.is_number())
            throw ConfigError(at + " must be a number");
        out = v.get<double>();
    }

    template <typename I>
        requires std::is_integral_v<I>
    static void convert(const json& v, const std::string& at, I& out)
    {
        if (!v.is_number_integer())
            throw ConfigError(at + " must be an integer");
        if constexpr (std::is_unsigned_v<I>) {
            if (v.is_number_unsigned())
                out = static_cast<I>(v.get<std::uint64_t>());
            else if (v.get<std::int64_t>() < 0)
                throw ConfigError(at + " must be non-negative");
            else
                out = static_cast<I>(v.get<std::int64_t>());
        } else {
            const auto wide = v.get<std::int64_t>();
            if (wide < std::numeric_limits<I>::min() || wide > std::numeric_limits<I>::max())
                throw ConfigError(at + " is out of range");
            out = static_cast<I>(wide);
        }
    }

    static void convert(const json& v, const std::string& at, std::string& out)
    {
        if (!v.is_string())
            throw ConfigError(at + " must be a string");
        out = v.get<std::string>();
    }

    template <typename E>
        requires std::is_enum_v<E>
    static void convert(const json& v, const std::string& at, E& out)
    {
        if (!v.is_string())
            throw ConfigError(at + " must be a string");
        const auto name = v.get<std::string>();
        for (const auto& [value, candidate] : EnumNames<E>::values)
            if (name == candidate) {
                out = value;
                return;
            }
        throw ConfigError(at + " has unknown value '" + name + "'");
    }

    template <typename T>
    static void convert(const json& v, const std::string& at, std::vector<T>& out)
    {
        if (!v.is_array())
            throw ConfigError(at + " must be an array");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            T item{};
            convert(v[i], at + "[" + std::to_string(i) + "]", item);
            out.push_back(item);
        }
    }

    const json& object_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_schedule(Reader r, TrainSchedule& s)
{
    r.read("steps", s.steps);
    r.read("batch", s.batch);
    r.read("seq_len", s.seq_len);
    r.read("learning_rate", s.learning_rate);
    r.read("warmup", s.warmup);
    r.read("min_lr_ratio", s.min_lr_ratio);
    r.read("weight_decay", s.weight_decay);
    r.read("beta1", s.beta1);
    r.read("beta2", s.beta2);
    r.read("epsilon", s.epsilon);
    r.read("grad_clip", s.grad_clip);
    r.read("seed", s.seed);
    r.finish();
}

void read_quant(Reader r, QuantSpec& q)
{
    r.read("bits", q.bits);
    r.read("group_size", q.group_size);
    r.read("symmetric", q.symmetric);
    r.read("enabled", q.enabled);
    r.finish();
}

json schedule_json(const TrainSchedule& s)
{
    return {{"steps", s.steps},
            {"batch", s.batch},
            {"seq_len", s.seq_len},
            {"learning_rate", s.learning_rate},
            {"warmup", s.warmup},
            {"min_lr_ratio", s.min_lr_ratio},
            {"weight_decay", s.weight_decay},
            {"beta1", s.beta1},
            {"beta2", s.beta2},
            {"epsilon", s.epsilon},
            {"grad_clip", s.grad_clip},
            {"seed", s.seed}};
}

json quant_json(const QuantSpec& q)
{
    return {{"bits", q.bits}, {"group_size", q.group_size}, {"symmetric", q.symmetric}, {"enabled", q.enabled}};
}

json to_json(const ExperimentConfig& c)
{
    json j;
    j["model"] = {{"n_layer", c.model.n_layer},
                  {"n_head", c.model.n_head},
                  {"d_hidden", c.model.d_hidden},
                  {"d_inter", c.model.d_inter},
                  {"vocab_size", c.model.vocab_size},
                  {"max_seq_len", c.model.max_seq_len},
                  {"use_rms_norm_before_linear", c.model.use_rms_norm_before_linear}};
    j["quant"] = quant_json(c.quant);
    j["lgp"] = {{"grad_weight", c.lgp.grad_weight},
                {"epochs", c.lgp.epochs},
                {"learning_rate", c.lgp.learning_rate},
                {"spec", quant_json(c.lgp.spec)},
                {"gradient", enum_name(c.lgp.gradient)},
                {"optimizer", enum_name(c.lgp.optimizer)}};
    j["lgr"] = {{"smooth_weight", c.lgr.smooth_weight},
                {"reg_layer", c.lgr.reg_layer},
                {"activation_fraction", c.lgr.activation_fraction},
                {"schedule", schedule_json(c.lgr.schedule)},
                {"ternary", c.lgr.ternary},
                {"freeze_embeddings", c.lgr.freeze_embeddings},
                {"probe_every", c.lgr.probe_every},
                {"probe_sequences", c.lgr.probe_sequences},
                {"probe_layer", c.lgr.probe_layer}};
    j["neighborhood"] = {{"context_length", c.neighborhood.context_length},
                         {"k_max", c.neighborhood.k_max},
                         {"scope", enum_name(c.neighborhood.scope)},
                         {"aggregation", enum_name(c.neighborhood.aggregation)}};
    j["smoothness"] = {{"sequences", c.smoothness.sequences},
                       {"seq_len", c.smoothness.seq_len},
                       {"layer", c.smoothness.layer},
                       {"bins", c.smoothness.bins}};
    j["calibration"] = {{"sequences", c.calibration.sequences}, {"seq_len", c.calibration.seq_len}};
    j["seeds"] = c.seeds;
    j["corpus_path"] = c.corpus_path;
    j["output_dir"] = c.output_dir;
    return j;
}

} // namespace

void ExperimentConfig::validate() const
{
    model.validate();
    quant.validate();
    lgp.validate();
    lgr.validate(model);
    neighborhood.validate(model);
    if (seeds.empty())
        throw ConfigError("seeds must list at least one seed");
    if (smoothness.sequences < 1 || smoothness.bins < 1)
        throw ConfigError("smoothness.sequences and smoothness.bins must be >= 1");
    if (smoothness.seq_len < 2 || smoothness.seq_len > model.max_seq_len)
        throw ConfigError("smoothness.seq_len must lie in [2, model.max_seq_len]");
    if (smoothness.layer < 0 || smoothness.layer > model.n_layer)
        throw ConfigError("smoothness.layer must lie in [0, model.n_layer]");
    if (calibration.sequences < 1)
        throw ConfigError("calibration.sequences must be >= 1");
    if (calibration.seq_len < 2 || calibration.seq_len > model.max_seq_len)
        throw ConfigError("calibration.seq_len must lie in [2, model.max_seq_len]");
    if (lgr.schedule.seq_len > model.max_seq_len)
        throw ConfigError("lgr.schedule.seq_len exceeds model.max_seq_len");
}

ExperimentConfig parse_config(const std::string& json_text)
{
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig c;
    Reader r(root, "");
    {
        Reader m = r.child("model");
        m.read("n_layer", c.model.n_layer);
        m.read("n_head", c.model.n_head);
        m.read("d_hidden", c.model.d_hidden);
        m.read("d_inter", c.model.d_inter);
        m.read("vocab_size", c.model.vocab_size);
        m.read("max_seq_len", c.model.max_seq_len);
        m.read("use_rms_norm_before_linear", c.model.use_rms_norm_before_linear);
        m.finish();
    }
    read_quant(r.child("quant"), c.quant);
    {
        Reader l = r.child("lgp");
        l.read("grad_weight", c.lgp.grad_weight);
        l.read("epochs", c.lgp.epochs);
        l.read("learning_rate", c.lgp.learning_rate);
        read_quant(l.child("spec"), c.lgp.spec);
        l.read("gradient", c.lgp.gradient);
        l.read("optimizer", c.lgp.optimizer);
        l.finish();
    }
    {
        Reader l = r.child("lgr");
        l.read("smooth_weight", c.lgr.smooth_weight);
        l.read("reg_layer", c.lgr.reg_layer);
        l.read("activation_fraction", c.lgr.activation_fraction);
        read_schedule(l.child("schedule"), c.lgr.schedule);
        l.read("ternary", c.lgr.ternary);
        l.read("freeze_embeddings", c.lgr.freeze_embeddings);
        l.read("probe_every", c.lgr.probe_every);
        l.read("probe_sequences", c.lgr.probe_sequences);
        l.read("probe_layer", c.lgr.probe_layer);
        l.finish();
    }
    {
        Reader n = r.child("neighborhood");
        n.read("context_length", c.neighborhood.context_length);
        n.read("k_max", c.neighborhood.k_max);
        n.read("scope", c.neighborhood.scope);
        n.read("aggregation", c.neighborhood.aggregation);
        n.finish();
    }
    {
        Reader s = r.child("smoothness");
        s.read("sequences", c.smoothness.sequences);
        s.read("seq_len", c.smoothness.seq_len);
        s.read("layer", c.smoothness.layer);
        s.read("bins", c.smoothness.bins);
        s.finish();
    }
    {
        Reader s = r.child("calibration");
        s.read("sequences", c.calibration.sequences);
        s.read("seq_len", c.calibration.seq_len);
        s.finish();
    }
    r.read("seeds", c.seeds);
    r.read("corpus_path", c.corpus_path);
    r.read("output_dir", c.output_dir);
    r.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str());
}

std::string canonical_json(const ExperimentConfig& config)
{
    return to_json(config).dump();
}

std::string fnv1a_hex(const std::string& bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const ExperimentConfig& config)
{
    return fnv1a_hex(canonical_json(config));
}

} // namespace quantlab
