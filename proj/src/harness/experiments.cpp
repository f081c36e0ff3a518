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

#include "quantlab/harness/experiments.hpp"

#include "quantlab/error.hpp"
#include "quantlab/gptq/gptq.hpp"
#include "quantlab/harness/checkpoint.hpp"
#include "quantlab/lgp/lgp.hpp"
#include "quantlab/lgr/lgr.hpp"
#include "quantlab/model/train.hpp"
#include "quantlab/neighborhood/neighborhood.hpp"
#include "quantlab/quant/quant.hpp"
#include "quantlab/smooth/smoothness.hpp"
#include "quantlab/weightspace/weightspace.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <functional>
#include <map>

namespace quantlab {

namespace {

constexpr std::uint64_t kHeldoutStream = 0x4e1d;
constexpr std::uint64_t kCalibrationStream = 0xca1b;
constexpr int kHeldoutBatches = 4;
constexpr int kDefaultContexts = 128;

std::string join(const std::vector<std::string>& parts, const char* sep = ";")
{
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i)
        out += (i ? sep : "") + parts[i];
    return out;
}

template <typename T>
std::string join_numbers(const std::vector<T>& values)
{
    std::vector<std::string> parts;
    for (const auto& v : values)
        parts.push_back(std::to_string(v));
    return join(parts, ",");
}

std::string stem(const std::filesystem::path& p)
{
    return p.stem().string();
}

struct Options {
    bool seeds = false;
    bool bits = false;
    bool checkpoints = false;
    bool models = false;
    bool variant = false;
    bool layer = false;
    bool reg_layers = false;
    bool contexts = false;
};

void require_only(const RunRequest& r, const Options& allowed)
{
    auto reject = [&](bool used, bool ok, const char* option) {
        if (used && !ok)
            throw ConfigError("option --" + std::string(option) + " does not apply to '" + r.subcommand + "'");
    };
    reject(!r.seeds.empty(), allowed.seeds, "seed");
    reject(!r.bits.empty(), allowed.bits, "bits");
    reject(!r.checkpoints.empty(), allowed.checkpoints, "checkpoint");
    reject(!r.model_q.empty() || !r.model_ref.empty(), allowed.models, "model-q/--model-ref");
    reject(!r.variant.empty(), allowed.variant, "variant");
    reject(!r.layer.empty(), allowed.layer, "layer");
    reject(!r.reg_layers.empty(), allowed.reg_layers, "reg-layers");
    reject(r.contexts != 0, allowed.contexts, "contexts");
}

void require_checkpoints(const RunRequest& r, std::size_t min, std::size_t max)
{
    if (r.checkpoints.size() < min || r.checkpoints.size() > max)
        throw ConfigError("'" + r.subcommand + "' expects " + std::to_string(min)
                          + (max == min ? "" : (max > 64 ? " or more" : " to " + std::to_string(max)))
                          + " --checkpoint file(s), got " + std::to_string(r.checkpoints.size()));
}

Model load_matching(const std::filesystem::path& path, const ExperimentConfig& config)
{
    Model m = load_checkpoint(path);
    if (!(m.config() == config.model))
        throw ConfigError("checkpoint " + path.string() + " does not match the configured model shape");
    return m;
}

std::vector<TokenBatch> calibration_batches(const ExperimentConfig& c, const CorpusSplit& split, std::uint64_t seed)
{
    BatchSampler sampler(split.train, c.calibration.sequences, static_cast<int>(c.calibration.seq_len),
                         seed ^ kCalibrationStream);
    return {sampler.next()};
}

double heldout_loss(const Model& model, const ExperimentConfig& c, const CorpusSplit& split, std::uint64_t seed)
{
    BatchSampler sampler(split.heldout, c.calibration.sequences, static_cast<int>(c.calibration.seq_len),
                         seed ^ kHeldoutStream);
    double total = 0.0;
    for (int i = 0; i < kHeldoutBatches; ++i)
        total += lm_loss(model, sampler.next(), model.precision() == Precision::ternary);
    return total / kHeldoutBatches;
}

std::vector<std::vector<std::int64_t>> probe_sequences(const ExperimentConfig& c, const CorpusSplit& split,
                                                       std::uint64_t seed)
{
    return sample_contexts(split.heldout, c.smoothness.sequences, c.smoothness.seq_len, seed);
}

RunOutput run_train(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .variant = true});
    const std::string variant = r.variant.empty() ? "fp" : r.variant;
    if (variant != "fp" && variant != "ternary" && variant != "lgr")
        throw ConfigError("train --variant must be fp, ternary or lgr, got '" + variant + "'");
    const auto& c = r.config;
    RunOutput out;
    CsvTable summary("train_summary", {"variant", "seed", "final_l_lm", "heldout_loss", "c_avg"});
    for (std::uint64_t seed : r.effective_seeds()) {
        const std::string tag = variant + "_seed" + std::to_string(seed);
        Model init(c.model, seed);
        CsvTable trace("train_" + tag, {"step", "l_lm", "l_smooth", "total", "learning_rate"});
        Model trained;
        if (variant == "fp") {
            TrainSchedule s = c.lgr.schedule;
            s.seed = seed;
            trained = init;
            const TrainResult res = train_baseline(trained, split.train, s);
            for (std::size_t i = 0; i < res.loss.size(); ++i)
                trace.add_row({cell(static_cast<int>(i)), cell(res.loss[i]), cell(0.0), cell(res.loss[i]),
                               cell(learning_rate_at(s, static_cast<int>(i)))});
        } else {
            LgrConfig cfg = c.lgr;
            cfg.schedule.seed = seed;
            cfg.ternary = true;
            if (variant == "ternary")
                cfg.smooth_weight = 0.0;
            QatResult res = qat_train(init, split.train, cfg);
            for (const auto& b : res.trace)
                trace.add_row({cell(b.step), cell(b.l_lm), cell(b.l_smooth), cell(b.total), cell(b.learning_rate)});
            CsvTable cavg("cavg_" + tag, {"step", "c_avg"});
            for (const auto& s : res.c_avg_trace)
                cavg.add_row({cell(s.step), cell(s.c_avg)});
            out.tables.push_back(std::move(cavg));
            trained = std::move(res.model);
        }
        const auto seqs = probe_sequences(c, split, seed);
        const auto report = smoothness_report(trained, seqs, c.smoothness.layer);
        const double final_lm = trace.rows().empty() ? 0.0 : std::stod(trace.rows().back()[1]);
        summary.add_row({variant, cell(static_cast<std::int64_t>(seed)), cell(final_lm),
                         cell(heldout_loss(trained, c, split, seed)), cell(report.c_avg)});
        out.tables.push_back(std::move(trace));
        out.models.push_back({"model_" + tag + ".qlab", std::move(trained)});
    }
    out.tables.push_back(std::move(summary));
    return out;
}

RunOutput run_quantize(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .bits = true, .checkpoints = true, .variant = true});
    require_checkpoints(r, 1, 1);
    const std::string method = r.variant.empty() ? "rtn" : r.variant;
    if (method != "rtn" && method != "gptq" && method != "lgp")
        throw ConfigError("quantize --variant must be rtn, gptq or lgp, got '" + method + "'");
    const auto& c = r.config;
    const std::uint64_t seed = r.effective_seeds().front();
    const Model fp = load_matching(r.checkpoints.front(), c);
    const auto calib = calibration_batches(c, split, seed);
    const auto seqs = probe_sequences(c, split, seed);
    const std::string base = stem(r.checkpoints.front());

    RunOutput out;
    CsvTable summary("quantize_summary",
                     {"method", "bits", "group_size", "heldout_loss", "fp_heldout_loss", "c_avg", "c_lower"});
    const double fp_loss = heldout_loss(fp, c, split, seed);
    std::map<std::string, CalibrationRecord> records;
    if (method == "gptq")
        records = capture_calibration(fp, calib);
    for (int bits : r.effective_bits()) {
        QuantSpec spec = c.quant;
        spec.bits = bits;
        spec.validate();
        Model q;
        if (method == "rtn") {
            q = quantize_model_rtn(fp, spec);
        } else if (method == "gptq") {
            q = quantize_model_gptq(fp, records, spec);
        } else {
            LgpConfig cfg = c.lgp;
            cfg.spec = spec;
            q = lgp_quantize_model(fp, calib, cfg).model;
        }
        const auto report = smoothness_report(q, seqs, c.smoothness.layer);
        summary.add_row({method, cell(bits), cell(spec.group_size), cell(heldout_loss(q, c, split, seed)),
                         cell(fp_loss), cell(report.c_avg), cell(report.c_lower)});
        out.models.push_back({base + "_" + method + "_" + std::to_string(bits) + "bit.qlab", std::move(q)});
    }
    out.tables.push_back(std::move(summary));
    return out;
}

RunOutput run_smoothness(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .checkpoints = true});
    require_checkpoints(r, 1, SIZE_MAX);
    const auto& c = r.config;
    const std::uint64_t seed = r.effective_seeds().front();
    std::vector<Model> models;
    std::vector<const Model*> ptrs;
    for (const auto& p : r.checkpoints)
        models.push_back(load_matching(p, c));
    for (const auto& m : models)
        ptrs.push_back(&m);
    const auto seqs = probe_sequences(c, split, seed);

    CsvTable summary("smoothness_summary", {"model", "c_avg", "c_lower", "median_score", "sequences", "layer"});
    CsvTable scores("smoothness_scores", {"model", "sequence", "score"});
    CsvTable hist("smoothness_histogram", {"model", "bin", "bin_lo", "bin_hi", "count"});
    const auto dists = smoothness_score_distribution(ptrs, seqs, c.smoothness.bins);
    for (std::size_t m = 0; m < models.size(); ++m) {
        const std::string tag = stem(r.checkpoints[m]);
        const auto report = smoothness_report(models[m], seqs, c.smoothness.layer);
        summary.add_row({tag, cell(report.c_avg), cell(report.c_lower), cell(median(report.per_sequence_scores)),
                         cell(report.sample_count), cell(c.smoothness.layer)});
        for (std::size_t i = 0; i < report.per_sequence_scores.size(); ++i)
            scores.add_row({tag, cell(static_cast<std::int64_t>(i)), cell(report.per_sequence_scores[i])});
        const Histogram& h = dists[m].histogram;
        const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
        for (std::size_t b = 0; b < h.counts.size(); ++b)
            hist.add_row({tag, cell(static_cast<std::int64_t>(b)), cell(h.lo + width * static_cast<double>(b)),
                          cell(h.lo + width * static_cast<double>(b + 1)), cell(h.counts[b])});
    }
    RunOutput out;
    out.tables.push_back(std::move(summary));
    out.tables.push_back(std::move(scores));
    out.tables.push_back(std::move(hist));
    return out;
}

RunOutput run_rppl(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .models = true, .contexts = true});
    if (r.model_q.empty() || r.model_ref.empty())
        throw ConfigError("'rppl' needs both --model-q and --model-ref");
    const auto& c = r.config;
    const std::uint64_t seed = r.effective_seeds().front();
    const Model q = load_matching(r.model_q, c);
    const Model ref = load_matching(r.model_ref, c);
    const int count = r.contexts > 0 ? r.contexts : kDefaultContexts;
    const auto contexts = sample_contexts(split.heldout, count, c.neighborhood.context_length, seed);
    const RpplCurve curve = rppl_curve(q, ref, contexts, c.neighborhood);
    const auto effective = effective_candidates(curve);

    CsvTable table("rppl", {"k", "rppl"});
    for (std::size_t i = 0; i < curve.k_values.size(); ++i)
        table.add_row({cell(curve.k_values[i]), cell(curve.rppl[i])});
    CsvTable summary("rppl_summary", {"model_q", "model_ref", "contexts", "context_length", "scope", "aggregation",
                                      "normalized_slope", "effective_candidates"});
    summary.add_row({stem(r.model_q), stem(r.model_ref), cell(curve.n_contexts), cell(curve.context_length),
                     to_string(curve.scope), to_string(curve.aggregation), cell(curve.normalized_slope()),
                     cell(effective.mean)});
    RunOutput out;
    out.tables.push_back(std::move(table));
    out.tables.push_back(std::move(summary));
    return out;
}

RunOutput run_gradient_profile(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .checkpoints = true});
    require_checkpoints(r, 1, SIZE_MAX);
    const auto& c = r.config;
    const std::uint64_t seed = r.effective_seeds().front();
    BatchSampler sampler(split.heldout, c.smoothness.sequences, static_cast<int>(c.smoothness.seq_len), seed);
    const TokenBatch batch = sampler.next();
    CsvTable table("gradient_profile", {"model", "layer", "site", "mean_norm"});
    for (const auto& path : r.checkpoints) {
        const Model m = load_matching(path, c);
        const auto profile = layer_gradient_profile(m, batch, stem(path));
        for (const auto& e : profile.entries)
            table.add_row({profile.model_tag, cell(e.layer), to_string(e.site), cell(e.mean_norm)});
    }
    RunOutput out;
    out.tables.push_back(std::move(table));
    return out;
}

RunOutput run_anisotropy(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .bits = true, .checkpoints = true, .layer = true});
    require_checkpoints(r, 1, 1);
    const auto& c = r.config;
    const Model m = load_matching(r.checkpoints.front(), c);
    const std::string layer = r.layer.empty() ? layer_param(0, "q_proj") : r.layer;
    const auto records = capture_calibration(m, calibration_batches(c, split, r.effective_seeds().front()));
    const auto it = records.find(layer);
    if (it == records.end())
        throw ConfigError("unknown projection '" + layer + "'");
    const Eigen::MatrixXd weight = to_matrix(m.param(layer));
    CsvTable table("anisotropy", {"layer", "bits", "blend", "cos_fwd", "cos_bwd"});
    for (int bits : r.effective_bits()) {
        QuantSpec spec = c.quant;
        spec.bits = bits;
        spec.validate();
        const auto grid = default_blend_grid();
        for (const auto& p : anisotropy_sweep(weight, it->second.inputs, it->second.grads, spec, grid))
            table.add_row({layer, cell(bits), cell(p.blend), cell(p.cos_fwd), cell(p.cos_bwd)});
    }
    RunOutput out;
    out.tables.push_back(std::move(table));
    return out;
}

RunOutput run_feasibility(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .checkpoints = true});
    require_checkpoints(r, 1, 1);
    const auto& c = r.config;
    const Model m = load_matching(r.checkpoints.front(), c);
    const auto records = capture_calibration(m, calibration_batches(c, split, r.effective_seeds().front()));
    CsvTable table("feasibility", {"layer", "d_in", "d_out", "rank_x", "rank_g", "condition_holds", "borderline",
                                   "witness", "residual_fwd", "residual_bwd"});
    for (const auto& e : rank_profile(records)) {
        const auto& f = e.report;
        table.add_row({e.layer_name, cell(f.d_in), cell(f.d_out), cell(f.rank_x), cell(f.rank_g),
                       cell(f.condition_holds), cell(f.borderline), cell(f.witness.has_value()),
                       cell(f.residual_fwd), cell(f.residual_bwd)});
    }
    RunOutput out;
    out.tables.push_back(std::move(table));
    return out;
}

RunOutput run_ablate_grad_weight(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .bits = true, .checkpoints = true});
    require_checkpoints(r, 1, 1);
    const auto& c = r.config;
    const std::uint64_t seed = r.effective_seeds().front();
    const Model fp = load_matching(r.checkpoints.front(), c);
    const auto calib = calibration_batches(c, split, seed);
    const auto magnitudes = default_grad_weight_magnitudes();

    CsvTable table("ablate_grad_weight", {"bits", "grad_weight", "fit_residual", "grad_residual", "heldout_loss"});
    CsvTable choice("grad_weight_choice", {"bits", "chosen_grad_weight", "qualifying", "degenerate"});
    for (int bits : r.effective_bits()) {
        LgpConfig cfg = c.lgp;
        cfg.spec = c.quant;
        cfg.spec.bits = bits;
        std::map<double, double> downstream;
        std::vector<double> sweep{0.0};
        sweep.insert(sweep.end(), magnitudes.begin(), magnitudes.end());
        LossTerms start;
        for (double grad_weight : sweep) {
            cfg.grad_weight = grad_weight;
            const LgpResult res = lgp_quantize_model(fp, calib, cfg);
            if (grad_weight == 0.0 && !res.blocks.empty())
                start = res.blocks.front().initial;
            const double loss = heldout_loss(res.model, c, split, seed);
            downstream[grad_weight] = loss;
            table.add_row({cell(bits), cell(grad_weight), cell(res.fit_residual()), cell(res.grad_residual()), cell(loss)});
        }
        const GradWeightChoice pick =
            choose_grad_weight(start.fit, start.grad, magnitudes, [&](double a) { return downstream.at(a); });
        std::vector<std::string> qualifying;
        for (double q : pick.qualifying)
            qualifying.push_back(format_double(q));
        choice.add_row({cell(bits), cell(pick.grad_weight), join(qualifying), cell(pick.degenerate)});
    }
    RunOutput out;
    out.tables.push_back(std::move(table));
    out.tables.push_back(std::move(choice));
    return out;
}

RunOutput run_ablate_reg_layer(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {.seeds = true, .reg_layers = true});
    const auto& c = r.config;
    std::vector<int> layers = r.reg_layers;
    if (layers.empty())
        for (int l = 0; l < c.model.n_layer; ++l)
            layers.push_back(l);
    CsvTable table("ablate_reg_layer", {"seed", "reg_layer", "final_l_lm", "final_l_smooth", "heldout_loss", "c_avg"});
    for (std::uint64_t seed : r.effective_seeds()) {
        const auto seqs = probe_sequences(c, split, seed);
        for (int layer : layers) {
            LgrConfig cfg = c.lgr;
            cfg.reg_layer = layer;
            cfg.schedule.seed = seed;
            cfg.validate(c.model);
            const QatResult res = qat_train(Model(c.model, seed), split.train, cfg);
            const auto report = smoothness_report(res.model, seqs, c.smoothness.layer);
            const LossBreakdown& last = res.trace.back();
            table.add_row({cell(static_cast<std::int64_t>(seed)), cell(layer), cell(last.l_lm), cell(last.l_smooth),
                           cell(heldout_loss(res.model, c, split, seed)), cell(report.c_avg)});
        }
    }
    RunOutput out;
    out.tables.push_back(std::move(table));
    return out;
}

RunOutput run_corpus(const RunRequest& r, const CorpusSplit& split)
{
    require_only(r, {});
    CsvTable table("corpus", {"source", "train_tokens", "heldout_tokens"});
    const std::string source = r.config.corpus_path.empty() ? "synthetic" : r.config.corpus_path;
    table.add_row({cell(source), cell(static_cast<std::int64_t>(split.train.size())),
                   cell(static_cast<std::int64_t>(split.heldout.size()))});
    CsvTable freq("byte_frequency", {"byte", "train_count", "heldout_count"});
    std::array<std::int64_t, 256> tr{}, ho{};
    for (auto t : split.train)
        ++tr[static_cast<std::size_t>(t)];
    for (auto t : split.heldout)
        ++ho[static_cast<std::size_t>(t)];
    for (int b = 0; b < 256; ++b)
        if (tr[static_cast<std::size_t>(b)] || ho[static_cast<std::size_t>(b)])
            freq.add_row({cell(b), cell(tr[static_cast<std::size_t>(b)]), cell(ho[static_cast<std::size_t>(b)])});
    RunOutput out;
    out.tables.push_back(std::move(table));
    out.tables.push_back(std::move(freq));
    return out;
}

using Runner = std::function<RunOutput(const RunRequest&, const CorpusSplit&)>;

const std::map<std::string, Runner>& runners()
{
    static const std::map<std::string, Runner> table{
        {"train", run_train},
        {"quantize", run_quantize},
        {"smoothness", run_smoothness},
        {"rppl", run_rppl},
        {"gradient-profile", run_gradient_profile},
        {"anisotropy", run_anisotropy},
        {"feasibility", run_feasibility},
        {"ablate-grad-weight", run_ablate_grad_weight},
        {"ablate-reg-layer", run_ablate_reg_layer},
        {"corpus", run_corpus},
    };
    return table;
}

} // namespace

std::vector<std::uint64_t> RunRequest::effective_seeds() const
{
    return seeds.empty() ? config.seeds : seeds;
}

std::vector<int> RunRequest::effective_bits() const
{
    return bits.empty() ? std::vector<int>{config.quant.bits} : bits;
}

std::vector<std::string> subcommand_names()
{
    std::vector<std::string> names;
    for (const auto& [name, runner] : runners())
        names.push_back(name);
    return names;
}

CorpusSplit load_corpus(const ExperimentConfig& config)
{
    const auto seed = config.seeds.empty() ? std::uint64_t{0} : config.seeds.front();
    std::vector<std::int64_t> tokens = config.corpus_path.empty()
                                           ? tokenize_bytes(synthetic_corpus(kSyntheticCorpusBytes, 0))
                                           : ingest_corpus(config.corpus_path);
    return split_corpus(tokens, seed);
}

RunOutput run_experiment(const RunRequest& request)
{
    const auto it = runners().find(request.subcommand);
    if (it == runners().end())
        throw ConfigError("unknown subcommand '" + request.subcommand + "'");
    request.config.validate();
    const CorpusSplit split = load_corpus(request.config);
    spdlog::info("running '{}' (config {})", request.subcommand, config_hash(request.config));
    return it->second(request, split);
}

RunManifest make_manifest(const RunRequest& r)
{
    RunManifest m;
    m.subcommand = r.subcommand;
    m.config_hash = config_hash(r.config);
    m.config_json = canonical_json(r.config);
    m.seeds = r.effective_seeds();
    if (!r.bits.empty())
        m.arguments["bits"] = join_numbers(r.bits);
    if (!r.variant.empty())
        m.arguments["variant"] = r.variant;
    if (!r.layer.empty())
        m.arguments["layer"] = r.layer;
    if (!r.reg_layers.empty())
        m.arguments["reg_layers"] = join_numbers(r.reg_layers);
    if (r.contexts != 0)
        m.arguments["contexts"] = std::to_string(r.contexts);
    std::vector<std::string> ckpts;
    for (const auto& p : r.checkpoints) {
        ckpts.push_back(p.string());
        m.inputs[p.string()] = file_digest(p);
    }
    if (!ckpts.empty())
        m.arguments["checkpoints"] = join(ckpts);
    for (const auto* p : {&r.model_q, &r.model_ref})
        if (!p->empty())
            m.inputs[p->string()] = file_digest(*p);
    if (!r.model_q.empty())
        m.arguments["model_q"] = r.model_q.string();
    if (!r.model_ref.empty())
        m.arguments["model_ref"] = r.model_ref.string();
    if (!r.config.corpus_path.empty())
        m.inputs[r.config.corpus_path] = file_digest(r.config.corpus_path);
    return m;
}

std::string execute(const RunRequest& request, const std::filesystem::path& out)
{
    request.config.validate();
    const RunManifest manifest = make_manifest(request);
    const std::string hash = manifest.hash();
    RunDirectory dir(out);
    const RunOutput result = run_experiment(request);
    dir.write_text("manifest.json", manifest.render());
    for (const auto& table : result.tables)
        dir.write_text(table.name() + ".csv", table.render(hash));
    for (const auto& m : result.models)
        save_checkpoint(m.model, dir.staged(m.file));
    dir.commit();
    return hash;
}

} // namespace quantlab
