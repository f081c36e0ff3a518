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

#include "model_fixture.hpp"

#include "quantlab/error.hpp"
#include "quantlab/harness/checkpoint.hpp"
#include "quantlab/harness/config.hpp"
#include "quantlab/harness/experiments.hpp"
#include "quantlab/harness/run.hpp"
#include "quantlab/model/train.hpp"
#include "quantlab/quant/quant.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace quantlab;

namespace {

std::filesystem::path scratch_dir(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / ("quantlab_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    return dir;
}

std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

const char* kTinyConfig = R"({
  "model": {"n_layer": 2, "n_head": 2, "d_hidden": 32, "d_inter": 64, "max_seq_len": 32},
  "lgr": {"schedule": {"steps": 12, "batch": 4, "seq_len": 32, "warmup": 2}, "probe_every": 6, "probe_sequences": 4},
  "smoothness": {"sequences": 6, "seq_len": 24},
  "calibration": {"sequences": 4, "seq_len": 32},
  "neighborhood": {"context_length": 12, "k_max": 6},
  "quant": {"group_size": 32},
  "lgp": {"epochs": 2},
  "seeds": [3]
})";

Tensor forward_logits(const Model& m, const TokenBatch& batch)
{
    Graph g(DType::f32);
    ForwardOptions opt;
    opt.with_loss = false;
    return forward(g, m, batch, opt).logits.value();
}

} // namespace

TEST(HarnessConfig, DefaultsRoundTripThroughCanonicalJson)
{
    ExperimentConfig c;
    const ExperimentConfig back = parse_config(canonical_json(c));
    EXPECT_EQ(canonical_json(back), canonical_json(c));
    EXPECT_EQ(c.model.n_layer, 4);
    EXPECT_EQ(c.model.d_hidden, 128);
    EXPECT_EQ(c.model.n_head, 4);
    EXPECT_EQ(c.model.vocab_size, 256);
    EXPECT_EQ(c.model.max_seq_len, 256);
}

TEST(HarnessConfig, UnknownKeysAreRejected)
{
    EXPECT_THROW(parse_config(R"({"modle": {}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"lgp": {"grad_wieght": 1.0}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"lgr": {"schedule": {"stpes": 3}}})"), ConfigError);
    try {
        parse_config(R"({"lgp": {"spec": {"bitz": 2}}})");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("lgp.spec.bitz"), std::string::npos);
    }
}

TEST(HarnessConfig, TypesAndRangesAreChecked)
{
    EXPECT_THROW(parse_config(R"({"model": {"n_layer": "4"}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"model": {"n_layer": 2.5}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"seeds": [-1]})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"seeds": []})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"neighborhood": {"scope": "everything"}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"quant": {"bits": 9}})"), ConfigError);
    EXPECT_THROW(parse_config("{not json"), ConfigError);
    const auto c = parse_config(R"({"neighborhood": {"scope": "appended_token_only"}, "lgp": {"optimizer": "adam"}})");
    EXPECT_EQ(c.neighborhood.scope, ScoringScope::appended_token_only);
    EXPECT_EQ(c.lgp.optimizer, ClipOptimizer::adam);
}

TEST(HarnessConfig, HashDependsOnContentOnly)
{
    const auto a = parse_config(R"({"seeds": [1, 2], "quant": {"bits": 3}})");
    const auto b = parse_config("{ \"quant\" : { \"bits\" : 3 },\n  \"seeds\" : [1,2] }");
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    const auto c = parse_config(R"({"seeds": [1, 2], "quant": {"bits": 2}})");
    EXPECT_NE(config_hash(a), config_hash(c));
    // FNV-1a reference values
    EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(HarnessCheckpoint, RoundTripPreservesForwardBitForBit)
{
    const Model& fp = quantlab::testing::small_trained_model();
    const TokenBatch batch = BatchSampler(quantlab::testing::small_corpus(), 4, 32, 11).next();
    const Model q = quantize_model_rtn(fp, QuantSpec{3, 16});
    for (const Model* m : {&fp, &q}) {
        const Model back = deserialize_checkpoint(serialize_checkpoint(*m));
        EXPECT_EQ(back.config(), m->config());
        EXPECT_EQ(back.precision(), m->precision());
        for (const auto& [name, t] : m->params())
            EXPECT_TRUE(back.param(name).identical(t)) << name;
        EXPECT_EQ(back.quantized().size(), m->quantized().size());
        EXPECT_TRUE(forward_logits(back, batch).identical(forward_logits(*m, batch)));
    }
    EXPECT_LT(serialize_checkpoint(q).size(), serialize_checkpoint(fp).size());
}

TEST(HarnessCheckpoint, OffGridWeightsAreStoredFullPrecision)
{
    Model m = quantize_model_rtn(quantlab::testing::small_trained_model(), QuantSpec{2, 16});
    const std::string name = m.linear_names().front();
    Tensor w = m.param(name);
    w.set(0, w.at(0) + 0.125);
    m.set_param(name, w);
    const Model back = deserialize_checkpoint(serialize_checkpoint(m));
    EXPECT_TRUE(back.param(name).identical(m.param(name)));
    EXPECT_FALSE(back.quantized().contains(name));
    EXPECT_EQ(back.quantized().size(), m.quantized().size() - 1);
}

TEST(HarnessCheckpoint, CorruptionIsDetected)
{
    const Model m(quantlab::testing::small_config(), 1);
    auto bytes = serialize_checkpoint(m);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "QLAB");
    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x10;
    EXPECT_THROW(deserialize_checkpoint(flipped), FormatError);
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(magic), FormatError);
    auto truncated = bytes;
    truncated.resize(truncated.size() - 9);
    EXPECT_THROW(deserialize_checkpoint(truncated), FormatError);
}

TEST(HarnessCheckpoint, FileRoundTrip)
{
    const auto dir = scratch_dir("ckpt");
    std::filesystem::create_directories(dir);
    const Model m(quantlab::testing::small_config(), 2);
    save_checkpoint(m, dir / "m.qlab");
    const Model back = load_checkpoint(dir / "m.qlab");
    for (const auto& [name, t] : m.params())
        EXPECT_TRUE(back.param(name).identical(t));
    EXPECT_THROW(load_checkpoint(dir / "missing.qlab"), InputError);
    std::filesystem::remove_all(dir);
}

TEST(HarnessCsv, RenderingAndNumberFormat)
{
    CsvTable t("x", {"a", "b"});
    t.add_row({cell(0.1), cell(std::string("p,q"))});
    EXPECT_EQ(t.render("abc"), "# manifest abc\na,b\n0.10000000000000001,\"p,q\"\n");
    EXPECT_THROW(t.add_row({"1"}), ContractError);
    for (double v : {1.0 / 3.0, -2.5e-300, 6.02214076e23})
        EXPECT_EQ(std::stod(format_double(v)), v);
}

TEST(HarnessRun, OutputDirectoryIsLockedAndFailuresLeaveNothing)
{
    const auto dir = scratch_dir("lock");
    {
        RunDirectory a(dir);
        EXPECT_THROW(RunDirectory b(dir), InputError);
        a.write_text("partial.csv", "x\n");
    }
    EXPECT_FALSE(std::filesystem::exists(dir));
    {
        RunDirectory a(dir);
        a.write_text("done.csv", "y\n");
        a.commit();
    }
    EXPECT_EQ(read_file(dir / "done.csv"), "y\n");
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir))
        ++entries;
    EXPECT_EQ(entries, 1u);
    std::filesystem::remove_all(dir);
}

TEST(HarnessRun, SubcommandOptionMismatchIsAConfigError)
{
    RunRequest r;
    r.config = parse_config(kTinyConfig);
    r.subcommand = "train";
    r.bits = {2};
    EXPECT_THROW(run_experiment(r), ConfigError);
    r.bits.clear();
    r.subcommand = "smoothness";
    EXPECT_THROW(run_experiment(r), ConfigError);
    r.subcommand = "no-such-command";
    EXPECT_THROW(run_experiment(r), ConfigError);
    const auto dir = scratch_dir("mismatch");
    r.subcommand = "rppl";
    EXPECT_THROW(execute(r, dir), ConfigError);
    EXPECT_FALSE(std::filesystem::exists(dir));
}

TEST(HarnessRun, RerunsProduceByteIdenticalCsvs)
{
    const auto base = scratch_dir("rerun");
    RunRequest train;
    train.subcommand = "train";
    train.config = parse_config(kTinyConfig);
    const std::string h1 = execute(train, base / "a");
    const std::string h2 = execute(train, base / "b");
    EXPECT_EQ(h1, h2);
    for (const char* f : {"manifest.json", "train_fp_seed3.csv", "train_summary.csv", "model_fp_seed3.qlab"})
        EXPECT_EQ(read_file(base / "a" / f), read_file(base / "b" / f)) << f;
    EXPECT_EQ(read_file(base / "a" / "train_summary.csv").rfind("# manifest " + h1 + "\n", 0), 0u);

    RunRequest smooth;
    smooth.subcommand = "smoothness";
    smooth.config = train.config;
    smooth.checkpoints = {base / "a" / "model_fp_seed3.qlab"};
    execute(smooth, base / "s1");
    execute(smooth, base / "s2");
    for (const char* f : {"smoothness_summary.csv", "smoothness_scores.csv", "smoothness_histogram.csv"})
        EXPECT_EQ(read_file(base / "s1" / f), read_file(base / "s2" / f)) << f;
    std::filesystem::remove_all(base);
}

TEST(HarnessRun, SelfReferenceRpplCurveIsMonotone)
{
    const auto base = scratch_dir("rppl");
    std::filesystem::create_directories(base);
    RunRequest r;
    r.config = parse_config(kTinyConfig);
    save_checkpoint(Model(r.config.model, 5), base / "m.qlab");
    r.subcommand = "rppl";
    r.model_q = base / "m.qlab";
    r.model_ref = base / "m.qlab";
    r.contexts = 8;
    const RunOutput out = run_experiment(r);
    const auto& rows = out.tables.front().rows();
    ASSERT_EQ(rows.size(), 6u);
    for (std::size_t i = 1; i < rows.size(); ++i)
        EXPECT_GE(std::stod(rows[i][1]), std::stod(rows[i - 1][1]));
    std::filesystem::remove_all(base);
}

TEST(HarnessRun, ManifestHashIsStable)
{
    RunRequest a;
    a.subcommand = "corpus";
    a.config = parse_config(kTinyConfig);
    RunRequest b = a;
    EXPECT_EQ(make_manifest(a).hash(), make_manifest(b).hash());
    b.config.quant.bits = 2;
    EXPECT_NE(make_manifest(a).hash(), make_manifest(b).hash());
    b = a;
    b.seeds = {9};
    EXPECT_NE(make_manifest(a).hash(), make_manifest(b).hash());
}
