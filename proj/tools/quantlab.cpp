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

#include "quantlab/error.hpp"
#include "quantlab/harness/config.hpp"
#include "quantlab/harness/experiments.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

void apply_thread_cap()
{
    const char* env = std::getenv("QUANTLAB_THREADS");
    if (!env)
        return;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1)
        throw quantlab::ConfigError("QUANTLAB_THREADS must be a positive integer, got '" + std::string(env) + "'");
    Eigen::setNbThreads(static_cast<int>(n));
}

struct Args {
    std::string config_path;
    std::vector<std::uint64_t> seeds;
    std::vector<int> bits;
    std::string out;
    std::vector<std::string> checkpoints;
    std::string model_q;
    std::string model_ref;
    std::string variant;
    std::string layer;
    std::vector<int> reg_layers;
    int contexts = 0;
};

void add_common(CLI::App* sub, Args& a)
{
    sub->add_option("--config", a.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", a.seeds, "seed(s), overriding the config")->delimiter(',');
    sub->add_option("--bits", a.bits, "comma-separated bit widths")->delimiter(',');
    sub->add_option("--out", a.out, "output directory (default: config output_dir)");
    sub->add_option("--checkpoint", a.checkpoints, "input checkpoint(s)");
    sub->add_option("--model-q", a.model_q, "ranking model checkpoint");
    sub->add_option("--model-ref", a.model_ref, "reference model checkpoint");
    sub->add_option("--variant", a.variant, "train: fp|ternary|lgr; quantize: rtn|gptq|lgp");
    sub->add_option("--layer", a.layer, "projection name for anisotropy");
    sub->add_option("--reg-layers", a.reg_layers, "layers for ablate-reg-layer")->delimiter(',');
    sub->add_option("--contexts", a.contexts, "number of rppl contexts")->check(CLI::PositiveNumber);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"quantlab: quantization smoothness experiments"};
    app.require_subcommand(1);
    Args args;
    for (const auto& name : quantlab::subcommand_names())
        add_common(app.add_subcommand(name, "run the '" + name + "' experiment"), args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        apply_thread_cap();
        quantlab::RunRequest request;
        request.subcommand = app.get_subcommands().front()->get_name();
        request.config = args.config_path.empty() ? quantlab::ExperimentConfig{}
                                                  : quantlab::load_config(args.config_path);
        request.config.validate();
        request.seeds = args.seeds;
        request.bits = args.bits;
        for (const auto& c : args.checkpoints)
            request.checkpoints.emplace_back(c);
        request.model_q = args.model_q;
        request.model_ref = args.model_ref;
        request.variant = args.variant;
        request.layer = args.layer;
        request.reg_layers = args.reg_layers;
        request.contexts = args.contexts;
        const std::string out = args.out.empty() ? request.config.output_dir : args.out;
        const std::string hash = quantlab::execute(request, out);
        std::cout << request.subcommand << ": wrote " << out << " (manifest " << hash << ")\n";
        return kExitOk;
    } catch (const quantlab::ConfigError& e) {
        spdlog::error("config error: {}", e.what());
        return kExitConfig;
    } catch (const quantlab::NumericalError& e) {
        spdlog::error("numerical failure: {}", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kExitFailure;
    }
}
