#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rudder/cli.hpp"
#include "rudder/error.hpp"

namespace cli = rudder::cli;

namespace {

int run_command(const std::string& name, const std::string& config_path, const std::string& out,
                std::optional<std::uint64_t> seed, bool assert_thresholds) {
    cli::RunConfig config = cli::load_config(config_path);
    if (seed) config.seed = *seed;
    cli::CommandOptions options{out, assert_thresholds};
    cli::CommandOutcome outcome;
    if (name == "generate") outcome = cli::cmd_generate(config, options);
    if (name == "eval") outcome = cli::cmd_eval(config, options);
    if (name == "bench") outcome = cli::cmd_bench(config, options);
    if (name == "diag") outcome = cli::cmd_diag(config, options);
    std::cout << outcome.summary << '\n';
    for (const auto& p : outcome.artifacts) std::cout << "wrote " << p.string() << '\n';
    if (outcome.exit_code == cli::kThresholdFailure) std::cerr << "threshold check failed\n";
    return outcome.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Residual-update directed decoding: generation, evaluation, benchmarks and diagnostics"};
    app.require_subcommand(1);

    std::string config_path, out;
    std::optional<std::uint64_t> seed;
    bool assert_thresholds = false;
    const std::pair<const char*, const char*> commands[] = {
        {"generate", "Decode every prompt; write tokens.jsonl and trace.jsonl"},
        {"eval", "Paired vanilla/steered hallucination metrics; write eval.json"},
        {"bench", "Throughput of off/beta/add/contrastive; write bench.json and bench_timing.csv"},
        {"diag", "Layer dynamics and CARD directional evidence"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
        sub->add_option("--out", out, "Output directory (overrides output.dir)");
        sub->add_option("--seed", seed, "Global seed (overrides the config)");
        if (std::string(name) == "eval" || std::string(name) == "bench") {
            sub->add_flag("--assert", assert_thresholds, "Exit 4 when report thresholds fail");
        }
    }
    std::string preset_name, preset_out;
    auto* init = app.add_subcommand("init", "Write a preset configuration");
    init->add_option("--preset", preset_name, "toy-biased | llava-like | idefics2-like | instructblip-like")
        ->required();
    init->add_option("--out", preset_out, "Destination file (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : cli::kConfigError;
    }

    try {
        if (init->parsed()) {
            const auto text = cli::to_json(cli::preset(preset_name)).dump(2) + "\n";
            if (preset_out.empty()) {
                std::cout << text;
            } else {
                std::FILE* f = std::fopen(preset_out.c_str(), "wb");
                if (!f) throw rudder::IoError("cannot write " + preset_out);
                std::fputs(text.c_str(), f);
                std::fclose(f);
            }
            return cli::kOk;
        }
        for (auto* sub : app.get_subcommands()) {
            return run_command(sub->get_name(), config_path, out, seed, assert_thresholds);
        }
    } catch (const rudder::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return cli::kConfigError;
    } catch (const rudder::InvalidConfig& e) {
        std::cerr << e.what() << '\n';
        return cli::kConfigError;
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return cli::kRuntimeError;
    }
    return cli::kOk;
}
