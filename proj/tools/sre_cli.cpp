#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "sre/config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Generative reasoning over variable sets with per-variable noise levels"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::string samples;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
        sub->add_option("--seed", seed, "Seed override for sampling and training");
        sub->add_option("--out", out, "Output directory override");
    };

    auto* train = app.add_subcommand("train", "Train the neural denoiser; writes checkpoint.bin and loss_trace.csv");
    auto* sample = app.add_subcommand("sample", "Run inference chains; writes samples.csv (+ trajectory.csv)");
    auto* eval = app.add_subcommand("eval", "Score samples against the task distribution; writes metrics.json");
    auto* viz = app.add_subcommand("viz-schedule", "Render the inference schedule as a PGM heat map");
    for (auto* sub : {train, sample, eval, viz}) add_common(sub);
    eval->add_option("--samples", samples, "Samples CSV (default: <out>/samples.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    using sre::cli::Subcommand;
    Subcommand cmd = Subcommand::Sample;
    if (train->parsed()) cmd = Subcommand::Train;
    if (eval->parsed()) cmd = Subcommand::Eval;
    if (viz->parsed()) cmd = Subcommand::VizSchedule;
    return sre::cli::run_config(config_path, cmd, seed, out, samples);
}
