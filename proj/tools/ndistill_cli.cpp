// Experiment runner. Every experiment kind is a subcommand taking the same
// flags; the config file carries the rest. Doubles as the library's usage
// example: see the verbs in include/ndistill/experiment.hpp for what each
// one reads and writes.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ndistill/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"neighbourhood distillation workbench"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    int workers = 0;
    std::string out_dir;
    bool seed_set = false, workers_set = false, out_set = false;

    for (const std::string& kind : nd::experiment_kinds()) {
        CLI::App* sub = app.add_subcommand(kind, "run a '" + kind + "' experiment");
        sub->add_option("--config", config_path, "config file (JSON)")->required();
        sub->add_option("--seed", seed, "override the config's seed")->each([&](const std::string&) {
            seed_set = true;
        });
        sub->add_option("--workers", workers, "override the worker count")->each([&](const std::string&) {
            workers_set = true;
        });
        sub->add_option("--out", out_dir, "override the output directory")->each([&](const std::string&) {
            out_set = true;
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    const std::string kind = app.get_subcommands().front()->get_name();
    return nd::run_cli(config_path, kind, seed_set ? &seed : nullptr, workers_set ? &workers : nullptr,
                       out_set ? &out_dir : nullptr, std::cerr);
}
