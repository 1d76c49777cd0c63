#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ucgsd.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Unit-consistent canonicalization and gauge-equivariant training"};
    app.require_subcommand(1);

    ucgsd::CommandOptions opt;
    std::uint64_t seed = 0;
    std::string out_dir;
    double tol = 0.0;

    auto add_common = [&](CLI::App* cmd, bool needs_config) {
        auto* c = cmd->add_option("--config", opt.config_path, "experiment config (JSON)");
        if (needs_config) c->required()->check(CLI::ExistingFile);
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--tol", tol, "balancing tolerance")->check(CLI::PositiveNumber);
    };

    std::string matrix_path;
    auto* canon = app.add_subcommand("canon", "canonicalize a matrix file");
    canon->add_option("matrix", matrix_path, "matrix in text format")->required();
    canon->add_option("--max-iter", opt.max_iter, "balancing sweep limit")->check(CLI::PositiveNumber);
    add_common(canon, false);

    auto* train = app.add_subcommand("train", "train a network from a config");
    add_common(train, true);
    auto* equiv = app.add_subcommand("equivariance-check", "paired trajectories under a sampled gauge");
    add_common(equiv, true);
    auto* grad = app.add_subcommand("gradcheck", "compare gradients with finite differences");
    add_common(grad, true);
    grad->add_flag("--corrupt-gradient", opt.corrupt_gradient, "perturb the analytic gradient (self-test)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : ucgsd::exit_config;
    }

    for (auto* cmd : app.get_subcommands()) {
        if (cmd->count("--seed")) opt.seed = seed;
        if (cmd->count("--out")) opt.out_dir = out_dir;
        if (cmd->count("--tol")) opt.tol = tol;
    }

    if (*canon) return ucgsd::cmd_canon(matrix_path, opt, std::cout, std::cerr);
    if (*train) return ucgsd::cmd_train(opt, std::cout, std::cerr);
    if (*equiv) return ucgsd::cmd_equivariance(opt, std::cout, std::cerr);
    return ucgsd::cmd_gradcheck(opt, std::cout, std::cerr);
}
