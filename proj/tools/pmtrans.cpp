#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pmtrans/cli.hpp"

using namespace pmtrans;

int main(int argc, char** argv) {
    CLI::App app{"PatchMix transformer domain adaptation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, dataset_path;
    std::vector<std::string> arm_specs;
    GradcheckOptions gopt;

    auto* generate = app.add_subcommand("generate", "write the source and target datasets");
    generate->add_option("config", config_path, "run config file")->required();

    auto* train = app.add_subcommand("train", "train one run; writes metrics, checkpoint and run info");
    train->add_option("config", config_path, "run config file")->required();

    auto* ablate = app.add_subcommand("ablate", "run arms over the configured seeds and summarize");
    ablate->add_option("config", config_path, "base run config file")->required();
    ablate->add_option("--arm", arm_specs, "arm as name or name:key=value;key=value (repeatable)");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference and Monte Carlo gradient oracles");
    gradcheck->add_option("--seed", gopt.seed, "oracle seed");
    gradcheck->add_option("--mc-draws", gopt.mc_draws, "draws for the Beta moment check");
    gradcheck->add_flag("--inject-sign-error", gopt.inject_sign_error, "negate analytic gradients (mutation check)");

    auto* eval = app.add_subcommand("eval", "accuracy of a checkpoint on a dataset");
    eval->add_option("config", config_path, "run config file the checkpoint was trained with")->required();
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--dataset", dataset_path, "dataset file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : cli::kConfigError;
    }

    return cli::guarded(
        [&]() -> int {
            if (gradcheck->parsed()) return cli::cmd_gradcheck(gopt, std::cout);
            RunConfig cfg = load_config(config_path);
            if (generate->parsed()) return cli::cmd_generate(cfg, std::cout);
            if (train->parsed()) return cli::cmd_train(cfg, std::cout, std::cerr);
            if (ablate->parsed()) {
                std::vector<cli::Arm> arms;
                for (const auto& s : arm_specs) arms.push_back(cli::parse_arm(s));
                return cli::cmd_ablate(cfg, arms, std::cout, std::cerr);
            }
            return cli::cmd_eval(cfg, checkpoint_path, dataset_path, std::cout);
        },
        std::cerr);
}
