#include "prefopt/cli.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    CLI::App app{"prefopt: tabular preference-optimization laboratory"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string out_dir = ".";
    unsigned jobs = 1;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--jobs", jobs, "parallel sweep points")->check(CLI::PositiveNumber);
    app.add_option("--seed", seed, "override the config's master seed");

    for (const char* name : {"generate", "solve", "train", "diagnose", "limits", "bridge"}) app.add_subcommand(name);
    app.get_subcommand("generate")->description("synthetic reward, reference, dataset and manifest");
    app.get_subcommand("solve")->description("constrained RLHF fixed point");
    app.get_subcommand("train")->description("gradient descent on DPO / CPO / E-CPOC");
    app.get_subcommand("diagnose")->description("violation statistics, thresholds, curvature");
    app.get_subcommand("limits")->description("large-beta hinge-limit sweep");
    app.get_subcommand("bridge")->description("loss-to-delta certificate");
    app.fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : prefopt::cli::validation_error;
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        const auto ctx = prefopt::cli::make_context(config_path, out_dir, jobs, seed);
        return prefopt::cli::dispatch(cmd, ctx);
    } catch (const prefopt::UsageError& e) {
        std::cerr << "prefopt " << cmd << ": " << e.what() << '\n';
        return prefopt::cli::validation_error;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "prefopt " << cmd << ": " << e.what() << '\n';
        return prefopt::cli::validation_error;
    } catch (const prefopt::NumericError& e) {
        std::cerr << "prefopt " << cmd << ": numeric failure: " << e.what() << '\n';
        return prefopt::cli::numeric_failure;
    } catch (const std::exception& e) {
        std::cerr << "prefopt " << cmd << ": " << e.what() << '\n';
        return 1;
    }
}
