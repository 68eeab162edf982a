#include "commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace worldkit::cli;

int main(int argc, char **argv) {
    CLI::App app{"worldkit: synthetic Gaussian world-model pipelines"};
    std::string verb, config_path;
    std::vector<std::string> overrides;
    CommandOptions opt;
    app.add_option("command", verb, "pipeline stage")->required()->check(CLI::IsMember(verbs()));
    app.add_option("-c,--config", config_path, "JSON run config (absent keys take defaults)")->check(CLI::ExistingFile);
    app.add_option("-s,--set", overrides, "override, e.g. --set seed=7 --set scene.frames=4");
    app.add_flag("--deterministic", opt.deterministic, "single-worker reductions for byte-identical artifacts");
    app.add_option("--pred", opt.pred, "eval: predicted OCC3 grids");
    app.add_option("--gt", opt.gt, "eval: ground-truth OCC3 grids");
    app.add_flag_callback(
        "--print-config",
        [&] {
            try {
                const RunConfig cfg = config_path.empty() ? parse_config("", overrides) : load_config(config_path, overrides);
                std::cout << config_to_json(cfg).dump(2) << "\n";
            } catch (const ConfigError &e) {
                std::cerr << "config error: " << e.what() << "\n";
                throw CLI::RuntimeError(kExitValidation);
            }
            throw CLI::Success();
        },
        "print the resolved config and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success &e) {
        return app.exit(e);
    } catch (const CLI::RuntimeError &e) {
        return e.get_exit_code();
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return kExitValidation;
    }

    RunConfig cfg;
    try {
        cfg = config_path.empty() ? parse_config("", overrides) : load_config(config_path, overrides);
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitValidation;
    }
    return run_command(verb, cfg, opt, std::cout, std::cerr);
}
