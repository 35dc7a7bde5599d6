#include "dtr/errors.hpp"
#include "dtr/pipeline.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>

#include <cstdio>

namespace {

// Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numerical.
int run(const std::string& command, const std::string& config_path, std::optional<std::size_t> workers,
        const std::string& output) {
    try {
        const auto stage = dtr::parse_subcommand(command);
        auto config = dtr::load_run_config(config_path);
        if (workers) config.workers = *workers;
        if (!output.empty()) config.output_dir = output;
        dtr::run_pipeline(stage, config);
        fmt::print("{}: wrote {}\n", command, config.output_dir.string());
        return 0;
    } catch (const dtr::ConfigError& e) {
        fmt::print(stderr, "configuration error: {}\n", e.what());
        return 2;
    } catch (const dtr::DataError& e) {
        fmt::print(stderr, "data error: {}\n", e.what());
        return 3;
    } catch (const dtr::NumericalError& e) {
        fmt::print(stderr, "numerical error: {}\n", e.what());
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        fmt::print(stderr, "data error: {}\n", e.what());
        return 3;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic treatment regime estimation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::size_t> workers;
    std::string output;
    for (const char* name : {"simulate", "weights", "impute", "estimate", "msm", "report", "all"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--workers", workers, "worker threads, 0 for all cores");
        sub->add_option("--output", output, "output directory, overrides the config");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    return run(app.get_subcommands().front()->get_name(), config_path, workers, output);
}
