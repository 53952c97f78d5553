#include <CLI11.hpp>

#include "san/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Semantic attention pose-transfer toolkit"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

    san::Command cmd;
    std::string config, seed;
    for (const auto& name : san::command_names()) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config, "Config file (key = value lines)");
        sub->add_option("--set", cmd.overrides, "Override key=value (repeatable)")->take_last();
        sub->add_option("--out", cmd.out, "Output directory")->capture_default_str();
        sub->add_option("--seed", seed, "Root seed");
        sub->callback([&cmd, name] { cmd.name = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (verbose) san::set_log_level(san::LogLevel::info);
    if (!config.empty()) cmd.config = config;
    if (!seed.empty()) {
        try {
            std::size_t used = 0;
            cmd.seed = std::stoull(seed, &used);
            if (used != seed.size()) throw std::invalid_argument(seed);
        } catch (const std::exception&) {
            std::cerr << "error: --seed must be a nonnegative integer, got '" << seed << "'\n";
            return 2;
        }
    }
    return san::run_command(cmd);
}
