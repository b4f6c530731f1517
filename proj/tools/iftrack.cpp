// iftrack: pipeline driver.
//   iftrack <subcommand> --config path [overrides...]

#include <CLI11.hpp>

#include <iostream>

#include "iftrack/pipeline.hpp"

namespace pl = iftrack::pipeline;

namespace {

std::pair<double, double> parse_window(const std::string& s) {
    auto comma = s.find(',');
    if (comma == std::string::npos) throw iftrack::Error("--tau-window expects A,B");
    return {iftrack::parse_double(s.substr(0, comma)), iftrack::parse_double(s.substr(comma + 1))};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Information-flow tracking of reasoning traces"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<int> grid_nx, grid_ny;
    std::optional<std::string> entropy_mode, tau_window, cell_estimate, output_dir;
    std::optional<double> theta, quantile;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> filters;
    bool quiet = false;

    for (const auto& name : pl::kSubcommands) {
        auto* sub = app.add_subcommand(name, "run the '" + name + "' step");
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--grid-nx", grid_nx, "grid cells along u");
        sub->add_option("--grid-ny", grid_ny, "grid cells along e");
        sub->add_option("--entropy-mode", entropy_mode, "realized | surprisal | topk");
        sub->add_option("--theta", theta, "classifier dead band half-width");
        sub->add_option("--quantile", quantile, "high-u / high-e quantile");
        sub->add_option("--tau-window", tau_window, "cosine window A,B");
        sub->add_option("--seed", seed, "seed for stochastic steps");
        sub->add_option("--filter", filters, "cohort filter (k=v, k!=v, k>=x, k<=x, k>x, k<x); repeatable");
        sub->add_option("--cell-estimate", cell_estimate, "divergence cell estimate: centered | mean");
        sub->add_option("--output-dir", output_dir, "output root (relative to the config file)");
        sub->add_flag("--quiet", quiet, "suppress progress lines");
    }

    CLI11_PARSE(app, argc, argv);
    const std::string name = app.get_subcommands().front()->get_name();

    try {
        auto cfg = pl::load_config(config_path);
        if (grid_nx) cfg.grid_nx = *grid_nx;
        if (grid_ny) cfg.grid_ny = *grid_ny;
        if (entropy_mode) cfg.entropy_mode = iftrack::infodyn::parse_entropy_mode(*entropy_mode);
        if (theta) cfg.theta = *theta;
        if (quantile) cfg.quantile = *quantile;
        if (tau_window) cfg.tau_window = parse_window(*tau_window);
        if (seed) cfg.seed = *seed;
        if (cell_estimate) cfg.divergence_estimate = iftrack::flow::parse_cell_estimate(*cell_estimate);
        if (output_dir) cfg.output_dir = *output_dir;
        if (!filters.empty()) cfg.filters = filters;
        pl::run(name, cfg, [quiet](const std::string& line) {
            if (!quiet) std::cerr << line << '\n';
        });
    } catch (const std::exception& e) {
        std::cerr << "iftrack " << name << ": " << e.what() << '\n';
        return 1;
    }
    return 0;
}
