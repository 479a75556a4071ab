#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "deepace/pipeline.hpp"

namespace {

void add_common_options(CLI::App* cmd) {
    static std::string config_path, species_csv, out_dir;
    static std::uint64_t seed = 0;
    cmd->add_option("--config", config_path, "run configuration file");
    cmd->add_option("--species", species_csv, "comma-separated species filter");
    cmd->add_option("--seed", seed, "global random seed override");
    cmd->add_option("--out", out_dir, "output directory override");
}

deepace::RunConfig build_config(const CLI::App* cmd) {
    deepace::RunConfig cfg;
    if (cmd->count("--config") > 0) {
        const std::string path = cmd->get_option("--config")->as<std::string>();
        cfg = deepace::parse_run_config(deepace::read_text_file(path));
    }
    if (cmd->count("--species") > 0) {
        cfg.species.clear();
        const std::string csv = cmd->get_option("--species")->as<std::string>();
        for (const auto token : deepace::split(csv, ',')) {
            const auto trimmed = deepace::trim(token);
            if (trimmed.empty()) continue;
            const auto sp = deepace::parse_species(trimmed);
            if (!sp)
                throw std::invalid_argument("unknown species '" + std::string(trimmed) + "'");
            cfg.species.push_back(*sp);
        }
    }
    if (cmd->count("--seed") > 0) cfg.seed = cmd->get_option("--seed")->as<std::uint64_t>();
    if (cmd->count("--out") > 0) cfg.out_dir = cmd->get_option("--out")->as<std::string>();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lysine acetylation site prediction: windowed datasets, an "
                 "LSTM feature extractor, five tree ensembles, and t-SNE maps"};
    app.require_subcommand(1);

    CLI::App* prepare = app.add_subcommand(
        "prepare", "build windowed per-species datasets from FASTA and site annotations");
    CLI::App* train = app.add_subcommand("train", "train the sequence model on the train split");
    CLI::App* extract =
        app.add_subcommand("extract", "write deep feature vectors for every window");
    CLI::App* evaluate = app.add_subcommand(
        "evaluate", "fit the ensembles and score all configured protocols");
    CLI::App* visualize = app.add_subcommand("visualize", "embed features into 2-D with t-SNE");
    CLI::App* defaults =
        app.add_subcommand("defaults", "print the effective run configuration");
    for (CLI::App* cmd : {prepare, train, extract, evaluate, visualize, defaults})
        add_common_options(cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const CLI::App* cmd = app.get_subcommands().front();
    try {
        const deepace::RunConfig cfg = build_config(cmd);
        if (cmd == defaults) {
            std::cout << deepace::serialize_run_config(cfg);
        } else if (cmd == prepare) {
            deepace::run_prepare(cfg);
        } else if (cmd == train) {
            deepace::run_train(cfg);
        } else if (cmd == extract) {
            deepace::run_extract(cfg);
        } else if (cmd == evaluate) {
            deepace::run_evaluate(cfg);
        } else if (cmd == visualize) {
            deepace::run_visualize(cfg);
        }
    } catch (const deepace::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const deepace::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
