// moelens: corpus generation, training, analysis and pruning pipeline.
//
// Human-readable logs go to stderr; stdout carries one JSON document per run.

#include "moelens/errors.hpp"
#include "moelens/pipeline.hpp"
#include "moelens/run_config.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>

using namespace moelens;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-experts specialization and early-decoding analysis"};
    app.require_subcommand(1);

    std::string config_path, out_path, model_path, table_path, domain;
    double threshold = 0.0;
    std::optional<int> steps_override;
    std::optional<std::uint64_t> seed_override;

    auto* gen = app.add_subcommand("gen-corpus", "Write one <domain>.bytes file per configured domain");
    gen->add_option("--config", config_path, "Run config JSON")->required();
    gen->add_option("--out", out_path, "Output directory (default: config corpus_dir)");

    auto* trn = app.add_subcommand("train", "Train from the seeded initialization");
    trn->add_option("--config", config_path, "Run config JSON")->required();
    trn->add_option("--out", out_path, "Checkpoint path")->required();
    trn->add_option("--steps", steps_override, "Override train.steps");
    trn->add_option("--seed", seed_override, "Override train.seed");

    auto* ana = app.add_subcommand("analyze", "Specialization, logit lens, similarity and perplexity reports");
    ana->add_option("--model", model_path, "Checkpoint")->required();
    ana->add_option("--config", config_path, "Run config JSON")->required();
    ana->add_option("--out", out_path, "Output directory (default: config output_dir)");

    auto* prn = app.add_subcommand("prune", "Drop experts below a specialization threshold");
    prn->add_option("--model", model_path, "Checkpoint")->required();
    prn->add_option("--table", table_path, "specialization.csv from analyze")->required();
    prn->add_option("--threshold", threshold, "Multiple of the uniform baseline k/n")->required();
    prn->add_option("--out", out_path, "Pruned checkpoint path")->required();
    prn->add_option("--domain", domain, "Plan for one domain instead of the union over all");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitUsage;
    }

    try {
        nlohmann::json result;
        if (*gen) {
            const RunConfig cfg = load_run_config(config_path);
            const fs::path dir = out_path.empty() ? cfg.corpus_dir : fs::path(out_path);
            nlohmann::json files = nlohmann::json::array();
            for (const auto& p : gen_corpus(cfg, dir)) files.push_back(p.string());
            result = {{"corpus_files", files}};
        } else if (*trn) {
            RunConfig cfg = load_run_config(config_path);
            if (steps_override) cfg.train.steps = *steps_override;
            if (seed_override) cfg.train.seed = *seed_override;
            cfg.train.validate();
            const TrainOutcome out = train_command(cfg, out_path, std::cerr);
            result = {{"checkpoint", out.checkpoint.string()}, {"loss_csv", out.loss_csv.string()},
                      {"steps", out.history.size()}};
            if (!out.history.empty()) {
                result["initial_cross_entropy"] = out.history.front().cross_entropy;
                result["final_cross_entropy"] = out.history.back().cross_entropy;
            }
        } else if (*ana) {
            const RunConfig cfg = load_run_config(config_path);
            const fs::path dir = out_path.empty() ? cfg.output_dir : fs::path(out_path);
            result = analyze_command(model_path, cfg, dir, std::cerr);
        } else if (*prn) {
            const auto out = prune_command(model_path, table_path, threshold, out_path,
                                           domain.empty() ? std::nullopt : std::optional<std::string>(domain));
            nlohmann::json layers = nlohmann::json::array();
            for (std::size_t l = 0; l < out.keep_sets.size(); ++l) {
                layers.push_back({{"layer", l}, {"kept", out.keep_sets[l].size()}, {"total", out.n_experts},
                                  {"experts", out.keep_sets[l]}});
                std::cerr << "layer " << l << ": kept " << out.keep_sets[l].size() << "/" << out.n_experts << "\n";
            }
            result = {{"checkpoint", out_path}, {"layers", layers}};
        }
        std::cout << result.dump() << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        std::cerr << "error: " << e.what() << "\n";
        if (code == kExitUsage) {
            const auto active = app.get_subcommands();
            std::cerr << (active.empty() ? app.help() : active.front()->help());
        }
        return code;
    }
}
