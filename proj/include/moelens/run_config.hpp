#pragma once

#include "moelens/model.hpp"
#include "moelens/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace moelens {

struct AnalysisOptions {
    std::vector<std::string> domains{"A", "B", "C"};
    std::size_t corpus_length = 40000;
    /// Tail share of each corpus held out from training for analysis.
    double eval_fraction = 0.1;
    std::size_t trace_tokens = 384;
    std::size_t eval_tokens = 1536;
    int k_prime_min = 1;
    std::vector<std::string> probe_prompts{"the quick brown fo", "12+34=46;7*8=", "F(X,[Y]);{G(A"};
    double prune_threshold = 2.0;
};

/// One document drives every pipeline stage.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    AnalysisOptions analysis;
    std::filesystem::path corpus_dir = "corpus";
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 42;  // corpus generation
};

nlohmann::json run_config_to_json(const RunConfig& config);

/// Unknown keys are rejected; relative paths resolve against `base_dir`,
/// whose parents must exist.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace moelens
