#pragma once

#include "moelens/analysis.hpp"
#include "moelens/corpus.hpp"
#include "moelens/errors.hpp"
#include "moelens/run_config.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace moelens {

// Exit-code contract shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitConsistency = 4;

/// Model and run config disagree (n, k, ...) or a table does not fit a model.
class MismatchError : public Error {
public:
    using Error::Error;
};

struct CorpusSplit {
    DomainCorpus train;
    DomainCorpus eval;
};

/// Head for training, tail (eval_fraction of the tokens) for analysis.
CorpusSplit split_corpus(const DomainCorpus& corpus, double eval_fraction);

std::vector<std::filesystem::path> gen_corpus(const RunConfig& config, const std::filesystem::path& out_dir);

struct TrainOutcome {
    std::filesystem::path checkpoint;
    std::filesystem::path loss_csv;
    std::vector<TrainStep> history;
};

/// Trains from the seeded initialization on the corpus files in
/// config.corpus_dir; writes the checkpoint and `<out>.loss.csv`.
TrainOutcome train_command(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);

/// Runs all three experiments and writes CSV/JSON/SVG artifacts under
/// out_dir. Returns the summary document.
nlohmann::json analyze_command(const std::filesystem::path& model, const RunConfig& config,
                               const std::filesystem::path& out_dir, std::ostream& log);

struct PruneOutcome {
    std::vector<std::vector<int>> keep_sets;
    int n_experts = 0;
};

PruneOutcome prune_command(const std::filesystem::path& model, const std::filesystem::path& table,
                           double threshold, const std::filesystem::path& out,
                           const std::optional<std::string>& domain);

/// Maps an exception thrown by a command to its exit code.
int exit_code_for(const std::exception& e);

}  // namespace moelens
