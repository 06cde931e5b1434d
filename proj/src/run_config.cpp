#include "moelens/run_config.hpp"

#include "moelens/checkpoint.hpp"
#include "moelens/corpus.hpp"
#include "moelens/errors.hpp"

#include <fstream>

namespace moelens {

using nlohmann::json;

json run_config_to_json(const RunConfig& c) {
    const auto& t = c.train;
    const auto& a = c.analysis;
    return json{{"model", model_config_to_json(c.model)},
                {"train",
                 {{"learning_rate", t.learning_rate},
                  {"steps", t.steps},
                  {"batch_size", t.batch_size},
                  {"seq_len", t.seq_len},
                  {"balance_coeff", t.balance_coeff},
                  {"seed", t.seed}}},
                {"analysis",
                 {{"domains", a.domains},
                  {"corpus_length", a.corpus_length},
                  {"eval_fraction", a.eval_fraction},
                  {"trace_tokens", a.trace_tokens},
                  {"eval_tokens", a.eval_tokens},
                  {"k_prime_min", a.k_prime_min},
                  {"probe_prompts", a.probe_prompts},
                  {"prune_threshold", a.prune_threshold}}},
                {"corpus_dir", c.corpus_dir.string()},
                {"output_dir", c.output_dir.string()},
                {"seed", c.seed}};
}

namespace {

template <typename Fn>
void for_each_key(const json& j, const std::string& section, Fn&& fn) {
    if (!j.is_object()) throw ParameterError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (!fn(key, value)) throw ParameterError("unknown config key '" + section + key + "'");
        } catch (const json::exception& e) {
            throw ParameterError("config key '" + section + key + "': " + e.what());
        }
    }
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
    std::filesystem::path full = p.is_absolute() ? p : base / p;
    full = full.lexically_normal();
    const auto parent = full.has_parent_path() ? full.parent_path() : std::filesystem::path(".");
    if (!std::filesystem::is_directory(parent)) {
        throw InputError("config path '" + p.string() + "' has no existing parent directory");
    }
    return full;
}

}  // namespace

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    RunConfig c;
    for_each_key(j, "", [&](const std::string& key, const json& v) {
        if (key == "model") c.model = model_config_from_json(v);
        else if (key == "train") {
            for_each_key(v, "train.", [&](const std::string& k, const json& x) {
                if (k == "learning_rate") c.train.learning_rate = x.get<double>();
                else if (k == "steps") c.train.steps = x.get<int>();
                else if (k == "batch_size") c.train.batch_size = x.get<int>();
                else if (k == "seq_len") c.train.seq_len = x.get<int>();
                else if (k == "balance_coeff") c.train.balance_coeff = x.get<double>();
                else if (k == "seed") c.train.seed = x.get<std::uint64_t>();
                else return false;
                return true;
            });
        } else if (key == "analysis") {
            auto& a = c.analysis;
            for_each_key(v, "analysis.", [&](const std::string& k, const json& x) {
                if (k == "domains") a.domains = x.get<std::vector<std::string>>();
                else if (k == "corpus_length") a.corpus_length = x.get<std::size_t>();
                else if (k == "eval_fraction") a.eval_fraction = x.get<double>();
                else if (k == "trace_tokens") a.trace_tokens = x.get<std::size_t>();
                else if (k == "eval_tokens") a.eval_tokens = x.get<std::size_t>();
                else if (k == "k_prime_min") a.k_prime_min = x.get<int>();
                else if (k == "probe_prompts") a.probe_prompts = x.get<std::vector<std::string>>();
                else if (k == "prune_threshold") a.prune_threshold = x.get<double>();
                else return false;
                return true;
            });
        } else if (key == "corpus_dir") c.corpus_dir = v.get<std::string>();
        else if (key == "output_dir") c.output_dir = v.get<std::string>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else return false;
        return true;
    });

    c.model.validate();
    c.train.validate();
    const auto& a = c.analysis;
    if (a.domains.empty()) throw ParameterError("analysis.domains must list at least one domain");
    for (const auto& d : a.domains) domain_alphabet(d);  // throws for unknown ids
    if (!(a.eval_fraction > 0.0 && a.eval_fraction < 1.0)) throw ParameterError("analysis.eval_fraction must lie in (0, 1)");
    if (a.trace_tokens < 1 || a.eval_tokens < 2) throw ParameterError("analysis.trace_tokens/eval_tokens too small");
    if (a.k_prime_min < 1 || a.k_prime_min > c.model.top_k) throw ParameterError("analysis.k_prime_min must lie in [1, top_k]");
    if (!(a.prune_threshold >= 0.0)) throw ParameterError("analysis.prune_threshold must be non-negative");
    if (c.train.seq_len > c.model.max_seq_len) throw ParameterError("train.seq_len exceeds model.max_seq_len");
    const auto eval_len = static_cast<std::size_t>(static_cast<double>(a.corpus_length) * a.eval_fraction);
    const auto train_len = a.corpus_length - eval_len;
    if (eval_len < 2 || train_len < static_cast<std::size_t>(c.train.seq_len) + 1) {
        throw ParameterError("analysis.corpus_length too short for the train/eval split");
    }
    c.corpus_dir = resolve(c.corpus_dir, base_dir);
    c.output_dir = resolve(c.output_dir, base_dir);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw InputError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return run_config_from_json(j, base);
}

}  // namespace moelens
