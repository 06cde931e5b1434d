#include "moelens/pipeline.hpp"

#include "moelens/checkpoint.hpp"
#include "moelens/errors.hpp"
#include "moelens/lens.hpp"
#include "moelens/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace moelens {

using nlohmann::json;
namespace fs = std::filesystem;

CorpusSplit split_corpus(const DomainCorpus& corpus, double eval_fraction) {
    const auto eval_len = static_cast<std::size_t>(static_cast<double>(corpus.tokens.size()) * eval_fraction);
    if (eval_len < 2 || eval_len >= corpus.tokens.size()) {
        throw InputError("corpus '" + corpus.domain_id + "' too short to split");
    }
    CorpusSplit split{corpus, corpus};
    const auto cut = corpus.tokens.begin() + static_cast<std::ptrdiff_t>(corpus.tokens.size() - eval_len);
    split.train.tokens.assign(corpus.tokens.begin(), cut);
    split.eval.tokens.assign(cut, corpus.tokens.end());
    return split;
}

namespace {

void ensure_directory(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw InputError("cannot create directory '" + dir.string() + "'");
}

std::vector<CorpusSplit> load_splits(const RunConfig& config) {
    std::vector<CorpusSplit> out;
    for (const auto& d : config.analysis.domains) {
        out.push_back(split_corpus(read_corpus(config.corpus_dir, d), config.analysis.eval_fraction));
    }
    return out;
}

}  // namespace

std::vector<fs::path> gen_corpus(const RunConfig& config, const fs::path& out_dir) {
    ensure_directory(out_dir);
    std::vector<fs::path> written;
    for (const auto& d : config.analysis.domains) {
        write_corpus(synth_corpus(d, config.analysis.corpus_length, config.seed), out_dir);
        written.push_back(corpus_path(out_dir, d));
    }
    return written;
}

TrainOutcome train_command(const RunConfig& config, const fs::path& out, std::ostream& log) {
    {
        std::ofstream probe(out, std::ios::binary | std::ios::app);
        if (!probe) throw InputError("cannot write checkpoint to '" + out.string() + "'");
    }
    std::vector<DomainCorpus> corpora;
    for (auto& split : load_splits(config)) corpora.push_back(std::move(split.train));

    const Checkpoint initial = init_checkpoint(config.model);
    const int every = std::max(1, config.train.steps / 20);
    TrainResult result = train(initial, corpora, config.train, [&](const TrainStep& s) {
        if (s.step % every == 0 || s.step + 1 == config.train.steps) {
            log << "step " << s.step << " cross_entropy " << format_number(s.cross_entropy, 4) << " balance "
                << format_number(s.balance_loss, 4) << "\n";
        }
    });

    TrainOutcome outcome;
    outcome.checkpoint = out;
    outcome.loss_csv = fs::path(out.string() + ".loss.csv");
    outcome.history = result.history;
    save_checkpoint(result.checkpoint, out);
    std::string csv = "step,cross_entropy,balance_loss\n";
    for (const auto& s : result.history) {
        csv += std::to_string(s.step) + "," + format_exact(s.cross_entropy) + "," + format_exact(s.balance_loss) + "\n";
    }
    write_text_file(outcome.loss_csv, csv);
    return outcome;
}

namespace {

std::vector<Trace> trace_domain(const Checkpoint& ck, const DomainCorpus& eval, std::size_t window,
                                std::size_t budget) {
    std::vector<Trace> traces;
    const std::size_t total = std::min(budget, eval.tokens.size());
    for (std::size_t start = 0; start < total; start += window) {
        const std::size_t len = std::min(window, total - start);
        std::span<const int> chunk(eval.tokens.data() + start, len);
        traces.push_back(*model_forward(chunk, ck, true).trace);
    }
    return traces;
}

std::vector<int> encode_prompt(const std::string& prompt, int max_len) {
    std::vector<int> ids;
    for (unsigned char c : prompt) ids.push_back(c);
    if (ids.empty()) ids.push_back(kBosToken);
    if (static_cast<int>(ids.size()) > max_len) ids.erase(ids.begin(), ids.end() - max_len);
    return ids;
}

}  // namespace

json analyze_command(const fs::path& model, const RunConfig& config, const fs::path& out_dir, std::ostream& log) {
    const Checkpoint ck = load_checkpoint(model);
    const ModelConfig& mc = ck.config;
    if (mc.n_routed_experts != config.model.n_routed_experts || mc.top_k != config.model.top_k ||
        mc.n_layers != config.model.n_layers) {
        throw MismatchError("model has n=" + std::to_string(mc.n_routed_experts) + ", k=" + std::to_string(mc.top_k) +
                            ", layers=" + std::to_string(mc.n_layers) + " but config says n=" +
                            std::to_string(config.model.n_routed_experts) + ", k=" + std::to_string(config.model.top_k) +
                            ", layers=" + std::to_string(config.model.n_layers));
    }
    ensure_directory(out_dir);
    ensure_directory(out_dir / "specialization");
    ensure_directory(out_dir / "lens");

    const auto splits = load_splits(config);
    const auto window = static_cast<std::size_t>(std::min(config.train.seq_len, mc.max_seq_len));
    json summary;
    summary["model"] = {{"n_routed_experts", mc.n_routed_experts},
                        {"top_k", mc.top_k},
                        {"n_layers", mc.n_layers},
                        {"n_shared_experts", mc.n_shared_experts}};

    // routing specialization
    log << "tracing " << splits.size() << " domains\n";
    std::vector<std::vector<Trace>> traces;
    std::vector<DomainRouting> routing;
    for (const auto& s : splits) {
        traces.push_back(trace_domain(ck, s.eval, window, config.analysis.trace_tokens));
        routing.push_back(collect_routing(s.eval.domain_id, traces.back()));
    }
    const SpecializationTable table = expert_specialization(routing, mc.n_routed_experts, mc.top_k);
    write_text_file(out_dir / "specialization.csv", specialization_csv(table));
    json spec_layers = json::array();
    for (int l = 0; l < table.n_layers(); ++l) {
        json per_domain = json::object();
        for (std::size_t d = 0; d < table.domains().size(); ++d) {
            const std::string& name = table.domains()[d];
            write_text_file(out_dir / "specialization" / ("layer" + std::to_string(l) + "_" + name + ".svg"),
                            specialization_svg(table, l, d));
            int best = 0;
            for (int e = 1; e < table.n_experts(); ++e) {
                if (table.fraction(l, e, d) > table.fraction(l, best, d)) best = e;
            }
            const double f = table.fraction(l, best, d);
            per_domain[name] = {{"top_expert", best}, {"max_fraction", f}, {"ratio_to_uniform", f / table.uniform_baseline()}};
        }
        spec_layers.push_back({{"layer", l}, {"domains", per_domain}});
    }
    summary["specialization"] = {{"uniform_baseline", table.uniform_baseline()}, {"layers", spec_layers}};

    // lens grids
    json lens_summary = json::array();
    for (std::size_t i = 0; i < config.analysis.probe_prompts.size(); ++i) {
        const auto& prompt = config.analysis.probe_prompts[i];
        const auto ids = encode_prompt(prompt, mc.max_seq_len);
        const ForwardResult fr = model_forward(ids, ck, true);
        const LensGrid grid = lens_grid(*fr.trace, ck, ids.size() - 1);
        json gj = lens_grid_json(grid);
        gj["prompt"] = prompt;
        const std::string stem = "probe" + std::to_string(i);
        write_text_file(out_dir / "lens" / (stem + ".json"), gj.dump(2) + "\n");
        write_text_file(out_dir / "lens" / (stem + ".svg"), lens_grid_svg(grid, "Logit lens: \"" + prompt + "\""));
        int agree = 0;
        std::vector<std::string> per_layer;
        for (const auto& row : grid.rows) {
            per_layer.push_back(row[0].token_text);
            if (row[1].token_id == row[0].token_id) ++agree;
        }
        lens_summary.push_back({{"prompt", prompt},
                                {"prediction", grid.rows.back()[0].token_text},
                                {"layer_output_tokens", per_layer},
                                {"top1_matches_layer_output", agree}});
    }
    summary["lens"] = lens_summary;

    // similarity and perplexity
    std::vector<SimilarityProfile> profiles;
    for (std::size_t d = 0; d < splits.size(); ++d) profiles.push_back(similarity_profile(traces[d], splits[d].eval.domain_id));
    write_text_file(out_dir / "similarity.csv", similarity_csv(profiles));
    json sim = json::object();
    for (const auto& p : profiles) sim[p.domain] = p.mean;
    summary["similarity"] = sim;

    log << "evaluating perplexity over k'\n";
    std::vector<DomainCorpus> eval_sets;
    for (const auto& s : splits) {
        DomainCorpus c = s.eval;
        if (c.tokens.size() > config.analysis.eval_tokens) c.tokens.resize(config.analysis.eval_tokens);
        eval_sets.push_back(std::move(c));
    }
    const auto curves = perplexity_vs_k(ck, eval_sets, config.analysis.k_prime_min);
    write_text_file(out_dir / "perplexity.csv", perplexity_csv(curves));
    write_text_file(out_dir / "perplexity.svg", perplexity_svg(curves));
    json ppx = json::object();
    for (const auto& c : curves) {
        const double full = c.ppx.back();
        json entry{{"ppx_full", full}};
        if (c.k_prime.front() == 1) {
            entry["ppx_top1"] = c.ppx.front();
            entry["top1_increase_pct"] = 100.0 * (c.ppx.front() / full - 1.0);
        }
        ppx[c.domain] = entry;
    }
    summary["perplexity"] = ppx;

    write_text_file(out_dir / "summary.json", summary.dump(2) + "\n");
    return summary;
}

PruneOutcome prune_command(const fs::path& model, const fs::path& table_path, double threshold, const fs::path& out,
                           const std::optional<std::string>& domain) {
    if (!(threshold >= 0.0)) throw ParameterError("threshold must be non-negative");
    std::ifstream in(table_path);
    if (!in) throw InputError("cannot read specialization table '" + table_path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();

    const Checkpoint ck = load_checkpoint(model);
    SpecializationTable table = [&] {
        try {
            return parse_specialization_csv(buf.str(), ck.config.n_routed_experts, ck.config.top_k);
        } catch (const ConsistencyError& e) {
            throw MismatchError(e.what());
        }
    }();
    if (table.n_layers() != ck.config.n_layers) {
        throw MismatchError("table covers " + std::to_string(table.n_layers()) + " layers, model has " +
                            std::to_string(ck.config.n_layers));
    }

    PruneOutcome outcome;
    outcome.n_experts = ck.config.n_routed_experts;
    if (domain) {
        std::size_t d = 0;
        try {
            d = table.domain_index(*domain);
        } catch (const ParameterError& e) {
            throw InputError(e.what());
        }
        for (int l = 0; l < table.n_layers(); ++l) outcome.keep_sets.push_back(prune_plan(table, l, d, threshold));
    } else {
        outcome.keep_sets = prune_plan_all_domains(table, threshold);
    }
    Checkpoint pruned = [&] {
        try {
            return prune_experts(ck, outcome.keep_sets);
        } catch (const ParameterError& e) {
            throw MismatchError(std::string("infeasible keep-set: ") + e.what());
        }
    }();
    save_checkpoint(pruned, out);
    return outcome;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const DivergedError*>(&e)) return kExitNumerical;
    if (dynamic_cast<const MismatchError*>(&e) || dynamic_cast<const LoadError*>(&e)) return kExitConsistency;
    if (dynamic_cast<const Error*>(&e)) return kExitUsage;
    return 1;
}

}  // namespace moelens
