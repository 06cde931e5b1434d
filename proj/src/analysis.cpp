#include "moelens/analysis.hpp"

#include "moelens/errors.hpp"
#include "moelens/lens.hpp"
#include "moelens/report.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace moelens {

double uniform_baseline(int top_k, int n_experts) {
    if (n_experts < 1 || top_k < 1 || top_k > n_experts) {
        throw ParameterError("uniform baseline needs 1 <= k <= n, got k=" + std::to_string(top_k) +
                             ", n=" + std::to_string(n_experts));
    }
    return static_cast<double>(top_k) / static_cast<double>(n_experts);
}

DomainRouting collect_routing(const std::string& domain, std::span<const Trace> traces) {
    DomainRouting out;
    out.domain = domain;
    for (const Trace& tr : traces) {
        if (out.selections.size() < tr.layers.size()) out.selections.resize(tr.layers.size());
        for (std::size_t l = 0; l < tr.layers.size(); ++l) {
            for (const auto& tok : tr.layers[l].tokens) out.selections[l].push_back(tok.selected);
        }
    }
    return out;
}

SpecializationTable::SpecializationTable(int n_layers, int n_experts, int top_k, std::vector<std::string> domains)
    : n_layers_(n_layers), n_experts_(n_experts), top_k_(top_k), domains_(std::move(domains)) {
    if (n_layers < 1 || n_experts < 1 || top_k < 1 || top_k > n_experts) {
        throw ParameterError("specialization table needs n_layers >= 1 and 1 <= k <= n");
    }
    token_counts_.assign(domains_.size(), 0);
    fractions_.assign(static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(n_experts) * domains_.size(), 0.0);
}

std::size_t SpecializationTable::index(int layer, int expert, std::size_t domain) const {
    if (layer < 0 || layer >= n_layers_ || expert < 0 || expert >= n_experts_ || domain >= domains_.size()) {
        throw ParameterError("specialization table index out of range (layer " + std::to_string(layer) + ", expert " +
                             std::to_string(expert) + ", domain " + std::to_string(domain) + ")");
    }
    return (static_cast<std::size_t>(layer) * static_cast<std::size_t>(n_experts_) + static_cast<std::size_t>(expert)) *
               domains_.size() + domain;
}

std::size_t SpecializationTable::domain_index(const std::string& domain) const {
    auto it = std::find(domains_.begin(), domains_.end(), domain);
    if (it == domains_.end()) throw ParameterError("domain '" + domain + "' not in specialization table");
    return static_cast<std::size_t>(it - domains_.begin());
}

SpecializationTable expert_specialization(std::span<const DomainRouting> routing, int n_experts, int top_k) {
    if (routing.empty()) throw ParameterError("expert_specialization: no domains");
    const std::size_t layers = routing.front().selections.size();
    std::vector<std::string> names;
    for (const auto& r : routing) names.push_back(r.domain);
    SpecializationTable table(static_cast<int>(layers), n_experts, top_k, names);

    for (std::size_t d = 0; d < routing.size(); ++d) {
        const auto& sel = routing[d].selections;
        if (sel.size() != layers || sel.front().empty()) {
            throw ParameterError("domain '" + routing[d].domain + "' has no routed tokens");
        }
        const std::size_t tokens = sel.front().size();
        table.token_count(d) = tokens;
        for (std::size_t l = 0; l < layers; ++l) {
            if (sel[l].size() != tokens) throw ParameterError("domain '" + routing[d].domain + "': ragged layer token counts");
            std::vector<std::size_t> counts(static_cast<std::size_t>(n_experts), 0);
            for (const auto& chosen : sel[l]) {
                for (int id : chosen) {
                    if (id < 0 || id >= n_experts) throw ParameterError("expert id " + std::to_string(id) + " out of range");
                    ++counts[static_cast<std::size_t>(id)];
                }
            }
            for (int e = 0; e < n_experts; ++e) {
                table.fraction(static_cast<int>(l), e, d) =
                    static_cast<double>(counts[static_cast<std::size_t>(e)]) / static_cast<double>(tokens);
            }
        }
    }
    return table;
}

std::string specialization_csv(const SpecializationTable& table) {
    std::string out = "layer,expert,domain,fraction\n";
    for (int l = 0; l < table.n_layers(); ++l) {
        for (int e = 0; e < table.n_experts(); ++e) {
            for (std::size_t d = 0; d < table.domains().size(); ++d) {
                out += std::to_string(l) + "," + std::to_string(e) + "," + table.domains()[d] + "," +
                       format_exact(table.fraction(l, e, d)) + "\n";
            }
        }
    }
    return out;
}

SpecializationTable parse_specialization_csv(const std::string& text, int n_experts, int top_k) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "layer,expert,domain,fraction") {
        throw InputError("specialization table must start with header 'layer,expert,domain,fraction'");
    }
    struct Row {
        int layer, expert;
        std::string domain;
        double fraction;
    };
    std::vector<Row> rows;
    std::vector<std::string> domains;
    int max_layer = -1;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string f[4];
        for (auto& field : f) std::getline(ls, field, ',');
        try {
            Row r{std::stoi(f[0]), std::stoi(f[1]), f[2], std::stod(f[3])};
            if (r.domain.empty()) throw std::invalid_argument("empty domain");
            rows.push_back(r);
        } catch (const std::exception&) {
            throw InputError("malformed specialization row at line " + std::to_string(line_no) + ": '" + line + "'");
        }
        if (std::find(domains.begin(), domains.end(), rows.back().domain) == domains.end()) {
            domains.push_back(rows.back().domain);
        }
        max_layer = std::max(max_layer, rows.back().layer);
    }
    if (rows.empty()) throw InputError("specialization table has no rows");
    SpecializationTable table(max_layer + 1, n_experts, top_k, domains);
    for (const auto& r : rows) {
        if (r.layer < 0 || r.expert < 0 || r.expert >= n_experts) {
            throw ConsistencyError("specialization row (layer " + std::to_string(r.layer) + ", expert " +
                                   std::to_string(r.expert) + ") does not fit a model with " +
                                   std::to_string(n_experts) + " experts");
        }
        table.fraction(r.layer, r.expert, table.domain_index(r.domain)) = r.fraction;
    }
    return table;
}

std::string specialization_svg(const SpecializationTable& table, int layer, std::size_t domain) {
    BarChart chart;
    chart.title = "Expert specialization, layer " + std::to_string(layer) + ", domain " + table.domains().at(domain);
    chart.y_label = "routed %";
    double peak = table.uniform_baseline();
    for (int e = 0; e < table.n_experts(); ++e) {
        chart.labels.push_back(std::to_string(e));
        chart.values.push_back(table.fraction(layer, e, domain));
        peak = std::max(peak, chart.values.back());
    }
    chart.baseline = table.uniform_baseline();
    chart.y_max = std::min(1.0, std::ceil(peak * 10.0 + 1e-9) / 10.0);
    return bar_chart_svg(chart);
}

SimilarityProfile similarity_profile(std::span<const Trace> traces, const std::string& domain) {
    SimilarityProfile profile;
    profile.domain = domain;
    if (traces.empty()) return profile;
    const std::size_t layers = traces.front().layers.size();
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> values;
        for (const Trace& tr : traces) {
            for (std::size_t t = 0; t < tr.layers.at(l).tokens.size(); ++t) {
                const int k = static_cast<int>(tr.layers[l].tokens[t].selected.size());
                const auto top1 = restricted_hidden(tr, static_cast<int>(l), t, 1);
                const auto full = restricted_hidden(tr, static_cast<int>(l), t, k);
                values.push_back(cosine(top1.vector, full.vector));
            }
        }
        double mean = 0.0, var = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(std::max<std::size_t>(values.size(), 1));
        for (double v : values) var += (v - mean) * (v - mean);
        var /= static_cast<double>(std::max<std::size_t>(values.size(), 1));
        profile.mean.push_back(mean);
        profile.stddev.push_back(std::sqrt(var));
    }
    return profile;
}

std::string similarity_csv(std::span<const SimilarityProfile> profiles) {
    std::string out = "layer,domain,mean_cos,std_cos\n";
    for (const auto& p : profiles) {
        for (std::size_t l = 0; l < p.mean.size(); ++l) {
            out += std::to_string(l) + "," + p.domain + "," + format_exact(p.mean[l]) + "," + format_exact(p.stddev[l]) + "\n";
        }
    }
    return out;
}

double perplexity(const Checkpoint& checkpoint, std::span<const int> tokens, std::optional<int> k_override) {
    if (tokens.size() < 2) throw InputError("perplexity needs at least two tokens");
    const auto window = static_cast<std::size_t>(checkpoint.config.max_seq_len);
    double nll = 0.0;
    std::size_t predicted = 0;
    for (std::size_t start = 0; start + 1 < tokens.size(); start += window) {
        const std::size_t len = std::min(window, tokens.size() - start);
        if (len < 2) break;
        const auto chunk = tokens.subspan(start, len);
        const Tensor logits = model_forward(chunk, checkpoint, false, k_override).logits;
        for (std::size_t t = 0; t + 1 < len; ++t) {
            auto row = logits.row(t);
            const double mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
            nll += mx + std::log(sum) - static_cast<double>(row[static_cast<std::size_t>(chunk[t + 1])]);
            ++predicted;
        }
    }
    return std::exp(nll / static_cast<double>(predicted));
}

std::vector<PerplexityCurve> perplexity_vs_k(const Checkpoint& checkpoint, std::span<const DomainCorpus> corpora,
                                             int k_prime_min) {
    const int k = checkpoint.config.top_k;
    if (k_prime_min < 1 || k_prime_min > k) throw ParameterError("k_prime_min outside [1, top_k]");
    std::vector<PerplexityCurve> curves;
    for (const auto& corpus : corpora) {
        PerplexityCurve curve;
        curve.domain = corpus.domain_id;
        for (int kp = k_prime_min; kp <= k; ++kp) {
            curve.k_prime.push_back(kp);
            curve.ppx.push_back(perplexity(checkpoint, corpus.tokens, kp));
        }
        const double anchor = std::log(curve.ppx.back());
        for (std::size_t i = 0; i < curve.ppx.size(); ++i) {
            const bool at_anchor = curve.k_prime[i] == k;
            curve.norm_log_ppx.push_back(at_anchor ? 1.0 : std::log(curve.ppx[i]) / anchor);
        }
        curves.push_back(std::move(curve));
    }
    return curves;
}

std::string perplexity_csv(std::span<const PerplexityCurve> curves) {
    std::string out = "domain,k_prime,ppx,norm_log_ppx\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.k_prime.size(); ++i) {
            out += c.domain + "," + std::to_string(c.k_prime[i]) + "," + format_exact(c.ppx[i]) + "," +
                   format_exact(c.norm_log_ppx[i]) + "\n";
        }
    }
    return out;
}

std::string perplexity_svg(std::span<const PerplexityCurve> curves) {
    LineChart chart;
    chart.title = "Normalized log perplexity vs active experts";
    chart.x_label = "top-k' experts";
    chart.y_label = "ln ppx(k') / ln ppx(k)";
    for (const auto& c : curves) {
        LineSeries s;
        s.name = c.domain;
        for (std::size_t i = 0; i < c.k_prime.size(); ++i) {
            s.x.push_back(c.k_prime[i]);
            s.y.push_back(c.norm_log_ppx[i]);
        }
        chart.series.push_back(std::move(s));
    }
    return line_chart_svg(chart);
}

std::vector<int> prune_plan(const SpecializationTable& table, int layer, std::size_t domain, double threshold) {
    if (!(threshold >= 0.0)) throw ParameterError("prune threshold must be non-negative");
    const int n = table.n_experts();
    const double cutoff = threshold * table.uniform_baseline();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return table.fraction(layer, a, domain) > table.fraction(layer, b, domain);
    });
    std::vector<int> keep;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const bool passes = table.fraction(layer, order[i], domain) >= cutoff;
        if (passes || static_cast<int>(i) < table.top_k()) keep.push_back(order[i]);
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

std::vector<std::vector<int>> prune_plan_all_domains(const SpecializationTable& table, double threshold) {
    std::vector<std::vector<int>> out;
    for (int l = 0; l < table.n_layers(); ++l) {
        std::set<int> keep;
        for (std::size_t d = 0; d < table.domains().size(); ++d) {
            for (int e : prune_plan(table, l, d, threshold)) keep.insert(e);
        }
        out.emplace_back(keep.begin(), keep.end());
    }
    return out;
}

Checkpoint prune_experts(const Checkpoint& checkpoint, const std::vector<std::vector<int>>& keep_sets) {
    const ModelConfig& cfg = checkpoint.config;
    if (keep_sets.size() != checkpoint.layers.size()) {
        throw ParameterError("prune_experts: " + std::to_string(keep_sets.size()) + " keep-sets for " +
                             std::to_string(checkpoint.layers.size()) + " layers");
    }
    Checkpoint out = checkpoint;
    for (std::size_t l = 0; l < keep_sets.size(); ++l) {
        std::vector<int> keep = keep_sets[l];
        std::sort(keep.begin(), keep.end());
        keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
        if (static_cast<int>(keep.size()) < cfg.top_k) {
            throw ParameterError("keep-set for layer " + std::to_string(l) + " has " + std::to_string(keep.size()) +
                                 " experts, fewer than top_k=" + std::to_string(cfg.top_k));
        }
        const LayerWeights& src = checkpoint.layers[l];
        LayerWeights& dst = out.layers[l];
        dst.expert_ids.clear();
        dst.experts.clear();
        for (int id : keep) {
            if (id < 0 || id >= cfg.n_routed_experts) {
                throw ParameterError("keep-set for layer " + std::to_string(l) + " names expert " + std::to_string(id) +
                                     " outside [0, " + std::to_string(cfg.n_routed_experts) + ")");
            }
            dst.expert_ids.push_back(id);
            dst.experts.push_back(src.expert(id));
        }
    }
    return out;
}

}  // namespace moelens
