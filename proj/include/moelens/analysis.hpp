#pragma once

#include "moelens/corpus.hpp"
#include "moelens/model.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moelens {

/// k / n: the share every expert would get under uniform routing.
double uniform_baseline(int top_k, int n_experts);

/// Top-k selections of one domain's tokens: selections[layer][token].
struct DomainRouting {
    std::string domain;
    std::vector<std::vector<std::vector<int>>> selections;
};

DomainRouting collect_routing(const std::string& domain, std::span<const Trace> traces);

class SpecializationTable {
public:
    SpecializationTable(int n_layers, int n_experts, int top_k, std::vector<std::string> domains);

    int n_layers() const { return n_layers_; }
    int n_experts() const { return n_experts_; }
    int top_k() const { return top_k_; }
    const std::vector<std::string>& domains() const { return domains_; }
    double uniform_baseline() const { return moelens::uniform_baseline(top_k_, n_experts_); }

    double fraction(int layer, int expert, std::size_t domain) const { return fractions_[index(layer, expert, domain)]; }
    double& fraction(int layer, int expert, std::size_t domain) { return fractions_[index(layer, expert, domain)]; }
    std::size_t token_count(std::size_t domain) const { return token_counts_.at(domain); }
    std::size_t& token_count(std::size_t domain) { return token_counts_.at(domain); }
    std::size_t domain_index(const std::string& domain) const;

private:
    std::size_t index(int layer, int expert, std::size_t domain) const;

    int n_layers_, n_experts_, top_k_;
    std::vector<std::string> domains_;
    std::vector<std::size_t> token_counts_;
    std::vector<double> fractions_;  // [layer][expert][domain]
};

/// Fraction of each domain's tokens that have an expert in their top-k, per
/// layer. Throws ParameterError for a domain with no tokens.
SpecializationTable expert_specialization(std::span<const DomainRouting> routing, int n_experts, int top_k);

std::string specialization_csv(const SpecializationTable& table);
/// Parses `layer,expert,domain,fraction`; n and k come from the model.
SpecializationTable parse_specialization_csv(const std::string& text, int n_experts, int top_k);
std::string specialization_svg(const SpecializationTable& table, int layer, std::size_t domain);

struct SimilarityProfile {
    std::string domain;
    std::vector<double> mean;  // per layer
    std::vector<double> stddev;
};

/// Per layer, mean and population std over tokens of cos(H^{l,1}, H^{l,k}).
SimilarityProfile similarity_profile(std::span<const Trace> traces, const std::string& domain);

std::string similarity_csv(std::span<const SimilarityProfile> profiles);

/// exp(mean NLL of next-token prediction) with k_override at every MoE layer.
/// Sequences longer than max_seq_len are scored in consecutive windows.
double perplexity(const Checkpoint& checkpoint, std::span<const int> tokens, std::optional<int> k_override);

struct PerplexityCurve {
    std::string domain;
    std::vector<int> k_prime;
    std::vector<double> ppx;
    std::vector<double> norm_log_ppx;  // ln ppx(k') / ln ppx(k)
};

/// Curves over k' = k_prime_min..k; normalization always uses ppx at k.
std::vector<PerplexityCurve> perplexity_vs_k(const Checkpoint& checkpoint, std::span<const DomainCorpus> corpora,
                                             int k_prime_min = 1);

std::string perplexity_csv(std::span<const PerplexityCurve> curves);
std::string perplexity_svg(std::span<const PerplexityCurve> curves);

/// Experts whose fraction is at least threshold * k/n, padded with the next
/// highest-fraction experts until at least k remain. Ascending indices.
std::vector<int> prune_plan(const SpecializationTable& table, int layer, std::size_t domain, double threshold);

/// Union of prune_plan over every domain of the table, per layer.
std::vector<std::vector<int>> prune_plan_all_domains(const SpecializationTable& table, double threshold);

/// Drops routed experts outside each layer's keep-set. Removed experts can no
/// longer be selected; see ModelConfig::prune_renormalize for how the router
/// distribution is treated.
Checkpoint prune_experts(const Checkpoint& checkpoint, const std::vector<std::vector<int>>& keep_sets);

}  // namespace moelens
