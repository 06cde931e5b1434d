#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace moelens {

/// Byte-token sequence for one synthetic domain.
struct DomainCorpus {
    std::string domain_id;
    std::vector<int> tokens;
    std::string grammar;  // generator id
    std::uint64_t seed = 0;
};

/// Domains synth_corpus knows: "A" lowercase Markov text, "B" arithmetic
/// equations, "C" bracket-nested code-like statements.
const std::vector<std::string>& known_domains();

/// Bytes a domain may emit, ascending.
std::string domain_alphabet(const std::string& domain_id);

/// Deterministic per (domain_id, seed). Throws ParameterError for an unknown
/// domain or zero length.
DomainCorpus synth_corpus(const std::string& domain_id, std::size_t length, std::uint64_t seed);

/// Corpus files hold raw bytes and are named <domain_id>.bytes.
std::filesystem::path corpus_path(const std::filesystem::path& dir, const std::string& domain_id);
void write_corpus(const DomainCorpus& corpus, const std::filesystem::path& dir);
DomainCorpus read_corpus(const std::filesystem::path& dir, const std::string& domain_id);

}  // namespace moelens
