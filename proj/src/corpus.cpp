#include "moelens/corpus.hpp"

#include "moelens/errors.hpp"
#include "moelens/tensor.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iterator>

namespace moelens {

namespace {

constexpr std::string_view kLetters = " abcdefghijklmnopqrstuvwxyz";
constexpr std::string_view kArithmetic = "*+-0123456789;=";
constexpr std::string_view kCode = "(),;ABCDEFGHIJKLMNOPQRSTUVWXYZ[]{}";

// Seeds the letter chain's transition table; independent of the sampling seed.
constexpr std::uint64_t kMarkovGrammarSeed = 0x4d41524b4f56ULL;

struct MarkovTable {
    // successors[state] lists (symbol, cumulative weight) pairs.
    std::array<std::vector<std::pair<char, double>>, 27> successors;
};

const MarkovTable& markov_table() {
    static const MarkovTable table = [] {
        MarkovTable t;
        Prng rng(kMarkovGrammarSeed);
        for (std::size_t s = 0; s < kLetters.size(); ++s) {
            const bool from_space = s == 0;
            const int fanout = from_space ? 8 : 4;
            std::vector<char> picks;
            while (static_cast<int>(picks.size()) < fanout) {
                // Letters avoid long space runs; after a letter, space is one option.
                const char c = kLetters[1 + rng.below(26)];
                if (std::find(picks.begin(), picks.end(), c) == picks.end()) picks.push_back(c);
            }
            if (!from_space) picks.push_back(' ');
            double cum = 0.0;
            for (std::size_t i = 0; i < picks.size(); ++i) {
                cum += 1.0 / static_cast<double>(i + 1);
                t.successors[s].push_back({picks[i], cum});
            }
        }
        return t;
    }();
    return table;
}

void gen_markov(Prng& rng, std::size_t length, std::string& out) {
    const auto& table = markov_table();
    std::size_t state = 0;
    while (out.size() < length) {
        const auto& row = table.successors[state];
        const double r = rng.uniform() * row.back().second;
        auto it = std::find_if(row.begin(), row.end(), [&](const auto& p) { return r < p.second; });
        const char c = it == row.end() ? row.back().first : it->first;
        out.push_back(c);
        state = static_cast<std::size_t>(kLetters.find(c));
    }
}

void gen_arithmetic(Prng& rng, std::size_t length, std::string& out) {
    static constexpr std::array<char, 3> ops{'+', '-', '*'};
    while (out.size() < length) {
        const long a = static_cast<long>(rng.below(100));
        const long b = static_cast<long>(rng.below(100));
        const char op = ops[rng.below(ops.size())];
        const long c = op == '+' ? a + b : op == '-' ? a - b : a * b;
        out += std::to_string(a) + op + std::to_string(b) + '=' + std::to_string(c) + ';';
    }
}

void gen_code_expr(Prng& rng, int depth, std::string& out) {
    out.push_back(static_cast<char>('A' + rng.below(26)));
    if (depth <= 0) return;
    switch (rng.below(4)) {
        case 0:
            break;
        case 1: {
            out.push_back('(');
            const auto args = 1 + rng.below(3);
            for (std::uint64_t i = 0; i < args; ++i) {
                if (i) out.push_back(',');
                gen_code_expr(rng, depth - 1, out);
            }
            out.push_back(')');
            break;
        }
        case 2:
            out.push_back('[');
            gen_code_expr(rng, depth - 1, out);
            out.push_back(']');
            break;
        default: {
            out.push_back('{');
            const auto stmts = 1 + rng.below(2);
            for (std::uint64_t i = 0; i < stmts; ++i) {
                gen_code_expr(rng, depth - 1, out);
                out.push_back(';');
            }
            out.push_back('}');
            break;
        }
    }
}

void gen_code(Prng& rng, std::size_t length, std::string& out) {
    while (out.size() < length) {
        gen_code_expr(rng, 3, out);
        out.push_back(';');
    }
}

std::size_t domain_index(const std::string& id) {
    const auto& domains = known_domains();
    auto it = std::find(domains.begin(), domains.end(), id);
    if (it == domains.end()) throw ParameterError("unknown domain id '" + id + "'");
    return static_cast<std::size_t>(it - domains.begin());
}

}  // namespace

const std::vector<std::string>& known_domains() {
    static const std::vector<std::string> domains{"A", "B", "C"};
    return domains;
}

std::string domain_alphabet(const std::string& domain_id) {
    switch (domain_index(domain_id)) {
        case 0: return std::string(kLetters);
        case 1: return std::string(kArithmetic);
        default: return std::string(kCode);
    }
}

DomainCorpus synth_corpus(const std::string& domain_id, std::size_t length, std::uint64_t seed) {
    const std::size_t index = domain_index(domain_id);
    if (length == 0) throw ParameterError("synth_corpus: length must be positive");
    // Distinct streams per domain for the same user seed.
    Prng rng(seed * 0x9E3779B97F4A7C15ULL + index + 1);
    std::string text;
    text.reserve(length + 64);
    DomainCorpus corpus;
    corpus.domain_id = domain_id;
    corpus.seed = seed;
    switch (index) {
        case 0:
            gen_markov(rng, length, text);
            corpus.grammar = "letters-markov";
            break;
        case 1:
            gen_arithmetic(rng, length, text);
            corpus.grammar = "arithmetic";
            break;
        default:
            gen_code(rng, length, text);
            corpus.grammar = "bracket-code";
            break;
    }
    text.resize(length);
    corpus.tokens.reserve(length);
    for (unsigned char c : text) corpus.tokens.push_back(c);
    return corpus;
}

std::filesystem::path corpus_path(const std::filesystem::path& dir, const std::string& domain_id) {
    return dir / (domain_id + ".bytes");
}

void write_corpus(const DomainCorpus& corpus, const std::filesystem::path& dir) {
    const auto path = corpus_path(dir, corpus.domain_id);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    for (int t : corpus.tokens) out.put(static_cast<char>(static_cast<unsigned char>(t)));
    if (!out) throw InputError("failed writing '" + path.string() + "'");
}

DomainCorpus read_corpus(const std::filesystem::path& dir, const std::string& domain_id) {
    const auto path = corpus_path(dir, domain_id);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read corpus file '" + path.string() + "'");
    DomainCorpus corpus;
    corpus.domain_id = domain_id;
    corpus.grammar = "file";
    for (auto it = std::istreambuf_iterator<char>(in); it != std::istreambuf_iterator<char>(); ++it) {
        corpus.tokens.push_back(static_cast<unsigned char>(*it));
    }
    if (corpus.tokens.empty()) throw InputError("corpus file '" + path.string() + "' is empty");
    return corpus;
}

}  // namespace moelens
