#include "moelens/model.hpp"

#include "moelens/errors.hpp"

#include <algorithm>
#include <cmath>

namespace moelens {

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ParameterError("invalid model config: " + what);
    };
    require(vocab_size >= 1, "vocab_size must be positive");
    require(d_model >= 1, "d_model must be positive");
    require(n_layers >= 1, "n_layers must be positive");
    require(n_heads >= 1, "n_heads must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(d_expert_hidden >= 1, "d_expert_hidden must be positive");
    require(n_routed_experts >= 1, "n_routed_experts must be positive");
    require(n_shared_experts >= 0, "n_shared_experts must be non-negative");
    require(top_k >= 1 && top_k <= n_routed_experts, "top_k must lie in [1, n_routed_experts]");
    require(max_seq_len >= 1, "max_seq_len must be positive");
}

const ExpertWeights& LayerWeights::expert(int id) const {
    auto it = std::lower_bound(expert_ids.begin(), expert_ids.end(), id);
    if (it == expert_ids.end() || *it != id) {
        throw ParameterError("routed expert " + std::to_string(id) + " is not present (pruned)");
    }
    return experts[static_cast<std::size_t>(it - expert_ids.begin())];
}

namespace {

Tensor random_tensor(Prng& rng, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (float& v : t.data()) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

ExpertWeights random_expert(Prng& rng, const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto hidden = static_cast<std::size_t>(c.d_expert_hidden);
    ExpertWeights e;
    e.w_in = random_tensor(rng, {d, hidden}, 1.0 / std::sqrt(double(d)));
    e.w_out = random_tensor(rng, {hidden, d}, 1.0 / std::sqrt(double(hidden) * 2.0 * c.n_layers));
    return e;
}

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

}  // namespace

Checkpoint init_checkpoint(const ModelConfig& config) {
    config.validate();
    Prng rng(config.seed);
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto vocab = static_cast<std::size_t>(config.vocab_size);
    const double attn_std = 1.0 / std::sqrt(double(d));

    Checkpoint ck;
    ck.config = config;
    ck.token_embedding = random_tensor(rng, {vocab, d}, 0.5);
    ck.position_embedding = random_tensor(rng, {static_cast<std::size_t>(config.max_seq_len), d}, 0.1);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights layer;
        layer.attn_gain = Tensor::filled({d}, 1.0f);
        layer.attention.wq = random_tensor(rng, {d, d}, attn_std);
        layer.attention.wk = random_tensor(rng, {d, d}, attn_std);
        layer.attention.wv = random_tensor(rng, {d, d}, attn_std);
        layer.attention.wo = random_tensor(rng, {d, d}, attn_std / std::sqrt(2.0 * config.n_layers));
        layer.moe_gain = Tensor::filled({d}, 1.0f);
        layer.router.w_route =
            random_tensor(rng, {d, static_cast<std::size_t>(config.n_routed_experts)}, attn_std);
        for (int e = 0; e < config.n_routed_experts; ++e) {
            layer.expert_ids.push_back(e);
            layer.experts.push_back(random_expert(rng, config));
        }
        for (int s = 0; s < config.n_shared_experts; ++s) layer.shared.push_back(random_expert(rng, config));
        ck.layers.push_back(std::move(layer));
    }
    ck.final_gain = Tensor::filled({d}, 1.0f);
    ck.unembedding = random_tensor(rng, {d, vocab}, attn_std);
    return ck;
}

namespace {

template <typename Ck, typename Out>
void collect_directory(Ck& ck, Out& out) {
    out.push_back({"token_embedding", &ck.token_embedding});
    out.push_back({"position_embedding", &ck.position_embedding});
    for (std::size_t l = 0; l < ck.layers.size(); ++l) {
        auto& layer = ck.layers[l];
        const std::string p = layer_prefix(l);
        out.push_back({p + "attn_gain", &layer.attn_gain});
        out.push_back({p + "attn.wq", &layer.attention.wq});
        out.push_back({p + "attn.wk", &layer.attention.wk});
        out.push_back({p + "attn.wv", &layer.attention.wv});
        out.push_back({p + "attn.wo", &layer.attention.wo});
        out.push_back({p + "moe_gain", &layer.moe_gain});
        out.push_back({p + "router.w_route", &layer.router.w_route});
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
            const std::string e = p + "experts." + std::to_string(layer.expert_ids[i]) + ".";
            out.push_back({e + "w_in", &layer.experts[i].w_in});
            out.push_back({e + "w_out", &layer.experts[i].w_out});
        }
        for (std::size_t s = 0; s < layer.shared.size(); ++s) {
            const std::string e = p + "shared." + std::to_string(s) + ".";
            out.push_back({e + "w_in", &layer.shared[s].w_in});
            out.push_back({e + "w_out", &layer.shared[s].w_out});
        }
    }
    out.push_back({"final_gain", &ck.final_gain});
    out.push_back({"unembedding", &ck.unembedding});
}

}  // namespace

std::vector<NamedTensor> tensor_directory(Checkpoint& checkpoint) {
    std::vector<NamedTensor> out;
    collect_directory(checkpoint, out);
    return out;
}

std::vector<NamedConstTensor> tensor_directory(const Checkpoint& checkpoint) {
    std::vector<NamedConstTensor> out;
    collect_directory(checkpoint, out);
    return out;
}

std::vector<TensorSpec> expected_tensors(const ModelConfig& c, const std::vector<std::vector<int>>& expert_ids) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto vocab = static_cast<std::size_t>(c.vocab_size);
    const auto hidden = static_cast<std::size_t>(c.d_expert_hidden);
    std::vector<TensorSpec> out;
    out.push_back({"token_embedding", {vocab, d}});
    out.push_back({"position_embedding", {static_cast<std::size_t>(c.max_seq_len), d}});
    for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
        const std::string p = layer_prefix(l);
        out.push_back({p + "attn_gain", {d}});
        for (const char* w : {"wq", "wk", "wv", "wo"}) out.push_back({p + "attn." + w, {d, d}});
        out.push_back({p + "moe_gain", {d}});
        out.push_back({p + "router.w_route", {d, static_cast<std::size_t>(c.n_routed_experts)}});
        for (int id : expert_ids.at(l)) {
            const std::string e = p + "experts." + std::to_string(id) + ".";
            out.push_back({e + "w_in", {d, hidden}});
            out.push_back({e + "w_out", {hidden, d}});
        }
        for (int s = 0; s < c.n_shared_experts; ++s) {
            const std::string e = p + "shared." + std::to_string(s) + ".";
            out.push_back({e + "w_in", {d, hidden}});
            out.push_back({e + "w_out", {hidden, d}});
        }
    }
    out.push_back({"final_gain", {d}});
    out.push_back({"unembedding", {d, vocab}});
    return out;
}

namespace {

Tensor as_row(const Tensor& x) { return Tensor({1, x.size()}, std::vector<float>(x.data().begin(), x.data().end())); }

Tensor flatten(Tensor&& m) {
    auto data = m.data();
    return Tensor({data.size()}, std::vector<float>(data.begin(), data.end()));
}

}  // namespace

Tensor expert_forward(const ExpertWeights& expert, const Tensor& x) {
    Tensor hidden = matmul(as_row(x), expert.w_in);
    for (float& v : hidden.data()) {
        const double z = v;
        v = static_cast<float>(z / (1.0 + std::exp(-z)));
    }
    return flatten(matmul(hidden, expert.w_out));
}

Tensor route(const Tensor& x, const RouterWeights& router, std::span<const int> kept_experts, bool renormalize) {
    Tensor logits = flatten(matmul(as_row(x), router.w_route));
    const std::size_t n = logits.size();
    if (kept_experts.empty() || !renormalize || kept_experts.size() == n) return softmax_rows(logits);

    Tensor compact({kept_experts.size()});
    for (std::size_t i = 0; i < kept_experts.size(); ++i) compact[i] = logits[static_cast<std::size_t>(kept_experts[i])];
    Tensor compact_probs = softmax_rows(compact);
    Tensor probs({n});
    for (std::size_t i = 0; i < kept_experts.size(); ++i) probs[static_cast<std::size_t>(kept_experts[i])] = compact_probs[i];
    return probs;
}

Tensor combine_hidden(const Tensor& u, std::span<const float> gates, std::span<const Tensor> outputs,
                      std::size_t count, const Tensor* shared) {
    if (count > gates.size() || count > outputs.size()) {
        throw ParameterError("combine_hidden: count " + std::to_string(count) + " exceeds available experts");
    }
    Tensor h(u.shape());
    for (std::size_t c = 0; c < u.size(); ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < count; ++j) acc += static_cast<double>(gates[j]) * outputs[j][c];
        if (shared) acc += (*shared)[c];
        acc += u[c];
        h[c] = static_cast<float>(acc);
    }
    return h;
}

MoeLayerResult moe_layer_forward(const Tensor& u, const LayerWeights& layer, const ModelConfig& config,
                                 std::optional<int> k_override) {
    const int k = config.top_k;
    const int active = k_override.value_or(k);
    if (active < 1 || active > k) {
        throw ParameterError("k_override=" + std::to_string(active) + " outside [1, " + std::to_string(k) + "]");
    }
    const Tensor normed = rms_layer_norm(u, layer.moe_gain);
    const bool pruned = layer.is_pruned(config.n_routed_experts);

    TokenTrace tr;
    tr.u = u;
    tr.probs = route(normed, layer.router, pruned ? std::span<const int>(layer.expert_ids) : std::span<const int>{},
                     config.prune_renormalize);

    if (pruned) {
        Tensor compact({layer.expert_ids.size()});
        for (std::size_t i = 0; i < layer.expert_ids.size(); ++i) {
            compact[i] = tr.probs[static_cast<std::size_t>(layer.expert_ids[i])];
        }
        for (std::size_t i : top_k_indices(compact, static_cast<std::size_t>(k))) tr.selected.push_back(layer.expert_ids[i]);
    } else {
        for (std::size_t i : top_k_indices(tr.probs, static_cast<std::size_t>(k))) tr.selected.push_back(static_cast<int>(i));
    }

    double gate_sum = 0.0;
    for (int id : tr.selected) gate_sum += tr.probs[static_cast<std::size_t>(id)];
    for (int id : tr.selected) {
        const float p = tr.probs[static_cast<std::size_t>(id)];
        tr.gates.push_back(config.renormalize_gates ? static_cast<float>(p / gate_sum) : p);
        tr.expert_outputs.push_back(expert_forward(layer.expert(id), normed));
    }

    tr.shared_output = Tensor(u.shape());
    if (!layer.shared.empty()) {
        std::vector<double> acc(u.size(), 0.0);
        for (const auto& s : layer.shared) {
            Tensor out = expert_forward(s, normed);
            for (std::size_t c = 0; c < u.size(); ++c) acc[c] += out[c];
        }
        for (std::size_t c = 0; c < u.size(); ++c) tr.shared_output[c] = static_cast<float>(acc[c]);
    }

    tr.h = combine_hidden(u, tr.gates, tr.expert_outputs, static_cast<std::size_t>(active), &tr.shared_output);
    MoeLayerResult result{tr.h, std::move(tr)};
    return result;
}

namespace {

/// Causal multi-head self-attention over normalized rows `a` (T x d).
Tensor causal_attention(const Tensor& a, const AttentionWeights& w, int n_heads) {
    const std::size_t T = a.dim(0), d = a.dim(1);
    const std::size_t hd = d / static_cast<std::size_t>(n_heads);
    const Tensor q = matmul(a, w.wq);
    const Tensor k = matmul(a, w.wk);
    const Tensor v = matmul(a, w.wv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor ctx({T, d});
    std::vector<double> p(T);
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
        const std::size_t off = h * hd;
        for (std::size_t t = 0; t < T; ++t) {
            double mx = -INFINITY;
            for (std::size_t s = 0; s <= t; ++s) {
                double dot = 0.0;
                for (std::size_t c = 0; c < hd; ++c) dot += static_cast<double>(q.at(t, off + c)) * k.at(s, off + c);
                p[s] = dot * scale;
                mx = std::max(mx, p[s]);
            }
            double total = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                p[s] = std::exp(p[s] - mx);
                total += p[s];
            }
            for (std::size_t c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (std::size_t s = 0; s <= t; ++s) acc += (p[s] / total) * v.at(s, off + c);
                ctx.at(t, off + c) = static_cast<float>(acc);
            }
        }
    }
    return matmul(ctx, w.wo);
}

Tensor normalize_rows(const Tensor& x, const Tensor& gain) {
    Tensor out(x.shape());
    for (std::size_t t = 0; t < x.dim(0); ++t) {
        Tensor r = rms_layer_norm(x.row_tensor(t), gain);
        std::copy(r.data().begin(), r.data().end(), out.row(t).begin());
    }
    return out;
}

}  // namespace

ForwardResult model_forward(std::span<const int> tokens, const Checkpoint& checkpoint, bool trace,
                            std::optional<int> k_override) {
    const ModelConfig& cfg = checkpoint.config;
    if (tokens.empty()) throw InputError("model_forward: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
        throw InputError("model_forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    }
    for (int id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw InputError("model_forward: token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(cfg.vocab_size));
        }
    }
    if (k_override && (*k_override < 1 || *k_override > cfg.top_k)) {
        throw ParameterError("k_override=" + std::to_string(*k_override) + " outside [1, " + std::to_string(cfg.top_k) + "]");
    }

    const std::size_t T = tokens.size();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    Tensor x({T, d});
    for (std::size_t t = 0; t < T; ++t) {
        auto tok = checkpoint.token_embedding.row(static_cast<std::size_t>(tokens[t]));
        auto pos = checkpoint.position_embedding.row(t);
        auto dst = x.row(t);
        for (std::size_t c = 0; c < d; ++c) dst[c] = tok[c] + pos[c];
    }

    ForwardResult result;
    if (trace) {
        result.trace.emplace();
        result.trace->tokens.assign(tokens.begin(), tokens.end());
    }

    for (const LayerWeights& layer : checkpoint.layers) {
        const Tensor attn = causal_attention(normalize_rows(x, layer.attn_gain), layer.attention, cfg.n_heads);
        LayerTrace lt;
        for (std::size_t t = 0; t < T; ++t) {
            Tensor u({d});
            for (std::size_t c = 0; c < d; ++c) u[c] = x.at(t, c) + attn.at(t, c);
            MoeLayerResult r = moe_layer_forward(u, layer, cfg, k_override);
            std::copy(r.h.data().begin(), r.h.data().end(), x.row(t).begin());
            if (trace) lt.tokens.push_back(std::move(r.trace));
        }
        if (trace) result.trace->layers.push_back(std::move(lt));
    }

    result.logits = matmul(normalize_rows(x, checkpoint.final_gain), checkpoint.unembedding);
    return result;
}

}  // namespace moelens
