#include "moelens/trainer.hpp"

#include "moelens/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace moelens {

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ParameterError("invalid train config: " + what);
    };
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(steps >= 0, "steps must be non-negative");
    require(batch_size >= 1, "batch_size must be positive");
    require(seq_len >= 1, "seq_len must be positive");
    require(balance_coeff >= 0.0, "balance_coeff must be non-negative");
}

double cross_entropy_loss(const Tensor& logits, std::span<const int> targets) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
        throw DimensionError("cross_entropy_loss: logits " + shape_string(logits.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    }
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        auto row = logits.row(t);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        total += mx + std::log(sum) - static_cast<double>(row[static_cast<std::size_t>(targets[t])]);
    }
    return total / static_cast<double>(targets.size());
}

RoutingStats routing_stats(const LayerTrace& layer, int n_experts, int top_k) {
    RoutingStats stats;
    stats.n_experts = n_experts;
    stats.top_k = top_k;
    for (const auto& tok : layer.tokens) {
        stats.probs.emplace_back(tok.probs.data().begin(), tok.probs.data().end());
        stats.selected.push_back(tok.selected);
    }
    return stats;
}

double balance_loss(const RoutingStats& stats) {
    const std::size_t tokens = stats.selected.size();
    if (tokens == 0) throw ParameterError("balance_loss needs at least one routed token");
    const auto n = static_cast<std::size_t>(stats.n_experts);
    std::vector<double> count(n, 0.0), mass(n, 0.0);
    for (std::size_t t = 0; t < tokens; ++t) {
        for (int id : stats.selected[t]) count[static_cast<std::size_t>(id)] += 1.0;
        for (std::size_t i = 0; i < n; ++i) mass[i] += stats.probs[t][i];
    }
    double total = 0.0;
    const double norm_f = static_cast<double>(tokens) * stats.top_k;
    for (std::size_t i = 0; i < n; ++i) total += (count[i] / norm_f) * (mass[i] / static_cast<double>(tokens));
    return static_cast<double>(n) * total;
}

std::vector<Sequence> sample_batch(std::span<const DomainCorpus> corpora, const TrainConfig& config, int step,
                                   Prng& rng) {
    if (corpora.empty()) throw ParameterError("sample_batch: no corpora");
    const auto window = static_cast<std::size_t>(config.seq_len) + 1;
    std::vector<Sequence> batch;
    for (int b = 0; b < config.batch_size; ++b) {
        const auto& corpus =
            corpora[static_cast<std::size_t>(step * config.batch_size + b) % corpora.size()];
        if (corpus.tokens.size() < window) {
            throw ParameterError("corpus '" + corpus.domain_id + "' has " + std::to_string(corpus.tokens.size()) +
                                 " tokens, fewer than seq_len + 1");
        }
        const auto start = static_cast<std::size_t>(rng.below(corpus.tokens.size() - window + 1));
        Sequence seq;
        seq.inputs.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                          corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start + window - 1));
        seq.targets.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start + 1),
                           corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start + window));
        batch.push_back(std::move(seq));
    }
    return batch;
}

std::vector<double> flatten_parameters(const Checkpoint& checkpoint) {
    std::vector<double> out;
    for (const auto& nt : tensor_directory(checkpoint)) {
        for (float v : nt.tensor->data()) out.push_back(v);
    }
    return out;
}

void assign_parameters(Checkpoint& checkpoint, std::span<const double> params) {
    std::size_t pos = 0;
    for (auto& nt : tensor_directory(checkpoint)) {
        for (float& v : nt.tensor->data()) v = static_cast<float>(params[pos++]);
    }
    if (pos != params.size()) throw DimensionError("assign_parameters: parameter count mismatch");
}

namespace {

// Y[T x out] = X[T x in] * W[in x out]
void rows_times(const double* x, std::size_t rows, std::size_t in, const double* w, std::size_t out, double* y) {
    for (std::size_t t = 0; t < rows; ++t) {
        double* yr = y + t * out;
        std::fill(yr, yr + out, 0.0);
        const double* xr = x + t * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = xr[i];
            const double* wr = w + i * out;
            for (std::size_t j = 0; j < out; ++j) yr[j] += xv * wr[j];
        }
    }
}

// dW[in x out] += X^T dY
void accumulate_weight_grad(const double* x, const double* dy, std::size_t rows, std::size_t in, std::size_t out,
                            double* dw) {
    for (std::size_t t = 0; t < rows; ++t) {
        const double* xr = x + t * in;
        const double* dyr = dy + t * out;
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = xr[i];
            if (xv == 0.0) continue;
            double* dwr = dw + i * out;
            for (std::size_t j = 0; j < out; ++j) dwr[j] += xv * dyr[j];
        }
    }
}

// dX[T x in] += dY W^T
void accumulate_input_grad(const double* dy, const double* w, std::size_t rows, std::size_t in, std::size_t out,
                           double* dx) {
    for (std::size_t t = 0; t < rows; ++t) {
        const double* dyr = dy + t * out;
        double* dxr = dx + t * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double* wr = w + i * out;
            double acc = 0.0;
            for (std::size_t j = 0; j < out; ++j) acc += dyr[j] * wr[j];
            dxr[i] += acc;
        }
    }
}

double rms_forward(const double* x, const double* gain, std::size_t d, double* y) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += x[c] * x[c];
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) + kRmsEpsilon);
    for (std::size_t c = 0; c < d; ++c) y[c] = x[c] * inv * gain[c];
    return inv;
}

void rms_backward(const double* x, double inv, const double* gain, const double* dy, std::size_t d, double* dgain,
                  double* dx) {
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        const double nhat = x[c] * inv;
        dgain[c] += dy[c] * nhat;
        dot += dy[c] * gain[c] * nhat;
    }
    dot /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) dx[c] += inv * (dy[c] * gain[c] - x[c] * inv * dot);
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_grad(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

std::vector<int> top_k_desc(const double* p, std::size_t n, std::size_t k) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](int a, int b) {
        if (p[a] != p[b]) return p[a] > p[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

struct ExpertOffsets {
    std::size_t w_in = 0, w_out = 0;
};

struct LayerOffsets {
    std::size_t attn_gain = 0, wq = 0, wk = 0, wv = 0, wo = 0, moe_gain = 0, w_route = 0;
    std::vector<ExpertOffsets> routed;  // by expert id
    std::vector<ExpertOffsets> shared;
};

struct Layout {
    std::size_t token_embedding = 0, position_embedding = 0, final_gain = 0, unembedding = 0, total = 0;
    std::vector<LayerOffsets> layers;
    std::vector<std::pair<std::size_t, std::string>> starts;  // (offset, tensor name)

    std::string tensor_name(std::size_t index) const {
        auto it = std::upper_bound(starts.begin(), starts.end(), index,
                                   [](std::size_t i, const auto& s) { return i < s.first; });
        return std::prev(it)->second;
    }
};

Layout make_layout(const Checkpoint& ck) {
    const ModelConfig& cfg = ck.config;
    for (const auto& layer : ck.layers) {
        if (layer.is_pruned(cfg.n_routed_experts)) {
            throw ParameterError("training and gradient checks need an unpruned checkpoint");
        }
    }
    std::map<std::string, std::size_t> offsets;
    Layout layout;
    std::size_t pos = 0;
    for (const auto& nt : tensor_directory(ck)) {
        offsets[nt.name] = pos;
        layout.starts.emplace_back(pos, nt.name);
        pos += nt.tensor->size();
    }
    layout.total = pos;
    layout.token_embedding = offsets.at("token_embedding");
    layout.position_embedding = offsets.at("position_embedding");
    layout.final_gain = offsets.at("final_gain");
    layout.unembedding = offsets.at("unembedding");
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerOffsets lo;
        lo.attn_gain = offsets.at(p + "attn_gain");
        lo.wq = offsets.at(p + "attn.wq");
        lo.wk = offsets.at(p + "attn.wk");
        lo.wv = offsets.at(p + "attn.wv");
        lo.wo = offsets.at(p + "attn.wo");
        lo.moe_gain = offsets.at(p + "moe_gain");
        lo.w_route = offsets.at(p + "router.w_route");
        for (int e = 0; e < cfg.n_routed_experts; ++e) {
            const std::string ep = p + "experts." + std::to_string(e) + ".";
            lo.routed.push_back({offsets.at(ep + "w_in"), offsets.at(ep + "w_out")});
        }
        for (int s = 0; s < cfg.n_shared_experts; ++s) {
            const std::string ep = p + "shared." + std::to_string(s) + ".";
            lo.shared.push_back({offsets.at(ep + "w_in"), offsets.at(ep + "w_out")});
        }
        layout.layers.push_back(std::move(lo));
    }
    return layout;
}

struct ExpertCache {
    ExpertOffsets weights;
    double gate = 1.0;
    std::vector<double> z, out;  // pre-activation (hidden) and output (d)
};

struct LayerCache {
    std::vector<double> x_in, attn_inv, a, q, k, v, att, ctx, u, moe_inv, m, probs;
    std::vector<std::vector<int>> selected;
    std::vector<std::vector<ExpertCache>> routed, shared;
};

struct SequenceCache {
    std::vector<LayerCache> layers;
    std::vector<double> final_in, final_inv, final_z, logits;
};

/// Double-precision twin of model_forward with the caches backprop needs.
class Network {
public:
    Network(const ModelConfig& cfg, const Layout& layout, std::span<const double> params)
        : cfg_(cfg), layout_(layout), p_(params.data()) {}

    SequenceCache forward(std::span<const int> inputs) const;
    void backward(const SequenceCache& cache, std::span<const int> inputs, const std::vector<double>& dlogits,
                  const std::vector<std::vector<double>>& balance_dprob, double* grad) const;

private:
    void expert_forward(const ExpertOffsets& w, const double* m, ExpertCache& ec) const;
    void expert_backward(const ExpertCache& ec, const double* m, const double* dout, double* grad, double* dm) const;

    const ModelConfig& cfg_;
    const Layout& layout_;
    const double* p_;
};

void Network::expert_forward(const ExpertOffsets& w, const double* m, ExpertCache& ec) const {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto hd = static_cast<std::size_t>(cfg_.d_expert_hidden);
    ec.weights = w;
    ec.z.assign(hd, 0.0);
    rows_times(m, 1, d, p_ + w.w_in, hd, ec.z.data());
    std::vector<double> s(hd);
    for (std::size_t i = 0; i < hd; ++i) s[i] = silu(ec.z[i]);
    ec.out.assign(d, 0.0);
    rows_times(s.data(), 1, hd, p_ + w.w_out, d, ec.out.data());
}

void Network::expert_backward(const ExpertCache& ec, const double* m, const double* dout, double* grad,
                              double* dm) const {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto hd = static_cast<std::size_t>(cfg_.d_expert_hidden);
    std::vector<double> s(hd), ds(hd, 0.0);
    for (std::size_t i = 0; i < hd; ++i) s[i] = silu(ec.z[i]);
    accumulate_weight_grad(s.data(), dout, 1, hd, d, grad + ec.weights.w_out);
    accumulate_input_grad(dout, p_ + ec.weights.w_out, 1, hd, d, ds.data());
    for (std::size_t i = 0; i < hd; ++i) ds[i] *= silu_grad(ec.z[i]);
    accumulate_weight_grad(m, ds.data(), 1, d, hd, grad + ec.weights.w_in);
    accumulate_input_grad(ds.data(), p_ + ec.weights.w_in, 1, d, hd, dm);
}

SequenceCache Network::forward(std::span<const int> inputs) const {
    const std::size_t T = inputs.size();
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto n = static_cast<std::size_t>(cfg_.n_routed_experts);
    const auto k = static_cast<std::size_t>(cfg_.top_k);
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t hd = d / heads;
    const auto vocab = static_cast<std::size_t>(cfg_.vocab_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    SequenceCache sc;
    std::vector<double> x(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        const double* tok = p_ + layout_.token_embedding + static_cast<std::size_t>(inputs[t]) * d;
        const double* pos = p_ + layout_.position_embedding + t * d;
        for (std::size_t c = 0; c < d; ++c) x[t * d + c] = tok[c] + pos[c];
    }

    for (const LayerOffsets& lo : layout_.layers) {
        LayerCache lc;
        lc.x_in = x;
        lc.attn_inv.resize(T);
        lc.a.resize(T * d);
        for (std::size_t t = 0; t < T; ++t) lc.attn_inv[t] = rms_forward(&x[t * d], p_ + lo.attn_gain, d, &lc.a[t * d]);
        lc.q.resize(T * d);
        lc.k.resize(T * d);
        lc.v.resize(T * d);
        rows_times(lc.a.data(), T, d, p_ + lo.wq, d, lc.q.data());
        rows_times(lc.a.data(), T, d, p_ + lo.wk, d, lc.k.data());
        rows_times(lc.a.data(), T, d, p_ + lo.wv, d, lc.v.data());

        lc.att.assign(heads * T * T, 0.0);
        lc.ctx.assign(T * d, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t t = 0; t < T; ++t) {
                double* prow = &lc.att[(h * T + t) * T];
                double mx = -INFINITY;
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) dot += lc.q[t * d + off + c] * lc.k[s * d + off + c];
                    prow[s] = dot * scale;
                    mx = std::max(mx, prow[s]);
                }
                double total = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    prow[s] = std::exp(prow[s] - mx);
                    total += prow[s];
                }
                for (std::size_t s = 0; s <= t; ++s) prow[s] /= total;
                for (std::size_t s = 0; s <= t; ++s) {
                    for (std::size_t c = 0; c < hd; ++c) lc.ctx[t * d + off + c] += prow[s] * lc.v[s * d + off + c];
                }
            }
        }
        lc.u.resize(T * d);
        rows_times(lc.ctx.data(), T, d, p_ + lo.wo, d, lc.u.data());
        for (std::size_t i = 0; i < T * d; ++i) lc.u[i] += x[i];

        lc.moe_inv.resize(T);
        lc.m.resize(T * d);
        lc.probs.resize(T * n);
        lc.selected.resize(T);
        lc.routed.resize(T);
        lc.shared.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
            const double* m = &lc.m[t * d];
            lc.moe_inv[t] = rms_forward(&lc.u[t * d], p_ + lo.moe_gain, d, &lc.m[t * d]);
            double* pr = &lc.probs[t * n];
            rows_times(m, 1, d, p_ + lo.w_route, n, pr);
            const double mx = *std::max_element(pr, pr + n);
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                pr[i] = std::exp(pr[i] - mx);
                total += pr[i];
            }
            for (std::size_t i = 0; i < n; ++i) pr[i] /= total;

            lc.selected[t] = top_k_desc(pr, n, k);
            double gate_sum = 0.0;
            for (int id : lc.selected[t]) gate_sum += pr[id];

            double* xo = &x[t * d];
            std::copy(&lc.u[t * d], &lc.u[t * d] + d, xo);
            for (int id : lc.selected[t]) {
                ExpertCache ec;
                expert_forward(lo.routed[static_cast<std::size_t>(id)], m, ec);
                ec.gate = cfg_.renormalize_gates ? pr[id] / gate_sum : pr[id];
                for (std::size_t c = 0; c < d; ++c) xo[c] += ec.gate * ec.out[c];
                lc.routed[t].push_back(std::move(ec));
            }
            for (const auto& so : lo.shared) {
                ExpertCache ec;
                expert_forward(so, m, ec);
                for (std::size_t c = 0; c < d; ++c) xo[c] += ec.out[c];
                lc.shared[t].push_back(std::move(ec));
            }
        }
        sc.layers.push_back(std::move(lc));
    }

    sc.final_in = x;
    sc.final_inv.resize(T);
    sc.final_z.resize(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        sc.final_inv[t] = rms_forward(&x[t * d], p_ + layout_.final_gain, d, &sc.final_z[t * d]);
    }
    sc.logits.resize(T * vocab);
    rows_times(sc.final_z.data(), T, d, p_ + layout_.unembedding, vocab, sc.logits.data());
    return sc;
}

void Network::backward(const SequenceCache& sc, std::span<const int> inputs, const std::vector<double>& dlogits,
                       const std::vector<std::vector<double>>& balance_dprob, double* grad) const {
    const std::size_t T = inputs.size();
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto n = static_cast<std::size_t>(cfg_.n_routed_experts);
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t hd = d / heads;
    const auto vocab = static_cast<std::size_t>(cfg_.vocab_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> dz(T * d, 0.0);
    accumulate_weight_grad(sc.final_z.data(), dlogits.data(), T, d, vocab, grad + layout_.unembedding);
    accumulate_input_grad(dlogits.data(), p_ + layout_.unembedding, T, d, vocab, dz.data());
    std::vector<double> dx(T * d, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        rms_backward(&sc.final_in[t * d], sc.final_inv[t], p_ + layout_.final_gain, &dz[t * d], d,
                     grad + layout_.final_gain, &dx[t * d]);
    }

    for (std::size_t li = layout_.layers.size(); li-- > 0;) {
        const LayerOffsets& lo = layout_.layers[li];
        const LayerCache& lc = sc.layers[li];
        // dx holds dL/dh for this layer's output.
        std::vector<double> du = dx;
        std::vector<double> dm(T * d, 0.0);
        std::vector<double> dp(n), dlogit(n);
        for (std::size_t t = 0; t < T; ++t) {
            const double* dh = &dx[t * d];
            const double* m = &lc.m[t * d];
            const double* pr = &lc.probs[t * n];
            std::fill(dp.begin(), dp.end(), 0.0);
            const auto& routed = lc.routed[t];
            std::vector<double> dgate(routed.size()), dout(d);
            for (std::size_t j = 0; j < routed.size(); ++j) {
                const ExpertCache& ec = routed[j];
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dot += dh[c] * ec.out[c];
                    dout[c] = ec.gate * dh[c];
                }
                dgate[j] = dot;
                expert_backward(ec, m, dout.data(), grad, &dm[t * d]);
            }
            for (const ExpertCache& ec : lc.shared[t]) expert_backward(ec, m, dh, grad, &dm[t * d]);

            const auto& sel = lc.selected[t];
            if (cfg_.renormalize_gates) {
                double gate_sum = 0.0, weighted = 0.0;
                for (int id : sel) gate_sum += pr[id];
                for (std::size_t j = 0; j < sel.size(); ++j) weighted += dgate[j] * routed[j].gate;
                for (std::size_t j = 0; j < sel.size(); ++j) dp[static_cast<std::size_t>(sel[j])] += (dgate[j] - weighted) / gate_sum;
            } else {
                for (std::size_t j = 0; j < sel.size(); ++j) dp[static_cast<std::size_t>(sel[j])] += dgate[j];
            }
            if (!balance_dprob.empty()) {
                const auto& bd = balance_dprob[li];
                for (std::size_t i = 0; i < n; ++i) dp[i] += bd[i];
            }
            double inner = 0.0;
            for (std::size_t i = 0; i < n; ++i) inner += pr[i] * dp[i];
            for (std::size_t i = 0; i < n; ++i) dlogit[i] = pr[i] * (dp[i] - inner);
            accumulate_weight_grad(m, dlogit.data(), 1, d, n, grad + lo.w_route);
            accumulate_input_grad(dlogit.data(), p_ + lo.w_route, 1, d, n, &dm[t * d]);
        }
        for (std::size_t t = 0; t < T; ++t) {
            rms_backward(&lc.u[t * d], lc.moe_inv[t], p_ + lo.moe_gain, &dm[t * d], d, grad + lo.moe_gain, &du[t * d]);
        }

        // u = x_in + ctx * wo
        std::vector<double> dctx(T * d, 0.0);
        accumulate_weight_grad(lc.ctx.data(), du.data(), T, d, d, grad + lo.wo);
        accumulate_input_grad(du.data(), p_ + lo.wo, T, d, d, dctx.data());

        std::vector<double> dq(T * d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0), dpr(T);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t t = 0; t < T; ++t) {
                const double* prow = &lc.att[(h * T + t) * T];
                double inner = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dot += dctx[t * d + off + c] * lc.v[s * d + off + c];
                        dv[s * d + off + c] += prow[s] * dctx[t * d + off + c];
                    }
                    dpr[s] = dot;
                    inner += prow[s] * dot;
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const double dscore = prow[s] * (dpr[s] - inner) * scale;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dq[t * d + off + c] += dscore * lc.k[s * d + off + c];
                        dk[s * d + off + c] += dscore * lc.q[t * d + off + c];
                    }
                }
            }
        }
        std::vector<double> da(T * d, 0.0);
        accumulate_weight_grad(lc.a.data(), dq.data(), T, d, d, grad + lo.wq);
        accumulate_weight_grad(lc.a.data(), dk.data(), T, d, d, grad + lo.wk);
        accumulate_weight_grad(lc.a.data(), dv.data(), T, d, d, grad + lo.wv);
        accumulate_input_grad(dq.data(), p_ + lo.wq, T, d, d, da.data());
        accumulate_input_grad(dk.data(), p_ + lo.wk, T, d, d, da.data());
        accumulate_input_grad(dv.data(), p_ + lo.wv, T, d, d, da.data());

        dx = du;
        for (std::size_t t = 0; t < T; ++t) {
            rms_backward(&lc.x_in[t * d], lc.attn_inv[t], p_ + lo.attn_gain, &da[t * d], d, grad + lo.attn_gain,
                         &dx[t * d]);
        }
    }

    for (std::size_t t = 0; t < T; ++t) {
        double* tok = grad + layout_.token_embedding + static_cast<std::size_t>(inputs[t]) * d;
        double* pos = grad + layout_.position_embedding + t * d;
        for (std::size_t c = 0; c < d; ++c) {
            tok[c] += dx[t * d + c];
            pos[c] += dx[t * d + c];
        }
    }
}

void validate_batch(const ModelConfig& cfg, std::span<const Sequence> batch) {
    if (batch.empty()) throw ParameterError("empty batch");
    for (const auto& seq : batch) {
        if (seq.inputs.empty() || seq.inputs.size() != seq.targets.size()) {
            throw InputError("sequence inputs and targets must be non-empty and equal length");
        }
        if (seq.inputs.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
            throw InputError("sequence length " + std::to_string(seq.inputs.size()) + " exceeds max_seq_len");
        }
        for (const auto* v : {&seq.inputs, &seq.targets}) {
            for (int id : *v) {
                if (id < 0 || id >= cfg.vocab_size) throw InputError("token id " + std::to_string(id) + " out of range");
            }
        }
    }
}

BatchEvaluation evaluate_with_layout(const ModelConfig& cfg, const Layout& layout, std::span<const double> params,
                                     std::span<const Sequence> batch, Objective objective, double balance_coeff,
                                     bool want_gradient, std::uint64_t probe_seed) {
    validate_batch(cfg, batch);
    const Network net(cfg, layout, params);
    const auto n = static_cast<std::size_t>(cfg.n_routed_experts);
    const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
    const auto layers = static_cast<std::size_t>(cfg.n_layers);

    std::vector<SequenceCache> caches;
    std::size_t total_tokens = 0;
    for (const auto& seq : batch) {
        caches.push_back(net.forward(seq.inputs));
        total_tokens += seq.inputs.size();
    }
    const double inv_tokens = 1.0 / static_cast<double>(total_tokens);

    BatchEvaluation ev;
    // Balance statistics over every token of the batch, per layer.
    std::vector<std::vector<double>> frac(layers, std::vector<double>(n, 0.0));
    std::vector<std::vector<double>> mass(layers, std::vector<double>(n, 0.0));
    for (const auto& sc : caches) {
        for (std::size_t l = 0; l < layers; ++l) {
            const auto& lc = sc.layers[l];
            for (std::size_t t = 0; t < lc.selected.size(); ++t) {
                for (int id : lc.selected[t]) {
                    frac[l][static_cast<std::size_t>(id)] += 1.0;
                    ev.selection_key.push_back(id);
                }
                for (std::size_t i = 0; i < n; ++i) mass[l][i] += lc.probs[t * n + i];
            }
        }
    }
    double balance_sum = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
        double b = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            frac[l][i] *= inv_tokens / cfg.top_k;
            b += frac[l][i] * mass[l][i] * inv_tokens;
        }
        balance_sum += static_cast<double>(n) * b;
    }
    ev.balance = balance_sum / static_cast<double>(layers);

    std::vector<std::vector<double>> dlogits(batch.size());
    double ce = 0.0, probe = 0.0;
    Prng probe_rng(probe_seed);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& sc = caches[b];
        const std::size_t T = batch[b].inputs.size();
        dlogits[b].assign(T * vocab, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double* row = &sc.logits[t * vocab];
            double* drow = &dlogits[b][t * vocab];
            const double mx = *std::max_element(row, row + vocab);
            double sum = 0.0;
            for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(row[v] - mx);
            const auto target = static_cast<std::size_t>(batch[b].targets[t]);
            ce += mx + std::log(sum) - row[target];
            if (objective == Objective::CrossEntropy) {
                for (std::size_t v = 0; v < vocab; ++v) drow[v] = std::exp(row[v] - mx) / sum * inv_tokens;
                drow[target] -= inv_tokens;
            } else {
                for (std::size_t v = 0; v < vocab; ++v) {
                    const double r = probe_rng.normal();
                    probe += r * row[v];
                    drow[v] = r * inv_tokens;
                }
            }
        }
    }
    ev.cross_entropy = ce * inv_tokens;
    if (objective == Objective::CrossEntropy) {
        ev.objective = ev.cross_entropy + balance_coeff * ev.balance;
    } else {
        ev.objective = probe * inv_tokens + balance_coeff * ev.balance;
    }

    if (want_gradient) {
        // d(coeff * mean_l n sum_i f_i P_i)/dp_{t,i} with f held constant.
        std::vector<std::vector<double>> balance_dprob;
        if (balance_coeff != 0.0) {
            balance_dprob.assign(layers, std::vector<double>(n, 0.0));
            for (std::size_t l = 0; l < layers; ++l) {
                for (std::size_t i = 0; i < n; ++i) {
                    balance_dprob[l][i] =
                        balance_coeff / static_cast<double>(layers) * static_cast<double>(n) * frac[l][i] * inv_tokens;
                }
            }
        }
        ev.gradient.assign(layout.total, 0.0);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            net.backward(caches[b], batch[b].inputs, dlogits[b], balance_dprob, ev.gradient.data());
        }
    }
    return ev;
}

}  // namespace

BatchEvaluation evaluate_batch(const Checkpoint& layout_source, std::span<const double> params,
                               std::span<const Sequence> batch, Objective objective, double balance_coeff,
                               bool want_gradient, std::uint64_t probe_seed) {
    const Layout layout = make_layout(layout_source);
    if (params.size() != layout.total) throw DimensionError("evaluate_batch: parameter count mismatch");
    return evaluate_with_layout(layout_source.config, layout, params, batch, objective, balance_coeff, want_gradient,
                                probe_seed);
}

std::vector<double> training_logits(const Checkpoint& checkpoint, std::span<const int> inputs) {
    const Layout layout = make_layout(checkpoint);
    const auto params = flatten_parameters(checkpoint);
    Sequence seq{std::vector<int>(inputs.begin(), inputs.end()), std::vector<int>(inputs.size(), 0)};
    validate_batch(checkpoint.config, std::span<const Sequence>(&seq, 1));
    const Network net(checkpoint.config, layout, params);
    return net.forward(inputs).logits;
}

TrainResult train(const Checkpoint& initial, std::span<const DomainCorpus> corpora, const TrainConfig& config,
                  const std::function<void(const TrainStep&)>& on_step) {
    config.validate();
    if (corpora.empty()) throw ParameterError("train needs at least one corpus");
    if (config.seq_len > initial.config.max_seq_len) {
        throw ParameterError("seq_len " + std::to_string(config.seq_len) + " exceeds max_seq_len " +
                             std::to_string(initial.config.max_seq_len));
    }
    const Layout layout = make_layout(initial);
    std::vector<double> params = flatten_parameters(initial);
    Prng rng(config.seed);

    TrainResult result;
    for (int step = 0; step < config.steps; ++step) {
        const auto batch = sample_batch(corpora, config, step, rng);
        BatchEvaluation ev = evaluate_with_layout(initial.config, layout, params, batch, Objective::CrossEntropy,
                                                  config.balance_coeff, true, 0);
        if (!std::isfinite(ev.objective)) throw DivergedError(step, "loss is not finite");
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= config.learning_rate * ev.gradient[i];
        TrainStep rec{step, ev.cross_entropy, ev.balance};
        result.history.push_back(rec);
        if (on_step) on_step(rec);
    }
    for (double v : params) {
        if (!std::isfinite(v) || std::fabs(v) > 3.0e38) {
            throw DivergedError(config.steps, "parameters left the float range");
        }
    }
    result.checkpoint = initial;
    assign_parameters(result.checkpoint, params);
    return result;
}

GradCheckReport grad_check(const Checkpoint& checkpoint, std::span<const Sequence> batch,
                           const GradCheckOptions& options) {
    const Layout layout = make_layout(checkpoint);
    const ModelConfig& cfg = checkpoint.config;
    std::vector<double> params = flatten_parameters(checkpoint);
    const BatchEvaluation base = evaluate_with_layout(cfg, layout, params, batch, options.objective,
                                                      options.balance_coeff, true, options.seed);

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < layout.starts.size(); ++i) {
        if (!layout.starts[i].second.starts_with(options.tensor_prefix)) continue;
        const std::size_t end = i + 1 < layout.starts.size() ? layout.starts[i + 1].first : layout.total;
        for (std::size_t p = layout.starts[i].first; p < end; ++p) candidates.push_back(p);
    }
    if (candidates.empty()) throw ParameterError("grad_check: no parameters match '" + options.tensor_prefix + "'");

    GradCheckReport report;
    Prng rng(options.seed);
    const int max_attempts = options.samples * 20;
    int attempts = 0;
    while (static_cast<int>(report.entries.size()) < options.samples && attempts++ < max_attempts) {
        const std::size_t idx = candidates[rng.below(candidates.size())];
        const double saved = params[idx];
        params[idx] = saved + options.step;
        const auto plus = evaluate_with_layout(cfg, layout, params, batch, options.objective, options.balance_coeff,
                                               false, options.seed);
        params[idx] = saved - options.step;
        const auto minus = evaluate_with_layout(cfg, layout, params, batch, options.objective,
                                                options.balance_coeff, false, options.seed);
        params[idx] = saved;
        if (plus.selection_key != base.selection_key || minus.selection_key != base.selection_key) {
            ++report.skipped;
            continue;
        }
        GradCheckEntry e;
        e.tensor = layout.tensor_name(idx);
        e.index = idx;
        e.analytic = base.gradient[idx];
        e.numeric = (plus.objective - minus.objective) / (2.0 * options.step);
        const double scale = std::max({std::fabs(e.analytic), std::fabs(e.numeric), 1e-8});
        e.rel_error = std::fabs(e.analytic - e.numeric) / scale;
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
        report.entries.push_back(e);
    }
    return report;
}

}  // namespace moelens
