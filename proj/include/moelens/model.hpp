#pragma once

#include "moelens/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moelens {

// Byte-level vocabulary: ids 0..255 are raw bytes, then two special ids.
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kByteVocabSize = 258;

struct ModelConfig {
    int vocab_size = kByteVocabSize;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 2;
    int d_expert_hidden = 32;
    int n_routed_experts = 16;
    int n_shared_experts = 1;
    int top_k = 4;
    int max_seq_len = 64;
    std::uint64_t seed = 1234;
    /// Divide selected gates by their sum. Off: gates are the raw softmax slice.
    bool renormalize_gates = false;
    /// Pruned layers: renormalize the router softmax over surviving experts
    /// (removed logits masked to -inf). Off: the softmax still runs over all n
    /// experts and removed experts are only excluded from selection.
    bool prune_renormalize = false;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

/// Gateless FFN: silu(x w_in) w_out.
struct ExpertWeights {
    Tensor w_in;   // d_model x d_expert_hidden
    Tensor w_out;  // d_expert_hidden x d_model
};

struct RouterWeights {
    Tensor w_route;  // d_model x n_routed_experts
};

struct AttentionWeights {
    Tensor wq, wk, wv, wo;  // each d_model x d_model
};

struct LayerWeights {
    Tensor attn_gain;
    AttentionWeights attention;
    Tensor moe_gain;
    RouterWeights router;
    /// Original indices of the routed experts still present, ascending.
    std::vector<int> expert_ids;
    /// Parallel to expert_ids.
    std::vector<ExpertWeights> experts;
    std::vector<ExpertWeights> shared;

    bool is_pruned(int n_routed) const { return static_cast<int>(expert_ids.size()) != n_routed; }
    /// Weights of routed expert `id` (original index); throws if it was pruned.
    const ExpertWeights& expert(int id) const;
};

struct Checkpoint {
    ModelConfig config;
    Tensor token_embedding;     // vocab x d_model
    Tensor position_embedding;  // max_seq_len x d_model
    std::vector<LayerWeights> layers;
    Tensor final_gain;
    Tensor unembedding;  // d_model x vocab
};

/// Seeded random initialization from config.seed.
Checkpoint init_checkpoint(const ModelConfig& config);

/// Every tensor of a checkpoint in canonical order with its persisted name.
/// The checkpoint file and the trainer's flat parameter vector both use it.
struct NamedTensor {
    std::string name;
    Tensor* tensor;
};
struct NamedConstTensor {
    std::string name;
    const Tensor* tensor;
};
std::vector<NamedTensor> tensor_directory(Checkpoint& checkpoint);
std::vector<NamedConstTensor> tensor_directory(const Checkpoint& checkpoint);

/// Expected name and shape of every tensor for a config and per-layer set of
/// stored routed experts.
struct TensorSpec {
    std::string name;
    Shape shape;
};
std::vector<TensorSpec> expected_tensors(const ModelConfig& config,
                                         const std::vector<std::vector<int>>& expert_ids);

Tensor expert_forward(const ExpertWeights& expert, const Tensor& x);

/// Routing distribution softmax(x w_route) over all n experts. When
/// `kept_experts` is non-empty and `renormalize` is set, the softmax runs over
/// those experts only and the others get probability 0.
Tensor route(const Tensor& x, const RouterWeights& router, std::span<const int> kept_experts = {},
             bool renormalize = true);

/// Everything recorded for one token at one MoE layer.
struct TokenTrace {
    Tensor u;                            // post-attention residual stream
    Tensor probs;                        // routing distribution over n experts
    std::vector<int> selected;           // full top-k, gate-descending
    std::vector<float> gates;            // gate per selected expert
    std::vector<Tensor> expert_outputs;  // unweighted E_i(u') per selected expert
    Tensor shared_output;                // sum of shared experts
    Tensor h;                            // layer output
};

struct LayerTrace {
    std::vector<TokenTrace> tokens;
};

struct Trace {
    std::vector<int> tokens;
    std::vector<LayerTrace> layers;
};

/// h = sum_{j < count} gates[j] * outputs[j] + shared + u, accumulated in
/// double in that order. The forward pass and the lens both build hidden
/// states through this function so a full-count reconstruction is exact.
Tensor combine_hidden(const Tensor& u, std::span<const float> gates, std::span<const Tensor> outputs,
                      std::size_t count, const Tensor* shared);

struct MoeLayerResult {
    Tensor h;
    TokenTrace trace;
};

/// One MoE block for one token. `u` is the post-attention residual; the
/// block normalizes it with moe_gain before routing and the experts.
MoeLayerResult moe_layer_forward(const Tensor& u, const LayerWeights& layer, const ModelConfig& config,
                                 std::optional<int> k_override = std::nullopt);

struct ForwardResult {
    Tensor logits;  // T x vocab
    std::optional<Trace> trace;
};

ForwardResult model_forward(std::span<const int> tokens, const Checkpoint& checkpoint, bool trace = false,
                            std::optional<int> k_override = std::nullopt);

}  // namespace moelens
