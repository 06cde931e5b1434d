#pragma once

#include "moelens/model.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moelens {

/// rms_layer_norm(h, final_gain) * W_U.
Tensor logit_lens(const Tensor& h, const Tensor& final_gain, const Tensor& unembedding);

/// Logit lens over (sum of gate * expert output over the subset) + shared + u.
/// Passing nullptr for `shared` leaves the shared-expert term out.
/// Throws ParameterError for an empty subset.
Tensor extended_logit_lens(std::span<const Tensor> expert_outputs, std::span<const float> gates, const Tensor* shared,
                           const Tensor& u, const Tensor& final_gain, const Tensor& unembedding);

/// Hidden state rebuilt from the top-k' gate-ordered experts of one traced token.
struct RestrictedHidden {
    int layer = 0;
    int k_prime = 0;
    Tensor vector;
};

RestrictedHidden restricted_hidden(const Trace& trace, int layer, std::size_t position, int k_prime);

enum class LensVariant { LayerOutput, TopKCombined, SingleExpert };

struct LensCell {
    int layer = 0;
    LensVariant variant = LensVariant::LayerOutput;
    int k_prime = 0;  // TopKCombined only
    int token_id = 0;
    std::string token_text;
    float confidence = 0.0f;
    std::optional<int> expert_index;
    std::optional<float> expert_gate;
};

/// Rows are layers; columns are the layer output, then k' = 1..k combined
/// states, then each of the k selected experts alone (plus residual).
struct LensGrid {
    std::size_t position = 0;
    std::vector<std::string> column_labels;
    std::vector<std::vector<LensCell>> rows;
};

struct LensOptions {
    /// Add the shared-expert output to single-expert cells as well.
    bool shared_in_single_expert = true;
};

LensGrid lens_grid(const Trace& trace, const Checkpoint& checkpoint, std::size_t position,
                   const LensOptions& options = {});

/// Printable form of a token id: ASCII as-is, other bytes as \xNN, specials as <bos>/<eos>.
std::string token_text(int token_id);

/// Top-1 token and its softmax probability.
std::pair<int, float> top_token(const Tensor& logits);

nlohmann::json lens_grid_json(const LensGrid& grid);
std::string lens_grid_svg(const LensGrid& grid, const std::string& title);

}  // namespace moelens
