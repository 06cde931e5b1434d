#include "moelens/lens.hpp"

#include "moelens/errors.hpp"
#include "moelens/report.hpp"

#include <cstdio>

namespace moelens {

Tensor logit_lens(const Tensor& h, const Tensor& final_gain, const Tensor& unembedding) {
    const Tensor normed = rms_layer_norm(h, final_gain);
    Tensor row({1, normed.size()}, std::vector<float>(normed.data().begin(), normed.data().end()));
    Tensor logits = matmul(row, unembedding);
    return Tensor({logits.size()}, std::vector<float>(logits.data().begin(), logits.data().end()));
}

Tensor extended_logit_lens(std::span<const Tensor> expert_outputs, std::span<const float> gates, const Tensor* shared,
                           const Tensor& u, const Tensor& final_gain, const Tensor& unembedding) {
    if (expert_outputs.empty()) throw ParameterError("extended_logit_lens: expert subset is empty");
    if (expert_outputs.size() != gates.size()) {
        throw DimensionError("extended_logit_lens: " + std::to_string(expert_outputs.size()) + " outputs but " +
                             std::to_string(gates.size()) + " gates");
    }
    return logit_lens(combine_hidden(u, gates, expert_outputs, expert_outputs.size(), shared), final_gain, unembedding);
}

namespace {

const TokenTrace& traced_token(const Trace& trace, int layer, std::size_t position) {
    if (layer < 0 || static_cast<std::size_t>(layer) >= trace.layers.size()) {
        throw ParameterError("layer " + std::to_string(layer) + " not in trace of " +
                             std::to_string(trace.layers.size()) + " layers");
    }
    const auto& tokens = trace.layers[static_cast<std::size_t>(layer)].tokens;
    if (position >= tokens.size()) {
        throw ParameterError("position " + std::to_string(position) + " outside traced sequence of length " +
                             std::to_string(tokens.size()));
    }
    return tokens[position];
}

}  // namespace

RestrictedHidden restricted_hidden(const Trace& trace, int layer, std::size_t position, int k_prime) {
    const TokenTrace& tok = traced_token(trace, layer, position);
    if (k_prime < 1 || static_cast<std::size_t>(k_prime) > tok.selected.size()) {
        throw ParameterError("k'=" + std::to_string(k_prime) + " outside [1, " + std::to_string(tok.selected.size()) + "]");
    }
    return {layer, k_prime,
            combine_hidden(tok.u, tok.gates, tok.expert_outputs, static_cast<std::size_t>(k_prime), &tok.shared_output)};
}

std::string token_text(int token_id) {
    if (token_id == kBosToken) return "<bos>";
    if (token_id == kEosToken) return "<eos>";
    if (token_id >= 0x20 && token_id < 0x7f) return std::string(1, static_cast<char>(token_id));
    char buf[8];
    std::snprintf(buf, sizeof buf, "\\x%02X", token_id & 0xff);
    return buf;
}

std::pair<int, float> top_token(const Tensor& logits) {
    const int best = static_cast<int>(top_k_indices(logits, 1).front());
    const Tensor probs = softmax_rows(logits);
    return {best, probs[static_cast<std::size_t>(best)]};
}

namespace {

LensCell decode_cell(const Tensor& logits, int layer, LensVariant variant) {
    LensCell cell;
    cell.layer = layer;
    cell.variant = variant;
    auto [id, conf] = top_token(logits);
    cell.token_id = id;
    cell.token_text = token_text(id);
    cell.confidence = conf;
    return cell;
}

}  // namespace

LensGrid lens_grid(const Trace& trace, const Checkpoint& checkpoint, std::size_t position, const LensOptions& options) {
    if (trace.layers.empty() || position >= trace.layers.front().tokens.size()) {
        throw ParameterError("lens_grid: position " + std::to_string(position) + " outside traced sequence");
    }
    const int k = checkpoint.config.top_k;
    LensGrid grid;
    grid.position = position;
    grid.column_labels.push_back("layer_output");
    for (int kp = 1; kp <= k; ++kp) grid.column_labels.push_back("top" + std::to_string(kp) + "_combined");
    for (int j = 0; j < k; ++j) grid.column_labels.push_back("expert_rank" + std::to_string(j + 1));

    const Tensor& gain = checkpoint.final_gain;
    const Tensor& wu = checkpoint.unembedding;
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const int layer = static_cast<int>(l);
        const TokenTrace& tok = traced_token(trace, layer, position);
        std::vector<LensCell> row;
        row.push_back(decode_cell(logit_lens(tok.h, gain, wu), layer, LensVariant::LayerOutput));
        for (int kp = 1; kp <= k; ++kp) {
            const auto count = static_cast<std::size_t>(kp);
            LensCell cell = decode_cell(
                extended_logit_lens(std::span(tok.expert_outputs).first(count), std::span(tok.gates).first(count),
                                    &tok.shared_output, tok.u, gain, wu),
                layer, LensVariant::TopKCombined);
            cell.k_prime = kp;
            row.push_back(std::move(cell));
        }
        for (std::size_t j = 0; j < tok.selected.size(); ++j) {
            LensCell cell = decode_cell(
                extended_logit_lens(std::span(tok.expert_outputs).subspan(j, 1), std::span(tok.gates).subspan(j, 1),
                                    options.shared_in_single_expert ? &tok.shared_output : nullptr, tok.u, gain, wu),
                layer, LensVariant::SingleExpert);
            cell.expert_index = tok.selected[j];
            cell.expert_gate = tok.gates[j];
            row.push_back(std::move(cell));
        }
        grid.rows.push_back(std::move(row));
    }
    return grid;
}

namespace {

const char* variant_name(LensVariant v) {
    switch (v) {
        case LensVariant::LayerOutput: return "layer_output";
        case LensVariant::TopKCombined: return "topk_combined";
        case LensVariant::SingleExpert: return "single_expert";
    }
    return "?";
}

}  // namespace

nlohmann::json lens_grid_json(const LensGrid& grid) {
    nlohmann::json rows = nlohmann::json::array();
    std::vector<std::string> row_labels;
    for (const auto& row : grid.rows) {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& c : row) {
            nlohmann::json cell{{"variant", variant_name(c.variant)},
                                {"token_id", c.token_id},
                                {"token", c.token_text},
                                {"confidence", c.confidence}};
            if (c.variant == LensVariant::TopKCombined) cell["k_prime"] = c.k_prime;
            cell["expert_index"] = c.expert_index ? nlohmann::json(*c.expert_index) : nlohmann::json(nullptr);
            cell["expert_gate"] = c.expert_gate ? nlohmann::json(*c.expert_gate) : nlohmann::json(nullptr);
            cells.push_back(std::move(cell));
        }
        row_labels.push_back("layer " + std::to_string(row.empty() ? 0 : row.front().layer));
        rows.push_back(std::move(cells));
    }
    return {{"position", grid.position}, {"row_labels", row_labels}, {"column_labels", grid.column_labels},
            {"cells", rows}};
}

std::string lens_grid_svg(const LensGrid& grid, const std::string& title) {
    const double cell_w = 64, cell_h = 40, left = 70, top = 70;
    const std::size_t cols = grid.column_labels.size();
    const double width = left + cell_w * static_cast<double>(cols) + 20;
    const double height = top + cell_h * static_cast<double>(grid.rows.size()) + 20;
    SvgWriter svg(width, height);
    svg.text(10, 22, title, 14, "start");
    for (std::size_t c = 0; c < cols; ++c) {
        svg.text(left + cell_w * (static_cast<double>(c) + 0.5), top - 8, grid.column_labels[c], 8, "middle");
    }
    // Layer 0 at the bottom, as in a residual-stream plot.
    for (std::size_t r = 0; r < grid.rows.size(); ++r) {
        const double y = top + cell_h * static_cast<double>(grid.rows.size() - 1 - r);
        svg.text(left - 8, y + cell_h * 0.6, "L" + std::to_string(grid.rows[r].front().layer), 11, "end");
        for (std::size_t c = 0; c < grid.rows[r].size(); ++c) {
            const LensCell& cell = grid.rows[r][c];
            const double x = left + cell_w * static_cast<double>(c);
            svg.rect(x, y, cell_w, cell_h, "#1f77b4", cell.confidence, "#ffffff");
            svg.text(x + cell_w / 2, y + cell_h * 0.62, cell.token_text, 13, "middle");
            if (cell.expert_index) svg.text(x + 3, y + cell_h - 3, std::to_string(*cell.expert_index), 8, "start");
            if (cell.expert_gate) svg.text(x + cell_w - 3, y + 10, format_number(*cell.expert_gate, 2), 8, "end");
        }
    }
    return svg.str();
}

}  // namespace moelens
