#include "moelens/checkpoint.hpp"

#include "moelens/errors.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <set>

namespace moelens {

using nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size},
                {"d_model", c.d_model},
                {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},
                {"d_expert_hidden", c.d_expert_hidden},
                {"n_routed_experts", c.n_routed_experts},
                {"n_shared_experts", c.n_shared_experts},
                {"top_k", c.top_k},
                {"max_seq_len", c.max_seq_len},
                {"seed", c.seed},
                {"renormalize_gates", c.renormalize_gates},
                {"prune_renormalize", c.prune_renormalize}};
}

ModelConfig model_config_from_json(const json& j) {
    if (!j.is_object()) throw ParameterError("model config must be a JSON object");
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "vocab_size") c.vocab_size = value.get<int>();
            else if (key == "d_model") c.d_model = value.get<int>();
            else if (key == "n_layers") c.n_layers = value.get<int>();
            else if (key == "n_heads") c.n_heads = value.get<int>();
            else if (key == "d_expert_hidden") c.d_expert_hidden = value.get<int>();
            else if (key == "n_routed_experts") c.n_routed_experts = value.get<int>();
            else if (key == "n_shared_experts") c.n_shared_experts = value.get<int>();
            else if (key == "top_k") c.top_k = value.get<int>();
            else if (key == "max_seq_len") c.max_seq_len = value.get<int>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "renormalize_gates") c.renormalize_gates = value.get<bool>();
            else if (key == "prune_renormalize") c.prune_renormalize = value.get<bool>();
            else throw ParameterError("unknown model config key '" + key + "'");
        } catch (const json::exception& e) {
            throw ParameterError("model config key '" + key + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["config"] = model_config_to_json(ck.config);
    json kept = json::array();
    for (const auto& layer : ck.layers) kept.push_back(layer.expert_ids);
    header["kept_experts"] = kept;

    std::uint64_t offset = 0;
    json dir = json::array();
    const auto tensors = tensor_directory(ck);
    for (const auto& nt : tensors) {
        dir.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset}});
        offset += nt.tensor->size() * sizeof(float);
    }
    header["tensors"] = dir;

    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& nt : tensors) {
        for (float v : nt.tensor->data()) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
        }
    }
    return out;
}

namespace {

std::vector<std::vector<int>> parse_kept(const json& header, const ModelConfig& cfg) {
    if (!header.contains("kept_experts") || !header["kept_experts"].is_array()) {
        throw ConsistencyError("checkpoint header lacks kept_experts");
    }
    const json& kept = header["kept_experts"];
    if (kept.size() != static_cast<std::size_t>(cfg.n_layers)) {
        throw ConsistencyError("kept_experts lists " + std::to_string(kept.size()) + " layers, config has " +
                               std::to_string(cfg.n_layers));
    }
    std::vector<std::vector<int>> out;
    for (std::size_t l = 0; l < kept.size(); ++l) {
        auto ids = kept[l].get<std::vector<int>>();
        const bool sorted_unique = std::adjacent_find(ids.begin(), ids.end(), std::greater_equal<>()) == ids.end();
        const bool in_range = std::all_of(ids.begin(), ids.end(), [&](int id) { return id >= 0 && id < cfg.n_routed_experts; });
        if (!sorted_unique || !in_range || static_cast<int>(ids.size()) < cfg.top_k) {
            throw ConsistencyError("kept_experts for layer " + std::to_string(l) + " is invalid for n=" +
                                   std::to_string(cfg.n_routed_experts) + ", k=" + std::to_string(cfg.top_k));
        }
        out.push_back(std::move(ids));
    }
    return out;
}

Checkpoint skeleton(const ModelConfig& cfg, const std::vector<std::vector<int>>& kept) {
    Checkpoint ck;
    ck.config = cfg;
    ck.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (std::size_t l = 0; l < ck.layers.size(); ++l) {
        ck.layers[l].expert_ids = kept[l];
        ck.layers[l].experts.resize(kept[l].size());
        ck.layers[l].shared.resize(static_cast<std::size_t>(cfg.n_shared_experts));
    }
    return ck;
}

}  // namespace

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    const std::size_t magic_len = kCheckpointMagic.size();
    if (bytes.size() < magic_len) {
        throw TruncatedError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes, magic incomplete");
    }
    if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
        throw BadMagicError("not a checkpoint: magic bytes differ from MOESCP01");
    }
    if (bytes.size() < magic_len + 8) throw TruncatedError("checkpoint truncated inside the header length");
    const std::uint64_t header_len = get_u64(bytes.data() + magic_len);
    const std::size_t header_start = magic_len + 8;
    if (header_len > bytes.size() - header_start) throw TruncatedError("checkpoint truncated inside the JSON header");

    json header;
    try {
        header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_start),
                             bytes.begin() + static_cast<std::ptrdiff_t>(header_start + header_len));
    } catch (const json::exception& e) {
        throw ConsistencyError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    try {
        const int version = header.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion) {
            throw VersionError("checkpoint format version " + std::to_string(version) + ", this build reads " +
                               std::to_string(kCheckpointFormatVersion));
        }
        ModelConfig cfg;
        try {
            cfg = model_config_from_json(header.at("config"));
        } catch (const ParameterError& e) {
            throw ConsistencyError(std::string("checkpoint config: ") + e.what());
        }
        const auto kept = parse_kept(header, cfg);
        const auto expected = expected_tensors(cfg, kept);
        const json& dir = header.at("tensors");
        if (!dir.is_array()) throw ConsistencyError("checkpoint tensor directory is not an array");

        std::set<std::string> present;
        for (const auto& entry : dir) present.insert(entry.at("name").get<std::string>());
        std::set<std::string> wanted;
        for (const auto& spec : expected) wanted.insert(spec.name);
        for (const auto& spec : expected) {
            if (!present.count(spec.name)) throw ConsistencyError("tensor '" + spec.name + "' required by config is missing");
        }
        for (const auto& name : present) {
            if (!wanted.count(name)) throw ConsistencyError("tensor '" + name + "' is not part of the configured model");
        }
        if (dir.size() != expected.size()) {
            throw ConsistencyError("tensor directory has " + std::to_string(dir.size()) + " entries, config needs " +
                                   std::to_string(expected.size()));
        }

        Checkpoint ck = skeleton(cfg, kept);
        auto slots = tensor_directory(ck);
        const std::size_t blob_start = header_start + header_len;
        const std::size_t blob_size = bytes.size() - blob_start;
        std::uint64_t running = 0;
        for (std::size_t i = 0; i < expected.size(); ++i) {
            const json& entry = dir[i];
            const auto name = entry.at("name").get<std::string>();
            if (name != expected[i].name) {
                throw ConsistencyError("tensor '" + name + "' out of order; expected '" + expected[i].name + "'");
            }
            const auto shape = entry.at("shape").get<Shape>();
            if (shape != expected[i].shape) {
                throw ConsistencyError("tensor '" + name + "' has shape " + shape_string(shape) + ", config needs " +
                                       shape_string(expected[i].shape));
            }
            const auto offset = entry.at("offset").get<std::uint64_t>();
            if (offset != running) {
                throw ConsistencyError("tensor '" + name + "' offset " + std::to_string(offset) + " is not contiguous");
            }
            std::size_t count = 1;
            for (auto s : shape) count *= s;
            const std::uint64_t nbytes = count * sizeof(float);
            if (running + nbytes > blob_size) {
                throw TruncatedError("checkpoint truncated inside tensor '" + name + "'");
            }
            std::vector<float> data(count);
            const std::uint8_t* p = bytes.data() + blob_start + running;
            for (std::size_t e = 0; e < count; ++e, p += 4) {
                const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                                           static_cast<std::uint32_t>(p[2]) << 16 |
                                           static_cast<std::uint32_t>(p[3]) << 24;
                data[e] = std::bit_cast<float>(bits);
            }
            *slots[i].tensor = Tensor(shape, std::move(data));
            running += nbytes;
        }
        if (running != blob_size) {
            throw ConsistencyError("checkpoint has " + std::to_string(blob_size - running) + " trailing bytes");
        }
        return ck;
    } catch (const json::exception& e) {
        throw ConsistencyError(std::string("checkpoint header malformed: ") + e.what());
    }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("failed writing checkpoint to '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace moelens
