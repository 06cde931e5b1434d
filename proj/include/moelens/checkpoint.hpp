#pragma once

#include "moelens/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

namespace moelens {

// File layout:
//   8 bytes   magic "MOESCP01"
//   8 bytes   header length N, little-endian uint64
//   N bytes   UTF-8 JSON header: format_version, config, kept_experts,
//             tensors[{name, shape, offset}]
//   blob      little-endian float32, row-major, in directory order;
//             offsets are relative to the start of the blob
inline constexpr std::string_view kCheckpointMagic = "MOESCP01";
inline constexpr int kCheckpointFormatVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws BadMagicError, VersionError, TruncatedError or ConsistencyError on a
/// bad file, InputError when it cannot be read at all.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace moelens
