#include "moelens/checkpoint.hpp"
#include "moelens/errors.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

using namespace moelens;
using moelens::testing::small_config;

namespace {

struct Split {
    nlohmann::json header;
    std::vector<std::uint8_t> blob;
};

Split split_file(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t len = 0;
    for (int i = 7; i >= 0; --i) len = (len << 8) | bytes[8 + static_cast<std::size_t>(i)];
    Split s;
    s.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    s.blob.assign(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len), bytes.end());
    return s;
}

std::vector<std::uint8_t> join_file(const Split& s) {
    const std::string header = s.header.dump();
    std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), s.blob.begin(), s.blob.end());
    return out;
}

void expect_same(const Checkpoint& a, const Checkpoint& b) {
    EXPECT_EQ(a.config, b.config);
    const auto da = tensor_directory(a), db = tensor_directory(b);
    ASSERT_EQ(da.size(), db.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        EXPECT_EQ(da[i].name, db[i].name);
        EXPECT_TRUE(bitwise_equal(*da[i].tensor, *db[i].tensor)) << da[i].name;
    }
}

}  // namespace

TEST(CheckpointFormat, RoundTripIsBitwise) {
    const Checkpoint ck = init_checkpoint(small_config());
    const auto bytes = serialize_checkpoint(ck);
    expect_same(ck, deserialize_checkpoint(bytes));
    EXPECT_EQ(serialize_checkpoint(deserialize_checkpoint(bytes)), bytes);
}

TEST(CheckpointFormat, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "moelens_ck_roundtrip.bin";
    const Checkpoint ck = init_checkpoint(small_config());
    save_checkpoint(ck, path);
    expect_same(ck, load_checkpoint(path));
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), InputError);
}

TEST(CheckpointFormat, HeaderLayout) {
    const auto bytes = serialize_checkpoint(init_checkpoint(small_config()));
    ASSERT_EQ(std::memcmp(bytes.data(), "MOESCP01", 8), 0);
    const Split s = split_file(bytes);
    EXPECT_EQ(s.header.at("format_version"), 1);
    EXPECT_EQ(s.header.at("config").at("top_k"), 3);
    EXPECT_EQ(s.header.at("tensors").front().at("name"), "token_embedding");
    EXPECT_EQ(s.header.at("tensors").front().at("offset"), 0);
}

TEST(CheckpointFormat, TruncationIsDetectedEverywhere) {
    const auto bytes = serialize_checkpoint(init_checkpoint(small_config()));
    for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, std::size_t{40}, bytes.size() / 2,
                            bytes.size() - 1}) {
        std::vector<std::uint8_t> shorter(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(deserialize_checkpoint(shorter), TruncatedError) << "cut at " << cut;
    }
}

TEST(CheckpointFormat, BadMagic) {
    auto bytes = serialize_checkpoint(init_checkpoint(small_config()));
    bytes[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bytes), BadMagicError);
}

TEST(CheckpointFormat, VersionMismatch) {
    Split s = split_file(serialize_checkpoint(init_checkpoint(small_config())));
    s.header["format_version"] = 2;
    EXPECT_THROW(deserialize_checkpoint(join_file(s)), VersionError);
}

TEST(CheckpointFormat, MissingTensorIsNamed) {
    Split s = split_file(serialize_checkpoint(init_checkpoint(small_config())));
    auto& tensors = s.header["tensors"];
    for (auto it = tensors.begin(); it != tensors.end(); ++it) {
        if ((*it)["name"] == "layers.1.experts.4.w_out") {
            tensors.erase(it);
            break;
        }
    }
    try {
        deserialize_checkpoint(join_file(s));
        FAIL() << "expected ConsistencyError";
    } catch (const ConsistencyError& e) {
        EXPECT_NE(std::string(e.what()).find("layers.1.experts.4.w_out"), std::string::npos) << e.what();
    }
}

TEST(CheckpointFormat, ShapeAndTrailingBytes) {
    Split s = split_file(serialize_checkpoint(init_checkpoint(small_config())));
    Split bad_shape = s;
    bad_shape.header["tensors"][1]["shape"] = {15, 16};
    EXPECT_THROW(deserialize_checkpoint(join_file(bad_shape)), ConsistencyError);

    Split trailing = s;
    trailing.blob.insert(trailing.blob.end(), {0, 0, 0, 0});
    EXPECT_THROW(deserialize_checkpoint(join_file(trailing)), ConsistencyError);

    Split bad_config = s;
    bad_config.header["config"]["top_k"] = 9;
    EXPECT_THROW(deserialize_checkpoint(join_file(bad_config)), ConsistencyError);
}

TEST(CheckpointFormat, UnknownConfigKeyRejected) {
    nlohmann::json j = model_config_to_json(small_config());
    EXPECT_EQ(model_config_from_json(j), small_config());
    j["n_experts"] = 4;
    EXPECT_THROW(model_config_from_json(j), ParameterError);
}
