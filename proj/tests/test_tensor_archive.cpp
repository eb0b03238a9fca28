#include <cstring>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"

namespace ap = analogy_probe;

namespace {

std::uint32_t bits(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}

} // namespace

TEST(tensor_archive, round_trip_is_bit_exact) {
    ap::TensorArchive a;
    a.put("w", {2, 2}, {1.5f, -0.0f, 3.4028235e38f, 1e-45f});
    a.put("b", {3}, {0.1f, 0.2f, 0.3f});
    const auto bytes = ap::serialize_archive(a);
    const auto back = ap::parse_archive(bytes);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.at("w").shape, (std::vector<std::int64_t>{2, 2}));
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(bits(back.at("w").values[i]), bits(a.at("w").values[i]));
    }
    EXPECT_EQ(ap::serialize_archive(back), bytes);
}

TEST(tensor_archive, layout_matches_the_documented_format) {
    ap::TensorArchive a;
    a.put("x", {1}, {1.0f});
    const auto bytes = ap::serialize_archive(a);
    ASSERT_EQ(bytes.substr(0, 6), "TARC1\n");
    std::uint64_t len = 0;
    for (int i = 7; i >= 0; --i) {
        len = (len << 8) | static_cast<unsigned char>(bytes[6 + i]);
    }
    const auto header = nlohmann::json::parse(bytes.substr(14, len));
    EXPECT_EQ(header["x"]["dtype"], "f32");
    EXPECT_EQ(header["x"]["offset"], 0);
    const std::string payload = bytes.substr(14 + len);
    ASSERT_EQ(payload.size(), 4u);
    // 1.0f little-endian
    EXPECT_EQ(static_cast<unsigned char>(payload[3]), 0x3f);
    EXPECT_EQ(static_cast<unsigned char>(payload[2]), 0x80);
}

TEST(tensor_archive, truncated_payload_names_the_problem) {
    ap::TensorArchive a;
    a.put("w", {2, 2}, {1, 2, 3, 4});
    auto bytes = ap::serialize_archive(a);
    bytes.resize(bytes.size() - 4);
    try {
        ap::parse_archive(bytes);
        FAIL() << "expected FormatError";
    } catch (const ap::FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos);
    }
}

TEST(tensor_archive, bad_magic_and_header_are_rejected) {
    EXPECT_THROW(ap::parse_archive("TARC2\n"), ap::FormatError);
    std::string bytes = "TARC1\n";
    bytes += std::string("\x05\0\0\0\0\0\0\0", 8);
    bytes += "{oops";
    EXPECT_THROW(ap::parse_archive(bytes), ap::FormatError);
}

TEST(tensor_archive, empty_archive_is_a_config_error_for_models) {
    const auto bytes = ap::serialize_archive(ap::TensorArchive{});
    const auto empty = ap::parse_archive(bytes);
    EXPECT_TRUE(empty.empty());
    const auto m = fixtures::toy_model(1, 1, 1, 8);
    EXPECT_THROW(ap::Model::from_archive(m.config, empty, m.vocab), ap::ValidationError);
}

TEST(tensor_archive, shape_mismatch_names_the_tensor) {
    const auto m = fixtures::toy_model(1, 1, 1, 8);
    auto arch = m.to_archive();
    arch.put("layers.0.wq", {4, 16}, std::vector<float>(64, 0.0f));
    try {
        ap::Model::from_archive(m.config, arch, m.vocab);
        FAIL() << "expected ValidationError";
    } catch (const ap::ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("layers.0.wq"), std::string::npos);
    }
}

TEST(tensor_archive, model_directory_round_trip) {
    fixtures::ScratchDir dir("model");
    const auto m = fixtures::toy_model(3, 2, 2, 8);
    ap::save_model_dir(m, dir.path());
    const auto back = ap::load_model_dir(dir.path());
    EXPECT_EQ(back.config.n_layers, 2);
    EXPECT_EQ(back.tok_embeddings, m.tok_embeddings);
    EXPECT_EQ(back.layers[1].w_down, m.layers[1].w_down);
    EXPECT_EQ(back.vocab.size(), m.vocab.size());
    const std::vector<int> prompt{5, 300, 12};
    EXPECT_EQ(ap::forward(back, prompt).logits_last, ap::forward(m, prompt).logits_last);
}
