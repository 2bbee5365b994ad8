#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "atroseg/model.hpp"

using namespace atroseg;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kDefaultParamCount = 179410;      // regression constant
constexpr std::int64_t kDefaultConvOnlyCount = 178194;   // regression constant
constexpr std::int64_t kPaperWeightTarget = 120672;      // reported for comparison

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("segnet_test_" + std::to_string(::getpid()))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TensorPtr<float> random_image(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    auto t = make_tensor<float>(shape);
    for (float& v : t->data) v = static_cast<float>(rng.next_double());
    return t;
}

}  // namespace

TEST_CASE("build_model is deterministic for a fixed seed") {
    Model a = build_model(ModelConfig{}, 7, 1);
    Model b = build_model(ModelConfig{}, 7, 1);
    const auto ta = a.named_tensors(), tb = b.named_tensors();
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) {
        CHECK(ta[i].first == tb[i].first);
        CHECK(ta[i].second->data == tb[i].second->data);
    }
    Model c = build_model(ModelConfig{}, 8, 1);
    CHECK(c.stem[0].weight->data != a.stem[0].weight->data);
}

TEST_CASE("config invariants are enforced with named rules") {
    SUBCASE("five blocks rejected") {
        ModelConfig cfg;
        cfg.blocks.pop_back();
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("exactly 6 residual blocks"),
                             ConfigError);
    }
    SUBCASE("wrong stem count rejected") {
        ModelConfig cfg;
        cfg.stem_channels = {16, 16};
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("exactly 3 stem"), ConfigError);
    }
    SUBCASE("rate layout pinned to the final two blocks") {
        ModelConfig cfg;
        cfg.blocks[0].rate = 3;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        ModelConfig cfg2;
        cfg2.blocks[5].rate = 1;
        CHECK_THROWS_AS(cfg2.validate(), ConfigError);
    }
    SUBCASE("exactly two stride-2 blocks") {
        ModelConfig cfg;
        cfg.blocks[1].stride = 2;
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("stride 2"), ConfigError);
    }
    SUBCASE("stage/in_channels consistency") {
        CHECK_THROWS_AS(build_model(ModelConfig{}, 7, 2), ConfigError);
        ModelConfig cfg;
        cfg.in_channels = 2;
        CHECK_THROWS_AS(build_model(cfg, 7, 1), ConfigError);
        CHECK_NOTHROW(build_model(cfg, 7, 2));
    }
}

TEST_CASE("default config forward: global stride 4, x4 upsampled probabilities, 15 convs") {
    Model model = build_model(ModelConfig{}, 7, 1);
    auto image = random_image(Shape(1, 1, 256, 256), 3);

    Graph<float> g(false);
    ForwardStats stats;
    auto logits = model.forward_logits(g, image, false, &stats);
    CHECK(logits->shape == Shape(1, 2, 64, 64));
    CHECK(stats.stem_convs + stats.block_convs == 15);
    CHECK(stats.stem_convs == 3);
    CHECK(stats.block_convs == 12);
    CHECK(stats.projection_convs == 3);
    CHECK(stats.head_convs == 1);

    auto probs = predict(model, image);
    CHECK(probs->shape == Shape(1, 2, 256, 256));
    const std::int64_t plane = 256 * 256;
    for (std::int64_t i = 0; i < plane; i += 997)
        CHECK(probs->data[i] + probs->data[plane + i] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dilated blocks keep 3x3 weights while reaching effective extent 7") {
    Model model = build_model(ModelConfig{}, 7, 1);
    const ConvSpec& last = model.blocks[5].conv2.spec;
    CHECK(last.rate == 3);
    CHECK(last.kernel == 3);
    CHECK(last.effective_kernel() == 7);
    CHECK(model.blocks[5].conv2.weight->shape.h() == 3);
    CHECK(model.blocks[5].conv2.weight->shape.w() == 3);
}

TEST_CASE("parameter counting") {
    SUBCASE("a single 3x3 conv 1->16 without bias counts 144 weights") {
        Rng rng(1);
        auto layer = make_conv_layer<float>(rng, ConvSpec{1, 16, 3, 1, 1, 1, false});
        CHECK(layer.weight->numel() == 144);
    }
    SUBCASE("default config regression constants and paper target") {
        Model model = build_model(ModelConfig{}, 7, 1);
        const ParameterCount all = count_parameters(model);
        CHECK(all.total == kDefaultParamCount);
        CHECK(count_parameters(model, CountPolicy::ConvOnly).total == kDefaultConvOnlyCount);
        CHECK(count_parameters(model).total == all.total);  // deterministic
        CHECK(kPaperWeightTarget == 120672);
        std::int64_t from_layers = 0;
        for (const auto& [name, n] : all.per_layer) from_layers += n;
        CHECK(from_layers == all.total);
    }
}

TEST_CASE("predict enforces the cascade contract") {
    Model stage1 = build_model(ModelConfig{}, 7, 1);
    auto image = random_image(Shape(1, 1, 64, 64), 5);
    auto prev = random_image(Shape(1, 1, 64, 64), 6);
    CHECK_THROWS_AS(predict(stage1, image, prev), std::invalid_argument);

    ModelConfig cfg2;
    cfg2.in_channels = 2;
    Model stage2 = build_model(cfg2, 7, 2);
    CHECK_THROWS_AS(predict(stage2, image), std::invalid_argument);
    auto probs = predict(stage2, image, prev);
    CHECK(probs->shape == Shape(1, 2, 64, 64));
}

TEST_CASE("predict is bit-identical across runs for a fixed seed and input") {
    Model model = build_model(ModelConfig{}, 7, 1);
    auto image = random_image(Shape(1, 1, 64, 64), 11);
    auto a = predict(model, image);
    auto b = predict(model, image);
    CHECK(a->data == b->data);
}

TEST_CASE("checkpoint round trip") {
    TempDir tmp;
    Model model = build_model(ModelConfig{}, 7, 1);
    const fs::path path = tmp.path / "model.ckpt";
    save_checkpoint(model, path);

    SUBCASE("load reproduces every tensor bit-exactly and the parameter count") {
        Model loaded = load_checkpoint(path);
        CHECK(loaded.stage_index == model.stage_index);
        CHECK(loaded.config == model.config);
        const auto ta = model.named_tensors(), tb = loaded.named_tensors();
        REQUIRE(ta.size() == tb.size());
        for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i].second->data == tb[i].second->data);
        CHECK(count_parameters(loaded).total == count_parameters(model).total);
    }
    SUBCASE("save -> load -> save produces byte-identical files") {
        Model loaded = load_checkpoint(path);
        const fs::path again = tmp.path / "model2.ckpt";
        save_checkpoint(loaded, again);
        std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(f1)), {});
        std::string b2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(b1 == b2);
        CHECK(!b1.empty());
    }
    SUBCASE("truncated file fails the checksum with no partial model") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        const fs::path cut = tmp.path / "cut.ckpt";
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        try {
            load_checkpoint(cut);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::BadChecksum);
        }
    }
    SUBCASE("bad magic") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        bytes[0] = 'X';
        const fs::path bad = tmp.path / "bad_magic.ckpt";
        std::ofstream out(bad, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        try {
            load_checkpoint(bad);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::BadMagic);
        }
    }
    SUBCASE("version mismatch") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        bytes[4] = 99;  // little-endian version field follows the magic
        const fs::path bad = tmp.path / "bad_version.ckpt";
        std::ofstream out(bad, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        try {
            load_checkpoint(bad);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::BadVersion);
        }
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "nope.ckpt"), IoError);
    }
}

TEST_CASE("crc32 matches the published check value") {
    const char* s = "123456789";
    CHECK(crc32(reinterpret_cast<const unsigned char*>(s), 9) == 0xCBF43926u);
}
