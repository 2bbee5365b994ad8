#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "atroseg/pipeline.hpp"

using namespace atroseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("pipeline_test_" + std::to_string(::getpid()))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<SegmentationSample> phantoms(int count, std::int64_t size, std::uint64_t salt) {
    std::vector<SegmentationSample> out;
    for (int i = 1; i <= count; ++i) {
        Rng rng(Rng::mix(salt, static_cast<std::uint64_t>(i)));
        out.push_back(synth_phantom(rng, size, "phantom_" + std::to_string(i)));
    }
    return out;
}

std::string file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.input_size = 32;
    cfg.max_stages = 1;
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("lr_schedule is a step function with one discontinuity") {
    TrainConfig cfg;
    CHECK(lr_schedule(0, cfg) == 0.1);
    CHECK(lr_schedule(69, cfg) == 0.1);
    CHECK(lr_schedule(70, cfg) == 0.01);
    CHECK(lr_schedule(500, cfg) == 0.01);
    cfg.lr_drop_epoch = 0;
    CHECK(lr_schedule(0, cfg) == 0.01);
    CHECK_THROWS_AS(lr_schedule(-1, cfg), std::invalid_argument);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.saturation_delta = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.lr_drop_epoch = 200;  // drop past the end is allowed; it just never triggers
    cfg.epochs = 100;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("brightness/contrast adjustment") {
    SUBCASE("identity parameters change nothing") {
        std::vector<float> image{0.0f, 0.25f, 0.5f, 1.0f};
        auto copy = image;
        apply_brightness_contrast(image, 1.0f, 0.0f);
        CHECK(image == copy);
    }
    SUBCASE("constant 0.5 with brightness 0.2 becomes 0.7") {
        std::vector<float> image(16, 0.5f);
        apply_brightness_contrast(image, 1.0f, 0.2f);
        for (float v : image) CHECK(v == doctest::Approx(0.7f).epsilon(1e-7));
    }
    SUBCASE("output is always clamped to [0,1]") {
        Rng rng(7);
        std::vector<float> image(64);
        for (float& v : image) v = static_cast<float>(rng.next_double());
        for (int trial = 0; trial < 50; ++trial) {
            auto copy = image;
            augment_image(copy, rng);
            for (float v : copy) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
        }
    }
}

TEST_CASE("train_stage is deterministic: same seeds and data give bit-identical checkpoints") {
    TempDir tmp;
    const auto train = phantoms(8, 32, 1);
    const auto val = phantoms(4, 32, 2);
    const TrainConfig cfg = tiny_config();

    fs::create_directories(tmp.path / "a");
    fs::create_directories(tmp.path / "b");
    train_stage(train, val, 1, nullptr, cfg, ModelConfig{}, tmp.path / "a");
    train_stage(train, val, 1, nullptr, cfg, ModelConfig{}, tmp.path / "b");
    CHECK(file_bytes(tmp.path / "a/stage1.ckpt") == file_bytes(tmp.path / "b/stage1.ckpt"));
    CHECK(file_bytes(tmp.path / "a/stage1_epochs.csv") == file_bytes(tmp.path / "b/stage1_epochs.csv"));
}

TEST_CASE("training loss decreases over the first epochs on the committed fixture") {
    TempDir tmp;
    const auto train = phantoms(16, 32, 3);
    const auto val = phantoms(4, 32, 4);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 5;
    const auto artifact = train_stage(train, val, 1, nullptr, cfg, ModelConfig{}, tmp.path);
    REQUIRE(artifact.history.size() == 5);
    CHECK(artifact.history.back().train_loss < artifact.history.front().train_loss);
    for (const auto& rec : artifact.history) CHECK(rec.lr == 0.1);
}

TEST_CASE("stage artifacts cache in-range probability maps for every sample") {
    TempDir tmp;
    const auto train = phantoms(6, 32, 5);
    const auto val = phantoms(3, 32, 6);
    const auto artifact = train_stage(train, val, 1, nullptr, tiny_config(), ModelConfig{}, tmp.path);
    CHECK(artifact.prob_cache.size() == 9);
    for (const auto* set : {&train, &val})
        for (const auto& s : *set) {
            REQUIRE(artifact.prob_cache.count(s.id));
            const auto& map = artifact.prob_cache.at(s.id);
            CHECK(map.size() == 32 * 32);
            for (float v : map) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
        }
}

TEST_CASE("stage 2 consumes a two-channel input and demands complete caches") {
    TempDir tmp;
    const auto train = phantoms(6, 32, 7);
    const auto val = phantoms(3, 32, 8);
    const TrainConfig cfg = tiny_config();
    auto stage1 = train_stage(train, val, 1, nullptr, cfg, ModelConfig{}, tmp.path);

    SUBCASE("prev is required iff stage_index > 1") {
        CHECK_THROWS_AS(train_stage(train, val, 2, nullptr, cfg, ModelConfig{}, tmp.path),
                        std::invalid_argument);
        CHECK_THROWS_AS(train_stage(train, val, 1, &stage1, cfg, ModelConfig{}, tmp.path),
                        std::invalid_argument);
    }
    SUBCASE("missing cache entries are reported") {
        StageArtifact broken = stage1;
        broken.prob_cache.erase(val[0].id);
        CHECK_THROWS_WITH_AS(train_stage(train, val, 2, &broken, cfg, ModelConfig{}, tmp.path),
                             doctest::Contains("missing cached probability map"), std::invalid_argument);
    }
    SUBCASE("the stage-2 model's first conv has in_channels 2") {
        auto stage2 = train_stage(train, val, 2, &stage1, cfg, ModelConfig{}, tmp.path);
        const Model loaded = load_checkpoint(stage2.checkpoint_path);
        CHECK(loaded.config.in_channels == 2);
        CHECK(loaded.stage_index == 2);
        CHECK(loaded.stem[0].weight->shape.c() == 2);
    }
}

TEST_CASE("networkwise_train stage control") {
    TempDir tmp;
    const auto train = phantoms(8, 32, 9);
    const auto val = phantoms(4, 32, 10);

    SUBCASE("max_stages 1 trains exactly one artifact") {
        TrainConfig cfg = tiny_config();
        const auto artifacts = networkwise_train(train, val, cfg, ModelConfig{}, tmp.path / "one");
        CHECK(artifacts.size() == 1);
        CHECK(fs::exists(tmp.path / "one/stages.csv"));
    }
    SUBCASE("an unreachable improvement threshold stops after the stage-2 comparison") {
        TrainConfig cfg = tiny_config();
        cfg.max_stages = 5;
        cfg.saturation_delta = 1e9;
        const auto artifacts = networkwise_train(train, val, cfg, ModelConfig{}, tmp.path / "sat");
        CHECK(artifacts.size() == 2);
    }
    SUBCASE("stage summary has one row per executed stage") {
        TrainConfig cfg = tiny_config();
        cfg.max_stages = 2;
        cfg.saturation_delta = 0.0;
        const auto artifacts = networkwise_train(train, val, cfg, ModelConfig{}, tmp.path / "two");
        std::ifstream in(tmp.path / "two/stages.csv");
        std::string line;
        std::getline(in, line);
        CHECK(line == "stage,best_epoch,val_jsc,val_dc,val_acd,val_asd");
        int rows = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == static_cast<int>(artifacts.size()));
    }
}

TEST_CASE("non-finite loss aborts with stage/epoch/batch diagnostics") {
    TempDir tmp;
    const auto train = phantoms(8, 32, 11);
    const auto val = phantoms(2, 32, 12);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.initial_lr = 1e18;
    try {
        train_stage(train, val, 1, nullptr, cfg, ModelConfig{}, tmp.path);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.stage == 1);
        CHECK(e.epoch >= 0);
        CHECK(e.batch >= 0);
        CHECK(e.lr == 1e18);
        CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
    }
}

TEST_CASE("empty sets are rejected") {
    TempDir tmp;
    const auto train = phantoms(4, 32, 13);
    CHECK_THROWS_AS(train_stage({}, train, 1, nullptr, tiny_config(), ModelConfig{}, tmp.path),
                    std::invalid_argument);
    CHECK_THROWS_AS(train_stage(train, {}, 1, nullptr, tiny_config(), ModelConfig{}, tmp.path),
                    std::invalid_argument);
}
