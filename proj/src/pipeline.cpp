#include "atroseg/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "atroseg/errors.hpp"
#include "atroseg/optim.hpp"

namespace atroseg {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be positive");
    if (!(initial_lr > 0.0) || !(dropped_lr > 0.0))
        throw ConfigError("TrainConfig: learning rates must be positive");
    if (lr_drop_epoch < 0) throw ConfigError("TrainConfig: lr_drop_epoch must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("TrainConfig: momentum must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be positive");
    if (max_stages < 1) throw ConfigError("TrainConfig: max_stages must be positive");
    if (!(saturation_delta >= 0.0)) throw ConfigError("TrainConfig: saturation_delta must be >= 0");
    if (input_size < 8) throw ConfigError("TrainConfig: input_size must be at least 8");
}

double lr_schedule(int epoch, const TrainConfig& config) {
    if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
    return epoch < config.lr_drop_epoch ? config.initial_lr : config.dropped_lr;
}

void apply_brightness_contrast(std::vector<float>& image, float contrast, float brightness) {
    for (float& v : image)
        v = std::clamp(contrast * (v - 0.5f) + 0.5f + brightness, 0.0f, 1.0f);
}

void augment_image(std::vector<float>& image, Rng& rng) {
    const float contrast = static_cast<float>(rng.uniform(0.8, 1.2));
    const float brightness = static_cast<float>(rng.uniform(-0.2, 0.2));
    apply_brightness_contrast(image, contrast, brightness);
}

namespace {

std::string fmt(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

void check_square(const std::vector<SegmentationSample>& samples, const char* which) {
    for (const auto& s : samples)
        if (s.width != s.height)
            throw std::invalid_argument(std::string("train_stage: ") + which + " sample " + s.id +
                                        " is not square");
}

TensorPtr<float> sample_image_tensor(const SegmentationSample& s) {
    return make_tensor<float>(Shape(1, 1, s.height, s.width), s.image, false);
}

TensorPtr<float> cached_prob_tensor(const StageArtifact& prev, const SegmentationSample& s) {
    return make_tensor<float>(Shape(1, 1, s.height, s.width), prev.prob_cache.at(s.id), false);
}

// foreground probability plane for one sample under the stage's model
std::vector<float> infer_foreground(const Model& model, const SegmentationSample& s,
                                    const StageArtifact* prev) {
    auto probs = model.stage_index > 1 ? predict(model, sample_image_tensor(s), cached_prob_tensor(*prev, s))
                                       : predict(model, sample_image_tensor(s));
    const std::int64_t plane = s.height * s.width;
    const float* fg = probs->data.data() + plane;  // channel 1
    return std::vector<float>(fg, fg + plane);
}

double mean_val_jsc(const Model& model, const std::vector<SegmentationSample>& val,
                    const StageArtifact* prev) {
    double sum = 0.0;
    for (const auto& s : val) {
        const auto fg = infer_foreground(model, s, prev);
        sum += jaccard(binarize(fg, s.height, s.width), s.mask);
    }
    return sum / static_cast<double>(val.size());
}

}  // namespace

StageArtifact train_stage(const std::vector<SegmentationSample>& train,
                          const std::vector<SegmentationSample>& val, int stage_index,
                          const StageArtifact* prev, const TrainConfig& config,
                          const ModelConfig& base_model, const std::filesystem::path& out_dir) {
    config.validate();
    if (train.empty() || val.empty())
        throw std::invalid_argument("train_stage: training and validation sets must be non-empty");
    if (stage_index < 1) throw std::invalid_argument("train_stage: stage_index must be >= 1");
    if ((stage_index > 1) != (prev != nullptr))
        throw std::invalid_argument("train_stage: prev artifact required iff stage_index > 1");
    check_square(train, "training");
    check_square(val, "validation");
    if (prev) {
        for (const auto* set : {&train, &val})
            for (const auto& s : *set)
                if (!prev->prob_cache.count(s.id))
                    throw std::invalid_argument("train_stage: missing cached probability map for sample " +
                                                s.id);
    }

    ModelConfig cfg = base_model;
    cfg.in_channels = stage_index > 1 ? 2 : 1;
    Model model = build_model(cfg, Rng::mix(config.seed, 0x6D6F64656Cull + stage_index), stage_index);
    auto params = model.parameters();
    SgdMomentum<float> optimizer(config.initial_lr, config.momentum);

    std::filesystem::create_directories(out_dir);
    StageArtifact artifact;
    artifact.stage_index = stage_index;

    const std::int64_t H = train.front().height, W = train.front().width;
    const std::int64_t plane = H * W;

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, config);
        optimizer.set_learning_rate(lr);

        Rng shuffle_rng(Rng::mix(Rng::mix(config.seed, 0x73687566ull + stage_index), epoch));
        Rng aug_rng(Rng::mix(Rng::mix(config.seed, 0x61756721ull + stage_index), epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t count = std::min<std::size_t>(config.batch_size, order.size() - start);
            const std::int64_t B = static_cast<std::int64_t>(count);
            auto x = make_tensor<float>(Shape(B, cfg.in_channels, H, W), false);
            auto target = make_tensor<float>(Shape(B, 1, H, W), false);
            for (std::size_t k = 0; k < count; ++k) {
                const SegmentationSample& s = train[order[start + k]];
                std::vector<float> image = s.image;
                if (config.augment) augment_image(image, aug_rng);
                std::copy(image.begin(), image.end(),
                          x->data.begin() + static_cast<std::int64_t>(k) * cfg.in_channels * plane);
                if (cfg.in_channels == 2) {
                    const auto& cached = prev->prob_cache.at(s.id);
                    std::copy(cached.begin(), cached.end(),
                              x->data.begin() + (static_cast<std::int64_t>(k) * 2 + 1) * plane);
                }
                for (std::int64_t i = 0; i < plane; ++i)
                    target->data[static_cast<std::int64_t>(k) * plane + i] =
                        static_cast<float>(s.mask.values[i]);
            }

            Graph<float> g;
            auto logits = model.forward_logits(g, x, /*training=*/true);
            auto upsampled = bilinear_resize(g, logits, H, W);
            auto ce = softmax_cross_entropy(g, upsampled, target);
            const double batch_loss = ce.loss->data[0];
            if (!std::isfinite(batch_loss))
                throw DivergenceError(stage_index, epoch, batches, lr,
                                      "train_stage: non-finite loss at stage " +
                                          std::to_string(stage_index) + ", epoch " +
                                          std::to_string(epoch) + ", batch " + std::to_string(batches) +
                                          ", lr " + fmt(lr));
            g.backward(ce.loss);
            optimizer.step(params);
            loss_sum += batch_loss;
            ++batches;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / batches;
        rec.val_jsc = mean_val_jsc(model, val, prev);
        artifact.history.push_back(rec);
    }

    artifact.best_epoch = 0;
    for (std::size_t e = 0; e < artifact.history.size(); ++e)
        if (artifact.history[e].val_jsc > artifact.history[artifact.best_epoch].val_jsc)
            artifact.best_epoch = static_cast<int>(e);
    artifact.best_val_jsc = artifact.history[artifact.best_epoch].val_jsc;

    // final-model metrics over the validation fold
    {
        std::vector<SampleMetrics> rows;
        for (const auto& s : val) {
            const auto fg = infer_foreground(model, s, prev);
            rows.push_back(evaluate_sample(s.id, binarize(fg, s.height, s.width), s.mask));
        }
        const MetricsReport report = make_report(std::move(rows), "px", 1.0,
                                                 std::to_string(H) + "x" + std::to_string(W));
        artifact.val_jsc = report.agg_jsc.mean;
        artifact.val_dc = report.agg_dc.mean;
        if (report.agg_acd.count > 0) {
            artifact.val_acd = report.agg_acd.mean;
            artifact.val_asd = report.agg_asd.mean;
        }
    }

    // inference-mode probability maps feeding the next stage
    for (const auto* set : {&train, &val})
        for (const auto& s : *set) artifact.prob_cache[s.id] = infer_foreground(model, s, prev);

    artifact.checkpoint_path = out_dir / ("stage" + std::to_string(stage_index) + ".ckpt");
    save_checkpoint(model, artifact.checkpoint_path);

    std::ofstream csv(out_dir / ("stage" + std::to_string(stage_index) + "_epochs.csv"),
                      std::ios::trunc);
    if (!csv) throw IoError("train_stage: cannot write epoch log");
    csv << "epoch,lr,train_loss,val_jsc\n";
    for (const auto& r : artifact.history)
        csv << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.train_loss) << ',' << fmt(r.val_jsc) << "\n";

    return artifact;
}

std::vector<StageArtifact> networkwise_train(std::vector<SegmentationSample> train,
                                             std::vector<SegmentationSample> val,
                                             const TrainConfig& config, const ModelConfig& base_model,
                                             const std::filesystem::path& out_dir) {
    config.validate();
    for (auto* set : {&train, &val})
        for (auto& s : *set)
            if (s.width != config.input_size || s.height != config.input_size)
                s = resize_sample(s, config.input_size);

    std::vector<StageArtifact> artifacts;
    for (int stage = 1; stage <= config.max_stages; ++stage) {
        const StageArtifact* prev = stage > 1 ? &artifacts.back() : nullptr;
        artifacts.push_back(train_stage(train, val, stage, prev, config, base_model, out_dir));
        if (stage >= 2) {
            const double improvement =
                artifacts[stage - 1].best_val_jsc - artifacts[stage - 2].best_val_jsc;
            if (improvement < config.saturation_delta) break;
        }
    }
    write_stage_summary_csv(artifacts, out_dir / "stages.csv");
    return artifacts;
}

void write_stage_summary_csv(const std::vector<StageArtifact>& artifacts,
                             const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_stage_summary_csv: cannot open " + path.string());
    out << "stage,best_epoch,val_jsc,val_dc,val_acd,val_asd\n";
    for (const auto& a : artifacts) {
        out << a.stage_index << ',' << a.best_epoch << ',' << fmt(a.best_val_jsc) << ','
            << fmt(a.val_dc) << ',';
        if (a.val_acd) out << fmt(*a.val_acd);
        out << ',';
        if (a.val_asd) out << fmt(*a.val_asd);
        out << "\n";
    }
    if (!out) throw IoError("write_stage_summary_csv: write failed");
}

}  // namespace atroseg
