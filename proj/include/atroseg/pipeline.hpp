#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "atroseg/data.hpp"
#include "atroseg/model.hpp"

namespace atroseg {

struct TrainConfig {
    int epochs = 100;
    double initial_lr = 0.1;
    int lr_drop_epoch = 70;
    double dropped_lr = 0.01;
    double momentum = 0.9;
    int batch_size = 8;
    std::uint64_t seed = 7;
    bool augment = false;
    int max_stages = 3;
    double saturation_delta = 0.001;
    std::int64_t input_size = 256;

    void validate() const;
};

// Step schedule: initial_lr before lr_drop_epoch, dropped_lr from then on.
double lr_schedule(int epoch, const TrainConfig& config);

// out = clamp(contrast*(v-0.5) + 0.5 + brightness, 0, 1)
void apply_brightness_contrast(std::vector<float>& image, float contrast, float brightness);

// contrast ~ U[0.8,1.2], brightness ~ U[-0.2,0.2], in that draw order;
// masks are not touched.
void augment_image(std::vector<float>& image, Rng& rng);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;  // mean over the epoch's batch losses
    double val_jsc = 0.0;     // mean validation Jaccard, inference mode
};

struct StageArtifact {
    int stage_index = 1;
    std::filesystem::path checkpoint_path;
    std::vector<EpochRecord> history;
    int best_epoch = 0;          // epoch with the highest validation JSC
    double best_val_jsc = 0.0;   // drives the saturation stopping rule
    // final-model validation metrics (pixel units at training resolution)
    double val_jsc = 0.0;
    double val_dc = 0.0;
    std::optional<double> val_acd;
    std::optional<double> val_asd;
    // full-resolution foreground probability per sample id, values in [0,1]
    std::map<std::string, std::vector<float>> prob_cache;
};

// Trains a fresh model for one cascade stage. Samples must share one square
// resolution; stage_index > 1 requires `prev` with cached maps covering every
// train and validation sample. Writes stage<k>.ckpt and stage<k>_epochs.csv
// into out_dir.
StageArtifact train_stage(const std::vector<SegmentationSample>& train,
                          const std::vector<SegmentationSample>& val, int stage_index,
                          const StageArtifact* prev, const TrainConfig& config,
                          const ModelConfig& base_model, const std::filesystem::path& out_dir);

// Runs stages 1..max_stages, stopping early once the best-epoch validation
// JSC improves by less than saturation_delta over the previous stage. Samples
// are resized to config.input_size; writes stages.csv into out_dir.
std::vector<StageArtifact> networkwise_train(std::vector<SegmentationSample> train,
                                             std::vector<SegmentationSample> val,
                                             const TrainConfig& config, const ModelConfig& base_model,
                                             const std::filesystem::path& out_dir);

void write_stage_summary_csv(const std::vector<StageArtifact>& artifacts,
                             const std::filesystem::path& path);

}  // namespace atroseg
