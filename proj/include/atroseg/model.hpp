#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "atroseg/errors.hpp"
#include "atroseg/layers.hpp"

namespace atroseg {

struct BlockSpec {
    std::int64_t channels = 0;
    std::int64_t stride = 1;
    std::int64_t rate = 1;
    bool operator==(const BlockSpec&) const = default;
};

// Declarative architecture: 3 stem convs, 6 residual blocks (two of them
// stride 2 for a global stride of 4, the last two dilated), 1x1 head to two
// classes, bilinear upsampling back to input resolution.
struct ModelConfig {
    std::int64_t in_channels = 1;
    std::vector<std::int64_t> stem_channels{16, 16, 16};
    std::vector<BlockSpec> blocks{{16, 2, 1}, {16, 1, 1}, {32, 2, 1}, {32, 1, 1}, {64, 1, 3}, {64, 1, 3}};
    std::int64_t kernel = 3;
    std::int64_t upsample_factor = 4;
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.9;

    void validate() const;  // throws ConfigError naming the violated rule
    bool operator==(const ModelConfig&) const = default;
};

struct ForwardStats {
    std::int64_t stem_convs = 0;
    std::int64_t block_convs = 0;
    std::int64_t projection_convs = 0;
    std::int64_t head_convs = 0;
};

class Model {
public:
    ModelConfig config;
    int stage_index = 1;

    std::vector<ConvLayer<float>> stem;
    std::vector<BatchNormLayer<float>> stem_bn;
    std::vector<ResidualBlock<float>> blocks;
    ConvLayer<float> head;

    // quarter-resolution class logits
    TensorPtr<float> forward_logits(Graph<float>& g, const TensorPtr<float>& x, bool training,
                                    ForwardStats* stats = nullptr) const;

    std::vector<std::pair<std::string, TensorPtr<float>>> named_parameters() const;
    std::vector<std::pair<std::string, TensorPtr<float>>> named_tensors() const;  // + running stats
    std::vector<TensorPtr<float>> parameters() const;
};

Model build_model(const ModelConfig& config, std::uint64_t seed, int stage_index = 1);

enum class CountPolicy {
    TrainableAll,  // conv weights + biases + batch-norm gamma/beta (default)
    ConvOnly,      // conv weights + biases
};

struct ParameterCount {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> per_layer;
};

ParameterCount count_parameters(const Model& model, CountPolicy policy = CountPolicy::TrainableAll);

// Full-resolution class probabilities (N,2,H,W); prev_prob is required for
// stage_index > 1 and rejected otherwise.
TensorPtr<float> predict(const Model& model, const TensorPtr<float>& image,
                         const TensorPtr<float>& prev_prob = nullptr);

// Checkpoint file: magic "ASEG", version, config, named tensor table of
// little-endian IEEE-754 floats, trailing CRC-32.
struct CheckpointError : IoError {
    enum class Code { BadMagic, BadVersion, BadChecksum, BadStructure };
    CheckpointError(Code code, const std::string& msg) : IoError(msg), code(code) {}
    Code code;
};

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32(const unsigned char* data, std::size_t size);

}  // namespace atroseg
