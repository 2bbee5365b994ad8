#include "atroseg/model.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include "atroseg/errors.hpp"

namespace atroseg {

void ModelConfig::validate() const {
    if (in_channels != 1 && in_channels != 2)
        throw ConfigError("ModelConfig: in_channels must be 1 (stage 1) or 2 (later stages)");
    if (stem_channels.size() != 3)
        throw ConfigError("ModelConfig: exactly 3 stem convolutions required, got " +
                          std::to_string(stem_channels.size()));
    if (blocks.size() != 6)
        throw ConfigError("ModelConfig: exactly 6 residual blocks required, got " +
                          std::to_string(blocks.size()));
    for (std::int64_t c : stem_channels)
        if (c < 1) throw ConfigError("ModelConfig: stem channel counts must be positive");
    std::int64_t stride2 = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const BlockSpec& b = blocks[i];
        if (b.channels < 1) throw ConfigError("ModelConfig: block channel counts must be positive");
        if (b.stride != 1 && b.stride != 2)
            throw ConfigError("ModelConfig: block strides must be 1 or 2");
        if (b.stride == 2) ++stride2;
        const std::int64_t want_rate = i >= 4 ? 3 : 1;
        if (b.rate != want_rate)
            throw ConfigError("ModelConfig: the final 2 blocks must carry rate 3 and all earlier "
                              "blocks rate 1 (block " +
                              std::to_string(i + 1) + " has rate " + std::to_string(b.rate) + ")");
    }
    if (stride2 != 2)
        throw ConfigError("ModelConfig: exactly 2 blocks must have first-conv stride 2 (global stride "
                          "4), got " +
                          std::to_string(stride2));
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("ModelConfig: kernel extent must be odd");
    if (upsample_factor < 1) throw ConfigError("ModelConfig: upsample_factor must be positive");
    if (!(bn_epsilon > 0.0)) throw ConfigError("ModelConfig: bn_epsilon must be positive");
    if (!(bn_momentum > 0.0 && bn_momentum < 1.0))
        throw ConfigError("ModelConfig: bn_momentum must lie in (0,1)");
}

Model build_model(const ModelConfig& config, std::uint64_t seed, int stage_index) {
    config.validate();
    if (stage_index < 1) throw ConfigError("build_model: stage_index must be >= 1");
    const std::int64_t expected_in = stage_index > 1 ? 2 : 1;
    if (config.in_channels != expected_in)
        throw ConfigError("build_model: stage " + std::to_string(stage_index) + " requires in_channels " +
                          std::to_string(expected_in) + ", config has " +
                          std::to_string(config.in_channels));

    Model model;
    model.config = config;
    model.stage_index = stage_index;
    Rng rng(seed);

    std::int64_t in_ch = config.in_channels;
    for (std::int64_t out_ch : config.stem_channels) {
        ConvSpec spec{in_ch, out_ch, config.kernel, 1, 1, ConvSpec::same_padding(config.kernel, 1), false};
        model.stem.push_back(make_conv_layer<float>(rng, spec));
        model.stem_bn.push_back(make_batch_norm_layer<float>(out_ch, config.bn_epsilon, config.bn_momentum));
        in_ch = out_ch;
    }
    for (const BlockSpec& b : config.blocks) {
        model.blocks.push_back(make_residual_block<float>(rng, in_ch, b.channels, b.stride, b.rate,
                                                          config.kernel, config.bn_epsilon,
                                                          config.bn_momentum));
        in_ch = b.channels;
    }
    ConvSpec head{in_ch, 2, 1, 1, 1, 0, true};
    model.head = make_conv_layer<float>(rng, head);
    return model;
}

TensorPtr<float> Model::forward_logits(Graph<float>& g, const TensorPtr<float>& x, bool training,
                                       ForwardStats* stats) const {
    auto t = x;
    for (std::size_t i = 0; i < stem.size(); ++i) {
        t = relu(g, stem_bn[i].forward(g, stem[i].forward(g, t), training));
        if (stats) ++stats->stem_convs;
    }
    for (const auto& block : blocks) {
        t = block.forward(g, t, training);
        if (stats) {
            stats->block_convs += 2;
            if (block.has_projection) ++stats->projection_convs;
        }
    }
    t = head.forward(g, t);
    if (stats) ++stats->head_convs;
    return t;
}

std::vector<std::pair<std::string, TensorPtr<float>>> Model::named_parameters() const {
    std::vector<std::pair<std::string, TensorPtr<float>>> out;
    auto add_bn = [&](const std::string& prefix, const BatchNormLayer<float>& bn) {
        out.emplace_back(prefix + ".gamma", bn.gamma);
        out.emplace_back(prefix + ".beta", bn.beta);
    };
    for (std::size_t i = 0; i < stem.size(); ++i) {
        const std::string p = "stem" + std::to_string(i + 1);
        out.emplace_back(p + ".weight", stem[i].weight);
        add_bn(p + ".bn", stem_bn[i]);
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i + 1);
        const ResidualBlock<float>& b = blocks[i];
        out.emplace_back(p + ".conv1.weight", b.conv1.weight);
        add_bn(p + ".bn1", b.bn1);
        out.emplace_back(p + ".conv2.weight", b.conv2.weight);
        add_bn(p + ".bn2", b.bn2);
        if (b.has_projection) {
            out.emplace_back(p + ".proj.weight", b.proj.weight);
            add_bn(p + ".proj_bn", b.proj_bn);
        }
    }
    out.emplace_back("head.weight", head.weight);
    out.emplace_back("head.bias", head.bias);
    return out;
}

std::vector<std::pair<std::string, TensorPtr<float>>> Model::named_tensors() const {
    auto out = named_parameters();
    auto add_running = [&](const std::string& prefix, const BatchNormLayer<float>& bn) {
        out.emplace_back(prefix + ".running_mean", bn.running_mean);
        out.emplace_back(prefix + ".running_var", bn.running_var);
    };
    for (std::size_t i = 0; i < stem.size(); ++i)
        add_running("stem" + std::to_string(i + 1) + ".bn", stem_bn[i]);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i + 1);
        add_running(p + ".bn1", blocks[i].bn1);
        add_running(p + ".bn2", blocks[i].bn2);
        if (blocks[i].has_projection) add_running(p + ".proj_bn", blocks[i].proj_bn);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

std::vector<TensorPtr<float>> Model::parameters() const {
    std::vector<TensorPtr<float>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

ParameterCount count_parameters(const Model& model, CountPolicy policy) {
    ParameterCount count;
    for (const auto& [name, t] : model.named_parameters()) {
        if (policy == CountPolicy::ConvOnly &&
            (name.ends_with(".gamma") || name.ends_with(".beta")))
            continue;
        count.per_layer.emplace_back(name, t->numel());
        count.total += t->numel();
    }
    return count;
}

TensorPtr<float> predict(const Model& model, const TensorPtr<float>& image,
                         const TensorPtr<float>& prev_prob) {
    if (image->shape.c() != 1)
        throw std::invalid_argument("predict: image must have a single channel, got " + image->shape.str());
    if (model.stage_index > 1 && !prev_prob)
        throw std::invalid_argument("predict: stage " + std::to_string(model.stage_index) +
                                    " model requires prev_prob");
    if (model.stage_index == 1 && prev_prob)
        throw std::invalid_argument("predict: stage-1 model does not accept prev_prob");
    if (prev_prob && !(prev_prob->shape == image->shape))
        throw std::invalid_argument("predict: prev_prob shape " + prev_prob->shape.str() +
                                    " does not match image " + image->shape.str());

    Graph<float> g(false);
    auto input = prev_prob ? concat_channels(g, image, prev_prob) : image;
    auto logits = model.forward_logits(g, input, /*training=*/false);
    auto up = bilinear_resize(g, logits, image->shape.h(), image->shape.w());
    return softmax2_probs(up);
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'A', 'S', 'E', 'G'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::vector<unsigned char> bytes;

    void u16(std::uint16_t v) {
        bytes.push_back(static_cast<unsigned char>(v & 0xFF));
        bytes.push_back(static_cast<unsigned char>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
    }
    void raw(const void* data, std::size_t size) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes.insert(bytes.end(), p, p + size);
    }
};

struct Reader {
    const unsigned char* p;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > size)
            throw CheckpointError(CheckpointError::Code::BadStructure, "checkpoint: truncated record");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

std::uint32_t crc32(const unsigned char* data, std::size_t size) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < size; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    Writer w;
    w.raw(kMagic.data(), kMagic.size());
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(model.stage_index));

    const ModelConfig& c = model.config;
    w.u32(static_cast<std::uint32_t>(c.in_channels));
    w.u32(static_cast<std::uint32_t>(c.kernel));
    w.u32(static_cast<std::uint32_t>(c.upsample_factor));
    w.f64(c.bn_epsilon);
    w.f64(c.bn_momentum);
    w.u32(static_cast<std::uint32_t>(c.stem_channels.size()));
    for (std::int64_t ch : c.stem_channels) w.u32(static_cast<std::uint32_t>(ch));
    w.u32(static_cast<std::uint32_t>(c.blocks.size()));
    for (const BlockSpec& b : c.blocks) {
        w.u32(static_cast<std::uint32_t>(b.channels));
        w.u32(static_cast<std::uint32_t>(b.stride));
        w.u32(static_cast<std::uint32_t>(b.rate));
    }

    const auto tensors = model.named_tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.raw(name.data(), name.size());
        for (int i = 0; i < 4; ++i) w.u32(static_cast<std::uint32_t>(t->shape.d[i]));
        for (float v : t->data) w.f32(v);
    }
    w.u32(crc32(w.bytes.data(), w.bytes.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < kMagic.size() + 8)
        throw CheckpointError(CheckpointError::Code::BadChecksum,
                              "checkpoint: file too short to checksum: " + path.string());
    if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
        throw CheckpointError(CheckpointError::Code::BadMagic,
                              "checkpoint: bad magic in " + path.string());

    Reader header{bytes.data(), bytes.size(), kMagic.size()};
    const std::uint32_t version = header.u32();
    if (version != kVersion)
        throw CheckpointError(CheckpointError::Code::BadVersion,
                              "checkpoint: unsupported version " + std::to_string(version));

    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    if (crc32(bytes.data(), body) != stored)
        throw CheckpointError(CheckpointError::Code::BadChecksum,
                              "checkpoint: checksum mismatch in " + path.string());

    Reader r{bytes.data(), body, header.pos};
    const int stage_index = static_cast<int>(r.u32());
    ModelConfig config;
    config.in_channels = r.u32();
    config.kernel = r.u32();
    config.upsample_factor = r.u32();
    config.bn_epsilon = r.f64();
    config.bn_momentum = r.f64();
    config.stem_channels.assign(r.u32(), 0);
    for (auto& ch : config.stem_channels) ch = r.u32();
    config.blocks.assign(r.u32(), BlockSpec{});
    for (auto& b : config.blocks) {
        b.channels = r.u32();
        b.stride = r.u32();
        b.rate = r.u32();
    }

    Model model = build_model(config, /*seed=*/0, stage_index);
    std::map<std::string, TensorPtr<float>> table;
    for (auto& [name, t] : model.named_tensors()) table[name] = t;

    const std::uint32_t tensor_count = r.u32();
    if (tensor_count != table.size())
        throw CheckpointError(CheckpointError::Code::BadStructure,
                              "checkpoint: tensor count " + std::to_string(tensor_count) +
                                  " does not match architecture (" + std::to_string(table.size()) + ")");
    for (std::uint32_t k = 0; k < tensor_count; ++k) {
        const std::string name = r.str(r.u16());
        Shape shape;
        for (int i = 0; i < 4; ++i) shape.d[i] = r.u32();
        auto it = table.find(name);
        if (it == table.end())
            throw CheckpointError(CheckpointError::Code::BadStructure,
                                  "checkpoint: unknown tensor " + name);
        if (!(it->second->shape == shape))
            throw CheckpointError(CheckpointError::Code::BadStructure,
                                  "checkpoint: shape mismatch for " + name);
        for (float& v : it->second->data) v = r.f32();
    }
    if (r.pos != body)
        throw CheckpointError(CheckpointError::Code::BadStructure, "checkpoint: trailing bytes");
    return model;
}

}  // namespace atroseg
