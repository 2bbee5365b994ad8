#include "atroseg/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "atroseg/errors.hpp"

namespace atroseg {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size())
        throw ConfigError("config: invalid integer for " + key + ": '" + value + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size())
        throw ConfigError("config: invalid unsigned integer for " + key + ": '" + value + "'");
    return v;
}

double parse_real(const std::string& key, const std::string& value) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size())
        throw ConfigError("config: invalid real for " + key + ": '" + value + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError("config: invalid boolean for " + key + ": '" + value + "' (use true/false)");
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<std::int64_t> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const std::size_t comma = value.find(',', start);
        const std::string item = trim(value.substr(start, comma - start));
        out.push_back(parse_int(key, item));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string fmt_real(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::string fmt_int_list(const std::vector<std::int64_t>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(xs[i]);
    }
    return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value': '" +
                              line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
        if (!kv.emplace(key, value).second)
            throw ConfigError("config: duplicate key '" + key + "'");
    }

    RunConfig config;
    auto take = [&](const char* key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        std::string v = it->second;
        kv.erase(it);
        return v;
    };

    if (auto v = take("epochs")) config.train.epochs = static_cast<int>(parse_int("epochs", *v));
    if (auto v = take("initial_lr")) config.train.initial_lr = parse_real("initial_lr", *v);
    if (auto v = take("lr_drop_epoch"))
        config.train.lr_drop_epoch = static_cast<int>(parse_int("lr_drop_epoch", *v));
    if (auto v = take("dropped_lr")) config.train.dropped_lr = parse_real("dropped_lr", *v);
    if (auto v = take("momentum")) config.train.momentum = parse_real("momentum", *v);
    if (auto v = take("batch_size")) config.train.batch_size = static_cast<int>(parse_int("batch_size", *v));
    if (auto v = take("seed")) config.train.seed = parse_u64("seed", *v);
    if (auto v = take("augment")) config.train.augment = parse_bool("augment", *v);
    if (auto v = take("max_stages")) config.train.max_stages = static_cast<int>(parse_int("max_stages", *v));
    if (auto v = take("saturation_delta"))
        config.train.saturation_delta = parse_real("saturation_delta", *v);
    if (auto v = take("input_size")) config.train.input_size = parse_int("input_size", *v);

    if (auto v = take("in_channels")) config.model.in_channels = parse_int("in_channels", *v);
    if (auto v = take("stem_channels")) config.model.stem_channels = parse_int_list("stem_channels", *v);
    if (auto v = take("block_channels")) {
        const auto channels = parse_int_list("block_channels", *v);
        config.model.blocks.resize(channels.size());
        for (std::size_t i = 0; i < channels.size(); ++i) config.model.blocks[i].channels = channels[i];
    }
    if (auto v = take("block_strides")) {
        const auto strides = parse_int_list("block_strides", *v);
        if (strides.size() != config.model.blocks.size())
            throw ConfigError("config: block_strides length does not match block_channels");
        for (std::size_t i = 0; i < strides.size(); ++i) config.model.blocks[i].stride = strides[i];
    }
    if (auto v = take("block_rates")) {
        const auto rates = parse_int_list("block_rates", *v);
        if (rates.size() != config.model.blocks.size())
            throw ConfigError("config: block_rates length does not match block_channels");
        for (std::size_t i = 0; i < rates.size(); ++i) config.model.blocks[i].rate = rates[i];
    }
    if (auto v = take("kernel")) config.model.kernel = parse_int("kernel", *v);
    if (auto v = take("upsample_factor")) config.model.upsample_factor = parse_int("upsample_factor", *v);
    if (auto v = take("bn_epsilon")) config.model.bn_epsilon = parse_real("bn_epsilon", *v);
    if (auto v = take("bn_momentum")) config.model.bn_momentum = parse_real("bn_momentum", *v);

    if (auto v = take("data_dir")) config.data_dir = *v;
    if (auto v = take("out_dir")) config.out_dir = *v;

    if (!kv.empty()) throw ConfigError("config: unknown key '" + kv.begin()->first + "'");
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string serialize_run_config(const RunConfig& config) {
    std::ostringstream out;
    const TrainConfig& t = config.train;
    const ModelConfig& m = config.model;
    out << "epochs = " << t.epochs << "\n";
    out << "initial_lr = " << fmt_real(t.initial_lr) << "\n";
    out << "lr_drop_epoch = " << t.lr_drop_epoch << "\n";
    out << "dropped_lr = " << fmt_real(t.dropped_lr) << "\n";
    out << "momentum = " << fmt_real(t.momentum) << "\n";
    out << "batch_size = " << t.batch_size << "\n";
    out << "seed = " << t.seed << "\n";
    out << "augment = " << (t.augment ? "true" : "false") << "\n";
    out << "max_stages = " << t.max_stages << "\n";
    out << "saturation_delta = " << fmt_real(t.saturation_delta) << "\n";
    out << "input_size = " << t.input_size << "\n";
    out << "in_channels = " << m.in_channels << "\n";
    out << "stem_channels = " << fmt_int_list(m.stem_channels) << "\n";
    std::vector<std::int64_t> channels, strides, rates;
    for (const auto& b : m.blocks) {
        channels.push_back(b.channels);
        strides.push_back(b.stride);
        rates.push_back(b.rate);
    }
    out << "block_channels = " << fmt_int_list(channels) << "\n";
    out << "block_strides = " << fmt_int_list(strides) << "\n";
    out << "block_rates = " << fmt_int_list(rates) << "\n";
    out << "kernel = " << m.kernel << "\n";
    out << "upsample_factor = " << m.upsample_factor << "\n";
    out << "bn_epsilon = " << fmt_real(m.bn_epsilon) << "\n";
    out << "bn_momentum = " << fmt_real(m.bn_momentum) << "\n";
    if (config.data_dir) out << "data_dir = " << *config.data_dir << "\n";
    if (config.out_dir) out << "out_dir = " << *config.out_dir << "\n";
    return out.str();
}

}  // namespace atroseg
