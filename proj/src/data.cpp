#include "atroseg/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "atroseg/ops.hpp"

namespace atroseg {

namespace {

// next header token, skipping whitespace and '#' comment lines
bool next_token(std::istream& in, std::string& token) {
    token.clear();
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!token.empty()) return true;
            continue;
        }
        token.push_back(static_cast<char>(ch));
    }
    return !token.empty();
}

std::int64_t parse_header_int(std::istream& in, const std::filesystem::path& path) {
    std::string tok;
    if (!next_token(in, tok))
        throw PgmError(PgmError::Code::MalformedHeader, "pgm: missing header field in " + path.string());
    std::int64_t value = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
    if (ec != std::errc() || p != tok.data() + tok.size() || value < 0)
        throw PgmError(PgmError::Code::MalformedHeader,
                       "pgm: invalid header field '" + tok + "' in " + path.string());
    return value;
}

}  // namespace

Raster read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_pgm: cannot open " + path.string());

    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '5')
        throw PgmError(PgmError::Code::MalformedHeader, "pgm: not a binary graymap: " + path.string());

    Raster raster;
    raster.width = parse_header_int(in, path);
    raster.height = parse_header_int(in, path);
    const std::int64_t maxval = parse_header_int(in, path);
    if (raster.width < 1 || raster.height < 1)
        throw PgmError(PgmError::Code::MalformedHeader, "pgm: bad dimensions in " + path.string());
    if (maxval < 1 || maxval > 65535)
        throw PgmError(PgmError::Code::DepthOverflow,
                       "pgm: maxval " + std::to_string(maxval) + " out of range in " + path.string());
    raster.maxval = static_cast<int>(maxval);

    const std::int64_t count = raster.width * raster.height;
    const int bytes_per_pixel = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> payload(static_cast<std::size_t>(count * bytes_per_pixel));
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (in.gcount() != static_cast<std::streamsize>(payload.size()))
        throw PgmError(PgmError::Code::TruncatedPayload, "pgm: truncated payload in " + path.string());

    raster.pixels.resize(static_cast<std::size_t>(count));
    if (bytes_per_pixel == 1) {
        for (std::int64_t i = 0; i < count; ++i) raster.pixels[i] = payload[i];
    } else {
        // 16-bit samples are most significant byte first
        for (std::int64_t i = 0; i < count; ++i)
            raster.pixels[i] = static_cast<std::uint16_t>((payload[2 * i] << 8) | payload[2 * i + 1]);
    }
    for (std::uint16_t v : raster.pixels)
        if (v > maxval)
            throw PgmError(PgmError::Code::MalformedHeader,
                           "pgm: sample value exceeds maxval in " + path.string());
    return raster;
}

void write_pgm(const Raster& raster, const std::filesystem::path& path) {
    if (raster.width < 1 || raster.height < 1 || raster.maxval < 1 || raster.maxval > 65535)
        throw IoError("write_pgm: invalid raster");
    if (static_cast<std::int64_t>(raster.pixels.size()) != raster.width * raster.height)
        throw IoError("write_pgm: pixel count does not match dimensions");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_pgm: cannot open " + path.string());
    out << "P5\n" << raster.width << " " << raster.height << "\n" << raster.maxval << "\n";
    if (raster.maxval > 255) {
        for (std::uint16_t v : raster.pixels) {
            out.put(static_cast<char>(v >> 8));
            out.put(static_cast<char>(v & 0xFF));
        }
    } else {
        for (std::uint16_t v : raster.pixels) out.put(static_cast<char>(v & 0xFF));
    }
    if (!out) throw IoError("write_pgm: write failed for " + path.string());
}

SegmentationSample sample_from_rasters(const std::string& id, const Raster& image, const Raster& mask,
                                       std::optional<double> spacing) {
    if (image.width != mask.width || image.height != mask.height)
        throw IoError("sample: image and mask dimensions differ for " + id);
    SegmentationSample sample;
    sample.id = id;
    sample.width = image.width;
    sample.height = image.height;
    sample.spacing = spacing;
    sample.image.resize(image.pixels.size());
    const float scale = 1.0f / static_cast<float>(image.maxval);
    for (std::size_t i = 0; i < image.pixels.size(); ++i)
        sample.image[i] = static_cast<float>(image.pixels[i]) * scale;
    sample.mask = BinaryMask(mask.height, mask.width);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) sample.mask.values[i] = mask.pixels[i] > 0 ? 1 : 0;
    return sample;
}

Raster image_to_raster(const SegmentationSample& sample) {
    Raster raster;
    raster.width = sample.width;
    raster.height = sample.height;
    raster.maxval = 65535;
    raster.pixels.resize(sample.image.size());
    for (std::size_t i = 0; i < sample.image.size(); ++i) {
        const double v = std::clamp(static_cast<double>(sample.image[i]), 0.0, 1.0);
        raster.pixels[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
    return raster;
}

Raster mask_to_raster(const BinaryMask& mask) {
    Raster raster;
    raster.width = mask.width;
    raster.height = mask.height;
    raster.maxval = 255;
    raster.pixels.resize(mask.values.size());
    for (std::size_t i = 0; i < mask.values.size(); ++i) raster.pixels[i] = mask.values[i] ? 255 : 0;
    return raster;
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& dir) {
    const auto csv = dir / "manifest.csv";
    std::ifstream in(csv);
    if (!in) throw IoError("load_manifest: cannot open " + csv.string());
    DatasetManifest manifest;
    manifest.root = dir;
    std::string line;
    if (!std::getline(in, line) || line != "id,image_path,mask_path,spacing")
        throw IoError("load_manifest: bad header in " + csv.string());
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::array<std::string, 4> fields;
        std::size_t start = 0;
        for (int f = 0; f < 4; ++f) {
            const std::size_t comma = f < 3 ? line.find(',', start) : std::string::npos;
            if (f < 3 && comma == std::string::npos)
                throw IoError("load_manifest: malformed row '" + line + "'");
            fields[f] = line.substr(start, comma - start);
            start = comma + 1;
        }
        ManifestEntry entry;
        entry.id = fields[0];
        entry.image_path = fields[1];
        entry.mask_path = fields[2];
        if (!fields[3].empty()) entry.spacing = std::stod(fields[3]);
        if (!seen.insert(entry.id).second)
            throw IoError("load_manifest: duplicate id " + entry.id);
        for (const auto& rel : {entry.image_path, entry.mask_path})
            if (!std::filesystem::exists(dir / rel))
                throw IoError("load_manifest: missing file " + (dir / rel).string());
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

void save_manifest(const DatasetManifest& manifest) {
    std::filesystem::create_directories(manifest.root);
    const auto csv = manifest.root / "manifest.csv";
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw IoError("save_manifest: cannot open " + csv.string());
    out << "id,image_path,mask_path,spacing\n";
    for (const auto& e : manifest.entries) {
        out << e.id << ',' << e.image_path << ',' << e.mask_path << ','
            << (e.spacing ? fmt_double(*e.spacing) : "") << "\n";
    }
    if (!out) throw IoError("save_manifest: write failed for " + csv.string());
}

SegmentationSample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry) {
    const Raster image = read_pgm(manifest.root / entry.image_path);
    const Raster mask = read_pgm(manifest.root / entry.mask_path);
    return sample_from_rasters(entry.id, image, mask, entry.spacing);
}

std::vector<SegmentationSample> load_all_samples(const DatasetManifest& manifest) {
    std::vector<SegmentationSample> samples;
    samples.reserve(manifest.entries.size());
    for (const auto& entry : manifest.entries) samples.push_back(load_sample(manifest, entry));
    return samples;
}

namespace {

struct Ellipse {
    double cx, cy, a, b, cos_t, sin_t;

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double u = dx * cos_t + dy * sin_t;
        const double w = -dx * sin_t + dy * cos_t;
        return (u / a) * (u / a) + (w / b) * (w / b) <= 1.0;
    }
};

Ellipse draw_lung(Rng& rng, double center_x_frac, double size) {
    Ellipse e;
    e.cx = (center_x_frac + rng.uniform(-0.03, 0.03)) * size;
    e.cy = (0.48 + rng.uniform(-0.05, 0.05)) * size;
    e.a = rng.uniform(0.12, 0.165) * size;
    e.b = rng.uniform(0.23, 0.31) * size;
    const double tilt = rng.uniform(-0.16, 0.16);
    e.cos_t = std::cos(tilt);
    e.sin_t = std::sin(tilt);
    return e;
}

void rasterize(const Ellipse& e, std::int64_t size, BinaryMask& mask) {
    for (std::int64_t r = 0; r < size; ++r)
        for (std::int64_t c = 0; c < size; ++c)
            if (e.contains(static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) mask.at(r, c) = 1;
}

}  // namespace

SegmentationSample synth_phantom(Rng& rng, std::int64_t size, const std::string& id) {
    if (size < 32) throw std::invalid_argument("synth_phantom: size must be >= 32");

    const double background = rng.uniform(0.62, 0.78);
    const double grad_amp = rng.uniform(0.04, 0.12);
    const double grad_angle = rng.uniform(0.0, 6.283185307179586);
    const double rib_amp = rng.uniform(0.03, 0.07);
    const double rib_freq = rng.uniform(3.5, 6.5);
    const double rib_phase = rng.uniform(0.0, 6.283185307179586);
    const double depth = rng.uniform(0.22, 0.34);
    const double noise_sigma = rng.uniform(0.04, 0.07);

    // dark non-lung blobs: false-positive bait for the cascade to suppress
    struct Blob {
        Ellipse shape;
        double darkness;
    };
    std::vector<Blob> clutter(2 + rng.next_below(3));
    for (Blob& blob : clutter) {
        Ellipse e;
        e.cx = rng.uniform(0.05, 0.95) * static_cast<double>(size);
        e.cy = rng.uniform(0.05, 0.95) * static_cast<double>(size);
        e.a = rng.uniform(0.04, 0.09) * static_cast<double>(size);
        e.b = rng.uniform(0.04, 0.09) * static_cast<double>(size);
        const double tilt = rng.uniform(0.0, 3.141592653589793);
        e.cos_t = std::cos(tilt);
        e.sin_t = std::sin(tilt);
        blob.shape = e;
        blob.darkness = rng.uniform(0.10, 0.22);
    }

    // the center/axis ranges keep the two ellipses apart; the retry loop
    // guards the non-overlap contract anyway
    BinaryMask mask(size, size);
    for (int attempt = 0;; ++attempt) {
        BinaryMask left_mask(size, size), right_mask(size, size);
        rasterize(draw_lung(rng, 0.285, static_cast<double>(size)), size, left_mask);
        rasterize(draw_lung(rng, 0.715, static_cast<double>(size)), size, right_mask);
        bool overlap = false;
        for (std::size_t i = 0; i < left_mask.values.size() && !overlap; ++i)
            overlap = left_mask.values[i] && right_mask.values[i];
        if (!overlap) {
            for (std::size_t i = 0; i < mask.values.size(); ++i)
                mask.values[i] = left_mask.values[i] | right_mask.values[i];
            break;
        }
        if (attempt >= 1000)
            throw std::runtime_error("synth_phantom: could not place disjoint lung fields");
    }

    const double cos_g = std::cos(grad_angle), sin_g = std::sin(grad_angle);
    std::vector<float> image(static_cast<std::size_t>(size * size));
    for (std::int64_t r = 0; r < size; ++r) {
        const double yf = (static_cast<double>(r) + 0.5) / static_cast<double>(size);
        const double ribs = rib_amp * std::sin(6.283185307179586 * rib_freq * yf + rib_phase);
        for (std::int64_t c = 0; c < size; ++c) {
            const double xf = (static_cast<double>(c) + 0.5) / static_cast<double>(size);
            const double proj = (xf - 0.5) * cos_g + (yf - 0.5) * sin_g;
            double v = background - (mask.at(r, c) ? depth : 0.0) + grad_amp * proj + ribs +
                       noise_sigma * rng.gaussian();
            const double px = static_cast<double>(c) + 0.5, py = static_cast<double>(r) + 0.5;
            for (const auto& blob : clutter)
                if (blob.shape.contains(px, py)) v -= blob.darkness;
            image[static_cast<std::size_t>(r * size + c)] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

    SegmentationSample sample;
    sample.id = id;
    sample.width = size;
    sample.height = size;
    sample.mask = std::move(mask);
    sample.spacing = std::nullopt;
    // quantize to the on-disk depth so in-memory and reloaded samples agree
    sample.image.resize(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const auto q = static_cast<std::uint16_t>(std::lround(static_cast<double>(image[i]) * 65535.0));
        sample.image[i] = static_cast<float>(q) / 65535.0f;
    }
    return sample;
}

SegmentationSample resize_sample(const SegmentationSample& sample, std::int64_t target) {
    if (target < 1) throw std::invalid_argument("resize_sample: target must be >= 1");
    if (target == sample.width && target == sample.height) return sample;

    SegmentationSample out;
    out.id = sample.id;
    out.width = target;
    out.height = target;

    Graph<float> g(false);
    auto image = make_tensor<float>(Shape(1, 1, sample.height, sample.width), sample.image, false);
    out.image = bilinear_resize(g, image, target, target)->data;

    // nearest neighbor with the same half-pixel convention (ties round up)
    out.mask = BinaryMask(target, target);
    const double sy = static_cast<double>(sample.height) / static_cast<double>(target);
    const double sx = static_cast<double>(sample.width) / static_cast<double>(target);
    for (std::int64_t r = 0; r < target; ++r) {
        double src_r = (static_cast<double>(r) + 0.5) * sy - 0.5;
        src_r = std::clamp(src_r, 0.0, static_cast<double>(sample.height - 1));
        const std::int64_t ir = std::llround(src_r);
        for (std::int64_t c = 0; c < target; ++c) {
            double src_c = (static_cast<double>(c) + 0.5) * sx - 0.5;
            src_c = std::clamp(src_c, 0.0, static_cast<double>(sample.width - 1));
            out.mask.at(r, c) = sample.mask.at(ir, std::llround(src_c));
        }
    }
    if (sample.spacing)
        out.spacing = *sample.spacing * static_cast<double>(sample.width) / static_cast<double>(target);
    return out;
}

std::pair<DatasetManifest, DatasetManifest> split_odd_even(const DatasetManifest& manifest) {
    DatasetManifest odd, even;
    odd.root = manifest.root;
    even.root = manifest.root;
    for (const auto& entry : manifest.entries) {
        const std::string& id = entry.id;
        std::size_t pos = id.size();
        while (pos > 0 && std::isdigit(static_cast<unsigned char>(id[pos - 1]))) --pos;
        if (pos == id.size())
            throw ConfigError("split_odd_even: id '" + id + "' has no trailing index");
        const std::int64_t index = std::stoll(id.substr(pos));
        ManifestEntry tagged = entry;
        tagged.split = index % 2 != 0 ? "odd" : "even";
        (index % 2 != 0 ? odd : even).entries.push_back(std::move(tagged));
    }
    return {std::move(odd), std::move(even)};
}

}  // namespace atroseg
