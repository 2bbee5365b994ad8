#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "atroseg/errors.hpp"
#include "atroseg/metrics.hpp"
#include "atroseg/rng.hpp"

namespace atroseg {

// Raw integer graymap as stored on disk; 8-bit (maxval <= 255, one byte per
// pixel) or 16-bit (two bytes, most significant first, per the PGM format).
struct Raster {
    std::int64_t width = 0, height = 0;
    int maxval = 255;
    std::vector<std::uint16_t> pixels;

    bool operator==(const Raster&) const = default;
};

struct PgmError : IoError {
    enum class Code { MalformedHeader, DepthOverflow, TruncatedPayload };
    PgmError(Code code, const std::string& msg) : IoError(msg), code(code) {}
    Code code;
};

Raster read_pgm(const std::filesystem::path& path);
void write_pgm(const Raster& raster, const std::filesystem::path& path);

struct SegmentationSample {
    std::string id;
    std::int64_t width = 0, height = 0;
    std::vector<float> image;  // values in [0,1]
    BinaryMask mask;
    std::optional<double> spacing;  // physical length per pixel
};

SegmentationSample sample_from_rasters(const std::string& id, const Raster& image, const Raster& mask,
                                       std::optional<double> spacing);
Raster image_to_raster(const SegmentationSample& sample);  // 16-bit
Raster mask_to_raster(const BinaryMask& mask);             // 0/255 8-bit

struct ManifestEntry {
    std::string id;
    std::string image_path;  // relative to the manifest directory
    std::string mask_path;
    std::optional<double> spacing;
    std::string split;  // in-memory fold tag; not persisted in manifest.csv
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;
};

// Directory layout: images/<id>.pgm, masks/<id>.pgm, manifest.csv
DatasetManifest load_manifest(const std::filesystem::path& dir);
void save_manifest(const DatasetManifest& manifest);
SegmentationSample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry);
std::vector<SegmentationSample> load_all_samples(const DatasetManifest& manifest);

// Two dark elliptical "lung fields" on a brighter background with an
// illumination gradient, horizontal rib-like banding, and pixel noise.
// Fully determined by the rng state.
SegmentationSample synth_phantom(Rng& rng, std::int64_t size, const std::string& id);

// Image resized bilinearly, mask by nearest neighbor (stays binary), spacing
// rescaled by original/target.
SegmentationSample resize_sample(const SegmentationSample& sample, std::int64_t target);

// foldA = odd trailing indices, foldB = even; ids must end in digits.
std::pair<DatasetManifest, DatasetManifest> split_odd_even(const DatasetManifest& manifest);

}  // namespace atroseg
