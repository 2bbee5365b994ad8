#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "atroseg/tensor.hpp"

namespace atroseg {

struct BinaryMask {
    std::int64_t width = 0, height = 0;
    std::vector<std::uint8_t> values;  // strictly 0/1, row-major

    BinaryMask() = default;
    BinaryMask(std::int64_t h, std::int64_t w)
        : width(w), height(h), values(static_cast<std::size_t>(h * w), 0) {}

    std::uint8_t& at(std::int64_t r, std::int64_t c) { return values[static_cast<std::size_t>(r * width + c)]; }
    std::uint8_t at(std::int64_t r, std::int64_t c) const { return values[static_cast<std::size_t>(r * width + c)]; }
    std::int64_t foreground_count() const;
    bool operator==(const BinaryMask&) const = default;
};

// Pixels (row, col) of a mask's boundary: foreground pixels with at least one
// 4-neighbor that is background or outside the image. Row-major, no duplicates.
struct BoundarySet {
    std::int64_t width = 0, height = 0;  // source mask extents
    std::vector<std::pair<std::int64_t, std::int64_t>> pixels;

    bool empty() const { return pixels.empty(); }
    std::size_t size() const { return pixels.size(); }
};

BoundarySet extract_boundary(const BinaryMask& mask);

// |pred ∩ gt| / |pred ∪ gt|; 1 when both masks are empty.
double jaccard(const BinaryMask& pred, const BinaryMask& gt);

// 2|∩| / (|pred| + |gt|); 1 when both masks are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

// Symmetric boundary-distance metrics over Euclidean distances between pixel
// centers, scaled by `spacing`. Both throw std::invalid_argument on an empty
// boundary set; callers report such samples as undefined instead.
double acd(const BoundarySet& s, const BoundarySet& g, double spacing = 1.0);
double asd(const BoundarySet& s, const BoundarySet& g, double spacing = 1.0);

// Foreground where prob >= threshold (ties resolve to foreground).
BinaryMask binarize(const std::vector<float>& prob, std::int64_t height, std::int64_t width,
                    float threshold = 0.5f);
// Same, applied to one channel of a (N,C,H,W) tensor, batch element 0.
BinaryMask binarize(const TensorPtr<float>& prob, std::int64_t channel, float threshold = 0.5f);

struct SampleMetrics {
    std::string id;
    double jsc = 0.0;
    double dc = 0.0;
    std::optional<double> acd;  // absent when a boundary was empty
    std::optional<double> asd;
};

SampleMetrics evaluate_sample(const std::string& id, const BinaryMask& pred, const BinaryMask& gt,
                              double spacing = 1.0);

struct MetricAggregate {
    double mean = 0.0;
    double stddev = 0.0;  // population formula
    std::int64_t count = 0;
};

struct MetricsReport {
    std::vector<SampleMetrics> rows;
    std::string unit = "px";
    double spacing = 1.0;
    std::string resolution = "native";
    std::int64_t undefined_count = 0;  // samples lacking acd/asd

    MetricAggregate agg_jsc, agg_dc, agg_acd, agg_asd;
};

MetricsReport make_report(std::vector<SampleMetrics> rows, const std::string& unit, double spacing,
                          const std::string& resolution);

void write_report_csv(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace atroseg
