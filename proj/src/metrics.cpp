#include "atroseg/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "atroseg/errors.hpp"

namespace atroseg {

std::int64_t BinaryMask::foreground_count() const {
    std::int64_t n = 0;
    for (std::uint8_t v : values) n += v;
    return n;
}

BoundarySet extract_boundary(const BinaryMask& mask) {
    BoundarySet set;
    set.width = mask.width;
    set.height = mask.height;
    for (std::int64_t r = 0; r < mask.height; ++r) {
        for (std::int64_t c = 0; c < mask.width; ++c) {
            if (!mask.at(r, c)) continue;
            const bool edge = r == 0 || !mask.at(r - 1, c) || r == mask.height - 1 || !mask.at(r + 1, c) ||
                              c == 0 || !mask.at(r, c - 1) || c == mask.width - 1 || !mask.at(r, c + 1);
            if (edge) set.pixels.emplace_back(r, c);
        }
    }
    return set;
}

namespace {

void check_dims(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument(std::string(op) + ": mask dimensions differ");
}

struct Overlap {
    std::int64_t intersection = 0, pred = 0, gt = 0;
};

Overlap overlap(const BinaryMask& pred, const BinaryMask& gt) {
    Overlap o;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        o.intersection += pred.values[i] & gt.values[i];
        o.pred += pred.values[i];
        o.gt += gt.values[i];
    }
    return o;
}

constexpr double kEdtInf = 1e20;

// Felzenszwalb-Huttenlocher lower-envelope pass: d[q] = min_p (q-p)^2 + f[p].
void edt_pass(const double* f, double* d, std::int64_t n, std::vector<std::int64_t>& v,
              std::vector<double>& z) {
    std::int64_t k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    for (std::int64_t q = 1; q < n; ++q) {
        double s;
        for (;;) {
            const std::int64_t p = v[k];
            s = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
                (2.0 * (q - p));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kEdtInf;
    }
    k = 0;
    for (std::int64_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const std::int64_t p = v[k];
        d[q] = static_cast<double>(q - p) * (q - p) + f[p];
    }
}

// Exact squared Euclidean distance from every grid cell to the nearest site.
std::vector<double> squared_distance_field(const BoundarySet& sites, std::int64_t height,
                                           std::int64_t width) {
    std::vector<double> field(static_cast<std::size_t>(height * width), kEdtInf);
    for (const auto& [r, c] : sites.pixels) field[static_cast<std::size_t>(r * width + c)] = 0.0;

    const std::int64_t n = std::max(height, width);
    std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n + 1));

    for (std::int64_t c = 0; c < width; ++c) {
        for (std::int64_t r = 0; r < height; ++r) f[r] = field[r * width + c];
        edt_pass(f.data(), d.data(), height, v, z);
        for (std::int64_t r = 0; r < height; ++r) field[r * width + c] = d[r];
    }
    for (std::int64_t r = 0; r < height; ++r) {
        edt_pass(field.data() + r * width, d.data(), width, v, z);
        std::copy(d.begin(), d.begin() + width, field.begin() + r * width);
    }
    return field;
}

double sum_min_distances(const BoundarySet& points, const std::vector<double>& field,
                         std::int64_t width) {
    double sum = 0.0;
    for (const auto& [r, c] : points.pixels) sum += std::sqrt(field[static_cast<std::size_t>(r * width + c)]);
    return sum;
}

struct DistanceSums {
    double s_to_g = 0.0, g_to_s = 0.0;
    std::int64_t ns = 0, ng = 0;
};

DistanceSums boundary_distance_sums(const BoundarySet& s, const BoundarySet& g) {
    if (s.empty() || g.empty())
        throw std::invalid_argument("boundary distance: empty boundary set (undefined metric)");
    std::int64_t height = std::max(s.height, g.height);
    std::int64_t width = std::max(s.width, g.width);
    for (const BoundarySet* set : {&s, &g}) {
        for (const auto& [r, c] : set->pixels) {
            height = std::max(height, r + 1);
            width = std::max(width, c + 1);
        }
    }
    DistanceSums sums;
    sums.ns = static_cast<std::int64_t>(s.size());
    sums.ng = static_cast<std::int64_t>(g.size());
    const auto field_g = squared_distance_field(g, height, width);
    sums.s_to_g = sum_min_distances(s, field_g, width);
    const auto field_s = squared_distance_field(s, height, width);
    sums.g_to_s = sum_min_distances(g, field_s, width);
    return sums;
}

}  // namespace

double jaccard(const BinaryMask& pred, const BinaryMask& gt) {
    check_dims(pred, gt, "jaccard");
    const Overlap o = overlap(pred, gt);
    const std::int64_t uni = o.pred + o.gt - o.intersection;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.intersection) / static_cast<double>(uni);
}

double dice(const BinaryMask& pred, const BinaryMask& gt) {
    check_dims(pred, gt, "dice");
    const Overlap o = overlap(pred, gt);
    if (o.pred + o.gt == 0) return 1.0;
    return 2.0 * static_cast<double>(o.intersection) / static_cast<double>(o.pred + o.gt);
}

double acd(const BoundarySet& s, const BoundarySet& g, double spacing) {
    const DistanceSums sums = boundary_distance_sums(s, g);
    return 0.5 * (sums.s_to_g / sums.ns + sums.g_to_s / sums.ng) * spacing;
}

double asd(const BoundarySet& s, const BoundarySet& g, double spacing) {
    const DistanceSums sums = boundary_distance_sums(s, g);
    return (sums.s_to_g + sums.g_to_s) / static_cast<double>(sums.ns + sums.ng) * spacing;
}

BinaryMask binarize(const std::vector<float>& prob, std::int64_t height, std::int64_t width,
                    float threshold) {
    if (static_cast<std::int64_t>(prob.size()) != height * width)
        throw std::invalid_argument("binarize: probability plane size mismatch");
    BinaryMask mask(height, width);
    for (std::size_t i = 0; i < prob.size(); ++i) {
        if (!(prob[i] >= 0.0f && prob[i] <= 1.0f))
            throw std::invalid_argument("binarize: probability outside [0,1]");
        mask.values[i] = prob[i] >= threshold ? 1 : 0;
    }
    return mask;
}

BinaryMask binarize(const TensorPtr<float>& prob, std::int64_t channel, float threshold) {
    const std::int64_t h = prob->shape.h(), w = prob->shape.w();
    const float* plane = prob->data.data() + channel * h * w;
    return binarize(std::vector<float>(plane, plane + h * w), h, w, threshold);
}

SampleMetrics evaluate_sample(const std::string& id, const BinaryMask& pred, const BinaryMask& gt,
                              double spacing) {
    SampleMetrics m;
    m.id = id;
    m.jsc = jaccard(pred, gt);
    m.dc = dice(pred, gt);
    const BoundarySet s = extract_boundary(pred);
    const BoundarySet g = extract_boundary(gt);
    if (!s.empty() && !g.empty()) {
        const DistanceSums sums = boundary_distance_sums(s, g);
        m.acd = 0.5 * (sums.s_to_g / sums.ns + sums.g_to_s / sums.ng) * spacing;
        m.asd = (sums.s_to_g + sums.g_to_s) / static_cast<double>(sums.ns + sums.ng) * spacing;
    }
    return m;
}

namespace {

MetricAggregate aggregate(const std::vector<double>& xs) {
    MetricAggregate a;
    a.count = static_cast<std::int64_t>(xs.size());
    if (xs.empty()) return a;
    double sum = 0.0;
    for (double x : xs) sum += x;
    a.mean = sum / static_cast<double>(xs.size());
    double sq = 0.0;
    for (double x : xs) sq += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(sq / static_cast<double>(xs.size()));
    return a;
}

std::string fmt(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

}  // namespace

MetricsReport make_report(std::vector<SampleMetrics> rows, const std::string& unit, double spacing,
                          const std::string& resolution) {
    MetricsReport report;
    report.rows = std::move(rows);
    report.unit = unit;
    report.spacing = spacing;
    report.resolution = resolution;
    std::vector<double> jscs, dcs, acds, asds;
    for (const auto& r : report.rows) {
        jscs.push_back(r.jsc);
        dcs.push_back(r.dc);
        if (r.acd && r.asd) {
            acds.push_back(*r.acd);
            asds.push_back(*r.asd);
        } else {
            ++report.undefined_count;
        }
    }
    report.agg_jsc = aggregate(jscs);
    report.agg_dc = aggregate(dcs);
    report.agg_acd = aggregate(acds);
    report.agg_asd = aggregate(asds);
    return report;
}

void write_report_csv(const MetricsReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_report_csv: cannot open " + path.string());
    out << "# boundary=4-connectivity unit=" << report.unit << " spacing=" << fmt(report.spacing)
        << " resolution=" << report.resolution << " undefined=" << report.undefined_count << "\n";
    out << "sample_id,jsc,dc,acd,asd,unit,flags\n";
    for (const auto& r : report.rows) {
        out << r.id << ',' << fmt(r.jsc) << ',' << fmt(r.dc) << ',';
        if (r.acd) out << fmt(*r.acd);
        out << ',';
        if (r.asd) out << fmt(*r.asd);
        out << ',' << report.unit << ',' << (r.acd ? "" : "empty_boundary") << "\n";
    }
    out << "mean," << fmt(report.agg_jsc.mean) << ',' << fmt(report.agg_dc.mean) << ','
        << fmt(report.agg_acd.mean) << ',' << fmt(report.agg_asd.mean) << ',' << report.unit << ",\n";
    out << "std," << fmt(report.agg_jsc.stddev) << ',' << fmt(report.agg_dc.stddev) << ','
        << fmt(report.agg_acd.stddev) << ',' << fmt(report.agg_asd.stddev) << ',' << report.unit
        << ",\n";
    if (!out) throw IoError("write_report_csv: write failed for " + path.string());
}

}  // namespace atroseg
