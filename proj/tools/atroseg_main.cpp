#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "atroseg/config.hpp"
#include "atroseg/data.hpp"
#include "atroseg/errors.hpp"
#include "atroseg/gradsuite.hpp"
#include "atroseg/metrics.hpp"
#include "atroseg/model.hpp"
#include "atroseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace atroseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;

std::string pad_index(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", index);
    return buf;
}

int cmd_synth(const std::string& out_dir, int count, std::int64_t size, std::uint64_t seed,
              double spacing) {
    const fs::path root(out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    DatasetManifest manifest;
    manifest.root = root;
    for (int i = 1; i <= count; ++i) {
        const std::string id = "phantom_" + pad_index(i);
        Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
        const SegmentationSample sample = synth_phantom(rng, size, id);
        ManifestEntry entry;
        entry.id = id;
        entry.image_path = "images/" + id + ".pgm";
        entry.mask_path = "masks/" + id + ".pgm";
        if (spacing > 0.0) entry.spacing = spacing;
        write_pgm(image_to_raster(sample), root / entry.image_path);
        write_pgm(mask_to_raster(sample.mask), root / entry.mask_path);
        manifest.entries.push_back(std::move(entry));
    }
    save_manifest(manifest);
    std::printf("wrote %d phantom sample(s) of size %" PRId64 " to %s\n", count, size,
                root.string().c_str());
    return kExitOk;
}

int cmd_train(const std::string& config_file, std::string data_dir, std::string out_dir) {
    RunConfig config = load_run_config(config_file);
    if (data_dir.empty()) data_dir = config.data_dir.value_or("");
    if (out_dir.empty()) out_dir = config.out_dir.value_or("");
    if (data_dir.empty() || out_dir.empty())
        throw ConfigError("train: --data and --out are required (or data_dir/out_dir config keys)");
    config.data_dir = data_dir;
    config.out_dir = out_dir;
    config.train.validate();
    config.model.validate();

    const DatasetManifest manifest = load_manifest(data_dir);
    auto [odd, even] = split_odd_even(manifest);
    if (odd.entries.empty() || even.entries.empty())
        throw ConfigError("train: dataset must contain both odd- and even-indexed samples");
    std::printf("training on %zu odd-indexed samples, validating on %zu even-indexed samples\n",
                odd.entries.size(), even.entries.size());

    fs::create_directories(out_dir);
    {
        std::ofstream cfg(fs::path(out_dir) / "config_used.cfg", std::ios::trunc);
        cfg << serialize_run_config(config);
    }

    const auto artifacts = networkwise_train(load_all_samples(odd), load_all_samples(even),
                                             config.train, config.model, out_dir);
    for (const auto& a : artifacts)
        std::printf("stage %d: best epoch %d, val JSC %.4f (checkpoint %s)\n", a.stage_index,
                    a.best_epoch, a.best_val_jsc, a.checkpoint_path.string().c_str());
    std::printf("stage summary: %s\n", (fs::path(out_dir) / "stages.csv").string().c_str());
    return kExitOk;
}

std::vector<Model> load_cascade(const std::vector<std::string>& paths) {
    std::vector<Model> models;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        Model model = load_checkpoint(paths[i]);
        if (model.stage_index != static_cast<int>(i) + 1)
            throw ConfigError("cascade: checkpoint " + paths[i] + " is stage " +
                              std::to_string(model.stage_index) + " but position " +
                              std::to_string(i + 1) + " was expected");
        models.push_back(std::move(model));
    }
    return models;
}

// full-resolution foreground probabilities after running the whole cascade
std::vector<float> cascade_foreground(const std::vector<Model>& models, const std::vector<float>& image,
                                      std::int64_t h, std::int64_t w) {
    auto img = make_tensor<float>(Shape(1, 1, h, w), image, false);
    TensorPtr<float> prev;
    for (const Model& model : models) {
        auto probs = model.stage_index > 1 ? predict(model, img, prev) : predict(model, img);
        prev = make_tensor<float>(Shape(1, 1, h, w), false);
        std::copy(probs->data.begin() + h * w, probs->data.end(), prev->data.begin());
    }
    return prev->data;
}

std::vector<float> resize_plane(const std::vector<float>& plane, std::int64_t h, std::int64_t w,
                                std::int64_t out_h, std::int64_t out_w) {
    Graph<float> g(false);
    auto t = make_tensor<float>(Shape(1, 1, h, w), plane, false);
    return bilinear_resize(g, t, out_h, out_w)->data;
}

int cmd_eval(const std::vector<std::string>& model_paths, const std::string& data_dir, double spacing,
             std::int64_t size, const std::string& report_file, bool bypass) {
    if (!bypass && model_paths.empty())
        throw ConfigError("eval: at least one --model checkpoint is required (or --bypass)");
    const DatasetManifest manifest = load_manifest(data_dir);
    const std::vector<Model> models = bypass ? std::vector<Model>{} : load_cascade(model_paths);

    const bool mm = spacing > 0.0;
    const double spacing_value = mm ? spacing : 1.0;
    std::vector<SampleMetrics> rows;
    for (const auto& entry : manifest.entries) {
        const SegmentationSample sample = load_sample(manifest, entry);
        BinaryMask pred;
        if (bypass) {
            pred = sample.mask;
        } else {
            const SegmentationSample work = size > 0 ? resize_sample(sample, size) : sample;
            std::vector<float> fg = cascade_foreground(models, work.image, work.height, work.width);
            if (work.height != sample.height || work.width != sample.width)
                fg = resize_plane(fg, work.height, work.width, sample.height, sample.width);
            pred = binarize(fg, sample.height, sample.width);
        }
        rows.push_back(evaluate_sample(entry.id, pred, sample.mask, spacing_value));
    }

    const std::string resolution =
        size > 0 && !bypass ? std::to_string(size) + "x" + std::to_string(size) + "->native" : "native";
    const MetricsReport report = make_report(std::move(rows), mm ? "mm" : "px", spacing_value, resolution);
    write_report_csv(report, report_file);

    std::printf("evaluated %zu sample(s)%s\n", report.rows.size(), bypass ? " (ground-truth bypass)" : "");
    std::printf("  JSC %.4f +/- %.4f\n", report.agg_jsc.mean, report.agg_jsc.stddev);
    std::printf("  DC  %.4f +/- %.4f\n", report.agg_dc.mean, report.agg_dc.stddev);
    std::printf("  ACD %.4f +/- %.4f %s\n", report.agg_acd.mean, report.agg_acd.stddev,
                report.unit.c_str());
    std::printf("  ASD %.4f +/- %.4f %s\n", report.agg_asd.mean, report.agg_asd.stddev,
                report.unit.c_str());
    if (report.undefined_count > 0)
        std::printf("  (%" PRId64 " sample(s) with empty boundaries excluded from ACD/ASD)\n",
                    report.undefined_count);
    std::printf("report written to %s\n", report_file.c_str());
    return kExitOk;
}

int cmd_predict(const std::vector<std::string>& model_paths, const std::string& image_file,
                const std::string& out_file, const std::string& prob_file, std::int64_t size) {
    const std::vector<Model> models = load_cascade(model_paths);
    const Raster raster = read_pgm(image_file);

    std::vector<float> image(raster.pixels.size());
    for (std::size_t i = 0; i < image.size(); ++i)
        image[i] = static_cast<float>(raster.pixels[i]) / static_cast<float>(raster.maxval);

    std::int64_t h = raster.height, w = raster.width;
    if (size > 0 && (h != size || w != size)) {
        std::printf("input is %" PRId64 "x%" PRId64 "; resizing to %" PRId64 "x%" PRId64 "\n", w, h,
                    size, size);
        image = resize_plane(image, h, w, size, size);
        h = size;
        w = size;
    }

    std::vector<float> fg = cascade_foreground(models, image, h, w);
    if (h != raster.height || w != raster.width)
        fg = resize_plane(fg, h, w, raster.height, raster.width);

    write_pgm(mask_to_raster(binarize(fg, raster.height, raster.width)), out_file);
    std::printf("mask written to %s\n", out_file.c_str());
    if (!prob_file.empty()) {
        Raster prob;
        prob.width = raster.width;
        prob.height = raster.height;
        prob.maxval = 65535;
        prob.pixels.resize(fg.size());
        for (std::size_t i = 0; i < fg.size(); ++i)
            prob.pixels[i] = static_cast<std::uint16_t>(std::lround(fg[i] * 65535.0f));
        write_pgm(prob, prob_file);
        std::printf("probability map written to %s\n", prob_file.c_str());
    }
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, bool corrupt) {
    const auto checks = run_gradient_suite(seed, corrupt);
    bool ok = true;
    for (const auto& c : checks) {
        const bool pass = c.max_rel_error < 1e-4;
        std::printf("%-24s worst rel. error %.3e  (%" PRId64 " coords, %" PRId64 " skipped)  %s\n",
                    c.layer.c_str(), c.max_rel_error, c.checked, c.skipped, pass ? "ok" : "FAIL");
        ok = ok && pass;
    }
    if (!ok) {
        std::printf("gradient check FAILED\n");
        return kExitVerificationFailure;
    }
    std::printf("all layers within 1e-4\n");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"atroseg: atrous-convolution lung-field segmentation toolkit"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
    std::string synth_out;
    int synth_count = 0;
    std::int64_t synth_size = 64;
    std::uint64_t synth_seed = 7;
    double synth_spacing = 0.0;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "number of samples")->required();
    synth->add_option("--size", synth_size, "square sample extent (default 64)");
    synth->add_option("--seed", synth_seed, "rng seed (default 7)");
    synth->add_option("--spacing", synth_spacing, "physical length per pixel recorded in the manifest");

    auto* train = app.add_subcommand("train", "network-wise multi-stage training");
    std::string train_config, train_data, train_out;
    train->add_option("--config", train_config, "run configuration file")->required();
    train->add_option("--data", train_data, "dataset directory (odd ids train, even ids validate)");
    train->add_option("--out", train_out, "output directory for checkpoints and logs");

    auto* eval = app.add_subcommand("eval", "cascaded evaluation with the four metrics");
    std::vector<std::string> eval_models;
    std::string eval_data, eval_report;
    double eval_spacing = 0.0;
    std::int64_t eval_size = 0;
    bool eval_bypass = false;
    eval->add_option("--model", eval_models, "checkpoints in cascade order (repeatable)");
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--spacing", eval_spacing, "mm per pixel; omitted -> pixel units");
    eval->add_option("--size", eval_size, "network input size; omitted -> native resolution");
    eval->add_option("--report", eval_report, "metrics report CSV path")->required();
    eval->add_flag("--bypass", eval_bypass, "score ground truth against itself (pipeline check)");

    auto* predict = app.add_subcommand("predict", "segment a single graymap image");
    std::vector<std::string> predict_models;
    std::string predict_image, predict_out, predict_prob;
    std::int64_t predict_size = 0;
    predict->add_option("--model", predict_models, "checkpoints in cascade order (repeatable)")
        ->required();
    predict->add_option("--image", predict_image, "input PGM image")->required();
    predict->add_option("--out", predict_out, "output binary mask PGM")->required();
    predict->add_option("--prob", predict_prob, "optional 16-bit probability graymap");
    predict->add_option("--size", predict_size, "network input size; mismatched images are resized");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer type");
    std::uint64_t gradcheck_seed = 7;
    bool gradcheck_corrupt = false;
    gradcheck->add_option("--seed", gradcheck_seed, "rng seed (default 7)");
    gradcheck->add_flag("--corrupt", gradcheck_corrupt, "test hook: corrupt a gradient, expect failure");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_count, synth_size, synth_seed, synth_spacing);
        if (train->parsed()) return cmd_train(train_config, train_data, train_out);
        if (eval->parsed())
            return cmd_eval(eval_models, eval_data, eval_spacing, eval_size, eval_report, eval_bypass);
        if (predict->parsed())
            return cmd_predict(predict_models, predict_image, predict_out, predict_prob, predict_size);
        if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_seed, gradcheck_corrupt);
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
    return kExitUsage;
}
