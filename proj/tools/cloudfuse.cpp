// cloudfuse command-line interface.
//
// Exit codes: 0 success, 2 validation error (bad input, config mismatch,
// refused data), 3 runtime failure (I/O, non-finite training state).

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cloudfuse/harness.hpp"
#include "cloudfuse/image_grid.hpp"

namespace fs = std::filesystem;
using namespace cloudfuse;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

void write_png(const fs::path& path, const RgbImage& img) {
    std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!file) throw Error("cannot write '" + path.string() + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng failed writing '" + path.string() + "'");
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + 3 * y * img.width));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_json(const fs::path& path, const Json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

TrainConfig config_or_default(const std::string& path) { return path.empty() ? TrainConfig{} : load_config(path); }

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ValidationError("--seeds: '" + item + "' is not a non-negative integer");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::uint64_t seed = 0;
    std::size_t size = 64, count = 1;
    double fraction = 0.3;
    std::string out_dir;
};

int run_synth(const SynthArgs& a) {
    for (std::size_t i = 0; i < a.count; ++i) {
        const PatchTriplet t = make_synthetic_triplet(a.seed + i, a.size, a.size, a.fraction);
        save_triplet(a.out_dir, t);
        std::cout << "wrote " << (fs::path(a.out_dir) / t.id).string() << ".{cloudy,clear,sar}.bin\n";
    }
    return 0;
}

struct MaskArgs {
    std::string in, out, weights;
    double alpha = kCloudWeightAlpha, threshold = kCloudThreshold;
};

int run_mask(const MaskArgs& a) {
    const OpticalPatch p = load_optical(a.in);
    const CloudMask m = refined_cloud_mask(p, a.threshold);
    save_patch(a.out, m.values, PatchKind::map, true);
    const std::string weights = a.weights.empty() ? fs::path(a.out).replace_extension(".weight.bin").string() : a.weights;
    save_patch(weights, weight_map(m, a.alpha).values, PatchKind::map, true);
    std::cout << "cloud fraction " << m.fraction() << "; mask -> " << a.out << ", weights (alpha " << a.alpha
              << ") -> " << weights << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, data, out, resume, log;
};

int run_train(const TrainArgs& a) {
    const TrainConfig cfg = config_or_default(a.config);
    auto [train, val] = training_sets(cfg, load_dataset(a.data));
    std::cout << "config " << to_json(cfg).dump() << "\n";
    std::cout << "training on " << train.size() << " patches, validating on " << val.size() << "\n";
    std::unique_ptr<Trainer> t = a.resume.empty()
                                     ? std::make_unique<Trainer>(cfg, std::move(train), std::move(val))
                                     : std::make_unique<Trainer>(load_checkpoint(a.resume), cfg, std::move(train),
                                                                 std::move(val));
    std::ofstream log;
    if (!a.log.empty()) {
        log.open(a.log);
        if (!log) throw Error("cannot write '" + a.log + "'");
    }
    t->run([&](const StepLog& s) {
        Json entry{{"step", s.step}, {"loss", s.loss}, {"batch", s.batch}};
        if (s.val_mae) entry["val_mae"] = *s.val_mae;
        if (s.val_psnr_db) entry["val_psnr_db"] = finite_or_inf(*s.val_psnr_db);
        if (log) log << entry.dump() << "\n";
        if (s.step % cfg.log_every == 0 || s.step == cfg.steps || s.val_mae) std::cout << entry.dump() << "\n";
    });
    save_checkpoint(a.out, t->checkpoint());
    std::cout << "checkpoint (step " << t->step_count() << ") -> " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt, data, report, config;
};

int run_eval(const EvalArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    if (!a.config.empty()) require_compatible(ck, load_config(a.config));
    const MetricsReport r = evaluate(ck, fs::path(a.data));
    Json j = to_json(r);
    j["config"] = to_json(ck.config);
    j["checkpoint_step"] = ck.step;
    write_json(a.report, j);
    std::cout << j["aggregate"].dump() << "\nreport -> " << a.report << "\n";
    return 0;
}

struct PredictArgs {
    std::string ckpt, opt, sar, out, grid, clear;
};

int run_predict(const PredictArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    const OpticalPatch opt = load_optical(a.opt);
    const SarPatch sar = load_sar(a.sar);
    if (!opt.normalized || !sar.normalized) throw ValidationError("predict expects normalized patches");
    if (opt.bands.height() != sar.channels.height() || opt.bands.width() != sar.channels.width()) {
        throw ShapeError("optical and SAR patches are not co-registered");
    }
    ParameterSet<float> params = ck.params;
    const CloudRemovalNet net{ck.config.fusion};
    ck.config.fusion.require_patch(opt.bands.height(), opt.bands.width());
    const Tensor<float> pred = clip_for_export(net.run(params, opt.bands, sar.channels));
    save_patch(a.out, OpticalPatch{pred, true});
    std::cout << "prediction -> " << a.out << "\n";
    if (!a.grid.empty()) {
        std::optional<OpticalPatch> clear;
        if (!a.clear.empty()) clear = load_optical(a.clear);
        write_png(a.grid, comparison_grid(opt.bands, sar.channels, pred, clear ? &clear->bands : nullptr));
        std::cout << "grid -> " << a.grid << "\n";
    }
    return 0;
}

struct AblateArgs {
    std::string config, data, eval_data, report, seeds = "1,2,3";
};

int run_ablate(const AblateArgs& a) {
    const TrainConfig cfg = config_or_default(a.config);
    const auto train = load_dataset(a.data);
    const auto eval = a.eval_data.empty() ? train : load_dataset(a.eval_data);
    const AblationReport rep = ablation_pair(cfg, train, eval, parse_seeds(a.seeds),
                                             [](const std::string& line) { std::cout << line << std::endl; });
    write_json(a.report, to_json(rep));
    std::cout << "median cloud-MAE delta (weighted - uniform) " << rep.median.cloud_mae << "\nreport -> " << a.report
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cloudfuse: SAR-optical fusion for cloud removal"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Write synthetic (cloudy, clear, SAR) triplets");
    s->add_option("--seed", synth.seed, "Seed of the first triplet");
    s->add_option("--size", synth.size, "Patch edge in pixels (multiple of 16)");
    s->add_option("--fraction", synth.fraction, "Cloud cover fraction in [0, 1]");
    s->add_option("--count", synth.count, "Number of triplets (consecutive seeds)");
    s->add_option("--out-dir", synth.out_dir, "Output directory")->required();

    MaskArgs mask;
    auto* m = app.add_subcommand("mask", "Cloud mask and weight map of an optical patch");
    m->add_option("--in", mask.in, "Optical patch")->required();
    m->add_option("--out", mask.out, "Mask output (single-channel patch)")->required();
    m->add_option("--weights", mask.weights, "Weight-map output (default: <out>.weight.bin)");
    m->add_option("--alpha", mask.alpha, "Cloud weight alpha");
    m->add_option("--threshold", mask.threshold, "Cloud-score threshold (strict)");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train on a directory of triplets");
    t->add_option("--config", train.config, "JSON config (defaults when omitted)");
    t->add_option("--data", train.data, "Triplet directory")->required();
    t->add_option("--out", train.out, "Checkpoint output")->required();
    t->add_option("--resume", train.resume, "Continue from this checkpoint");
    t->add_option("--log", train.log, "Per-step JSON lines log");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
    e->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
    e->add_option("--data", eval.data, "Triplet directory")->required();
    e->add_option("--report", eval.report, "JSON report output")->required();
    e->add_option("--config", eval.config, "Refuse the checkpoint unless its architecture matches this config");

    PredictArgs predict;
    auto* p = app.add_subcommand("predict", "Remove clouds from one patch");
    p->add_option("--ckpt", predict.ckpt, "Checkpoint")->required();
    p->add_option("--opt", predict.opt, "Cloudy optical patch")->required();
    p->add_option("--sar", predict.sar, "SAR patch")->required();
    p->add_option("--out", predict.out, "Prediction output")->required();
    p->add_option("--grid", predict.grid, "PNG comparison grid");
    p->add_option("--clear", predict.clear, "Ground-truth patch shown as the last grid panel");

    AblateArgs ablate;
    auto* a = app.add_subcommand("ablate", "Weighted against uniform objective over several seeds");
    a->add_option("--config", ablate.config, "JSON config (defaults when omitted)");
    a->add_option("--data", ablate.data, "Training triplets")->required();
    a->add_option("--eval-data", ablate.eval_data, "Evaluation triplets (default: training set)");
    a->add_option("--seeds", ablate.seeds, "Comma-separated seeds (at least 3)");
    a->add_option("--report", ablate.report, "JSON report output")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (*s) return run_synth(synth);
        if (*m) return run_mask(mask);
        if (*t) return run_train(train);
        if (*e) return run_eval(eval);
        if (*p) return run_predict(predict);
        if (*a) return run_ablate(ablate);
    } catch (const ValidationError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitValidation;
    } catch (const NumericalError& err) {
        std::cerr << "aborted: " << err.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}
