// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point. Exit status: 0 success, 1 validation or runtime
// failure, 2 usage error. Failures print one line to stderr:
//   error command=<name> kind=<kind> message="<text>"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "femasr/femasr.hpp"
#include "femasr/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace femasr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

/// Failure with a short machine-readable category.
class CliError : public std::runtime_error {
public:
    CliError(std::string kind, const std::string& msg) : std::runtime_error(msg), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

[[noreturn]] void invalid(const std::string& msg) { throw CliError("validation", msg); }

/// Every setting of a run, bound to dotted keys so the effective
/// configuration can be echoed and read back verbatim.
struct RunConfig {
    std::string command;
    std::string seed;  // empty when not given
    std::string input, out, run_dir, data, checkpoint, stage1, resume, hr, sr, testset, groups;
    std::size_t synthetic = 0;
    std::size_t synthetic_size = 32;
    std::size_t patch_size = 512;
    double threshold = 10.0;
    bool face = false;
    std::size_t crop = 256;
    std::size_t scale = 0;  // 0: take the checkpoint's factor
    std::size_t trials = 100;
    std::size_t tile = 1;
    std::size_t samples = 8;

    ModelConfig model;
    DegradationConfig degrade = DegradationConfig::standard(4);
    LossWeights loss;
    AdamConfig adam;
    TrainOptions train;

    ConfigBinder binder;

    RunConfig() {
        train.log_every = 100;
        train.checkpoint_every = 500;
        binder.bind("run.command", command);
        binder.bind("run.seed", seed);
        binder.bind("run.input", input);
        binder.bind("run.out", out);
        binder.bind("run.run_dir", run_dir);
        binder.bind("run.data", data);
        binder.bind("run.synthetic", synthetic);
        binder.bind("run.synthetic_size", synthetic_size);
        binder.bind("run.checkpoint", checkpoint);
        binder.bind("run.stage1", stage1);
        binder.bind("run.resume", resume);
        binder.bind("run.hr", hr);
        binder.bind("run.sr", sr);
        binder.bind("run.testset", testset);
        binder.bind("run.groups", groups);
        binder.bind("run.patch_size", patch_size);
        binder.bind("run.threshold", threshold);
        binder.bind("run.face", face);
        binder.bind("run.crop", crop);
        binder.bind("run.scale", scale);
        binder.bind("run.trials", trials);
        binder.bind("run.tile", tile);
        binder.bind("run.samples", samples);
        bind_config(binder, model);
        bind_config(binder, degrade);
        bind_config(binder, loss);
        bind_config(binder, adam);
        bind_config(binder, train);
    }
    RunConfig(const RunConfig&) = delete;
    RunConfig& operator=(const RunConfig&) = delete;

    bool has_seed() const { return !seed.empty(); }

    std::uint64_t seed_value(std::optional<std::uint64_t> fallback = std::nullopt) const {
        if (seed.empty()) {
            if (fallback) return *fallback;
            invalid("--seed is required for " + command);
        }
        std::size_t pos = 0;
        std::uint64_t v = 0;
        try {
            if (seed[0] == '-') throw std::invalid_argument("negative");
            v = std::stoull(seed, &pos);
        } catch (...) {
            invalid("--seed must be a non-negative integer, got '" + seed + "'");
        }
        if (pos != seed.size()) invalid("--seed must be a non-negative integer, got '" + seed + "'");
        return v;
    }
};

/// Writes to the run log and mirrors to stdout.
class Log {
public:
    void open(const fs::path& path) {
        fs::create_directories(path.parent_path());
        file_.open(path);
        if (!file_) throw CliError("io", "cannot write log file " + path.string());
    }
    template <class V>
    Log& operator<<(const V& v) {
        std::cout << v;
        if (file_.is_open()) file_ << v;
        return *this;
    }
    void flush() {
        std::cout.flush();
        if (file_.is_open()) file_.flush();
    }
    /// A stream sink for library progress output.
    std::ostream& stream() { return tee_; }

private:
    struct TeeBuf : std::streambuf {
        Log* log;
        explicit TeeBuf(Log* l) : log(l) {}
        int overflow(int c) override {
            if (c != EOF) *log << static_cast<char>(c);
            return c;
        }
    };
    std::ofstream file_;
    TeeBuf buf_{this};
    std::ostream tee_{&buf_};
};

void require_path(const std::string& value, const char* flag) {
    if (value.empty()) invalid(std::string(flag) + " is required");
}

void require_exists(const std::string& value, const char* flag) {
    require_path(value, flag);
    if (!fs::exists(value)) invalid(std::string(flag) + " path does not exist: " + value);
}

/// PNG inputs from a file or a directory.
std::vector<fs::path> input_pngs(const std::string& input, const char* flag) {
    require_exists(input, flag);
    if (fs::is_directory(input)) {
        auto files = list_pngs(input);
        if (files.empty()) invalid(std::string(flag) + " directory has no PNG files: " + input);
        return files;
    }
    return {fs::path(input)};
}

/// Non-overlapping crop x crop tiles of every PNG in `dir`, row-major.
std::vector<Image> load_tiles(const std::string& dir, std::size_t crop, Log& log) {
    std::vector<Image> out;
    for (const auto& f : input_pngs(dir, "--data")) {
        Image img = read_png(f);
        if (img.channels == 1) {
            Image rgb(3, img.height, img.width);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < img.height * img.width; ++i) rgb.data[c * img.height * img.width + i] = img.data[i];
            img = std::move(rgb);
        }
        if (img.height < crop || img.width < crop) {
            log << "skip " << f.string() << ": smaller than " << crop << "\n";
            continue;
        }
        for (std::size_t y = 0; y + crop <= img.height; y += crop)
            for (std::size_t x = 0; x + crop <= img.width; x += crop) out.push_back(img.crop(y, x, crop, crop));
    }
    if (out.empty()) invalid("--data yielded no usable " + std::to_string(crop) + "x" + std::to_string(crop) + " tiles");
    return out;
}

std::vector<Image> training_images(const RunConfig& rc, std::uint64_t seed, Log& log) {
    if (!rc.data.empty() && rc.synthetic) invalid("give either --data or --synthetic, not both");
    if (!rc.data.empty()) return load_tiles(rc.data, rc.train.hr_crop, log);
    if (!rc.synthetic) invalid("training data required: --data DIR or --synthetic COUNT");
    if (rc.synthetic_size < rc.train.hr_crop) invalid("run.synthetic_size must be >= train.hr_crop");
    log << "synthetic textures: " << rc.synthetic << " of " << rc.synthetic_size << "x" << rc.synthetic_size << "\n";
    return synth_texture_set(rc.synthetic, rc.synthetic_size, derive_seed(seed, {0x5E7}));
}

// ---------------------------------------------------------------------------
// Commands

int cmd_prepare_data(RunConfig& rc, Log& log) {
    require_exists(rc.input, "--input");
    PrepareOptions opt;
    opt.patch_size = rc.patch_size;
    opt.threshold = rc.threshold;
    opt.face_mode = rc.face;
    if (rc.face) opt.seed = rc.seed_value();
    else opt.seed = rc.seed_value(0);
    const auto sum = prepare_dataset(rc.input, rc.out, opt, &log.stream());
    std::ofstream rep(fs::path(rc.out) / "reports" / "prepare_summary.txt");
    rep << "sources=" << sum.sources << " cropped=" << sum.cropped << " kept=" << sum.kept << " filtered=" << sum.filtered
        << " skipped_small=" << sum.skipped_small << '\n';
    log << "prepare-data: sources=" << sum.sources << " kept=" << sum.kept << " filtered=" << sum.filtered << "\n";
    return kExitOk;
}

int cmd_degrade(RunConfig& rc, Log& log) {
    const auto files = input_pngs(rc.input, "--input");
    const auto seed = rc.seed_value();
    const auto scale = rc.degrade.scale;
    std::ofstream man(fs::path(rc.out) / "reports" / "degrade_manifest.txt", std::ios::binary);
    man << "# degrade scale=" << scale << " seed=" << seed << " count=" << files.size() << '\n';
    for (std::size_t i = 0; i < files.size(); ++i) {
        const Image src = read_png(files[i]);
        const std::size_t h = src.height / scale * scale, w = src.width / scale * scale;
        if (h == 0 || w == 0) invalid("image smaller than scale: " + files[i].string());
        const Image hr = (h == src.height && w == src.width) ? src : src.crop(0, 0, h, w);
        const auto draw = draw_degradation(rc.degrade, derive_seed(seed, {i}));
        const Image lr = quantize_8bit(apply_degradation(hr, draw, scale));
        const auto name = files[i].filename().string();
        write_png(fs::path(rc.out) / "lr" / name, lr);
        man << "file=" << name << " hr=" << h << "x" << w << " lr=" << lr.height << "x" << lr.width << ' '
            << draw.serialize() << '\n';
    }
    log << "degrade: " << files.size() << " image(s) -> " << (fs::path(rc.out) / "lr").string() << "\n";
    return kExitOk;
}

int cmd_make_testset(RunConfig& rc, Log& log) {
    const auto files = input_pngs(rc.input, "--input");
    const auto seed = rc.seed_value(123);
    std::vector<std::pair<std::string, Image>> sources;
    for (const auto& f : files) sources.emplace_back(f.filename().string(), read_png(f));
    const auto pairs = make_testset(sources, rc.degrade, seed, rc.crop);
    write_testset(rc.out, pairs, rc.degrade, seed);
    log << "make-testset: " << pairs.size() << " pair(s), scale " << rc.degrade.scale << ", seed " << seed << "\n";
    return kExitOk;
}

void write_summary(const fs::path& path, const TrainState& s, const std::vector<std::string>& terms,
                   const std::map<std::string, double>& extra) {
    std::ofstream os(path);
    os << "stage=" << s.stage << " seed=" << s.seed << " steps=" << s.step << '\n';
    const std::uint64_t end = s.step, begin = end > 200 ? end - 200 : 0;
    for (const auto& t : terms) {
        try {
            os << "final_mean_" << t << '=' << history_mean(s, t, begin, end) << '\n';
        } catch (const std::invalid_argument&) {
        }
    }
    for (const auto& [k, v] : extra) os << k << '=' << v << '\n';
}

int cmd_train_stage1(RunConfig& rc, Log& log) {
    const auto seed = rc.seed_value();
    TrainState state;
    if (!rc.resume.empty()) {
        require_exists(rc.resume, "--resume");
        state = load_checkpoint(fs::path(rc.resume));
        if (state.stage != 1) invalid("--resume checkpoint is not a Stage-I checkpoint");
        if (state.seed != seed) invalid("--seed differs from the resumed checkpoint's seed " + std::to_string(state.seed));
        if (model_config_text(state.model) != model_config_text(rc.model))
            invalid("model config differs from the resumed checkpoint");
        log << "resuming Stage I at step " << state.step << "\n";
    } else {
        state = TrainState::create(rc.model, seed);
    }
    const auto data = training_images(rc, seed, log);
    auto opts = rc.train;
    opts.out_dir = rc.out;
    log << "train-stage1: " << data.size() << " images, " << opts.steps << " steps, K=" << rc.model.codebook_size << "\n";
    train_stage1(state, data, opts, rc.loss, rc.adam, &log.stream());

    const std::size_t n = std::min(rc.samples, data.size());
    std::vector<Image> tiles;
    for (std::size_t i = 0; i < n; ++i) {
        tiles.push_back(data[i]);
        tiles.push_back(reconstruct(state, data[i]));
    }
    if (!tiles.empty()) write_png(fs::path(rc.out) / "samples" / "stage1_reconstructions.png", contact_sheet(tiles, 2));
    const double eval_l1 = reconstruction_l1(state, data);
    write_summary(fs::path(rc.out) / "reports" / "stage1_summary.txt", state,
                  {"l1", "codebook", "commitment", "perceptual", "semantic", "g_adv", "d_loss", "perplexity"},
                  {{"reconstruction_l1", eval_l1}});
    log << "train-stage1: done, reconstruction L1 " << eval_l1 << ", checkpoint "
        << (fs::path(rc.out) / "checkpoints" / "stage1_final.ckpt").string() << "\n";
    return kExitOk;
}

int cmd_train_stage2(RunConfig& rc, Log& log) {
    const auto seed = rc.seed_value();
    if (rc.degrade.scale != rc.model.sr_scale)
        invalid("degrade.scale (" + std::to_string(rc.degrade.scale) + ") must equal model.sr_scale (" +
                std::to_string(rc.model.sr_scale) + ")");
    TrainState state;
    if (!rc.resume.empty()) {
        require_exists(rc.resume, "--resume");
        state = load_checkpoint(fs::path(rc.resume));
        if (state.stage != 2) invalid("--resume checkpoint is not a Stage-II checkpoint");
        if (state.seed != seed) invalid("--seed differs from the resumed checkpoint's seed " + std::to_string(state.seed));
        log << "resuming Stage II at step " << state.step << "\n";
    } else {
        require_exists(rc.stage1, "--stage1");
        const auto s1 = load_checkpoint(fs::path(rc.stage1));
        if (s1.stage != 1) invalid("--stage1 checkpoint is not a Stage-I checkpoint");
        state = begin_stage2(s1, rc.model, seed);
    }
    const auto before = parameter_hash(state, {"CB.", "G."});
    const auto data = training_images(rc, seed, log);
    auto opts = rc.train;
    opts.out_dir = rc.out;
    log << "train-stage2: " << data.size() << " images, " << opts.steps << " steps, shortcuts "
        << (opts.use_shortcuts ? "on" : "off") << "\n";
    train_stage2(state, data, rc.degrade, opts, rc.loss, rc.adam, &log.stream());
    if (parameter_hash(state, {"CB.", "G."}) != before) throw CliError("internal", "frozen prior changed during Stage II");

    std::vector<Image> tiles;
    const std::size_t n = std::min(rc.samples, data.size());
    for (std::size_t i = 0; i < n; ++i) {
        const Image& hr = data[i];
        const Image lr = apply_degradation(hr, draw_degradation(rc.degrade, derive_seed(seed, {0xE7A1, i})),
                                           rc.degrade.scale);
        tiles.push_back(resize(lr, hr.height, hr.width, ResizeMode::nearest));
        tiles.push_back(super_resolve(state, lr, opts.use_shortcuts));
        tiles.push_back(hr);
    }
    if (!tiles.empty()) write_png(fs::path(rc.out) / "samples" / "stage2_lr_sr_hr.png", contact_sheet(tiles, 3));
    write_summary(fs::path(rc.out) / "reports" / "stage2_summary.txt", state, {"fema", "rec", "l1", "g_adv", "d_loss"}, {});
    log << "train-stage2: done, checkpoint " << (fs::path(rc.out) / "checkpoints" / "stage2_final.ckpt").string()
        << "\n";
    return kExitOk;
}

TrainState load_stage2(const RunConfig& rc) {
    require_exists(rc.checkpoint, "--checkpoint");
    auto s = load_checkpoint(fs::path(rc.checkpoint));
    if (s.stage != 2) invalid("--checkpoint is not a Stage-II checkpoint");
    if (rc.scale != 0 && rc.scale != s.model.sr_scale)
        invalid("--scale " + std::to_string(rc.scale) + " does not match the checkpoint's factor " +
                std::to_string(s.model.sr_scale));
    return s;
}

int cmd_infer(RunConfig& rc, Log& log) {
    const auto state = load_stage2(rc);
    const auto files = input_pngs(rc.input, "--input");
    const bool to_dir = fs::is_directory(rc.input);
    for (const auto& f : files) {
        const Image lr = read_png(f);
        if (lr.channels != rc.model.in_channels) invalid("input " + f.string() + " is not an RGB image");
        const Image sr = super_resolve(state, lr, rc.train.use_shortcuts);
        const fs::path dst = to_dir ? fs::path(rc.out) / f.filename() : fs::path(rc.out);
        write_png(dst, sr);
        log << "infer: " << f.string() << " " << lr.width << "x" << lr.height << " -> " << dst.string() << " "
            << sr.width << "x" << sr.height << "\n";
    }
    return kExitOk;
}

int cmd_eval(RunConfig& rc, Log& log) {
    MetricReport report;
    if (!rc.checkpoint.empty()) {
        const auto state = load_stage2(rc);
        require_exists(rc.testset, "--testset");
        const auto lr_files = input_pngs((fs::path(rc.testset) / "lr").string(), "--testset lr/");
        for (const auto& f : lr_files) {
            const auto hr_path = fs::path(rc.testset) / "hr" / f.filename();
            if (!fs::exists(hr_path)) invalid("no HR image for " + f.filename().string());
            const Image hr = read_png(hr_path);
            const Image sr = super_resolve(state, read_png(f), rc.train.use_shortcuts);
            if (!sr.same_shape(hr)) invalid("SR output for " + f.filename().string() + " does not match HR size");
            write_png(fs::path(rc.out) / "samples" / f.filename(), sr);
            report.add(f.filename().string(), quantize_8bit(sr), hr);
        }
    } else {
        require_exists(rc.sr, "--sr");
        require_exists(rc.hr, "--hr");
        for (const auto& f : input_pngs(rc.sr, "--sr")) {
            const auto hr_path = fs::path(rc.hr) / f.filename();
            if (!fs::exists(hr_path)) invalid("no HR image for " + f.filename().string());
            const Image sr = read_png(f), hr = read_png(hr_path);
            if (!sr.same_shape(hr)) invalid("size mismatch for " + f.filename().string());
            report.add(f.filename().string(), sr, hr);
        }
    }
    std::ofstream os(fs::path(rc.out) / "reports" / "metrics.txt");
    report.write(os);
    log << "eval: " << report.entries.size() << " image(s), mean PSNR " << report.mean_psnr << " dB, mean SSIM "
        << report.mean_ssim << "\n";
    return kExitOk;
}

int cmd_viz_codebook(RunConfig& rc, Log& log) {
    require_exists(rc.checkpoint, "--checkpoint");
    const auto state = load_checkpoint(fs::path(rc.checkpoint));
    const auto seed = rc.seed_value(0);
    if (rc.tile == 0) invalid("run.tile must be >= 1");
    const fs::path samples = fs::path(rc.out) / "samples";
    const auto& cb = state.codebook;

    std::vector<Rendering> singles;
    std::vector<std::string> legend;
    for (std::size_t k = 0; k < cb.size(); ++k) {
        singles.push_back(decode_single_code(cb, state.decoder, k, rc.tile));
        legend.push_back("code=" + std::to_string(k));
    }
    const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cb.size()))));
    write_sheet(samples, "codes_t" + std::to_string(rc.tile), singles, legend, cols);
    log << "viz-codebook: " << cb.size() << " single-code patches of " << singles.front().image.height << "x"
        << singles.front().image.width << "\n";

    const std::vector<double> uniform(cb.size(), 1.0);
    for (std::size_t g : {std::size_t{8}, std::size_t{16}}) {
        const auto r = decode_code_combo(cb, state.decoder, sample_index_grid(uniform, g, g, derive_seed(seed, {g})));
        write_sheet(samples, "random_grid" + std::to_string(g), {r}, {"grid=" + std::to_string(g)}, 1);
        log << "viz-codebook: random " << g << "x" << g << " grid -> " << r.image.height << "x" << r.image.width << "\n";
    }

    if (!rc.groups.empty()) {
        require_exists(rc.groups, "--groups");
        std::map<std::string, std::vector<Image>> groups;
        for (const auto& e : fs::directory_iterator(rc.groups)) {
            if (!e.is_directory()) continue;
            auto& imgs = groups[e.path().filename().string()];
            for (const auto& f : list_pngs(e.path())) imgs.push_back(read_png(f));
        }
        if (groups.empty()) invalid("--groups has no label subdirectories");
        const auto hist = category_code_histogram(groups, state.encoder, cb, &log.stream());
        std::ofstream rep(fs::path(rc.out) / "reports" / "category_usage.txt");
        for (const auto& [label, dist] : hist) {
            rep << "label=" << label;
            for (std::size_t k = 0; k < dist.size(); ++k) rep << ' ' << dist[k];
            rep << '\n';
            const auto r = decode_code_combo(cb, state.decoder, sample_index_grid(dist, 16, 16, derive_seed(seed, {0xCA7})));
            write_sheet(samples, "category_" + label, {r}, {"label=" + label}, 1);
        }
        log << "viz-codebook: " << hist.size() << " label(s) summarized\n";
    }
    return kExitOk;
}

int cmd_gradcheck(RunConfig& rc, Log& log) {
    if (rc.trials == 0) invalid("run.trials must be >= 1");
    std::ostringstream detail;
    const auto rep = gradcheck::run(rc.trials, 1e-4, rc.seed_value(2024), &detail);
    log << detail.str();
    std::ofstream os(fs::path(rc.out) / "reports" / "gradcheck.txt");
    os << detail.str() << "summary cases=" << rep.cases.size() << " passed=" << (rep.all_passed() ? 1 : 0)
       << " seconds=" << rep.seconds << '\n';
    log << "gradcheck: " << (rep.all_passed() ? "all passed" : "FAILURES") << " in " << rep.seconds << " s\n";
    if (!rep.all_passed()) throw CliError("gradcheck", "finite-difference check failed");
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct Command {
    std::string name;
    std::string help;
    int (*run)(RunConfig&, Log&);
    /// (flag, key, help) triples beyond the shared ones.
    std::vector<std::array<std::string, 3>> flags;
    bool out_is_file = false;
};

std::vector<Command> commands() {
    return {
        {"prepare-data", "crop source images into patches and filter flat ones", cmd_prepare_data,
         {{"--input", "run.input", "directory of source PNGs"},
          {"--patch-size", "run.patch_size", "patch side (default 512)"},
          {"--threshold", "run.threshold", "minimum Sobel variance kept (default 10)"},
          {"--face", "run.face", "face mode: random rescale in [0.5,1] then one crop (true/false)"}}},
        {"degrade", "synthesize LR images from HR images", cmd_degrade,
         {{"--input", "run.input", "HR PNG file or directory"}, {"--scale", "degrade.scale", "downscale factor"}}},
        {"make-testset", "build a fixed-seed HR/LR test set", cmd_make_testset,
         {{"--input", "run.input", "directory of HR PNGs"},
          {"--scale", "degrade.scale", "downscale factor"},
          {"--crop", "run.crop", "HR crop side (default 256)"}}},
        {"train-stage1", "pretrain the codebook, encoder and decoder", cmd_train_stage1,
         {{"--data", "run.data", "directory of training PNGs (tiled to train.hr_crop)"},
          {"--synthetic", "run.synthetic", "use this many synthetic textures instead of --data"},
          {"--steps", "train.steps", "target step count"},
          {"--batch", "train.batch", "batch size"},
          {"--resume", "run.resume", "continue from a Stage-I checkpoint"}}},
        {"train-stage2", "train the LR encoder against the frozen prior", cmd_train_stage2,
         {{"--stage1", "run.stage1", "Stage-I checkpoint"},
          {"--data", "run.data", "directory of HR training PNGs"},
          {"--synthetic", "run.synthetic", "use this many synthetic textures instead of --data"},
          {"--steps", "train.steps", "target step count"},
          {"--batch", "train.batch", "batch size"},
          {"--shortcuts", "train.use_shortcuts", "residual shortcuts on/off (true/false)"},
          {"--resume", "run.resume", "continue from a Stage-II checkpoint"}}},
        {"infer", "super-resolve LR images", cmd_infer,
         {{"--checkpoint", "run.checkpoint", "Stage-II checkpoint"},
          {"--input", "run.input", "LR PNG file or directory"},
          {"--scale", "run.scale", "expected factor; must match the checkpoint"},
          {"--shortcuts", "train.use_shortcuts", "residual shortcuts on/off (true/false)"},
          {"--run-dir", "run.run_dir", "where logs and the config snapshot go (default: next to --out)"}},
         true},
        {"eval", "PSNR/SSIM of SR images, or of a checkpoint on a test set", cmd_eval,
         {{"--sr", "run.sr", "directory of SR PNGs"},
          {"--hr", "run.hr", "directory of HR PNGs with matching names"},
          {"--checkpoint", "run.checkpoint", "Stage-II checkpoint (with --testset)"},
          {"--testset", "run.testset", "test set directory with hr/ and lr/"},
          {"--scale", "run.scale", "expected factor; must match the checkpoint"}}},
        {"viz-codebook", "decode single codes, random grids and per-label code statistics", cmd_viz_codebook,
         {{"--checkpoint", "run.checkpoint", "Stage-I or Stage-II checkpoint"},
          {"--tile", "run.tile", "single-code tile side in latent cells (default 1)"},
          {"--groups", "run.groups", "directory with one subdirectory of PNGs per label"}}},
        {"gradcheck", "finite-difference check of every op and loss", cmd_gradcheck,
         {{"--trials", "run.trials", "randomized trials per case (default 100)"}}},
    };
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += (c == '\n') ? ' ' : c;
    }
    return out + "\"";
}

int fail(const std::string& command, const std::string& kind, const std::string& msg, int code = kExitFailure) {
    std::cerr << "error command=" << (command.empty() ? "-" : command) << " kind=" << kind << " message=" << quote(msg)
              << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"femasr: codebook-prior blind super-resolution at desk scale"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every command");

    const auto cmds = commands();
    struct Parsed {
        std::string config;
        std::vector<std::string> sets;
        std::string seed, out;
        std::map<std::string, std::string> values;
        std::map<std::string, CLI::Option*> options;
    };
    std::vector<Parsed> parsed(cmds.size());
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < cmds.size(); ++i) {
        auto* sub = app.add_subcommand(cmds[i].name, cmds[i].help);
        auto& p = parsed[i];
        sub->add_option("--config", p.config, "key = value config file (e.g. a previous effective_config.txt)");
        sub->add_option("--set", p.sets, "override one key: --set model.codebook_size=32 (repeatable)");
        p.options["run.seed"] = sub->add_option("--seed", p.seed, "master seed for all randomness");
        p.options["run.out"] = sub->add_option(
            "--out", p.out, cmds[i].out_is_file ? "output PNG file or directory" : "output directory");
        for (const auto& f : cmds[i].flags) p.options[f[1]] = sub->add_option(f[0], p.values[f[1]], f[2]);
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string cmd;
        for (std::size_t i = 0; i < subs.size(); ++i)
            if (subs[i]->parsed()) cmd = cmds[i].name;
        std::cerr << (cmd.empty() ? app.help() : app.get_subcommand(cmd)->help());
        return fail(cmd, "usage", e.what(), kExitUsage);
    }

    std::size_t ci = 0;
    while (!subs[ci]->parsed()) ++ci;
    const auto& cmd = cmds[ci];
    auto& p = parsed[ci];

    RunConfig rc;
    Log log;
    try {
        try {
            if (!p.config.empty()) {
                const auto kv = load_kv_file(p.config);
                for (const auto& [k, v] : kv)
                    if (k == "run.command" && v != cmd.name)
                        invalid("config file was written for '" + v + "', not '" + cmd.name + "'");
                rc.binder.apply(kv);
            }
            for (const auto& s : p.sets) {
                const auto eq = s.find('=');
                if (eq == std::string::npos) invalid("--set expects key=value, got '" + s + "'");
                rc.binder.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
            }
            if (p.options["run.seed"]->count()) rc.binder.set("run.seed", p.seed);
            if (p.options["run.out"]->count()) rc.binder.set("run.out", p.out);
            for (const auto& f : cmd.flags)
                if (p.options[f[1]]->count()) rc.binder.set(f[1], p.values[f[1]]);
        } catch (const ConfigError& e) {
            throw CliError("config", e.what());
        }
        rc.command = cmd.name;
        if (rc.out.empty()) {
            if (cmd.out_is_file) invalid("--out is required");
            rc.out = (fs::path("runs") / cmd.name).string();
        }

        rc.model.validate();
        rc.degrade.validate();
        rc.loss.validate();
        rc.adam.validate();
        rc.train.validate();
        if (rc.has_seed()) (void)rc.seed_value();

        fs::path run_dir = rc.out;
        if (cmd.out_is_file) {
            run_dir = !rc.run_dir.empty() ? fs::path(rc.run_dir)
                      : fs::is_directory(rc.input) ? fs::path(rc.out)
                                                   : fs::absolute(rc.out).parent_path();
        }
        for (const char* d : {"checkpoints", "logs", "samples", "reports"}) fs::create_directories(run_dir / d);
        {
            std::ofstream snap(run_dir / "effective_config.txt");
            snap << "# femasr " << cmd.name << " effective configuration\n" << rc.binder.dump();
            if (!snap) throw CliError("io", "cannot write " + (run_dir / "effective_config.txt").string());
        }
        log.open(run_dir / "logs" / (cmd.name + ".log"));
        const int code = cmd.run(rc, log);
        log.flush();
        return code;
    } catch (const CliError& e) {
        log.flush();
        return fail(cmd.name, e.kind(), e.what());
    } catch (const TrainingDiverged& e) {
        log.flush();
        return fail(cmd.name, "diverged", e.what());
    } catch (const CheckpointError& e) {
        return fail(cmd.name, "checkpoint", e.what());
    } catch (const std::invalid_argument& e) {
        return fail(cmd.name, "validation", e.what());
    } catch (const std::exception& e) {
        return fail(cmd.name, "runtime", e.what());
    }
}
