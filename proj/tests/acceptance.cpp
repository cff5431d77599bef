// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion, mirrors
// everything to acceptance_report.txt in the working directory, and exits
// non-zero if any criterion fails. FEMASR_ACCEPT_ONLY=1,5,7 limits the run to
// a comma-separated subset.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "femasr/femasr.hpp"
#include "femasr/gradcheck_suite.hpp"

using namespace femasr;
namespace fs = std::filesystem;
using TD = ad::Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Writes each line to stdout and the report file as soon as it is complete.
void report(const std::string& line) {
    static std::ofstream file("acceptance_report.txt");
    std::cout << line << std::endl;
    file << line << std::endl;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Toy recipe shared by the training criteria.

constexpr std::size_t kToySetSize = 500;
constexpr std::size_t kToySide = 32;
constexpr std::uint64_t kToySetSeed = 7;
constexpr std::size_t kStage1Steps = 2000;
constexpr std::size_t kStage2Steps = 1000;
constexpr std::size_t kWindow = 200;

const std::vector<Image>& toy_set() {
    static const auto data = synth_texture_set(kToySetSize, kToySide, kToySetSeed);
    return data;
}

AdamConfig toy_adam() {
    AdamConfig a;
    a.lr = 2e-4;
    return a;
}

TrainOptions toy_options(std::size_t steps) {
    TrainOptions o;
    o.steps = steps;
    o.batch = 16;
    o.restart_every = 10;
    o.restart_min_tokens = 20;
    return o;
}

ModelConfig toy_model(std::size_t k) {
    ModelConfig m;
    m.codebook_size = k;
    return m;
}

struct Stage1Run {
    TrainState state;
    double first = 0, last = 0, eval_l1 = 0, seconds = 0;
};

// Stage-I runs keyed by (K, seed); criteria 5, 7 and 8 share them.
std::map<std::pair<std::size_t, std::uint64_t>, Stage1Run>& stage1_cache() {
    static std::map<std::pair<std::size_t, std::uint64_t>, Stage1Run> cache;
    return cache;
}

const Stage1Run& stage1_run(std::size_t k, std::uint64_t seed) {
    auto& cache = stage1_cache();
    const auto key = std::make_pair(k, seed);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    Stage1Run r;
    const auto t0 = Clock::now();
    r.state = TrainState::create(toy_model(k), seed);
    train_stage1(r.state, toy_set(), toy_options(kStage1Steps), LossWeights{}, toy_adam());
    r.seconds = seconds_since(t0);
    r.first = history_mean(r.state, "l1", 0, kWindow);
    r.last = history_mean(r.state, "l1", kStage1Steps - kWindow, kStage1Steps);
    r.eval_l1 = reconstruction_l1(r.state, toy_set());
    report("  [stage1 K=" + std::to_string(k) + " seed=" + std::to_string(seed) + "] first=" + fmt(r.first) +
           " last=" + fmt(r.last) + " eval_l1=" + fmt(r.eval_l1) + " time=" + fmt(r.seconds, 3) + "s");
    return cache.emplace(key, std::move(r)).first->second;
}

Image noise_image(Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
    Image img(c, h, w);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// 1. Quantizer oracle equivalence.

int exhaustive_nearest(const std::vector<double>& q, const TD& codes, std::size_t k, std::size_t c) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
        double d = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double diff = q[ch] - codes.values()[j * c + ch];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(j);
        }
    }
    return best;
}

Outcome criterion1() {
    Rng rng(101);
    const auto t0 = Clock::now();
    std::size_t mismatches = 0, tie_instances = 0;
    constexpr int kInstances = 10000;
    for (int i = 0; i < kInstances; ++i) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(2, 256));
        const auto c = static_cast<std::size_t>(rng.uniform_int(1, 32));
        std::vector<double> cv(k * c);
        for (auto& v : cv) v = rng.uniform(-1.0, 1.0);
        // Every fourth instance duplicates codes so exact ties occur.
        if (i % 4 == 0) {
            ++tie_instances;
            for (std::size_t j = 1; j < k; j += 2)
                std::copy_n(cv.begin() + static_cast<std::ptrdiff_t>((j - 1) * c), c,
                            cv.begin() + static_cast<std::ptrdiff_t>(j * c));
        }
        const TD codes({k, c}, cv, true);
        Codebook<double> cb(codes);
        std::vector<double> zv(c);
        for (auto& v : zv) v = rng.uniform(-1.0, 1.0);
        if (i % 8 == 0) {  // query sitting exactly on a (duplicated) code
            const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            std::copy_n(cv.begin() + static_cast<std::ptrdiff_t>(j * c), c, zv.begin());
        }
        const TD z({1, c, 1, 1}, zv);
        if (quantize(z, cb).indices[0] != exhaustive_nearest(zv, codes, k, c)) ++mismatches;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 10.0, std::to_string(kInstances) + " instances (" +
                                                std::to_string(tie_instances) + " with duplicated codes), " +
                                                std::to_string(mismatches) + " mismatches, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Gradient suite.

Outcome criterion2() {
    const auto rep = gradcheck::run(100, 1e-4);
    double worst = 0;
    std::string worst_name;
    for (const auto& c : rep.cases)
        if (c.max_rel_error >= worst) {
            worst = c.max_rel_error;
            worst_name = c.name;
        }
    return {rep.all_passed() && rep.seconds < 120.0,
            std::to_string(rep.cases.size()) + " ops x 100 trials, worst rel err " + fmt(worst, 3) + " (" +
                worst_name + "), " + fmt(rep.seconds, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 3. Straight-through contract.

Outcome criterion3() {
    Rng rng(303);
    std::size_t exact = 0, total = 0;
    double oracle_err = 0;
    bool codes_untouched = true;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 8, c = 4, p = 6, out = 5;
        Codebook<double> cb(k, c, rng.next_u64());
        std::vector<double> zv(c * p), wv(c * out), cv(p * out);
        for (auto& v : zv) v = rng.normal() * 0.2;
        for (auto& v : wv) v = rng.normal();
        for (auto& v : cv) v = rng.normal();
        const TD zhat({1, c, 1, p}, zv, true);
        const TD w({out, c}, wv), coeff({out, p}, cv);
        const auto q = quantize(zhat, cb);

        // Linear decoder y = W Z with loss sum(C .* y): dL/dZ = W^T C.
        auto linear = [&](const TD& lat) { return ad::sum(ad::mul(ad::matmul(w, ad::reshape(lat, {c, p})), coeff)); };
        // An arbitrary nonlinear tail on top of the same latent.
        auto nonlinear = [&](const TD& lat) {
            const auto h = ad::leaky_relu(ad::matmul(w, ad::reshape(lat, {c, p})), 0.2);
            return ad::add(ad::sum(ad::mul(ad::square(h), coeff)), ad::mean(ad::relu(h)));
        };
        const std::vector<std::function<TD(const TD&)>> tails{linear, nonlinear};
        for (const auto& tail : tails) {
            const auto g = ad::backward(tail(ad::straight_through(q.quantized, zhat)));
            const auto leaf = q.quantized.clone_leaf();
            const auto gq = ad::backward(tail(leaf))[leaf];
            const auto gz = g[zhat];
            for (std::size_t i = 0; i < gz.size(); ++i) {
                exact += gz[i] == gq[i];
                ++total;
            }
            for (double v : g[cb.codes()]) codes_untouched &= v == 0.0;
        }
        const auto gz = ad::backward(linear(ad::straight_through(q.quantized, zhat)))[zhat];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t pos = 0; pos < p; ++pos) {
                double m = 0;
                for (std::size_t o = 0; o < out; ++o) m += wv[o * c + ch] * cv[o * p + pos];
                oracle_err = std::max(oracle_err, std::abs(gz[ch * p + pos] - m));
            }
    }
    return {exact == total && oracle_err < 1e-12 && codes_untouched,
            std::to_string(exact) + "/" + std::to_string(total) + " entries bit-equal, linear oracle max err " +
                fmt(oracle_err, 3)};
}

// ---------------------------------------------------------------------------
// 4. Stop-gradient routing.

Outcome criterion4() {
    Rng rng(404);
    bool ok = true;
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = static_cast<std::size_t>(rng.uniform_int(1, 8));
        Codebook<double> cb(static_cast<std::size_t>(rng.uniform_int(2, 32)), c, rng.next_u64());
        std::vector<double> zv(c * 9);
        for (auto& v : zv) v = rng.normal();
        const TD zhat({1, c, 3, 3}, zv, true);
        const auto q = quantize(zhat, cb);
        const auto t = codebook_terms(zhat, q.quantized);
        const auto zero = TD::scalar(0.0);
        // Only the commitment term left: codes get nothing.
        const auto g1 = ad::backward(ad::add(ad::mul(t.codebook, zero), t.commitment));
        for (double v : g1[cb.codes()]) ok &= v == 0.0;
        // Only the codebook term left: zhat gets nothing.
        const auto g2 = ad::backward(ad::add(t.codebook, ad::mul(t.commitment, zero)));
        for (double v : g2[zhat]) ok &= v == 0.0;
        double n1 = 0, n2 = 0;
        for (double v : g1[zhat]) n1 += v * v;
        for (double v : g2[cb.codes()]) n2 += v * v;
        ok &= n1 > 0 && n2 > 0;
    }
    return {ok, "50 trials, exact zeros on the blocked side, non-zero on the open side"};
}

// ---------------------------------------------------------------------------
// 5. Stage-I toy convergence.

Outcome criterion5() {
    int passing = 0;
    double worst_time = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto& r = stage1_run(64, seed);
        const double ratio = r.last / r.first;
        passing += ratio < 0.5 && r.seconds < 900.0;
        worst_time = std::max(worst_time, r.seconds);
        detail += "seed" + std::to_string(seed) + " ratio " + fmt(ratio, 3) + "; ";
    }
    return {passing >= 2, detail + std::to_string(passing) + "/3 pass, slowest run " + fmt(worst_time, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 6. Single-image overfit.

Outcome criterion6() {
    const auto img = synth_texture_set(1, kToySide, 606).front();
    const auto t0 = Clock::now();
    auto s = TrainState::create(toy_model(32), 6);
    auto o = toy_options(5000);
    o.batch = 1;
    train_stage1(s, {img}, o, LossWeights{}, toy_adam());
    const double secs = seconds_since(t0);
    const double p = psnr(reconstruct(s, img), img);
    return {p > 35.0 && secs < 600.0, "PSNR " + fmt(p, 4) + " dB, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 7. Codebook-size trend.
//
// "Final" L1 uses the same 200-step window as criterion 5. A single end
// snapshot moves by up to 0.02 within the last 20 steps, which is as large
// as the effect being measured; it is printed alongside for reference.

Outcome criterion7() {
    int passing = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto &r16 = stage1_run(16, seed), &r64 = stage1_run(64, seed), &r256 = stage1_run(256, seed);
        const bool ok = r64.last <= r16.last && r256.last <= r64.last;
        passing += ok;
        detail += "seed" + std::to_string(seed) + " " + fmt(r16.last) + ">=" + fmt(r64.last) + ">=" + fmt(r256.last) +
                  (ok ? " ok" : " no") + " (snapshot " + fmt(r16.eval_l1) + "," + fmt(r64.eval_l1) + "," +
                  fmt(r256.eval_l1) + "); ";
    }
    return {passing >= 2, detail + std::to_string(passing) + "/3 monotone"};
}

// ---------------------------------------------------------------------------
// 8. Residual-shortcut ablation.

Outcome criterion8() {
    const auto& prior = stage1_run(64, 1).state;
    const auto dcfg = DegradationConfig::standard(4);
    int passing = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        double fema[2];
        for (bool shortcuts : {true, false}) {
            auto s = begin_stage2(prior, prior.model, seed);
            auto o = toy_options(kStage2Steps);
            o.use_shortcuts = shortcuts;
            train_stage2(s, toy_set(), dcfg, o, LossWeights{}, toy_adam());
            fema[shortcuts] = history_mean(s, "fema", kStage2Steps - kWindow, kStage2Steps);
        }
        passing += fema[1] < fema[0];
        detail += "seed" + std::to_string(seed) + " " + fmt(fema[1]) + " vs " + fmt(fema[0]) + "; ";
    }
    return {passing >= 2, detail + std::to_string(passing) + "/3 lower with shortcuts"};
}

// ---------------------------------------------------------------------------
// 9. Frozen prior.

Outcome criterion9() {
    auto s1 = TrainState::create(toy_model(64), 9);
    train_stage1(s1, toy_set(), toy_options(20), LossWeights{}, toy_adam());
    const std::vector<std::string> prior_keys{"CB.", "G."};
    const auto before = parameter_hash(s1, prior_keys);
    bool ok = true;
    for (bool shortcuts : {true, false}) {
        auto s2 = begin_stage2(s1, s1.model, 10);
        const auto el_before = parameter_hash(s2, {"El."});
        auto o = toy_options(30);
        o.use_shortcuts = shortcuts;
        train_stage2(s2, toy_set(), DegradationConfig::standard(4), o, LossWeights{}, toy_adam());
        ok &= parameter_hash(s2, prior_keys) == before;
        ok &= parameter_hash(s2, {"El."}) != el_before;
    }
    std::ostringstream os;
    os << "prior hash " << std::hex << before << " unchanged after 2 Stage-II runs, LR encoder moved";
    return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 10. Degradation determinism through the command line.

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(FEMASR_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome criterion10() {
    const auto root = fs::temp_directory_path() / "femasr_acceptance_testset";
    fs::remove_all(root);
    fs::create_directories(root / "src");
    Rng rng(1010);
    const std::vector<std::pair<std::size_t, std::size_t>> sides{{96, 96}, {70, 130}, {64, 64}, {150, 90}};
    for (std::size_t i = 0; i < sides.size(); ++i)
        write_png(root / "src" / ("img" + std::to_string(i) + ".png"),
                  noise_image(rng, 3, sides[i].first, sides[i].second));
    bool ok = true;
    std::size_t files = 0;
    for (std::size_t scale : {2u, 4u}) {
        std::vector<fs::path> outs;
        for (const char* tag : {"a", "b"}) {
            const auto out = root / (std::to_string(scale) + tag);
            const int code = run_cli("make-testset --input " + (root / "src").string() + " --scale " +
                                         std::to_string(scale) + " --crop 64 --seed 123 --out " + out.string(),
                                     root / "cli.log");
            if (code != 0) return {false, "make-testset exited with " + std::to_string(code)};
            outs.push_back(out);
        }
        ok &= slurp(outs[0] / "manifest.txt") == slurp(outs[1] / "manifest.txt");
        for (const auto& e : fs::directory_iterator(outs[0] / "lr")) {
            const auto name = e.path().filename();
            ok &= slurp(e.path()) == slurp(outs[1] / "lr" / name);
            const auto lr = read_png(e.path()), hr = read_png(outs[0] / "hr" / name);
            ok &= lr.height * scale == hr.height && lr.width * scale == hr.width;
            ++files;
        }
    }
    fs::remove_all(root);
    return {ok && files == 2 * sides.size(),
            std::to_string(files) + " LR images over scales 2 and 4, byte-identical across runs, dims HR/scale"};
}

// ---------------------------------------------------------------------------
// 11. Dataprep rules.

Outcome criterion11() {
    bool ok = true;
    for (float v : {0.0f, 0.25f, 0.5f, 1.0f}) {
        auto recs = crop_patches(Image(3, 128, 128, v), 64);
        ok &= filter_patches(recs, 10.0).empty();
        for (const auto& r : recs) ok &= r.sigma2 == 0.0 && !r.kept;
    }
    Rng rng(1111);
    std::size_t kept_total = 0, seen = 0;
    for (int i = 0; i < 6; ++i) {
        Image img(3, 128, 128, 0.5f);
        const auto tex = synth_texture(kTextureKinds[static_cast<std::size_t>(i) % kTextureKinds.size()], 64,
                                       static_cast<std::uint64_t>(i));
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 64; ++y)
                for (std::size_t x = 0; x < 64; ++x) img.at(c, y, x) = tex.at(c, y, x);
        // A faint-noise quadrant sits near the threshold.
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 64; y < 128; ++y)
                for (std::size_t x = 64; x < 128; ++x)
                    img.at(c, y, x) = 0.5f + static_cast<float>(rng.normal(0, 0.004 * (i + 1)));
        auto recs = crop_patches(img, 64);
        const auto kept = filter_patches(recs, 10.0);
        for (const auto& r : kept) ok &= r.sigma2 >= 10.0;
        for (const auto& r : recs) ok &= r.kept == (r.sigma2 >= 10.0);
        kept_total += kept.size();
        seen += recs.size();
    }
    ok &= kept_total > 0 && kept_total < seen;

    const auto grid = crop_patches(Image(3, 1024, 1024, 0.3f), 512);
    std::set<std::pair<std::size_t, std::size_t>> origins;
    for (const auto& r : grid) origins.insert({r.y, r.x});
    ok &= grid.size() == 4 &&
          origins == std::set<std::pair<std::size_t, std::size_t>>{{0, 0}, {0, 512}, {512, 0}, {512, 512}};

    const auto face = noise_image(rng, 3, 1024, 1024);
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng crop_rng(s);
        const auto f = face_resize_crop_scaled(face, 0.5, crop_rng, 512);
        ok &= f.x == 0 && f.y == 0 && f.patch.height == 512 && f.patch.width == 512;
    }
    return {ok, "constant patches dropped, " + std::to_string(kept_total) + "/" + std::to_string(seen) +
                    " mixed patches kept, all with sigma2>=10, 1024 -> 4x512 grid, s=0.5 face crop at (0,0)"};
}

// ---------------------------------------------------------------------------
// 12. Metric oracles.

double naive_psnr(const Image& a, const Image& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += std::pow(double(a.data[i]) - double(b.data[i]), 2);
    return 10 * std::log10(1.0 / (s / static_cast<double>(a.data.size())));
}

double naive_ssim(const Image& a, const Image& b) {
    auto luma = [](const Image& im, std::size_t y, std::size_t x) {
        return 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
    };
    double g[11][11], total = 0;
    for (int i = -5; i <= 5; ++i)
        for (int j = -5; j <= 5; ++j) total += g[i + 5][j + 5] = std::exp(-(i * i + j * j) / 4.5);
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t y = 0; y + 11 <= a.height; ++y)
        for (std::size_t x = 0; x + 11 <= a.width; ++x) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double w = g[i][j] / total, p = luma(a, y + i, x + j), q = luma(b, y + i, x + j);
                    mx += w * p;
                    my += w * q;
                    sxx += w * p * p;
                    syy += w * q * q;
                    sxy += w * p * q;
                }
            const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
            acc += ((2 * mx * my + 1e-4) * (2 * cov + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
            ++n;
        }
    return acc / static_cast<double>(n);
}

Outcome criterion12() {
    const double offset = psnr(Image(3, 32, 32, 0.2f), Image(3, 32, 32, 0.3f));
    bool ok = std::abs(offset - 20.0) <= 0.01;
    Rng rng(1212);
    double psnr_err = 0, ssim_err = 0;
    bool self_one = true;
    for (int i = 0; i < 50; ++i) {
        const auto a = noise_image(rng, 3, 24, 27);
        auto b = a;
        for (auto& v : b.data) v = std::clamp(v + static_cast<float>(rng.normal(0, 0.05 + 0.003 * i)), 0.0f, 1.0f);
        psnr_err = std::max(psnr_err, std::abs(psnr(a, b) - naive_psnr(a, b)));
        ssim_err = std::max(ssim_err, std::abs(ssim(a, b) - naive_ssim(a, b)));
        self_one &= ssim(a, a) == 1.0;
    }
    ok &= self_one && psnr_err < 1e-6 && ssim_err < 1e-6;
    return {ok, "offset pair " + fmt(offset, 6) + " dB, SSIM(a,a)==1 " + (self_one ? "yes" : "no") +
                    ", oracle max err psnr " + fmt(psnr_err, 3) + " ssim " + fmt(ssim_err, 3)};
}

// ---------------------------------------------------------------------------
// 13. Visualization sizes.

Outcome criterion13() {
    const ModelConfig cfg = toy_model(64);
    Codebook<float> cb(cfg.codebook_size, cfg.n_z, 13);
    Decoder<float> g(cfg, 14);
    const std::vector<double> uniform(cfg.codebook_size, 1.0);
    const auto single = decode_single_code(cb, g, 3, 1).image;
    const auto grid8 = decode_code_combo(cb, g, sample_index_grid(uniform, 8, 8, 1)).image;
    const auto grid16 = decode_code_combo(cb, g, sample_index_grid(uniform, 16, 16, 2)).image;
    const bool ok = single.height == 8 && single.width == 8 && grid8.height == 64 && grid8.width == 64 &&
                    grid16.height == 128 && grid16.width == 128;
    auto dims = [](const Image& i) { return std::to_string(i.height) + "x" + std::to_string(i.width); };
    return {ok, "t=1 -> " + dims(single) + ", 8x8 grid -> " + dims(grid8) + ", 16x16 grid -> " + dims(grid16)};
}

// ---------------------------------------------------------------------------
// 14. Checkpoint round trip and resume.

std::string checkpoint_bytes(const TrainState& s) {
    std::ostringstream os;
    save_checkpoint(s, os);
    return os.str();
}

double trajectory_gap(const TrainState& a, const TrainState& b) {
    double gap = 0;
    const auto pa = a.params(), pb = b.params();
    if (pa.size() != pb.size()) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i].second.numel(); ++j)
            gap = std::max(gap, std::abs(double(pa[i].second.values()[j]) - double(pb[i].second.values()[j])));
    if (a.history.size() != b.history.size()) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.history.size(); ++i)
        gap = std::max(gap, std::abs(a.history[i].value - b.history[i].value));
    return gap;
}

Outcome criterion14() {
    const auto dir = fs::temp_directory_path() / "femasr_acceptance_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto& data = toy_set();
    const auto dcfg = DegradationConfig::standard(4);

    auto s1 = TrainState::create(toy_model(64), 14);
    train_stage1(s1, data, toy_options(30), LossWeights{}, toy_adam());
    save_checkpoint(s1, dir / "s1.ckpt");
    const auto s1_back = load_checkpoint(dir / "s1.ckpt");
    bool ok = checkpoint_bytes(s1_back) == checkpoint_bytes(s1);

    // Stage I: 30 + 30 resumed from disk against 60 straight.
    auto straight1 = TrainState::create(toy_model(64), 14);
    train_stage1(straight1, data, toy_options(60), LossWeights{}, toy_adam());
    auto resumed1 = load_checkpoint(dir / "s1.ckpt");
    train_stage1(resumed1, data, toy_options(60), LossWeights{}, toy_adam());
    const double gap1 = trajectory_gap(straight1, resumed1);

    // Stage II: 20 + 20 against 40.
    auto straight2 = begin_stage2(s1, s1.model, 15);
    train_stage2(straight2, data, dcfg, toy_options(40), LossWeights{}, toy_adam());
    auto part2 = begin_stage2(s1, s1.model, 15);
    train_stage2(part2, data, dcfg, toy_options(20), LossWeights{}, toy_adam());
    save_checkpoint(part2, dir / "s2.ckpt");
    auto resumed2 = load_checkpoint(dir / "s2.ckpt");
    ok &= checkpoint_bytes(resumed2) == checkpoint_bytes(part2);
    train_stage2(resumed2, data, dcfg, toy_options(40), LossWeights{}, toy_adam());
    const double gap2 = trajectory_gap(straight2, resumed2);
    fs::remove_all(dir);
    ok &= gap1 <= 1e-6 && gap2 <= 1e-6;
    return {ok, "round trip bit-identical, resume max gap stage1 " + fmt(gap1, 3) + " stage2 " + fmt(gap2, 3)};
}

}  // namespace

int main() {
    std::set<int> only;
    if (const char* env = std::getenv("FEMASR_ACCEPT_ONLY")) {
        std::stringstream ss(env);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) only.insert(std::stoi(item));
    }
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"quantizer oracle equivalence", criterion1},
        {"gradient suite", criterion2},
        {"straight-through contract", criterion3},
        {"stop-gradient routing", criterion4},
        {"stage-1 toy convergence", criterion5},
        {"single-image overfit", criterion6},
        {"codebook-size trend", criterion7},
        {"residual-shortcut ablation", criterion8},
        {"frozen prior", criterion9},
        {"degradation determinism", criterion10},
        {"dataprep rules", criterion11},
        {"metric oracles", criterion12},
        {"visualization sizes", criterion13},
        {"checkpoint round trip and resume", criterion14},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        report("criterion " + std::to_string(id) + " " + (o.pass ? "PASS" : "FAIL") + " [" + criteria[i].first + "] " +
               o.detail + " (" + fmt(seconds_since(t0), 3) + " s)");
    }
    return failures == 0 ? 0 : 1;
}
