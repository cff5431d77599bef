// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "femasr/autodiff/ops.hpp"
#include "femasr/core/image.hpp"
#include "femasr/core/rng.hpp"

namespace femasr {

// ---------------------------------------------------------------------------
// Blur

struct Kernel {
    std::size_t size = 1;
    std::vector<double> weights{1.0};
    double at(std::size_t y, std::size_t x) const { return weights[y * size + x]; }
};

/// Anisotropic Gaussian sampled on the integer grid centred on the middle
/// tap, axes rotated by theta, normalized to unit sum.
inline Kernel gaussian_kernel(std::size_t size, double sigma_x, double sigma_y, double theta) {
    if (size == 0 || size % 2 == 0) throw std::invalid_argument("gaussian_kernel: size must be odd, got " + std::to_string(size));
    if (!(sigma_x > 0) || !(sigma_y > 0)) throw std::invalid_argument("gaussian_kernel: sigmas must be positive");
    const double c = std::cos(theta), s = std::sin(theta);
    // Inverse covariance of R diag(sx^2, sy^2) R^T.
    const double ix = 1.0 / (sigma_x * sigma_x), iy = 1.0 / (sigma_y * sigma_y);
    const double a = c * c * ix + s * s * iy;
    const double b = c * s * (ix - iy);
    const double d = s * s * ix + c * c * iy;
    Kernel k;
    k.size = size;
    k.weights.assign(size * size, 0.0);
    const long r = static_cast<long>(size / 2);
    double total = 0;
    for (long y = -r; y <= r; ++y)
        for (long x = -r; x <= r; ++x) {
            const double q = a * x * x + 2 * b * x * y + d * y * y;
            const double v = std::exp(-0.5 * q);
            k.weights[static_cast<std::size_t>((y + r) * static_cast<long>(size) + (x + r))] = v;
            total += v;
        }
    for (auto& v : k.weights) v /= total;
    return k;
}

/// Per-channel 2-D convolution with reflect padding.
inline Image apply_blur(const Image& img, const Kernel& k) {
    if (k.size > img.height || k.size > img.width)
        throw std::invalid_argument("apply_blur: kernel " + std::to_string(k.size) + " larger than image " +
                                    std::to_string(img.height) + "x" + std::to_string(img.width));
    Image out(img.channels, img.height, img.width);
    const long r = static_cast<long>(k.size / 2);
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double acc = 0;
                for (long dy = -r; dy <= r; ++dy) {
                    const auto sy = ad::detail::reflect(y + dy, h);
                    for (long dx = -r; dx <= r; ++dx) {
                        const auto sx = ad::detail::reflect(x + dx, w);
                        acc += k.weights[static_cast<std::size_t>((dy + r) * static_cast<long>(k.size) + dx + r)] *
                               img.at(c, sy, sx);
                    }
                }
                out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<float>(acc);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Resize (half-pixel centres, border replicate)

enum class ResizeMode { nearest, bilinear, bicubic };

inline const char* to_string(ResizeMode m) {
    switch (m) {
        case ResizeMode::nearest: return "nearest";
        case ResizeMode::bilinear: return "bilinear";
        case ResizeMode::bicubic: return "bicubic";
    }
    return "?";
}

inline ResizeMode parse_resize_mode(const std::string& s) {
    if (s == "nearest") return ResizeMode::nearest;
    if (s == "bilinear") return ResizeMode::bilinear;
    if (s == "bicubic") return ResizeMode::bicubic;
    throw std::invalid_argument("unknown resize mode '" + s + "'");
}

namespace detail {

/// Keys cubic kernel with a = -0.5.
inline double cubic(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
    if (x < 2) return a * (((x - 5) * x + 8) * x - 4);
    return 0;
}

struct Taps {
    std::vector<std::array<std::size_t, 4>> idx;
    std::vector<std::array<double, 4>> w;
};

inline Taps make_taps(std::size_t in, std::size_t out, ResizeMode mode) {
    Taps t;
    t.idx.resize(out);
    t.w.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const long n = static_cast<long>(in);
    auto clampi = [n](long i) { return static_cast<std::size_t>(std::clamp<long>(i, 0, n - 1)); };
    for (std::size_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        auto& id = t.idx[o];
        auto& w = t.w[o];
        w = {0, 0, 0, 0};
        id = {0, 0, 0, 0};
        switch (mode) {
            case ResizeMode::nearest: {
                id[0] = clampi(static_cast<long>(std::floor((static_cast<double>(o) + 0.5) * scale)));
                w[0] = 1;
                break;
            }
            case ResizeMode::bilinear: {
                const double s = std::clamp(src, 0.0, static_cast<double>(n - 1));
                const long x0 = static_cast<long>(std::floor(s));
                const double f = s - static_cast<double>(x0);
                id[0] = clampi(x0);
                id[1] = clampi(x0 + 1);
                w[0] = 1 - f;
                w[1] = f;
                break;
            }
            case ResizeMode::bicubic: {
                const long x0 = static_cast<long>(std::floor(src));
                const double f = src - static_cast<double>(x0);
                for (int j = 0; j < 4; ++j) {
                    id[j] = clampi(x0 - 1 + j);
                    w[j] = cubic(f - (j - 1));
                }
                break;
            }
        }
    }
    return t;
}

}  // namespace detail

/// Separable resampling. Bicubic uses a = -0.5; no antialiasing filter.
inline Image resize(const Image& img, std::size_t out_h, std::size_t out_w, ResizeMode mode) {
    if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize: output size must be at least 1x1");
    if (img.empty()) throw std::invalid_argument("resize: empty image");
    const auto ty = detail::make_taps(img.height, out_h, mode);
    const auto tx = detail::make_taps(img.width, out_w, mode);
    Image out(img.channels, out_h, out_w);
    std::vector<double> row(img.width);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < out_h; ++y) {
            for (std::size_t x = 0; x < img.width; ++x) {
                double acc = 0;
                for (int j = 0; j < 4; ++j)
                    if (ty.w[y][j] != 0) acc += ty.w[y][j] * img.at(c, ty.idx[y][j], x);
                row[x] = acc;
            }
            for (std::size_t x = 0; x < out_w; ++x) {
                double acc = 0;
                for (int j = 0; j < 4; ++j)
                    if (tx.w[x][j] != 0) acc += tx.w[x][j] * row[tx.idx[x][j]];
                out.at(c, y, x) = static_cast<float>(acc);
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Noise and compression

/// i.i.d. Gaussian with std sigma/255, clipped to [0,1].
inline Image add_gaussian_noise(const Image& img, double sigma, Rng& rng) {
    if (sigma < 0) throw std::invalid_argument("add_gaussian_noise: sigma must be >= 0");
    Image out = img;
    if (sigma == 0) return out;
    const double s = sigma / 255.0;
    for (auto& v : out.data) v = std::clamp(static_cast<float>(v + s * rng.normal()), 0.f, 1.f);
    return out;
}

namespace detail {

constexpr std::array<int, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55,  64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

}  // namespace detail

/// Luminance quantization table scaled with the libjpeg quality formula.
inline std::array<int, 64> jpeg_quant_table(int quality) {
    if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg quality must be in [1,100], got " + std::to_string(quality));
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<int, 64> t{};
    for (int i = 0; i < 64; ++i) t[i] = std::clamp((detail::kLumaTable[i] * scale + 50) / 100, 1, 255);
    return t;
}

/// Per-channel 8x8 block DCT, quantize/dequantize, inverse DCT, clip.
/// Edges are padded by replication up to a multiple of 8.
inline Image jpeg_like(const Image& img, int quality) {
    const auto q = jpeg_quant_table(quality);
    static const auto basis = [] {
        std::array<double, 64> b{};
        for (int u = 0; u < 8; ++u)
            for (int x = 0; x < 8; ++x)
                b[u * 8 + x] = (u == 0 ? std::sqrt(0.125) : 0.5) * std::cos((2 * x + 1) * u * std::numbers::pi / 16);
        return b;
    }();
    Image out(img.channels, img.height, img.width);
    const std::size_t by = (img.height + 7) / 8, bx = (img.width + 7) / 8;
    std::array<double, 64> blk{}, tmp{}, coef{};
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t yb = 0; yb < by; ++yb)
            for (std::size_t xb = 0; xb < bx; ++xb) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) {
                        const auto sy = std::min(yb * 8 + y, img.height - 1);
                        const auto sx = std::min(xb * 8 + x, img.width - 1);
                        blk[y * 8 + x] = static_cast<double>(img.at(c, sy, sx)) * 255.0 - 128.0;
                    }
                // Forward: coef = B blk B^T
                for (int u = 0; u < 8; ++u)
                    for (int x = 0; x < 8; ++x) {
                        double acc = 0;
                        for (int y = 0; y < 8; ++y) acc += basis[u * 8 + y] * blk[y * 8 + x];
                        tmp[u * 8 + x] = acc;
                    }
                for (int u = 0; u < 8; ++u)
                    for (int v = 0; v < 8; ++v) {
                        double acc = 0;
                        for (int x = 0; x < 8; ++x) acc += tmp[u * 8 + x] * basis[v * 8 + x];
                        coef[u * 8 + v] = std::round(acc / q[u * 8 + v]) * q[u * 8 + v];
                    }
                // Inverse: blk = B^T coef B
                for (int y = 0; y < 8; ++y)
                    for (int v = 0; v < 8; ++v) {
                        double acc = 0;
                        for (int u = 0; u < 8; ++u) acc += basis[u * 8 + y] * coef[u * 8 + v];
                        tmp[y * 8 + v] = acc;
                    }
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) {
                        const auto oy = yb * 8 + y, ox = xb * 8 + x;
                        if (oy >= img.height || ox >= img.width) continue;
                        double acc = 0;
                        for (int v = 0; v < 8; ++v) acc += tmp[y * 8 + v] * basis[v * 8 + x];
                        out.at(c, oy, ox) = static_cast<float>(std::clamp((acc + 128.0) / 255.0, 0.0, 1.0));
                    }
            }
    return out;
}

// ---------------------------------------------------------------------------
// Degradation pipeline

enum class DegradeOp { blur, resize, noise, jpeg };

inline const char* to_string(DegradeOp op) {
    switch (op) {
        case DegradeOp::blur: return "blur";
        case DegradeOp::resize: return "resize";
        case DegradeOp::noise: return "noise";
        case DegradeOp::jpeg: return "jpeg";
    }
    return "?";
}

inline DegradeOp parse_degrade_op(const std::string& s) {
    if (s == "blur") return DegradeOp::blur;
    if (s == "resize") return DegradeOp::resize;
    if (s == "noise") return DegradeOp::noise;
    if (s == "jpeg") return DegradeOp::jpeg;
    throw std::invalid_argument("unknown degradation op '" + s + "'");
}

/// Parameter ranges of the blind LR synthesis pipeline.
struct DegradationConfig {
    std::size_t scale = 4;
    std::size_t kernel_min = 7, kernel_max = 21;
    double sigma_min = 0.2, sigma_max = 3.0;
    /// Intermediate resize, as a fraction of the HR side.
    double resize_min = 0.25, resize_max = 1.0;
    std::vector<ResizeMode> resize_modes{ResizeMode::nearest, ResizeMode::bilinear, ResizeMode::bicubic};
    double noise_min = 1.0, noise_max = 25.0;
    int quality_min = 30, quality_max = 95;
    bool shuffle_order = true;
    bool blur = true, intermediate_resize = true, noise = true, jpeg = true;
    std::uint64_t seed = 0;

    static DegradationConfig standard(std::size_t scale) {
        DegradationConfig c;
        c.scale = scale;
        c.resize_min = 1.0 / static_cast<double>(scale);
        return c;
    }

    /// Wider-range preset used for synthetic test benchmarks; an
    /// approximation of the "plus" pipeline, not a port of it.
    static DegradationConfig plus(std::size_t scale) {
        auto c = standard(scale);
        c.sigma_min = 0.1;
        c.sigma_max = 4.0;
        c.resize_min = 0.5 / static_cast<double>(scale);
        c.noise_max = 35.0;
        c.quality_min = 20;
        return c;
    }

    void validate() const {
        auto fail = [](const std::string& why) { throw std::invalid_argument("DegradationConfig: " + why); };
        if (scale != 2 && scale != 4) fail("scale must be 2 or 4");
        if (kernel_min % 2 == 0 || kernel_max % 2 == 0 || kernel_min > kernel_max) fail("kernel sizes must be odd with min <= max");
        if (!(sigma_min > 0) || sigma_min > sigma_max) fail("blur sigma range is empty");
        if (!(resize_min > 0) || resize_min > resize_max) fail("resize range is empty");
        if (resize_modes.empty()) fail("resize mode set is empty");
        if (noise_min < 0 || noise_min > noise_max) fail("noise range is empty");
        if (quality_min < 1 || quality_max > 100 || quality_min > quality_max) fail("quality range is empty");
    }
};

/// Every random draw of one degradation, sufficient to replay it.
struct DegradationDraw {
    std::uint64_t seed = 0;
    std::vector<DegradeOp> order;
    std::size_t kernel_size = 1;
    double sigma_x = 1, sigma_y = 1, theta = 0;
    double resize_factor = 1;
    ResizeMode resize_mode = ResizeMode::bicubic;
    double noise_sigma = 0;
    std::uint64_t noise_seed = 0;
    int quality = 95;

    std::string serialize() const {
        std::ostringstream os;
        os << std::setprecision(17) << "seed=" << seed << " order=";
        for (std::size_t i = 0; i < order.size(); ++i) os << (i ? "," : "") << to_string(order[i]);
        if (order.empty()) os << "-";
        os << " ksize=" << kernel_size << " sigma_x=" << sigma_x << " sigma_y=" << sigma_y << " theta=" << theta
           << " resize_factor=" << resize_factor << " resize_mode=" << to_string(resize_mode)
           << " noise_sigma=" << noise_sigma << " noise_seed=" << noise_seed << " quality=" << quality;
        return os.str();
    }

    static DegradationDraw parse(const std::map<std::string, std::string>& kv) {
        auto get = [&](const std::string& k) {
            auto it = kv.find(k);
            if (it == kv.end()) throw std::invalid_argument("degradation record missing '" + k + "'");
            return it->second;
        };
        DegradationDraw d;
        d.seed = std::stoull(get("seed"));
        const auto ord = get("order");
        if (ord != "-") {
            std::stringstream ss(ord);
            std::string tok;
            while (std::getline(ss, tok, ',')) d.order.push_back(parse_degrade_op(tok));
        }
        d.kernel_size = std::stoul(get("ksize"));
        d.sigma_x = std::stod(get("sigma_x"));
        d.sigma_y = std::stod(get("sigma_y"));
        d.theta = std::stod(get("theta"));
        d.resize_factor = std::stod(get("resize_factor"));
        d.resize_mode = parse_resize_mode(get("resize_mode"));
        d.noise_sigma = std::stod(get("noise_sigma"));
        d.noise_seed = std::stoull(get("noise_seed"));
        d.quality = std::stoi(get("quality"));
        return d;
    }
};

/// Splits "k=v k=v ..." into a map.
inline std::map<std::string, std::string> parse_kv_line(const std::string& line) {
    std::map<std::string, std::string> kv;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("malformed record token '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return kv;
}

/// Draws all random choices for one item. Pure function of (cfg, item_seed).
inline DegradationDraw draw_degradation(const DegradationConfig& cfg, std::uint64_t item_seed) {
    cfg.validate();
    Rng rng(derive_seed(item_seed, {0xDE6}));
    DegradationDraw d;
    d.seed = item_seed;
    std::vector<DegradeOp> ops;
    if (cfg.blur) ops.push_back(DegradeOp::blur);
    if (cfg.intermediate_resize) ops.push_back(DegradeOp::resize);
    if (cfg.noise) ops.push_back(DegradeOp::noise);
    if (cfg.jpeg) ops.push_back(DegradeOp::jpeg);
    if (cfg.shuffle_order) rng.shuffle(ops.begin(), ops.end());
    d.order = ops;
    // Every parameter is drawn even when its op is disabled so the stream
    // position (and therefore other draws) does not depend on the flags.
    const auto kmin = static_cast<std::int64_t>(cfg.kernel_min / 2), kmax = static_cast<std::int64_t>(cfg.kernel_max / 2);
    d.kernel_size = static_cast<std::size_t>(2 * rng.uniform_int(kmin, kmax) + 1);
    d.sigma_x = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    d.sigma_y = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    d.theta = rng.uniform(0.0, std::numbers::pi);
    d.resize_factor = rng.uniform(cfg.resize_min, cfg.resize_max);
    d.resize_mode = cfg.resize_modes[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(cfg.resize_modes.size()) - 1))];
    d.noise_sigma = rng.uniform(cfg.noise_min, cfg.noise_max);
    d.noise_seed = rng.next_u64();
    d.quality = static_cast<int>(rng.uniform_int(cfg.quality_min, cfg.quality_max));
    return d;
}

/// Applies a recorded draw; ends with a bicubic resize to exactly hr/scale.
inline Image apply_degradation(const Image& hr, const DegradationDraw& d, std::size_t scale) {
    if (scale == 0 || hr.height % scale != 0 || hr.width % scale != 0)
        throw std::invalid_argument("degrade: image " + std::to_string(hr.height) + "x" + std::to_string(hr.width) +
                                    " not divisible by scale " + std::to_string(scale));
    Image img = hr;
    for (auto op : d.order) {
        switch (op) {
            case DegradeOp::blur: {
                // Kernel is capped to the largest odd size that fits the current image.
                std::size_t ks = std::min(d.kernel_size, std::min(img.height, img.width));
                if (ks % 2 == 0) --ks;
                img = apply_blur(img, gaussian_kernel(ks, d.sigma_x, d.sigma_y, d.theta));
                break;
            }
            case DegradeOp::resize: {
                const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(hr.height * d.resize_factor)));
                const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(hr.width * d.resize_factor)));
                img = resize(img, h, w, d.resize_mode);
                break;
            }
            case DegradeOp::noise: {
                Rng rng(d.noise_seed);
                img = add_gaussian_noise(img, d.noise_sigma, rng);
                break;
            }
            case DegradeOp::jpeg: img = jpeg_like(img, d.quality); break;
        }
        img.clip();
    }
    img = resize(img, hr.height / scale, hr.width / scale, ResizeMode::bicubic);
    img.clip();
    return img;
}

inline Image degrade(const Image& hr, const DegradationConfig& cfg, std::uint64_t item_seed) {
    return apply_degradation(hr, draw_degradation(cfg, item_seed), cfg.scale);
}

// ---------------------------------------------------------------------------
// Fixed-seed synthetic test sets

struct PairSample {
    Image hr;
    Image lr;
    std::string source;
    std::size_t crop_y = 0, crop_x = 0;
    DegradationDraw draw;

    std::string manifest_line(std::size_t index) const {
        std::ostringstream os;
        os << "index=" << index << " source=" << source << " crop_y=" << crop_y << " crop_x=" << crop_x << ' '
           << draw.serialize();
        return os.str();
    }
};

/// Degrades each source image with per-item seed derive_seed(seed, {index}).
/// Sources at least `crop` on each side are randomly cropped to crop x crop;
/// smaller sources are trimmed to a multiple of the scale.
inline std::vector<PairSample> make_testset(const std::vector<std::pair<std::string, Image>>& sources,
                                            const DegradationConfig& cfg, std::uint64_t seed = 123,
                                            std::size_t crop = 256) {
    if (sources.empty()) throw std::invalid_argument("make_testset: no input images");
    cfg.validate();
    std::vector<PairSample> out;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const auto& [name, img] = sources[i];
        const auto item_seed = derive_seed(seed, {i});
        PairSample p;
        p.source = name;
        if (crop > 0 && img.height >= crop && img.width >= crop && crop % cfg.scale == 0) {
            Rng rng(derive_seed(item_seed, {0xC409}));
            p.crop_y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(img.height - crop)));
            p.crop_x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(img.width - crop)));
            p.hr = img.crop(p.crop_y, p.crop_x, crop, crop);
        } else {
            const auto h = img.height / cfg.scale * cfg.scale, w = img.width / cfg.scale * cfg.scale;
            if (h == 0 || w == 0) throw std::invalid_argument("make_testset: image '" + name + "' smaller than scale");
            p.hr = img.crop(0, 0, h, w);
        }
        p.draw = draw_degradation(cfg, item_seed);
        p.lr = apply_degradation(p.hr, p.draw, cfg.scale);
        out.push_back(std::move(p));
    }
    return out;
}

/// Writes hr/<i>.png, lr/<i>.png and manifest.txt under `dir`.
inline void write_testset(const std::filesystem::path& dir, const std::vector<PairSample>& pairs,
                          const DegradationConfig& cfg, std::uint64_t seed) {
    std::filesystem::create_directories(dir / "hr");
    std::filesystem::create_directories(dir / "lr");
    std::ofstream man(dir / "manifest.txt", std::ios::binary);
    man << "# testset scale=" << cfg.scale << " seed=" << seed << " count=" << pairs.size() << '\n';
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::ostringstream name;
        name << std::setw(4) << std::setfill('0') << i << ".png";
        write_png(dir / "hr" / name.str(), pairs[i].hr);
        write_png(dir / "lr" / name.str(), pairs[i].lr);
        man << pairs[i].manifest_line(i) << '\n';
    }
    if (!man) throw std::runtime_error("write_testset: failed writing manifest");
}

}  // namespace femasr
