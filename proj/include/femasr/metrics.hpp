// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "femasr/core/image.hpp"

namespace femasr {

constexpr double kPsnrCap = 99.0;

namespace detail {
inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + std::to_string(a.channels) + "x" +
                                    std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                                    std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                                    std::to_string(b.width));
}

/// 601 luma in double; single-channel images pass through.
inline std::vector<double> luma_d(const Image& img) {
    const auto n = img.plane();
    std::vector<double> out(n);
    if (img.channels == 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = img.data[i];
    } else if (img.channels == 3) {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = 0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i];
    } else {
        throw std::invalid_argument("luma: expected 1 or 3 channels");
    }
    return out;
}

inline std::vector<double> gaussian_window_1d(std::size_t size, double sigma) {
    std::vector<double> w(size);
    const double c = static_cast<double>(size / 2);
    double total = 0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - c;
        w[i] = std::exp(-d * d / (2 * sigma * sigma));
        total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
}

/// Valid-region separable filter of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
    const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
    std::vector<double> rows(h * ow);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += k[j] * src[y * w + x + j];
            rows[y * ow + x] = acc;
        }
    std::vector<double> out(oh * ow);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += k[j] * rows[(y + j) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}
}  // namespace detail

/// Mean squared error over all channels, in double.
inline double mse(const Image& a, const Image& b) {
    detail::require_same_shape(a, b, "mse");
    if (a.empty()) throw std::invalid_argument("mse: empty image");
    double acc = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

/// 10 log10(peak^2 / MSE) over all channels, capped at 99 dB.
inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
    const double m = mse(a, b);
    if (m == 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

struct SsimOptions {
    std::size_t window = 11;
    double sigma = 1.5;
    double peak = 1.0;
};

/// Mean local SSIM on luma with a Gaussian window over the valid region.
inline double ssim(const Image& a, const Image& b, const SsimOptions& opt = {}) {
    detail::require_same_shape(a, b, "ssim");
    if (a.height < opt.window || a.width < opt.window)
        throw std::invalid_argument("ssim: image must be at least " + std::to_string(opt.window) + " on each side");
    const auto x = detail::luma_d(a), y = detail::luma_d(b);
    const std::size_t h = a.height, w = a.width, n = x.size();
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto k = detail::gaussian_window_1d(opt.window, opt.sigma);
    const auto mx = detail::filter_valid(x, h, w, k), my = detail::filter_valid(y, h, w, k);
    const auto sxx = detail::filter_valid(xx, h, w, k), syy = detail::filter_valid(yy, h, w, k);
    const auto sxy = detail::filter_valid(xy, h, w, k);
    const double c1 = (0.01 * opt.peak) * (0.01 * opt.peak), c2 = (0.03 * opt.peak) * (0.03 * opt.peak);
    double total = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

struct MetricEntry {
    std::string name;
    double psnr = 0;
    double ssim = 0;
};

struct MetricReport {
    std::vector<MetricEntry> entries;
    double mean_psnr = 0;
    double mean_ssim = 0;

    void add(std::string name, const Image& estimate, const Image& reference) {
        entries.push_back({std::move(name), psnr(estimate, reference), ssim(estimate, reference)});
        double p = 0, s = 0;
        for (const auto& e : entries) {
            p += e.psnr;
            s += e.ssim;
        }
        mean_psnr = p / static_cast<double>(entries.size());
        mean_ssim = s / static_cast<double>(entries.size());
    }

    void write(std::ostream& os) const {
        os << "# psnr: all channels jointly, peak 1, capped at " << kPsnrCap
           << " dB; ssim: 601 luma, 11x11 gaussian sigma 1.5, valid region\n";
        os << std::fixed << std::setprecision(6);
        for (const auto& e : entries) os << "image=" << e.name << " psnr=" << e.psnr << " ssim=" << e.ssim << '\n';
        os << "summary count=" << entries.size() << " psnr=" << mean_psnr << " ssim=" << mean_ssim << '\n';
    }
};

}  // namespace femasr
