// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "femasr/core/image.hpp"
#include "femasr/core/rng.hpp"
#include "femasr/degrade.hpp"

namespace femasr {

struct SobelStats {
    double mean = 0;
    double variance = 0;
};

/// Mean and population variance of the Sobel gradient magnitude of the
/// 601-luma image on the 0..255 scale, over the interior (H-2)x(W-2) pixels.
inline SobelStats sobel_stats(const Image& patch) {
    if (patch.height < 3 || patch.width < 3)
        throw std::invalid_argument("sobel_stats: patch must be at least 3x3, got " + std::to_string(patch.height) +
                                    "x" + std::to_string(patch.width));
    const Image luma = to_luma(patch);
    auto p = [&](std::size_t y, std::size_t x) { return 255.0 * static_cast<double>(luma.at(0, y, x)); };
    const std::size_t h = patch.height - 2, w = patch.width - 2;
    std::vector<double> mag(h * w);
    for (std::size_t y = 1; y + 1 < patch.height; ++y)
        for (std::size_t x = 1; x + 1 < patch.width; ++x) {
            const double gx = (p(y - 1, x + 1) + 2 * p(y, x + 1) + p(y + 1, x + 1)) -
                              (p(y - 1, x - 1) + 2 * p(y, x - 1) + p(y + 1, x - 1));
            const double gy = (p(y + 1, x - 1) + 2 * p(y + 1, x) + p(y + 1, x + 1)) -
                              (p(y - 1, x - 1) + 2 * p(y - 1, x) + p(y - 1, x + 1));
            mag[(y - 1) * w + (x - 1)] = std::sqrt(gx * gx + gy * gy);
        }
    SobelStats s;
    for (double m : mag) s.mean += m;
    s.mean /= static_cast<double>(mag.size());
    for (double m : mag) s.variance += (m - s.mean) * (m - s.mean);
    s.variance /= static_cast<double>(mag.size());
    return s;
}

struct PatchRecord {
    std::string source;
    std::size_t x = 0, y = 0;
    std::size_t size = 512;
    double mu = 0;
    double sigma2 = 0;
    bool kept = true;
    /// Face mode only: the resize factor applied before cropping (0 = none).
    double scale = 0;

    std::string manifest_line() const {
        std::ostringstream os;
        os << std::setprecision(17) << "source=" << source << " x=" << x << " y=" << y << " size=" << size
           << " scale=" << scale << " mu=" << mu << " sigma2=" << sigma2 << " kept=" << (kept ? 1 : 0);
        return os.str();
    }

    static PatchRecord parse(const std::string& line) {
        const auto kv = parse_kv_line(line);
        auto get = [&](const char* k) {
            auto it = kv.find(k);
            if (it == kv.end()) throw std::invalid_argument(std::string("patch record missing '") + k + "'");
            return it->second;
        };
        PatchRecord r;
        r.source = get("source");
        r.x = std::stoul(get("x"));
        r.y = std::stoul(get("y"));
        r.size = std::stoul(get("size"));
        r.scale = std::stod(get("scale"));
        r.mu = std::stod(get("mu"));
        r.sigma2 = std::stod(get("sigma2"));
        r.kept = get("kept") == "1";
        return r;
    }
};

/// Non-overlapping size x size grid crops with Sobel statistics filled in.
/// Images smaller than one patch yield an empty list.
inline std::vector<PatchRecord> crop_patches(const Image& image, std::size_t size = 512, const std::string& source = {}) {
    if (size < 3) throw std::invalid_argument("crop_patches: patch size must be >= 3");
    std::vector<PatchRecord> out;
    for (std::size_t gy = 0; gy + size <= image.height; gy += size)
        for (std::size_t gx = 0; gx + size <= image.width; gx += size) {
            PatchRecord r;
            r.source = source;
            r.x = gx;
            r.y = gy;
            r.size = size;
            const auto s = sobel_stats(image.crop(gy, gx, size, size));
            r.mu = s.mean;
            r.sigma2 = s.variance;
            out.push_back(std::move(r));
        }
    return out;
}

/// Sets `kept` on every record (sigma2 >= threshold) and returns the kept ones.
inline std::vector<PatchRecord> filter_patches(std::vector<PatchRecord>& records, double threshold = 10.0) {
    std::vector<PatchRecord> kept;
    for (auto& r : records) {
        r.kept = r.sigma2 >= threshold;
        if (r.kept) kept.push_back(r);
    }
    return kept;
}

struct FaceCrop {
    Image patch;
    double scale = 1;
    std::size_t resized_h = 0, resized_w = 0;
    std::size_t y = 0, x = 0;
};

/// Resizes by `scale` (bicubic) and takes one random size x size crop.
inline FaceCrop face_resize_crop_scaled(const Image& image, double scale, Rng& rng, std::size_t size = 512) {
    if (image.height < 2 * size || image.width < 2 * size)
        throw std::invalid_argument("face_resize_crop: input must be at least " + std::to_string(2 * size) + " on each side");
    if (!(scale >= 0.5 && scale <= 1.0)) throw std::invalid_argument("face_resize_crop: scale must be in [0.5, 1]");
    FaceCrop f;
    f.scale = scale;
    f.resized_h = static_cast<std::size_t>(std::lround(static_cast<double>(image.height) * scale));
    f.resized_w = static_cast<std::size_t>(std::lround(static_cast<double>(image.width) * scale));
    if (f.resized_h < size || f.resized_w < size) throw std::logic_error("face_resize_crop: resized image below patch size");
    const Image resized = (f.resized_h == image.height && f.resized_w == image.width)
                              ? image
                              : resize(image, f.resized_h, f.resized_w, ResizeMode::bicubic);
    f.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(f.resized_h - size)));
    f.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(f.resized_w - size)));
    f.patch = resized.crop(f.y, f.x, size, size);
    f.patch.clip();
    return f;
}

/// Scale drawn from U[0.5, 1.0], then one random crop.
inline FaceCrop face_resize_crop(const Image& image, Rng& rng, std::size_t size = 512) {
    const double s = rng.uniform(0.5, 1.0);
    return face_resize_crop_scaled(image, s, rng, size);
}

// ---------------------------------------------------------------------------
// Directory pipeline

struct PrepareOptions {
    std::size_t patch_size = 512;
    double threshold = 10.0;
    bool face_mode = false;
    std::uint64_t seed = 0;
};

struct PrepareSummary {
    std::size_t sources = 0;
    std::size_t cropped = 0;
    std::size_t kept = 0;
    std::size_t filtered = 0;
    std::size_t skipped_small = 0;
    std::vector<PatchRecord> records;
};

inline std::string patch_filename(const PatchRecord& r) {
    std::ostringstream os;
    os << std::filesystem::path(r.source).stem().string() << "_y" << r.y << "_x" << r.x << ".png";
    return os.str();
}

/// Regenerates the patch a manifest record describes from its source image.
inline Image reproduce_patch(const Image& source, const PatchRecord& r) {
    if (r.scale > 0) {
        const auto h = static_cast<std::size_t>(std::lround(static_cast<double>(source.height) * r.scale));
        const auto w = static_cast<std::size_t>(std::lround(static_cast<double>(source.width) * r.scale));
        const Image resized = (h == source.height && w == source.width) ? source : resize(source, h, w, ResizeMode::bicubic);
        Image p = resized.crop(r.y, r.x, r.size, r.size);
        p.clip();
        return p;
    }
    return source.crop(r.y, r.x, r.size, r.size);
}

/// Reads every PNG in `input`, writes kept patches to `output/patches/` and
/// all records (kept or not) to `output/manifest.txt`.
inline PrepareSummary prepare_dataset(const std::filesystem::path& input, const std::filesystem::path& output,
                                      const PrepareOptions& opt, std::ostream* log = nullptr) {
    const auto files = list_pngs(input);
    if (files.empty()) throw std::invalid_argument("prepare_dataset: no PNG files in " + input.string());
    std::filesystem::create_directories(output / "patches");
    PrepareSummary sum;
    for (std::size_t i = 0; i < files.size(); ++i) {
        const Image img = read_png(files[i]);
        ++sum.sources;
        std::vector<PatchRecord> recs;
        std::vector<Image> patches;
        if (opt.face_mode) {
            if (img.height < 2 * opt.patch_size || img.width < 2 * opt.patch_size) {
                ++sum.skipped_small;
                if (log) *log << "skip " << files[i].string() << ": smaller than " << 2 * opt.patch_size << '\n';
                continue;
            }
            Rng rng(derive_seed(opt.seed, {i}));
            auto f = face_resize_crop(img, rng, opt.patch_size);
            PatchRecord r;
            r.source = files[i].string();
            r.x = f.x;
            r.y = f.y;
            r.size = opt.patch_size;
            r.scale = f.scale;
            const auto s = sobel_stats(f.patch);
            r.mu = s.mean;
            r.sigma2 = s.variance;
            recs.push_back(r);
            patches.push_back(std::move(f.patch));
        } else {
            recs = crop_patches(img, opt.patch_size, files[i].string());
            if (recs.empty()) {
                ++sum.skipped_small;
                if (log) *log << "skip " << files[i].string() << ": smaller than " << opt.patch_size << '\n';
                continue;
            }
            for (const auto& r : recs) patches.push_back(img.crop(r.y, r.x, r.size, r.size));
        }
        filter_patches(recs, opt.threshold);
        for (std::size_t j = 0; j < recs.size(); ++j) {
            ++sum.cropped;
            if (recs[j].kept) {
                ++sum.kept;
                write_png(output / "patches" / patch_filename(recs[j]), patches[j]);
            } else {
                ++sum.filtered;
            }
            sum.records.push_back(recs[j]);
        }
    }
    std::ofstream man(output / "manifest.txt", std::ios::binary);
    man << "# patches size=" << opt.patch_size << " threshold=" << opt.threshold << " face=" << opt.face_mode
        << " seed=" << opt.seed << '\n';
    for (const auto& r : sum.records) man << r.manifest_line() << '\n';
    if (!man) throw std::runtime_error("prepare_dataset: failed writing manifest");
    return sum;
}

}  // namespace femasr
