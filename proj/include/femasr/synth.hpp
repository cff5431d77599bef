// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "femasr/core/image.hpp"
#include "femasr/core/rng.hpp"

namespace femasr {

/// Procedural texture families used as a stand-in training corpus.
enum class TextureKind { stripes, checker, dots, waves };

inline const char* to_string(TextureKind k) {
    switch (k) {
        case TextureKind::stripes: return "stripes";
        case TextureKind::checker: return "checker";
        case TextureKind::dots: return "dots";
        case TextureKind::waves: return "waves";
    }
    return "?";
}

inline constexpr std::array<TextureKind, 4> kTextureKinds = {TextureKind::stripes, TextureKind::checker,
                                                            TextureKind::dots, TextureKind::waves};

/// Foreground/background colours are drawn from a small fixed palette so a
/// toy-sized codebook can represent them; geometry stays continuous.
inline constexpr std::array<std::array<double, 3>, 8> kTexturePalette = {{
    {0.90, 0.90, 0.85}, {0.10, 0.10, 0.12}, {0.80, 0.25, 0.20}, {0.20, 0.55, 0.80},
    {0.25, 0.65, 0.30}, {0.90, 0.75, 0.20}, {0.55, 0.35, 0.20}, {0.50, 0.50, 0.55},
}};

/// One RGB texture of the given family; a pure function of (kind, size, seed).
inline Image synth_texture(TextureKind kind, std::size_t size, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(kind), 0x7E7}));
    const auto np = static_cast<std::int64_t>(kTexturePalette.size());
    const auto ia = rng.uniform_int(0, np - 1);
    const auto ib = (ia + rng.uniform_int(1, np - 1)) % np;
    const auto& a = kTexturePalette[static_cast<std::size_t>(ia)];
    const auto& b = kTexturePalette[static_cast<std::size_t>(ib)];
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double period = rng.uniform(12.0, 28.0);
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double n = static_cast<double>(size);
    std::vector<std::array<double, 3>> dots;
    if (kind == TextureKind::dots) {
        const auto count = static_cast<std::size_t>(rng.uniform_int(3, 8));
        for (std::size_t i = 0; i < count; ++i) dots.push_back({rng.uniform(0, n), rng.uniform(0, n), rng.uniform(2.0, 5.0)});
    }
    const double f2 = rng.uniform(0.5, 1.5);
    Image img(3, size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double u = ct * static_cast<double>(x) + st * static_cast<double>(y);
            const double v = -st * static_cast<double>(x) + ct * static_cast<double>(y);
            double t = 0;
            switch (kind) {
                case TextureKind::stripes: t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * u / period + phase); break;
                case TextureKind::checker: {
                    const long cu = static_cast<long>(std::floor(u / period)), cv = static_cast<long>(std::floor(v / period));
                    t = ((cu + cv) & 1) ? 1.0 : 0.0;
                    break;
                }
                case TextureKind::dots: {
                    for (const auto& d : dots) {
                        const double dx = static_cast<double>(x) - d[0], dy = static_cast<double>(y) - d[1];
                        t = std::max(t, std::exp(-(dx * dx + dy * dy) / (2 * d[2] * d[2])));
                    }
                    break;
                }
                case TextureKind::waves:
                    t = 0.5 + 0.25 * std::sin(2 * std::numbers::pi * u / period + phase) +
                        0.25 * std::sin(2 * std::numbers::pi * f2 * v / period);
                    break;
            }
            for (std::size_t c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(a[c] * (1 - t) + b[c] * t);
        }
    return img;
}

/// `count` textures cycling through the families.
inline std::vector<Image> synth_texture_set(std::size_t count, std::size_t size, std::uint64_t seed) {
    std::vector<Image> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(synth_texture(kTextureKinds[i % kTextureKinds.size()], size, derive_seed(seed, {i})));
    return out;
}

}  // namespace femasr
