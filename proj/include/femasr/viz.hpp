// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "femasr/codebook.hpp"
#include "femasr/core/image.hpp"
#include "femasr/models.hpp"

namespace femasr {

/// A decoder output clipped to [0,1]; `flagged` when more than 1% of the
/// values had to be clipped.
struct Rendering {
    Image image;
    double clipped_fraction = 0;
    bool flagged = false;
};

inline Rendering make_rendering(Image img) {
    std::size_t clipped = 0;
    for (float v : img.data)
        if (!(v >= 0.f && v <= 1.f)) ++clipped;
    img.clip();
    Rendering r;
    r.clipped_fraction = img.data.empty() ? 0.0 : static_cast<double>(clipped) / static_cast<double>(img.data.size());
    r.flagged = r.clipped_fraction > 0.01;
    r.image = std::move(img);
    return r;
}

using IndexGrid = std::vector<std::vector<int>>;

/// Decodes the latent assembled from a rectangular grid of code indices.
template <class T>
Rendering decode_code_combo(const Codebook<T>& cb, const Decoder<T>& g, const IndexGrid& grid) {
    if (grid.empty() || grid.front().empty()) throw std::invalid_argument("decode_code_combo: empty index grid");
    const std::size_t h = grid.size(), w = grid.front().size();
    std::vector<int> flat;
    flat.reserve(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        if (grid[y].size() != w)
            throw std::invalid_argument("decode_code_combo: ragged grid (row " + std::to_string(y) + " has " +
                                        std::to_string(grid[y].size()) + " entries, expected " + std::to_string(w) + ")");
        for (int i : grid[y]) {
            if (i < 0 || static_cast<std::size_t>(i) >= cb.size())
                throw std::out_of_range("decode_code_combo: code index " + std::to_string(i) + " outside [0, " +
                                        std::to_string(cb.size()) + ")");
            flat.push_back(i);
        }
    }
    const auto z = ad::gather_rows(cb.codes().detach(), flat, 1, h, w);
    return make_rendering(to_image(g(z)));
}

/// Tiles code `index` over a t x t latent and decodes it.
template <class T>
Rendering decode_single_code(const Codebook<T>& cb, const Decoder<T>& g, std::size_t index, std::size_t tile) {
    if (index >= cb.size())
        throw std::out_of_range("decode_single_code: index " + std::to_string(index) + " outside [0, " +
                                std::to_string(cb.size()) + ")");
    if (tile == 0) throw std::invalid_argument("decode_single_code: tile must be >= 1");
    return decode_code_combo(cb, g, IndexGrid(tile, std::vector<int>(tile, static_cast<int>(index))));
}

/// Normalized code usage per label over all images of that label.
/// Empty groups are skipped with a warning.
template <class T>
std::map<std::string, std::vector<double>> category_code_histogram(
    const std::map<std::string, std::vector<Image>>& groups, const Encoder<T>& e, const Codebook<T>& cb,
    std::ostream* warn = nullptr) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [label, images] : groups) {
        if (images.empty()) {
            if (warn) *warn << "warning: label '" << label << "' has no images; skipped\n";
            continue;
        }
        std::vector<std::size_t> counts(cb.size(), 0);
        for (const auto& img : images) {
            const auto q = quantize(e(to_tensor<T>(img)), cb);
            const auto c = usage_histogram(q.indices, cb.size());
            for (std::size_t k = 0; k < c.size(); ++k) counts[k] += c[k];
        }
        double total = 0;
        for (auto c : counts) total += static_cast<double>(c);
        std::vector<double> p(cb.size());
        for (std::size_t k = 0; k < p.size(); ++k) p[k] = static_cast<double>(counts[k]) / total;
        out.emplace(label, std::move(p));
    }
    return out;
}

/// Draws an h x w grid of indices i.i.d. from a usage distribution.
inline IndexGrid sample_index_grid(const std::vector<double>& dist, std::size_t h, std::size_t w, std::uint64_t seed) {
    if (dist.empty()) throw std::invalid_argument("sample_index_grid: empty distribution");
    std::vector<double> cdf(dist.size());
    double acc = 0;
    for (std::size_t k = 0; k < dist.size(); ++k) {
        if (!(dist[k] >= 0)) throw std::invalid_argument("sample_index_grid: negative probability");
        acc += dist[k];
        cdf[k] = acc;
    }
    if (!(acc > 0)) throw std::invalid_argument("sample_index_grid: distribution sums to zero");
    Rng rng(seed);
    IndexGrid grid(h, std::vector<int>(w));
    for (auto& row : grid)
        for (auto& v : row) {
            const double u = rng.uniform() * acc;
            const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
            v = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), dist.size() - 1));
        }
    return grid;
}

/// Tiles equally sized images row-major with a `pad`-pixel gray border.
inline Image contact_sheet(const std::vector<Image>& tiles, std::size_t columns, std::size_t pad = 2) {
    if (tiles.empty()) throw std::invalid_argument("contact_sheet: no tiles");
    if (columns == 0) throw std::invalid_argument("contact_sheet: columns must be >= 1");
    const auto& f = tiles.front();
    const std::size_t rows = (tiles.size() + columns - 1) / columns;
    Image sheet(f.channels, rows * (f.height + pad) + pad, columns * (f.width + pad) + pad, 0.5f);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (!tiles[i].same_shape(f)) throw std::invalid_argument("contact_sheet: tiles differ in shape");
        const std::size_t oy = pad + (i / columns) * (f.height + pad), ox = pad + (i % columns) * (f.width + pad);
        for (std::size_t c = 0; c < f.channels; ++c)
            for (std::size_t y = 0; y < f.height; ++y)
                for (std::size_t x = 0; x < f.width; ++x) sheet.at(c, oy + y, ox + x) = tiles[i].at(c, y, x);
    }
    return sheet;
}

/// Writes `<stem>.png` and `<stem>.txt`, the latter listing one legend
/// line per tile in row-major order.
inline void write_sheet(const std::filesystem::path& dir, const std::string& stem, const std::vector<Rendering>& tiles,
                        const std::vector<std::string>& legend, std::size_t columns) {
    if (legend.size() != tiles.size()) throw std::invalid_argument("write_sheet: legend size differs from tile count");
    std::vector<Image> imgs;
    for (const auto& t : tiles) imgs.push_back(t.image);
    std::filesystem::create_directories(dir);
    write_png(dir / (stem + ".png"), contact_sheet(imgs, columns));
    std::ofstream os(dir / (stem + ".txt"));
    os << "# columns=" << columns << " tile=" << imgs.front().height << "x" << imgs.front().width << '\n';
    for (std::size_t i = 0; i < tiles.size(); ++i)
        os << "tile=" << i << " row=" << i / columns << " col=" << i % columns << ' ' << legend[i]
           << (tiles[i].flagged ? " clipped=" + std::to_string(tiles[i].clipped_fraction) : std::string()) << '\n';
}

}  // namespace femasr
