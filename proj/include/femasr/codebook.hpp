// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "femasr/autodiff/ops.hpp"
#include "femasr/core/binio.hpp"
#include "femasr/core/rng.hpp"

namespace femasr {

/// The discrete prior: K code vectors of dimension n_z, stored as a [K, n_z]
/// leaf tensor so the optimizer can update it in place.
template <class T>
class Codebook {
public:
    Codebook() = default;

    /// Codes drawn uniformly from [-1/K, 1/K].
    Codebook(std::size_t size, std::size_t dim, std::uint64_t seed, bool allow_single = false)
        : allow_single_(allow_single) {
        Rng rng(derive_seed(seed, {0xC0DEB00CULL}));
        std::vector<T> v(size * dim);
        const double bound = size ? 1.0 / static_cast<double>(size) : 0.0;
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        codes_ = ad::Tensor<T>({size, dim}, std::move(v), true);
        validate();
    }

    explicit Codebook(ad::Tensor<T> codes, bool allow_single = false)
        : codes_(std::move(codes)), allow_single_(allow_single) {
        validate();
    }

    std::size_t size() const { return codes_.dim(0); }
    std::size_t dim() const { return codes_.dim(1); }
    const ad::Tensor<T>& codes() const { return codes_; }
    ad::Tensor<T>& codes() { return codes_; }
    std::span<const T> code(std::size_t k) const { return codes_.data().subspan(k * dim(), dim()); }

    void validate() const {
        if (!codes_.defined() || codes_.ndim() != 2 || codes_.dim(1) == 0)
            throw std::invalid_argument("Codebook: codes must be a non-empty [K, n_z] matrix");
        if (size() < 2 && !(allow_single_ && size() == 1))
            throw std::invalid_argument("Codebook: K must be at least 2 (got " + std::to_string(size()) + ")");
        for (T v : codes_.data())
            if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("Codebook: non-finite code value");
    }

    std::vector<T> squared_norms() const {
        std::vector<T> out(size());
        for (std::size_t k = 0; k < size(); ++k) {
            T acc = 0;
            for (T v : code(k)) acc += v * v;
            out[k] = acc;
        }
        return out;
    }

private:
    ad::Tensor<T> codes_;
    bool allow_single_ = false;
};

/// Squared Euclidean distance accumulated left to right in T.
template <class T>
T squared_distance(std::span<const T> a, std::span<const T> b) {
    T acc = 0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const T diff = a[d] - b[d];
        acc += diff * diff;
    }
    return acc;
}

struct QuantizeOptions {
    /// Break exact distance ties uniformly at random instead of by lowest index.
    bool random_ties = false;
    std::uint64_t tie_seed = 0;
};

template <class T>
struct QuantizeResult {
    ad::Tensor<T> quantized;  ///< [N, n_z, H, W]; differentiable w.r.t. the codes
    std::vector<int> indices;  ///< [N, H, W]
    std::vector<T> distances;  ///< [N, H, W], squared distance to the chosen code
    std::size_t n = 0, h = 0, w = 0;
};

namespace detail {

/// Picks the nearest code given expansion-form distance estimates for one
/// query. Every code whose estimate lies within a rounding band of the best
/// estimate is rescored with squared_distance(), and the exact minimum wins
/// (lowest index, or random among exact ties).
template <class T>
std::pair<int, T> resolve_nearest(std::span<const T> query, const Codebook<T>& cb, std::span<const T> estimates,
                                  T band, Rng* tie_rng) {
    T best_est = std::numeric_limits<T>::infinity();
    for (T e : estimates) best_est = std::min(best_est, e);
    int best = -1;
    T best_d = std::numeric_limits<T>::infinity();
    std::vector<int> ties;
    for (std::size_t k = 0; k < estimates.size(); ++k) {
        if (estimates[k] > best_est + band) continue;
        const T d = squared_distance(query, cb.code(k));
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
            ties.assign(1, best);
        } else if (d == best_d) {
            ties.push_back(static_cast<int>(k));
        }
    }
    if (tie_rng && ties.size() > 1)
        best = ties[static_cast<std::size_t>(tie_rng->uniform_int(0, static_cast<std::int64_t>(ties.size()) - 1))];
    return {best, best_d};
}

}  // namespace detail

/// Nearest code for every position of zhat [N, n_z, H, W].
template <class T>
QuantizeResult<T> quantize(const ad::Tensor<T>& zhat, const Codebook<T>& cb, const QuantizeOptions& opts = {}) {
    if (zhat.ndim() != 4 || zhat.dim(1) != cb.dim())
        throw std::invalid_argument("quantize: feature map " + ad::shape_str(zhat.shape()) +
                                    " does not match codebook dimension " + std::to_string(cb.dim()));
    for (T v : zhat.data())
        if (std::isnan(static_cast<double>(v))) throw std::invalid_argument("quantize: NaN in input features");

    const std::size_t n = zhat.dim(0), c = zhat.dim(1), hw = zhat.dim(2) * zhat.dim(3), k = cb.size();
    const std::size_t positions = n * hw;

    // Queries as rows: [positions, c].
    ad::detail::RowMat<T> q(positions, c);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) q(b * hw + p, ch) = zhat.data()[(b * c + ch) * hw + p];
    ad::detail::CMapMat<T> codes(cb.codes().data().data(), k, c);
    ad::detail::RowMat<T> dots = q * codes.transpose();
    const auto code_norms = cb.squared_norms();
    const T max_code_norm = *std::max_element(code_norms.begin(), code_norms.end());

    QuantizeResult<T> r;
    r.n = n;
    r.h = zhat.dim(2);
    r.w = zhat.dim(3);
    r.indices.resize(positions);
    r.distances.resize(positions);
    Rng tie_rng(opts.tie_seed);
    std::vector<T> est(k);
    std::vector<T> query(c);
    for (std::size_t i = 0; i < positions; ++i) {
        T qn = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            query[ch] = q(i, ch);
            qn += query[ch] * query[ch];
        }
        for (std::size_t j = 0; j < k; ++j) est[j] = qn - T(2) * dots(i, j) + code_norms[j];
        const T band = static_cast<T>(8 * (c + 4)) * std::numeric_limits<T>::epsilon() * (qn + max_code_norm) +
                       std::numeric_limits<T>::min();
        auto [idx, d] = detail::resolve_nearest<T>(query, cb, est, band, opts.random_ties ? &tie_rng : nullptr);
        r.indices[i] = idx;
        r.distances[i] = d;
    }
    r.quantized = ad::gather_rows(cb.codes(), r.indices, n, r.h, r.w);
    return r;
}

/// Forward value of `quantized`, gradient copied straight to `zhat`.
using ad::straight_through;

template <class T>
struct CodebookTerms {
    ad::Tensor<T> codebook;    ///< mean ||sg[zhat] - z||^2, gradient to codes only
    ad::Tensor<T> commitment;  ///< mean ||sg[z] - zhat||^2, gradient to zhat only (unweighted)
};

/// The two stop-gradient terms of the VQ objective, averaged over positions.
template <class T>
CodebookTerms<T> codebook_terms(const ad::Tensor<T>& zhat, const ad::Tensor<T>& quantized) {
    if (zhat.shape() != quantized.shape())
        throw std::invalid_argument("codebook_terms: shape mismatch " + ad::shape_str(zhat.shape()) + " vs " +
                                    ad::shape_str(quantized.shape()));
    return {ad::mean_sq_dist(ad::stop_gradient(zhat), quantized), ad::mean_sq_dist(ad::stop_gradient(quantized), zhat)};
}

inline std::vector<std::size_t> usage_histogram(std::span<const int> indices, std::size_t k) {
    std::vector<std::size_t> counts(k, 0);
    for (int i : indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= k)
            throw std::out_of_range("usage_histogram: index " + std::to_string(i) + " outside [0, " +
                                    std::to_string(k) + ")");
        ++counts[static_cast<std::size_t>(i)];
    }
    return counts;
}

/// exp(entropy) of the normalized counts; 1 for one-hot, K for uniform.
inline double perplexity(std::span<const std::size_t> counts) {
    double total = 0;
    for (auto c : counts) total += static_cast<double>(c);
    if (total <= 0) throw std::invalid_argument("perplexity: counts are all zero");
    double h = 0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return std::exp(h);
}

/// Re-seeds codes with zero usage from randomly chosen encoder outputs
/// (rows of `samples`, [P, n_z]). Returns the indices of replaced codes.
template <class T>
std::vector<std::size_t> restart_dead_codes(Codebook<T>& cb, std::span<const std::size_t> counts,
                                            std::span<const T> samples, Rng& rng) {
    if (counts.size() != cb.size()) throw std::invalid_argument("restart_dead_codes: counts size differs from K");
    const std::size_t c = cb.dim();
    const std::size_t p = samples.size() / c;
    std::vector<std::size_t> replaced;
    if (p == 0) return replaced;
    auto& data = cb.codes().mutable_data();
    for (std::size_t k = 0; k < cb.size(); ++k) {
        if (counts[k] != 0) continue;
        const auto row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p) - 1));
        for (std::size_t d = 0; d < c; ++d) data[k * c + d] = samples[row * c + d];
        replaced.push_back(k);
    }
    return replaced;
}

// ---------------------------------------------------------------------------
// Flat export: "FMCB", u32 K, u32 n_z, then K*n_z little-endian float32.

template <class T>
void export_codebook(const Codebook<T>& cb, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("export_codebook: cannot open " + path.string());
    os.write("FMCB", 4);
    binio::put_u32(os, static_cast<std::uint32_t>(cb.size()));
    binio::put_u32(os, static_cast<std::uint32_t>(cb.dim()));
    for (T v : cb.codes().data()) binio::put_f32(os, static_cast<float>(v));
}

template <class T>
Codebook<T> import_codebook(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("import_codebook: cannot open " + path.string());
    char magic[4];
    binio::read_exact(is, magic, 4, "codebook magic");
    if (std::string(magic, 4) != "FMCB") throw std::runtime_error("import_codebook: bad magic");
    const auto k = binio::get_u32(is, "codebook K");
    const auto d = binio::get_u32(is, "codebook n_z");
    if (std::uint64_t(k) * d > (1ULL << 28)) throw std::runtime_error("import_codebook: implausible size");
    std::vector<T> v(std::size_t(k) * d);
    for (auto& x : v) x = static_cast<T>(binio::get_f32(is, "codebook data"));
    return Codebook<T>(ad::Tensor<T>({k, d}, std::move(v), true));
}

}  // namespace femasr
