// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "femasr/codebook.hpp"
#include "femasr/losses.hpp"

using namespace femasr;
using TD = ad::Tensor<double>;
using TF = ad::Tensor<float>;

namespace {

int brute_nearest(std::span<const float> q, const Codebook<float>& cb) {
    int best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < cb.size(); ++k) {
        const float d = squared_distance(q, cb.code(k));
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

TF feature_map(Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
    std::vector<float> v(c * h * w);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return TF({1, c, h, w}, std::move(v), true);
}

}  // namespace

TEST(Quantize, MatchesBruteForceOnRandomInstances) {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(2, 64));
        const auto c = static_cast<std::size_t>(rng.uniform_int(1, 16));
        Codebook<float> cb(k, c, rng.next_u64());
        auto z = feature_map(rng, c, 3, 2);
        for (auto& v : z.mutable_data()) v *= 1.0f / static_cast<float>(k);
        const auto r = quantize(z, cb);
        for (std::size_t p = 0; p < 6; ++p) {
            std::vector<float> q(c);
            for (std::size_t ch = 0; ch < c; ++ch) q[ch] = z.values()[ch * 6 + p];
            ASSERT_EQ(r.indices[p], brute_nearest(q, cb));
        }
    }
}

TEST(Quantize, ExactTiesGoToLowestIndex) {
    TF codes({3, 1}, {1.0f, -1.0f, 1.0f}, true);
    Codebook<float> cb(codes);
    TF z({1, 1, 1, 2}, {0.0f, 1.0f});
    const auto r = quantize(z, cb);
    EXPECT_EQ(r.indices[0], 0);  // equidistant from all three
    EXPECT_EQ(r.indices[1], 0);  // codes 0 and 2 duplicate
}

TEST(Quantize, RandomTiesAreSeededAndCoverTiedCodes) {
    TF codes({2, 1}, {1.0f, -1.0f}, true);
    Codebook<float> cb(codes);
    TF z({1, 1, 1, 64}, std::vector<float>(64, 0.0f));
    QuantizeOptions o{true, 9};
    const auto a = quantize(z, cb, o), b = quantize(z, cb, o);
    EXPECT_EQ(a.indices, b.indices);
    int ones = 0;
    for (int i : a.indices) ones += i;
    EXPECT_GT(ones, 0);
    EXPECT_LT(ones, 64);
}

TEST(Quantize, QuantizedValuesAreCodes) {
    Rng rng(1);
    Codebook<float> cb(8, 4, 3);
    const auto r = quantize(feature_map(rng, 4, 2, 2), cb);
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t ch = 0; ch < 4; ++ch)
            EXPECT_EQ(r.quantized.values()[ch * 4 + p], cb.code(static_cast<std::size_t>(r.indices[p]))[ch]);
}

TEST(Quantize, RejectsNaNAndWrongDimension) {
    Codebook<float> cb(4, 2, 1);
    TF bad({1, 2, 1, 1}, {0.0f, std::nanf("")});
    EXPECT_THROW(quantize(bad, cb), std::invalid_argument);
    TF wrong({1, 3, 1, 1}, {0.0f, 0.0f, 0.0f});
    EXPECT_THROW(quantize(wrong, cb), std::invalid_argument);
}

TEST(Codebook, RejectsDegenerateSizes) {
    EXPECT_THROW(Codebook<float>(1, 4, 0), std::invalid_argument);
    EXPECT_NO_THROW(Codebook<float>(1, 4, 0, true));
    EXPECT_THROW(Codebook<float>(TF({2, 1}, {0.0f, std::numeric_limits<float>::infinity()})), std::invalid_argument);
}

TEST(Codebook, InitWithinBound) {
    Codebook<float> cb(16, 8, 5);
    for (float v : cb.codes().values()) EXPECT_LE(std::abs(v), 1.0f / 16 + 1e-7f);
}

TEST(Codebook, ExportImportRoundTrip) {
    Codebook<float> cb(5, 3, 77);
    const auto path = std::filesystem::temp_directory_path() / "femasr_cb_roundtrip.bin";
    export_codebook(cb, path);
    const auto back = import_codebook<float>(path);
    EXPECT_EQ(back.codes().values(), cb.codes().values());
    std::filesystem::remove(path);
}

TEST(Usage, HistogramAndPerplexity) {
    const std::vector<int> idx{0, 0, 1, 3};
    const auto h = usage_histogram(idx, 4);
    EXPECT_EQ(h, (std::vector<std::size_t>{2, 1, 0, 1}));
    EXPECT_NEAR(perplexity(std::vector<std::size_t>{5, 0, 0}), 1.0, 1e-12);
    EXPECT_NEAR(perplexity(std::vector<std::size_t>{3, 3, 3, 3}), 4.0, 1e-12);
    EXPECT_THROW(usage_histogram(std::vector<int>{4}, 4), std::out_of_range);
    EXPECT_THROW(perplexity(std::vector<std::size_t>{0, 0}), std::invalid_argument);
}

TEST(Usage, RestartReplacesOnlyDeadCodes) {
    Codebook<float> cb(4, 2, 1);
    const auto before = cb.codes().values();
    const std::vector<float> samples{9, 9, 7, 7};
    Rng rng(3);
    const auto replaced = restart_dead_codes<float>(cb, std::vector<std::size_t>{1, 0, 2, 0}, samples, rng);
    EXPECT_EQ(replaced, (std::vector<std::size_t>{1, 3}));
    for (std::size_t d = 0; d < 2; ++d) {
        EXPECT_EQ(cb.code(0)[d], before[d]);
        EXPECT_EQ(cb.code(2)[d], before[4 + d]);
    }
    for (std::size_t k : {1u, 3u}) {
        const float v = cb.code(k)[0];
        EXPECT_TRUE(v == 9.0f || v == 7.0f);
        EXPECT_EQ(cb.code(k)[1], v);
    }
}

// Gradient reaching zhat through the straight-through path equals the
// gradient of the quantized tensor, for a decoder whose gradient is known
// in closed form: loss = sum(C .* (z^T W)), so dL/dz = W C^T.
TEST(StraightThrough, MatchesLinearDecoderOracle) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = 8, c = 3, p = 5, out = 4;
        Codebook<double> cb(k, c, rng.next_u64());
        std::vector<double> zv(c * p), wv(c * out), cv(p * out);
        for (auto& v : zv) v = rng.normal() * 0.1;
        for (auto& v : wv) v = rng.normal();
        for (auto& v : cv) v = rng.normal();
        TD zhat({1, c, 1, p}, zv, true);
        const TD coeff({p, out}, cv);
        const auto q = quantize(zhat, cb);
        const auto st = ad::straight_through(q.quantized, zhat);
        // Linear decoder, channel by channel: y = sum_ch z[ch]^T W[ch].
        auto decode = [&](const TD& lat) {
            const auto r = ad::reshape(lat, {c, p});
            TD y;
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::vector<double> sel(c, 0.0);
                sel[ch] = 1;
                const auto col = ad::reshape(ad::matmul(TD({1, c}, sel), r), {p, 1});
                const TD wrow({1, out}, std::vector<double>(wv.begin() + ch * out, wv.begin() + (ch + 1) * out));
                const auto part = ad::matmul(col, wrow);
                y = y.defined() ? ad::add(y, part) : part;
            }
            return ad::sum(ad::mul(y, coeff));
        };
        const auto g = ad::backward(decode(st));
        const auto q_leaf = q.quantized.clone_leaf();
        const auto gq = ad::backward(decode(q_leaf))[q_leaf];
        // Closed form: dL/dz[ch, pos] = sum_o W[ch, o] C[pos, o].
        std::vector<double> m(c * p, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t pos = 0; pos < p; ++pos)
                for (std::size_t o = 0; o < out; ++o) m[ch * p + pos] += wv[ch * out + o] * cv[pos * out + o];
        const auto gz = g[zhat];
        const auto gcodes = g[cb.codes()];
        for (std::size_t i = 0; i < c * p; ++i) {
            EXPECT_EQ(gz[i], gq[i]);
            EXPECT_NEAR(gz[i], m[i], 1e-12);
        }
        for (double v : gcodes) EXPECT_EQ(v, 0.0);
    }
}

TEST(StopGradient, CodebookTermReachesOnlyCodes) {
    Rng rng(4);
    Codebook<double> cb(6, 3, 2);
    std::vector<double> zv(3 * 4);
    for (auto& v : zv) v = rng.normal();
    TD zhat({1, 3, 2, 2}, zv, true);
    const auto q = quantize(zhat, cb);
    const auto t = codebook_terms(zhat, q.quantized);

    const auto g1 = ad::backward(t.codebook);
    for (double v : g1[zhat]) EXPECT_EQ(v, 0.0);
    double norm = 0;
    for (double v : g1[cb.codes()]) norm += v * v;
    EXPECT_GT(norm, 0.0);

    const auto g2 = ad::backward(t.commitment);
    for (double v : g2[cb.codes()]) EXPECT_EQ(v, 0.0);
    norm = 0;
    for (double v : g2[zhat]) norm += v * v;
    EXPECT_GT(norm, 0.0);
}
