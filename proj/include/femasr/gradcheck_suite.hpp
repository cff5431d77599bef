// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "femasr/autodiff/gradcheck.hpp"
#include "femasr/autodiff/layers.hpp"
#include "femasr/codebook.hpp"
#include "femasr/losses.hpp"

namespace femasr {

/// Finite-difference verification of every differentiable op and loss in
/// double precision. The straight-through op is
/// absent by design: its backward is not the derivative of its forward, and
/// it has its own exact contract test.
namespace gradcheck {

using D = double;
using T = ad::Tensor<D>;
using Inputs = std::vector<T>;

/// Random tensor whose entries have magnitude in [min_abs, 1], so kinks of
/// abs/relu-style ops stay at least `min_abs` away.
inline T random_tensor(Rng& rng, ad::Shape shape, double min_abs = 0.0) {
    std::vector<D> v(ad::numel(shape));
    for (auto& x : v) {
        const double m = rng.uniform(min_abs, 1.0);
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return T(std::move(shape), std::move(v));
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so
/// every output element contributes an O(1) gradient.
inline T project(const T& y, std::uint64_t seed) {
    Rng rng(seed);
    const auto w = random_tensor(rng, y.shape());
    return ad::sum(ad::mul(y, w));
}

/// Worst relative error over all inputs of `f`.
inline double check_all(const std::function<T(const Inputs&)>& f, const Inputs& inputs) {
    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::function<T(const T&)> fi = [&](const T& t) {
            Inputs in = inputs;
            in[i] = t;
            return f(in);
        };
        worst = std::max(worst, ad::finite_diff_check<D>(fi, inputs[i]));
    }
    return worst;
}

struct Case {
    std::string name;
    /// Runs one randomized trial and returns its worst relative error.
    std::function<double(Rng&)> trial;
};

struct CaseResult {
    std::string name;
    std::size_t trials = 0;
    double max_rel_error = 0;
    bool passed = false;
};

struct Report {
    std::vector<CaseResult> cases;
    double seconds = 0;
    bool all_passed() const {
        for (const auto& c : cases)
            if (!c.passed) return false;
        return !cases.empty();
    }
};

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

inline std::vector<Case> cases() {
    std::vector<Case> out;
    auto add = [&](std::string name, std::function<double(Rng&)> f) { out.push_back({std::move(name), std::move(f)}); };
    auto elementwise = [&](std::string name, std::function<T(const T&)> op, double min_abs = 0.0) {
        add(std::move(name), [op, min_abs](Rng& rng) {
            const auto x = random_tensor(rng, {dim(rng, 1, 3), dim(rng, 1, 4)}, min_abs);
            const auto s = rng.next_u64();
            return check_all([&](const Inputs& in) { return project(op(in[0]), s); }, {x});
        });
    };
    auto binary = [&](std::string name, std::function<T(const T&, const T&)> op) {
        add(std::move(name), [op](Rng& rng) {
            const ad::Shape sh{dim(rng, 1, 3), dim(rng, 1, 4)};
            const auto a = random_tensor(rng, sh), b = random_tensor(rng, sh);
            const auto s = rng.next_u64();
            return check_all([&](const Inputs& in) { return project(op(in[0], in[1]), s); }, {a, b});
        });
    };

    binary("add", [](const T& a, const T& b) { return ad::add(a, b); });
    binary("sub", [](const T& a, const T& b) { return ad::sub(a, b); });
    binary("mul", [](const T& a, const T& b) { return ad::mul(a, b); });
    elementwise("scale", [](const T& a) { return ad::scale(a, D(-1.7)); });
    elementwise("add_scalar", [](const T& a) { return ad::add_scalar(a, D(0.3)); });
    elementwise("square", [](const T& a) { return ad::square(a); });
    elementwise("abs", [](const T& a) { return ad::abs(a); }, 1e-2);
    elementwise("relu", [](const T& a) { return ad::relu(a); }, 1e-2);
    elementwise("leaky_relu", [](const T& a) { return ad::leaky_relu(a, D(0.2)); }, 1e-2);
    elementwise("sum", [](const T& a) { return ad::scale(ad::sum(a), D(1)); });
    elementwise("mean", [](const T& a) { return ad::mean(a); });
    elementwise("reshape", [](const T& a) { return ad::reshape(a, {a.numel()}); });
    add("div_scalar", [](Rng& rng) {
        const auto a = random_tensor(rng, {dim(rng, 1, 3), dim(rng, 1, 4)});
        const auto d = random_tensor(rng, {1}, 0.5);
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& in) { return project(ad::div_scalar(in[0], in[1]), s); }, {a, d});
    });
    add("matmul", [](Rng& rng) {
        const auto m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
        const auto a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& in) { return project(ad::matmul(in[0], in[1]), s); }, {a, b});
    });
    add("linear", [](Rng& rng) {
        const auto n = dim(rng, 1, 3), i = dim(rng, 1, 4), o = dim(rng, 1, 4);
        const Inputs in{random_tensor(rng, {n, i}), random_tensor(rng, {o, i}), random_tensor(rng, {o})};
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& v) { return project(ad::linear(v[0], v[1], v[2]), s); }, in);
    });
    for (std::size_t stride : {1u, 2u}) {
        add("conv2d_stride" + std::to_string(stride), [stride](Rng& rng) {
            const auto k = rng.uniform() < 0.5 ? std::size_t{1} : std::size_t{3};
            const auto cin = dim(rng, 1, 3), cout = dim(rng, 1, 3), h = 2 * dim(rng, 1, 3), w = 2 * dim(rng, 1, 3);
            const Inputs in{random_tensor(rng, {dim(rng, 1, 2), cin, h, w}), random_tensor(rng, {cout, cin, k, k}),
                            random_tensor(rng, {cout})};
            const auto s = rng.next_u64();
            return check_all([&](const Inputs& v) { return project(ad::conv2d(v[0], v[1], v[2], stride), s); }, in);
        });
    }
    add("group_norm", [](Rng& rng) {
        const auto groups = dim(rng, 1, 2), c = groups * dim(rng, 1, 2);
        const Inputs in{random_tensor(rng, {dim(rng, 1, 2), c, dim(rng, 2, 3), dim(rng, 2, 3)}), random_tensor(rng, {c}),
                        random_tensor(rng, {c})};
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& v) { return project(ad::group_norm(v[0], v[1], v[2], groups), s); }, in);
    });
    add("upsample_nearest", [](Rng& rng) {
        const auto x = random_tensor(rng, {1, dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3)});
        const auto f = dim(rng, 2, 3);
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& v) { return project(ad::upsample_nearest(v[0], f), s); }, {x});
    });
    add("avg_pool", [](Rng& rng) {
        const auto f = dim(rng, 2, 3);
        const auto x = random_tensor(rng, {1, dim(rng, 1, 2), f * dim(rng, 1, 2), f * dim(rng, 1, 2)});
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& v) { return project(ad::avg_pool(v[0], f), s); }, {x});
    });
    add("gram", [](Rng& rng) {
        const auto x = random_tensor(rng, {dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)});
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& v) { return project(ad::gram(v[0]), s); }, {x});
    });
    add("gather_rows", [](Rng& rng) {
        const auto k = dim(rng, 2, 5), c = dim(rng, 1, 3), h = dim(rng, 1, 3), w = dim(rng, 1, 3);
        std::vector<int> idx(h * w);
        for (auto& i : idx) i = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        const auto table = random_tensor(rng, {k, c});
        const auto s = rng.next_u64();
        return check_all([&](const Inputs& v) { return project(ad::gather_rows(v[0], idx, 1, h, w), s); }, {table});
    });
    add("mse", [](Rng& rng) {
        const ad::Shape sh{dim(rng, 1, 3), dim(rng, 1, 4)};
        return check_all([](const Inputs& v) { return ad::mse(v[0], v[1]); }, {random_tensor(rng, sh), random_tensor(rng, sh)});
    });
    add("l1", [](Rng& rng) {
        const ad::Shape sh{dim(rng, 1, 3), dim(rng, 1, 4)};
        const auto a = random_tensor(rng, sh);
        // Keep every |a - b| at least 0.05 away from the kink.
        auto b = random_tensor(rng, sh, 0.05);
        auto& bv = b.mutable_data();
        for (std::size_t i = 0; i < bv.size(); ++i) bv[i] += a.data()[i];
        return check_all([](const Inputs& v) { return ad::l1(v[0], v[1]); }, {a, b});
    });
    add("mean_sq_dist", [](Rng& rng) {
        const ad::Shape sh{dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
        return check_all([](const Inputs& v) { return ad::mean_sq_dist(v[0], v[1]); },
                         {random_tensor(rng, sh), random_tensor(rng, sh)});
    });

    // Losses.
    LossWeights w;
    // Each stop-gradient term is checked against the one input it reaches.
    add("codebook_term", [](Rng& rng) {
        const ad::Shape sh{1, dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
        const auto zhat = random_tensor(rng, sh);
        return check_all([&](const Inputs& v) { return codebook_terms(zhat, v[0]).codebook; }, {random_tensor(rng, sh)});
    });
    add("commitment_term", [](Rng& rng) {
        const ad::Shape sh{1, dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
        const auto q = random_tensor(rng, sh);
        return check_all([&](const Inputs& v) { return codebook_terms(v[0], q).commitment; }, {random_tensor(rng, sh)});
    });
    add("vq_loss", [w](Rng& rng) {
        const auto k = dim(rng, 2, 4), c = dim(rng, 1, 3), h = dim(rng, 1, 2), wd = dim(rng, 1, 2);
        std::vector<int> idx(h * wd);
        for (auto& i : idx) i = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        const ad::Shape img{1, 2, 3, 3};
        const auto rec = random_tensor(rng, img);
        auto target = random_tensor(rng, img, 0.05);
        for (std::size_t i = 0; i < target.numel(); ++i) target.mutable_data()[i] += rec.data()[i];
        const auto zhat = random_tensor(rng, {1, c, h, wd});
        const auto codes = random_tensor(rng, {k, c});
        // The reconstruction path is a true derivative; the zhat and code
        // paths are covered by the two term checks above.
        return check_all(
            [&](const Inputs& v) { return vq_loss(v[0], v[1], zhat, ad::gather_rows(codes, idx, 1, h, wd), w); },
            {rec, target});
    });
    add("semantic_reg", [w](Rng& rng) {
        const auto c = dim(rng, 1, 3), o = dim(rng, 1, 3), h = dim(rng, 1, 3);
        Rng lrng(rng.next_u64());
        const ad::Layer<D> conv(ad::LayerSpec::conv("semantic", c, o, 1), lrng);
        const auto z = random_tensor(rng, {1, c, h, h});
        const auto phi = random_tensor(rng, {1, o, h, h});
        const auto wt = conv.params[0].second, bs = conv.params[1].second;
        return check_all(
            [&](const Inputs& v) {
                ad::Layer<D> l = conv;
                l.params[0].second = v[1];
                l.params[1].second = v[2];
                return semantic_reg(v[0], phi, l, w);
            },
            {z, wt.detach(), bs.detach()});
    });
    add("fema_loss", [w](Rng& rng) {
        const ad::Shape sh{dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
        const auto gt = random_tensor(rng, sh);
        return check_all([&](const Inputs& v) { return fema_loss(v[0], gt, w); }, {random_tensor(rng, sh)});
    });
    add("rec_loss", [w](Rng& rng) {
        const ad::Shape sh{1, 2, 3, 3};
        const auto y = random_tensor(rng, sh);
        auto yhat = random_tensor(rng, sh, 0.05);
        for (std::size_t i = 0; i < yhat.numel(); ++i) yhat.mutable_data()[i] += y.data()[i];
        const auto pa = random_tensor(rng, {2, 3}), pb = random_tensor(rng, {2, 3});
        return check_all([&](const Inputs& v) { return rec_loss(v[0], y, ad::mse(v[1], pb), w); }, {yhat, pa});
    });
    add("adversarial_hinge", [w](Rng& rng) {
        const ad::Shape sh{dim(rng, 1, 2), 1, dim(rng, 1, 3), dim(rng, 1, 3)};
        // Scores kept away from the hinge points at +-1.
        auto away = [&] {
            auto t = random_tensor(rng, sh, 0.05);
            for (auto& x : t.mutable_data()) x = x > 0 ? 1 + x : -1 + x;
            return t;
        };
        return check_all(
            [&](const Inputs& v) {
                const auto l = adv_losses(v[0], v[1], w.lambda_adv);
                return ad::add(l.generator, l.discriminator);
            },
            {away(), away()});
    });

    return out;
}

/// Runs every case `trials` times with seeds derived from `seed`.
inline Report run(std::size_t trials = 100, double tolerance = 1e-4, std::uint64_t seed = 2024,
                  std::ostream* log = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    Report rep;
    const auto all = cases();
    for (std::size_t ci = 0; ci < all.size(); ++ci) {
        CaseResult r;
        r.name = all[ci].name;
        for (std::size_t t = 0; t < trials; ++t) {
            Rng rng(derive_seed(seed, {ci, t}));
            r.max_rel_error = std::max(r.max_rel_error, all[ci].trial(rng));
            ++r.trials;
        }
        r.passed = r.max_rel_error < tolerance;
        if (log)
            *log << (r.passed ? "PASS " : "FAIL ") << r.name << " trials=" << r.trials
                 << " max_rel_error=" << r.max_rel_error << '\n';
        rep.cases.push_back(r);
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace gradcheck
}  // namespace femasr
