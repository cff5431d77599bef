// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace femasr {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("AdamConfig: lr must be > 0");
        if (!(beta1 >= 0 && beta1 < 1)) throw std::invalid_argument("AdamConfig: beta1 must be in [0,1)");
        if (!(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("AdamConfig: beta2 must be in [0,1)");
        if (!(eps > 0)) throw std::invalid_argument("AdamConfig: eps must be > 0");
    }
};

template <class T>
struct AdamMoments {
    std::vector<T> m;
    std::vector<T> v;

    explicit AdamMoments(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}

    double norm() const {
        double acc = 0;
        for (T x : m) acc += static_cast<double>(x) * x;
        for (T x : v) acc += static_cast<double>(x) * x;
        return std::sqrt(acc);
    }
};

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update at step t (1-based). Nothing is modified
/// if any gradient entry is non-finite.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& mom, std::uint64_t t,
               const AdamConfig& cfg, const std::string& name = "param") {
    if (params.size() != grads.size() || mom.m.size() != params.size() || mom.v.size() != params.size())
        throw std::invalid_argument("adam_step: size mismatch for '" + name + "'");
    if (t < 1) throw std::invalid_argument("adam_step: step counter must be >= 1");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(static_cast<double>(grads[i]))) {
            std::ostringstream os;
            os << "adam_step: non-finite gradient in '" << name << "' at element " << i << " (value " << grads[i]
               << ", step " << t << "); update rejected";
            throw NonFiniteGradient(os.str());
        }
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1 - std::pow(cfg.beta1, static_cast<double>(t)));
    const T c2 = static_cast<T>(1 - std::pow(cfg.beta2, static_cast<double>(t)));
    const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
        mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
        const T mhat = mom.m[i] / c1;
        const T vhat = mom.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

/// Scales every gradient so that their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<std::vector<T>*>& grads, double max_norm) {
    double acc = 0;
    for (const auto* g : grads)
        for (T x : *g) acc += static_cast<double>(x) * x;
    const double norm = std::sqrt(acc);
    if (std::isfinite(norm) && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto* g : grads)
            for (T& x : *g) x *= s;
    }
    return norm;
}

}  // namespace femasr
