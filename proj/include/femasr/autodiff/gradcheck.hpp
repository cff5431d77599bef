// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "femasr/autodiff/tensor.hpp"

namespace femasr::ad {

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// The numeric gradient uses the five-point central stencil with step `eps`
/// (truncation error O(eps^4)), which keeps quartic losses such as the Gram
/// term well inside tolerance at wide precision.
/// Returns +inf if f produces a non-finite value anywhere.
template <class T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double eps = 1e-4) {
    const Tensor<T> leaf = x.clone_leaf(true);
    const Tensor<T> y = f(leaf);
    if (!std::isfinite(static_cast<double>(y.item()))) return std::numeric_limits<double>::infinity();
    const auto grads = backward(y);
    const auto analytic = grads[leaf];

    double worst = 0;
    std::vector<T> probe = x.values();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const T orig = probe[i];
        auto eval_at = [&](double offset) {
            probe[i] = static_cast<T>(orig + offset);
            return static_cast<double>(f(Tensor<T>(x.shape(), probe)).item());
        };
        const double fp1 = eval_at(eps), fm1 = eval_at(-eps), fp2 = eval_at(2 * eps), fm2 = eval_at(-2 * eps);
        probe[i] = orig;
        if (!std::isfinite(fp1) || !std::isfinite(fm1) || !std::isfinite(fp2) || !std::isfinite(fm2))
            return std::numeric_limits<double>::infinity();
        const double numeric = (8 * (fp1 - fm1) - (fp2 - fm2)) / (12 * eps);
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace femasr::ad
