// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "femasr/autodiff/ops.hpp"
#include "femasr/autodiff/layers.hpp"
#include "femasr/codebook.hpp"

namespace femasr {

/// Loss weights. Defaults: beta 0.25 (commitment, and the feature-matching
/// L2 term), gamma 0.1 (semantic regularizer), alpha 1 (Gram),
/// lambda_l1 = lambda_per = 1, lambda_adv = 0.1.
struct LossWeights {
    double beta = 0.25;
    double gamma = 0.1;
    double alpha = 1.0;
    double lambda_l1 = 1.0;
    double lambda_per = 1.0;
    double lambda_adv = 0.1;

    void validate() const {
        for (double v : {beta, gamma, alpha, lambda_l1, lambda_per, lambda_adv})
            if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
    }
};

namespace detail {
template <class T>
void require_same(const ad::Tensor<T>& a, const ad::Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + ad::shape_str(a.shape()) + " vs " +
                                    ad::shape_str(b.shape()));
}
}  // namespace detail

/// mean|y'-y| + codebook_term + beta * commitment_term.
template <class T>
ad::Tensor<T> vq_loss(const ad::Tensor<T>& reconstruction, const ad::Tensor<T>& target, const ad::Tensor<T>& zhat,
                      const ad::Tensor<T>& quantized, const LossWeights& w) {
    detail::require_same(reconstruction, target, "vq_loss");
    const auto terms = codebook_terms(zhat, quantized);
    return ad::add(ad::add(ad::l1(reconstruction, target), terms.codebook),
                   ad::scale(terms.commitment, static_cast<T>(w.beta)));
}

/// gamma * mean((conv(z) - phi_y)^2); `conv` is the learnable 1x1 layer.
template <class T>
ad::Tensor<T> semantic_reg(const ad::Tensor<T>& z, const ad::Tensor<T>& phi_y, const ad::Layer<T>& conv,
                           const LossWeights& w) {
    const auto projected = ad::forward(conv, z);
    detail::require_same(projected, phi_y, "semantic_reg");
    return ad::scale(ad::mse(projected, ad::stop_gradient(phi_y)), static_cast<T>(w.gamma));
}

/// Gram matrix of an [N,C,H,W] map, normalized by H*W.
using ad::gram;

/// beta * mean over positions ||zhat_l - z_gt||^2 + alpha * mean over
/// entries (gram(zhat_l) - gram(z_gt))^2. z_gt is treated as a constant.
template <class T>
ad::Tensor<T> fema_loss(const ad::Tensor<T>& zhat_l, const ad::Tensor<T>& z_gt, const LossWeights& w) {
    detail::require_same(zhat_l, z_gt, "fema_loss");
    const auto target = ad::stop_gradient(z_gt);
    const auto l2 = ad::mean_sq_dist(zhat_l, target);
    const auto style = ad::mse(ad::gram(zhat_l), ad::gram(target));
    return ad::add(ad::scale(l2, static_cast<T>(w.beta)), ad::scale(style, static_cast<T>(w.alpha)));
}

/// lambda_l1 * mean|yhat - y| + lambda_per * perceptual distance. The
/// perceptual term is skipped when `perceptual` is undefined or its weight is 0.
template <class T>
ad::Tensor<T> rec_loss(const ad::Tensor<T>& yhat, const ad::Tensor<T>& y, const ad::Tensor<T>& perceptual,
                       const LossWeights& w) {
    detail::require_same(yhat, y, "rec_loss");
    auto loss = ad::scale(ad::l1(yhat, y), static_cast<T>(w.lambda_l1));
    if (perceptual.defined() && w.lambda_per != 0)
        loss = ad::add(loss, ad::scale(perceptual, static_cast<T>(w.lambda_per)));
    return loss;
}

template <class T>
struct AdversarialLosses {
    ad::Tensor<T> generator;
    ad::Tensor<T> discriminator;
};

/// Hinge GAN losses: generator = -lambda_adv * mean(d_fake);
/// discriminator = mean(relu(1 - d_real)) + mean(relu(1 + d_fake)).
template <class T>
AdversarialLosses<T> adv_losses(const ad::Tensor<T>& d_real, const ad::Tensor<T>& d_fake, double lambda_adv) {
    detail::require_same(d_real, d_fake, "adv_losses");
    AdversarialLosses<T> out;
    out.generator = ad::scale(ad::mean(d_fake), static_cast<T>(-lambda_adv));
    out.discriminator = ad::add(ad::mean(ad::relu(ad::add_scalar(ad::scale(d_real, T(-1)), T(1)))),
                                ad::mean(ad::relu(ad::add_scalar(d_fake, T(1)))));
    return out;
}

/// Generator half only, for when no real scores are at hand.
template <class T>
ad::Tensor<T> generator_adv_loss(const ad::Tensor<T>& d_fake, double lambda_adv) {
    return ad::scale(ad::mean(d_fake), static_cast<T>(-lambda_adv));
}

template <class T>
ad::Tensor<T> discriminator_hinge_loss(const ad::Tensor<T>& d_real, const ad::Tensor<T>& d_fake) {
    return adv_losses(d_real, d_fake, 0.0).discriminator;
}

/// Plain sum of already-weighted components; a non-finite component is
/// rejected by name.
template <class T>
ad::Tensor<T> total_loss_stage2(const std::vector<std::pair<std::string, ad::Tensor<T>>>& components) {
    if (components.empty()) throw std::invalid_argument("total_loss_stage2: no components");
    ad::Tensor<T> acc;
    for (const auto& [name, t] : components) {
        const double v = t.item();
        if (!std::isfinite(v)) throw std::invalid_argument("total_loss_stage2: component '" + name + "' is not finite");
        acc = acc.defined() ? ad::add(acc, t) : t;
    }
    return acc;
}

}  // namespace femasr
