// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "femasr/losses.hpp"
#include "femasr/models.hpp"

using namespace femasr;
using TF = ad::Tensor<float>;
using TD = ad::Tensor<double>;

namespace {

TF image_batch(Rng& rng, std::size_t n, std::size_t side) {
    std::vector<float> v(n * 3 * side * side);
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    return TF({n, 3, side, side}, std::move(v));
}

TD random_td(Rng& rng, ad::Shape s, bool grad = true) {
    std::vector<double> v(ad::numel(s));
    for (auto& x : v) x = rng.normal();
    return TD(std::move(s), std::move(v), grad);
}

}  // namespace

TEST(Models, ToyShapes) {
    ModelConfig cfg;
    Rng rng(1);
    Encoder<float> e(cfg, 1);
    Decoder<float> g(cfg, 2);
    const auto y = image_batch(rng, 2, 32);
    const auto z = e(y);
    EXPECT_EQ(z.shape(), (ad::Shape{2, cfg.n_z, 4, 4}));
    EXPECT_EQ(g(z).shape(), y.shape());
}

TEST(Models, EncoderRejectsIndivisibleSides) {
    ModelConfig cfg;
    Encoder<float> e(cfg, 1);
    Rng rng(1);
    EXPECT_THROW(e(image_batch(rng, 1, 20)), std::invalid_argument);
}

TEST(Models, ConfigValidation) {
    ModelConfig c;
    c.kernel_size = 4;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.sr_scale = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.max_groups = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_NO_THROW(ModelConfig::full_scale().validate());
}

TEST(Models, SrForwardUpscalesByFactor) {
    for (std::size_t scale : {2u, 4u}) {
        ModelConfig cfg;
        cfg.sr_scale = scale;
        LrEncoder<float> el(cfg, 3);
        Codebook<float> cb(cfg.codebook_size, cfg.n_z, 4);
        Decoder<float> g(cfg, 5);
        Rng rng(2);
        const std::size_t side = 32 / scale;
        const auto out = sr_forward(image_batch(rng, 1, side), el, cb, g);
        EXPECT_EQ(out.output.shape(), (ad::Shape{1, 3, 32, 32}));
        EXPECT_EQ(out.encoding.shortcuts.features.size(), cfg.stages());
    }
}

TEST(Models, ZeroedShortcutsMatchNoShortcuts) {
    ModelConfig cfg;
    LrEncoder<float> el(cfg, 3);
    el.zero_shortcut_outputs();
    Codebook<float> cb(cfg.codebook_size, cfg.n_z, 4);
    Decoder<float> g(cfg, 5);
    Rng rng(6);
    const auto x = image_batch(rng, 1, 8);
    const auto a = sr_forward(x, el, cb, g, true), b = sr_forward(x, el, cb, g, false);
    ASSERT_EQ(a.output.numel(), b.output.numel());
    for (std::size_t i = 0; i < a.output.numel(); ++i) EXPECT_EQ(a.output.values()[i], b.output.values()[i]);
}

TEST(Models, DecoderRejectsMisshapenShortcut) {
    ModelConfig cfg;
    Decoder<float> g(cfg, 1);
    ShortcutBundle<float> bad;
    bad.features.push_back(TF::zeros({1, 1, 1, 1}));
    EXPECT_THROW(g(TF::zeros({1, cfg.n_z, 2, 2}), &bad), std::invalid_argument);
}

TEST(Models, LinearDecoderIsLinear) {
    ModelConfig cfg;
    cfg.linear_decoder = true;
    Decoder<double> g(cfg, 9);
    Rng rng(3);
    auto a = random_td(rng, {1, cfg.n_z, 2, 2}, false), b = random_td(rng, {1, cfg.n_z, 2, 2}, false);
    const auto zero = g(TD::zeros(a.shape()));
    const auto lhs = g(ad::add(a, b));
    const auto ga = g(a), gb = g(b);
    for (std::size_t i = 0; i < lhs.numel(); ++i)
        EXPECT_NEAR(lhs.values()[i] - zero.values()[i], ga.values()[i] + gb.values()[i] - 2 * zero.values()[i], 1e-9);
}

TEST(Models, SpectralNormBringsSigmaToOne) {
    ModelConfig cfg;
    Discriminator<double> d(cfg, 4, 200);
    for (std::size_t i = 0; i < d.conv_layer_count(); ++i) {
        const auto w = d.normalized_weight(d.conv_layer(i));
        const std::size_t rows = w.dim(0), cols = w.numel() / rows;
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.values().data(), rows,
                                                                                                   cols);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
        EXPECT_NEAR(svd.singularValues()(0), 1.0, 1e-3);
    }
}

TEST(Models, DiscriminatorScoresPerPixel) {
    ModelConfig cfg;
    Discriminator<float> d(cfg, 1);
    Rng rng(5);
    EXPECT_EQ(d.evaluate(image_batch(rng, 2, 32)).shape(), (ad::Shape{2, 1, 32, 32}));
}

TEST(Models, ProxyIsFrozenAndDeterministic) {
    ModelConfig cfg;
    ProxyFeatures<float> a(cfg), b(cfg);
    Rng rng(5);
    const auto img = image_batch(rng, 1, 16);
    const auto fa = a(img), fb = b(img);
    ASSERT_EQ(fa.size(), 3u);
    for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(fa[s].values(), fb[s].values());
    EXPECT_EQ(fa[1].dim(2), 8u);
    EXPECT_EQ(fa[2].dim(2), 4u);
    EXPECT_FALSE(fa[2].requires_grad());
}

TEST(Models, ParameterNamesCarryPrefixes) {
    ModelConfig cfg;
    for (const auto& [n, _] : Encoder<float>(cfg, 1).params()) EXPECT_EQ(n.rfind("E.", 0), 0u) << n;
    for (const auto& [n, _] : Decoder<float>(cfg, 1).params()) EXPECT_EQ(n.rfind("G.", 0), 0u) << n;
    for (const auto& [n, _] : LrEncoder<float>(cfg, 1).params()) EXPECT_EQ(n.rfind("El.", 0), 0u) << n;
    EXPECT_GT(count_params(Encoder<float>(cfg, 1).params()), 0u);
}

// ---------------------------------------------------------------------------
// Losses

TEST(Losses, FemaZeroAtTarget) {
    Rng rng(1);
    const auto z = random_td(rng, {2, 4, 3, 3});
    EXPECT_NEAR(fema_loss(z, z.detach(), LossWeights{}).item(), 0.0, 1e-15);
}

TEST(Losses, FemaWeightsCombineTerms) {
    Rng rng(2);
    const auto a = random_td(rng, {1, 3, 2, 2}), b = random_td(rng, {1, 3, 2, 2}, false);
    LossWeights only_l2;
    only_l2.alpha = 0;
    LossWeights only_style;
    only_style.beta = 0;
    const double l2 = fema_loss(a, b, only_l2).item(), style = fema_loss(a, b, only_style).item();
    EXPECT_NEAR(fema_loss(a, b, LossWeights{}).item(), l2 + style, 1e-12);
    EXPECT_NEAR(l2, 0.25 * ad::mean_sq_dist(a, b).item(), 1e-12);
    EXPECT_NEAR(style, ad::mse(ad::gram(a), ad::gram(b)).item(), 1e-12);
}

TEST(Losses, FemaTreatsTargetAsConstant) {
    Rng rng(3);
    const auto a = random_td(rng, {1, 3, 2, 2}), b = random_td(rng, {1, 3, 2, 2});
    const auto g = ad::backward(fema_loss(a, b, LossWeights{}));
    EXPECT_FALSE(g.has(b));
}

TEST(Losses, GramIsPermutationInvariantOverPositions) {
    TD x({1, 2, 1, 3}, {1, 2, 3, 4, 5, 6});
    TD y({1, 2, 1, 3}, {3, 1, 2, 6, 4, 5});
    EXPECT_EQ(ad::gram(x).values(), ad::gram(y).values());
}

TEST(Losses, HingeValues) {
    TD real({1, 1, 1, 2}, {2.0, 0.5}), fake({1, 1, 1, 2}, {-2.0, 0.0});
    const auto a = adv_losses(real, fake, 0.1);
    // relu(1-2)=0, relu(1-0.5)=0.5 -> 0.25; relu(1-2)=0, relu(1+0)=1 -> 0.5.
    EXPECT_NEAR(a.discriminator.item(), 0.75, 1e-15);
    EXPECT_NEAR(a.generator.item(), 0.1, 1e-15);
    EXPECT_NEAR(generator_adv_loss(fake, 0.1).item(), 0.1, 1e-15);
}

TEST(Losses, RecLossSkipsPerceptualWhenDisabled) {
    TD a({1, 1, 1, 2}, {0.0, 1.0}), b({1, 1, 1, 2}, {0.5, 0.5});
    LossWeights w;
    const TD per = TD::scalar(3.0);
    EXPECT_NEAR(rec_loss(a, b, per, w).item(), 3.5, 1e-15);
    w.lambda_per = 0;
    EXPECT_NEAR(rec_loss(a, b, per, w).item(), 0.5, 1e-15);
    EXPECT_NEAR(rec_loss(a, b, TD(), LossWeights{}).item(), 0.5, 1e-15);
}

TEST(Losses, VqLossComposition) {
    Rng rng(4);
    const auto rec = random_td(rng, {1, 3, 4, 4}), tgt = random_td(rng, {1, 3, 4, 4}, false);
    const auto zh = random_td(rng, {1, 2, 1, 1}), zq = random_td(rng, {1, 2, 1, 1});
    const double expect = ad::l1(rec, tgt).item() + 1.25 * ad::mean_sq_dist(zh, zq).item();
    EXPECT_NEAR(vq_loss(rec, tgt, zh, zq, LossWeights{}).item(), expect, 1e-12);
    EXPECT_THROW(vq_loss(rec, zh, zh, zq, LossWeights{}), std::invalid_argument);
}

TEST(Losses, SemanticRegularizerTrainsOnlyProjection) {
    Rng rng(5);
    Rng lrng(6);
    ad::Layer<double> conv(LayerSpec::conv("semantic", 2, 4, 1), lrng);
    const auto z = random_td(rng, {1, 2, 2, 2}), phi = random_td(rng, {1, 4, 2, 2});
    const auto loss = semantic_reg(z, phi, conv, LossWeights{});
    EXPECT_GT(loss.item(), 0.0);
    const auto g = ad::backward(loss);
    EXPECT_TRUE(g.has(conv.weight()));
    EXPECT_FALSE(g.has(phi));
}

TEST(Losses, TotalRejectsNonFiniteComponent) {
    std::vector<std::pair<std::string, TD>> parts{{"fema", TD::scalar(1.0)}, {"rec", TD::scalar(NAN)}};
    try {
        total_loss_stage2(parts);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("rec"), std::string::npos);
    }
    parts[1].second = TD::scalar(2.0);
    EXPECT_DOUBLE_EQ(total_loss_stage2(parts).item(), 3.0);
}

TEST(Losses, WeightsValidate) {
    LossWeights w;
    w.beta = -1;
    EXPECT_THROW(w.validate(), std::invalid_argument);
}
