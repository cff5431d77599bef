// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "femasr/autodiff/layers.hpp"
#include "femasr/codebook.hpp"

namespace femasr {

using ad::Layer;
using ad::LayerSpec;
using ad::Shape;
using ad::Tensor;

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

inline bool is_pow2(std::size_t v) { return v && !(v & (v - 1)); }

/// Architecture of all four networks plus the proxy extractor.
///
/// The encoder and decoder share `channel_mult`: stage s of the encoder
/// runs at base_channels * channel_mult[s] and ends with a stride-2 conv;
/// the decoder mirrors it, so the decoder factor is 2^stages (8 by default).
/// `sr_scale` is the overall upscale S_up of the Stage-II network; the LR
/// shallow head resizes by sr_scale / decoder_factor so that
/// S_up = S_down * decoder_factor.
struct ModelConfig {
    std::size_t in_channels = 3;
    std::size_t base_channels = 8;
    std::vector<std::size_t> channel_mult = {1, 2, 4};
    std::size_t res_blocks = 1;
    std::size_t n_z = 16;
    std::size_t codebook_size = 64;
    std::size_t kernel_size = 3;
    /// Toy default 1: per-channel groups at 8-32 channels wash out colour.
    std::size_t max_groups = 1;
    bool linear_decoder = false;

    std::size_t sr_scale = 4;
    std::size_t lr_channels = 32;
    std::size_t lr_blocks = 2;

    std::size_t disc_channels = 8;
    std::size_t disc_depth = 2;

    std::size_t proxy_channels = 8;
    std::uint64_t proxy_seed = 20220701;

    std::size_t stages() const { return channel_mult.size(); }
    std::size_t decoder_factor() const { return std::size_t{1} << stages(); }
    std::size_t stage_channels(std::size_t s) const { return base_channels * channel_mult.at(s); }
    std::size_t groups_for(std::size_t c) const { return std::min(max_groups, c); }

    /// Widths in the spirit of the full-size VQGAN (256x256 -> 32x32 latent,
    /// 1024 x 512 codebook). Not a claim of equivalence with any release.
    static ModelConfig full_scale() {
        ModelConfig c;
        c.base_channels = 64;
        c.channel_mult = {1, 2, 2};
        c.res_blocks = 2;
        c.max_groups = 32;
        c.n_z = 512;
        c.codebook_size = 1024;
        c.lr_channels = 128;
        c.lr_blocks = 6;
        c.disc_channels = 64;
        c.disc_depth = 3;
        c.proxy_channels = 16;
        return c;
    }

    void validate() const {
        auto fail = [](const std::string& why) { throw std::invalid_argument("ModelConfig: " + why); };
        if (in_channels == 0 || base_channels == 0 || n_z == 0) fail("channel counts must be positive");
        if (channel_mult.empty()) fail("channel_mult must list at least one stage");
        if (kernel_size % 2 == 0) fail("kernel_size must be odd");
        if (codebook_size < 2) fail("codebook_size must be at least 2");
        if (!is_pow2(sr_scale)) fail("sr_scale must be a power of two");
        auto check_groups = [&](std::size_t c, const char* what) {
            if (c == 0) fail(std::string(what) + " has zero channels");
            if (c % groups_for(c) != 0)
                fail(std::string(what) + ": " + std::to_string(groups_for(c)) + " groups do not divide " +
                     std::to_string(c) + " channels");
        };
        for (std::size_t s = 0; s < stages(); ++s) check_groups(stage_channels(s), "encoder/decoder stage");
        check_groups(lr_channels, "lr_channels");
        if (disc_channels == 0 || disc_depth == 0) fail("discriminator needs positive width and depth");
        if (proxy_channels == 0) fail("proxy_channels must be positive");
    }

    std::string describe() const {
        std::ostringstream os;
        os << "base_channels=" << base_channels << " channel_mult=";
        for (std::size_t i = 0; i < channel_mult.size(); ++i) os << (i ? "," : "") << channel_mult[i];
        os << " res_blocks=" << res_blocks << " n_z=" << n_z << " codebook_size=" << codebook_size
           << " kernel_size=" << kernel_size << " linear_decoder=" << linear_decoder << " sr_scale=" << sr_scale
           << " lr_channels=" << lr_channels << " lr_blocks=" << lr_blocks << " disc_channels=" << disc_channels
           << " disc_depth=" << disc_depth << " proxy_channels=" << proxy_channels << " proxy_seed=" << proxy_seed;
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Layer storage shared by the networks

template <class T>
class LayerStore {
public:
    std::size_t add(LayerSpec spec, Rng& rng, bool trainable = true) {
        layers_.emplace_back(std::move(spec), rng, trainable);
        return layers_.size() - 1;
    }

    Tensor<T> apply(std::size_t i, const Tensor<T>& x) const { return ad::forward(layers_[i], x); }
    const Layer<T>& operator[](std::size_t i) const { return layers_[i]; }
    Layer<T>& operator[](std::size_t i) { return layers_[i]; }
    std::size_t size() const { return layers_.size(); }

    NamedParams<T> params(const std::string& prefix) const {
        NamedParams<T> out;
        for (const auto& l : layers_)
            for (const auto& [n, t] : l.params) out.emplace_back(prefix + l.spec.name + "." + n, t);
        return out;
    }

    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> out;
        for (const auto& l : layers_) out.push_back(l.spec);
        return out;
    }

private:
    std::vector<Layer<T>> layers_;
};

template <class T>
std::size_t count_params(const NamedParams<T>& p) {
    std::size_t n = 0;
    for (const auto& [_, t] : p) n += t.numel();
    return n;
}

inline std::size_t count_params(const std::vector<LayerSpec>& specs) {
    std::size_t n = 0;
    for (const auto& s : specs) n += s.param_count();
    return n;
}

/// GN -> LReLU -> conv -> GN -> LReLU -> conv, plus identity or 1x1 skip.
struct ResBlockIdx {
    std::size_t norm1, act, conv1, norm2, conv2;
    std::optional<std::size_t> skip;
};

template <class T>
ResBlockIdx make_res_block(LayerStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                           const ModelConfig& cfg, Rng& rng) {
    ResBlockIdx r{};
    r.norm1 = store.add(LayerSpec::norm(name + ".norm1", cin, cfg.max_groups), rng);
    r.act = store.add(LayerSpec::act(name + ".act"), rng);
    r.conv1 = store.add(LayerSpec::conv(name + ".conv1", cin, cout, cfg.kernel_size), rng);
    r.norm2 = store.add(LayerSpec::norm(name + ".norm2", cout, cfg.max_groups), rng);
    r.conv2 = store.add(LayerSpec::conv(name + ".conv2", cout, cout, cfg.kernel_size), rng);
    if (cin != cout) r.skip = store.add(LayerSpec::conv(name + ".skip", cin, cout, 1), rng);
    return r;
}

template <class T>
Tensor<T> apply_res_block(const LayerStore<T>& s, const ResBlockIdx& r, const Tensor<T>& x) {
    auto h = s.apply(r.conv1, s.apply(r.act, s.apply(r.norm1, x)));
    h = s.apply(r.conv2, s.apply(r.act, s.apply(r.norm2, h)));
    return ad::add(r.skip ? s.apply(*r.skip, x) : x, h);
}

/// Residual features injected into the decoder, one per upsampling stage;
/// entry i has the shape of decoder stage i's output.
template <class T>
struct ShortcutBundle {
    std::vector<Tensor<T>> features;
};

// ---------------------------------------------------------------------------
// HR encoder E

template <class T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(derive_seed(seed, {0xE0}));
        conv_in_ = store_.add(LayerSpec::conv("conv_in", cfg.in_channels, cfg.stage_channels(0), cfg.kernel_size), rng);
        std::size_t c = cfg.stage_channels(0);
        for (std::size_t s = 0; s < cfg.stages(); ++s) {
            const std::size_t cs = cfg.stage_channels(s);
            std::vector<ResBlockIdx> blocks;
            for (std::size_t b = 0; b < cfg.res_blocks; ++b) {
                blocks.push_back(make_res_block(store_, "stage" + std::to_string(s) + ".block" + std::to_string(b), c,
                                                cs, cfg, rng));
                c = cs;
            }
            blocks_.push_back(std::move(blocks));
            downs_.push_back(store_.add(LayerSpec::downsample("stage" + std::to_string(s) + ".down", c, cs), rng));
            c = cs;
        }
        norm_out_ = store_.add(LayerSpec::norm("norm_out", c, cfg.max_groups), rng);
        act_ = store_.add(LayerSpec::act("act_out"), rng);
        conv_out_ = store_.add(LayerSpec::conv("conv_out", c, cfg.n_z, 1), rng);
    }

    Tensor<T> operator()(const Tensor<T>& y) const {
        const auto f = cfg_.decoder_factor();
        if (y.ndim() != 4 || y.dim(1) != cfg_.in_channels || y.dim(2) % f != 0 || y.dim(3) % f != 0)
            throw std::invalid_argument("encode_hr: image " + ad::shape_str(y.shape()) +
                                        " must have " + std::to_string(cfg_.in_channels) +
                                        " channels and sides divisible by " + std::to_string(f));
        auto h = store_.apply(conv_in_, y);
        for (std::size_t s = 0; s < blocks_.size(); ++s) {
            for (const auto& b : blocks_[s]) h = apply_res_block(store_, b, h);
            h = store_.apply(downs_[s], h);
        }
        return store_.apply(conv_out_, store_.apply(act_, store_.apply(norm_out_, h)));
    }

    NamedParams<T> params() const { return store_.params("E."); }
    std::vector<LayerSpec> specs() const { return store_.specs(); }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    LayerStore<T> store_;
    std::size_t conv_in_ = 0, norm_out_ = 0, act_ = 0, conv_out_ = 0;
    std::vector<std::vector<ResBlockIdx>> blocks_;
    std::vector<std::size_t> downs_;
};

// ---------------------------------------------------------------------------
// Decoder G

template <class T>
class Decoder {
public:
    Decoder() = default;
    Decoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(derive_seed(seed, {0xD0}));
        const std::size_t S = cfg.stages();
        std::size_t c = cfg.stage_channels(S - 1);
        conv_in_ = store_.add(LayerSpec::conv("conv_in", cfg.n_z, c, cfg.kernel_size), rng);
        if (!cfg.linear_decoder)
            for (std::size_t b = 0; b < cfg.res_blocks; ++b)
                mid_.push_back(make_res_block(store_, "mid.block" + std::to_string(b), c, c, cfg, rng));
        for (std::size_t i = 1; i <= S; ++i) {
            const std::size_t co = stage_out_channels(i);
            Stage st;
            const std::string name = "up" + std::to_string(i);
            st.upsample = store_.add(LayerSpec::upsample(name + ".upsample"), rng);
            st.conv = store_.add(LayerSpec::conv(name + ".conv", c, co, cfg.kernel_size), rng);
            if (!cfg.linear_decoder)
                for (std::size_t b = 0; b < cfg.res_blocks; ++b)
                    st.blocks.push_back(make_res_block(store_, name + ".block" + std::to_string(b), co, co, cfg, rng));
            stages_.push_back(std::move(st));
            c = co;
        }
        if (!cfg.linear_decoder) {
            norm_out_ = store_.add(LayerSpec::norm("norm_out", c, cfg.max_groups), rng);
            act_ = store_.add(LayerSpec::act("act_out"), rng);
        }
        conv_out_ = store_.add(LayerSpec::conv("conv_out", c, cfg.in_channels, cfg.kernel_size), rng);
    }

    /// Channels produced by upsampling stage i (1-based).
    std::size_t stage_out_channels(std::size_t i) const { return cfg_.stage_channels(cfg_.stages() - i); }

    /// Expected bundle shapes for a latent of shape [N, n_z, h, w].
    std::vector<Shape> shortcut_shapes(const Shape& latent) const {
        std::vector<Shape> out;
        std::size_t h = latent[2], w = latent[3];
        for (std::size_t i = 1; i <= cfg_.stages(); ++i) {
            h *= 2;
            w *= 2;
            out.push_back({latent[0], stage_out_channels(i), h, w});
        }
        return out;
    }

    /// f_i = G_up^i(f_{i-1}) + shortcut_i, with f_0 the conv_in/mid output.
    Tensor<T> operator()(const Tensor<T>& z, const ShortcutBundle<T>* shortcuts = nullptr) const {
        if (z.ndim() != 4 || z.dim(1) != cfg_.n_z)
            throw std::invalid_argument("decode: latent " + ad::shape_str(z.shape()) + " must have " +
                                        std::to_string(cfg_.n_z) + " channels");
        if (shortcuts) {
            const auto expected = shortcut_shapes(z.shape());
            if (shortcuts->features.size() != expected.size())
                throw std::invalid_argument("decode: shortcut bundle has " +
                                            std::to_string(shortcuts->features.size()) + " entries, expected " +
                                            std::to_string(expected.size()));
            for (std::size_t i = 0; i < expected.size(); ++i)
                if (shortcuts->features[i].shape() != expected[i])
                    throw std::invalid_argument("decode: shortcut " + std::to_string(i + 1) + " has shape " +
                                                ad::shape_str(shortcuts->features[i].shape()) + ", expected " +
                                                ad::shape_str(expected[i]));
        }
        auto f = store_.apply(conv_in_, z);
        for (const auto& b : mid_) f = apply_res_block(store_, b, f);
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            const auto& st = stages_[i];
            f = store_.apply(st.conv, store_.apply(st.upsample, f));
            for (const auto& b : st.blocks) f = apply_res_block(store_, b, f);
            if (shortcuts) f = ad::add(f, shortcuts->features[i]);
        }
        if (!cfg_.linear_decoder) f = store_.apply(act_, store_.apply(norm_out_, f));
        return store_.apply(conv_out_, f);
    }

    NamedParams<T> params() const { return store_.params("G."); }
    std::vector<LayerSpec> specs() const { return store_.specs(); }
    LayerStore<T>& layers() { return store_; }
    const ModelConfig& config() const { return cfg_; }

private:
    struct Stage {
        std::size_t upsample = 0, conv = 0;
        std::vector<ResBlockIdx> blocks;
    };
    ModelConfig cfg_;
    LayerStore<T> store_;
    std::size_t conv_in_ = 0, norm_out_ = 0, act_ = 0, conv_out_ = 0;
    std::vector<ResBlockIdx> mid_;
    std::vector<Stage> stages_;
};

// ---------------------------------------------------------------------------
// LR encoder E_l = shallow head + residual conv trunk + H_up shortcut blocks

template <class T>
struct LrEncoding {
    Tensor<T> zhat;
    ShortcutBundle<T> shortcuts;
};

template <class T>
class LrEncoder {
public:
    LrEncoder() = default;
    LrEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(derive_seed(seed, {0x1E}));
        const std::size_t c = cfg.lr_channels;
        conv_in_ = store_.add(LayerSpec::conv("conv_in", cfg.in_channels, c, cfg.kernel_size), rng);
        const auto df = cfg.decoder_factor();
        if (cfg.sr_scale < df) {
            for (std::size_t r = df / cfg.sr_scale, i = 0; r > 1; r /= 2, ++i)
                head_.push_back(store_.add(LayerSpec::downsample("head.down" + std::to_string(i), c, c), rng));
        } else {
            for (std::size_t r = cfg.sr_scale / df, i = 0; r > 1; r /= 2, ++i) {
                head_.push_back(store_.add(LayerSpec::upsample("head.up" + std::to_string(i)), rng));
                head_.push_back(
                    store_.add(LayerSpec::conv("head.conv" + std::to_string(i), c, c, cfg.kernel_size), rng));
            }
        }
        for (std::size_t b = 0; b < cfg.lr_blocks; ++b)
            trunk_.push_back(make_res_block(store_, "trunk.block" + std::to_string(b), c, c, cfg, rng));
        trunk_conv_ = store_.add(LayerSpec::conv("trunk.conv", c, c, cfg.kernel_size), rng);
        norm_out_ = store_.add(LayerSpec::norm("norm_out", c, cfg.max_groups), rng);
        act_ = store_.add(LayerSpec::act("act"), rng);
        conv_out_ = store_.add(LayerSpec::conv("conv_out", c, cfg.n_z, 1), rng);
        std::size_t cin = cfg.n_z;
        for (std::size_t i = 1; i <= cfg.stages(); ++i) {
            const std::size_t co = cfg.stage_channels(cfg.stages() - i);
            const std::string name = "shortcut" + std::to_string(i);
            Hup h;
            h.upsample = store_.add(LayerSpec::upsample(name + ".upsample"), rng);
            h.conv1 = store_.add(LayerSpec::conv(name + ".conv1", cin, co, cfg.kernel_size), rng);
            h.conv2 = store_.add(LayerSpec::conv(name + ".conv2", co, co, cfg.kernel_size), rng);
            hup_.push_back(h);
            cin = co;
        }
    }

    /// LR side divisor: the latent is (LR side) * sr_scale / decoder_factor.
    std::size_t required_multiple() const {
        const auto df = cfg_.decoder_factor();
        return cfg_.sr_scale < df ? df / cfg_.sr_scale : 1;
    }

    LrEncoding<T> operator()(const Tensor<T>& x) const {
        const auto m = required_multiple();
        if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) % m != 0 || x.dim(3) % m != 0)
            throw std::invalid_argument("encode_lr: image " + ad::shape_str(x.shape()) + " must have " +
                                        std::to_string(cfg_.in_channels) + " channels and sides divisible by " +
                                        std::to_string(m));
        auto h = store_.apply(conv_in_, x);
        for (auto i : head_) h = store_.apply(i, h);
        auto t = h;
        for (const auto& b : trunk_) t = apply_res_block(store_, b, t);
        h = ad::add(h, store_.apply(trunk_conv_, t));
        LrEncoding<T> out;
        out.zhat = store_.apply(conv_out_, store_.apply(act_, store_.apply(norm_out_, h)));
        auto f = out.zhat;
        for (const auto& hu : hup_) {
            auto u = store_.apply(hu.conv1, store_.apply(hu.upsample, f));
            f = store_.apply(hu.conv2, store_.apply(act_, u));
            out.shortcuts.features.push_back(f);
        }
        return out;
    }

    /// Zeroes the final conv of every H_up block so all shortcuts vanish.
    void zero_shortcut_outputs() {
        for (const auto& hu : hup_)
            for (auto& [_, t] : store_[hu.conv2].params) std::fill(t.mutable_data().begin(), t.mutable_data().end(), T(0));
    }

    NamedParams<T> params() const { return store_.params("El."); }
    std::vector<LayerSpec> specs() const { return store_.specs(); }
    const ModelConfig& config() const { return cfg_; }

private:
    struct Hup {
        std::size_t upsample = 0, conv1 = 0, conv2 = 0;
    };
    ModelConfig cfg_;
    LayerStore<T> store_;
    std::size_t conv_in_ = 0, trunk_conv_ = 0, norm_out_ = 0, act_ = 0, conv_out_ = 0;
    std::vector<std::size_t> head_;
    std::vector<ResBlockIdx> trunk_;
    std::vector<Hup> hup_;
};

// ---------------------------------------------------------------------------
// U-Net discriminator with spectral normalization

template <class T>
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const ModelConfig& cfg, std::uint64_t seed, std::size_t warmup_iterations = 50) : cfg_(cfg) {
        cfg.validate();
        Rng rng(derive_seed(seed, {0xD15C}));
        std::size_t c = cfg.disc_channels;
        conv_in_ = store_.add(LayerSpec::conv("conv_in", cfg.in_channels, c, 3), rng);
        act_ = store_.add(LayerSpec::act("act"), rng);
        std::vector<std::size_t> widths{c};
        for (std::size_t j = 1; j <= cfg.disc_depth; ++j) {
            const std::size_t co = cfg.disc_channels * (std::size_t{1} << std::min<std::size_t>(j, 3));
            downs_.push_back(store_.add(LayerSpec::downsample("down" + std::to_string(j), c, co), rng));
            widths.push_back(co);
            c = co;
        }
        for (std::size_t j = cfg.disc_depth; j >= 1; --j) {
            ups_.push_back(store_.add(LayerSpec::upsample("up" + std::to_string(j) + ".upsample"), rng));
            up_convs_.push_back(store_.add(LayerSpec::conv("up" + std::to_string(j) + ".conv", c, widths[j - 1], 3), rng));
            c = widths[j - 1];
        }
        conv_out_ = store_.add(LayerSpec::conv("conv_out", c, 1, 3), rng);

        Rng urng(derive_seed(seed, {0x5EC7}));
        for (std::size_t i = 0; i < store_.size(); ++i) {
            if (!store_[i].spec.is_conv()) continue;
            std::vector<T> u(store_[i].spec.out_channels);
            for (auto& v : u) v = static_cast<T>(urng.normal());
            normalize(u);
            sn_u_.emplace_back(i, std::move(u));
        }
        for (std::size_t it = 0; it < warmup_iterations; ++it) power_iteration();
    }

    /// One power-iteration step on every weight; updates the persisted u.
    void power_iteration() {
        for (auto& [idx, u] : sn_u_) {
            const auto& w = store_[idx].weight();
            const std::size_t rows = w.dim(0), cols = w.numel() / rows;
            ad::detail::CMapMat<T> W(w.data().data(), rows, cols);
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u.data(), rows);
            Eigen::Matrix<T, Eigen::Dynamic, 1> v = W.transpose() * um;
            v /= std::max<T>(v.norm(), T(1e-12));
            um = W * v;
            um /= std::max<T>(um.norm(), T(1e-12));
        }
    }

    /// W / sigma with sigma = u^T W v and v = normalize(W^T u) at the current u.
    /// Gradient flows through sigma as d sigma / dW = u v^T.
    Tensor<T> normalized_weight(std::size_t layer) const {
        const auto& u = u_for(layer);
        const auto& w = store_[layer].weight();
        const std::size_t rows = w.dim(0), cols = w.numel() / rows;
        ad::detail::CMapMat<T> W(w.data().data(), rows, cols);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u.data(), rows);
        Eigen::Matrix<T, Eigen::Dynamic, 1> v = W.transpose() * um;
        v /= std::max<T>(v.norm(), T(1e-12));
        std::vector<T> outer(rows * cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) outer[r * cols + c] = u[r] * v[static_cast<Eigen::Index>(c)];
        const Tensor<T> uvt(w.shape(), std::move(outer));
        const auto sigma = ad::sum(ad::mul(w, uvt));
        return ad::div_scalar(w, sigma);
    }

    /// Per-pixel realness scores, same spatial size as the input.
    /// With `update_power_iteration`, u advances one step first.
    Tensor<T> operator()(const Tensor<T>& img, bool update_power_iteration = false) {
        if (update_power_iteration) power_iteration();
        return evaluate(img);
    }

    Tensor<T> evaluate(const Tensor<T>& img) const {
        const std::size_t m = std::size_t{1} << cfg_.disc_depth;
        if (img.ndim() != 4 || img.dim(1) != cfg_.in_channels || img.dim(2) % m != 0 || img.dim(3) % m != 0)
            throw std::invalid_argument("discriminate: image " + ad::shape_str(img.shape()) +
                                        " must have sides divisible by " + std::to_string(m));
        auto conv = [&](std::size_t i, const Tensor<T>& x) { return ad::forward(store_[i], x, normalized_weight(i)); };
        std::vector<Tensor<T>> skips;
        auto h = store_.apply(act_, conv(conv_in_, img));
        skips.push_back(h);
        for (auto d : downs_) {
            h = store_.apply(act_, conv(d, h));
            skips.push_back(h);
        }
        skips.pop_back();
        for (std::size_t j = 0; j < ups_.size(); ++j) {
            h = store_.apply(act_, conv(up_convs_[j], store_.apply(ups_[j], h)));
            h = ad::add(h, skips[skips.size() - 1 - j]);
        }
        return conv(conv_out_, h);
    }

    NamedParams<T> params() const { return store_.params("D."); }
    std::vector<LayerSpec> specs() const { return store_.specs(); }

    /// Power-iteration vectors, exposed for checkpointing.
    NamedParams<T> sn_state() const {
        NamedParams<T> out;
        for (const auto& [idx, u] : sn_u_)
            out.emplace_back("D." + store_[idx].spec.name + ".sn_u", Tensor<T>({u.size()}, u));
        return out;
    }
    void set_sn_state(std::size_t i, const std::vector<T>& u) { sn_u_.at(i).second = u; }
    std::size_t conv_layer_count() const { return sn_u_.size(); }
    std::size_t conv_layer(std::size_t i) const { return sn_u_.at(i).first; }

private:
    static void normalize(std::vector<T>& v) {
        T n = 0;
        for (T x : v) n += x * x;
        n = std::sqrt(n);
        for (T& x : v) x /= std::max<T>(n, T(1e-12));
    }
    const std::vector<T>& u_for(std::size_t layer) const {
        for (const auto& [idx, u] : sn_u_)
            if (idx == layer) return u;
        throw std::out_of_range("Discriminator: layer has no spectral-norm state");
    }

    ModelConfig cfg_;
    LayerStore<T> store_;
    std::size_t conv_in_ = 0, act_ = 0, conv_out_ = 0;
    std::vector<std::size_t> downs_, ups_, up_convs_;
    std::vector<std::pair<std::size_t, std::vector<T>>> sn_u_;
};

// ---------------------------------------------------------------------------
// Frozen random-filter feature extractor standing in for a pretrained
// perceptual network. Three stages at scales 1, 1/2, 1/4.

template <class T>
class ProxyFeatures {
public:
    ProxyFeatures() = default;
    explicit ProxyFeatures(const ModelConfig& cfg) : in_channels_(cfg.in_channels) {
        Rng rng(derive_seed(cfg.proxy_seed, {0x9F0C}));
        const std::size_t c = cfg.proxy_channels;
        auto add = [&](LayerSpec s) {
            const auto i = store_.add(std::move(s), rng, false);
            // He-uniform gain so activations keep their scale through the stack.
            for (auto& [_, t] : store_[i].params)
                for (auto& v : t.mutable_data()) v *= static_cast<T>(std::sqrt(6.0));
            return i;
        };
        stages_.push_back(add(LayerSpec::conv("proxy.conv1", cfg.in_channels, c, 3)));
        stages_.push_back(add(LayerSpec::downsample("proxy.conv2", c, 2 * c)));
        stages_.push_back(add(LayerSpec::downsample("proxy.conv3", 2 * c, 2 * c)));
        act_ = store_.add(LayerSpec::act("proxy.act"), rng, false);
    }

    std::vector<Tensor<T>> operator()(const Tensor<T>& img) const {
        if (img.ndim() != 4 || img.dim(1) != in_channels_ || img.dim(2) % 4 != 0 || img.dim(3) % 4 != 0)
            throw std::invalid_argument("proxy_features: image " + ad::shape_str(img.shape()) +
                                        " must have sides divisible by 4");
        std::vector<Tensor<T>> feats;
        auto h = ad::add_scalar(img, T(-0.5));
        for (auto s : stages_) {
            h = store_.apply(act_, store_.apply(s, h));
            feats.push_back(h);
        }
        return feats;
    }

    std::size_t out_channels() const { return store_[stages_.back()].spec.out_channels; }

private:
    std::size_t in_channels_ = 3;
    LayerStore<T> store_;
    std::vector<std::size_t> stages_;
    std::size_t act_ = 0;
};

/// Sum over scales of mean squared feature differences.
template <class T>
Tensor<T> proxy_distance(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("proxy_distance: scale counts differ");
    Tensor<T> acc;
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto d = ad::mse(a[i], b[i]);
        acc = acc.defined() ? ad::add(acc, d) : d;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Stage-level forward passes

template <class T>
Tensor<T> encode_hr(const Tensor<T>& y, const Encoder<T>& e) {
    return e(y);
}

template <class T>
Tensor<T> decode(const Tensor<T>& z, const ShortcutBundle<T>* shortcuts, const Decoder<T>& g) {
    return g(z, shortcuts);
}

template <class T>
LrEncoding<T> encode_lr(const Tensor<T>& x, const LrEncoder<T>& el) {
    return el(x);
}

template <class T>
struct SrForward {
    Tensor<T> output;
    LrEncoding<T> encoding;
    QuantizeResult<T> match;
};

/// G(straight_through(q[E_l(x)], E_l(x))) with shortcuts attached when requested.
template <class T>
SrForward<T> sr_forward(const Tensor<T>& x, const LrEncoder<T>& el, const Codebook<T>& cb, const Decoder<T>& g,
                        bool use_shortcuts = true, const QuantizeOptions& qopts = {}) {
    SrForward<T> r;
    r.encoding = el(x);
    r.match = quantize(r.encoding.zhat, cb, qopts);
    const auto z = straight_through(r.match.quantized, r.encoding.zhat);
    r.output = g(z, use_shortcuts ? &r.encoding.shortcuts : nullptr);
    return r;
}

template <class T>
Tensor<T> discriminate(const Tensor<T>& img, Discriminator<T>& d, bool update_power_iteration = false) {
    return d(img, update_power_iteration);
}

template <class T>
std::vector<Tensor<T>> proxy_features(const Tensor<T>& img, const ProxyFeatures<T>& phi) {
    return phi(img);
}

/// Semantic target: deepest proxy feature average-pooled to latent resolution.
template <class T>
Tensor<T> semantic_target(const Tensor<T>& img, const ProxyFeatures<T>& phi, std::size_t latent_h) {
    auto f = ad::stop_gradient(phi(img).back());
    if (f.dim(2) == latent_h) return f;
    if (f.dim(2) < latent_h || f.dim(2) % latent_h != 0)
        throw std::invalid_argument("semantic_target: cannot pool " + ad::shape_str(f.shape()) + " to side " +
                                    std::to_string(latent_h));
    return ad::avg_pool(f, f.dim(2) / latent_h);
}

}  // namespace femasr
