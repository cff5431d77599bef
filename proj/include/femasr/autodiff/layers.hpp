// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "femasr/autodiff/ops.hpp"
#include "femasr/core/rng.hpp"

namespace femasr::ad {

enum class LayerKind { conv2d, group_norm, leaky_relu, nearest_upsample, strided_downsample, linear };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::group_norm: return "group_norm";
        case LayerKind::leaky_relu: return "leaky_relu";
        case LayerKind::nearest_upsample: return "nearest_upsample";
        case LayerKind::strided_downsample: return "strided_downsample";
        case LayerKind::linear: return "linear";
    }
    return "?";
}

/// Static description of one layer. `strided_downsample` is a stride-2
/// convolution; `linear` maps in_channels -> out_channels features.
struct LayerSpec {
    LayerKind kind = LayerKind::conv2d;
    std::string name;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_size = 3;
    std::size_t stride = 1;
    std::size_t groups = 0;
    double negative_slope = 0.2;
    std::size_t scale = 2;
    bool bias = true;

    static LayerSpec conv(std::string name, std::size_t cin, std::size_t cout, std::size_t k = 3) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.name = std::move(name);
        s.in_channels = cin;
        s.out_channels = cout;
        s.kernel_size = k;
        return s;
    }
    static LayerSpec downsample(std::string name, std::size_t cin, std::size_t cout, std::size_t k = 3) {
        auto s = conv(std::move(name), cin, cout, k);
        s.kind = LayerKind::strided_downsample;
        s.stride = 2;
        return s;
    }
    /// Group count clamps to min(32, channels); divisibility is checked by validate().
    static LayerSpec norm(std::string name, std::size_t channels, std::size_t max_groups = 32) {
        LayerSpec s;
        s.kind = LayerKind::group_norm;
        s.name = std::move(name);
        s.in_channels = s.out_channels = channels;
        s.groups = std::min<std::size_t>(max_groups, channels);
        return s;
    }
    static LayerSpec act(std::string name, double slope = 0.2) {
        LayerSpec s;
        s.kind = LayerKind::leaky_relu;
        s.name = std::move(name);
        s.negative_slope = slope;
        return s;
    }
    static LayerSpec upsample(std::string name, std::size_t factor = 2) {
        LayerSpec s;
        s.kind = LayerKind::nearest_upsample;
        s.name = std::move(name);
        s.scale = factor;
        return s;
    }
    static LayerSpec dense(std::string name, std::size_t in, std::size_t out) {
        LayerSpec s;
        s.kind = LayerKind::linear;
        s.name = std::move(name);
        s.in_channels = in;
        s.out_channels = out;
        return s;
    }

    bool is_conv() const { return kind == LayerKind::conv2d || kind == LayerKind::strided_downsample; }

    void validate() const {
        auto fail = [&](const std::string& why) {
            throw std::invalid_argument("layer '" + name + "' (" + to_string(kind) + "): " + why);
        };
        if (is_conv()) {
            if (kernel_size % 2 == 0) fail("kernel size must be odd");
            if (in_channels == 0 || out_channels == 0) fail("channel counts must be positive");
            if (stride == 0) fail("stride must be positive");
        }
        if (kind == LayerKind::group_norm) {
            if (in_channels == 0 || groups == 0 || in_channels % groups != 0)
                fail(std::to_string(groups) + " groups do not divide " + std::to_string(in_channels) + " channels");
        }
        if (kind == LayerKind::nearest_upsample && scale == 0) fail("scale must be positive");
        if (kind == LayerKind::linear && (in_channels == 0 || out_channels == 0)) fail("feature counts must be positive");
    }

    std::size_t param_count() const {
        switch (kind) {
            case LayerKind::conv2d:
            case LayerKind::strided_downsample:
                return out_channels * in_channels * kernel_size * kernel_size + (bias ? out_channels : 0);
            case LayerKind::group_norm: return 2 * in_channels;
            case LayerKind::linear: return out_channels * in_channels + (bias ? out_channels : 0);
            default: return 0;
        }
    }
};

/// A LayerSpec plus its parameter tensors (weight/bias or gamma/beta).
template <class T>
struct Layer {
    LayerSpec spec;
    std::vector<std::pair<std::string, Tensor<T>>> params;

    Layer() = default;

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases;
    /// group-norm starts at gamma = 1, beta = 0.
    Layer(LayerSpec s, Rng& rng, bool trainable = true) : spec(std::move(s)) {
        spec.validate();
        auto uniform_tensor = [&](Shape shape, double bound) {
            std::vector<T> v(numel(shape));
            for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
            return Tensor<T>(std::move(shape), std::move(v), trainable);
        };
        if (spec.is_conv()) {
            const auto k = spec.kernel_size;
            const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_channels * k * k));
            params.emplace_back("weight", uniform_tensor({spec.out_channels, spec.in_channels, k, k}, bound));
            if (spec.bias) params.emplace_back("bias", uniform_tensor({spec.out_channels}, bound));
        } else if (spec.kind == LayerKind::linear) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_channels));
            params.emplace_back("weight", uniform_tensor({spec.out_channels, spec.in_channels}, bound));
            if (spec.bias) params.emplace_back("bias", uniform_tensor({spec.out_channels}, bound));
        } else if (spec.kind == LayerKind::group_norm) {
            params.emplace_back("gamma", Tensor<T>::full({spec.in_channels}, T(1), trainable));
            params.emplace_back("beta", Tensor<T>::zeros({spec.in_channels}, trainable));
        }
    }

    const Tensor<T>& weight() const { return params.at(0).second; }
    Tensor<T> bias() const { return params.size() > 1 ? params[1].second : Tensor<T>(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params) n += t.numel();
        return n;
    }
};

/// Applies `layer` to `input`. Shape mismatches are reported with the layer
/// name and both shapes.
template <class T>
Tensor<T> forward(const Layer<T>& layer, const Tensor<T>& input, const Tensor<T>& weight_override = {}) {
    const auto& s = layer.spec;
    auto mismatch = [&](const Shape& expected) {
        throw std::invalid_argument("layer '" + s.name + "' (" + to_string(s.kind) + "): input shape " +
                                    shape_str(input.shape()) + " incompatible with expected " + shape_str(expected));
    };
    switch (s.kind) {
        case LayerKind::conv2d:
        case LayerKind::strided_downsample: {
            if (input.ndim() != 4 || input.dim(1) != s.in_channels) mismatch({0, s.in_channels, 0, 0});
            const auto k = s.kernel_size;
            if ((input.dim(2) <= k / 2 && input.dim(2) != 1) || (input.dim(3) <= k / 2 && input.dim(3) != 1))
                mismatch({input.dim(0), s.in_channels, k / 2 + 1, k / 2 + 1});
            const auto& w = weight_override.defined() ? weight_override : layer.weight();
            return conv2d(input, w, layer.bias(), s.stride);
        }
        case LayerKind::group_norm:
            if (input.ndim() != 4 || input.dim(1) != s.in_channels) mismatch({0, s.in_channels, 0, 0});
            return group_norm(input, layer.params[0].second, layer.params[1].second, s.groups);
        case LayerKind::leaky_relu: return leaky_relu(input, static_cast<T>(s.negative_slope));
        case LayerKind::nearest_upsample:
            if (input.ndim() != 4) mismatch({0, 0, 0, 0});
            return upsample_nearest(input, s.scale);
        case LayerKind::linear:
            if (input.ndim() != 2 || input.dim(1) != s.in_channels) mismatch({0, s.in_channels});
            return linear(input, layer.weight(), layer.bias());
    }
    throw std::logic_error("forward: unknown layer kind");
}

}  // namespace femasr::ad
