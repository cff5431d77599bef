// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "femasr/autodiff/tensor.hpp"

namespace femasr {

/// Planar (C,H,W) float image, nominal range [0,1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.f)
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
    std::size_t plane() const { return height * width; }
    bool empty() const { return data.empty(); }
    bool same_shape(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    void clip() {
        for (auto& v : data) v = std::clamp(v, 0.f, 1.f);
    }

    Image crop(std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) const {
        if (y0 + h > height || x0 + w > width)
            throw std::invalid_argument("Image::crop: window exceeds " + std::to_string(height) + "x" +
                                        std::to_string(width));
        Image out(channels, h, w);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = at(c, y0 + y, x0 + x);
        return out;
    }

    Image flip_horizontal() const {
        Image out(channels, height, width);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = at(c, y, width - 1 - x);
        return out;
    }
};

/// ITU-R BT.601 luma. Single-channel images are returned unchanged.
inline Image to_luma(const Image& img) {
    if (img.channels == 1) return img;
    if (img.channels != 3) throw std::invalid_argument("to_luma: expected 1 or 3 channels");
    Image out(1, img.height, img.width);
    for (std::size_t i = 0; i < img.plane(); ++i)
        out.data[i] = static_cast<float>(0.299 * img.data[i] + 0.587 * img.data[img.plane() + i] +
                                         0.114 * img.data[2 * img.plane() + i]);
    return out;
}

/// Stacks same-shaped images into an [N,C,H,W] tensor.
template <class T>
ad::Tensor<T> to_tensor(const std::vector<Image>& batch) {
    if (batch.empty()) throw std::invalid_argument("to_tensor: empty batch");
    const auto& f = batch.front();
    std::vector<T> v;
    v.reserve(batch.size() * f.data.size());
    for (const auto& im : batch) {
        if (!im.same_shape(f)) throw std::invalid_argument("to_tensor: images differ in shape");
        v.insert(v.end(), im.data.begin(), im.data.end());
    }
    return ad::Tensor<T>({batch.size(), f.channels, f.height, f.width}, std::move(v));
}

template <class T>
ad::Tensor<T> to_tensor(const Image& img) {
    return to_tensor<T>(std::vector<Image>{img});
}

template <class T>
Image to_image(const ad::Tensor<T>& t, std::size_t index = 0) {
    if (t.ndim() != 4) throw std::invalid_argument("to_image: expected [N,C,H,W], got " + ad::shape_str(t.shape()));
    Image out(t.dim(1), t.dim(2), t.dim(3));
    const auto off = index * out.data.size();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = static_cast<float>(t.data()[off + i]);
    return out;
}

inline std::uint8_t to_u8(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

// ---------------------------------------------------------------------------
// PNG I/O (8-bit). Gray and RGB are kept; alpha is dropped.

inline Image read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw std::runtime_error("read_png: " + path.string() + ": " + img.message);
    const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
    img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    const std::size_t c = color ? 3 : 1;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw std::runtime_error("read_png: " + path.string() + ": " + msg);
    }
    Image out(c, img.height, img.width);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
                out.at(ch, y, x) = static_cast<float>(buf[(y * out.width + x) * c + ch]) / 255.f;
    return out;
}

inline void write_png(const std::filesystem::path& path, const Image& im) {
    if (im.channels != 1 && im.channels != 3)
        throw std::invalid_argument("write_png: unsupported channel count " + std::to_string(im.channels));
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(im.width);
    img.height = static_cast<png_uint_32>(im.height);
    img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(im.channels * im.height * im.width);
    for (std::size_t y = 0; y < im.height; ++y)
        for (std::size_t x = 0; x < im.width; ++x)
            for (std::size_t ch = 0; ch < im.channels; ++ch)
                buf[(y * im.width + x) * im.channels + ch] = to_u8(im.at(ch, y, x));
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("write_png: " + path.string() + ": " + img.message);
}

/// Round-trips through 8 bits, matching what a PNG write/read would produce.
inline Image quantize_8bit(const Image& im) {
    Image out = im;
    for (auto& v : out.data) v = static_cast<float>(to_u8(v)) / 255.f;
    return out;
}

/// PNG files in a directory, sorted by file name.
inline std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (e.is_regular_file() && ext == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace femasr
