// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "femasr/config.hpp"
#include "femasr/core/binio.hpp"
#include "femasr/train/state.hpp"

namespace femasr {

// Layout (all integers little-endian):
//   "FMCK" u32 version u64 config-digest str model-config
//   u32 stage u64 seed u64 step
//   u32 blob-count { str name u32 ndim u32 dims[ndim] f32 data[numel] }
//   u64 history-count { u64 step str term f64 value }
//   "FMCE"
// Blobs hold parameters, spectral-norm vectors ("*.sn_u") and Adam
// moments ("adam.m.<param>", "adam.v.<param>").

constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::uint64_t config_digest(const ModelConfig& c) {
    const auto text = model_config_text(c);
    return binio::fnv1a(text.data(), text.size());
}

namespace detail {

inline void put_blob(std::ostream& os, const std::string& name, const ad::Shape& shape, std::span<const Real> data) {
    binio::put_str(os, name);
    binio::put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) binio::put_u32(os, static_cast<std::uint32_t>(d));
    for (Real v : data) binio::put_f32(os, v);
}

struct Blob {
    ad::Shape shape;
    std::vector<Real> data;
};

}  // namespace detail

inline void save_checkpoint(const TrainState& s, std::ostream& os) {
    os.write("FMCK", 4);
    binio::put_u32(os, kCheckpointVersion);
    binio::put_u64(os, config_digest(s.model));
    binio::put_str(os, model_config_text(s.model));
    binio::put_u32(os, static_cast<std::uint32_t>(s.stage));
    binio::put_u64(os, s.seed);
    binio::put_u64(os, s.step);

    const auto params = s.params();
    const auto sn = s.disc.sn_state();
    std::uint32_t count = static_cast<std::uint32_t>(params.size() + sn.size() + 2 * s.moments.size() +
                                                     (s.code_usage.empty() ? 0 : 1));
    binio::put_u32(os, count);
    for (const auto& [n, t] : params) detail::put_blob(os, n, t.shape(), t.data());
    for (const auto& [n, t] : sn) detail::put_blob(os, n, t.shape(), t.data());
    for (const auto& [n, m] : s.moments) {
        detail::put_blob(os, "adam.m." + n, {m.m.size()}, m.m);
        detail::put_blob(os, "adam.v." + n, {m.v.size()}, m.v);
    }
    if (!s.code_usage.empty()) detail::put_blob(os, "stat.code_usage", {s.code_usage.size()}, s.code_usage);
    binio::put_u64(os, s.history.size());
    for (const auto& r : s.history) {
        binio::put_u64(os, r.step);
        binio::put_str(os, r.term);
        binio::put_f64(os, r.value);
    }
    os.write("FMCE", 4);
}

/// Writes to `path.tmp` then renames, so a crash never leaves a torn file.
inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw CheckpointError("cannot write checkpoint " + tmp);
        save_checkpoint(s, os);
        if (!os) throw CheckpointError("failed writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(std::istream& is) {
    try {
        char magic[4];
        binio::read_exact(is, magic, 4, "checkpoint magic");
        if (std::string(magic, 4) != "FMCK") throw CheckpointError("not a checkpoint (bad magic)");
        const auto version = binio::get_u32(is, "checkpoint version");
        if (version != kCheckpointVersion)
            throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
        const auto digest = binio::get_u64(is, "config digest");
        const auto text = binio::get_str(is, 1 << 16, "model config");
        const ModelConfig cfg = model_config_from_text(text);
        if (config_digest(cfg) != digest) throw CheckpointError("model config digest mismatch");
        const auto stage = binio::get_u32(is, "stage");
        if (stage != 1 && stage != 2) throw CheckpointError("invalid stage " + std::to_string(stage));
        const auto seed = binio::get_u64(is, "seed");
        const auto step = binio::get_u64(is, "step");

        std::map<std::string, detail::Blob> blobs;
        const auto count = binio::get_u32(is, "blob count");
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto name = binio::get_str(is, 4096, "blob name");
            const auto nd = binio::get_u32(is, "blob rank");
            if (nd > 8) throw CheckpointError("blob '" + name + "' has implausible rank");
            detail::Blob b;
            std::uint64_t n = 1;
            for (std::uint32_t d = 0; d < nd; ++d) {
                b.shape.push_back(binio::get_u32(is, "blob dims"));
                n *= b.shape.back();
            }
            if (n > (1ULL << 30)) throw CheckpointError("blob '" + name + "' has implausible size");
            b.data.resize(n);
            for (auto& v : b.data) v = binio::get_f32(is, "blob data");
            blobs.emplace(name, std::move(b));
        }

        TrainState s = TrainState::create(cfg, seed);
        s.stage = static_cast<int>(stage);
        s.step = step;

        std::ostringstream diff;
        auto take = [&](const std::string& name, const ad::Shape& shape) -> const detail::Blob* {
            auto it = blobs.find(name);
            if (it == blobs.end()) {
                diff << "\n  missing: " << name << " " << ad::shape_str(shape);
                return nullptr;
            }
            if (it->second.shape != shape) {
                diff << "\n  shape: " << name << " file " << ad::shape_str(it->second.shape) << " vs model "
                     << ad::shape_str(shape);
                blobs.erase(it);
                return nullptr;
            }
            return &it->second;
        };
        for (auto& [name, t] : s.params()) {
            auto tensor = t;
            if (const auto* b = take(name, tensor.shape())) {
                tensor.mutable_data() = b->data;
                blobs.erase(name);
            }
        }
        const auto sn = s.disc.sn_state();
        for (std::size_t i = 0; i < sn.size(); ++i)
            if (const auto* b = take(sn[i].first, sn[i].second.shape())) {
                s.disc.set_sn_state(i, b->data);
                blobs.erase(sn[i].first);
            }
        if (auto u = blobs.find("stat.code_usage"); u != blobs.end()) {
            if (u->second.data.size() != cfg.codebook_size)
                diff << "\n  shape: stat.code_usage file " << ad::shape_str(u->second.shape) << " vs model ["
                     << cfg.codebook_size << "]";
            else
                s.code_usage = u->second.data;
            blobs.erase(u);
        }
        const auto params = s.params();
        std::map<std::string, std::size_t> sizes;
        for (const auto& [n, t] : params) sizes[n] = t.numel();
        for (auto it = blobs.begin(); it != blobs.end();) {
            const auto& name = it->first;
            if (name.rfind("adam.m.", 0) == 0) {
                const auto pname = name.substr(7);
                auto v = blobs.find("adam.v." + pname);
                auto sz = sizes.find(pname);
                if (v == blobs.end() || sz == sizes.end() || it->second.data.size() != sz->second ||
                    v->second.data.size() != sz->second) {
                    diff << "\n  moments: " << pname << " inconsistent with model";
                    ++it;
                    continue;
                }
                AdamMoments<Real> m;
                m.m = it->second.data;
                m.v = v->second.data;
                s.moments[pname] = std::move(m);
                blobs.erase(v);
                it = blobs.erase(it);
            } else {
                ++it;
            }
        }
        for (const auto& [name, b] : blobs) diff << "\n  unexpected: " << name << " " << ad::shape_str(b.shape);
        if (!diff.str().empty()) throw CheckpointError("checkpoint does not match model schema:" + diff.str());

        const auto hist = binio::get_u64(is, "history count");
        if (hist > (1ULL << 32)) throw CheckpointError("implausible history length");
        s.history.reserve(hist);
        for (std::uint64_t i = 0; i < hist; ++i) {
            LossRecord r;
            r.step = binio::get_u64(is, "history step");
            r.term = binio::get_str(is, 256, "history term");
            r.value = binio::get_f64(is, "history value");
            s.history.push_back(std::move(r));
        }
        char end[4];
        binio::read_exact(is, end, 4, "checkpoint trailer");
        if (std::string(end, 4) != "FMCE") throw CheckpointError("bad checkpoint trailer");
        s.codebook.validate();
        return s;
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
    }
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    return load_checkpoint(is);
}

/// Independent copy sharing no tensors with `s`.
inline TrainState deep_copy(const TrainState& s) {
    std::stringstream ss;
    save_checkpoint(s, ss);
    return load_checkpoint(ss);
}

}  // namespace femasr
