// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "femasr/core/binio.hpp"
#include "femasr/models.hpp"
#include "femasr/train/adam.hpp"

namespace femasr {

using Real = float;

struct LossRecord {
    std::uint64_t step = 0;
    std::string term;
    double value = 0;
};

/// Everything training needs to continue: networks, codebook, optimizer
/// moments, step counter, master seed and loss history.
///
/// Parameter name prefixes: "E." encoder, "G." decoder, "CB." codebook,
/// "S." semantic 1x1 conv (Stage I only), "D." discriminator,
/// "El." LR encoder including its shortcut blocks.
struct TrainState {
    int stage = 1;
    ModelConfig model;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;

    Encoder<Real> encoder;
    Decoder<Real> decoder;
    Codebook<Real> codebook;
    ad::Layer<Real> semantic;
    Discriminator<Real> disc;
    LrEncoder<Real> lr_encoder;

    std::map<std::string, AdamMoments<Real>> moments;
    std::vector<LossRecord> history;
    /// Stage I: code usage counts since the last dead-code restart.
    std::vector<Real> code_usage;

    /// Fresh Stage-I state; every component is seeded from `seed`.
    static TrainState create(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        TrainState s;
        s.model = cfg;
        s.seed = seed;
        s.encoder = Encoder<Real>(cfg, derive_seed(seed, {1}));
        s.decoder = Decoder<Real>(cfg, derive_seed(seed, {2}));
        s.codebook = Codebook<Real>(cfg.codebook_size, cfg.n_z, derive_seed(seed, {3}));
        Rng srng(derive_seed(seed, {4}));
        s.semantic = ad::Layer<Real>(LayerSpec::conv("semantic", cfg.n_z, 2 * cfg.proxy_channels, 1), srng);
        s.disc = Discriminator<Real>(cfg, derive_seed(seed, {5}));
        s.lr_encoder = LrEncoder<Real>(cfg, derive_seed(seed, {6}));
        return s;
    }

    NamedParams<Real> params() const {
        NamedParams<Real> out = encoder.params();
        for (auto& p : decoder.params()) out.push_back(p);
        out.emplace_back("CB.codes", codebook.codes());
        for (const auto& [n, t] : semantic.params) out.emplace_back("S." + n, t);
        for (auto& p : disc.params()) out.push_back(p);
        for (auto& p : lr_encoder.params()) out.push_back(p);
        return out;
    }

    NamedParams<Real> params_with_prefix(const std::string& prefix) const {
        NamedParams<Real> out;
        for (auto& p : params())
            if (p.first.rfind(prefix, 0) == 0) out.push_back(p);
        return out;
    }

    /// Groups updated by the optimizer in the current stage.
    std::vector<std::string> generator_groups() const {
        if (stage == 1) return {"E.", "G.", "CB.", "S."};
        return {"El."};
    }

    /// Groups held fixed in Stage II: the prior and its encoder.
    bool is_frozen(const std::string& name) const {
        if (stage != 2) return false;
        for (const char* p : {"E.", "G.", "CB.", "S."})
            if (name.rfind(p, 0) == 0) return true;
        return false;
    }

    void record(const std::string& term, double value) { history.push_back({step, term, value}); }
};

/// FNV-1a over the float bytes of every parameter whose name starts with
/// one of `prefixes`, in name order.
inline std::uint64_t parameter_hash(const TrainState& s, const std::vector<std::string>& prefixes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : s.params()) {
        bool match = false;
        for (const auto& p : prefixes) match = match || name.rfind(p, 0) == 0;
        if (!match) continue;
        h = binio::fnv1a(name.data(), name.size(), h);
        h = binio::fnv1a(t.data().data(), t.numel() * sizeof(Real), h);
    }
    return h;
}

}  // namespace femasr
