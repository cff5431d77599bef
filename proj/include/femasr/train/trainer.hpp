// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "femasr/core/image.hpp"
#include "femasr/degrade.hpp"
#include "femasr/losses.hpp"
#include "femasr/models.hpp"
#include "femasr/train/adam.hpp"
#include "femasr/train/checkpoint.hpp"
#include "femasr/train/state.hpp"

namespace femasr {

struct TrainOptions {
    /// Target step count; a resumed state continues until it is reached.
    std::size_t steps = 2000;
    std::size_t batch = 16;
    /// Stage II: HR crop side for online pair synthesis.
    std::size_t hr_crop = 32;
    bool flip = true;
    /// Adversarial terms are active from this step on (0 = from the start).
    std::size_t adv_start = 0;
    bool use_shortcuts = true;
    double clip_norm = 10.0;
    double divergence_limit = 1e6;
    std::size_t checkpoint_every = 0;
    std::size_t log_every = 0;
    /// Stage I: every this many steps, codes unused since the previous
    /// restart are re-seeded from current encoder outputs (0 = off).
    std::size_t restart_every = 10;
    /// The restart check also waits until this many tokens per code have
    /// been assigned, so large codebooks get a proportionally longer window.
    std::size_t restart_min_tokens = 20;
    /// Root of checkpoints/ and logs/; empty disables all file output.
    std::string out_dir;

    void validate() const {
        if (batch == 0) throw std::invalid_argument("TrainOptions: batch must be >= 1");
        if (!(clip_norm > 0)) throw std::invalid_argument("TrainOptions: clip_norm must be > 0");
        if (!(divergence_limit > 0)) throw std::invalid_argument("TrainOptions: divergence_limit must be > 0");
    }
};

inline void bind_config(ConfigBinder& b, TrainOptions& o, const std::string& p = "train.") {
    b.bind(p + "steps", o.steps);
    b.bind(p + "batch", o.batch);
    b.bind(p + "hr_crop", o.hr_crop);
    b.bind(p + "flip", o.flip);
    b.bind(p + "adv_start", o.adv_start);
    b.bind(p + "use_shortcuts", o.use_shortcuts);
    b.bind(p + "clip_norm", o.clip_norm);
    b.bind(p + "divergence_limit", o.divergence_limit);
    b.bind(p + "checkpoint_every", o.checkpoint_every);
    b.bind(p + "log_every", o.log_every);
    b.bind(p + "restart_every", o.restart_every);
    b.bind(p + "restart_min_tokens", o.restart_min_tokens);
}

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using StepLosses = std::map<std::string, double>;

/// Shared machinery of both training stages.
class Trainer {
public:
    Trainer(TrainState& state, TrainOptions opts, LossWeights weights, AdamConfig adam, std::ostream* log = nullptr)
        : s_(state), opts_(std::move(opts)), w_(weights), adam_(adam), log_(log), phi_(state.model) {
        opts_.validate();
        w_.validate();
        adam_.validate();
        if (!opts_.out_dir.empty()) {
            std::filesystem::create_directories(std::filesystem::path(opts_.out_dir) / "checkpoints");
            std::filesystem::create_directories(std::filesystem::path(opts_.out_dir) / "logs");
            const auto csv = std::filesystem::path(opts_.out_dir) / "logs" /
                             ("loss_stage" + std::to_string(s_.stage) + ".csv");
            const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
            csv_.open(csv, std::ios::app);
            if (fresh) csv_ << "step,term,value\n";
        }
    }

    const TrainOptions& options() const { return opts_; }
    const ProxyFeatures<Real>& proxy() const { return phi_; }

    // -----------------------------------------------------------------------
    // Stage I: reconstruction of HR patches through the codebook.

    StepLosses stage1_step(const std::vector<Image>& data) {
        if (s_.stage != 1) throw std::logic_error("stage1_step on a Stage-II state");
        const auto y = to_tensor<Real>(sample_batch(data, 0x51));
        const bool adv = adversarial_active();

        const auto zhat = s_.encoder(y);
        const auto q = quantize(zhat, s_.codebook);
        const auto z = straight_through(q.quantized, zhat);
        const auto rec = s_.decoder(z);

        const auto terms = codebook_terms(zhat, q.quantized);
        const auto l1 = ad::l1(rec, y);
        std::vector<std::pair<std::string, ad::Tensor<Real>>> parts;
        parts.emplace_back("l1", l1);
        parts.emplace_back("codebook", terms.codebook);
        parts.emplace_back("commitment", ad::scale(terms.commitment, static_cast<Real>(w_.beta)));
        if (w_.lambda_per != 0)
            parts.emplace_back("perceptual", ad::scale(perceptual(rec, y), static_cast<Real>(w_.lambda_per)));
        if (w_.gamma != 0) {
            const auto target = semantic_target(y, phi_, zhat.dim(2));
            parts.emplace_back("semantic", semantic_reg(q.quantized, target, s_.semantic, w_));
        }
        if (adv) parts.emplace_back("g_adv", generator_adv_loss(s_.disc.evaluate(rec), w_.lambda_adv));

        StepLosses out = finish_generator_step(parts, s_.generator_groups());
        if (adv) out["d_loss"] = discriminator_step(y, rec);
        const auto counts = usage_histogram(q.indices, s_.codebook.size());
        out["perplexity"] = perplexity(counts);
        if (opts_.restart_every) out["restarted"] = static_cast<double>(track_usage(counts, zhat));
        commit(out);
        return out;
    }

    // -----------------------------------------------------------------------
    // Stage II: LR encoder trained against the frozen prior.

    StepLosses stage2_step(const std::vector<Image>& hr_data, const DegradationConfig& dcfg) {
        if (s_.stage != 2) throw std::logic_error("stage2_step on a Stage-I state");
        const auto pairs = sample_pairs(hr_data, dcfg);
        const auto y = to_tensor<Real>(pairs.first);
        const auto x = to_tensor<Real>(pairs.second);
        const bool adv = adversarial_active();

        // Ground-truth codes from the frozen encoder and codebook.
        const auto z_gt = ad::stop_gradient(quantize(s_.encoder(y), s_.codebook).quantized);
        const auto fwd = sr_forward(x, s_.lr_encoder, s_.codebook, s_.decoder, opts_.use_shortcuts);
        if (fwd.output.shape() != y.shape())
            throw std::invalid_argument("stage2: SR output " + ad::shape_str(fwd.output.shape()) +
                                        " does not match HR " + ad::shape_str(y.shape()));

        std::vector<std::pair<std::string, ad::Tensor<Real>>> parts;
        parts.emplace_back("fema", fema_loss(fwd.encoding.zhat, z_gt, w_));
        const auto per = w_.lambda_per != 0 ? perceptual(fwd.output, y) : ad::Tensor<Real>();
        parts.emplace_back("rec", rec_loss(fwd.output, y, per, w_));
        if (adv) parts.emplace_back("g_adv", generator_adv_loss(s_.disc.evaluate(fwd.output), w_.lambda_adv));

        StepLosses out = finish_generator_step(parts, s_.generator_groups());
        out["l1"] = ad::l1(fwd.output, y).item();
        if (adv) out["d_loss"] = discriminator_step(y, fwd.output);
        commit(out);
        return out;
    }

    /// Writes checkpoints/<name>.ckpt under out_dir; no-op without out_dir.
    void checkpoint(const std::string& name) const {
        if (opts_.out_dir.empty()) return;
        save_checkpoint(s_, std::filesystem::path(opts_.out_dir) / "checkpoints" / (name + ".ckpt"));
    }

    void after_step() {
        if (opts_.checkpoint_every && s_.step % opts_.checkpoint_every == 0) {
            std::ostringstream n;
            n << "stage" << s_.stage << "_step" << std::setw(7) << std::setfill('0') << s_.step;
            checkpoint(n.str());
            checkpoint("latest");
        }
    }

private:
    bool adversarial_active() const { return w_.lambda_adv != 0 && s_.step >= opts_.adv_start; }

    ad::Tensor<Real> perceptual(const ad::Tensor<Real>& a, const ad::Tensor<Real>& b) const {
        auto fb = phi_(b);
        for (auto& f : fb) f = ad::stop_gradient(f);
        return proxy_distance(phi_(a), fb);
    }

    Rng step_rng(std::uint64_t tag) const { return Rng(derive_seed(s_.seed, {0x57E9, s_.step, tag})); }

    std::vector<Image> sample_batch(const std::vector<Image>& data, std::uint64_t tag) const {
        if (data.empty()) throw std::invalid_argument("training data is empty");
        Rng rng = step_rng(tag);
        std::vector<Image> batch;
        for (std::size_t b = 0; b < opts_.batch; ++b) {
            const auto& im = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
            const bool flip = rng.uniform() < 0.5;
            batch.push_back(opts_.flip && flip ? im.flip_horizontal() : im);
        }
        return batch;
    }

    std::pair<std::vector<Image>, std::vector<Image>> sample_pairs(const std::vector<Image>& data,
                                                                   const DegradationConfig& dcfg) const {
        if (data.empty()) throw std::invalid_argument("training data is empty");
        if (dcfg.scale != s_.model.sr_scale)
            throw std::invalid_argument("stage2: degradation scale " + std::to_string(dcfg.scale) +
                                        " differs from model sr_scale " + std::to_string(s_.model.sr_scale));
        Rng rng = step_rng(0x52);
        std::pair<std::vector<Image>, std::vector<Image>> out;
        const std::size_t c = opts_.hr_crop;
        for (std::size_t b = 0; b < opts_.batch; ++b) {
            const auto& im = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
            if (im.height < c || im.width < c)
                throw std::invalid_argument("stage2: training image smaller than hr_crop " + std::to_string(c));
            const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(im.height - c)));
            const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(im.width - c)));
            Image hr = im.crop(y0, x0, c, c);
            if (opts_.flip && rng.uniform() < 0.5) hr = hr.flip_horizontal();
            const auto item_seed = rng.next_u64();
            out.second.push_back(degrade(hr, dcfg, item_seed));
            out.first.push_back(std::move(hr));
        }
        return out;
    }

    std::size_t track_usage(const std::vector<std::size_t>& counts, const ad::Tensor<Real>& zhat) {
        const std::size_t k = s_.codebook.size();
        if (s_.code_usage.size() != k) s_.code_usage.assign(k, Real(0));
        for (std::size_t i = 0; i < k; ++i) s_.code_usage[i] += static_cast<Real>(counts[i]);
        if ((s_.step + 1) % opts_.restart_every != 0) return 0;
        double seen = 0;
        for (Real u : s_.code_usage) seen += u;
        if (seen < static_cast<double>(opts_.restart_min_tokens * k)) return 0;
        std::vector<std::size_t> usage(k);
        for (std::size_t i = 0; i < k; ++i) usage[i] = static_cast<std::size_t>(s_.code_usage[i]);
        // Encoder outputs as [positions, n_z] rows.
        const std::size_t n = zhat.dim(0), c = zhat.dim(1), hw = zhat.dim(2) * zhat.dim(3);
        std::vector<Real> rows(n * hw * c);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) rows[(b * hw + p) * c + ch] = zhat.data()[(b * c + ch) * hw + p];
        Rng rng = step_rng(0xDEAD);
        const auto replaced = restart_dead_codes<Real>(s_.codebook, usage, rows, rng);
        if (auto it = s_.moments.find("CB.codes"); it != s_.moments.end())
            for (auto r : replaced)
                for (std::size_t d = 0; d < c; ++d) it->second.m[r * c + d] = it->second.v[r * c + d] = Real(0);
        s_.code_usage.assign(k, Real(0));
        return replaced.size();
    }

    void check_finite(const std::string& what, double v) {
        if (std::isfinite(v) && std::abs(v) <= opts_.divergence_limit) return;
        checkpoint("last_good");
        std::ostringstream os;
        os << "training diverged at step " << s_.step << ": " << what << " = " << v;
        if (!opts_.out_dir.empty()) os << " (last good state saved to checkpoints/last_good.ckpt)";
        throw TrainingDiverged(os.str());
    }

    StepLosses finish_generator_step(const std::vector<std::pair<std::string, ad::Tensor<Real>>>& parts,
                                     const std::vector<std::string>& groups) {
        StepLosses out;
        for (const auto& [n, t] : parts) {
            out[n] = t.item();
            check_finite(n, out[n]);
        }
        const auto total = total_loss_stage2(parts);
        out["total"] = total.item();
        check_finite("total", out["total"]);
        auto grads = ad::backward(total);
        apply(grads, groups);
        return out;
    }

    double discriminator_step(const ad::Tensor<Real>& real, const ad::Tensor<Real>& fake) {
        s_.disc.power_iteration();
        const auto loss = discriminator_hinge_loss(s_.disc.evaluate(real), s_.disc.evaluate(ad::stop_gradient(fake)));
        const double v = loss.item();
        check_finite("d_loss", v);
        auto grads = ad::backward(loss);
        apply(grads, {"D."});
        return v;
    }

    /// Clipped Adam update of every non-frozen parameter in `groups`.
    void apply(ad::Gradients<Real>& grads, const std::vector<std::string>& groups) {
        std::vector<std::pair<std::string, ad::Tensor<Real>>> targets;
        for (auto& [name, t] : s_.params()) {
            if (s_.is_frozen(name)) continue;
            for (const auto& g : groups)
                if (name.rfind(g, 0) == 0) {
                    targets.emplace_back(name, t);
                    break;
                }
        }
        std::vector<std::vector<Real>> zeros;
        zeros.reserve(targets.size());
        std::vector<std::vector<Real>*> gptr;
        for (auto& [name, t] : targets) {
            auto* g = grads.find(t);
            if (!g) {
                zeros.emplace_back(t.numel(), Real(0));
                g = &zeros.back();
            }
            for (std::size_t i = 0; i < g->size(); ++i)
                if (!std::isfinite(static_cast<double>((*g)[i]))) {
                    checkpoint("last_good");
                    throw NonFiniteGradient("non-finite gradient in '" + name + "' at step " +
                                            std::to_string(s_.step) + "; update rejected");
                }
            gptr.push_back(g);
        }
        clip_grad_norm(gptr, opts_.clip_norm);
        for (std::size_t i = 0; i < targets.size(); ++i) {
            auto& [name, t] = targets[i];
            auto it = s_.moments.find(name);
            if (it == s_.moments.end()) it = s_.moments.emplace(name, AdamMoments<Real>(t.numel())).first;
            adam_step<Real>(t.mutable_data(), *gptr[i], it->second, s_.step + 1, adam_, name);
        }
    }

    void commit(const StepLosses& losses) {
        for (const auto& [n, v] : losses) {
            s_.record(n, v);
            if (csv_.is_open()) csv_ << s_.step << ',' << n << ',' << std::setprecision(9) << v << '\n';
        }
        if (log_ && opts_.log_every && s_.step % opts_.log_every == 0) {
            *log_ << "stage" << s_.stage << " step " << s_.step;
            for (const auto& [n, v] : losses) *log_ << ' ' << n << '=' << std::setprecision(5) << v;
            *log_ << '\n';
        }
        ++s_.step;
    }

    TrainState& s_;
    TrainOptions opts_;
    LossWeights w_;
    AdamConfig adam_;
    std::ostream* log_;
    ProxyFeatures<Real> phi_;
    std::ofstream csv_;
};

/// Runs Stage I until state.step reaches opts.steps.
inline void train_stage1(TrainState& state, const std::vector<Image>& data, const TrainOptions& opts,
                         const LossWeights& w, const AdamConfig& adam, std::ostream* log = nullptr) {
    Trainer t(state, opts, w, adam, log);
    while (state.step < opts.steps) {
        t.stage1_step(data);
        t.after_step();
    }
    t.checkpoint("stage1_final");
}

/// Stage-II state derived from a Stage-I state: the prior (E, G, codebook)
/// is copied, the LR encoder and discriminator are freshly initialized from
/// `seed`, and optimizer moments and history start empty. Architecture
/// fields of the prior must agree with `requested`.
inline TrainState begin_stage2(const TrainState& stage1, const ModelConfig& requested, std::uint64_t seed) {
    const auto& a = stage1.model;
    const auto& b = requested;
    std::ostringstream diff;
    auto cmp = [&](const char* name, auto x, auto y) {
        if (x != y) diff << ' ' << name << " (checkpoint " << x << ", requested " << y << ")";
    };
    cmp("codebook_size", a.codebook_size, b.codebook_size);
    cmp("n_z", a.n_z, b.n_z);
    cmp("in_channels", a.in_channels, b.in_channels);
    cmp("base_channels", a.base_channels, b.base_channels);
    cmp("res_blocks", a.res_blocks, b.res_blocks);
    cmp("kernel_size", a.kernel_size, b.kernel_size);
    cmp("max_groups", a.max_groups, b.max_groups);
    cmp("linear_decoder", a.linear_decoder, b.linear_decoder);
    if (a.channel_mult != b.channel_mult) diff << " channel_mult";
    if (!diff.str().empty()) throw CheckpointError("Stage-I checkpoint incompatible with requested model:" + diff.str());

    TrainState s = deep_copy(stage1);
    s.model = requested;
    s.model.proxy_seed = a.proxy_seed;
    s.model.proxy_channels = a.proxy_channels;
    s.model.validate();
    s.stage = 2;
    s.seed = seed;
    s.step = 0;
    s.moments.clear();
    s.history.clear();
    s.lr_encoder = LrEncoder<Real>(s.model, derive_seed(seed, {6}));
    s.disc = Discriminator<Real>(s.model, derive_seed(seed, {7}));
    return s;
}

/// Runs Stage II until state.step reaches opts.steps.
inline void train_stage2(TrainState& state, const std::vector<Image>& hr_data, const DegradationConfig& dcfg,
                         const TrainOptions& opts, const LossWeights& w, const AdamConfig& adam,
                         std::ostream* log = nullptr) {
    if (state.stage != 2) throw std::invalid_argument("train_stage2: state is not a Stage-II state");
    Trainer t(state, opts, w, adam, log);
    while (state.step < opts.steps) {
        t.stage2_step(hr_data, dcfg);
        t.after_step();
    }
    t.checkpoint("stage2_final");
}

/// Mean of `term` over history records with step in [begin, end).
inline double history_mean(const TrainState& s, const std::string& term, std::uint64_t begin, std::uint64_t end) {
    double acc = 0;
    std::size_t n = 0;
    for (const auto& r : s.history)
        if (r.term == term && r.step >= begin && r.step < end) {
            acc += r.value;
            ++n;
        }
    if (n == 0) throw std::invalid_argument("history_mean: no '" + term + "' records in range");
    return acc / static_cast<double>(n);
}

/// Stage-II model output for one LR image. Sides that the LR encoder
/// cannot take are edge-padded and the output cropped back.
inline Image super_resolve(const TrainState& s, const Image& lr, bool use_shortcuts = true) {
    if (s.stage != 2) throw std::invalid_argument("super_resolve: checkpoint is not a Stage-II checkpoint");
    const std::size_t m = s.lr_encoder.required_multiple();
    const std::size_t ph = (lr.height + m - 1) / m * m, pw = (lr.width + m - 1) / m * m;
    Image padded(lr.channels, ph, pw);
    for (std::size_t c = 0; c < lr.channels; ++c)
        for (std::size_t y = 0; y < ph; ++y)
            for (std::size_t x = 0; x < pw; ++x)
                padded.at(c, y, x) = lr.at(c, std::min(y, lr.height - 1), std::min(x, lr.width - 1));
    const auto x = to_tensor<Real>(padded);
    auto out = to_image(sr_forward(x, s.lr_encoder, s.codebook, s.decoder, use_shortcuts).output);
    const auto f = s.model.sr_scale;
    out = out.crop(0, 0, lr.height * f, lr.width * f);
    out.clip();
    return out;
}

/// Stage-I reconstruction of one HR image through the codebook.
inline Image reconstruct(const TrainState& s, const Image& hr) {
    const auto y = to_tensor<Real>(hr);
    const auto q = quantize(s.encoder(y), s.codebook);
    auto out = to_image(s.decoder(q.quantized));
    out.clip();
    return out;
}

/// Mean absolute reconstruction error over `images` (clipped outputs).
inline double reconstruction_l1(const TrainState& s, const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("reconstruction_l1: no images");
    double acc = 0;
    std::size_t n = 0;
    for (const auto& img : images) {
        const auto r = reconstruct(s, img);
        for (std::size_t i = 0; i < r.data.size(); ++i) acc += std::abs(static_cast<double>(r.data[i]) - img.data[i]);
        n += r.data.size();
    }
    return acc / static_cast<double>(n);
}

}  // namespace femasr
