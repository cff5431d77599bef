// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "femasr/degrade.hpp"
#include "femasr/losses.hpp"
#include "femasr/models.hpp"
#include "femasr/train/adam.hpp"

namespace femasr {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Ordered "key = value" text. Blank lines and '#' comments are ignored.
using KvList = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline KvList parse_kv_text(std::istream& is, const std::string& origin = "config") {
    KvList out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

inline KvList load_kv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return parse_kv_text(is, path);
}

/// Maps dotted keys onto struct fields for parsing and echoing.
class ConfigBinder {
public:
    template <class V>
    void bind(const std::string& key, V& field) {
        Entry e;
        e.get = [&field] { return format(field); };
        e.set = [&field, key](const std::string& text) { parse(text, field, key); };
        order_.push_back(key);
        entries_[key] = std::move(e);
    }

    bool has(const std::string& key) const { return entries_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second.set(value);
    }

    void apply(const KvList& kv) {
        for (const auto& [k, v] : kv) set(k, v);
    }

    std::string dump() const {
        std::ostringstream os;
        for (const auto& k : order_) os << k << " = " << entries_.at(k).get() << '\n';
        return os.str();
    }

    std::vector<std::string> keys() const { return order_; }

private:
    struct Entry {
        std::function<std::string()> get;
        std::function<void(const std::string&)> set;
    };

    static std::string format(const std::string& v) { return v; }
    static std::string format(bool v) { return v ? "true" : "false"; }
    static std::string format(double v) {
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    }
    template <class I>
        requires std::is_integral_v<I>
    static std::string format(I v) {
        return std::to_string(v);
    }
    static std::string format(const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    }
    static std::string format(const std::vector<ResizeMode>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += std::string(i ? "," : "") + to_string(v[i]);
        return s;
    }

    [[noreturn]] static void bad(const std::string& key, const std::string& text, const char* want) {
        throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as " + want);
    }
    static void parse(const std::string& t, std::string& out, const std::string&) { out = t; }
    static void parse(const std::string& t, bool& out, const std::string& key) {
        if (t == "true" || t == "1") out = true;
        else if (t == "false" || t == "0") out = false;
        else bad(key, t, "bool");
    }
    static void parse(const std::string& t, double& out, const std::string& key) {
        std::size_t pos = 0;
        try {
            out = std::stod(t, &pos);
        } catch (...) {
            bad(key, t, "number");
        }
        if (pos != t.size()) bad(key, t, "number");
    }
    template <class I>
        requires std::is_integral_v<I>
    static void parse(const std::string& t, I& out, const std::string& key) {
        std::size_t pos = 0;
        try {
            if constexpr (std::is_unsigned_v<I>) {
                if (t.empty() || t[0] == '-') bad(key, t, "non-negative integer");
                out = static_cast<I>(std::stoull(t, &pos));
            } else {
                out = static_cast<I>(std::stoll(t, &pos));
            }
        } catch (const ConfigError&) {
            throw;
        } catch (...) {
            bad(key, t, "integer");
        }
        if (pos != t.size()) bad(key, t, "integer");
    }
    static void parse(const std::string& t, std::vector<std::size_t>& out, const std::string& key) {
        out.clear();
        std::stringstream ss(t);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            std::size_t v = 0;
            parse(trim(tok), v, key);
            out.push_back(v);
        }
        if (out.empty()) bad(key, t, "comma-separated list");
    }
    static void parse(const std::string& t, std::vector<ResizeMode>& out, const std::string& key) {
        out.clear();
        std::stringstream ss(t);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                out.push_back(parse_resize_mode(trim(tok)));
            } catch (const std::invalid_argument&) {
                bad(key, t, "list of nearest|bilinear|bicubic");
            }
        }
    }

    std::vector<std::string> order_;
    std::map<std::string, Entry> entries_;
};

inline void bind_config(ConfigBinder& b, ModelConfig& c, const std::string& p = "model.") {
    b.bind(p + "in_channels", c.in_channels);
    b.bind(p + "base_channels", c.base_channels);
    b.bind(p + "channel_mult", c.channel_mult);
    b.bind(p + "res_blocks", c.res_blocks);
    b.bind(p + "n_z", c.n_z);
    b.bind(p + "codebook_size", c.codebook_size);
    b.bind(p + "kernel_size", c.kernel_size);
    b.bind(p + "max_groups", c.max_groups);
    b.bind(p + "linear_decoder", c.linear_decoder);
    b.bind(p + "sr_scale", c.sr_scale);
    b.bind(p + "lr_channels", c.lr_channels);
    b.bind(p + "lr_blocks", c.lr_blocks);
    b.bind(p + "disc_channels", c.disc_channels);
    b.bind(p + "disc_depth", c.disc_depth);
    b.bind(p + "proxy_channels", c.proxy_channels);
    b.bind(p + "proxy_seed", c.proxy_seed);
}

inline void bind_config(ConfigBinder& b, DegradationConfig& c, const std::string& p = "degrade.") {
    b.bind(p + "scale", c.scale);
    b.bind(p + "kernel_min", c.kernel_min);
    b.bind(p + "kernel_max", c.kernel_max);
    b.bind(p + "sigma_min", c.sigma_min);
    b.bind(p + "sigma_max", c.sigma_max);
    b.bind(p + "resize_min", c.resize_min);
    b.bind(p + "resize_max", c.resize_max);
    b.bind(p + "resize_modes", c.resize_modes);
    b.bind(p + "noise_min", c.noise_min);
    b.bind(p + "noise_max", c.noise_max);
    b.bind(p + "quality_min", c.quality_min);
    b.bind(p + "quality_max", c.quality_max);
    b.bind(p + "shuffle_order", c.shuffle_order);
    b.bind(p + "blur", c.blur);
    b.bind(p + "intermediate_resize", c.intermediate_resize);
    b.bind(p + "noise", c.noise);
    b.bind(p + "jpeg", c.jpeg);
}

inline void bind_config(ConfigBinder& b, LossWeights& c, const std::string& p = "loss.") {
    b.bind(p + "beta", c.beta);
    b.bind(p + "gamma", c.gamma);
    b.bind(p + "alpha", c.alpha);
    b.bind(p + "lambda_l1", c.lambda_l1);
    b.bind(p + "lambda_per", c.lambda_per);
    b.bind(p + "lambda_adv", c.lambda_adv);
}

inline void bind_config(ConfigBinder& b, AdamConfig& c, const std::string& p = "adam.") {
    b.bind(p + "lr", c.lr);
    b.bind(p + "beta1", c.beta1);
    b.bind(p + "beta2", c.beta2);
    b.bind(p + "eps", c.eps);
}

/// Canonical text of a ModelConfig, used inside checkpoints.
inline std::string model_config_text(ModelConfig c) {
    ConfigBinder b;
    bind_config(b, c);
    return b.dump();
}

inline ModelConfig model_config_from_text(const std::string& text) {
    ModelConfig c;
    ConfigBinder b;
    bind_config(b, c);
    std::istringstream is(text);
    b.apply(parse_kv_text(is, "checkpoint model config"));
    return c;
}

}  // namespace femasr
