#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmx/error.hpp"
#include "mmx/model.hpp"

namespace mmx {

// Flat key=value run configuration. Serialization emits keys in one
// canonical order so parse -> serialize -> parse is a fixed point; parsing
// rejects unknown keys outright.
struct RunConfig {
    ModelConfig model;

    std::uint64_t seed = 1;
    std::size_t batch_size = 16;
    std::uint64_t steps = 1000;
    std::uint64_t eval_interval = 100;
    std::size_t top_k = 10;
    std::uint64_t warmup = 4000;
    double init_lr = 0.2;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-9;
    double clip_norm = 1.0;
    std::size_t beam = 1;
    std::size_t jobs = 1;
    std::size_t eval_max_len = 32;

    std::string train_path, val_path, test_path, features_path, vocab_path, out_dir;

    static const std::vector<std::string>& key_order() {
        static const std::vector<std::string> keys = {
            "n_layers",   "d",         "d_ff",          "h",           "vocab_size", "max_len",
            "image_positions", "image_dim", "pooled_dim", "imag_hidden", "alpha",      "scale_mode",
            "imag_pool",  "multimodal", "dropout",      "lambda",      "ln_eps",     "seed",
            "batch_size", "steps",     "eval_interval", "top_k",       "warmup",     "init_lr",
            "beta1",      "beta2",     "epsilon",       "clip_norm",   "beam",       "jobs",
            "eval_max_len", "train_path", "val_path",   "test_path",   "features_path", "vocab_path",
            "out_dir"};
        return keys;
    }

    std::string get(const std::string& key) const {
        char buf[64];
        auto num = [&](double v) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        auto uns = [&](std::uint64_t v) { return std::to_string(v); };
        if (key == "n_layers") return uns(model.n_layers);
        if (key == "d") return uns(model.d);
        if (key == "d_ff") return uns(model.d_ff);
        if (key == "h") return uns(model.h);
        if (key == "vocab_size") return uns(model.vocab_size);
        if (key == "max_len") return uns(model.max_len);
        if (key == "image_positions") return uns(model.image_positions);
        if (key == "image_dim") return uns(model.image_dim);
        if (key == "pooled_dim") return uns(model.pooled_dim);
        if (key == "imag_hidden") return uns(model.imag_hidden);
        if (key == "alpha") return num(model.margin_alpha);
        if (key == "scale_mode") return model.scale_mode == ScaleMode::per_head ? "per_head" : "model_dim";
        if (key == "imag_pool") return model.imag_pool == ImagPool::sum ? "sum" : "mean";
        if (key == "multimodal") return model.multimodal ? "true" : "false";
        if (key == "dropout") return num(model.dropout);
        if (key == "lambda") return num(model.lambda_imag);
        if (key == "ln_eps") return num(model.ln_eps);
        if (key == "seed") return uns(seed);
        if (key == "batch_size") return uns(batch_size);
        if (key == "steps") return uns(steps);
        if (key == "eval_interval") return uns(eval_interval);
        if (key == "top_k") return uns(top_k);
        if (key == "warmup") return uns(warmup);
        if (key == "init_lr") return num(init_lr);
        if (key == "beta1") return num(beta1);
        if (key == "beta2") return num(beta2);
        if (key == "epsilon") return num(epsilon);
        if (key == "clip_norm") return num(clip_norm);
        if (key == "beam") return uns(beam);
        if (key == "jobs") return uns(jobs);
        if (key == "eval_max_len") return uns(eval_max_len);
        if (key == "train_path") return train_path;
        if (key == "val_path") return val_path;
        if (key == "test_path") return test_path;
        if (key == "features_path") return features_path;
        if (key == "vocab_path") return vocab_path;
        if (key == "out_dir") return out_dir;
        throw ConfigError("unknown configuration key `" + key + "`");
    }

    void set(const std::string& key, const std::string& value) {
        auto num = [&] {
            try {
                std::size_t pos = 0;
                const double v = std::stod(value, &pos);
                if (pos != value.size()) throw std::invalid_argument(value);
                return v;
            } catch (const std::exception&) {
                throw ConfigError("key `" + key + "` needs a numeric value, got `" + value + "`");
            }
        };
        auto uns = [&]() -> std::uint64_t {
            try {
                if (value.empty() || value[0] == '-') throw std::invalid_argument(value);
                std::size_t pos = 0;
                const unsigned long long v = std::stoull(value, &pos);
                if (pos != value.size()) throw std::invalid_argument(value);
                return v;
            } catch (const std::exception&) {
                throw ConfigError("key `" + key + "` needs a non-negative integer, got `" + value + "`");
            }
        };
        auto flag = [&]() -> bool {
            if (value == "true") return true;
            if (value == "false") return false;
            throw ConfigError("key `" + key + "` needs true or false, got `" + value + "`");
        };
        if (key == "n_layers") model.n_layers = uns();
        else if (key == "d") model.d = uns();
        else if (key == "d_ff") model.d_ff = uns();
        else if (key == "h") model.h = uns();
        else if (key == "vocab_size") model.vocab_size = uns();
        else if (key == "max_len") model.max_len = uns();
        else if (key == "image_positions") model.image_positions = uns();
        else if (key == "image_dim") model.image_dim = uns();
        else if (key == "pooled_dim") model.pooled_dim = uns();
        else if (key == "imag_hidden") model.imag_hidden = uns();
        else if (key == "alpha") model.margin_alpha = num();
        else if (key == "scale_mode") {
            if (value == "per_head") model.scale_mode = ScaleMode::per_head;
            else if (value == "model_dim") model.scale_mode = ScaleMode::model_dim;
            else throw ConfigError("scale_mode must be per_head or model_dim, got `" + value + "`");
        } else if (key == "imag_pool") {
            if (value == "sum") model.imag_pool = ImagPool::sum;
            else if (value == "mean") model.imag_pool = ImagPool::mean;
            else throw ConfigError("imag_pool must be sum or mean, got `" + value + "`");
        } else if (key == "multimodal") model.multimodal = flag();
        else if (key == "dropout") model.dropout = num();
        else if (key == "lambda") model.lambda_imag = num();
        else if (key == "ln_eps") model.ln_eps = num();
        else if (key == "seed") seed = uns();
        else if (key == "batch_size") batch_size = uns();
        else if (key == "steps") steps = uns();
        else if (key == "eval_interval") eval_interval = uns();
        else if (key == "top_k") top_k = uns();
        else if (key == "warmup") warmup = uns();
        else if (key == "init_lr") init_lr = num();
        else if (key == "beta1") beta1 = num();
        else if (key == "beta2") beta2 = num();
        else if (key == "epsilon") epsilon = num();
        else if (key == "clip_norm") clip_norm = num();
        else if (key == "beam") beam = uns();
        else if (key == "jobs") jobs = uns();
        else if (key == "eval_max_len") eval_max_len = uns();
        else if (key == "train_path") train_path = value;
        else if (key == "val_path") val_path = value;
        else if (key == "test_path") test_path = value;
        else if (key == "features_path") features_path = value;
        else if (key == "vocab_path") vocab_path = value;
        else if (key == "out_dir") out_dir = value;
        else throw ConfigError("unknown configuration key `" + key + "`");
    }

    std::string serialize() const {
        std::string out;
        for (const std::string& key : key_order()) out += key + "=" + get(key) + "\n";
        return out;
    }

    static RunConfig parse(std::istream& in, const std::string& origin) {
        RunConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got `" + line + "`");
            cfg.set(line.substr(0, eq), line.substr(eq + 1));
        }
        return cfg;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open config file " + path.string());
        return parse(in, path.string());
    }

    // --set key=value override, applied after the file (CLI > file > defaults).
    void apply_override(const std::string& assignment) {
        const std::size_t eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got `" + assignment + "`");
        set(assignment.substr(0, eq), assignment.substr(eq + 1));
    }
};

}  // namespace mmx
