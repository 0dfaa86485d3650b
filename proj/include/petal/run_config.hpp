#pragma once

// Plain-text run configuration: [model]/[train]/[task] sections of `key = value`
// lines. The accepted key set is exactly the set emitted by config_echo, so a
// report's echo block parses back to the run that produced it.

#include <cstddef>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "petal/errors.hpp"
#include "petal/trainer.hpp"

namespace petal {

struct RunConfig {
    TrainConfig train;
    SyntheticTaskSpec task;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::size_t parse_count(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("bad integer for key '" + key + "': " + value);
    }
    if (pos != value.size() || value[0] == '-')
        throw ConfigError("bad integer for key '" + key + "': " + value);
    return static_cast<std::size_t>(v);
}

inline double parse_real(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("bad number for key '" + key + "': " + value);
    }
    if (pos != value.size())
        throw ConfigError("bad number for key '" + key + "': " + value);
    return v;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig rc;
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = t.substr(1, t.size() - 2);
            if (section != "model" && section != "train" && section != "task")
                throw ConfigError("unknown section '" + section + "'");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        if (section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
        const auto key = detail::trim(t.substr(0, eq));
        const auto value = detail::trim(t.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        const auto qualified = section + "." + key;
        if (!seen.insert(qualified).second)
            throw ConfigError("duplicate key '" + qualified + "'");

        auto& cfg = rc.train;
        auto& spec = rc.task;
        auto named = [&](auto parse) {
            try {
                return parse(value);
            } catch (const LookupError& e) {
                throw ConfigError(std::string(e.what()) + " for key '" + qualified + "'");
            }
        };
        if (section == "model") {
            if (key == "layers") cfg.model.layers = detail::parse_count(key, value);
            else if (key == "h_t") cfg.model.h_t = detail::parse_count(key, value);
            else if (key == "h_v") cfg.model.h_v = detail::parse_count(key, value);
            else if (key == "heads") cfg.model.heads = detail::parse_count(key, value);
            else if (key == "query_tokens") cfg.model.query_tokens = detail::parse_count(key, value);
            else if (key == "vocab") cfg.model.vocab = detail::parse_count(key, value);
            else if (key == "ffn_mult") cfg.model.ffn_mult = detail::parse_count(key, value);
            else if (key == "rank") cfg.rank = detail::parse_count(key, value);
            else if (key == "d_p") cfg.d_p = detail::parse_count(key, value);
            else if (key == "experts") cfg.experts = detail::parse_count(key, value);
            else if (key == "expert_mid") cfg.expert_mid = detail::parse_count(key, value);
            else if (key == "expert_form") {
                if (value == "bottleneck") cfg.expert_form = ExpertForm::bottleneck;
                else if (value == "affine") cfg.expert_form = ExpertForm::affine;
                else throw ConfigError("unknown expert_form '" + value + "'");
            } else throw ConfigError("unknown key '" + qualified + "'");
        } else if (section == "train") {
            if (key == "method") cfg.method = named(parse_method);
            else if (key == "ablation") cfg.ablation = named(parse_ablation);
            else if (key == "epochs") cfg.epochs = detail::parse_count(key, value);
            else if (key == "batch") cfg.batch = detail::parse_count(key, value);
            else if (key == "lr_start") cfg.lr_start = detail::parse_real(key, value);
            else if (key == "lr_peak") cfg.lr_peak = detail::parse_real(key, value);
            else if (key == "warmup_steps") cfg.warmup_steps = detail::parse_count(key, value);
            else if (key == "beta1") cfg.beta1 = detail::parse_real(key, value);
            else if (key == "beta2") cfg.beta2 = detail::parse_real(key, value);
            else if (key == "weight_decay") cfg.weight_decay = detail::parse_real(key, value);
            else if (key == "clip_norm") cfg.clip_norm = detail::parse_real(key, value);
            else if (key == "mu") cfg.ib.mu = detail::parse_real(key, value);
            else if (key == "eta") cfg.ib.eta = detail::parse_real(key, value);
            else if (key == "ib_estimator") {
                if (value == "contrastive") cfg.ib.estimator = IBEstimator::contrastive_surrogate;
                else if (value == "histogram") cfg.ib.estimator = IBEstimator::histogram_oracle;
                else throw ConfigError("unknown ib_estimator '" + value + "'");
            } else if (key == "ib_bins") cfg.ib.bins = detail::parse_count(key, value);
            else if (key == "ib_temperature") cfg.ib.temperature = detail::parse_real(key, value);
            else if (key == "seed") cfg.seed = detail::parse_count(key, value);
            else throw ConfigError("unknown key '" + qualified + "'");
        } else {
            if (key == "kind") spec.kind = named(parse_task_kind);
            else if (key == "teacher_seed") spec.teacher_seed = detail::parse_count(key, value);
            else if (key == "n_train") spec.n_train = detail::parse_count(key, value);
            else if (key == "n_val") spec.n_val = detail::parse_count(key, value);
            else if (key == "vision_tokens") spec.vision_tokens = detail::parse_count(key, value);
            else if (key == "noise_rate") spec.noise_rate = detail::parse_real(key, value);
            else if (key == "few_shot") spec.few_shot = detail::parse_count(key, value);
            else throw ConfigError("unknown key '" + qualified + "'");
        }
    }
    rc.train.validate();
    rc.task.validate();
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw IoError("cannot read run config: " + path);
    std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse_run_config(text);
}

}  // namespace petal
