#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "segcal/calibrators.hpp"
#include "segcal/errors.hpp"
#include "segcal/metrics.hpp"
#include "segcal/synth.hpp"
#include "segcal/train.hpp"

namespace segcal {

/// Everything a full cross-validated run needs.
struct RunConfig {
    std::optional<std::filesystem::path> dataset_path;
    SynthConfig synth;
    std::size_t n_subjects = 50;

    std::size_t folds = 5;
    std::vector<Regime> regimes{Regime::CE, Regime::CE_SD, Regime::SD};
    std::vector<Method> methods{kAllMethods.begin(), kAllMethods.end()};
    std::uint64_t seed = 0;
    double calib_fraction = 0.25;
    std::size_t n_bins = kDefaultBins;
    ConfidenceMode mode = ConfidenceMode::PredictionConfidence;
    std::uint64_t min_bin_count = kDefaultMinBinCount;
    double alpha = 0.05;

    TrainConfig train;
    std::size_t pretrain_epochs = 10;
    CalibrationConfig calibration;

    std::filesystem::path output_dir = "out";
    std::size_t threads = 1;

    void validate() const {
        if (regimes.empty()) throw ConfigError("experiment.regimes: at least one regime is required");
        if (methods.empty()) throw ConfigError("experiment.methods: at least one method is required");
        if (folds < 2) throw ConfigError("experiment.folds: need at least 2 folds");
        if (!(calib_fraction > 0.0 && calib_fraction < 1.0)) {
            throw ConfigError("experiment.calib_fraction: must lie in (0,1)");
        }
        if (n_bins == 0) throw ConfigError("experiment.bins: must be >= 1");
        if (dataset_path) {
            if (!std::filesystem::is_directory(*dataset_path)) {
                throw ConfigError("dataset.path: '" + dataset_path->string() + "' does not exist");
            }
        } else {
            synth.validate();
            if (n_subjects < folds) throw ConfigError("dataset.subjects: fewer subjects than folds");
        }
        train.validate();
        calibration.validate();
    }
};

inline Regime parse_regime(const std::string& s) {
    if (s == "CE") return Regime::CE;
    if (s == "CE_SD" || s == "CE-SD") return Regime::CE_SD;
    if (s == "SD") return Regime::SD;
    throw ConfigError("unknown weight regime '" + s + "' (expected CE, CE_SD or SD)");
}

inline Method parse_method(const std::string& s) {
    for (Method m : kAllMethods) {
        if (s == to_string(m)) return m;
    }
    throw ConfigError("unknown method '" + s +
                      "' (expected BASE, PLATT, AUX, FINETUNE, MC_DECODER or MC_CENTER)");
}

inline ConfidenceMode parse_confidence_mode(const std::string& s) {
    if (s == "prediction" || s == "prediction_confidence") return ConfidenceMode::PredictionConfidence;
    if (s == "class" || s == "class_probability") return ConfidenceMode::ClassProbability;
    throw ConfigError("unknown confidence mode '" + s + "'");
}

// ---------------------------------------------------------------------------------------------
// Config text format: a TOML subset.
//
//   # comment
//   [section]
//   key = 42            integer
//   key = 5e-3          real
//   key = "text"        string
//   key = true          boolean
//   key = ["A", "B"]    list of strings or numbers (single line)
//
// Every key must be known; anything else is an error naming section.key.

struct ConfigValue {
    std::string raw;
    std::string where;  // "file:line"
};

using ConfigEntries = std::map<std::string, ConfigValue>;  // "section.key" -> value

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

/// Removes a trailing comment that is not inside a string.
inline std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_str = !in_str;
        if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

}  // namespace detail

inline ConfigEntries parse_config_text(const std::string& text, const std::string& origin) {
    ConfigEntries out;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = origin + ":" + std::to_string(lineno);
        const std::string t = detail::trim(detail::strip_comment(line));
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3) throw ConfigError(where + ": malformed section header");
            section = detail::trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty() || value.empty()) throw ConfigError(where + ": expected key = value");
        const std::string full = section.empty() ? key : section + "." + key;
        if (out.count(full)) throw ConfigError(where + ": duplicate key " + full);
        out[full] = {value, where};
    }
    return out;
}

namespace detail {

inline std::string as_string(const std::string& key, const ConfigValue& v) {
    const auto& r = v.raw;
    if (r.size() < 2 || r.front() != '"' || r.back() != '"') {
        throw ConfigError(v.where + ": " + key + " must be a quoted string");
    }
    return r.substr(1, r.size() - 2);
}

inline double as_real(const std::string& key, const ConfigValue& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v.raw, &used);
        if (used != v.raw.size()) throw std::invalid_argument("trailing");
        return d;
    } catch (const std::exception&) {
        throw ConfigError(v.where + ": " + key + " must be a number");
    }
}

inline std::uint64_t as_count(const std::string& key, const ConfigValue& v) {
    const auto& r = v.raw;
    if (r.empty() || !std::all_of(r.begin(), r.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw ConfigError(v.where + ": " + key + " must be a non-negative integer");
    }
    try {
        return std::stoull(r);
    } catch (const std::exception&) {
        throw ConfigError(v.where + ": " + key + " is out of range");
    }
}

inline std::vector<std::string> as_list(const std::string& key, const ConfigValue& v) {
    const auto& r = v.raw;
    if (r.size() < 2 || r.front() != '[' || r.back() != ']') {
        throw ConfigError(v.where + ": " + key + " must be a [list]");
    }
    std::vector<std::string> items;
    std::string cur;
    for (char c : r.substr(1, r.size() - 2)) {
        if (c == ',') {
            items.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!trim(cur).empty()) items.push_back(trim(cur));
    for (auto& it : items) {
        if (it.empty()) throw ConfigError(v.where + ": " + key + " has an empty list item");
        if (it.front() == '"') {
            if (it.size() < 2 || it.back() != '"') throw ConfigError(v.where + ": " + key + ": unterminated string");
            it = it.substr(1, it.size() - 2);
        }
    }
    return items;
}

}  // namespace detail

/// Applies parsed entries on top of `base`. Relative dataset/output paths resolve against `base_dir`.
inline RunConfig apply_config(const ConfigEntries& entries, RunConfig base,
                              const std::filesystem::path& base_dir = {}) {
    using namespace detail;
    using Setter = std::function<void(const std::string&, const ConfigValue&)>;
    RunConfig& c = base;
    auto path_of = [&](const std::string& s) {
        std::filesystem::path p(s);
        return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    const std::map<std::string, Setter> setters{
        {"dataset.path", [&](auto& k, auto& v) { c.dataset_path = path_of(as_string(k, v)); }},
        {"dataset.subjects", [&](auto& k, auto& v) { c.n_subjects = as_count(k, v); }},
        {"dataset.grid_size", [&](auto& k, auto& v) { c.synth.grid_size = as_count(k, v); }},
        {"dataset.min_shapes", [&](auto& k, auto& v) { c.synth.min_shapes = as_count(k, v); }},
        {"dataset.max_shapes", [&](auto& k, auto& v) { c.synth.max_shapes = as_count(k, v); }},
        {"dataset.min_axis", [&](auto& k, auto& v) { c.synth.min_axis = as_real(k, v); }},
        {"dataset.max_axis", [&](auto& k, auto& v) { c.synth.max_axis = as_real(k, v); }},
        {"dataset.intensity_fg", [&](auto& k, auto& v) { c.synth.intensity_fg = as_real(k, v); }},
        {"dataset.intensity_bg", [&](auto& k, auto& v) { c.synth.intensity_bg = as_real(k, v); }},
        {"dataset.noise_sigma", [&](auto& k, auto& v) { c.synth.noise_sigma = as_real(k, v); }},
        {"dataset.blur_sigma", [&](auto& k, auto& v) { c.synth.blur_sigma = as_real(k, v); }},
        {"dataset.mask_dilation", [&](auto& k, auto& v) { c.synth.mask_dilation = as_count(k, v); }},
        {"dataset.seed", [&](auto& k, auto& v) { c.synth.seed = as_count(k, v); }},
        {"experiment.folds", [&](auto& k, auto& v) { c.folds = as_count(k, v); }},
        {"experiment.seed", [&](auto& k, auto& v) { c.seed = as_count(k, v); }},
        {"experiment.regimes",
         [&](auto& k, auto& v) {
             c.regimes.clear();
             for (const auto& s : as_list(k, v)) c.regimes.push_back(parse_regime(s));
         }},
        {"experiment.methods",
         [&](auto& k, auto& v) {
             c.methods.clear();
             for (const auto& s : as_list(k, v)) c.methods.push_back(parse_method(s));
         }},
        {"experiment.calib_fraction", [&](auto& k, auto& v) { c.calib_fraction = as_real(k, v); }},
        {"experiment.bins", [&](auto& k, auto& v) { c.n_bins = as_count(k, v); }},
        {"experiment.confidence_mode",
         [&](auto& k, auto& v) { c.mode = parse_confidence_mode(as_string(k, v)); }},
        {"experiment.min_bin_count", [&](auto& k, auto& v) { c.min_bin_count = as_count(k, v); }},
        {"experiment.alpha", [&](auto& k, auto& v) { c.alpha = as_real(k, v); }},
        {"experiment.threads", [&](auto& k, auto& v) { c.threads = as_count(k, v); }},
        {"training.learning_rate", [&](auto& k, auto& v) { c.train.learning_rate = as_real(k, v); }},
        {"training.max_epochs", [&](auto& k, auto& v) { c.train.max_epochs = as_count(k, v); }},
        {"training.batch_size", [&](auto& k, auto& v) { c.train.batch_size = as_count(k, v); }},
        {"training.plateau_patience", [&](auto& k, auto& v) { c.train.plateau_patience = as_count(k, v); }},
        {"training.plateau_factor", [&](auto& k, auto& v) { c.train.plateau_factor = as_real(k, v); }},
        {"training.early_stop_patience",
         [&](auto& k, auto& v) { c.train.early_stop_patience = as_count(k, v); }},
        {"training.min_improvement", [&](auto& k, auto& v) { c.train.min_improvement = as_real(k, v); }},
        {"training.pretrain_epochs", [&](auto& k, auto& v) { c.pretrain_epochs = as_count(k, v); }},
        {"calibration.learning_rate",
         [&](auto& k, auto& v) { c.calibration.fit.learning_rate = as_real(k, v); }},
        {"calibration.max_epochs", [&](auto& k, auto& v) { c.calibration.fit.max_epochs = as_count(k, v); }},
        {"calibration.batch_size", [&](auto& k, auto& v) { c.calibration.fit.batch_size = as_count(k, v); }},
        {"calibration.plateau_patience",
         [&](auto& k, auto& v) { c.calibration.fit.plateau_patience = as_count(k, v); }},
        {"calibration.early_stop_patience",
         [&](auto& k, auto& v) { c.calibration.fit.early_stop_patience = as_count(k, v); }},
        {"calibration.aux_kernel", [&](auto& k, auto& v) { c.calibration.aux_kernel = as_count(k, v); }},
        {"calibration.finetune_max_epochs",
         [&](auto& k, auto& v) { c.calibration.finetune.max_epochs = as_count(k, v); }},
        {"calibration.finetune_batch_size",
         [&](auto& k, auto& v) { c.calibration.finetune.batch_size = as_count(k, v); }},
        {"calibration.dropout_rate", [&](auto& k, auto& v) { c.calibration.dropout_rate = as_real(k, v); }},
        {"calibration.mc_samples", [&](auto& k, auto& v) { c.calibration.mc_samples = as_count(k, v); }},
        {"calibration.mc_learning_rates",
         [&](auto& k, auto& v) {
             c.calibration.mc_learning_rates.clear();
             for (const auto& s : as_list(k, v)) {
                 c.calibration.mc_learning_rates.push_back(as_real(k, ConfigValue{s, v.where}));
             }
         }},
        {"calibration.mc_max_epochs",
         [&](auto& k, auto& v) { c.calibration.mc_retrain.max_epochs = as_count(k, v); }},
        {"calibration.mc_batch_size",
         [&](auto& k, auto& v) { c.calibration.mc_retrain.batch_size = as_count(k, v); }},
        {"output.dir", [&](auto& k, auto& v) { c.output_dir = path_of(as_string(k, v)); }},
    };
    for (const auto& [key, value] : entries) {
        auto it = setters.find(key);
        if (it == setters.end()) {
            throw ConfigError(value.where + ": unknown key '" + key + "'");
        }
        it->second(key, value);
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return apply_config(parse_config_text(ss.str(), path.string()), std::move(base),
                        path.parent_path());
}

}  // namespace segcal
