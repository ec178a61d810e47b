#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "segcal/calibrators.hpp"
#include "segcal/config.hpp"
#include "segcal/errors.hpp"
#include "segcal/grid.hpp"
#include "segcal/io.hpp"
#include "segcal/metrics.hpp"
#include "segcal/parallel.hpp"
#include "segcal/synth.hpp"
#include "segcal/train.hpp"

namespace segcal {

// ---------------------------------------------------------------------------------------------
// Fold partitioning

/// Subjects of one cross-validation fold. The training portion is split again: `base_fit` trains
/// the base network, `calib` fits calibrators and drives early stopping.
struct FoldPartition {
    std::size_t fold = 0;
    std::vector<Subject> base_fit;
    std::vector<Subject> calib;
    std::vector<Subject> eval;
};

inline std::vector<std::string> subject_ids(const std::vector<Subject>& subjects) {
    std::vector<std::string> ids;
    ids.reserve(subjects.size());
    for (const auto& s : subjects) ids.push_back(s.id);
    return ids;
}

inline FoldPartition partition_fold(const std::vector<Subject>& subjects, const FoldSplit& split,
                                    std::size_t fold, double calib_fraction, std::uint64_t seed) {
    if (fold >= split.n_folds) {
        throw SplitError("fold " + std::to_string(fold) + " out of range (" +
                         std::to_string(split.n_folds) + " folds)");
    }
    FoldPartition p;
    p.fold = fold;
    std::vector<const Subject*> rest;
    for (const auto& s : subjects) {
        if (split.fold_of(s.id) == fold) {
            p.eval.push_back(s);
        } else {
            rest.push_back(&s);
        }
    }
    std::sort(rest.begin(), rest.end(), [](auto* a, auto* b) { return a->id < b->id; });
    Rng rng(derive_seed(seed, 0xCA1B0000ULL + fold));
    for (std::size_t i = rest.size(); i > 1; --i) {
        std::swap(rest[i - 1], rest[static_cast<std::size_t>(rng.below(i))]);
    }
    const auto n_calib = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(calib_fraction * static_cast<double>(rest.size()))));
    if (n_calib >= rest.size()) {
        throw SplitError("fold " + std::to_string(fold) +
                         ": too few training subjects to hold out a calibration split");
    }
    std::vector<const Subject*> calib(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_calib));
    std::vector<const Subject*> fit(rest.begin() + static_cast<std::ptrdiff_t>(n_calib), rest.end());
    auto by_id = [](auto* a, auto* b) { return a->id < b->id; };
    std::sort(calib.begin(), calib.end(), by_id);
    std::sort(fit.begin(), fit.end(), by_id);
    for (auto* s : calib) p.calib.push_back(*s);
    for (auto* s : fit) p.base_fit.push_back(*s);
    return p;
}

/// Throws InternalError if any evaluation subject was also used for fitting or model selection.
inline void assert_evaluation_hygiene(const FoldPartition& p) {
    std::set<std::string> seen;
    for (const auto& s : p.base_fit) seen.insert(s.id);
    for (const auto& s : p.calib) seen.insert(s.id);
    for (const auto& s : p.eval) {
        if (seen.count(s.id)) {
            throw InternalError("fold " + std::to_string(p.fold) + ": evaluation subject '" + s.id +
                                "' was also used for fitting");
        }
    }
    if (seen.size() != p.base_fit.size() + p.calib.size()) {
        throw InternalError("fold " + std::to_string(p.fold) + ": base and calibration splits overlap");
    }
}

// ---------------------------------------------------------------------------------------------
// Results

inline constexpr double kUncertainLow = 0.05;
inline constexpr double kUncertainHigh = 0.95;

struct SubjectScore {
    std::string id;
    std::size_t fold = 0;
    double dice = 0.0;
    double ece = 0.0;
};

struct CellResult {
    Regime regime = Regime::CE;
    Method method = Method::BASE;
    std::vector<SubjectScore> subjects;  // ascending id
    double mean_dice = std::numeric_limits<double>::quiet_NaN();
    double mean_ece = std::numeric_limits<double>::quiet_NaN();
    bool best_dice = false;
    bool best_ece = false;
    ReliabilityBins bins;
    std::uint64_t uncertain_voxels = 0;
    std::uint64_t total_voxels = 0;
    std::vector<std::string> errors;

    bool ok() const noexcept { return errors.empty() && !subjects.empty(); }

    double uncertain_fraction() const noexcept {
        return total_voxels ? static_cast<double>(uncertain_voxels) / static_cast<double>(total_voxels)
                            : std::numeric_limits<double>::quiet_NaN();
    }

    std::vector<double> dice_values() const {
        std::vector<double> v;
        for (const auto& s : subjects) v.push_back(s.dice);
        return v;
    }
    std::vector<double> ece_values() const {
        std::vector<double> v;
        for (const auto& s : subjects) v.push_back(s.ece);
        return v;
    }
};

struct ResultsTable {
    ConfidenceMode mode = ConfidenceMode::PredictionConfidence;
    std::size_t n_bins = kDefaultBins;
    std::uint64_t min_bin_count = kDefaultMinBinCount;
    double alpha = 0.05;
    std::vector<Regime> regimes;
    std::vector<Method> methods;
    std::vector<CellResult> cells;  // regime-major

    const CellResult* find(Regime r, Method m) const {
        for (const auto& c : cells) {
            if (c.regime == r && c.method == m) return &c;
        }
        return nullptr;
    }
    const CellResult& at(Regime r, Method m) const {
        if (const auto* c = find(r, m)) return *c;
        throw ValidationError(std::string("no results for ") + to_string(r) + "/" + to_string(m));
    }
};

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Recomputes means and best flags from the per-subject vectors. Best marking runs per regime
/// over the cells that completed.
inline void finalize_table(ResultsTable& t) {
    for (auto& c : t.cells) {
        c.mean_dice = c.ok() ? mean_of(c.dice_values()) : std::numeric_limits<double>::quiet_NaN();
        c.mean_ece = c.ok() ? mean_of(c.ece_values()) : std::numeric_limits<double>::quiet_NaN();
        c.best_dice = c.best_ece = false;
    }
    for (Regime r : t.regimes) {
        std::map<std::string, std::vector<double>> dice;
        std::map<std::string, std::vector<double>> ece_v;
        for (const auto& c : t.cells) {
            if (c.regime != r || !c.ok()) continue;
            dice[to_string(c.method)] = c.dice_values();
            ece_v[to_string(c.method)] = c.ece_values();
        }
        if (dice.empty()) continue;
        const auto bd = best_marking(dice, Direction::Higher, t.alpha);
        const auto be = best_marking(ece_v, Direction::Lower, t.alpha);
        for (auto& c : t.cells) {
            if (c.regime != r || !c.ok()) continue;
            c.best_dice = bd.count(to_string(c.method)) > 0;
            c.best_ece = be.count(to_string(c.method)) > 0;
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Evaluation of one fitted predictor on one fold

struct FoldEvaluation {
    std::vector<SubjectScore> subjects;
    ReliabilityBins bins;
    std::uint64_t uncertain_voxels = 0;
    std::uint64_t total_voxels = 0;
};

inline FoldEvaluation evaluate_predictor(const CalibratedPredictor& predictor,
                                         const std::vector<Subject>& eval, std::size_t fold,
                                         std::size_t n_bins, ConfidenceMode mode) {
    FoldEvaluation out{{}, ReliabilityBins(n_bins, mode), 0, 0};
    for (const auto& s : eval) {
        const Grid2D probs = predictor.predict(s);
        const auto co = confidence_outcome(probs, s.labels, mode);
        ReliabilityBins one(n_bins, mode);
        one.add_subject(s.id, co.confidence, co.outcome, s.eval_mask);
        out.subjects.push_back(
            {s.id, fold, dice_score(predicted_class(probs), s.labels), subject_ece(one.subjects[0])});
        out.bins.merge(one);
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (s.eval_mask[i] == 0.0) continue;
            ++out.total_voxels;
            if (probs[i] > kUncertainLow && probs[i] < kUncertainHigh) ++out.uncertain_voxels;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Full grid

/// Base-model training for one fold and regime; seeds depend only on (run seed, fold, regime).
inline TrainResult train_fold_base(const RunConfig& config, const FoldPartition& p, Regime regime) {
    TrainConfig tc = config.train;
    tc.seed = derive_seed(config.seed, 0x7A000ULL + p.fold * 16 + static_cast<std::size_t>(regime));
    const NetParams init = init_params(derive_seed(config.seed, 0x1A17ULL + p.fold));
    return train_regime(init, regime, p.base_fit, p.calib, tc, config.pretrain_epochs);
}

inline CalibrationConfig fold_calibration_config(const RunConfig& config, std::size_t fold, Regime regime) {
    CalibrationConfig cc = config.calibration;
    cc.seed = derive_seed(config.seed, 0xCA000ULL + fold * 16 + static_cast<std::size_t>(regime));
    return cc;
}

struct RunArtifacts {
    ResultsTable table;
    /// Deterministic run log: one entry per event, ordered by (fold, regime, method).
    std::vector<std::string> log;
};

using ProgressFn = std::function<void(const std::string&)>;

inline std::string checkpoint_name(std::size_t fold, Regime r, const std::string& what) {
    return "fold" + std::to_string(fold) + "_" + to_string(r) + "_" + what + ".scw";
}

inline std::vector<Subject> load_or_generate(const RunConfig& config) {
    if (config.dataset_path) return load_dataset(*config.dataset_path);
    return render_dataset(config.synth, config.n_subjects);
}

/// Trains, calibrates and evaluates every (fold, regime, method) cell. Fold/regime jobs run on
/// `config.threads` workers; their outputs are combined in job order so results do not depend on
/// the thread count. A failure inside a cell is logged and only that cell is marked failed.
inline RunArtifacts run_experiment(const RunConfig& config, const std::vector<Subject>& subjects,
                                   const std::optional<std::filesystem::path>& checkpoint_dir = {},
                                   const ProgressFn& progress = {}) {
    config.validate();
    for (const auto& s : subjects) s.validate();
    const FoldSplit split = split_folds(subject_ids(subjects), config.folds, config.seed);

    std::vector<FoldPartition> parts;
    for (std::size_t f = 0; f < config.folds; ++f) {
        parts.push_back(partition_fold(subjects, split, f, config.calib_fraction, config.seed));
        assert_evaluation_hygiene(parts.back());
    }
    if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);

    struct JobOutput {
        std::vector<std::optional<FoldEvaluation>> per_method;
        std::vector<std::string> errors;  // per method; empty string = ok
        std::vector<std::string> log;
    };
    const std::size_t n_reg = config.regimes.size();
    const std::size_t n_jobs = config.folds * n_reg;
    std::vector<JobOutput> jobs(n_jobs);
    std::mutex progress_mu;
    auto say = [&](const std::string& msg) {
        if (!progress) return;
        std::lock_guard<std::mutex> lock(progress_mu);
        progress(msg);
    };

    parallel_for(n_jobs, config.threads, [&](std::size_t j) {
        const std::size_t f = j / n_reg;
        const Regime regime = config.regimes[j % n_reg];
        const FoldPartition& p = parts[f];
        JobOutput& out = jobs[j];
        out.per_method.resize(config.methods.size());
        out.errors.assign(config.methods.size(), "");
        const std::string tag = "fold " + std::to_string(f) + " " + to_string(regime);

        NetParams base;
        try {
            say(tag + ": training base model on " + std::to_string(p.base_fit.size()) + " subjects");
            auto res = train_fold_base(config, p, regime);
            base = std::move(res.params);
            out.log.push_back(tag + ": base model trained for " + std::to_string(res.log.size()) +
                              " epochs, calibration-split Dice " + format_real(mean_dice(base, p.calib)));
            if (checkpoint_dir) save_checkpoint(*checkpoint_dir / checkpoint_name(f, regime, "base"), base);
        } catch (const std::exception& e) {
            const std::string msg = tag + ": base training failed: " + e.what();
            out.log.push_back(msg);
            say(msg);
            for (auto& err : out.errors) err = msg;
            return;
        }

        for (std::size_t mi = 0; mi < config.methods.size(); ++mi) {
            const Method m = config.methods[mi];
            const std::string mtag = tag + " " + to_string(m);
            try {
                const CalibrationConfig cc = fold_calibration_config(config, f, regime);
                say(mtag + ": fitting on " + std::to_string(p.calib.size()) + " calibration subjects");
                auto fit = calibrate_pipeline(m, regime, base, p.calib, p.calib, cc);
                for (const auto& n : fit.notes) out.log.push_back(mtag + ": " + n);
                if (fit.fit_loss) out.log.push_back(mtag + ": calibration-split CE " + format_real(*fit.fit_loss));
                if (checkpoint_dir) {
                    const auto& pr = fit.predictor;
                    const auto path = *checkpoint_dir / checkpoint_name(f, regime, to_string(m));
                    if (pr.platt_params()) save_checkpoint(path, *pr.platt_params());
                    if (pr.aux_params()) save_checkpoint(path, *pr.aux_params());
                    if (m == Method::FINETUNE || is_mc(m)) save_checkpoint(path, pr.net());
                }
                out.per_method[mi] = evaluate_predictor(fit.predictor, p.eval, f, config.n_bins, config.mode);
            } catch (const std::exception& e) {
                const std::string msg = mtag + ": failed: " + e.what();
                out.log.push_back(msg);
                out.errors[mi] = msg;
                say(msg);
            }
        }
        say(tag + ": done");
    });

    RunArtifacts art;
    auto& t = art.table;
    t.mode = config.mode;
    t.n_bins = config.n_bins;
    t.min_bin_count = config.min_bin_count;
    t.alpha = config.alpha;
    t.regimes = config.regimes;
    t.methods = config.methods;
    for (Regime r : config.regimes) {
        for (Method m : config.methods) {
            CellResult c;
            c.regime = r;
            c.method = m;
            c.bins = ReliabilityBins(config.n_bins, config.mode);
            t.cells.push_back(std::move(c));
        }
    }
    for (std::size_t j = 0; j < n_jobs; ++j) {
        const std::size_t ri = j % n_reg;
        for (const auto& line : jobs[j].log) art.log.push_back(line);
        for (std::size_t mi = 0; mi < config.methods.size(); ++mi) {
            CellResult& c = t.cells[ri * config.methods.size() + mi];
            if (!jobs[j].errors[mi].empty()) {
                c.errors.push_back(jobs[j].errors[mi]);
                continue;
            }
            const auto& ev = *jobs[j].per_method[mi];
            c.subjects.insert(c.subjects.end(), ev.subjects.begin(), ev.subjects.end());
            c.bins.merge(ev.bins);
            c.uncertain_voxels += ev.uncertain_voxels;
            c.total_voxels += ev.total_voxels;
        }
    }
    for (auto& c : t.cells) {
        std::sort(c.subjects.begin(), c.subjects.end(),
                  [](const auto& a, const auto& b) { return a.id < b.id; });
    }
    finalize_table(t);
    return art;
}

// ---------------------------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::json real_json(double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double json_real(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json bins_json(const ReliabilityBins& b) {
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& s : b.subjects) {
        subjects.push_back({{"id", s.id},
                            {"count", s.count},
                            {"correct", s.correct},
                            {"confidence_sum", s.confidence_sum}});
    }
    return {{"count", b.count},
            {"correct", b.correct},
            {"confidence_sum", b.confidence_sum},
            {"subjects", subjects}};
}

inline ReliabilityBins bins_from_json(const nlohmann::json& j, std::size_t k, ConfidenceMode mode) {
    ReliabilityBins b(k, mode);
    b.count = j.at("count").get<std::vector<std::uint64_t>>();
    b.correct = j.at("correct").get<std::vector<std::uint64_t>>();
    b.confidence_sum = j.at("confidence_sum").get<std::vector<double>>();
    for (const auto& s : j.at("subjects")) {
        b.subjects.push_back({s.at("id").get<std::string>(),
                              s.at("count").get<std::vector<std::uint64_t>>(),
                              s.at("correct").get<std::vector<std::uint64_t>>(),
                              s.at("confidence_sum").get<std::vector<double>>()});
    }
    if (b.count.size() != k || b.correct.size() != k || b.confidence_sum.size() != k) {
        throw FormatError("results: bin arrays do not match n_bins");
    }
    return b;
}

}  // namespace detail

inline constexpr const char* kResultsFormat = "segcal-results-1";

inline nlohmann::json results_to_json(const ResultsTable& t) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : t.cells) {
        nlohmann::json subjects = nlohmann::json::array();
        for (const auto& s : c.subjects) {
            subjects.push_back({{"id", s.id}, {"fold", s.fold}, {"dice", s.dice}, {"ece", s.ece}});
        }
        cells.push_back({{"regime", to_string(c.regime)},
                         {"method", to_string(c.method)},
                         {"ok", c.ok()},
                         {"errors", c.errors},
                         {"mean_dice", detail::real_json(c.mean_dice)},
                         {"mean_ece", detail::real_json(c.mean_ece)},
                         {"best_dice", c.best_dice},
                         {"best_ece", c.best_ece},
                         {"uncertain_voxels", c.uncertain_voxels},
                         {"total_voxels", c.total_voxels},
                         {"uncertain_fraction", detail::real_json(c.uncertain_fraction())},
                         {"subjects", subjects},
                         {"bins", detail::bins_json(c.bins)}});
    }
    std::vector<std::string> regimes;
    std::vector<std::string> methods;
    for (auto r : t.regimes) regimes.emplace_back(to_string(r));
    for (auto m : t.methods) methods.emplace_back(to_string(m));
    return {{"format", kResultsFormat},
            {"confidence_mode", to_string(t.mode)},
            {"n_bins", t.n_bins},
            {"min_bin_count", t.min_bin_count},
            {"alpha", t.alpha},
            {"regimes", regimes},
            {"methods", methods},
            {"cells", cells}};
}

inline ResultsTable results_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != kResultsFormat) {
            throw FormatError("results: unsupported format '" + j.at("format").get<std::string>() + "'");
        }
        ResultsTable t;
        t.mode = parse_confidence_mode(j.at("confidence_mode").get<std::string>());
        t.n_bins = j.at("n_bins").get<std::size_t>();
        t.min_bin_count = j.at("min_bin_count").get<std::uint64_t>();
        t.alpha = j.at("alpha").get<double>();
        for (const auto& r : j.at("regimes")) t.regimes.push_back(parse_regime(r.get<std::string>()));
        for (const auto& m : j.at("methods")) t.methods.push_back(parse_method(m.get<std::string>()));
        for (const auto& jc : j.at("cells")) {
            CellResult c;
            c.regime = parse_regime(jc.at("regime").get<std::string>());
            c.method = parse_method(jc.at("method").get<std::string>());
            c.errors = jc.at("errors").get<std::vector<std::string>>();
            c.mean_dice = detail::json_real(jc.at("mean_dice"));
            c.mean_ece = detail::json_real(jc.at("mean_ece"));
            c.best_dice = jc.at("best_dice").get<bool>();
            c.best_ece = jc.at("best_ece").get<bool>();
            c.uncertain_voxels = jc.at("uncertain_voxels").get<std::uint64_t>();
            c.total_voxels = jc.at("total_voxels").get<std::uint64_t>();
            for (const auto& s : jc.at("subjects")) {
                c.subjects.push_back({s.at("id").get<std::string>(), s.at("fold").get<std::size_t>(),
                                      s.at("dice").get<double>(), s.at("ece").get<double>()});
            }
            c.bins = detail::bins_from_json(jc.at("bins"), t.n_bins, t.mode);
            t.cells.push_back(std::move(c));
        }
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("results: malformed JSON: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("results: ") + e.what());
    }
}

inline void save_results(const std::filesystem::path& path, const ResultsTable& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << results_to_json(t).dump(1) << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline ResultsTable load_results(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return results_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------------------------
// CSV reports

inline CsvTable reliability_csv(const ReliabilityBins& bins, std::uint64_t min_bin_count) {
    CsvTable t{{"bin_low", "bin_high", "count", "mean_conf", "mean_acc", "subject_acc_std"}, {}};
    const auto dist = subject_bin_distribution(bins, min_bin_count);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t b = 0; b < bins.n_bins; ++b) {
        const double n = static_cast<double>(bins.count[b]);
        const double conf = bins.count[b] ? bins.confidence_sum[b] / n : nan;
        const double acc = bins.count[b] ? static_cast<double>(bins.correct[b]) / n : nan;
        t.rows.push_back({format_real(bins.bin_low(b)), format_real(bins.bin_high(b)),
                          std::to_string(bins.count[b]), format_real(conf), format_real(acc),
                          format_real(dist[b].stddev)});
    }
    return t;
}

inline CsvTable violin_csv(const ReliabilityBins& bins, std::uint64_t min_bin_count) {
    CsvTable t{{"bin_index", "subject_id", "accuracy", "count"}, {}};
    for (const auto& d : subject_bin_distribution(bins, min_bin_count)) {
        for (const auto& s : d.subjects) {
            t.rows.push_back({std::to_string(d.bin), s.id, format_real(s.accuracy), std::to_string(s.count)});
        }
    }
    return t;
}

inline CsvTable scatter_csv(const ResultsTable& results) {
    CsvTable t{{"regime", "method", "mean_dice", "mean_ece"}, {}};
    for (const auto& c : results.cells) {
        t.rows.push_back({to_string(c.regime), to_string(c.method), format_real(c.mean_dice),
                          format_real(c.mean_ece)});
    }
    return t;
}

inline void emit_reliability_csv(const ReliabilityBins& bins, std::uint64_t min_bin_count,
                                 const std::filesystem::path& path) {
    write_csv(path, reliability_csv(bins, min_bin_count));
}

inline void emit_violin_csv(const ReliabilityBins& bins, std::uint64_t min_bin_count,
                            const std::filesystem::path& path) {
    write_csv(path, violin_csv(bins, min_bin_count));
}

inline void emit_scatter_csv(const ResultsTable& results, const std::filesystem::path& path) {
    write_csv(path, scatter_csv(results));
}

/// ECE from a reloaded reliability CSV (count, mean_conf, mean_acc columns).
inline double ece_from_reliability_csv(const CsvTable& t) {
    double n = 0.0;
    double e = 0.0;
    for (const auto& r : t.rows) n += parse_real(r.at(2));
    if (n == 0.0) throw MetricError("reliability CSV has no voxels");
    for (const auto& r : t.rows) {
        const double c = parse_real(r.at(2));
        if (c == 0.0) continue;
        e += (c / n) * std::abs(parse_real(r.at(4)) - parse_real(r.at(3)));
    }
    return e;
}

/// Plain-text table: Dice and ECE% per method (rows) and regime (columns). A trailing '*' marks
/// the best value and every value not significantly different from it.
inline std::string format_results_table(const ResultsTable& t) {
    std::ostringstream os;
    char buf[64];
    os << "confidence mode: " << to_string(t.mode) << ", bins: " << t.n_bins << "\n";
    os << std::string(10, ' ');
    for (Regime r : t.regimes) {
        std::snprintf(buf, sizeof buf, " | %-8s Dice  ECE%%   ", to_string(r));
        os << buf;
    }
    os << "\n";
    for (Method m : t.methods) {
        std::snprintf(buf, sizeof buf, "%-10s", to_string(m));
        os << buf;
        for (Regime r : t.regimes) {
            const auto* c = t.find(r, m);
            if (!c || !c->ok()) {
                os << " |   failed            ";
                continue;
            }
            std::snprintf(buf, sizeof buf, " | %6.4f%c  %7.3f%c    ", c->mean_dice, c->best_dice ? '*' : ' ',
                          100.0 * c->mean_ece, c->best_ece ? '*' : ' ');
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

inline std::string cell_file_stem(const CellResult& c) {
    return std::string(to_string(c.regime)) + "_" + to_string(c.method);
}

/// Writes results.json, the text table, scatter.csv and per-cell reliability/violin CSVs.
inline void write_reports(const ResultsTable& t, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_results(dir / "results.json", t);
    {
        std::ofstream out(dir / "results_table.txt", std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write results table in '" + dir.string() + "'");
        out << format_results_table(t);
    }
    emit_scatter_csv(t, dir / "scatter.csv");
    for (const auto& c : t.cells) {
        if (!c.ok()) continue;
        emit_reliability_csv(c.bins, t.min_bin_count, dir / ("reliability_" + cell_file_stem(c) + ".csv"));
        emit_violin_csv(c.bins, t.min_bin_count, dir / ("violin_" + cell_file_stem(c) + ".csv"));
    }
}

inline void write_run_log(const std::vector<std::string>& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& l : log) out << l << '\n';
}

// ---------------------------------------------------------------------------------------------
// Predictor manifests
//
// A fitted predictor on disk is a small JSON manifest plus SCW1 checkpoints next to it:
//   {"method": "PLATT", "network": "network.scw", "platt": "platt.scw"}
//   {"method": "MC_DECODER", "network": "network.scw", "mc": {"sites": [...], "rate": 0.2, ...}}

inline void save_predictor(const std::filesystem::path& dir, const CalibratedPredictor& p) {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"method", to_string(p.method())}, {"network", "network.scw"}};
    save_checkpoint(dir / "network.scw", p.net());
    if (p.platt_params()) {
        save_checkpoint(dir / "platt.scw", *p.platt_params());
        j["platt"] = "platt.scw";
    }
    if (p.aux_params()) {
        save_checkpoint(dir / "aux.scw", *p.aux_params());
        j["aux"] = "aux.scw";
    }
    if (const auto& mc = p.mc_config()) {
        j["mc"] = {{"sites", {mc->dropout.sites[0], mc->dropout.sites[1], mc->dropout.sites[2]}},
                   {"rate", mc->dropout.rate},
                   {"samples", mc->n_samples},
                   {"seed", mc->seed}};
    }
    std::ofstream out(dir / "predictor.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write predictor manifest in '" + dir.string() + "'");
    out << j.dump(1) << '\n';
}

inline CalibratedPredictor load_predictor(const std::filesystem::path& manifest) {
    std::ifstream in(manifest, std::ios::binary);
    if (!in) throw IoError("cannot open '" + manifest.string() + "'");
    const auto dir = manifest.parent_path();
    try {
        const auto j = nlohmann::json::parse(in);
        const Method m = parse_method(j.at("method").get<std::string>());
        NetParams net = load_network_checkpoint(dir / j.at("network").get<std::string>());
        switch (m) {
            case Method::BASE: return CalibratedPredictor::base(std::move(net));
            case Method::FINETUNE: return CalibratedPredictor::finetuned(std::move(net));
            case Method::PLATT:
                return CalibratedPredictor::platt(std::move(net),
                                                  load_platt_checkpoint(dir / j.at("platt").get<std::string>()));
            case Method::AUX:
                return CalibratedPredictor::aux(std::move(net),
                                                load_aux_checkpoint(dir / j.at("aux").get<std::string>()));
            case Method::MC_DECODER:
            case Method::MC_CENTER: {
                const auto& jm = j.at("mc");
                McConfig mc;
                const auto sites = jm.at("sites").get<std::vector<bool>>();
                if (sites.size() != mc.dropout.sites.size()) throw FormatError("mc.sites must have 3 entries");
                for (std::size_t i = 0; i < sites.size(); ++i) mc.dropout.sites[i] = sites[i];
                mc.dropout.rate = jm.at("rate").get<double>();
                mc.n_samples = jm.at("samples").get<std::size_t>();
                mc.seed = jm.at("seed").get<std::uint64_t>();
                mc.validate();
                return CalibratedPredictor::mc(m, std::move(net), mc);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + manifest.string() + "': " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError("'" + manifest.string() + "': " + e.what());
    }
    throw InternalError("load_predictor: unreachable");
}

}  // namespace segcal
