#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "segcal/errors.hpp"
#include "segcal/grid.hpp"

namespace segcal {

inline constexpr std::size_t kDefaultBins = 20;

/// PredictionConfidence bins max(p, 1-p) against hard-prediction correctness;
/// ClassProbability bins p itself against the class-1 indicator.
enum class ConfidenceMode { PredictionConfidence, ClassProbability };

inline const char* to_string(ConfidenceMode m) {
    return m == ConfidenceMode::PredictionConfidence ? "prediction_confidence"
                                                     : "class_probability";
}

struct SubjectBinTally {
    std::string id;
    std::vector<std::uint64_t> count;
    std::vector<std::uint64_t> correct;
    std::vector<double> confidence_sum;
};

/// Global and per-subject bin tallies for reliability analysis.
struct ReliabilityBins {
    std::size_t n_bins = kDefaultBins;
    ConfidenceMode mode = ConfidenceMode::PredictionConfidence;
    std::vector<std::uint64_t> count;
    std::vector<double> confidence_sum;
    std::vector<std::uint64_t> correct;
    std::vector<SubjectBinTally> subjects;

    explicit ReliabilityBins(std::size_t k = kDefaultBins,
                             ConfidenceMode m = ConfidenceMode::PredictionConfidence)
        : n_bins(k), mode(m), count(k, 0), confidence_sum(k, 0.0), correct(k, 0) {
        if (k == 0) {
            throw ParameterError("reliability bins: K must be >= 1");
        }
    }

    std::uint64_t total() const noexcept {
        return std::accumulate(count.begin(), count.end(), std::uint64_t{0});
    }

    double bin_low(std::size_t k) const noexcept {
        return static_cast<double>(k) / static_cast<double>(n_bins);
    }
    double bin_high(std::size_t k) const noexcept {
        return static_cast<double>(k + 1) / static_cast<double>(n_bins);
    }

    std::size_t bin_of(double confidence) const noexcept {
        const auto b = static_cast<std::size_t>(confidence * static_cast<double>(n_bins));
        return std::min(b, n_bins - 1);
    }

    /// Adds one subject's masked voxels. `confidence` is the binned quantity and `correct`
    /// the 0/1 outcome for that voxel.
    void add_subject(const std::string& id, const Grid2D& confidence, const Grid2D& outcome,
                     const Grid2D& mask) {
        require_same_shape(confidence, outcome, "reliability_bins outcome");
        require_same_shape(confidence, mask, "reliability_bins mask");
        SubjectBinTally t{id, std::vector<std::uint64_t>(n_bins, 0),
                          std::vector<std::uint64_t>(n_bins, 0), std::vector<double>(n_bins, 0.0)};
        for (std::size_t i = 0; i < confidence.size(); ++i) {
            if (mask[i] == 0.0) continue;
            const double c = confidence[i];
            if (!(c >= 0.0 && c <= 1.0)) {
                throw ValidationError("reliability_bins: confidence outside [0,1] in subject " + id);
            }
            const std::size_t b = bin_of(c);
            const bool ok = outcome[i] != 0.0;
            ++t.count[b];
            t.correct[b] += ok ? 1 : 0;
            t.confidence_sum[b] += c;
        }
        for (std::size_t b = 0; b < n_bins; ++b) {
            count[b] += t.count[b];
            correct[b] += t.correct[b];
            confidence_sum[b] += t.confidence_sum[b];
        }
        subjects.push_back(std::move(t));
    }

    /// Bin-wise sum; subject records are concatenated and kept sorted by id.
    void merge(const ReliabilityBins& other) {
        if (other.n_bins != n_bins || other.mode != mode) {
            throw ParameterError("reliability bins: cannot merge different bin layouts");
        }
        for (std::size_t b = 0; b < n_bins; ++b) {
            count[b] += other.count[b];
            correct[b] += other.correct[b];
            confidence_sum[b] += other.confidence_sum[b];
        }
        subjects.insert(subjects.end(), other.subjects.begin(), other.subjects.end());
        std::stable_sort(subjects.begin(), subjects.end(),
                         [](const auto& a, const auto& b) { return a.id < b.id; });
    }
};

/// Confidence and correctness grids for a class-1 probability map under the given mode.
struct ConfidenceOutcome {
    Grid2D confidence;
    Grid2D outcome;
};

inline ConfidenceOutcome confidence_outcome(const Grid2D& probs, const Grid2D& labels,
                                            ConfidenceMode mode) {
    require_same_shape(probs, labels, "confidence_outcome");
    ConfidenceOutcome r{Grid2D(probs.height(), probs.width()),
                        Grid2D(probs.height(), probs.width())};
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = probs[i];
        if (mode == ConfidenceMode::PredictionConfidence) {
            const double pred = p >= 0.5 ? 1.0 : 0.0;
            r.confidence[i] = prediction_confidence(p);
            r.outcome[i] = pred == labels[i] ? 1.0 : 0.0;
        } else {
            r.confidence[i] = p;
            r.outcome[i] = labels[i];
        }
    }
    return r;
}

struct BinInput {
    std::string id;
    const Grid2D* probabilities;
    const Grid2D* labels;
    const Grid2D* mask;
};

/// Tallies class-1 probability maps of several subjects.
inline ReliabilityBins reliability_bins(const std::vector<BinInput>& inputs,
                                        std::size_t k = kDefaultBins,
                                        ConfidenceMode mode = ConfidenceMode::PredictionConfidence) {
    ReliabilityBins bins(k, mode);
    for (const auto& in : inputs) {
        if (!is_probability(*in.probabilities)) {
            throw ValidationError("reliability_bins: probabilities outside [0,1] in " + in.id);
        }
        const auto co = confidence_outcome(*in.probabilities, *in.labels, mode);
        bins.add_subject(in.id, co.confidence, co.outcome, *in.mask);
    }
    if (bins.total() == 0) {
        throw MetricError("reliability_bins: total mask is empty");
    }
    return bins;
}

namespace detail {

inline double ece_from(const std::vector<std::uint64_t>& count, const std::vector<std::uint64_t>& correct,
                       const std::vector<double>& conf_sum) {
    const double n = static_cast<double>(std::accumulate(count.begin(), count.end(), std::uint64_t{0}));
    if (n == 0.0) {
        throw MetricError("ece: no voxels in bins");
    }
    double e = 0.0;
    for (std::size_t b = 0; b < count.size(); ++b) {
        if (count[b] == 0) continue;
        const double nb = static_cast<double>(count[b]);
        const double acc = static_cast<double>(correct[b]) / nb;
        const double conf = conf_sum[b] / nb;
        e += (nb / n) * std::abs(acc - conf);
    }
    return e;
}

}  // namespace detail

/// Bin-weighted mean absolute gap between accuracy and confidence. Empty bins contribute 0.
inline double ece(const ReliabilityBins& bins) {
    return detail::ece_from(bins.count, bins.correct, bins.confidence_sum);
}

inline double subject_ece(const SubjectBinTally& t) {
    return detail::ece_from(t.count, t.correct, t.confidence_sum);
}

struct EceReport {
    double ece = 0.0;
    ReliabilityBins bins;
    std::map<std::string, double> per_subject_ece;

    ConfidenceMode mode() const noexcept { return bins.mode; }
};

inline EceReport ece_report(ReliabilityBins bins) {
    EceReport r{ece(bins), bins, {}};
    for (const auto& t : r.bins.subjects) {
        r.per_subject_ece[t.id] = subject_ece(t);
    }
    return r;
}

/// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice_score(const Grid2D& pred_mask, const Grid2D& true_mask) {
    require_same_shape(pred_mask, true_mask, "dice_score");
    double inter = 0.0;
    double sa = 0.0;
    double sb = 0.0;
    for (std::size_t i = 0; i < pred_mask.size(); ++i) {
        const double a = pred_mask[i] != 0.0 ? 1.0 : 0.0;
        const double b = true_mask[i] != 0.0 ? 1.0 : 0.0;
        inter += a * b;
        sa += a;
        sb += b;
    }
    if (sa + sb == 0.0) {
        return 1.0;
    }
    return 2.0 * inter / (sa + sb);
}

/// Linear-interpolation quantile of sorted data (type 7).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct BinSubjectAccuracy {
    std::string id;
    double accuracy = 0.0;
    std::uint64_t count = 0;
};

struct BinDistribution {
    std::size_t bin = 0;
    std::vector<BinSubjectAccuracy> subjects;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double stddev = std::numeric_limits<double>::quiet_NaN();  // population
    double median = std::numeric_limits<double>::quiet_NaN();
    double q1 = std::numeric_limits<double>::quiet_NaN();
    double q3 = std::numeric_limits<double>::quiet_NaN();

    bool empty() const noexcept { return subjects.empty(); }
};

inline constexpr std::uint64_t kDefaultMinBinCount = 10;

/// Per-bin accuracies of the subjects with at least `min_bin_count` voxels in that bin.
inline std::vector<BinDistribution> subject_bin_distribution(
    const ReliabilityBins& bins, std::uint64_t min_bin_count = kDefaultMinBinCount) {
    std::vector<BinDistribution> out(bins.n_bins);
    for (std::size_t b = 0; b < bins.n_bins; ++b) {
        auto& d = out[b];
        d.bin = b;
        std::vector<double> acc;
        for (const auto& t : bins.subjects) {
            if (t.count[b] == 0 || t.count[b] < min_bin_count) continue;
            const double a = static_cast<double>(t.correct[b]) / static_cast<double>(t.count[b]);
            d.subjects.push_back({t.id, a, t.count[b]});
            acc.push_back(a);
        }
        if (acc.empty()) continue;
        const double n = static_cast<double>(acc.size());
        d.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
        double ss = 0.0;
        for (double a : acc) ss += (a - d.mean) * (a - d.mean);
        d.stddev = std::sqrt(ss / n);
        std::sort(acc.begin(), acc.end());
        d.median = quantile_sorted(acc, 0.5);
        d.q1 = quantile_sorted(acc, 0.25);
        d.q3 = quantile_sorted(acc, 0.75);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Wilcoxon signed-rank test

enum class WilcoxonMethod { Exact, NormalApprox };

struct WilcoxonResult {
    double statistic = 0.0;  // min(W+, W-)
    double p_value = 1.0;
    std::size_t n_effective = 0;
    WilcoxonMethod method = WilcoxonMethod::Exact;
};

inline constexpr std::size_t kWilcoxonExactMax = 25;

/// Average ranks (1-based) of the values.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

inline double standard_normal_sf(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

}  // namespace detail

/// Paired two-sided signed-rank test on a - b. Zero differences are dropped; tied |d| get average
/// ranks. Exact null distribution for n <= 25 (counting over doubled ranks, which are integers even
/// with ties), else normal approximation with tie correction and continuity correction.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& values_a,
                                           const std::vector<double>& values_b) {
    if (values_a.size() != values_b.size()) {
        throw ParameterError("wilcoxon: paired samples must have equal length");
    }
    std::vector<double> absd;
    std::vector<bool> positive;
    for (std::size_t i = 0; i < values_a.size(); ++i) {
        const double d = values_a[i] - values_b[i];
        if (d == 0.0) continue;
        absd.push_back(std::abs(d));
        positive.push_back(d > 0.0);
    }
    const std::size_t n = absd.size();
    if (n == 0) {
        throw DegenerateError("wilcoxon: all paired differences are zero");
    }
    const auto ranks = average_ranks(absd);
    double w_plus = 0.0;
    double w_total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w_total += ranks[i];
        if (positive[i]) w_plus += ranks[i];
    }
    WilcoxonResult res;
    res.n_effective = n;
    res.statistic = std::min(w_plus, w_total - w_plus);

    if (n <= kWilcoxonExactMax) {
        // Doubled ranks are integral; count sign patterns by their doubled W+.
        std::vector<std::size_t> r2(n);
        std::size_t total2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            r2[i] = static_cast<std::size_t>(std::lround(2.0 * ranks[i]));
            total2 += r2[i];
        }
        std::vector<double> ways(total2 + 1, 0.0);
        ways[0] = 1.0;
        std::size_t reach = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t s = reach + 1; s-- > 0;) {
                if (ways[s] != 0.0) ways[s + r2[i]] += ways[s];
            }
            reach += r2[i];
        }
        const auto stat2 = static_cast<std::size_t>(std::lround(2.0 * res.statistic));
        double tail = 0.0;
        for (std::size_t s = 0; s <= stat2; ++s) tail += ways[s];
        const double p = 2.0 * tail / std::ldexp(1.0, static_cast<int>(n));
        res.p_value = std::min(1.0, p);
        res.method = WilcoxonMethod::Exact;
        return res;
    }

    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
    std::vector<double> sorted = absd;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i);
        var -= (t * t * t - t) / 48.0;
        i = j;
    }
    const double z = std::max(0.0, std::abs(w_plus - mean) - 0.5) / std::sqrt(var);
    res.p_value = std::min(1.0, 2.0 * detail::standard_normal_sf(z));
    res.method = WilcoxonMethod::NormalApprox;
    return res;
}

enum class Direction { Higher, Lower };

/// Marks the method with the best mean plus every method not significantly different from it
/// (paired signed-rank p >= alpha). Methods with identical values count as tied.
inline std::set<std::string> best_marking(const std::map<std::string, std::vector<double>>& per_method,
                                          Direction direction, double alpha = 0.05) {
    if (per_method.size() < 2) {
        std::set<std::string> out;
        for (const auto& [name, v] : per_method) out.insert(name);
        return out;
    }
    const std::size_t n = per_method.begin()->second.size();
    std::string best;
    double best_mean = 0.0;
    for (const auto& [name, v] : per_method) {
        if (v.size() != n || n == 0) {
            throw ParameterError("best_marking: methods must share the same nonempty subject list");
        }
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
        const bool better = best.empty() || (direction == Direction::Higher ? m > best_mean : m < best_mean);
        if (better) {
            best = name;
            best_mean = m;
        }
    }
    std::set<std::string> marked{best};
    const auto& ref = per_method.at(best);
    for (const auto& [name, v] : per_method) {
        if (name == best) continue;
        try {
            if (wilcoxon_signed_rank(v, ref).p_value >= alpha) marked.insert(name);
        } catch (const DegenerateError&) {
            marked.insert(name);
        }
    }
    return marked;
}

}  // namespace segcal
