#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "segcal/errors.hpp"
#include "segcal/rng.hpp"

namespace segcal {

/// Dense 2D array of doubles, row-major.
class Grid2D {
public:
    Grid2D() = default;

    Grid2D(std::size_t height, std::size_t width, double fill = 0.0)
        : height_(height), width_(width) {
        if (height == 0 || width == 0) {
            throw DimensionError("grid dimensions must be >= 1, got " + std::to_string(height) +
                                 "x" + std::to_string(width));
        }
        values_.assign(height * width, fill);
    }

    Grid2D(std::size_t height, std::size_t width, std::vector<double> values)
        : height_(height), width_(width), values_(std::move(values)) {
        if (height == 0 || width == 0) {
            throw DimensionError("grid dimensions must be >= 1, got " + std::to_string(height) +
                                 "x" + std::to_string(width));
        }
        if (values_.size() != height * width) {
            throw DimensionError("grid value count " + std::to_string(values_.size()) +
                                 " does not match " + std::to_string(height) + "x" +
                                 std::to_string(width));
        }
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * width_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * width_ + c]; }
    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    bool same_shape(const Grid2D& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_;
    }

    friend bool operator==(const Grid2D&, const Grid2D&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<double> values_;
};

inline void require_same_shape(const Grid2D& a, const Grid2D& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) +
                             "x" + std::to_string(a.width()) + " vs " +
                             std::to_string(b.height()) + "x" + std::to_string(b.width()));
    }
}

inline Grid2D make_grid(std::size_t height, std::size_t width, double fill) {
    return Grid2D(height, width, fill);
}

/// Numerically stable logistic function.
inline double sigmoid(double z) noexcept {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline Grid2D sigmoid_map(const Grid2D& logits) {
    Grid2D out(logits.height(), logits.width());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(logits[i])) {
            throw ValidationError("sigmoid_map: non-finite logit at index " + std::to_string(i));
        }
        out[i] = sigmoid(logits[i]);
    }
    return out;
}

/// 1 where p >= threshold. Ties predict class 1.
inline Grid2D predicted_class(const Grid2D& probs, double threshold = 0.5) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw ParameterError("predicted_class: threshold must lie in [0,1]");
    }
    Grid2D out(probs.height(), probs.width());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        out[i] = probs[i] >= threshold ? 1.0 : 0.0;
    }
    return out;
}

inline double prediction_confidence(double p) noexcept { return std::max(p, 1.0 - p); }

inline bool is_binary(const Grid2D& g) noexcept {
    return std::all_of(g.values().begin(), g.values().end(),
                       [](double v) { return v == 0.0 || v == 1.0; });
}

inline bool is_probability(const Grid2D& g) noexcept {
    return std::all_of(g.values().begin(), g.values().end(),
                       [](double v) { return v >= 0.0 && v <= 1.0; });
}

inline std::size_t count_nonzero(const Grid2D& g) noexcept {
    return static_cast<std::size_t>(
        std::count_if(g.values().begin(), g.values().end(), [](double v) { return v != 0.0; }));
}

/// One case: image, sampled labels, evaluation mask and optional extras.
struct Subject {
    std::string id;
    Grid2D image;
    Grid2D labels;
    Grid2D eval_mask;
    std::optional<Grid2D> reference_posterior;
    std::optional<Grid2D> logits;
    std::optional<Grid2D> probabilities;

    std::size_t height() const noexcept { return image.height(); }
    std::size_t width() const noexcept { return image.width(); }

    /// Throws when grids disagree in shape, labels/mask are not binary, or the mask is empty.
    void validate() const {
        if (id.empty()) {
            throw DataError("subject id must not be empty");
        }
        const std::string ctx = "subject " + id;
        require_same_shape(image, labels, (ctx + " labels").c_str());
        require_same_shape(image, eval_mask, (ctx + " eval_mask").c_str());
        if (reference_posterior) {
            require_same_shape(image, *reference_posterior, (ctx + " reference_posterior").c_str());
            if (!is_probability(*reference_posterior)) {
                throw DataError(ctx + ": reference posterior outside [0,1]");
            }
        }
        if (logits) {
            require_same_shape(image, *logits, (ctx + " logits").c_str());
        }
        if (probabilities) {
            require_same_shape(image, *probabilities, (ctx + " probabilities").c_str());
        }
        if (!is_binary(labels)) {
            throw DataError(ctx + ": labels are not binary");
        }
        if (!is_binary(eval_mask)) {
            throw DataError(ctx + ": eval_mask is not binary");
        }
        if (count_nonzero(eval_mask) == 0) {
            throw DataError(ctx + ": eval_mask is empty");
        }
    }

    friend bool operator==(const Subject&, const Subject&) = default;
};

/// Subject id -> fold index.
struct FoldSplit {
    std::size_t n_folds = 0;
    std::map<std::string, std::size_t> assignment;

    std::size_t fold_of(const std::string& id) const {
        auto it = assignment.find(id);
        if (it == assignment.end()) {
            throw SplitError("subject '" + id + "' is not part of the fold split");
        }
        return it->second;
    }

    /// Ids of one fold, in ascending id order.
    std::vector<std::string> members(std::size_t fold) const {
        std::vector<std::string> out;
        for (const auto& [id, f] : assignment) {
            if (f == fold) {
                out.push_back(id);
            }
        }
        return out;
    }

    friend bool operator==(const FoldSplit&, const FoldSplit&) = default;
};

/// Seeded Fisher-Yates shuffle followed by round-robin assignment.
inline FoldSplit split_folds(const std::vector<std::string>& subject_ids, std::size_t n_folds,
                             std::uint64_t seed) {
    if (n_folds < 2) {
        throw SplitError("split_folds: need at least 2 folds");
    }
    if (subject_ids.size() < n_folds) {
        throw SplitError("split_folds: " + std::to_string(subject_ids.size()) +
                         " subjects cannot fill " + std::to_string(n_folds) + " folds");
    }
    std::set<std::string> unique(subject_ids.begin(), subject_ids.end());
    if (unique.size() != subject_ids.size()) {
        throw SplitError("split_folds: duplicate subject ids");
    }

    std::vector<std::size_t> order(subject_ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(derive_seed(seed, 0x5F01D5ULL));
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(order[i - 1], order[j]);
    }

    FoldSplit split;
    split.n_folds = n_folds;
    for (std::size_t i = 0; i < order.size(); ++i) {
        split.assignment[subject_ids[order[i]]] = i % n_folds;
    }
    return split;
}

}  // namespace segcal
