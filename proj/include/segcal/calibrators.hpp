#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "segcal/errors.hpp"
#include "segcal/grid.hpp"
#include "segcal/net.hpp"
#include "segcal/parallel.hpp"
#include "segcal/rng.hpp"
#include "segcal/train.hpp"

namespace segcal {

/// sigmoid(a*z + b) on top of the logit map.
struct PlattParams {
    double a = 1.0;
    double b = 0.0;

    friend bool operator==(const PlattParams&, const PlattParams&) = default;
};

/// Single-channel k x k convolution over the logit map, followed by a sigmoid.
struct AuxConvParams {
    std::size_t k = 5;
    std::vector<double> kernel;  // row-major k x k
    double bias = 0.0;

    /// Center tap 1, all others 0: reproduces the base probabilities.
    static AuxConvParams identity(std::size_t k) {
        validate_kernel_size(k);
        AuxConvParams p;
        p.k = k;
        p.kernel.assign(k * k, 0.0);
        p.kernel[(k / 2) * k + k / 2] = 1.0;
        return p;
    }

    static void validate_kernel_size(std::size_t k) {
        if (k == 0 || k % 2 == 0) {
            throw ParameterError("aux conv: kernel size must be odd and >= 1");
        }
    }

    void validate() const {
        validate_kernel_size(k);
        if (kernel.size() != k * k) {
            throw ParameterError("aux conv: kernel has wrong number of taps");
        }
    }

    ConvLayer as_layer() const {
        ConvLayer l(1, 1, k);
        l.weights = kernel;
        l.biases = {bias};
        return l;
    }

    friend bool operator==(const AuxConvParams&, const AuxConvParams&) = default;
};

/// Explicit widening of a Platt calibrator to a 1x1 aux-conv calibrator.
inline AuxConvParams to_aux_conv(const PlattParams& p) { return {1, {p.a}, p.b}; }

inline Grid2D apply_platt(const PlattParams& params, const Grid2D& logits) {
    Grid2D out(logits.height(), logits.width());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = sigmoid(params.a * logits[i] + params.b);
    }
    return out;
}

/// Pre-sigmoid output of the aux-conv calibrator (zero-padded logits).
inline Grid2D aux_conv_logits(const AuxConvParams& params, const Grid2D& logits) {
    params.validate();
    const auto layer = params.as_layer();
    std::vector<double> out(logits.size());
    detail::conv_forward_generic(layer, logits.data(), logits.height(), logits.width(), out.data());
    return Grid2D(logits.height(), logits.width(), std::move(out));
}

inline Grid2D apply_aux_conv(const AuxConvParams& params, const Grid2D& logits) {
    return sigmoid_map(aux_conv_logits(params, logits));
}

/// Optimizer schedule shared by the Platt and aux-conv fits.
struct CalibFitConfig {
    double learning_rate = 5e-3;
    std::size_t max_epochs = 50;
    std::size_t batch_size = 1;
    std::size_t plateau_patience = 5;
    double plateau_factor = 0.1;
    std::size_t early_stop_patience = 10;
    double min_improvement = 1e-6;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0) || !(plateau_factor > 0.0 && plateau_factor < 1.0) ||
            batch_size == 0) {
            throw ConfigError("calibrator fit: invalid optimizer settings");
        }
    }
};

template <class Params>
struct FitResult {
    Params params;
    double fit_loss = 0.0;  // voxel-mean CE over the fit subjects
    double val_loss = 0.0;
    std::size_t epochs = 0;
    std::vector<std::string> warnings;
};

namespace detail {

/// Mask-pooled CE and its gradient for a linear-in-theta calibrator.
using CalibLossFn = std::function<double(const std::vector<double>& theta,
                                         std::span<const Subject* const>, std::vector<double>*)>;

inline const Grid2D& require_logits(const Subject& s) {
    if (!s.logits) {
        throw DataError("calibrator: subject " + s.id + " has no cached logits");
    }
    return *s.logits;
}

inline bool labels_single_class(std::span<const Subject> subjects) {
    bool seen0 = false;
    bool seen1 = false;
    for (const auto& s : subjects) {
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            if (s.eval_mask[i] == 0.0) continue;
            (s.labels[i] != 0.0 ? seen1 : seen0) = true;
        }
    }
    return !(seen0 && seen1);
}

/// Adam with plateau decay and early stopping on the validation CE; returns the best theta.
inline std::vector<double> fit_theta(std::vector<double> theta, std::span<const Subject> fit,
                                     std::span<const Subject> val, const CalibFitConfig& config,
                                     const CalibLossFn& loss_fn, std::size_t* epochs_run) {
    config.validate();
    std::vector<const Subject*> all_val;
    for (const auto& s : val) all_val.push_back(&s);
    std::vector<double> m(theta.size(), 0.0);
    std::vector<double> v(theta.size(), 0.0);
    std::uint64_t step = 0;
    double lr = config.learning_rate;
    double best_val = loss_fn(theta, all_val, nullptr);
    std::vector<double> best = theta;
    std::size_t bad = 0;
    std::size_t plateau = 0;
    Rng rng(derive_seed(config.seed, 11));
    std::vector<std::size_t> order(fit.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t epoch = 0;
    for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        }
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<const Subject*> batch;
            for (std::size_t b = start; b < end; ++b) batch.push_back(&fit[order[b]]);
            std::vector<double> grad(theta.size(), 0.0);
            loss_fn(theta, batch, &grad);
            ++step;
            adam_update(theta, grad, m, v, step, lr);
        }
        const double val_loss = loss_fn(theta, all_val, nullptr);
        if (!std::isfinite(val_loss)) {
            throw NumericError("calibrator fit: validation loss is not finite");
        }
        if (val_loss < best_val - config.min_improvement) {
            bad = 0;
            plateau = 0;
        } else {
            ++bad;
            ++plateau;
        }
        if (val_loss < best_val) {
            best_val = val_loss;
            best = theta;
        }
        if (bad >= config.early_stop_patience) break;
        if (plateau >= config.plateau_patience) {
            lr *= config.plateau_factor;
            plateau = 0;
        }
    }
    if (epochs_run != nullptr) *epochs_run = std::min(epoch, config.max_epochs);
    return best;
}

inline double platt_loss(const PlattParams& p, std::span<const Subject* const> batch,
                         std::vector<double>* grad) {
    double total = 0.0;
    double ga = 0.0;
    double gb = 0.0;
    std::size_t n = 0;
    for (const Subject* s : batch) {
        const Grid2D& z = require_logits(*s);
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (s->eval_mask[i] == 0.0) continue;
            const double u = p.a * z[i] + p.b;
            const double y = s->labels[i];
            total += softplus(u) - y * u;
            const double r = sigmoid(u) - y;
            ga += r * z[i];
            gb += r;
            ++n;
        }
    }
    if (n == 0) throw MetricError("platt fit: empty mask");
    const double inv = 1.0 / static_cast<double>(n);
    if (grad != nullptr) {
        (*grad)[0] = ga * inv;
        (*grad)[1] = gb * inv;
    }
    return total * inv;
}

inline double aux_loss(const AuxConvParams& p, std::span<const Subject* const> batch,
                       std::vector<double>* grad) {
    const ConvLayer layer = p.as_layer();
    double total = 0.0;
    std::size_t n = 0;
    LayerGrad lg{std::vector<double>(p.kernel.size(), 0.0), {0.0}};
    for (const Subject* s : batch) {
        const Grid2D& z = require_logits(*s);
        const Grid2D u = aux_conv_logits(p, z);
        std::vector<double> r(z.size(), 0.0);
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (s->eval_mask[i] == 0.0) continue;
            const double y = s->labels[i];
            total += softplus(u[i]) - y * u[i];
            r[i] = sigmoid(u[i]) - y;
            ++n;
        }
        if (grad != nullptr) {
            conv_backward_generic(layer, z.data(), r.data(), z.height(), z.width(), &lg, nullptr);
        }
    }
    if (n == 0) throw MetricError("aux conv fit: empty mask");
    const double inv = 1.0 / static_cast<double>(n);
    if (grad != nullptr) {
        for (std::size_t j = 0; j < lg.weights.size(); ++j) (*grad)[j] = lg.weights[j] * inv;
        (*grad)[lg.weights.size()] = lg.biases[0] * inv;
    }
    return total * inv;
}

inline void check_fit_inputs(std::span<const Subject> fit, std::span<const Subject> val) {
    if (fit.empty() || val.empty()) {
        throw ValidationError("calibrator fit: need at least one fit and one validation subject");
    }
    for (const auto& s : fit) require_logits(s);
    for (const auto& s : val) require_logits(s);
}

}  // namespace detail

/// Voxel-mean masked CE of a Platt calibrator.
inline double platt_ce(const PlattParams& p, std::span<const Subject> subjects) {
    std::vector<const Subject*> ptrs;
    for (const auto& s : subjects) ptrs.push_back(&s);
    return detail::platt_loss(p, ptrs, nullptr);
}

inline double aux_conv_ce(const AuxConvParams& p, std::span<const Subject> subjects) {
    std::vector<const Subject*> ptrs;
    for (const auto& s : subjects) ptrs.push_back(&s);
    return detail::aux_loss(p, ptrs, nullptr);
}

inline PlattParams platt_from_theta(const std::vector<double>& t) { return {t[0], t[1]}; }

inline AuxConvParams aux_from_theta(std::size_t k, const std::vector<double>& t) {
    AuxConvParams p;
    p.k = k;
    p.kernel.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(k * k));
    p.bias = t[k * k];
    return p;
}

/// Fits (a, b) from (1, 0) by minimizing masked CE on `fit`, early-stopping on `val`.
inline FitResult<PlattParams> fit_platt(std::span<const Subject> fit, std::span<const Subject> val,
                                        const CalibFitConfig& config) {
    detail::check_fit_inputs(fit, val);
    FitResult<PlattParams> res;
    if (detail::labels_single_class(fit)) {
        res.warnings.push_back("degenerate labels: fit subjects contain a single class");
    }
    const auto theta = detail::fit_theta(
        {1.0, 0.0}, fit, val, config,
        [](const std::vector<double>& t, std::span<const Subject* const> batch,
           std::vector<double>* g) { return detail::platt_loss(platt_from_theta(t), batch, g); },
        &res.epochs);
    res.params = platt_from_theta(theta);
    res.fit_loss = platt_ce(res.params, fit);
    res.val_loss = platt_ce(res.params, val);
    return res;
}

/// Fits a k x k calibrator starting from the identity kernel; same schedule as fit_platt.
inline FitResult<AuxConvParams> fit_aux_conv(std::span<const Subject> fit,
                                             std::span<const Subject> val, std::size_t k,
                                             const CalibFitConfig& config) {
    AuxConvParams::validate_kernel_size(k);
    detail::check_fit_inputs(fit, val);
    for (const auto& s : fit) {
        if (s.height() <= k || s.width() <= k) {
            throw DimensionError("fit_aux_conv: grids must be larger than the kernel");
        }
    }
    FitResult<AuxConvParams> res;
    if (detail::labels_single_class(fit)) {
        res.warnings.push_back("degenerate labels: fit subjects contain a single class");
    }
    const auto init = AuxConvParams::identity(k);
    std::vector<double> theta = init.kernel;
    theta.push_back(init.bias);
    theta = detail::fit_theta(
        std::move(theta), fit, val, config,
        [k](const std::vector<double>& t, std::span<const Subject* const> batch,
            std::vector<double>* g) { return detail::aux_loss(aux_from_theta(k, t), batch, g); },
        &res.epochs);
    res.params = aux_from_theta(k, theta);
    res.fit_loss = aux_conv_ce(res.params, fit);
    res.val_loss = aux_conv_ce(res.params, val);
    return res;
}

struct McConfig {
    std::size_t n_samples = 20;
    DropoutConfig dropout;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    void validate() const {
        if (n_samples == 0) {
            throw ConfigError("mc_predict: need at least one sample");
        }
        dropout.validate();
    }
};

struct McPrediction {
    Grid2D mean_prob;
    Grid2D per_voxel_std;  // population std over the T samples
};

/// T stochastic passes; sample t draws its dropout masks from derive_seed(seed, t), and samples are
/// combined in index order, so the result does not depend on the thread count.
inline McPrediction mc_predict(const NetParams& model, const Grid2D& image, const McConfig& config) {
    config.validate();
    if (!config.dropout.active()) {
        // Every pass would be identical; averaging them would only add rounding.
        return {predict_probabilities(model, image), Grid2D(image.height(), image.width(), 0.0)};
    }
    const std::size_t t_count = config.n_samples;
    std::vector<Grid2D> samples(t_count);
    parallel_for(t_count, config.threads, [&](std::size_t t) {
        Rng rng(derive_seed(config.seed, t));
        auto fw = forward(model, image, config.dropout,
                          config.dropout.active() ? &rng : nullptr);
        samples[t] = sigmoid_map(fw.logits);
    });
    McPrediction out{Grid2D(image.height(), image.width(), 0.0),
                     Grid2D(image.height(), image.width(), 0.0)};
    const double inv_t = 1.0 / static_cast<double>(t_count);
    for (const auto& s : samples) {
        for (std::size_t i = 0; i < s.size(); ++i) out.mean_prob[i] += s[i];
    }
    for (std::size_t i = 0; i < out.mean_prob.size(); ++i) {
        out.mean_prob[i] = std::clamp(out.mean_prob[i] * inv_t, 0.0, 1.0);
    }
    if (t_count > 1) {
        for (const auto& s : samples) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                const double d = s[i] - out.mean_prob[i];
                out.per_voxel_std[i] += d * d;
            }
        }
        for (double& v : out.per_voxel_std.values()) v = std::sqrt(v * inv_t);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Uniform predictor over all methods

enum class Method { BASE, PLATT, AUX, FINETUNE, MC_DECODER, MC_CENTER };

inline constexpr std::array<Method, 6> kAllMethods{Method::BASE,     Method::PLATT,
                                                   Method::AUX,      Method::FINETUNE,
                                                   Method::MC_DECODER, Method::MC_CENTER};

inline const char* to_string(Method m) {
    switch (m) {
        case Method::BASE: return "BASE";
        case Method::PLATT: return "PLATT";
        case Method::AUX: return "AUX";
        case Method::FINETUNE: return "FINETUNE";
        case Method::MC_DECODER: return "MC_DECODER";
        case Method::MC_CENTER: return "MC_CENTER";
    }
    return "?";
}

inline bool is_mc(Method m) noexcept { return m == Method::MC_DECODER || m == Method::MC_CENTER; }

struct CalibrationConfig {
    CalibFitConfig fit;
    std::size_t aux_kernel = 5;
    /// Learning rate is replaced by the regime-specific fine-tuning rate.
    TrainConfig finetune{LossKind::CE, 1e-4, 200, 1, 5, 0.1, 10, 1e-4, 0};
    double dropout_rate = 0.2;
    std::vector<double> mc_learning_rates{1e-3, 1e-4, 1e-5};
    TrainConfig mc_retrain{LossKind::CE, 1e-3, 50, 2, 5, 0.1, 10, 1e-4, 0};
    std::size_t mc_samples = 20;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    void validate() const {
        fit.validate();
        AuxConvParams::validate_kernel_size(aux_kernel);
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw ConfigError("calibration: dropout_rate must lie in [0,1)");
        }
        if (mc_learning_rates.empty()) {
            throw ConfigError("calibration: mc_learning_rates must not be empty");
        }
        if (mc_samples == 0) {
            throw ConfigError("calibration: mc_samples must be >= 1");
        }
        if (finetune.loss != LossKind::CE) {
            throw ConfigError("calibration: fine-tuning must use the CE loss");
        }
    }
};

/// Maps a subject to a calibrated class-1 probability map.
class CalibratedPredictor {
public:
    CalibratedPredictor() = default;

    static CalibratedPredictor base(NetParams net) {
        CalibratedPredictor p;
        p.method_ = Method::BASE;
        p.net_ = std::move(net);
        return p;
    }
    static CalibratedPredictor platt(NetParams net, PlattParams params) {
        CalibratedPredictor p = base(std::move(net));
        p.method_ = Method::PLATT;
        p.platt_ = params;
        return p;
    }
    static CalibratedPredictor aux(NetParams net, AuxConvParams params) {
        CalibratedPredictor p = base(std::move(net));
        p.method_ = Method::AUX;
        p.aux_ = std::move(params);
        return p;
    }
    static CalibratedPredictor finetuned(NetParams net) {
        CalibratedPredictor p = base(std::move(net));
        p.method_ = Method::FINETUNE;
        return p;
    }
    static CalibratedPredictor mc(Method method, NetParams net, McConfig config) {
        if (!is_mc(method)) {
            throw ConfigError("CalibratedPredictor::mc: not an MC method");
        }
        CalibratedPredictor p = base(std::move(net));
        p.method_ = method;
        p.mc_ = config;
        return p;
    }

    Method method() const noexcept { return method_; }
    const NetParams& net() const noexcept { return net_; }
    const std::optional<PlattParams>& platt_params() const noexcept { return platt_; }
    const std::optional<AuxConvParams>& aux_params() const noexcept { return aux_; }
    const std::optional<McConfig>& mc_config() const noexcept { return mc_; }

    /// MC seeds are derived from the subject id so results do not depend on evaluation order.
    Grid2D predict(const Subject& s) const {
        switch (method_) {
            case Method::BASE:
            case Method::FINETUNE: return predict_probabilities(net_, s.image);
            case Method::PLATT: return apply_platt(*platt_, forward_logits(net_, s.image));
            case Method::AUX: return apply_aux_conv(*aux_, forward_logits(net_, s.image));
            case Method::MC_DECODER:
            case Method::MC_CENTER: {
                McConfig cfg = *mc_;
                cfg.seed = derive_seed(mc_->seed, fnv1a(s.id));
                return mc_predict(net_, s.image, cfg).mean_prob;
            }
        }
        throw InternalError("CalibratedPredictor: unknown method");
    }

private:
    Method method_ = Method::BASE;
    NetParams net_;
    std::optional<PlattParams> platt_;
    std::optional<AuxConvParams> aux_;
    std::optional<McConfig> mc_;
};

struct PipelineFit {
    CalibratedPredictor predictor;
    std::vector<std::string> notes;
    /// Calibration-split CE of the fitted calibrator (Platt/aux only).
    std::optional<double> fit_loss;
};

/// Copies of the subjects with the base model's logits cached.
inline std::vector<Subject> with_logits(const NetParams& net, std::span<const Subject> subjects) {
    std::vector<Subject> out(subjects.begin(), subjects.end());
    for (auto& s : out) s.logits = forward_logits(net, s.image);
    return out;
}

/// Fits one calibration method for a fold. Only `calib_fit` / `calib_val` are touched; evaluation
/// subjects never enter here.
inline PipelineFit calibrate_pipeline(Method method, Regime regime, const NetParams& base_weights,
                                      std::span<const Subject> calib_fit,
                                      std::span<const Subject> calib_val,
                                      const CalibrationConfig& config) {
    config.validate();
    PipelineFit out;
    switch (method) {
        case Method::BASE:
            out.predictor = CalibratedPredictor::base(base_weights);
            return out;
        case Method::PLATT: {
            const auto fit = with_logits(base_weights, calib_fit);
            const auto val = with_logits(base_weights, calib_val);
            auto res = fit_platt(fit, val, config.fit);
            out.predictor = CalibratedPredictor::platt(base_weights, res.params);
            out.notes = res.warnings;
            out.fit_loss = res.fit_loss;
            return out;
        }
        case Method::AUX: {
            const auto fit = with_logits(base_weights, calib_fit);
            const auto val = with_logits(base_weights, calib_val);
            auto res = fit_aux_conv(fit, val, config.aux_kernel, config.fit);
            out.predictor = CalibratedPredictor::aux(base_weights, res.params);
            out.notes = res.warnings;
            out.fit_loss = res.fit_loss;
            return out;
        }
        case Method::FINETUNE: {
            TrainConfig tc = config.finetune;
            tc.learning_rate = finetune_learning_rate(regime);
            tc.seed = derive_seed(config.seed, 31);
            out.predictor = CalibratedPredictor::finetuned(
                finetune_last_layer(base_weights, calib_fit, calib_val, tc));
            return out;
        }
        case Method::MC_DECODER:
        case Method::MC_CENTER: {
            const DropoutConfig dropout = method == Method::MC_DECODER
                                              ? DropoutConfig::decoder(config.dropout_rate)
                                              : DropoutConfig::center(config.dropout_rate);
            TrainConfig tc = config.mc_retrain;
            tc.seed = derive_seed(config.seed, method == Method::MC_DECODER ? 41 : 43);
            auto res = insert_dropout_and_retrain(base_weights, dropout, calib_fit, calib_val,
                                                  regime_loss(regime), config.mc_learning_rates, tc);
            std::string note = std::string(to_string(method)) + ": selected lr " +
                               std::to_string(res.learning_rate) + " by validation loss (";
            for (std::size_t c = 0; c < res.candidate_val_loss.size(); ++c) {
                note += (c ? ", " : "") + std::to_string(res.candidate_val_loss[c]);
            }
            out.notes.push_back(note + ")");
            McConfig mc{config.mc_samples, dropout, derive_seed(config.seed, 47), 1};
            out.predictor = CalibratedPredictor::mc(method, std::move(res.params), mc);
            return out;
        }
    }
    throw ConfigError("calibrate_pipeline: unknown method");
}

}  // namespace segcal
