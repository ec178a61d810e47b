#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "segcal/errors.hpp"
#include "segcal/grid.hpp"
#include "segcal/metrics.hpp"
#include "segcal/net.hpp"
#include "segcal/rng.hpp"

namespace segcal {

struct TrainConfig {
    LossKind loss = LossKind::CE;
    double learning_rate = 5e-3;
    std::size_t max_epochs = 50;
    std::size_t batch_size = 4;
    std::size_t plateau_patience = 5;
    double plateau_factor = 0.1;
    std::size_t early_stop_patience = 10;
    /// A validation decrease larger than this counts as improvement.
    double min_improvement = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) {
            throw ConfigError("train: learning_rate must be > 0");
        }
        if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
            throw ConfigError("train: plateau_factor must lie in (0,1)");
        }
        if (batch_size == 0) {
            throw ConfigError("train: batch_size must be >= 1");
        }
    }
};

struct TrainResult {
    NetParams params;
    TrainingLog log;
};

/// Mean per-subject loss without dropout.
inline double evaluate_loss(const NetParams& params, std::span<const Subject> subjects,
                            LossKind loss) {
    double total = 0.0;
    for (const auto& s : subjects) {
        const auto logits = forward_logits(params, s.image);
        total += loss_and_grad(loss, logits, s.labels, s.eval_mask).loss;
    }
    return total / static_cast<double>(subjects.size());
}

inline Grid2D predict_probabilities(const NetParams& params, const Grid2D& image) {
    return sigmoid_map(forward_logits(params, image));
}

/// Mean Dice of the thresholded deterministic prediction.
inline double mean_dice(const NetParams& params, std::span<const Subject> subjects) {
    double total = 0.0;
    for (const auto& s : subjects) {
        total += dice_score(predicted_class(predict_probabilities(params, s.image)), s.labels);
    }
    return total / static_cast<double>(subjects.size());
}

/// Mini-batch Adam over whole subjects with plateau learning-rate decay and early stopping on the
/// validation loss. Returns the best-validation weights; the starting weights count as epoch 0.
inline TrainResult train(const NetParams& model, std::span<const Subject> train_subjects,
                         std::span<const Subject> val_subjects, const TrainConfig& config,
                         const DropoutConfig& dropout = {}) {
    config.validate();
    dropout.validate();
    if (config.max_epochs == 0) {
        return {model, {}};
    }
    if (train_subjects.empty() || val_subjects.empty()) {
        throw ValidationError("train: training and validation sets must be nonempty");
    }

    NetParams params = model;
    NetParams best = model;
    AdamState adam = AdamState::for_params(params);
    Rng shuffle_rng(derive_seed(config.seed, 1));
    Rng dropout_rng(derive_seed(config.seed, 2));
    TrainingLog log;

    double best_val = evaluate_loss(params, val_subjects, config.loss);
    if (!std::isfinite(best_val)) {
        throw TrainingError("train: initial validation loss is not finite", log);
    }
    double lr = config.learning_rate;
    std::size_t bad_epochs = 0;
    std::size_t plateau_epochs = 0;

    std::vector<std::size_t> order(train_subjects.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);
        }
        double train_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double scale = 1.0 / static_cast<double>(end - start);
            NetGradients acc = zero_gradients(params);
            for (std::size_t b = start; b < end; ++b) {
                const Subject& s = train_subjects[order[b]];
                auto fw = forward(params, s.image, dropout, dropout.active() ? &dropout_rng : nullptr);
                auto lg = loss_and_grad(config.loss, fw.logits, s.labels, s.eval_mask);
                if (!std::isfinite(lg.loss)) {
                    throw TrainingError("train: non-finite training loss at epoch " +
                                            std::to_string(epoch),
                                        log);
                }
                train_loss += lg.loss;
                const auto g = backward(params, fw.cache, lg.dlogits);
                for (std::size_t l = 0; l < kNumLayers; ++l) {
                    for (std::size_t j = 0; j < g[l].weights.size(); ++j)
                        acc[l].weights[j] += scale * g[l].weights[j];
                    for (std::size_t j = 0; j < g[l].biases.size(); ++j)
                        acc[l].biases[j] += scale * g[l].biases[j];
                }
            }
            adam_step(params, acc, adam, lr);
        }
        train_loss /= static_cast<double>(order.size());

        const double val = evaluate_loss(params, val_subjects, config.loss);
        log.push_back({static_cast<int>(epoch), train_loss, val, lr});
        if (!std::isfinite(val) || !params.all_finite()) {
            throw TrainingError("train: diverged at epoch " + std::to_string(epoch), log);
        }

        if (val < best_val - config.min_improvement) {
            bad_epochs = 0;
            plateau_epochs = 0;
        } else {
            ++bad_epochs;
            ++plateau_epochs;
        }
        if (val < best_val) {
            best_val = val;
            best = params;
        }
        if (bad_epochs >= config.early_stop_patience) {
            break;
        }
        if (plateau_epochs >= config.plateau_patience) {
            lr *= config.plateau_factor;
            plateau_epochs = 0;
        }
    }
    return {best, log};
}

/// Weight regimes of the base model.
enum class Regime { CE, CE_SD, SD };

inline const char* to_string(Regime r) {
    switch (r) {
        case Regime::CE: return "CE";
        case Regime::CE_SD: return "CE_SD";
        case Regime::SD: return "SD";
    }
    return "?";
}

inline bool is_sd_based(Regime r) noexcept { return r != Regime::CE; }

inline LossKind regime_loss(Regime r) noexcept {
    return is_sd_based(r) ? LossKind::SoftDice : LossKind::CE;
}

/// Trains a base model from `init` under one regime. CE_SD runs `pretrain_epochs` of CE first.
inline TrainResult train_regime(const NetParams& init, Regime regime,
                                std::span<const Subject> train_subjects,
                                std::span<const Subject> val_subjects, TrainConfig config,
                                std::size_t pretrain_epochs) {
    if (regime == Regime::CE_SD && pretrain_epochs > 0) {
        TrainConfig pre = config;
        pre.loss = LossKind::CE;
        pre.max_epochs = pretrain_epochs;
        auto stage1 = train(init, train_subjects, val_subjects, pre);
        config.loss = LossKind::SoftDice;
        config.seed = derive_seed(config.seed, 7);
        auto stage2 = train(stage1.params, train_subjects, val_subjects, config);
        stage1.log.insert(stage1.log.end(), stage2.log.begin(), stage2.log.end());
        return {stage2.params, stage1.log};
    }
    config.loss = regime_loss(regime);
    return train(init, train_subjects, val_subjects, config);
}

/// Initial fine-tuning learning rate by weight regime.
inline double finetune_learning_rate(Regime r) noexcept { return is_sd_based(r) ? 1e-3 : 1e-4; }

/// Freezes L1-L3 and retrains the logit head with CE. The returned model keeps the input's
/// freeze flags.
inline NetParams finetune_last_layer(const NetParams& model, std::span<const Subject> train_subjects,
                                     std::span<const Subject> val_subjects, const TrainConfig& config) {
    if (config.loss != LossKind::CE) {
        throw ConfigError("finetune_last_layer: fine-tuning uses the CE loss");
    }
    NetParams work = model;
    work.set_frozen({true, true, true, false});
    auto res = train(work, train_subjects, val_subjects, config);
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        res.params.layers[l].frozen = model.layers[l].frozen;
    }
    return res.params;
}

struct RetrainResult {
    NetParams params;
    double learning_rate = 0.0;
    std::vector<double> candidate_val_loss;
};

/// Inserts dropout at the configured sites, freezes every layer before the first site and retrains
/// the rest once per candidate learning rate. The candidate with the lowest validation loss wins
/// (ties go to the earlier candidate).
inline RetrainResult insert_dropout_and_retrain(const NetParams& model, const DropoutConfig& dropout,
                                                std::span<const Subject> train_subjects,
                                                std::span<const Subject> val_subjects, LossKind loss,
                                                const std::vector<double>& lr_candidates,
                                                TrainConfig config) {
    if (lr_candidates.empty()) {
        throw ConfigError("insert_dropout_and_retrain: need at least one learning rate");
    }
    if (!dropout.any_site()) {
        throw ConfigError("insert_dropout_and_retrain: no dropout site selected");
    }
    const std::size_t first = dropout.first_layer_after_site();
    NetParams work = model;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        work.layers[l].frozen = l < first;
    }
    config.loss = loss;

    RetrainResult best;
    double best_val = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lr_candidates.size(); ++c) {
        TrainConfig cfg = config;
        cfg.learning_rate = lr_candidates[c];
        cfg.seed = derive_seed(config.seed, 100 + c);
        auto res = train(work, train_subjects, val_subjects, cfg, dropout);
        const double val = evaluate_loss(res.params, val_subjects, loss);
        best.candidate_val_loss.push_back(val);
        if (val < best_val) {
            best_val = val;
            best.params = res.params;
            best.learning_rate = lr_candidates[c];
        }
    }
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        best.params.layers[l].frozen = model.layers[l].frozen;
    }
    return best;
}

}  // namespace segcal
