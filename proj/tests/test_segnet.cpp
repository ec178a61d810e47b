#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "segcal/net.hpp"
#include "segcal/synth.hpp"
#include "segcal/train.hpp"

using namespace segcal;

namespace {

Grid2D random_grid(std::size_t h, std::size_t w, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Grid2D g(h, w);
    for (double& v : g.values()) v = rng.uniform(lo, hi);
    return g;
}

Grid2D random_labels(std::size_t h, std::size_t w, Rng& rng) {
    Grid2D g(h, w);
    for (double& v : g.values()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    return g;
}

NetParams random_params(std::uint64_t seed) {
    NetParams p = init_params(seed);
    Rng rng(seed + 1000);
    for (auto& l : p.layers)
        for (double& b : l.biases) b = rng.uniform(-0.1, 0.1);
    return p;
}

// Plain nested-loop network evaluation: zero padding, ReLU after L1..L3.
using Maps = std::vector<std::vector<double>>;  // [channel][y*w+x]

Maps naive_conv(const ConvLayer& L, const Maps& in, std::size_t h, std::size_t w) {
    Maps out(L.out_ch, std::vector<double>(h * w, 0.0));
    const long r = static_cast<long>(L.k / 2);
    for (std::size_t o = 0; o < L.out_ch; ++o) {
        for (long y = 0; y < static_cast<long>(h); ++y) {
            for (long x = 0; x < static_cast<long>(w); ++x) {
                double acc = L.biases[o];
                for (std::size_t i = 0; i < L.in_ch; ++i) {
                    for (long ky = 0; ky < static_cast<long>(L.k); ++ky) {
                        for (long kx = 0; kx < static_cast<long>(L.k); ++kx) {
                            const long yy = y + ky - r;
                            const long xx = x + kx - r;
                            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                            acc += L.w(o, i, static_cast<std::size_t>(ky), static_cast<std::size_t>(kx)) *
                                   in[i][static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
                        }
                    }
                }
                out[o][static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = acc;
            }
        }
    }
    return out;
}

std::vector<double> naive_forward(const NetParams& p, const Grid2D& img) {
    Maps cur{std::vector<double>(img.values().begin(), img.values().end())};
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        cur = naive_conv(p.layers[l], cur, img.height(), img.width());
        if (l + 1 < kNumLayers)
            for (auto& ch : cur)
                for (double& v : ch) v = std::max(v, 0.0);
    }
    return cur[0];
}

// Relative error with a small absolute floor for gradients that are essentially zero.
double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7});
}

struct GradCase {
    LossKind loss;
    DropoutConfig dropout;
};

struct LossProbe {
    double loss;
    std::vector<bool> relu_on;  // sign pattern of every hidden pre-activation
};

LossProbe net_loss(const NetParams& p, const Grid2D& img, const Grid2D& y, const Grid2D& m, const GradCase& c,
                   std::uint64_t mask_seed) {
    Rng rng(mask_seed);  // same seed => same dropout masks for every evaluation
    const auto fw = forward(p, img, c.dropout, c.dropout.active() ? &rng : nullptr);
    LossProbe out{loss_and_grad(c.loss, fw.logits, y, m).loss, {}};
    for (const auto& a : fw.cache.activations)
        for (double v : a) out.relu_on.push_back(v > 0.0);
    return out;
}

void check_network_gradients(std::uint64_t seed, const GradCase& c) {
    Rng rng(seed);
    const NetParams p = random_params(seed);
    const Grid2D img = random_grid(6, 6, rng);
    const Grid2D y = random_labels(6, 6, rng);
    Grid2D m(6, 6, 1.0);
    m[0] = 0.0;
    const std::uint64_t mask_seed = seed * 77 + 5;

    Rng fw_rng(mask_seed);
    const auto fw = forward(p, img, c.dropout, c.dropout.active() ? &fw_rng : nullptr);
    const auto lg = loss_and_grad(c.loss, fw.logits, y, m);
    const auto g = backward(p, fw.cache, lg.dlogits);
    const auto pattern = net_loss(p, img, y, m, c, mask_seed).relu_on;

    // A central difference whose stencil flips a ReLU measures a different piece of the
    // piecewise-smooth loss; such parameters are skipped and counted.
    constexpr double h = 1e-4;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        for (int which = 0; which < 2; ++which) {
            const std::size_t n = which == 0 ? p.layers[l].weights.size() : p.layers[l].biases.size();
            for (std::size_t j = 0; j < n; ++j) {
                NetParams plus = p;
                NetParams minus = p;
                (which == 0 ? plus.layers[l].weights : plus.layers[l].biases)[j] += h;
                (which == 0 ? minus.layers[l].weights : minus.layers[l].biases)[j] -= h;
                const auto lp = net_loss(plus, img, y, m, c, mask_seed);
                const auto lm = net_loss(minus, img, y, m, c, mask_seed);
                if (lp.relu_on != pattern || lm.relu_on != pattern) {
                    ++skipped;
                    continue;
                }
                ++checked;
                const double fd = (lp.loss - lm.loss) / (2 * h);
                const double an = (which == 0 ? g[l].weights : g[l].biases)[j];
                EXPECT_LT(rel_err(an, fd), 1e-5)
                    << "seed " << seed << " layer " << l << (which == 0 ? " weight " : " bias ") << j
                    << " analytic " << an << " numeric " << fd;
            }
        }
    }
    EXPECT_LT(skipped * 20, checked) << "too many parameters straddle a ReLU kink";
}

}  // namespace

TEST(Forward, ZeroNetworkGivesZeroLogits) {
    NetParams p;
    Rng rng(1);
    const auto z = forward_logits(p, random_grid(8, 8, rng));
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
    const auto q = sigmoid_map(z);
    for (double v : q.values()) EXPECT_EQ(v, 0.5);
}

TEST(Forward, MatchesNaiveConvolutionOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 50);
        const NetParams p = random_params(seed);
        for (auto [h, w] : {std::pair{8u, 8u}, std::pair{5u, 11u}, std::pair{3u, 3u}}) {
            const Grid2D img = random_grid(h, w, rng);
            const auto got = forward_logits(p, img);
            const auto want = naive_forward(p, img);
            for (std::size_t i = 0; i < want.size(); ++i) {
                EXPECT_LE(std::abs(got[i] - want[i]), 1e-10 * std::max(1.0, std::abs(want[i])));
            }
        }
    }
}

TEST(Forward, ZeroRateDropoutIsIdentity) {
    const NetParams p = random_params(3);
    Rng rng(3);
    const Grid2D img = random_grid(10, 9, rng);
    const auto plain = forward_logits(p, img);
    for (auto d : {DropoutConfig::decoder(0.0), DropoutConfig::center(0.0), DropoutConfig{{true, true, true}, 0.0}}) {
        Rng r(8);
        EXPECT_EQ(forward(p, img, d, &r).logits, plain);
        EXPECT_EQ(forward(p, img, d, nullptr).logits, plain);
    }
}

TEST(Forward, InputValidation) {
    const NetParams p = random_params(0);
    EXPECT_THROW(forward_logits(p, make_grid(2, 5, 0.0)), DimensionError);
    EXPECT_THROW(forward(p, make_grid(5, 5, 0.0), DropoutConfig::decoder(0.3), nullptr), ParameterError);
    EXPECT_THROW(DropoutConfig::decoder(1.0).validate(), ParameterError);
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
    const NetParams p = random_params(4);
    Rng rng(4);
    const Grid2D img = random_grid(6, 6, rng);
    const DropoutConfig d{{false, false, true}, 0.3};
    const auto clean = forward(p, img).cache.activations[2];
    std::vector<double> sum(clean.size(), 0.0);
    constexpr int kDraws = 10000;
    Rng dr(44);
    for (int t = 0; t < kDraws; ++t) {
        const auto fw = forward(p, img, d, &dr);
        for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += fw.cache.inputs[3][j];
    }
    std::size_t within = 0;
    std::size_t active = 0;
    for (std::size_t j = 0; j < sum.size(); ++j) {
        if (clean[j] == 0.0) {
            EXPECT_EQ(sum[j], 0.0);
            continue;
        }
        ++active;
        const double se = clean[j] * std::sqrt(d.rate / (1.0 - d.rate)) / std::sqrt(double(kDraws));
        if (std::abs(sum[j] / kDraws - clean[j]) <= 3.0 * se) ++within;
    }
    ASSERT_GT(active, 0u);
    EXPECT_GE(double(within) / double(active), 0.98);
}

TEST(CeLoss, ClosedForms) {
    const auto r = ce_loss_and_grad(make_grid(1, 1, 0.0), make_grid(1, 1, 1.0), make_grid(1, 1, 1.0));
    EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
    EXPECT_NEAR(r.dlogits[0], -0.5, 1e-15);

    Grid2D z(1, 2, std::vector<double>{40.0, -40.0});
    Grid2D y(1, 2, std::vector<double>{1.0, 0.0});
    EXPECT_LE(ce_loss_and_grad(z, y, make_grid(1, 2, 1.0)).loss, 1e-10);
    EXPECT_THROW(ce_loss_and_grad(z, y, make_grid(1, 2, 0.0)), MetricError);
}

TEST(CeLoss, MaskedVoxelsAreIgnored) {
    Rng rng(2);
    const Grid2D z = random_grid(4, 4, rng, -3, 3);
    const Grid2D y = random_labels(4, 4, rng);
    Grid2D m(4, 4, 1.0);
    m[5] = 0.0;
    Grid2D z2 = z;
    z2[5] = 100.0;
    const auto a = ce_loss_and_grad(z, y, m);
    const auto b = ce_loss_and_grad(z2, y, m);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.dlogits[5], 0.0);
}

TEST(SoftDiceLoss, ClosedForms) {
    // Binary p equal to y: saturate the sigmoid exactly with huge logits.
    Grid2D y(2, 3, std::vector<double>{1, 0, 1, 1, 0, 0});
    Grid2D z(2, 3);
    for (std::size_t i = 0; i < 6; ++i) z[i] = y[i] == 1.0 ? 800.0 : -800.0;
    const Grid2D m(2, 3, 1.0);
    EXPECT_EQ(softdice_loss_and_grad(z, y, m).loss, 0.0);

    Grid2D zi(2, 3);
    for (std::size_t i = 0; i < 6; ++i) zi[i] = y[i] == 1.0 ? -800.0 : 800.0;
    // I = 0, S_p + S_y = N.
    EXPECT_NEAR(softdice_loss_and_grad(zi, y, m).loss, 1.0 - 1.0 / (6.0 + 1.0), 1e-15);
}

TEST(SoftDiceLoss, BoundedInUnitInterval) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(s);
        const auto r = softdice_loss_and_grad(random_grid(5, 5, rng, -6, 6), random_labels(5, 5, rng),
                                              make_grid(5, 5, 1.0));
        EXPECT_GE(r.loss, 0.0);
        EXPECT_LE(r.loss, 1.0);
    }
}

TEST(LossGradients, FiniteDifferencesOnLogits) {
    for (LossKind kind : {LossKind::CE, LossKind::SoftDice}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            Rng rng(seed);
            const Grid2D z = random_grid(5, 5, rng, -3, 3);
            const Grid2D y = random_labels(5, 5, rng);
            Grid2D m(5, 5, 1.0);
            m[7] = 0.0;
            const auto an = loss_and_grad(kind, z, y, m);
            constexpr double h = 1e-5;
            for (std::size_t i = 0; i < z.size(); ++i) {
                Grid2D zp = z;
                Grid2D zm = z;
                zp[i] += h;
                zm[i] -= h;
                const double fd = (loss_and_grad(kind, zp, y, m).loss - loss_and_grad(kind, zm, y, m).loss) / (2 * h);
                if (m[i] == 0.0) {
                    EXPECT_EQ(an.dlogits[i], 0.0);
                    continue;
                }
                EXPECT_LT(rel_err(an.dlogits[i], fd), 1e-6) << "loss " << int(kind) << " seed " << seed << " i " << i;
            }
        }
    }
}

TEST(Backward, FiniteDifferencesAllLayersCe) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) check_network_gradients(seed, {LossKind::CE, {}});
}

TEST(Backward, FiniteDifferencesAllLayersSoftDice) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) check_network_gradients(seed, {LossKind::SoftDice, {}});
}

TEST(Backward, FiniteDifferencesWithFixedDropoutMasks) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        check_network_gradients(seed, {LossKind::CE, DropoutConfig::decoder(0.3)});
        check_network_gradients(seed, {LossKind::SoftDice, DropoutConfig::center(0.3)});
        check_network_gradients(seed, {LossKind::CE, DropoutConfig{{true, true, true}, 0.5}});
    }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    const NetParams p = random_params(1);
    Rng rng(1);
    const auto fw = forward(p, random_grid(6, 6, rng));
    const auto g = backward(p, fw.cache, make_grid(6, 6, 0.0));
    for (const auto& lg : g) {
        for (double v : lg.weights) EXPECT_EQ(v, 0.0);
        for (double v : lg.biases) EXPECT_EQ(v, 0.0);
    }
}

TEST(Backward, FrozenLayersGetNoGradient) {
    NetParams p = random_params(2);
    p.set_frozen({true, true, true, false});
    Rng rng(2);
    const Grid2D img = random_grid(6, 6, rng);
    const auto fw = forward(p, img);
    const auto lg = ce_loss_and_grad(fw.logits, random_labels(6, 6, rng), make_grid(6, 6, 1.0));
    const auto g = backward(p, fw.cache, lg.dlogits);
    for (std::size_t l = 0; l < 3; ++l) {
        for (double v : g[l].weights) EXPECT_EQ(v, 0.0);
        for (double v : g[l].biases) EXPECT_EQ(v, 0.0);
    }
    double norm = 0.0;
    for (double v : g[3].weights) norm += std::abs(v);
    EXPECT_GT(norm, 0.0);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    for (double lr : {1e-3, 5e-3, 0.1}) {
        std::vector<double> p{0.0};
        std::vector<double> m{0.0};
        std::vector<double> v{0.0};
        adam_update(p, {1.0}, m, v, 1, lr);
        EXPECT_GT(std::abs(p[0]), 0.99 * lr);
        EXPECT_LE(std::abs(p[0]), lr);
        EXPECT_LT(p[0], 0.0);
    }
}

TEST(Adam, ZeroGradientAndFrozenLayersUnchanged) {
    NetParams p = random_params(5);
    p.layers[1].frozen = true;
    const NetParams before = p;
    auto st = AdamState::for_params(p);
    auto g = zero_gradients(p);
    adam_step(p, g, st, 1e-2);
    EXPECT_EQ(p, before);

    for (auto& lg : g) {
        for (double& v : lg.weights) v = 0.5;
        for (double& v : lg.biases) v = -0.5;
    }
    adam_step(p, g, st, 1e-2);
    EXPECT_EQ(p.layers[1], before.layers[1]);
    EXPECT_NE(p.layers[0], before.layers[0]);
}

// ---------------------------------------------------------------------------------------------
// Training

class TrainingTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = new std::vector<Subject>(render_dataset(SynthConfig{}, 50));
    }
    static void TearDownTestSuite() {
        delete data_;
        data_ = nullptr;
    }
    static std::span<const Subject> train_set() { return {data_->data(), 40}; }
    static std::span<const Subject> val_set() { return {data_->data() + 40, 10}; }
    static std::vector<Subject>* data_;
};
std::vector<Subject>* TrainingTest::data_ = nullptr;

TEST_F(TrainingTest, ZeroEpochsIsNoOp) {
    const NetParams p = init_params(1);
    TrainConfig c;
    c.max_epochs = 0;
    const auto r = train(p, train_set(), val_set(), c);
    EXPECT_EQ(r.params, p);
    EXPECT_TRUE(r.log.empty());
}

TEST_F(TrainingTest, CeAndSoftDiceReachUsefulDice) {
    TrainConfig c;
    c.seed = 3;
    const auto ce = train_regime(init_params(3), Regime::CE, train_set(), val_set(), c, 10);
    const double dice_ce = mean_dice(ce.params, val_set());
    EXPECT_GE(dice_ce, 0.80);
    EXPECT_LE(ce.log.size(), 50u);

    const auto sd = train_regime(init_params(3), Regime::SD, train_set(), val_set(), c, 10);
    EXPECT_GE(mean_dice(sd.params, val_set()), dice_ce - 0.02);
}

TEST_F(TrainingTest, DeterministicAndLogged) {
    TrainConfig c;
    c.max_epochs = 3;
    c.seed = 9;
    const auto a = train(init_params(2), train_set().first(8), val_set(), c);
    const auto b = train(init_params(2), train_set().first(8), val_set(), c);
    EXPECT_EQ(a.params, b.params);
    ASSERT_EQ(a.log.size(), 3u);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        EXPECT_EQ(a.log[i].epoch, static_cast<int>(i + 1));
        EXPECT_EQ(a.log[i].val_loss, b.log[i].val_loss);
        EXPECT_TRUE(std::isfinite(a.log[i].train_loss));
    }
}

TEST_F(TrainingTest, ReturnsBestValidationWeights) {
    TrainConfig c;
    c.max_epochs = 6;
    c.seed = 4;
    c.min_improvement = 0.0;
    const NetParams init = init_params(4);
    const auto r = train(init, train_set().first(8), val_set(), c);
    double best = evaluate_loss(init, val_set(), c.loss);
    for (const auto& e : r.log) best = std::min(best, e.val_loss);
    EXPECT_EQ(evaluate_loss(r.params, val_set(), c.loss), best);
}

TEST_F(TrainingTest, FrozenLayersStayBitIdentical) {
    NetParams p = init_params(6);
    p.set_frozen({true, false, true, false});
    TrainConfig c;
    c.max_epochs = 2;
    const auto r = train(p, train_set().first(6), val_set().first(3), c);
    EXPECT_EQ(r.params.layers[0], p.layers[0]);
    EXPECT_EQ(r.params.layers[2], p.layers[2]);
    EXPECT_NE(r.params.layers[1].weights, p.layers[1].weights);
}

TEST_F(TrainingTest, FinetuneChangesOnlyTheHead) {
    TrainConfig base_cfg;
    base_cfg.max_epochs = 5;
    const auto base = train_regime(init_params(7), Regime::SD, train_set().first(12), val_set(), base_cfg, 0).params;
    TrainConfig ft;
    ft.learning_rate = finetune_learning_rate(Regime::SD);
    ft.max_epochs = 5;
    const auto tuned = finetune_last_layer(base, train_set().first(12), val_set(), ft);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(tuned.layers[l], base.layers[l]);
    EXPECT_NE(tuned.layers[3].weights, base.layers[3].weights);
    EXPECT_FALSE(tuned.layers[3].frozen);

    TrainConfig sd = ft;
    sd.loss = LossKind::SoftDice;
    EXPECT_THROW(finetune_last_layer(base, train_set(), val_set(), sd), ConfigError);
    EXPECT_EQ(finetune_learning_rate(Regime::CE), 1e-4);
    EXPECT_EQ(finetune_learning_rate(Regime::CE_SD), 1e-3);
}

TEST_F(TrainingTest, DropoutRetrainFreezesBeforeFirstSite) {
    TrainConfig c;
    c.max_epochs = 4;
    const auto base = train(init_params(8), train_set().first(12), val_set(), c).params;
    TrainConfig rc;
    rc.max_epochs = 2;
    const auto center = insert_dropout_and_retrain(base, DropoutConfig::center(0.2), train_set().first(8),
                                                   val_set(), LossKind::CE, {1e-3}, rc);
    EXPECT_EQ(center.params.layers[0], base.layers[0]);
    for (std::size_t l = 1; l < 4; ++l) EXPECT_NE(center.params.layers[l].weights, base.layers[l].weights);

    const auto decoder = insert_dropout_and_retrain(base, DropoutConfig::decoder(0.2), train_set().first(8),
                                                    val_set(), LossKind::CE, {1e-3}, rc);
    EXPECT_EQ(decoder.params.layers[0], base.layers[0]);
    EXPECT_EQ(decoder.params.layers[1], base.layers[1]);
    EXPECT_NE(decoder.params.layers[2].weights, base.layers[2].weights);
}

TEST_F(TrainingTest, DropoutRetrainPicksLowestValidationLoss) {
    TrainConfig c;
    c.max_epochs = 4;
    const auto base = train(init_params(8), train_set().first(12), val_set(), c).params;
    TrainConfig rc;
    rc.max_epochs = 3;
    const std::vector<double> lrs{1e-3, 1e-4, 1e-5};
    const auto r = insert_dropout_and_retrain(base, DropoutConfig::decoder(0.2), train_set().first(8), val_set(),
                                              LossKind::CE, lrs, rc);
    ASSERT_EQ(r.candidate_val_loss.size(), 3u);
    const auto best = std::min_element(r.candidate_val_loss.begin(), r.candidate_val_loss.end());
    EXPECT_EQ(r.learning_rate, lrs[static_cast<std::size_t>(best - r.candidate_val_loss.begin())]);
    EXPECT_EQ(evaluate_loss(r.params, val_set(), LossKind::CE), *best);
}

TEST_F(TrainingTest, ZeroRateRetrainStaysNearBase) {
    TrainConfig c;
    c.seed = 5;
    const auto base = train(init_params(5), train_set(), val_set(), c).params;
    const double base_val = evaluate_loss(base, val_set(), LossKind::CE);
    TrainConfig rc;
    rc.max_epochs = 10;
    const auto r = insert_dropout_and_retrain(base, DropoutConfig::decoder(0.0), train_set(), val_set(), LossKind::CE,
                                              {1e-3, 1e-4, 1e-5}, rc);
    EXPECT_LE(std::abs(evaluate_loss(r.params, val_set(), LossKind::CE) - base_val), 0.05 * base_val);
}
