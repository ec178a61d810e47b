#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "segcal/metrics.hpp"
#include "segcal/synth.hpp"

using namespace segcal;

namespace {

Grid2D row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Grid2D(1, n, std::move(v));
}

ReliabilityBins tally(const std::vector<double>& conf, const std::vector<double>& ok, std::size_t k = 20,
                      const std::string& id = "s") {
    ReliabilityBins b(k);
    b.add_subject(id, row(conf), row(ok), Grid2D(1, conf.size(), 1.0));
    return b;
}

// ECE straight from (confidence, outcome) pairs, grouping by floor(c*K).
double direct_ece(const std::vector<double>& conf, const std::vector<double>& ok, std::size_t k) {
    std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (std::size_t i = 0; i < conf.size(); ++i) {
        std::size_t b = static_cast<std::size_t>(std::floor(conf[i] * static_cast<double>(k)));
        if (b == k) b = k - 1;
        groups[b].first.push_back(conf[i]);
        groups[b].second.push_back(ok[i]);
    }
    double e = 0.0;
    for (const auto& [b, g] : groups) {
        const double n = static_cast<double>(g.first.size());
        const double c = std::accumulate(g.first.begin(), g.first.end(), 0.0) / n;
        const double a = std::accumulate(g.second.begin(), g.second.end(), 0.0) / n;
        e += n / static_cast<double>(conf.size()) * std::abs(a - c);
    }
    return e;
}

// Two-sided p: fraction of the 2^n sign patterns whose W+ is at least as far from its null mean
// as the observed one. Ranks are doubled so ties stay integral.
double brute_force_p(const std::vector<double>& d) {
    std::vector<double> absd;
    std::vector<bool> pos;
    for (double v : d) {
        if (v == 0.0) continue;
        absd.push_back(std::abs(v));
        pos.push_back(v > 0);
    }
    const std::size_t n = absd.size();
    std::vector<long> r2(n);
    for (std::size_t i = 0; i < n; ++i) {
        long less = 0;
        long same = 0;
        for (std::size_t j = 0; j < n; ++j) {
            less += absd[j] < absd[i];
            same += absd[j] == absd[i];
        }
        r2[i] = 2 * less + same + 1;  // 2 * (less + (same + 1) / 2)
    }
    const long total = std::accumulate(r2.begin(), r2.end(), 0L);
    long obs = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (pos[i]) obs += r2[i];
    const long obs_dev = std::abs(2 * obs - total);
    std::size_t extreme = 0;
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
        long w = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask >> i & 1) w += r2[i];
        if (std::abs(2 * w - total) >= obs_dev) ++extreme;
    }
    return static_cast<double>(extreme) / std::ldexp(1.0, static_cast<int>(n));
}

// Exact p by dynamic programming over distinct continuous |d| (no ties), for n beyond brute force.
double exact_p_no_ties(std::size_t n, double w_plus) {
    const std::size_t total = n * (n + 1) / 2;
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    for (std::size_t r = 1; r <= n; ++r)
        for (std::size_t s = total; s >= r; --s) ways[s] += ways[s - r];
    const double stat = std::min(w_plus, static_cast<double>(total) - w_plus);
    double tail = 0.0;
    for (std::size_t s = 0; static_cast<double>(s) <= stat; ++s) tail += ways[s];
    return std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
}

// Normal approximation with continuity correction for untied data.
double normal_p_no_ties(std::size_t n, double w_plus) {
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1) / 4;
    const double sd = std::sqrt(nn * (nn + 1) * (2 * nn + 1) / 24);
    const double z = std::max(0.0, std::abs(w_plus - mu) - 0.5) / sd;
    return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

double w_plus_no_ties(const std::vector<double>& d) {
    double w = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] <= 0) continue;
        double rank = 1;
        for (double o : d) rank += std::abs(o) < std::abs(d[i]);
        w += rank;
    }
    return w;
}

}  // namespace

TEST(ReliabilityBins, HandEnumeratedAssignment) {
    const auto b = tally({0.61, 0.64, 0.89, 0.92}, {1, 0, 1, 1});
    EXPECT_EQ(b.count[12], 2u);
    EXPECT_EQ(b.count[17], 1u);
    EXPECT_EQ(b.count[18], 1u);
    EXPECT_EQ(b.total(), 4u);
    EXPECT_DOUBLE_EQ(b.bin_low(12), 0.60);
    EXPECT_DOUBLE_EQ(b.bin_high(12), 0.65);
}

TEST(ReliabilityBins, EdgesAndMask) {
    const auto b = tally({1.0, 0.0, 0.05, 0.95}, {1, 1, 0, 1});
    EXPECT_EQ(b.count[19], 2u);  // 0.95 and 1.0
    EXPECT_EQ(b.count[0], 1u);
    EXPECT_EQ(b.count[1], 1u);

    ReliabilityBins m(20);
    m.add_subject("x", row({0.3, 0.99, 0.7}), row({1, 0, 1}), row({1, 0, 1}));
    ReliabilityBins ref(20);
    ref.add_subject("x", row({0.3, 0.123, 0.7}), row({1, 1, 1}), row({1, 0, 1}));
    EXPECT_EQ(m.count, ref.count);
    EXPECT_EQ(m.correct, ref.correct);
    EXPECT_EQ(m.confidence_sum, ref.confidence_sum);
}

TEST(ReliabilityBins, Errors) {
    EXPECT_THROW(ReliabilityBins(0), ParameterError);
    EXPECT_THROW(tally({1.2}, {1}), ValidationError);
    const Grid2D p = row({0.3, 0.6});
    const Grid2D y = row({0, 1});
    const Grid2D empty = row({0, 0});
    EXPECT_THROW(reliability_bins({{"a", &p, &y, &empty}}), MetricError);
    const Grid2D wrong(2, 1, 1.0);
    EXPECT_THROW(reliability_bins({{"a", &p, &y, &wrong}}), DimensionError);
}

TEST(ReliabilityBins, ModesDefineConfidenceAndOutcome) {
    const Grid2D p = row({0.2, 0.7, 0.5});
    const Grid2D y = row({0, 0, 1});
    const Grid2D m = row({1, 1, 1});
    const auto pc = reliability_bins({{"a", &p, &y, &m}}, 10, ConfidenceMode::PredictionConfidence);
    EXPECT_EQ(pc.count[8], 1u);  // 0.8, correct
    EXPECT_EQ(pc.correct[8], 1u);
    EXPECT_EQ(pc.count[7], 1u);  // 0.7, wrong
    EXPECT_EQ(pc.correct[7], 0u);
    EXPECT_EQ(pc.count[5], 1u);  // 0.5 predicts class 1, correct
    EXPECT_EQ(pc.correct[5], 1u);

    const auto cp = reliability_bins({{"a", &p, &y, &m}}, 10, ConfidenceMode::ClassProbability);
    EXPECT_EQ(cp.count[2], 1u);
    EXPECT_EQ(cp.correct[2], 0u);
    EXPECT_EQ(cp.correct[5], 1u);
}

TEST(Ece, HandCase) {
    EXPECT_NEAR(ece(tally({0.61, 0.64, 0.89, 0.92}, {1, 0, 1, 1})), 0.11, 1e-15);
    EXPECT_EQ(ece(tally({1.0, 1.0, 1.0}, {1, 1, 1})), 0.0);
    EXPECT_NEAR(ece(tally(std::vector<double>(10, 0.7), {1, 1, 1, 1, 1, 1, 1, 0, 0, 0})), 0.0, 1e-15);
}

TEST(Ece, TalliesSumAndMatchDirectComputation) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t n = 1 + rng.below(400);
        const std::size_t k = 1 + rng.below(30);
        std::vector<double> conf(n);
        std::vector<double> ok(n);
        for (std::size_t i = 0; i < n; ++i) {
            conf[i] = rng.bernoulli(0.05) ? 1.0 : rng.uniform();
            ok[i] = rng.bernoulli(conf[i]) ? 1.0 : 0.0;
        }
        const auto b = tally(conf, ok, k);
        EXPECT_EQ(b.total(), n);
        const double e = ece(b);
        EXPECT_NEAR(e, direct_ece(conf, ok, k), 1e-12);
        EXPECT_GE(e, 0.0);
        EXPECT_LE(e, 1.0);
    }
}

TEST(Ece, PermutationAndSplitInvariance) {
    Rng rng(3);
    std::vector<double> conf(300);
    std::vector<double> ok(300);
    for (std::size_t i = 0; i < conf.size(); ++i) {
        conf[i] = rng.uniform(0.5, 1.0);
        ok[i] = rng.bernoulli(0.8) ? 1.0 : 0.0;
    }
    const double e = ece(tally(conf, ok));

    std::vector<std::size_t> perm(conf.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<double> pc;
    std::vector<double> po;
    for (auto i : perm) {
        pc.push_back(conf[i]);
        po.push_back(ok[i]);
    }
    EXPECT_NEAR(ece(tally(pc, po)), e, 1e-12);

    // Same voxels as two subjects, with complementary masks over the full grid.
    std::vector<double> m1(conf.size());
    std::vector<double> m2(conf.size());
    for (std::size_t i = 0; i < conf.size(); ++i) {
        m1[i] = i % 3 == 0 ? 1.0 : 0.0;
        m2[i] = 1.0 - m1[i];
    }
    ReliabilityBins split(20);
    split.add_subject("a", row(conf), row(ok), row(m1));
    split.add_subject("b", row(conf), row(ok), row(m2));
    EXPECT_NEAR(ece(split), e, 1e-12);
    for (std::size_t k = 0; k < 20; ++k) {
        EXPECT_EQ(split.subjects[0].count[k] + split.subjects[1].count[k], split.count[k]);
        EXPECT_EQ(split.subjects[0].correct[k] + split.subjects[1].correct[k], split.correct[k]);
    }
}

TEST(Ece, MergeIsOrderIndependent) {
    Rng rng(4);
    std::vector<ReliabilityBins> parts;
    for (int s = 0; s < 3; ++s) {
        std::vector<double> conf(50);
        std::vector<double> ok(50);
        for (std::size_t i = 0; i < 50; ++i) {
            conf[i] = rng.uniform();
            ok[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        }
        parts.push_back(tally(conf, ok, 20, "s" + std::to_string(2 - s)));
    }
    auto ab_c = parts[0];
    ab_c.merge(parts[1]);
    ab_c.merge(parts[2]);
    auto bc = parts[1];
    bc.merge(parts[2]);
    auto a_bc = parts[0];
    a_bc.merge(bc);
    auto cba = parts[2];
    cba.merge(parts[1]);
    cba.merge(parts[0]);
    for (const auto* m : {&a_bc, &cba}) {
        EXPECT_EQ(m->count, ab_c.count);
        EXPECT_EQ(m->correct, ab_c.correct);
        for (std::size_t k = 0; k < 20; ++k) EXPECT_NEAR(m->confidence_sum[k], ab_c.confidence_sum[k], 1e-12);
        EXPECT_NEAR(ece(*m), ece(ab_c), 1e-12);
        ASSERT_EQ(m->subjects.size(), 3u);
        EXPECT_EQ(m->subjects[0].id, "s0");
        EXPECT_EQ(m->subjects[2].id, "s2");
    }
    EXPECT_THROW(ab_c.merge(ReliabilityBins(10)), ParameterError);
}

TEST(Ece, ReportCarriesPerSubjectValues) {
    ReliabilityBins b(20);
    b.add_subject("a", row({0.61, 0.64, 0.89, 0.92}), row({1, 0, 1, 1}), row({1, 1, 1, 1}));
    b.add_subject("b", row({1.0, 1.0}), row({1, 1}), row({1, 1}));
    const auto r = ece_report(b);
    EXPECT_NEAR(r.per_subject_ece.at("a"), 0.11, 1e-15);
    EXPECT_EQ(r.per_subject_ece.at("b"), 0.0);
    EXPECT_EQ(r.mode(), ConfidenceMode::PredictionConfidence);
}

TEST(Dice, Cases) {
    const Grid2D a = row({1, 1, 0, 0});
    EXPECT_EQ(dice_score(a, a), 1.0);
    EXPECT_EQ(dice_score(a, row({0, 0, 1, 1})), 0.0);
    EXPECT_EQ(dice_score(a, row({0, 1, 1, 0})), 0.5);
    EXPECT_EQ(dice_score(row({0, 0}), row({0, 0})), 1.0);
    EXPECT_EQ(dice_score(row({0, 0}), row({0, 1})), 0.0);
}

TEST(Dice, SymmetricAndBounded) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        Grid2D a(4, 4);
        Grid2D b(4, 4);
        for (std::size_t i = 0; i < 16; ++i) {
            a[i] = rng.bernoulli(0.3);
            b[i] = rng.bernoulli(0.3);
        }
        const double d = dice_score(a, b);
        EXPECT_EQ(d, dice_score(b, a));
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
    }
}

TEST(SubjectDistribution, TwoPointStatistics) {
    ReliabilityBins b(20);
    const Grid2D c(1, 10, 0.72);
    const Grid2D m(1, 10, 1.0);
    b.add_subject("a", c, row({1, 1, 1, 1, 0, 0, 0, 0, 0, 0}), m);
    b.add_subject("b", c, row({1, 1, 1, 1, 1, 1, 1, 1, 0, 0}), m);
    b.add_subject("tiny", Grid2D(1, 3, 0.72), row({1, 1, 1}), Grid2D(1, 3, 1.0));
    const auto d = subject_bin_distribution(b, 10);
    ASSERT_EQ(d[14].subjects.size(), 2u);
    EXPECT_NEAR(d[14].mean, 0.6, 1e-15);
    EXPECT_NEAR(d[14].stddev, 0.2, 1e-15);
    EXPECT_NEAR(d[14].median, 0.6, 1e-15);
    EXPECT_NEAR(d[14].q1, 0.5, 1e-15);
    EXPECT_NEAR(d[14].q3, 0.7, 1e-15);
    EXPECT_TRUE(d[3].empty());
    EXPECT_TRUE(std::isnan(d[3].mean));

    const auto all = subject_bin_distribution(b, 1);
    EXPECT_EQ(all[14].subjects.size(), 3u);
}

TEST(SubjectDistribution, SingleSubjectHasZeroSpread) {
    ReliabilityBins b(20);
    Rng rng(6);
    Grid2D c(20, 20);
    Grid2D y(20, 20);
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = rng.uniform();
        y[i] = rng.bernoulli(0.5);
    }
    b.add_subject("only", c, y, Grid2D(20, 20, 1.0));
    for (const auto& d : subject_bin_distribution(b, 5)) {
        if (!d.empty()) {
            EXPECT_EQ(d.stddev, 0.0);
        }
    }
}

TEST(SubjectDistribution, OracleCohortTracksConfidence) {
    // With oracle confidences, P(correct | c) = c, so the pooled accuracy of each well-populated bin
    // should sit within three binomial standard errors of the bin's mean confidence.
    const auto subjects = render_dataset(SynthConfig{}, 50);
    std::vector<Grid2D> conf;
    for (const auto& s : subjects) conf.push_back(oracle_confidence(s));
    std::vector<BinInput> in;
    for (std::size_t i = 0; i < subjects.size(); ++i)
        in.push_back({subjects[i].id, &conf[i], &subjects[i].labels, &subjects[i].eval_mask});
    const auto b = reliability_bins(in);
    std::size_t checked = 0;
    std::size_t outside = 0;
    for (std::size_t k = 0; k < b.n_bins; ++k) {
        if (b.count[k] < 100) continue;
        const double n = static_cast<double>(b.count[k]);
        const double c = b.confidence_sum[k] / n;
        const double a = static_cast<double>(b.correct[k]) / n;
        ++checked;
        if (std::abs(a - c) > 3.0 * std::sqrt(c * (1 - c) / n) + 1e-12) ++outside;
    }
    EXPECT_GE(checked, 5u);
    EXPECT_EQ(outside, 0u);
}

TEST(Wilcoxon, Examples) {
    const auto r = wilcoxon_signed_rank({1, 2, 3, 4, 5}, {0, 0, 0, 0, 0});
    EXPECT_NEAR(r.p_value, 0.0625, 1e-15);
    EXPECT_EQ(r.statistic, 0.0);
    EXPECT_EQ(r.method, WilcoxonMethod::Exact);
    EXPECT_EQ(wilcoxon_signed_rank({1, -1}, {0, 0}).p_value, 1.0);
    EXPECT_THROW(wilcoxon_signed_rank({1, 2, 3}, {1, 2, 3}), DegenerateError);
    EXPECT_THROW(wilcoxon_signed_rank({1, 2}, {1}), ParameterError);
    EXPECT_EQ(wilcoxon_signed_rank({3, 1, 2}, {3, 0, 0}).n_effective, 2u);
}

TEST(Wilcoxon, ExactMatchesBruteForceEnumeration) {
    Rng rng(7);
    for (int set = 0; set < 100; ++set) {
        const std::size_t n = 1 + static_cast<std::size_t>(set % 10);
        std::vector<double> d(n);
        bool nonzero = false;
        while (!nonzero) {
            for (double& v : d) {
                v = static_cast<double>(static_cast<long>(rng.below(11)) - 5);
                nonzero = nonzero || v != 0.0;
            }
        }
        const auto r = wilcoxon_signed_rank(d, std::vector<double>(n, 0.0));
        EXPECT_NEAR(r.p_value, brute_force_p(d), 1e-12) << "set " << set;
        EXPECT_GT(r.p_value, 0.0);
        EXPECT_LE(r.p_value, 1.0);
    }
}

TEST(Wilcoxon, NormalApproximationIsCloseToExact) {
    Rng rng(8);
    for (std::size_t n = 15; n <= 40; ++n) {
        for (int rep = 0; rep < 10; ++rep) {
            std::vector<double> d(n);
            const double shift = rng.uniform(-0.8, 0.8);
            for (double& v : d) v = rng.normal(shift, 1.0);
            const double w = w_plus_no_ties(d);
            const auto r = wilcoxon_signed_rank(d, std::vector<double>(n, 0.0));
            if (n <= kWilcoxonExactMax) {
                EXPECT_EQ(r.method, WilcoxonMethod::Exact);
                EXPECT_NEAR(r.p_value, exact_p_no_ties(n, w), 1e-12);
                EXPECT_NEAR(normal_p_no_ties(n, w), r.p_value, 0.02) << n;
            } else {
                EXPECT_EQ(r.method, WilcoxonMethod::NormalApprox);
                EXPECT_NEAR(r.p_value, normal_p_no_ties(n, w), 1e-12);
                EXPECT_NEAR(r.p_value, exact_p_no_ties(n, w), 0.02) << n;
            }
        }
    }
}

TEST(BestMarking, DominatingMethodStandsAlone) {
    std::vector<double> a(10);
    std::vector<double> b(10);
    for (std::size_t i = 0; i < 10; ++i) {
        b[i] = 0.5 + 0.03 * static_cast<double>(i);
        a[i] = b[i] + 0.01 * static_cast<double>(i + 1);
    }
    std::vector<double> d(10);
    for (std::size_t i = 0; i < 10; ++i) d[i] = a[i] - b[i];
    EXPECT_NEAR(brute_force_p(d), 2.0 / 1024.0, 1e-15);
    EXPECT_EQ(best_marking({{"A", a}, {"B", b}}, Direction::Higher), (std::set<std::string>{"A"}));
    EXPECT_EQ(best_marking({{"A", a}, {"B", b}}, Direction::Lower), (std::set<std::string>{"B"}));
}

TEST(BestMarking, IdenticalMethodsTie) {
    const std::vector<double> v{0.1, 0.4, 0.3};
    EXPECT_EQ(best_marking({{"A", v}, {"B", v}}, Direction::Lower), (std::set<std::string>{"A", "B"}));
    EXPECT_EQ(best_marking({{"solo", v}}, Direction::Lower), (std::set<std::string>{"solo"}));
}

TEST(BestMarking, ThreeMethodsTwoIndistinguishable) {
    std::vector<double> a(10);
    std::vector<double> b(10);
    std::vector<double> c(10);
    for (std::size_t i = 0; i < 10; ++i) {
        a[i] = 0.8 + 0.01 * static_cast<double>(i);
        b[i] = a[i] + (i % 2 == 0 ? -0.004 : 0.003) * static_cast<double>(i + 1) / 10.0;
        c[i] = a[i] - 0.05 - 0.001 * static_cast<double>(i);
    }
    std::vector<double> dab(10);
    std::vector<double> dac(10);
    for (std::size_t i = 0; i < 10; ++i) {
        dab[i] = b[i] - a[i];
        dac[i] = c[i] - a[i];
    }
    ASSERT_GE(brute_force_p(dab), 0.05);
    ASSERT_LT(brute_force_p(dac), 0.05);
    EXPECT_EQ(best_marking({{"A", a}, {"B", b}, {"C", c}}, Direction::Higher), (std::set<std::string>{"A", "B"}));
    EXPECT_THROW(best_marking({{"A", a}, {"B", {1.0}}}, Direction::Higher), ParameterError);
}
