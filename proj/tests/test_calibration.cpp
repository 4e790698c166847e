#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "kdrop/calibration.hpp"
#include "kdrop/random.hpp"

using namespace kdrop;

namespace {

PredictionRecord rec(const std::string &id, Vector probs, std::size_t truth) {
    return PredictionRecord::make(id, std::move(probs), truth);
}

std::vector<PredictionRecord> uniform_k4(std::vector<std::size_t> truths) {
    std::vector<PredictionRecord> out;
    for (std::size_t i = 0; i < truths.size(); ++i) out.push_back(rec("u" + std::to_string(i), Vector(4, 0.25), truths[i]));
    return out;
}

} // namespace

TEST(BrierBinary, HandCases) {
    using P = std::pair<double, int>;
    EXPECT_EQ(brier_binary(std::vector<P>{{1.0, 1}, {0.0, 0}}), 0.0);
    EXPECT_EQ(brier_binary(std::vector<P>{{0.5, 1}}), 0.25);
    EXPECT_NEAR(brier_binary(std::vector<P>{{0.8, 1}, {0.3, 0}}), 0.065, 1e-15);
    EXPECT_THROW(brier_binary(std::vector<P>{}), DataError);
    EXPECT_ANY_THROW(brier_binary(std::vector<P>{{1.5, 1}}));
}

TEST(BrierMulticlass, HandCases) {
    const std::vector<PredictionRecord> perfect{rec("a", {1, 0, 0}, 0), rec("b", {0, 0, 1}, 2)};
    EXPECT_EQ(brier_multiclass(perfect), 0.0);
    EXPECT_NEAR(brier_multiclass(uniform_k4({0, 1, 3, 3})), 0.75, 1e-12);
    const std::vector<PredictionRecord> wrong{rec("w", {0, 1, 0}, 0)};
    EXPECT_EQ(brier_multiclass(wrong), 2.0);
}

TEST(BrierMulticlass, RejectsUnnormalised) {
    const std::vector<PredictionRecord> bad{rec("x", {0.5, 0.6}, 0)};
    EXPECT_THROW(brier_multiclass(bad), DataError);
}

TEST(Rmse, HandCases) {
    const std::vector<PredictionRecord> perfect{rec("a", {0, 1}, 1)};
    EXPECT_EQ(rmse(perfect), 0.0);
    EXPECT_NEAR(rmse(uniform_k4({0, 2})), std::sqrt(0.75 / 4.0), 1e-12);
    const std::vector<PredictionRecord> half{rec("h", {0.5, 0.5}, 1)};
    EXPECT_NEAR(rmse(half), 0.5, 1e-15);
}

TEST(PerClassBrier, UniformTruthZero) {
    const auto v = per_class_brier(uniform_k4({0, 0, 0}));
    ASSERT_EQ(v.size(), 4u);
    EXPECT_DOUBLE_EQ(v[0], 0.5625);
    for (int k = 1; k < 4; ++k) EXPECT_DOUBLE_EQ(v[k], 0.0625);
    const std::vector<PredictionRecord> perfect{rec("a", {1, 0}, 0)};
    EXPECT_EQ(per_class_brier(perfect), (std::vector<double>{0.0, 0.0}));
}

TEST(MetricIdentities, RandomPredictionSets) {
    Stream rng = Stream::keyed(17);
    for (int set = 0; set < 100; ++set) {
        const std::size_t K = 2 + rng.below(5);
        const std::size_t n = 1 + rng.below(40);
        std::vector<PredictionRecord> preds;
        for (std::size_t i = 0; i < n; ++i) {
            Vector p(K);
            double s = 0.0;
            for (auto &v : p) s += (v = rng.uniform() + 1e-3);
            for (auto &v : p) v /= s;
            if (K == 2) p[1] = 1.0 - p[0];
            preds.push_back(rec(std::to_string(i), p, rng.below(K)));
        }
        const double multi = brier_multiclass(preds);
        double sum = 0.0;
        for (double v : per_class_brier(preds)) sum += v;
        EXPECT_NEAR(sum, multi, 1e-12);
        const double r = rmse(preds);
        EXPECT_NEAR(r * r * static_cast<double>(K), multi, 1e-12);
        if (K == 2) EXPECT_NEAR(2.0 * brier_binary(binary_pairs(preds)), multi, 1e-12);
        const auto bins = probability_bins(preds);
        std::size_t total = 0;
        for (const auto &b : bins) total += b.correct + b.incorrect;
        EXPECT_EQ(total, n);
    }
}

TEST(F1Accuracy, AllCorrect) {
    const std::vector<PredictionRecord> p{rec("a", {0.9, 0.1}, 0), rec("b", {0.2, 0.8}, 1)};
    const auto r = f1_accuracy(p);
    EXPECT_EQ(r.f1_macro, 1.0);
    EXPECT_EQ(r.accuracy, 1.0);
}

TEST(F1Accuracy, AlwaysClassZero) {
    std::vector<PredictionRecord> p;
    for (int i = 0; i < 10; ++i) p.push_back(rec(std::to_string(i), {0.7, 0.3}, i % 2));
    const auto r = f1_accuracy(p);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
    EXPECT_NEAR(r.f1_macro, (2.0 / 3.0 + 0.0) / 2.0, 1e-15);
    EXPECT_TRUE(r.undefined_classes.empty());
}

TEST(F1Accuracy, AbsentClassExcluded) {
    const std::vector<PredictionRecord> p{rec("a", {0.8, 0.1, 0.1}, 0), rec("b", {0.1, 0.8, 0.1}, 1),
                                          rec("c", {0.6, 0.3, 0.1}, 1)};
    const auto r = f1_accuracy(p);
    EXPECT_EQ(r.undefined_classes, (std::vector<std::size_t>{2}));
    // class 0: tp 1, fp 1 -> 2/3; class 1: tp 1, fn 1 -> 2/3
    EXPECT_NEAR(r.f1_macro, 2.0 / 3.0, 1e-15);
}

TEST(Argmax, TiesGoToLowestIndex) {
    EXPECT_EQ(argmax(Vector{0.25, 0.25, 0.25, 0.25}), 0u);
    EXPECT_EQ(argmax(Vector{0.1, 0.45, 0.45}), 1u);
}

TEST(SecondChoice, CountingCase) {
    const std::vector<PredictionRecord> p{
        rec("a", {0.6, 0.3, 0.1}, 1), rec("b", {0.1, 0.6, 0.3}, 2), rec("c", {0.3, 0.1, 0.6}, 0),
        rec("d", {0.6, 0.1, 0.3}, 1), rec("e", {0.9, 0.05, 0.05}, 0),
    };
    EXPECT_DOUBLE_EQ(*second_choice_accuracy(p), 0.75);
}

TEST(SecondChoice, UndefinedWithoutErrors) {
    const std::vector<PredictionRecord> p{rec("a", {0.9, 0.1}, 0)};
    EXPECT_FALSE(second_choice_accuracy(p).has_value());
}

TEST(ProbabilityBins, DirectBinning) {
    const std::vector<PredictionRecord> p{rec("a", {0.45, 0.55}, 1), rec("b", {0.95, 0.05}, 0),
                                          rec("c", {0.35, 0.65}, 0)};
    const auto bins = probability_bins(p);
    ASSERT_EQ(bins.size(), 4u);
    EXPECT_EQ(bins[0], (ProbabilityBin{0.5, 0.6, 1, 0}));
    EXPECT_EQ(bins[1], (ProbabilityBin{0.6, 0.7, 0, 1}));
    EXPECT_EQ(bins[2], (ProbabilityBin{0.7, 0.8, 0, 0}));
    EXPECT_EQ(bins[3], (ProbabilityBin{0.8, 1.0, 1, 0}));
}

TEST(ProbabilityBins, OneGoesToLastClosedBin) {
    const std::vector<PredictionRecord> p{rec("a", {1.0, 0.0}, 0), rec("b", {0.0, 1.0}, 0)};
    const auto bins = probability_bins(p);
    EXPECT_EQ(bins.back().correct, 1u);
    EXPECT_EQ(bins.back().incorrect, 1u);
}

TEST(ProbabilityBins, EdgeValidation) {
    const std::vector<PredictionRecord> p{rec("a", {0.6, 0.4}, 0)};
    EXPECT_THROW(probability_bins(p, {0.5, 0.5, 1.0}), ConfigError);
    EXPECT_THROW(probability_bins(p, {0.6, 1.0}), ConfigError);
    EXPECT_THROW(probability_bins(p, {0.5}), ConfigError);
}

TEST(ProbabilityBins, MultiClassDefaultsStartAtOneOverK) {
    const auto e = default_bin_edges(4);
    EXPECT_DOUBLE_EQ(e.front(), 0.25);
    EXPECT_DOUBLE_EQ(e.back(), 1.0);
    const auto bins = probability_bins(uniform_k4({0, 1}));
    EXPECT_EQ(bins.front().correct + bins.front().incorrect, 2u);
}

TEST(FlagUncertain, FilterAndSort) {
    const std::vector<PredictionRecord> p{rec("a", {0.55, 0.45}, 0), rec("b", {0.95, 0.05}, 0),
                                          rec("c", {0.35, 0.65}, 1)};
    EXPECT_EQ(flag_uncertain(p, 0.7), (std::vector<std::string>{"a", "c"}));
}

TEST(FlagUncertain, TiesById) {
    const std::vector<PredictionRecord> p{rec("z", {0.6, 0.4}, 0), rec("m", {0.4, 0.6}, 0), rec("q", {0.9, 0.1}, 0)};
    EXPECT_EQ(flag_uncertain(p, 0.7), (std::vector<std::string>{"m", "z"}));
}

TEST(FlagUncertain, ThresholdJustAboveChance) {
    const std::vector<PredictionRecord> confident{rec("a", {0.6, 0.4}, 0), rec("b", {0.3, 0.7}, 1)};
    EXPECT_TRUE(flag_uncertain(confident, 0.5 + 1e-9).empty());
    const std::vector<PredictionRecord> tie{rec("a", {0.5, 0.5}, 0), rec("b", {0.3, 0.7}, 1)};
    EXPECT_EQ(flag_uncertain(tie, 0.5 + 1e-9), (std::vector<std::string>{"a"}));
}

TEST(CalibrationReport, BinaryUsesPositiveClassBrier) {
    const std::vector<PredictionRecord> p{rec("a", {0.2, 0.8}, 1), rec("b", {0.7, 0.3}, 0), rec("c", {0.4, 0.6}, 0)};
    const auto r = calibration_report(p);
    EXPECT_NEAR(r.brier, (0.04 + 0.09 + 0.36) / 3.0, 1e-15);
    EXPECT_NEAR(r.brier_multiclass, 2.0 * r.brier, 1e-15);
    EXPECT_EQ(r.num_instances, 3u);
    EXPECT_EQ(r.flagged, (std::vector<std::string>{"c"}));
    EXPECT_NEAR(r.mean_max_prob_correct, 0.75, 1e-15);
    EXPECT_NEAR(r.mean_max_prob_incorrect, 0.6, 1e-15);
}
