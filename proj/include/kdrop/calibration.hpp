#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kdrop/error.hpp"
#include "kdrop/matrix.hpp"

namespace kdrop {

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < v.size(); ++k)
        if (v[k] > v[best]) best = k;
    return best;
}

struct PredictionRecord {
    std::string instance_id;
    Vector mean_probs;
    std::size_t true_class = 0;
    std::size_t predicted_class = 0;
    Vector sample_variance;

    static PredictionRecord make(std::string id, Vector probs, std::size_t truth, Vector variance = {}) {
        const auto pred = argmax(probs);
        return {std::move(id), std::move(probs), truth, pred, std::move(variance)};
    }

    double max_prob() const { return mean_probs[predicted_class]; }
};

inline constexpr double kRowSumTolerance = 1e-4;

namespace detail {

inline std::size_t common_classes(std::span<const PredictionRecord> preds) {
    if (preds.empty()) throw DataError("no predictions");
    const std::size_t K = preds.front().mean_probs.size();
    for (const auto &p : preds) {
        if (p.mean_probs.size() != K) throw DataError("record '" + p.instance_id + "': inconsistent class count");
        if (p.true_class >= K) throw DataError("record '" + p.instance_id + "': true class out of range");
        double s = 0.0;
        for (double v : p.mean_probs) s += v;
        if (std::abs(s - 1.0) > kRowSumTolerance)
            throw DataError("record '" + p.instance_id + "': probabilities sum to " + std::to_string(s));
    }
    return K;
}

inline double squared_error(const PredictionRecord &p, std::size_t k) {
    const double d = p.mean_probs[k] - (k == p.true_class ? 1.0 : 0.0);
    return d * d;
}

} // namespace detail

/// Binary Brier score: mean of (P_i - O_i)^2 over (probability, outcome) pairs.
inline double brier_binary(std::span<const std::pair<double, int>> preds) {
    if (preds.empty()) throw DataError("brier_binary: no predictions");
    double s = 0.0;
    for (const auto &[p, o] : preds) {
        if (!(p >= 0.0 && p <= 1.0) || (o != 0 && o != 1)) throw DataError("brier_binary: invalid pair");
        s += (p - o) * (p - o);
    }
    return s / static_cast<double>(preds.size());
}

/// Positive-class (class 1) probabilities and outcomes of K=2 records.
inline std::vector<std::pair<double, int>> binary_pairs(std::span<const PredictionRecord> preds) {
    std::vector<std::pair<double, int>> out;
    for (const auto &p : preds) {
        if (p.mean_probs.size() != 2) throw DataError("binary_pairs: record '" + p.instance_id + "' is not binary");
        out.emplace_back(p.mean_probs[1], p.true_class == 1 ? 1 : 0);
    }
    return out;
}

inline std::vector<double> per_class_brier(std::span<const PredictionRecord> preds) {
    const std::size_t K = detail::common_classes(preds);
    std::vector<double> out(K, 0.0);
    for (const auto &p : preds)
        for (std::size_t k = 0; k < K; ++k) out[k] += detail::squared_error(p, k);
    for (double &v : out) v /= static_cast<double>(preds.size());
    return out;
}

/// Multi-class Brier score: (1/N) sum_i sum_k (p_ik - delta_ik)^2, in [0, 2].
inline double brier_multiclass(std::span<const PredictionRecord> preds) {
    double s = 0.0;
    for (double v : per_class_brier(preds)) s += v;
    return s;
}

/// Root of the mean squared probability error over all (instance, class) cells.
inline double rmse(std::span<const PredictionRecord> preds) {
    const std::size_t K = detail::common_classes(preds);
    return std::sqrt(brier_multiclass(preds) / static_cast<double>(K));
}

struct F1Accuracy {
    double f1_macro = 0.0;
    double accuracy = 0.0;
    /// Classes absent from both truths and predictions, excluded from the macro mean.
    std::vector<std::size_t> undefined_classes;
};

inline F1Accuracy f1_accuracy(std::span<const PredictionRecord> preds) {
    if (preds.empty()) throw DataError("f1_accuracy: no predictions");
    const std::size_t K = preds.front().mean_probs.size();
    std::vector<std::size_t> tp(K, 0), pred_count(K, 0), true_count(K, 0);
    std::size_t correct = 0;
    for (const auto &p : preds) {
        if (p.true_class >= K || p.predicted_class >= K) throw DataError("f1_accuracy: class out of range");
        ++pred_count[p.predicted_class];
        ++true_count[p.true_class];
        if (p.predicted_class == p.true_class) {
            ++tp[p.true_class];
            ++correct;
        }
    }
    F1Accuracy out;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t k = 0; k < K; ++k) {
        if (pred_count[k] == 0 && true_count[k] == 0) {
            out.undefined_classes.push_back(k);
            continue;
        }
        ++defined;
        // 2 tp / (2 tp + fp + fn): the harmonic mean of precision and recall, 0 when tp = 0.
        sum += 2.0 * static_cast<double>(tp[k]) / static_cast<double>(pred_count[k] + true_count[k]);
    }
    out.f1_macro = defined ? sum / static_cast<double>(defined) : 0.0;
    return out;
}

/// Among misclassified records, the fraction whose runner-up class is the truth.
/// Empty when there are no errors.
inline std::optional<double> second_choice_accuracy(std::span<const PredictionRecord> preds) {
    std::size_t wrong = 0, rescued = 0;
    for (const auto &p : preds) {
        if (p.mean_probs.size() < 2) throw DataError("second_choice_accuracy: needs K >= 2");
        if (p.predicted_class == p.true_class) continue;
        ++wrong;
        std::size_t second = p.predicted_class == 0 ? 1 : 0;
        for (std::size_t k = 0; k < p.mean_probs.size(); ++k)
            if (k != p.predicted_class && p.mean_probs[k] > p.mean_probs[second]) second = k;
        if (second == p.true_class) ++rescued;
    }
    if (wrong == 0) return std::nullopt;
    return static_cast<double>(rescued) / static_cast<double>(wrong);
}

struct ProbabilityBin {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t correct = 0;
    std::size_t incorrect = 0;

    bool operator==(const ProbabilityBin &) const = default;
};

/// Default edges: the four segments 0.5-0.6-0.7-0.8-1.0 for binary tasks; for
/// K > 2 the range starts at 1/K and continues in 0.1 steps up to 0.8, then 1.0.
inline std::vector<double> default_bin_edges(std::size_t K) {
    if (K <= 2) return {0.5, 0.6, 0.7, 0.8, 1.0};
    std::vector<double> edges{1.0 / static_cast<double>(K)};
    for (int t = 1; t <= 8; ++t) {
        const double e = t / 10.0;
        if (e > edges.back() + 1e-12) edges.push_back(e);
    }
    edges.push_back(1.0);
    return edges;
}

inline std::vector<ProbabilityBin> probability_bins(std::span<const PredictionRecord> preds, std::vector<double> edges = {}) {
    if (preds.empty()) throw DataError("probability_bins: no predictions");
    const std::size_t K = preds.front().mean_probs.size();
    if (edges.empty()) edges = default_bin_edges(K);
    if (edges.size() < 2) throw ConfigError("probability_bins: need at least two edges");
    for (std::size_t j = 1; j < edges.size(); ++j)
        if (!(edges[j] > edges[j - 1])) throw ConfigError("probability_bins: edges must be strictly increasing");
    const double floor = 1.0 / static_cast<double>(K);
    if (edges.front() > floor + 1e-12 || edges.back() < 1.0)
        throw ConfigError("probability_bins: edges must span [1/K, 1]");

    std::vector<ProbabilityBin> bins;
    for (std::size_t j = 0; j + 1 < edges.size(); ++j) bins.push_back({edges[j], edges[j + 1], 0, 0});
    for (const auto &p : preds) {
        const double m = p.max_prob();
        if (m < floor - 1e-9 || m > 1.0 + 1e-9)
            throw DataError("probability_bins: record '" + p.instance_id + "' max probability " + std::to_string(m) +
                            " outside [1/K, 1]");
        std::size_t j = 0;
        while (j + 1 < bins.size() && m >= bins[j].upper) ++j;
        (p.predicted_class == p.true_class ? bins[j].correct : bins[j].incorrect)++;
    }
    return bins;
}

/// Ids of records whose max probability is below `threshold`, most uncertain
/// first; ties broken by id.
inline std::vector<std::string> flag_uncertain(std::span<const PredictionRecord> preds, double threshold) {
    std::vector<std::pair<double, std::string>> hits;
    for (const auto &p : preds)
        if (p.max_prob() < threshold) hits.emplace_back(p.max_prob(), p.instance_id);
    std::sort(hits.begin(), hits.end());
    std::vector<std::string> out;
    for (auto &h : hits) out.push_back(std::move(h.second));
    return out;
}

struct CalibrationReport {
    std::size_t num_instances = 0;
    std::size_t num_classes = 0;
    double f1_macro = 0.0;
    double accuracy = 0.0;
    /// Binary Brier on the positive class when K = 2, multi-class Brier otherwise.
    double brier = 0.0;
    double brier_multiclass = 0.0;
    double rmse = 0.0;
    std::vector<double> per_class_brier;
    std::vector<ProbabilityBin> bins;
    std::optional<double> second_choice_accuracy;
    std::vector<std::string> flagged;
    std::vector<std::size_t> f1_undefined_classes;
    double mean_max_prob_correct = std::numeric_limits<double>::quiet_NaN();
    double mean_max_prob_incorrect = std::numeric_limits<double>::quiet_NaN();
};

struct ReportOptions {
    std::vector<double> bin_edges; // empty = default_bin_edges(K)
    double flag_threshold = 0.7;
};

inline CalibrationReport calibration_report(std::span<const PredictionRecord> preds, const ReportOptions &opt = {}) {
    CalibrationReport r;
    r.num_classes = detail::common_classes(preds);
    r.num_instances = preds.size();
    const auto fa = f1_accuracy(preds);
    r.f1_macro = fa.f1_macro;
    r.accuracy = fa.accuracy;
    r.f1_undefined_classes = fa.undefined_classes;
    r.per_class_brier = per_class_brier(preds);
    r.brier_multiclass = brier_multiclass(preds);
    r.brier = r.num_classes == 2 ? brier_binary(binary_pairs(preds)) : r.brier_multiclass;
    r.rmse = rmse(preds);
    r.bins = probability_bins(preds, opt.bin_edges);
    r.second_choice_accuracy = second_choice_accuracy(preds);
    r.flagged = flag_uncertain(preds, opt.flag_threshold);

    double sc = 0.0, si = 0.0;
    std::size_t nc = 0, ni = 0;
    for (const auto &p : preds) {
        if (p.predicted_class == p.true_class) {
            sc += p.max_prob();
            ++nc;
        } else {
            si += p.max_prob();
            ++ni;
        }
    }
    if (nc) r.mean_max_prob_correct = sc / static_cast<double>(nc);
    if (ni) r.mean_max_prob_incorrect = si / static_cast<double>(ni);
    return r;
}

} // namespace kdrop
