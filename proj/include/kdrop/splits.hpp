#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kdrop/dataset.hpp"
#include "kdrop/error.hpp"
#include "kdrop/random.hpp"

namespace kdrop {

enum class SplitMode { ZeroShot, KShot, FractionSplit, CrossVal };

struct SplitPlan {
    SplitMode mode = SplitMode::FractionSplit;
    std::size_t k = 5;
    double train_fraction = 0.8;
    std::size_t folds = 5;
    bool stratified = true;
    std::uint64_t seed = 0;

    static SplitPlan zero_shot(std::uint64_t seed = 0) { return {SplitMode::ZeroShot, 0, 0.0, 0, true, seed}; }
    static SplitPlan k_shot(std::size_t k, std::uint64_t seed = 0, bool stratified = true) {
        return {SplitMode::KShot, k, 0.0, 0, stratified, seed};
    }
    static SplitPlan fraction(double f, std::uint64_t seed = 0, bool stratified = true) {
        return {SplitMode::FractionSplit, 0, f, 0, stratified, seed};
    }
    static SplitPlan cross_val(std::size_t folds, std::uint64_t seed = 0, bool stratified = true) {
        return {SplitMode::CrossVal, 0, 0.0, folds, stratified, seed};
    }

    void validate() const {
        if (mode == SplitMode::KShot && k < 1) throw ConfigError("k-shot requires k >= 1");
        if (mode == SplitMode::CrossVal && folds < 2) throw ConfigError("cross-validation requires >= 2 folds");
        if (mode == SplitMode::FractionSplit && !(train_fraction > 0.0 && train_fraction < 1.0))
            throw ConfigError("train_fraction must be in (0,1)");
    }

    std::string describe() const {
        std::ostringstream os;
        switch (mode) {
        case SplitMode::ZeroShot: os << "zero-shot"; break;
        case SplitMode::KShot: os << k << "-shot"; break;
        case SplitMode::FractionSplit: os << "fraction(" << train_fraction << ")"; break;
        case SplitMode::CrossVal: os << folds << "-fold-cv"; break;
        }
        os << (stratified ? ",stratified" : ",unstratified") << ",seed=" << seed;
        return os.str();
    }
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;

    bool operator==(const Split &) const = default;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(const EmbeddingDataset &data) {
    std::vector<std::vector<std::size_t>> by_class(data.num_classes());
    for (std::size_t i = 0; i < data.size(); ++i) by_class.at(data.instances[i].label).push_back(i);
    return by_class;
}

inline std::vector<std::size_t> complement(std::size_t n, std::vector<std::size_t> taken) {
    std::sort(taken.begin(), taken.end());
    std::vector<std::size_t> rest;
    for (std::size_t i = 0, j = 0; i < n; ++i) {
        if (j < taken.size() && taken[j] == i) {
            ++j;
            continue;
        }
        rest.push_back(i);
    }
    return rest;
}

/// k per class drawn from `pool` (indices into data).
inline std::vector<std::size_t> draw_k_per_class(const EmbeddingDataset &data, const std::vector<std::size_t> &pool,
                                                 std::size_t k, Stream &rng) {
    std::vector<std::vector<std::size_t>> by_class(data.num_classes());
    for (auto i : pool) by_class.at(data.instances[i].label).push_back(i);
    std::vector<std::size_t> train;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto &idx = by_class[c];
        if (idx.size() < k)
            throw DataError("class '" + data.classes[c] + "' has " + std::to_string(idx.size()) +
                            " instances, fewer than k=" + std::to_string(k));
        std::shuffle(idx.begin(), idx.end(), rng);
        train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    std::sort(train.begin(), train.end());
    return train;
}

} // namespace detail

/// Train/test index pairs for a split plan; deterministic given the plan seed.
inline std::vector<Split> make_splits(const EmbeddingDataset &data, const SplitPlan &plan) {
    plan.validate();
    const std::size_t n = data.size();
    Stream rng = Stream::keyed(plan.seed, 0x53504c4954ULL, static_cast<std::uint64_t>(plan.mode));
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});

    switch (plan.mode) {
    case SplitMode::ZeroShot:
        return {Split{{}, all}};

    case SplitMode::KShot: {
        std::vector<std::size_t> train;
        if (plan.stratified) {
            train = detail::draw_k_per_class(data, all, plan.k, rng);
        } else {
            const std::size_t want = plan.k * data.num_classes();
            if (want > n) throw DataError("k-shot needs " + std::to_string(want) + " instances, dataset has " + std::to_string(n));
            auto shuffled = all;
            std::shuffle(shuffled.begin(), shuffled.end(), rng);
            train.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(want));
            std::sort(train.begin(), train.end());
        }
        return {Split{train, detail::complement(n, train)}};
    }

    case SplitMode::FractionSplit: {
        std::vector<std::size_t> train;
        auto take = [&](std::vector<std::size_t> idx) {
            std::shuffle(idx.begin(), idx.end(), rng);
            const auto m = static_cast<std::size_t>(std::floor(plan.train_fraction * static_cast<double>(idx.size()) + 0.5));
            train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(m, idx.size())));
        };
        if (plan.stratified)
            for (auto &idx : detail::indices_by_class(data)) take(idx);
        else
            take(all);
        std::sort(train.begin(), train.end());
        return {Split{train, detail::complement(n, train)}};
    }

    case SplitMode::CrossVal: {
        if (n < plan.folds) throw DataError("cross-validation needs at least as many instances as folds");
        std::vector<std::size_t> fold_of(n);
        // Round-robin over class-grouped shuffled indices keeps folds stratified
        // and their sizes within one of each other.
        std::size_t next = 0;
        auto assign = [&](std::vector<std::size_t> idx) {
            std::shuffle(idx.begin(), idx.end(), rng);
            for (auto i : idx) fold_of[i] = next++ % plan.folds;
        };
        if (plan.stratified)
            for (auto &idx : detail::indices_by_class(data)) assign(idx);
        else
            assign(all);
        std::vector<Split> out(plan.folds);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t f = 0; f < plan.folds; ++f) (fold_of[i] == f ? out[f].test : out[f].train).push_back(i);
        return out;
    }
    }
    return {};
}

/// Cross-validation wrapped around a few-shot draw: fold f tests on its fold and
/// trains on k instances per class sampled from the remaining folds.
inline std::vector<Split> make_wrapped_splits(const EmbeddingDataset &data, const SplitPlan &inner, std::size_t folds) {
    inner.validate();
    if (inner.mode == SplitMode::CrossVal || inner.mode == SplitMode::FractionSplit)
        throw ConfigError("only zero-shot and k-shot plans can be wrapped in cross-validation");
    auto outer = make_splits(data, SplitPlan::cross_val(folds, inner.seed, true));
    for (std::size_t f = 0; f < outer.size(); ++f) {
        Stream rng = Stream::keyed(inner.seed, 0x57524150ULL, f);
        auto &s = outer[f];
        switch (inner.mode) {
        case SplitMode::ZeroShot: s.train.clear(); break;
        case SplitMode::KShot: s.train = detail::draw_k_per_class(data, s.train, inner.k, rng); break;
        case SplitMode::FractionSplit:
        case SplitMode::CrossVal: break;
        }
    }
    return outer;
}

} // namespace kdrop
