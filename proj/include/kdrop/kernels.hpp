#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>

#include "kdrop/error.hpp"
#include "kdrop/matrix.hpp"
#include "kdrop/random.hpp"

namespace kdrop {

enum class KernelKind { Squared, Linear, RbfRff, LaplacianRff, Sigmoid };

inline std::string_view to_string(KernelKind kind) {
    switch (kind) {
    case KernelKind::Squared: return "squared";
    case KernelKind::Linear: return "linear";
    case KernelKind::RbfRff: return "rbf";
    case KernelKind::LaplacianRff: return "laplacian";
    case KernelKind::Sigmoid: return "sigmoid";
    }
    return "?";
}

inline KernelKind parse_kernel_kind(std::string_view name) {
    for (auto k : {KernelKind::Squared, KernelKind::Linear, KernelKind::RbfRff,
                   KernelKind::LaplacianRff, KernelKind::Sigmoid})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown kernel '" + std::string(name) + "'");
}

struct KernelConfig {
    KernelKind kind = KernelKind::Squared;
    double gamma = 1.0;       // RFF bandwidth
    std::size_t rff_dim = 1024;
    std::uint64_t rff_seed = 0;
    double scale = 1.0;       // sigmoid slope
    bool concat_original = true;

    bool is_rff() const { return kind == KernelKind::RbfRff || kind == KernelKind::LaplacianRff; }

    void validate() const {
        if (is_rff()) {
            if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("kernel gamma must be > 0");
            if (rff_dim < 1) throw ConfigError("kernel rff_dim must be >= 1");
        }
        if (kind == KernelKind::Sigmoid && (!(scale > 0.0) || !std::isfinite(scale)))
            throw ConfigError("kernel scale must be > 0");
    }

    bool operator==(const KernelConfig &) const = default;
};

inline std::size_t output_dim(const KernelConfig &cfg, std::size_t input_dim) {
    if (input_dim < 1) throw ConfigError("kernel input dimension must be >= 1");
    const std::size_t mapped = cfg.is_rff() ? cfg.rff_dim : input_dim;
    return cfg.concat_original ? mapped + input_dim : mapped;
}

/// A kernel config bound to an input dimension, holding the frozen random
/// frequencies for the RFF kinds.
class FeatureMap {
public:
    FeatureMap() = default;

    FeatureMap(const KernelConfig &cfg, std::size_t input_dim) : cfg_(cfg), input_dim_(input_dim) {
        cfg_.validate();
        if (input_dim < 1) throw ConfigError("kernel input dimension must be >= 1");
        if (cfg_.is_rff()) draw_frequencies();
    }

    /// Restores a map from persisted frequencies.
    FeatureMap(const KernelConfig &cfg, std::size_t input_dim, Matrix frequencies, Vector phases)
        : cfg_(cfg), input_dim_(input_dim), freq_(std::move(frequencies)), phase_(std::move(phases)) {
        cfg_.validate();
        if (cfg_.is_rff() && (freq_.rows != cfg_.rff_dim || freq_.cols != input_dim ||
                              phase_.size() != cfg_.rff_dim))
            throw DataError("persisted RFF frequencies do not match kernel config");
    }

    const KernelConfig &config() const { return cfg_; }
    std::size_t input_dim() const { return input_dim_; }
    std::size_t output_dim() const { return kdrop::output_dim(cfg_, input_dim_); }
    const Matrix &frequencies() const { return freq_; }
    const Vector &phases() const { return phase_; }

    Vector operator()(std::span<const double> x) const {
        if (x.empty()) throw DataError("kernel_map: input dimension is 0");
        if (x.size() != input_dim_) {
            std::ostringstream os;
            os << "kernel_map: expected dimension " << input_dim_ << ", got " << x.size();
            throw DataError(os.str());
        }
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!std::isfinite(x[i]))
                throw DataError("kernel_map: non-finite input at index " + std::to_string(i));

        Vector out;
        out.reserve(output_dim());
        switch (cfg_.kind) {
        case KernelKind::Squared:
            for (double v : x) out.push_back(v * v);
            break;
        case KernelKind::Linear:
            out.assign(x.begin(), x.end());
            break;
        case KernelKind::Sigmoid:
            for (double v : x) out.push_back(std::tanh(cfg_.scale * v));
            break;
        case KernelKind::RbfRff:
        case KernelKind::LaplacianRff: {
            const double amp = std::sqrt(2.0 / static_cast<double>(cfg_.rff_dim));
            for (std::size_t r = 0; r < cfg_.rff_dim; ++r) {
                const auto w = freq_.row(r);
                double dot = phase_[r];
                for (std::size_t j = 0; j < input_dim_; ++j) dot += w[j] * x[j];
                out.push_back(amp * std::cos(dot));
            }
            break;
        }
        }
        if (cfg_.concat_original) out.insert(out.end(), x.begin(), x.end());
        return out;
    }

private:
    void draw_frequencies() {
        Stream rng = Stream::keyed(cfg_.rff_seed, 0x4b45524eULL, input_dim_);
        freq_ = Matrix(cfg_.rff_dim, input_dim_);
        phase_.assign(cfg_.rff_dim, 0.0);
        // exp(-g |x-y|^2) has spectral density N(0, 2g I);
        // exp(-g |x-y|_1) factorises into Cauchy(0, g) per coordinate.
        const double sd = std::sqrt(2.0 * cfg_.gamma);
        for (double &w : freq_.data) {
            if (cfg_.kind == KernelKind::RbfRff)
                w = sd * rng.normal();
            else
                w = cfg_.gamma * std::tan(std::numbers::pi * (rng.uniform_open() - 0.5));
        }
        for (double &b : phase_) b = 2.0 * std::numbers::pi * rng.uniform();
    }

    KernelConfig cfg_;
    std::size_t input_dim_ = 0;
    Matrix freq_;
    Vector phase_;
};

/// One-shot kernel map; rebuilds the frozen frequencies from the seed.
inline Vector kernel_map(std::span<const double> x, const KernelConfig &cfg) {
    if (x.empty()) throw DataError("kernel_map: input dimension is 0");
    return FeatureMap(cfg, x.size())(x);
}

} // namespace kdrop
