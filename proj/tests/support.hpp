#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "kdrop/bayes_dropout.hpp"
#include "kdrop/dataset.hpp"
#include "kdrop/random.hpp"

namespace kdrop::fixtures {

/// A fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string &tag) {
        static std::uint64_t counter = 0;
        const auto salt = Stream::keyed(fnv1a(tag), reinterpret_cast<std::uintptr_t>(this), ++counter)();
        path_ = std::filesystem::temp_directory_path() / ("kdrop-" + tag + "-" + std::to_string(salt));
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir &) = delete;
    ScratchDir &operator=(const ScratchDir &) = delete;

    const std::filesystem::path &path() const { return path_; }
    std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// K isotropic Gaussian clusters in `dim` dimensions with unit variance.
/// Class c is centred at c * separation / sqrt(dim) on every coordinate, so
/// neighbouring centres are `separation` standard deviations apart.
inline EmbeddingDataset gaussian_clusters(std::size_t n, std::size_t dim, std::size_t classes, double separation,
                                          std::uint64_t seed, double offset = 0.0) {
    EmbeddingDataset d;
    d.name = "clusters";
    d.dim = dim;
    for (std::size_t c = 0; c < classes; ++c) d.classes.push_back("c" + std::to_string(c));
    Stream rng = Stream::keyed(seed, 0x53594e54ULL);
    const double step = separation / std::sqrt(static_cast<double>(dim));
    for (std::size_t i = 0; i < n; ++i) {
        Instance inst;
        inst.id = "x" + std::to_string(i);
        inst.label = i % classes;
        for (std::size_t j = 0; j < dim; ++j)
            inst.vector.push_back(static_cast<float>(offset + step * static_cast<double>(inst.label) + rng.normal()));
        d.instances.push_back(std::move(inst));
    }
    return d;
}

/// Exact predictive mean of a one-layer head with fixed keep-probability p:
/// enumerates every mask pattern and weights it by its probability under the
/// redraw-then-force-one guard.
inline Vector enumerate_predictive_mean(const DropoutHead &head, std::span<const double> phi_x, double p) {
    const std::size_t d = head.layers.front().in_dim();
    const double q0 = std::pow(1.0 - p, static_cast<double>(d));
    double redraw = 0.0; // sum_{j=0}^{R} q0^j
    for (int j = 0; j <= kMaskRedraws; ++j) redraw += std::pow(q0, j);
    const double forced = std::pow(q0, kMaskRedraws + 1);

    Vector mean(head.num_classes, 0.0);
    for (std::size_t bits = 1; bits < (std::size_t{1} << d); ++bits) {
        Mask m(d, 0);
        std::size_t ones = 0;
        for (std::size_t j = 0; j < d; ++j)
            if (bits >> j & 1u) {
                m[j] = 1;
                ++ones;
            }
        double w = std::pow(p, static_cast<double>(ones)) * std::pow(1.0 - p, static_cast<double>(d - ones)) * redraw;
        if (ones == 1) w += forced / static_cast<double>(d);
        const std::vector<Mask> masks{m};
        const auto probs = forward_stochastic(head, phi_x, masks).probs;
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += w * probs[k];
    }
    return mean;
}

/// Posterior density on an n-point grid over (0, 1), obtained by multiplying
/// the prior density with the Bernoulli likelihood of every observed mask
/// entry and normalising numerically. Grid points are x = sin^2(pi u / 2) at
/// cell midpoints u, which concentrates them near 0 and 1 where the density
/// can be steep.
inline std::vector<double> grid_posterior(double alpha, double beta, std::span<const Mask> masks, std::size_t n,
                                          std::vector<double> &grid) {
    grid.resize(n);
    std::vector<double> logp(n), jac(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        const double s = std::sin(std::numbers::pi * u / 2.0);
        const double x = s * s;
        grid[i] = x;
        jac[i] = std::numbers::pi / 2.0 * std::sin(std::numbers::pi * u);
        double l = beta_log_pdf(x, alpha, beta);
        for (const auto &m : masks)
            for (auto z : m) l += z ? std::log(x) : std::log1p(-x);
        logp[i] = l;
    }
    const double mx = *std::max_element(logp.begin(), logp.end());
    double mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        logp[i] = std::exp(logp[i] - mx);
        mass += logp[i] * jac[i];
    }
    mass /= static_cast<double>(n);
    for (auto &l : logp) l /= mass;
    return logp;
}

} // namespace kdrop::fixtures
