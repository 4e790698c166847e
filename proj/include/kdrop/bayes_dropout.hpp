#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdrop/error.hpp"
#include "kdrop/kernels.hpp"
#include "kdrop/matrix.hpp"
#include "kdrop/random.hpp"

namespace kdrop {

/// Beta prior over a layer's keep-probability together with the Bernoulli
/// mask counts observed so far. The posterior is Beta(alpha + keeps, beta + drops).
struct BetaState {
    double alpha = 1e-4;
    double beta = 1e-4;
    std::uint64_t keep_count = 0;
    std::uint64_t drop_count = 0;

    double posterior_alpha() const { return alpha + static_cast<double>(keep_count); }
    double posterior_beta() const { return beta + static_cast<double>(drop_count); }

    void validate() const {
        if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
            throw ConfigError("Beta parameters must be positive and finite");
    }

    bool operator==(const BetaState &) const = default;
};

inline double beta_log_pdf(double x, double a, double b) {
    const double log_norm = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
    return log_norm + (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x);
}

inline double beta_pdf(double x, double a, double b) {
    if (x <= 0.0 || x >= 1.0) return 0.0;
    return std::exp(beta_log_pdf(x, a, b));
}

inline double sample_keep_prob(const BetaState &state, Stream &rng, bool use_posterior) {
    return use_posterior ? beta_variate(state.posterior_alpha(), state.posterior_beta(), rng)
                         : beta_variate(state.alpha, state.beta, rng);
}

/// Maximum redraws before the all-zero guard forces a unit on.
inline constexpr int kMaskRedraws = 10;

inline Mask sample_mask(double p, std::size_t dim, Stream &rng) {
    Mask mask(dim, 0);
    for (int attempt = 0; attempt <= kMaskRedraws; ++attempt) {
        bool any = false;
        for (auto &z : mask) {
            z = rng.uniform() < p ? 1 : 0;
            any = any || z;
        }
        if (any) return mask;
    }
    mask[rng.below(dim)] = 1;
    return mask;
}

/// Returns a copy with keep/drop counts incremented by the observed masks.
inline BetaState beta_posterior_update(const BetaState &state, std::span<const Mask> masks) {
    if (masks.empty()) throw ConfigError("beta_posterior_update: no masks observed");
    BetaState next = state;
    for (const auto &m : masks) {
        const auto ones = static_cast<std::uint64_t>(std::count(m.begin(), m.end(), 1));
        next.keep_count += ones;
        next.drop_count += m.size() - ones;
    }
    return next;
}

enum class Activation { ReLU };

struct LayerSpec {
    Matrix weights; // out_dim x in_dim
    Vector bias;    // out_dim
    BetaState beta_state;
    std::optional<double> fixed_keep_prob; // bypasses the Beta machinery

    std::size_t in_dim() const { return weights.cols; }
    std::size_t out_dim() const { return weights.rows; }

    bool operator==(const LayerSpec &) const = default;
};

struct DropoutHead {
    std::vector<LayerSpec> layers;
    FeatureMap kernel;
    std::size_t num_classes = 0;
    double tau = 1.0;
    double l2 = 0.0;
    Activation activation = Activation::ReLU;
    std::uint64_t seed = 0;

    std::size_t embedding_dim() const { return kernel.input_dim(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto &l : layers) n += l.weights.data.size() + l.bias.size();
        return n;
    }

    void validate() const {
        if (layers.empty()) throw ConfigError("head has no layers");
        if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
        if (!(l2 >= 0.0)) throw ConfigError("l2 must be >= 0");
        if (layers.front().in_dim() != kernel.output_dim())
            throw ConfigError("layer 0 input does not match kernel output dimension");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto &l = layers[i];
            l.beta_state.validate();
            if (l.bias.size() != l.out_dim())
                throw ConfigError("layer " + std::to_string(i) + ": bias length mismatch");
            if (i > 0 && l.in_dim() != layers[i - 1].out_dim())
                throw ConfigError("layer " + std::to_string(i) + ": input does not chain");
            for (double w : l.weights.data)
                if (!std::isfinite(w)) throw NumericError("layer " + std::to_string(i) + ": non-finite weight");
            for (double b : l.bias)
                if (!std::isfinite(b)) throw NumericError("layer " + std::to_string(i) + ": non-finite bias");
        }
        if (layers.back().out_dim() != num_classes)
            throw ConfigError("last layer output does not match num_classes");
    }
};

struct HeadOptions {
    std::vector<std::size_t> hidden;
    double beta_alpha = 1e-4;
    double beta_beta = 1e-4;
    std::optional<double> fixed_keep_prob;
    double tau = 1.0;
    double l2 = 0.0;
    std::uint64_t seed = 0;
};

/// Builds a head with weights uniform in +-1/sqrt(fan_in) and zero biases.
inline DropoutHead make_head(const KernelConfig &kernel, std::size_t embedding_dim,
                             std::size_t num_classes, const HeadOptions &opt) {
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    DropoutHead head;
    head.kernel = FeatureMap(kernel, embedding_dim);
    head.num_classes = num_classes;
    head.tau = opt.tau;
    head.l2 = opt.l2;
    head.seed = opt.seed;

    std::vector<std::size_t> widths{head.kernel.output_dim()};
    for (auto w : opt.hidden) {
        if (w < 1) throw ConfigError("hidden layer width must be >= 1");
        widths.push_back(w);
    }
    widths.push_back(num_classes);

    Stream rng = Stream::keyed(opt.seed, 0x494e4954ULL);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        LayerSpec layer;
        layer.weights = Matrix(widths[i + 1], widths[i]);
        layer.bias.assign(widths[i + 1], 0.0);
        const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i]));
        for (double &w : layer.weights.data) w = bound * (2.0 * rng.uniform() - 1.0);
        layer.beta_state = BetaState{opt.beta_alpha, opt.beta_beta, 0, 0};
        layer.fixed_keep_prob = opt.fixed_keep_prob;
        head.layers.push_back(std::move(layer));
    }
    head.validate();
    return head;
}

inline double layer_keep_prob(const LayerSpec &layer, Stream &rng, bool use_posterior) {
    if (layer.fixed_keep_prob) return *layer.fixed_keep_prob;
    return sample_keep_prob(layer.beta_state, rng, use_posterior);
}

/// One mask per layer: draws p_i once for the layer, then the Bernoulli mask.
inline std::vector<Mask> sample_head_masks(const DropoutHead &head, Stream &rng, bool use_posterior) {
    std::vector<Mask> masks;
    masks.reserve(head.layers.size());
    for (const auto &layer : head.layers) {
        const double p = layer_keep_prob(layer, rng, use_posterior);
        masks.push_back(sample_mask(p, layer.in_dim(), rng));
    }
    return masks;
}

inline void softmax_inplace(Vector &v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double &x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double &x : v) x /= sum;
}

/// Intermediate values of one stochastic pass, kept for backpropagation.
/// inputs[i] is h_{i-1} (before masking); pre[i] is the pre-activation of layer i.
struct ForwardTrace {
    std::vector<Vector> inputs;
    std::vector<Vector> pre;
    Vector probs;
};

inline void check_masks(const DropoutHead &head, std::span<const double> phi_x, std::span<const Mask> masks) {
    if (masks.size() != head.layers.size())
        throw DataError("forward: expected " + std::to_string(head.layers.size()) + " masks, got " +
                        std::to_string(masks.size()));
    if (phi_x.size() != head.layers.front().in_dim())
        throw DataError("forward: layer 0 expects input dimension " +
                        std::to_string(head.layers.front().in_dim()) + ", got " + std::to_string(phi_x.size()));
    for (std::size_t i = 0; i < masks.size(); ++i)
        if (masks[i].size() != head.layers[i].in_dim())
            throw DataError("forward: mask length mismatch at layer " + std::to_string(i));
}

/// h_i = relu(M_i (z_i * h_{i-1}) / sqrt(r_{i-1}) + b_i); the final layer is
/// left linear and followed by softmax.
inline ForwardTrace forward_trace(const DropoutHead &head, std::span<const double> phi_x,
                                  std::span<const Mask> masks) {
    check_masks(head, phi_x, masks);
    ForwardTrace tr;
    Vector h(phi_x.begin(), phi_x.end());
    const std::size_t L = head.layers.size();
    for (std::size_t i = 0; i < L; ++i) {
        const auto &layer = head.layers[i];
        const auto &z = masks[i];
        const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in_dim()));
        Vector a(layer.out_dim());
        for (std::size_t r = 0; r < layer.out_dim(); ++r) {
            const auto w = layer.weights.row(r);
            double s = 0.0;
            for (std::size_t c = 0; c < layer.in_dim(); ++c)
                if (z[c]) s += w[c] * h[c];
            a[r] = scale * s + layer.bias[r];
        }
        tr.inputs.push_back(std::move(h));
        tr.pre.push_back(a);
        if (i + 1 < L)
            for (double &v : a) v = std::max(v, 0.0);
        h = std::move(a);
    }
    softmax_inplace(h);
    tr.probs = std::move(h);
    return tr;
}

struct ForwardResult {
    Vector logits;
    Vector probs;
};

inline ForwardResult forward_stochastic(const DropoutHead &head, std::span<const double> phi_x,
                                        std::span<const Mask> masks) {
    auto tr = forward_trace(head, phi_x, masks);
    return {std::move(tr.pre.back()), std::move(tr.probs)};
}

struct PredictiveSummary {
    Vector mean_probs;
    Vector sample_variance;
    Vector predictive_variance;
    std::size_t num_passes = 0;
    std::optional<Matrix> per_pass_probs;
};

inline Vector predictive_variance(const PredictiveSummary &summary, double tau) {
    if (!(tau > 0.0)) throw ConfigError("predictive_variance: tau must be > 0");
    Vector out = summary.sample_variance;
    for (double &v : out) v += 1.0 / tau;
    return out;
}

struct McOptions {
    std::size_t passes = 50;
    bool use_posterior = true;
    bool keep_passes = false;
};

/// Monte Carlo predictive mean over `passes` stochastic forward passes of an
/// already kernel-mapped input. Pass t uses the child stream rng.split(t).
inline PredictiveSummary predict_mc_mapped(const DropoutHead &head, std::span<const double> phi_x,
                                           const Stream &rng, const McOptions &opt) {
    if (opt.passes < 1) throw ConfigError("predict_mc: T must be >= 1");
    const std::size_t K = head.num_classes;
    PredictiveSummary s;
    s.num_passes = opt.passes;
    s.mean_probs.assign(K, 0.0);
    Vector m2(K, 0.0);
    if (opt.keep_passes) s.per_pass_probs = Matrix(opt.passes, K);

    for (std::size_t t = 0; t < opt.passes; ++t) {
        Stream pass = rng.split(t);
        const auto masks = sample_head_masks(head, pass, opt.use_posterior);
        const auto probs = forward_stochastic(head, phi_x, masks).probs;
        const double n = static_cast<double>(t + 1);
        for (std::size_t k = 0; k < K; ++k) {
            const double d = probs[k] - s.mean_probs[k];
            s.mean_probs[k] += d / n;
            m2[k] += d * (probs[k] - s.mean_probs[k]);
        }
        if (s.per_pass_probs)
            std::copy(probs.begin(), probs.end(), s.per_pass_probs->row(t).begin());
    }
    s.sample_variance.resize(K);
    for (std::size_t k = 0; k < K; ++k) s.sample_variance[k] = std::max(0.0, m2[k] / static_cast<double>(opt.passes));
    s.predictive_variance = predictive_variance(s, head.tau);
    return s;
}

inline PredictiveSummary predict_mc(const DropoutHead &head, std::span<const double> x, const Stream &rng,
                                    const McOptions &opt) {
    return predict_mc_mapped(head, head.kernel(x), rng, opt);
}

/// Stream for instance `instance_key` under `seed`; independent of scheduling.
inline Stream prediction_stream(std::uint64_t seed, std::uint64_t instance_key) {
    return Stream::keyed(seed, 0x5052454458ULL, instance_key);
}

} // namespace kdrop
