#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kdrop/bayes_dropout.hpp"
#include "kdrop/dataset.hpp"
#include "kdrop/error.hpp"
#include "kdrop/random.hpp"

namespace kdrop {

struct TrainConfig {
    std::size_t epochs = 100;
    double learning_rate = 1e-2;
    double adam_epsilon = 1e-8;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double l2 = 0.0;
    std::size_t batch_size = 16;
    std::size_t early_stop_patience = 10;
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
    std::size_t mc_passes_eval = 50;
    /// Accumulate mask counts into the Beta posterior and sample p_i from it.
    bool use_posterior = true;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must be in (0,1)");
        if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must be in (0,1)");
        if (!(l2 >= 0.0)) throw ConfigError("l2 must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
            throw ConfigError("validation_fraction must be in [0,1)");
        if (early_stop_patience > epochs) throw ConfigError("early_stop_patience must be <= epochs");
        if (mc_passes_eval < 1) throw ConfigError("mc_passes_eval must be >= 1");
    }
};

/// Kernel-mapped features with labels; masks are given per instance per layer.
struct Batch {
    std::vector<Vector> features;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

using BatchMasks = std::vector<std::vector<Mask>>;

struct LayerGradient {
    Matrix weights;
    Vector bias;
};

struct LossGradient {
    double loss = 0.0;
    std::vector<LayerGradient> layers;
};

inline void check_labels(const DropoutHead &head, const Batch &batch) {
    if (batch.features.size() != batch.labels.size()) throw DataError("batch features/labels length mismatch");
    for (std::size_t i = 0; i < batch.labels.size(); ++i)
        if (batch.labels[i] >= head.num_classes)
            throw DataError("label out of range at batch index " + std::to_string(i));
}

inline double l2_penalty(const DropoutHead &head) {
    double s = 0.0;
    for (const auto &l : head.layers) s += squared_norm(l.weights);
    return head.l2 * s;
}

/// Mean cross-entropy over the batch plus l2 * sum ||M_i||^2, with analytic
/// gradients by backpropagation through the masked, scaled layers.
inline LossGradient loss_and_gradient(const DropoutHead &head, const Batch &batch, const BatchMasks &masks) {
    check_labels(head, batch);
    if (batch.size() == 0) throw DataError("empty batch");
    if (masks.size() != batch.size()) throw DataError("masks must be given for every batch instance");

    const std::size_t L = head.layers.size();
    LossGradient out;
    out.layers.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
        out.layers[i].weights = Matrix(head.layers[i].out_dim(), head.layers[i].in_dim());
        out.layers[i].bias.assign(head.layers[i].out_dim(), 0.0);
    }
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    double ce = 0.0;
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const auto tr = forward_trace(head, batch.features[n], masks[n]);
        const std::size_t y = batch.labels[n];
        ce -= std::log(std::max(tr.probs[y], std::numeric_limits<double>::min()));

        Vector delta = tr.probs;
        delta[y] -= 1.0;
        for (std::size_t i = L; i-- > 0;) {
            const auto &layer = head.layers[i];
            const auto &z = masks[n][i];
            const auto &h = tr.inputs[i];
            const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in_dim()));
            auto &g = out.layers[i];
            for (std::size_t r = 0; r < layer.out_dim(); ++r) {
                g.bias[r] += inv_n * delta[r];
                const double d = inv_n * delta[r] * scale;
                auto grow = g.weights.row(r);
                for (std::size_t c = 0; c < layer.in_dim(); ++c)
                    if (z[c]) grow[c] += d * h[c];
            }
            if (i == 0) break;
            Vector prev(layer.in_dim(), 0.0);
            for (std::size_t r = 0; r < layer.out_dim(); ++r) {
                const auto w = layer.weights.row(r);
                for (std::size_t c = 0; c < layer.in_dim(); ++c)
                    if (z[c]) prev[c] += w[c] * delta[r];
            }
            const auto &pre = tr.pre[i - 1];
            for (std::size_t c = 0; c < prev.size(); ++c) prev[c] = pre[c] > 0.0 ? prev[c] * scale : 0.0;
            delta = std::move(prev);
        }
    }
    out.loss = ce * inv_n + l2_penalty(head);
    if (head.l2 > 0.0)
        for (std::size_t i = 0; i < L; ++i) {
            const auto &w = head.layers[i].weights.data;
            auto &g = out.layers[i].weights.data;
            for (std::size_t j = 0; j < w.size(); ++j) g[j] += 2.0 * head.l2 * w[j];
        }
    return out;
}

inline double loss(const DropoutHead &head, const Batch &batch, const BatchMasks &masks) {
    check_labels(head, batch);
    if (batch.size() == 0) throw DataError("empty batch");
    double ce = 0.0;
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const auto probs = forward_stochastic(head, batch.features[n], masks.at(n)).probs;
        ce -= std::log(std::max(probs[batch.labels[n]], std::numeric_limits<double>::min()));
    }
    return ce / static_cast<double>(batch.size()) + l2_penalty(head);
}

struct GradientCheckReport {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t parameters_checked = 0;
};

/// Compares analytic gradients with central finite differences.
inline GradientCheckReport gradient_check(const DropoutHead &head, const Batch &batch, const BatchMasks &masks,
                                          double step = 1e-5) {
    const auto analytic = loss_and_gradient(head, batch, masks);
    DropoutHead probe = head;
    GradientCheckReport rep;
    auto check = [&](double &param, double grad) {
        const double saved = param;
        param = saved + step;
        const double up = loss(probe, batch, masks);
        param = saved - step;
        const double down = loss(probe, batch, masks);
        param = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double abs_err = std::abs(numeric - grad);
        const double rel = abs_err / std::max({std::abs(numeric), std::abs(grad), 1e-6});
        rep.max_absolute_error = std::max(rep.max_absolute_error, abs_err);
        rep.max_relative_error = std::max(rep.max_relative_error, rel);
        ++rep.parameters_checked;
    };
    for (std::size_t i = 0; i < probe.layers.size(); ++i) {
        auto &layer = probe.layers[i];
        for (std::size_t j = 0; j < layer.weights.data.size(); ++j)
            check(layer.weights.data[j], analytic.layers[i].weights.data[j]);
        for (std::size_t j = 0; j < layer.bias.size(); ++j) check(layer.bias[j], analytic.layers[i].bias[j]);
    }
    return rep;
}

/// Adaptive moment estimation over all weights and biases of a head.
class Adam {
public:
    Adam(const DropoutHead &head, const TrainConfig &cfg) : cfg_(cfg) {
        for (const auto &l : head.layers) {
            m_.emplace_back(l.weights.data.size() + l.bias.size(), 0.0);
            v_.emplace_back(l.weights.data.size() + l.bias.size(), 0.0);
        }
    }

    void step(DropoutHead &head, const std::vector<LayerGradient> &grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < head.layers.size(); ++i) {
            auto &layer = head.layers[i];
            std::size_t j = 0;
            auto update = [&](double &param, double g) {
                double &m = m_[i][j];
                double &v = v_[i][j];
                m = cfg_.adam_beta1 * m + (1.0 - cfg_.adam_beta1) * g;
                v = cfg_.adam_beta2 * v + (1.0 - cfg_.adam_beta2) * g * g;
                param -= cfg_.learning_rate * (m / c1) / (std::sqrt(v / c2) + cfg_.adam_epsilon);
                ++j;
            };
            for (std::size_t k = 0; k < layer.weights.data.size(); ++k) update(layer.weights.data[k], grads[i].weights.data[k]);
            for (std::size_t k = 0; k < layer.bias.size(); ++k) update(layer.bias[k], grads[i].bias[k]);
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Vector> m_, v_;
    std::uint64_t t_ = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainTrace {
    double initial_train_loss = std::numeric_limits<double>::quiet_NaN();
    double initial_val_loss = std::numeric_limits<double>::quiet_NaN();
    std::vector<EpochRecord> epochs;
    bool stopped_early = false;
    std::size_t best_epoch = 0; // 0 when validation is disabled
    std::size_t train_size = 0;
    std::size_t val_size = 0;
};

inline void write_trace_csv(std::ostream &os, const TrainTrace &trace) {
    os << "epoch,train_loss,val_loss,stopped_early\n";
    os.precision(17);
    for (std::size_t i = 0; i < trace.epochs.size(); ++i) {
        const auto &e = trace.epochs[i];
        os << e.epoch << ',' << e.train_loss << ',';
        if (!std::isnan(e.val_loss)) os << e.val_loss;
        os << ',' << ((trace.stopped_early && i + 1 == trace.epochs.size()) ? 1 : 0) << '\n';
    }
}

inline std::vector<Vector> map_features(const DropoutHead &head, const EmbeddingDataset &data) {
    std::vector<Vector> out;
    out.reserve(data.size());
    for (const auto &inst : data.instances) out.push_back(head.kernel(inst.values()));
    return out;
}

/// Cross-entropy of the MC predictive mean, the quantity used for early stopping.
inline double mc_loss(const DropoutHead &head, std::span<const Vector> features, std::span<const std::size_t> labels,
                      const Stream &rng, std::size_t passes, bool use_posterior) {
    if (features.empty()) return std::numeric_limits<double>::quiet_NaN();
    double ce = 0.0;
    const McOptions opt{passes, use_posterior, false};
    for (std::size_t n = 0; n < features.size(); ++n) {
        const auto s = predict_mc_mapped(head, features[n], rng.split(n), opt);
        ce -= std::log(std::max(s.mean_probs[labels[n]], std::numeric_limits<double>::min()));
    }
    return ce / static_cast<double>(features.size());
}

/// Stratified hold-out of `fraction` of each class; every class keeps at
/// least one training instance.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
validation_split(const EmbeddingDataset &data, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> train, val;
    Stream rng = Stream::keyed(seed, 0x56414cULL);
    for (std::size_t c = 0; c < data.num_classes(); ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.instances[i].label == c) idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 0.5));
        if (idx.size() > 0 && n_val >= idx.size()) n_val = idx.size() - 1;
        val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
        train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

struct TrainResult {
    DropoutHead head;
    TrainTrace trace;
};

/// Minibatch training with per-instance dropout masks and Adam updates.
///
/// Each step draws one keep-probability per layer, then an independent mask per
/// instance. With `use_posterior` the drawn masks are added to the layer's
/// Beta counts, so later steps sample p_i from the updated posterior. When a
/// validation set is held out, training stops once the validation loss fails to
/// improve for more than `early_stop_patience` epochs and the best head is returned.
inline TrainResult train(const DropoutHead &initial, const EmbeddingDataset &data, const TrainConfig &cfg) {
    cfg.validate();
    TrainResult res{initial, {}};
    if (cfg.epochs == 0) return res;
    if (data.size() == 0) throw DataError("train: empty dataset with epochs > 0");
    if (data.dim != initial.embedding_dim())
        throw DataError("train: dataset dim " + std::to_string(data.dim) + " != head input dim " +
                        std::to_string(initial.embedding_dim()));
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.instances[i].label >= initial.num_classes)
            throw DataError("train: label out of range at instance " + std::to_string(i));

    DropoutHead head = initial;
    head.l2 = cfg.l2;

    std::vector<std::size_t> train_idx(data.size()), val_idx;
    std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
    if (cfg.validation_fraction > 0.0) {
        auto [t, v] = validation_split(data, cfg.validation_fraction, cfg.seed);
        if (!v.empty()) {
            train_idx = std::move(t);
            val_idx = std::move(v);
        }
    }

    const auto all_features = map_features(head, data);
    auto gather = [&](const std::vector<std::size_t> &idx, std::vector<Vector> &f, std::vector<std::size_t> &y) {
        for (auto i : idx) {
            f.push_back(all_features[i]);
            y.push_back(data.instances[i].label);
        }
    };
    std::vector<Vector> train_f, val_f;
    std::vector<std::size_t> train_y, val_y;
    gather(train_idx, train_f, train_y);
    gather(val_idx, val_f, val_y);

    auto &trace = res.trace;
    trace.train_size = train_f.size();
    trace.val_size = val_f.size();
    const Stream eval_rng = Stream::keyed(cfg.seed, 0x4556414cULL);
    trace.initial_train_loss = mc_loss(head, train_f, train_y, eval_rng, cfg.mc_passes_eval, cfg.use_posterior);
    trace.initial_val_loss = mc_loss(head, val_f, val_y, eval_rng.split(1), cfg.mc_passes_eval, cfg.use_posterior);

    Adam adam(head, cfg);
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
    DropoutHead best = head;
    std::vector<std::size_t> order(train_f.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Stream epoch_rng = Stream::keyed(cfg.seed, 0x45504f4348ULL, epoch);
        std::shuffle(order.begin(), order.end(), epoch_rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            Batch batch;
            for (std::size_t j = start; j < end; ++j) {
                batch.features.push_back(train_f[order[j]]);
                batch.labels.push_back(train_y[order[j]]);
            }
            BatchMasks masks(batch.size());
            for (std::size_t li = 0; li < head.layers.size(); ++li) {
                auto &layer = head.layers[li];
                const double p = layer_keep_prob(layer, epoch_rng, cfg.use_posterior);
                std::vector<Mask> layer_masks;
                for (std::size_t n = 0; n < batch.size(); ++n) {
                    masks[n].push_back(sample_mask(p, layer.in_dim(), epoch_rng));
                    layer_masks.push_back(masks[n].back());
                }
                if (cfg.use_posterior && !layer.fixed_keep_prob)
                    layer.beta_state = beta_posterior_update(layer.beta_state, layer_masks);
            }
            auto lg = loss_and_gradient(head, batch, masks);
            if (!std::isfinite(lg.loss)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
            loss_sum += lg.loss * static_cast<double>(batch.size());
            adam.step(head, lg.layers);
        }

        EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), std::numeric_limits<double>::quiet_NaN()};
        if (!val_f.empty()) {
            rec.val_loss = mc_loss(head, val_f, val_y, eval_rng.split(1), cfg.mc_passes_eval, cfg.use_posterior);
            if (!std::isfinite(rec.val_loss)) throw NumericError("train: non-finite validation loss");
        }
        trace.epochs.push_back(rec);

        if (!val_f.empty()) {
            if (rec.val_loss < best_val) {
                best_val = rec.val_loss;
                best = head;
                trace.best_epoch = epoch;
                bad_epochs = 0;
            } else if (++bad_epochs > cfg.early_stop_patience) {
                trace.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    res.head = val_f.empty() ? std::move(head) : std::move(best);
    return res;
}

} // namespace kdrop
