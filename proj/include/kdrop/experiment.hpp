#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "kdrop/bayes_dropout.hpp"
#include "kdrop/calibration.hpp"
#include "kdrop/data_io.hpp"
#include "kdrop/dataset.hpp"
#include "kdrop/error.hpp"
#include "kdrop/kernels.hpp"
#include "kdrop/splits.hpp"
#include "kdrop/training.hpp"

namespace kdrop {

struct ExperimentConfig {
    std::string dataset_path;
    KernelConfig kernel;
    std::vector<std::size_t> head_layers;
    double beta_alpha = 1e-4;
    double beta_beta = 1e-4;
    double tau = 1.0;
    TrainConfig train;
    SplitPlan split;
    /// When > 0, a zero/k-shot plan is drawn inside each fold of this many-fold CV.
    std::size_t wrap_cv_folds = 0;
    std::size_t mc_passes = 50;
    /// Fixed keep-probability MC dropout on raw features, no Beta priors.
    bool baseline_mode = false;
    double baseline_keep_prob = 0.9;
    std::string output_dir = "kdrop-out";
    double flag_threshold = 0.7;
    std::vector<double> bin_edges;
    bool write_svg = false;
    /// 0 = KDROP_THREADS or hardware concurrency.
    std::size_t threads = 0;

    void validate() const {
        kernel.validate();
        train.validate();
        split.validate();
        if (!(beta_alpha > 0.0) || !(beta_beta > 0.0)) throw ConfigError("beta_alpha and beta_beta must be > 0");
        if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
        if (mc_passes < 1) throw ConfigError("mc_passes must be >= 1");
        if (!(baseline_keep_prob > 0.0 && baseline_keep_prob <= 1.0))
            throw ConfigError("baseline_keep_prob must be in (0,1]");
        if (wrap_cv_folds == 1) throw ConfigError("wrap_cv_folds must be 0 or >= 2");
        for (auto w : head_layers)
            if (w < 1) throw ConfigError("head_layers widths must be >= 1");
    }

    /// Kernel actually used: identity on raw features in baseline mode.
    KernelConfig effective_kernel() const {
        if (!baseline_mode) return kernel;
        KernelConfig k;
        k.kind = KernelKind::Linear;
        return k;
    }
};

inline nlohmann::json to_json(const SplitPlan &p) {
    const char *mode = p.mode == SplitMode::ZeroShot ? "zero_shot"
                       : p.mode == SplitMode::KShot  ? "k_shot"
                       : p.mode == SplitMode::FractionSplit ? "fraction"
                                                           : "cross_val";
    return {{"mode", mode},       {"k", p.k},       {"train_fraction", p.train_fraction},
            {"folds", p.folds},   {"stratified", p.stratified}, {"seed", p.seed}};
}

inline SplitPlan split_plan_from_json(const nlohmann::json &j, SplitPlan p = {}) {
    if (j.contains("mode")) {
        const auto m = j["mode"].get<std::string>();
        if (m == "zero_shot") p.mode = SplitMode::ZeroShot;
        else if (m == "k_shot") p.mode = SplitMode::KShot;
        else if (m == "fraction") p.mode = SplitMode::FractionSplit;
        else if (m == "cross_val") p.mode = SplitMode::CrossVal;
        else throw ConfigError("unknown split mode '" + m + "'");
    }
    if (j.contains("k")) p.k = j["k"].get<std::size_t>();
    if (j.contains("train_fraction")) p.train_fraction = j["train_fraction"].get<double>();
    if (j.contains("folds")) p.folds = j["folds"].get<std::size_t>();
    if (j.contains("stratified")) p.stratified = j["stratified"].get<bool>();
    if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
    return p;
}

inline nlohmann::json to_json(const ExperimentConfig &c) {
    return {{"dataset_path", c.dataset_path},
            {"kernel", to_json(c.kernel)},
            {"head_layers", c.head_layers},
            {"beta_alpha", c.beta_alpha},
            {"beta_beta", c.beta_beta},
            {"tau", c.tau},
            {"train", to_json(c.train)},
            {"split", to_json(c.split)},
            {"wrap_cv_folds", c.wrap_cv_folds},
            {"mc_passes", c.mc_passes},
            {"baseline_mode", c.baseline_mode},
            {"baseline_keep_prob", c.baseline_keep_prob},
            {"output_dir", c.output_dir},
            {"flag_threshold", c.flag_threshold},
            {"bin_edges", c.bin_edges},
            {"write_svg", c.write_svg}};
}

/// Applies the keys present in `j` on top of `c`.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json &j, ExperimentConfig c = {}) {
    try {
        auto opt = [&](const char *key, auto &field) {
            if (j.contains(key)) field = j[key].get<std::remove_reference_t<decltype(field)>>();
        };
        opt("dataset_path", c.dataset_path);
        if (j.contains("kernel")) c.kernel = kernel_from_json(j["kernel"], c.kernel);
        opt("head_layers", c.head_layers);
        opt("beta_alpha", c.beta_alpha);
        opt("beta_beta", c.beta_beta);
        opt("tau", c.tau);
        if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
        if (j.contains("split")) c.split = split_plan_from_json(j["split"], c.split);
        opt("wrap_cv_folds", c.wrap_cv_folds);
        opt("mc_passes", c.mc_passes);
        opt("baseline_mode", c.baseline_mode);
        opt("baseline_keep_prob", c.baseline_keep_prob);
        opt("output_dir", c.output_dir);
        opt("flag_threshold", c.flag_threshold);
        opt("bin_edges", c.bin_edges);
        opt("write_svg", c.write_svg);
        opt("threads", c.threads);
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline std::size_t resolve_threads(std::size_t requested) {
    if (requested > 0) return requested;
    if (const char *env = std::getenv("KDROP_THREADS")) {
        char *end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
        throw ConfigError("KDROP_THREADS must be a positive integer");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto &th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

/// MC predictions for the given instances. Each instance's stream is keyed by
/// (seed, hash of its id), so results do not depend on evaluation order.
inline std::vector<PredictionRecord> predict_records(const DropoutHead &head, const EmbeddingDataset &data,
                                                     const std::vector<std::size_t> &indices, std::uint64_t seed,
                                                     const McOptions &opt) {
    std::vector<PredictionRecord> out;
    out.reserve(indices.size());
    for (auto i : indices) {
        const auto &inst = data.instances.at(i);
        const auto s = predict_mc(head, inst.values(), prediction_stream(seed, fnv1a(inst.id)), opt);
        out.push_back(PredictionRecord::make(inst.id, s.mean_probs, inst.label, s.sample_variance));
    }
    return out;
}

struct SplitOutcome {
    std::size_t index = 0;
    Split split;
    bool trained = false;
    TrainTrace trace;
    ModelArtifact model;
    std::vector<PredictionRecord> predictions;
    CalibrationReport report;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::string dataset_name;
    std::size_t dataset_dim = 0;
    std::vector<std::string> classes;
    std::string protocol;
    std::vector<SplitOutcome> splits;
    std::string timestamp;
};

inline std::string protocol_description(const ExperimentConfig &cfg) {
    std::string d = cfg.split.describe();
    if (cfg.wrap_cv_folds > 0) d += " within " + std::to_string(cfg.wrap_cv_folds) + "-fold-cv";
    return d;
}

inline SplitOutcome run_split(const ExperimentConfig &cfg, const EmbeddingDataset &data, const Split &split,
                              std::size_t index) {
    SplitOutcome out;
    out.index = index;
    out.split = split;
    try {
        if (split.test.empty()) throw DataError("empty test set");
        HeadOptions hopt;
        hopt.hidden = cfg.head_layers;
        hopt.beta_alpha = cfg.beta_alpha;
        hopt.beta_beta = cfg.beta_beta;
        hopt.tau = cfg.tau;
        hopt.l2 = cfg.train.l2;
        hopt.seed = Stream::keyed(cfg.train.seed, 0x48454144ULL, index).key();
        if (cfg.baseline_mode) hopt.fixed_keep_prob = cfg.baseline_keep_prob;
        const DropoutHead initial = make_head(cfg.effective_kernel(), data.dim, data.num_classes(), hopt);

        TrainConfig tcfg = cfg.train;
        tcfg.seed = Stream::keyed(cfg.train.seed, 0x5452414eULL, index).key();
        if (cfg.baseline_mode) tcfg.use_posterior = false;
        // Small few-shot budgets train on everything for all epochs.
        if (cfg.split.mode == SplitMode::KShot && cfg.split.k * data.num_classes() < 20) tcfg.validation_fraction = 0.0;

        DropoutHead head = initial;
        if (!split.train.empty() && tcfg.epochs > 0) {
            auto res = train(initial, data.subset(split.train), tcfg);
            head = std::move(res.head);
            out.trace = std::move(res.trace);
            out.trained = true;
        }

        const McOptions mopt{cfg.mc_passes, tcfg.use_posterior, false};
        const auto eval_seed = Stream::keyed(cfg.train.seed, 0x4556414cULL, index).key();
        out.predictions = predict_records(head, data, split.test, eval_seed, mopt);
        out.report = calibration_report(out.predictions, {cfg.bin_edges, cfg.flag_threshold});
        out.model = ModelArtifact{std::move(head), tcfg, kModelVersion,
                                  Provenance{data.name, protocol_description(cfg) + ",split=" + std::to_string(index),
                                             cfg.train.seed, ""}};
    } catch (const ConfigError &e) {
        throw ConfigError("split " + std::to_string(index) + ": " + e.what());
    } catch (const NumericError &e) {
        throw NumericError("split " + std::to_string(index) + ": " + e.what());
    } catch (const DataError &e) {
        throw DataError("split " + std::to_string(index) + ": " + e.what());
    }
    return out;
}

inline std::vector<Split> experiment_splits(const ExperimentConfig &cfg, const EmbeddingDataset &data) {
    return cfg.wrap_cv_folds > 0 ? make_wrapped_splits(data, cfg.split, cfg.wrap_cv_folds) : make_splits(data, cfg.split);
}

/// Splits, trains and evaluates every split; nothing is written to disk.
inline ExperimentResult run_experiment(const ExperimentConfig &cfg, const EmbeddingDataset &data) {
    cfg.validate();
    data.validate();
    if (data.size() == 0) throw DataError("dataset is empty");
    ExperimentResult res;
    res.config = cfg;
    res.dataset_name = data.name;
    res.dataset_dim = data.dim;
    res.classes = data.classes;
    res.protocol = protocol_description(cfg);
    res.timestamp = utc_timestamp();

    const auto splits = experiment_splits(cfg, data);
    res.splits.resize(splits.size());
    parallel_for(splits.size(), resolve_threads(cfg.threads),
                 [&](std::size_t i) { res.splits[i] = run_split(cfg, data, splits[i], i); });
    for (auto &s : res.splits) s.model.provenance.timestamp = res.timestamp;
    return res;
}

/// Evaluates a saved model on every instance of `data` as a single split.
inline ExperimentResult evaluate_model(const ModelArtifact &model, const EmbeddingDataset &data,
                                       const ExperimentConfig &cfg) {
    data.validate();
    if (data.size() == 0) throw DataError("dataset is empty");
    const auto &head = model.head;
    if (data.dim != head.embedding_dim())
        throw DataError("dataset dim " + std::to_string(data.dim) + " != model input dim " +
                        std::to_string(head.embedding_dim()));
    if (data.num_classes() != head.num_classes)
        throw DataError("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                        std::to_string(head.num_classes));
    ExperimentResult res;
    res.config = cfg;
    res.config.kernel = head.kernel.config();
    res.config.train = model.train_config;
    res.config.head_layers.clear();
    for (std::size_t i = 0; i + 1 < head.layers.size(); ++i) res.config.head_layers.push_back(head.layers[i].out_dim());
    res.dataset_name = data.name;
    res.dataset_dim = data.dim;
    res.classes = data.classes;
    res.protocol = "eval(" + model.provenance.dataset + ":" + model.provenance.split + ")";
    res.timestamp = utc_timestamp();

    SplitOutcome out;
    out.split.test.resize(data.size());
    std::iota(out.split.test.begin(), out.split.test.end(), std::size_t{0});
    const McOptions mopt{cfg.mc_passes, model.train_config.use_posterior, false};
    out.predictions = predict_records(head, data, out.split.test, Stream::keyed(cfg.train.seed, 0x4556414cULL).key(), mopt);
    out.report = calibration_report(out.predictions, {cfg.bin_edges, cfg.flag_threshold});
    out.model = model;
    res.splits.push_back(std::move(out));
    return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline nlohmann::json optional_number(const std::optional<double> &v) {
    return v ? nlohmann::json(*v) : nlohmann::json();
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const CalibrationReport &r) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto &b : r.bins)
        bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"correct", b.correct}, {"incorrect", b.incorrect}});
    return {{"num_instances", r.num_instances},
            {"num_classes", r.num_classes},
            {"f1_macro", r.f1_macro},
            {"accuracy", r.accuracy},
            {"brier", r.brier},
            {"brier_multiclass", r.brier_multiclass},
            {"rmse", r.rmse},
            {"per_class_brier", r.per_class_brier},
            {"bins", bins},
            {"second_choice_accuracy", optional_number(r.second_choice_accuracy)},
            {"flagged", r.flagged},
            {"f1_undefined_classes", r.f1_undefined_classes},
            {"mean_max_prob_correct", finite_or_null(r.mean_max_prob_correct)},
            {"mean_max_prob_incorrect", finite_or_null(r.mean_max_prob_incorrect)}};
}

inline std::uint64_t split_digest(const Split &s) {
    std::ostringstream os;
    for (auto i : s.train) os << i << ',';
    os << '|';
    for (auto i : s.test) os << i << ',';
    return fnv1a(os.str());
}

inline nlohmann::json mean_metrics(const std::vector<SplitOutcome> &splits) {
    const double n = static_cast<double>(splits.size());
    double f1 = 0, acc = 0, brier = 0, bm = 0, rm = 0, sc = 0;
    std::size_t sc_n = 0;
    std::vector<double> pcb;
    for (const auto &s : splits) {
        const auto &r = s.report;
        f1 += r.f1_macro / n;
        acc += r.accuracy / n;
        brier += r.brier / n;
        bm += r.brier_multiclass / n;
        rm += r.rmse / n;
        if (r.second_choice_accuracy) {
            sc += *r.second_choice_accuracy;
            ++sc_n;
        }
        if (pcb.empty()) pcb.assign(r.per_class_brier.size(), 0.0);
        for (std::size_t k = 0; k < pcb.size(); ++k) pcb[k] += r.per_class_brier[k] / n;
    }
    return {{"f1_macro", f1},
            {"accuracy", acc},
            {"brier", brier},
            {"brier_multiclass", bm},
            {"rmse", rm},
            {"per_class_brier", pcb},
            {"second_choice_accuracy", sc_n ? nlohmann::json(sc / static_cast<double>(sc_n)) : nlohmann::json()}};
}

inline nlohmann::json report_json(const ExperimentResult &res) {
    const auto &cfg = res.config;
    nlohmann::json splits = nlohmann::json::array();
    for (const auto &s : res.splits) {
        nlohmann::json sj;
        sj["index"] = s.index;
        sj["train_size"] = s.split.train.size();
        sj["test_size"] = s.split.test.size();
        sj["train_indices"] = s.split.train;
        sj["test_indices"] = s.split.test;
        sj["split_digest"] = split_digest(s.split);
        sj["trained"] = s.trained;
        sj["epochs_run"] = s.trace.epochs.size();
        sj["stopped_early"] = s.trace.stopped_early;
        sj["best_epoch"] = s.trace.best_epoch;
        sj["metrics"] = to_json(s.report);
        splits.push_back(std::move(sj));
    }
    nlohmann::json protocol{{"description", res.protocol},
                            {"split", to_json(cfg.split)},
                            {"wrap_cv_folds", cfg.wrap_cv_folds},
                            {"num_splits", res.splits.size()}};
    if (cfg.split.mode == SplitMode::ZeroShot)
        protocol["note"] = "zero-shot: randomly initialised head evaluated without task training";
    return {{"tool", "kdrop"},
            {"report_version", 1},
            {"dataset", {{"name", res.dataset_name}, {"dim", res.dataset_dim}, {"classes", res.classes}}},
            {"mode", cfg.baseline_mode ? "baseline" : "proposed"},
            {"protocol", protocol},
            {"config", to_json(cfg)},
            {"splits", splits},
            {"mean", mean_metrics(res.splits)},
            {"timestamp", res.timestamp}};
}

inline nlohmann::json without_timestamp(nlohmann::json j) {
    j.erase("timestamp");
    return j;
}

inline void write_predictions_csv(std::ostream &os, const std::vector<SplitOutcome> &splits) {
    os.precision(17);
    std::size_t K = 0;
    for (const auto &s : splits)
        if (!s.predictions.empty()) K = s.predictions.front().mean_probs.size();
    os << "split,id,true_class,predicted_class,max_prob";
    for (std::size_t k = 0; k < K; ++k) os << ",p_" << k;
    for (std::size_t k = 0; k < K; ++k) os << ",var_" << k;
    os << '\n';
    for (const auto &s : splits)
        for (const auto &p : s.predictions) {
            os << s.index << ',' << p.instance_id << ',' << p.true_class << ',' << p.predicted_class << ','
               << p.max_prob();
            for (double v : p.mean_probs) os << ',' << v;
            for (double v : p.sample_variance) os << ',' << v;
            os << '\n';
        }
}

/// Reads the predictions CSV back into records (ids must not contain commas).
inline std::vector<PredictionRecord> read_predictions_csv(std::istream &in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("predictions: empty file");
    std::size_t K = 0;
    for (std::size_t pos = 0; (pos = line.find(",p_", pos)) != std::string::npos; ++pos) ++K;
    if (K < 2) throw DataError("predictions: header has fewer than two probability columns");
    std::vector<PredictionRecord> out;
    for (std::size_t line_no = 2; std::getline(in, line); ++line_no) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (cells.size() < 5 + K) throw DataError("predictions: line " + std::to_string(line_no) + " is short");
        try {
            PredictionRecord r;
            r.instance_id = cells[1];
            r.true_class = std::stoul(cells[2]);
            for (std::size_t k = 0; k < K; ++k) r.mean_probs.push_back(std::stod(cells[5 + k]));
            for (std::size_t k = 0; k < K && 5 + K + k < cells.size(); ++k)
                r.sample_variance.push_back(std::stod(cells[5 + K + k]));
            r.predicted_class = argmax(r.mean_probs);
            out.push_back(std::move(r));
        } catch (const std::logic_error &) {
            throw DataError("predictions: line " + std::to_string(line_no) + " is malformed");
        }
    }
    return out;
}

inline void write_per_class_csv(std::ostream &os, const ExperimentResult &res) {
    os.precision(17);
    os << "split,class_index,class,brier\n";
    for (const auto &s : res.splits)
        for (std::size_t k = 0; k < s.report.per_class_brier.size(); ++k)
            os << s.index << ',' << k << ',' << res.classes.at(k) << ',' << s.report.per_class_brier[k] << '\n';
}

inline void write_bins_csv(std::ostream &os, const ExperimentResult &res) {
    os.precision(17);
    os << "split,lower,upper,correct,incorrect\n";
    for (const auto &s : res.splits)
        for (const auto &b : s.report.bins)
            os << s.index << ',' << b.lower << ',' << b.upper << ',' << b.correct << ',' << b.incorrect << '\n';
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

struct DeltaRow {
    std::string metric;
    double proposed = 0.0;
    double baseline = 0.0;
    double delta = 0.0; // proposed - baseline
    bool improved = false;
};

struct DeltaTable {
    std::vector<DeltaRow> rows;

    const DeltaRow &at(const std::string &metric) const {
        for (const auto &r : rows)
            if (r.metric == metric) return r;
        throw ConfigError("no metric '" + metric + "' in delta table");
    }
};

/// Per-metric proposed - baseline differences of the mean metrics. Lower is
/// better for Brier and RMSE, so their improvements are negative deltas.
inline DeltaTable compare_runs(const nlohmann::json &proposed, const nlohmann::json &baseline) {
    try {
        if (proposed.at("dataset").at("name") != baseline.at("dataset").at("name"))
            throw ConfigError("compare: reports are for different datasets");
        const auto &pp = proposed.at("protocol");
        const auto &bp = baseline.at("protocol");
        if (pp.at("split").at("seed") != bp.at("split").at("seed"))
            throw ConfigError("compare: split seeds differ");
        if (pp.at("description") != bp.at("description")) throw ConfigError("compare: split protocols differ");
        const auto &ps = proposed.at("splits");
        const auto &bs = baseline.at("splits");
        if (ps.size() != bs.size()) throw ConfigError("compare: split counts differ");
        for (std::size_t i = 0; i < ps.size(); ++i)
            if (ps[i].at("split_digest") != bs[i].at("split_digest"))
                throw ConfigError("compare: split " + std::to_string(i) + " indices differ");

        DeltaTable table;
        const auto &pm = proposed.at("mean");
        const auto &bm = baseline.at("mean");
        for (const char *m : {"f1_macro", "accuracy", "brier", "brier_multiclass", "rmse", "second_choice_accuracy"}) {
            if (!pm.contains(m) || !bm.contains(m) || pm[m].is_null() || bm[m].is_null()) continue;
            DeltaRow r{m, pm[m].get<double>(), bm[m].get<double>(), 0.0, false};
            r.delta = r.proposed - r.baseline;
            const bool lower_better = r.metric.rfind("brier", 0) == 0 || r.metric == "rmse";
            r.improved = lower_better ? r.delta < 0.0 : r.delta > 0.0;
            table.rows.push_back(r);
        }
        return table;
    } catch (const nlohmann::json::exception &e) {
        throw DataError(std::string("compare: malformed report: ") + e.what());
    }
}

inline void write_delta_csv(std::ostream &os, const DeltaTable &t) {
    os.precision(17);
    os << "metric,proposed,baseline,delta,improved\n";
    for (const auto &r : t.rows)
        os << r.metric << ',' << r.proposed << ',' << r.baseline << ',' << r.delta << ',' << (r.improved ? 1 : 0) << '\n';
}

} // namespace kdrop
