#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kdrop/kdrop.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Collects explicitly given flags into a JSON overlay that is applied on top
/// of the --config file.
class Overlay {
public:
    template <typename T>
    CLI::Option *add(CLI::App *app, const std::string &flag, std::vector<std::string> paths, const std::string &help) {
        auto value = std::make_shared<T>();
        auto *opt = app->add_option(flag, *value, help);
        appliers_.push_back([opt, value, paths](json &j) {
            if (opt->count() == 0) return;
            for (const auto &p : paths) j[json::json_pointer(p)] = *value;
        });
        return opt;
    }

    CLI::Option *add_switch(CLI::App *app, const std::string &flag, const std::string &path, const std::string &help) {
        auto *opt = app->add_flag(flag, help);
        appliers_.push_back([opt, path](json &j) {
            if (opt->count() > 0) j[json::json_pointer(path)] = true;
        });
        return opt;
    }

    json build() const {
        json j = json::object();
        for (const auto &f : appliers_) f(j);
        return j;
    }

private:
    std::vector<std::function<void(json &)>> appliers_;
};

struct CommonArgs {
    std::string config_path;
    Overlay overlay;
};

void add_experiment_options(CLI::App *app, CommonArgs &args) {
    auto &o = args.overlay;
    app->add_option("--config", args.config_path, "JSON experiment config; explicit flags override it");
    o.add<std::string>(app, "--dataset-path", {"/dataset_path"}, "EMBF dataset file");
    o.add<std::string>(app, "--output-dir", {"/output_dir"}, "directory for reports and artifacts");
    o.add<std::string>(app, "--kernel", {"/kernel/kind"}, "squared | linear | rbf | laplacian | sigmoid");
    o.add<double>(app, "--kernel-gamma", {"/kernel/gamma"}, "RFF bandwidth");
    o.add<std::size_t>(app, "--kernel-rff-dim", {"/kernel/rff_dim"}, "number of random Fourier features");
    o.add<std::uint64_t>(app, "--kernel-rff-seed", {"/kernel/rff_seed"}, "seed for the RFF frequencies");
    o.add<double>(app, "--kernel-scale", {"/kernel/scale"}, "sigmoid kernel slope");
    o.add<bool>(app, "--kernel-concat-original", {"/kernel/concat_original"}, "append raw features to the map");
    o.add<std::vector<std::size_t>>(app, "--head-layers", {"/head_layers"}, "hidden layer widths")
        ->delimiter(',');
    o.add<double>(app, "--beta-alpha", {"/beta_alpha"}, "Beta prior alpha");
    o.add<double>(app, "--beta-beta", {"/beta_beta"}, "Beta prior beta");
    o.add<double>(app, "--tau", {"/tau"}, "model precision");
    o.add<std::size_t>(app, "--epochs", {"/train/epochs"}, "training epochs");
    o.add<double>(app, "--learning-rate", {"/train/learning_rate"}, "Adam step size");
    o.add<double>(app, "--l2", {"/train/l2"}, "weight decay");
    o.add<std::size_t>(app, "--batch-size", {"/train/batch_size"}, "minibatch size");
    o.add<std::size_t>(app, "--early-stop-patience", {"/train/early_stop_patience"}, "epochs without improvement");
    o.add<double>(app, "--validation-fraction", {"/train/validation_fraction"}, "held-out share of training data");
    o.add<bool>(app, "--use-posterior", {"/train/use_posterior"}, "sample keep-probabilities from the posterior");
    o.add<std::uint64_t>(app, "--seed", {"/train/seed", "/split/seed"}, "seed for splits, init, training and MC");
    o.add<std::uint64_t>(app, "--split-seed", {"/split/seed"}, "seed for the split only");
    o.add<bool>(app, "--split-stratified", {"/split/stratified"}, "stratify splits by class");
    o.add<std::size_t>(app, "--mc-passes", {"/mc_passes"}, "stochastic passes at evaluation");
    o.add_switch(app, "--baseline-mode", "/baseline_mode", "fixed keep-probability dropout on raw features");
    o.add<double>(app, "--baseline-keep-prob", {"/baseline_keep_prob"}, "keep-probability in baseline mode");
    o.add<double>(app, "--flag-threshold", {"/flag_threshold"}, "max-probability below which predictions are flagged");
    o.add<std::vector<double>>(app, "--bin-edges", {"/bin_edges"}, "probability bin edges")->delimiter(',');
    o.add_switch(app, "--write-svg", "/write_svg", "also render SVG charts");
    o.add<std::size_t>(app, "--threads", {"/threads"}, "worker threads (default KDROP_THREADS)");
}

kdrop::ExperimentConfig resolve_config(const CommonArgs &args) {
    kdrop::ExperimentConfig cfg;
    if (!args.config_path.empty()) {
        json file;
        try {
            file = kdrop::read_json_file(args.config_path);
        } catch (const kdrop::DataError &e) {
            throw kdrop::ConfigError(std::string("config: ") + e.what());
        }
        if (!file.is_object()) throw kdrop::ConfigError("config: top level must be an object");
        cfg = kdrop::experiment_config_from_json(file, cfg);
    }
    return kdrop::experiment_config_from_json(args.overlay.build(), cfg);
}

kdrop::EmbeddingDataset load_dataset(const kdrop::ExperimentConfig &cfg) {
    if (cfg.dataset_path.empty()) throw kdrop::ConfigError("dataset_path is required");
    return kdrop::read_embf(cfg.dataset_path);
}

void print_summary(std::ostream &os, const std::string &label, const json &report) {
    const auto &m = report.at("mean");
    auto num = [&](const char *key) {
        std::ostringstream s;
        if (m.contains(key) && !m[key].is_null())
            s << std::fixed << std::setprecision(4) << m[key].get<double>();
        else
            s << "n/a";
        return s.str();
    };
    os << label << ": f1=" << num("f1_macro") << " accuracy=" << num("accuracy") << " brier=" << num("brier")
       << " rmse=" << num("rmse") << " second_choice=" << num("second_choice_accuracy") << '\n';
}

int run_and_write(const kdrop::ExperimentConfig &cfg, const std::string &label) {
    const auto data = load_dataset(cfg);
    const auto res = kdrop::run_experiment(cfg, data);
    const auto report = kdrop::write_experiment_outputs(res, cfg.output_dir);
    print_summary(std::cout, label, report);
    std::cout << "wrote " << (fs::path(cfg.output_dir) / "report.json").string() << '\n';
    return 0;
}

std::string escape_line(std::string s) {
    for (auto &c : s)
        if (c == '\n' || c == '\r') c = ' ';
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

int fail(const char *kind, int code, const std::string &message) {
    std::cerr << "kdrop: error kind=" << kind << " code=" << code << " message=\"" << escape_line(message) << "\"\n";
    return code;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Monte Carlo dropout with kernel feature maps and Beta-priored keep-probabilities"};
    app.require_subcommand(1);

    // train
    CommonArgs train_args;
    double train_fraction = 0.8;
    auto *train_cmd = app.add_subcommand("train", "train and evaluate on a single stratified hold-out split");
    add_experiment_options(train_cmd, train_args);
    auto *train_fraction_opt = train_cmd->add_option("--train-fraction", train_fraction, "share of data used for training");

    // eval
    CommonArgs eval_args;
    std::string model_path;
    auto *eval_cmd = app.add_subcommand("eval", "evaluate a saved model on a dataset");
    add_experiment_options(eval_cmd, eval_args);
    eval_cmd->add_option("--model", model_path, "model file written by train")->required();

    // fewshot
    CommonArgs few_args;
    std::vector<std::size_t> shots{0, 5, 15};
    std::size_t wrap_folds = 0;
    auto *few_cmd = app.add_subcommand("fewshot", "zero- and k-shot scenarios, optionally inside k-fold CV");
    add_experiment_options(few_cmd, few_args);
    few_cmd->add_option("--shots", shots, "shots per class; 0 means zero-shot")->delimiter(',');
    auto *wrap_opt = few_cmd->add_option("--wrap-cv-folds", wrap_folds, "draw each scenario inside every fold");

    // crossval
    CommonArgs cv_args;
    std::size_t folds = 5;
    auto *cv_cmd = app.add_subcommand("crossval", "stratified k-fold cross-validation");
    add_experiment_options(cv_cmd, cv_args);
    auto *folds_opt = cv_cmd->add_option("--folds", folds, "number of folds");

    // compare
    std::string proposed_path, baseline_path, delta_out;
    auto *cmp_cmd = app.add_subcommand("compare", "metric deltas (proposed - baseline) between two reports");
    cmp_cmd->add_option("--proposed", proposed_path, "report.json of the proposed run")->required();
    cmp_cmd->add_option("--baseline", baseline_path, "report.json of the baseline run")->required();
    cmp_cmd->add_option("--output", delta_out, "also write the delta table as CSV");

    // flag
    std::string predictions_path;
    double threshold = 0.7;
    auto *flag_cmd = app.add_subcommand("flag", "list predictions whose max probability is below a threshold");
    flag_cmd->add_option("--predictions", predictions_path, "predictions.csv from a run")->required();
    flag_cmd->add_option("--threshold", threshold, "flag threshold");

    // report-svg
    std::string report_path, svg_dir;
    auto *svg_cmd = app.add_subcommand("report-svg", "render SVG charts from a report");
    svg_cmd->add_option("--report", report_path, "report.json")->required();
    svg_cmd->add_option("--output-dir", svg_dir, "destination (defaults to the report's directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return fail("config", 2, e.what());
    }

    try {
        if (*train_cmd) {
            auto cfg = resolve_config(train_args);
            if (cfg.split.mode != kdrop::SplitMode::FractionSplit || train_fraction_opt->count() > 0)
                cfg.split = kdrop::SplitPlan::fraction(train_fraction, cfg.split.seed, cfg.split.stratified);
            return run_and_write(cfg, "train");
        }
        if (*cv_cmd) {
            auto cfg = resolve_config(cv_args);
            if (cfg.split.mode != kdrop::SplitMode::CrossVal || folds_opt->count() > 0)
                cfg.split = kdrop::SplitPlan::cross_val(folds_opt->count() > 0 || cfg.split.mode != kdrop::SplitMode::CrossVal
                                                            ? folds
                                                            : cfg.split.folds,
                                                        cfg.split.seed, cfg.split.stratified);
            return run_and_write(cfg, "crossval");
        }
        if (*few_cmd) {
            auto base = resolve_config(few_args);
            if (wrap_opt->count() > 0) base.wrap_cv_folds = wrap_folds;
            if (shots.empty()) throw kdrop::ConfigError("--shots must list at least one value");
            const auto data = load_dataset(base);
            json summary = {{"dataset", data.name}, {"scenarios", json::array()}};
            for (auto k : shots) {
                auto cfg = base;
                cfg.split = k == 0 ? kdrop::SplitPlan::zero_shot(base.split.seed)
                                   : kdrop::SplitPlan::k_shot(k, base.split.seed, base.split.stratified);
                cfg.output_dir = (fs::path(base.output_dir) / ("shot_" + std::to_string(k))).string();
                const auto res = kdrop::run_experiment(cfg, data);
                const auto report = kdrop::write_experiment_outputs(res, cfg.output_dir);
                print_summary(std::cout, res.protocol, report);
                summary["scenarios"].push_back(
                    {{"shots", k}, {"protocol", res.protocol}, {"output_dir", cfg.output_dir}, {"mean", report["mean"]}});
            }
            kdrop::io::write_text_atomic(fs::path(base.output_dir) / "summary.json", summary.dump(2) + "\n");
            std::cout << "wrote " << (fs::path(base.output_dir) / "summary.json").string() << '\n';
            return 0;
        }
        if (*eval_cmd) {
            const auto cfg = resolve_config(eval_args);
            cfg.validate();
            const auto model = kdrop::load_model(model_path);
            const auto data = load_dataset(cfg);
            const auto res = kdrop::evaluate_model(model, data, cfg);
            const auto report = kdrop::write_experiment_outputs(res, cfg.output_dir, false);
            print_summary(std::cout, "eval", report);
            std::cout << "wrote " << (fs::path(cfg.output_dir) / "report.json").string() << '\n';
            return 0;
        }
        if (*cmp_cmd) {
            const auto table = kdrop::compare_runs(kdrop::read_json_file(proposed_path), kdrop::read_json_file(baseline_path));
            std::cout << std::left << std::setw(24) << "metric" << std::right << std::setw(12) << "proposed"
                      << std::setw(12) << "baseline" << std::setw(12) << "delta" << "  improved\n";
            std::cout << std::fixed << std::setprecision(4);
            for (const auto &r : table.rows)
                std::cout << std::left << std::setw(24) << r.metric << std::right << std::setw(12) << r.proposed
                          << std::setw(12) << r.baseline << std::setw(12) << r.delta << "  " << (r.improved ? "yes" : "no")
                          << '\n';
            if (!delta_out.empty()) {
                std::ostringstream os;
                kdrop::write_delta_csv(os, table);
                kdrop::io::write_text_atomic(delta_out, os.str());
            }
            return 0;
        }
        if (*flag_cmd) {
            if (!(threshold >= 0.0 && threshold <= 1.0)) throw kdrop::ConfigError("--threshold must be in [0,1]");
            std::ifstream in(predictions_path);
            if (!in) throw kdrop::DataError("cannot open '" + predictions_path + "'");
            const auto preds = kdrop::read_predictions_csv(in);
            const auto flagged = kdrop::flag_uncertain(preds, threshold);
            std::cout << "id,max_prob,predicted_class,true_class\n";
            for (const auto &id : flagged) {
                const auto it = std::find_if(preds.begin(), preds.end(), [&](const auto &p) { return p.instance_id == id; });
                std::cout << id << ',' << it->max_prob() << ',' << it->predicted_class << ',' << it->true_class << '\n';
            }
            std::cerr << flagged.size() << " of " << preds.size() << " predictions below " << threshold << '\n';
            return 0;
        }
        if (*svg_cmd) {
            const auto report = kdrop::read_json_file(report_path);
            const auto dir = svg_dir.empty() ? fs::path(report_path).parent_path() : fs::path(svg_dir);
            kdrop::write_svgs(report, dir.empty() ? fs::path(".") : dir);
            return 0;
        }
    } catch (const kdrop::Error &e) {
        return fail(kdrop::to_string(e.kind()), e.exit_code(), e.what());
    } catch (const nlohmann::json::exception &e) {
        return fail("data", 3, e.what());
    } catch (const fs::filesystem_error &e) {
        return fail("data", 3, e.what());
    } catch (const std::exception &e) {
        return fail("internal", 1, e.what());
    }
    return 0;
}
