#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "kdrop/experiment.hpp"
#include "kdrop/outputs.hpp"
#include "support.hpp"

using namespace kdrop;
using nlohmann::json;

namespace {

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.train.epochs = 15;
    c.train.early_stop_patience = 5;
    c.train.mc_passes_eval = 10;
    c.mc_passes = 20;
    c.split = SplitPlan::cross_val(3, 4);
    return c;
}

json fake_report(double brier, std::uint64_t seed = 0) {
    const Split s{{0, 1}, {2, 3}};
    return {{"dataset", {{"name", "mt"}}},
            {"protocol", {{"description", "5-fold-cv,stratified,seed=0"}, {"split", {{"seed", seed}}}}},
            {"splits", json::array({{{"split_digest", split_digest(s)}}})},
            {"mean",
             {{"f1_macro", 0.8}, {"accuracy", 0.8}, {"brier", brier}, {"brier_multiclass", 2 * brier},
              {"rmse", 0.2}, {"second_choice_accuracy", nullptr}}}};
}

} // namespace

TEST(Compare, BrierDeltaAndSign) {
    const auto t = compare_runs(fake_report(0.096), fake_report(0.110));
    const auto &b = t.at("brier");
    EXPECT_NEAR(b.delta, -0.014, 1e-12);
    EXPECT_TRUE(b.improved);
    EXPECT_FALSE(t.at("f1_macro").improved);
    EXPECT_THROW(t.at("second_choice_accuracy"), ConfigError);
}

TEST(Compare, IdenticalReportsGiveZeroDeltas) {
    const auto r = fake_report(0.1);
    for (const auto &row : compare_runs(r, r).rows) {
        EXPECT_EQ(row.delta, 0.0) << row.metric;
        EXPECT_FALSE(row.improved);
    }
}

TEST(Compare, MismatchedSeedsRejected) {
    EXPECT_THROW(compare_runs(fake_report(0.1, 0), fake_report(0.1, 1)), ConfigError);
    auto other = fake_report(0.1);
    other["splits"][0]["split_digest"] = 12345;
    EXPECT_THROW(compare_runs(fake_report(0.1), other), ConfigError);
}

TEST(Compare, DeltaCsv) {
    const auto t = compare_runs(fake_report(0.096), fake_report(0.110));
    std::ostringstream os;
    write_delta_csv(os, t);
    EXPECT_EQ(os.str().rfind("metric,proposed,baseline,delta,improved\n", 0), 0u);
}

TEST(Experiment, FiveFoldReportStructure) {
    const auto data = fixtures::gaussian_clusters(100, 4, 2, 3.0, 1);
    auto cfg = small_config();
    cfg.split = SplitPlan::cross_val(5, 2);
    const auto res = run_experiment(cfg, data);
    const auto rep = report_json(res);
    ASSERT_EQ(rep["splits"].size(), 5u);
    double f1 = 0.0;
    for (const auto &s : rep["splits"]) {
        EXPECT_EQ(s["test_size"], 20);
        EXPECT_TRUE(s["trained"].get<bool>());
        f1 += s["metrics"]["f1_macro"].get<double>() / 5.0;
    }
    EXPECT_NEAR(rep["mean"]["f1_macro"].get<double>(), f1, 1e-12);
    EXPECT_EQ(rep["mode"], "proposed");
}

TEST(Experiment, ZeroShotIsNearChance) {
    // labels carry no signal: one cluster for both classes
    const auto data = fixtures::gaussian_clusters(200, 8, 2, 0.0, 2);
    auto cfg = small_config();
    cfg.split = SplitPlan::zero_shot(3);
    const auto res = run_experiment(cfg, data);
    ASSERT_EQ(res.splits.size(), 1u);
    EXPECT_FALSE(res.splits[0].trained);
    EXPECT_EQ(res.splits[0].predictions.size(), 200u);
    EXPECT_NEAR(res.splits[0].report.accuracy, 0.5, 0.15);
    EXPECT_TRUE(report_json(res)["protocol"].contains("note"));
}

TEST(Experiment, ZeroShotLeavesWeightsUntouched) {
    const auto data = fixtures::gaussian_clusters(40, 4, 2, 3.0, 3);
    auto cfg = small_config();
    cfg.split = SplitPlan::zero_shot();
    const auto res = run_experiment(cfg, data);
    HeadOptions hopt;
    hopt.seed = Stream::keyed(cfg.train.seed, 0x48454144ULL, 0).key();
    const auto fresh = make_head(cfg.kernel, 4, 2, hopt);
    EXPECT_EQ(res.splits[0].model.head.layers, fresh.layers);
}

TEST(Experiment, BaselineSharesSplitIndices) {
    const auto data = fixtures::gaussian_clusters(60, 4, 3, 2.0, 4);
    auto cfg = small_config();
    const auto proposed = report_json(run_experiment(cfg, data));
    cfg.baseline_mode = true;
    const auto baseline_res = run_experiment(cfg, data);
    const auto baseline = report_json(baseline_res);
    ASSERT_EQ(proposed["splits"].size(), baseline["splits"].size());
    for (std::size_t i = 0; i < proposed["splits"].size(); ++i) {
        EXPECT_EQ(proposed["splits"][i]["train_indices"], baseline["splits"][i]["train_indices"]);
        EXPECT_EQ(proposed["splits"][i]["test_indices"], baseline["splits"][i]["test_indices"]);
    }
    EXPECT_EQ(baseline["mode"], "baseline");
    const auto &head = baseline_res.splits[0].model.head;
    EXPECT_EQ(head.kernel.config().kind, KernelKind::Linear);
    EXPECT_EQ(head.layers[0].fixed_keep_prob, 0.9);
    EXPECT_EQ(head.layers[0].beta_state.keep_count, 0u);
    EXPECT_NO_THROW(compare_runs(proposed, baseline));
}

TEST(Experiment, ReportIdenticalAcrossThreadCounts) {
    const auto data = fixtures::gaussian_clusters(90, 4, 3, 2.0, 5);
    auto cfg = small_config();
    cfg.threads = 1;
    const auto one = without_timestamp(report_json(run_experiment(cfg, data))).dump();
    cfg.threads = 4;
    const auto four = without_timestamp(report_json(run_experiment(cfg, data))).dump();
    EXPECT_EQ(one, four);
}

TEST(Experiment, WrappedFewShotProtocol) {
    const auto data = fixtures::gaussian_clusters(100, 4, 2, 3.0, 6);
    auto cfg = small_config();
    cfg.split = SplitPlan::k_shot(5, 1);
    cfg.wrap_cv_folds = 5;
    const auto res = run_experiment(cfg, data);
    ASSERT_EQ(res.splits.size(), 5u);
    for (const auto &s : res.splits) EXPECT_EQ(s.split.train.size(), 10u);
    EXPECT_EQ(res.protocol, "5-shot,stratified,seed=1 within 5-fold-cv");
}

TEST(Experiment, InvalidPlansAndConfigsRejected) {
    auto data = fixtures::gaussian_clusters(30, 2, 2, 1.0, 7);
    auto cfg = small_config();
    cfg.split = SplitPlan::k_shot(20);
    EXPECT_THROW(run_experiment(cfg, data), DataError);

    cfg = small_config();
    cfg.train.l2 = -1.0;
    EXPECT_THROW(run_experiment(cfg, data), ConfigError);
}

TEST(Experiment, SplitIndexInMessage) {
    auto data = fixtures::gaussian_clusters(30, 2, 2, 1.0, 8);
    auto cfg = small_config();
    cfg.train.learning_rate = 1e300;
    try {
        run_experiment(cfg, data);
        FAIL() << "expected failure";
    } catch (const Error &e) {
        EXPECT_EQ(std::string(e.what()).rfind("split ", 0), 0u) << e.what();
    }
}

TEST(Experiment, ConfigJsonRoundTrip) {
    auto cfg = small_config();
    cfg.head_layers = {16};
    cfg.kernel.kind = KernelKind::LaplacianRff;
    cfg.bin_edges = {0.5, 0.75, 1.0};
    cfg.baseline_mode = true;
    const auto j = to_json(cfg);
    const auto back = experiment_config_from_json(j);
    EXPECT_EQ(to_json(back), j);
    const auto partial = experiment_config_from_json(json{{"train", {{"epochs", 7}}}}, cfg);
    EXPECT_EQ(partial.train.epochs, 7u);
    EXPECT_EQ(partial.train.early_stop_patience, 5u);
    EXPECT_THROW(experiment_config_from_json(json{{"mc_passes", "many"}}), ConfigError);
    EXPECT_THROW(experiment_config_from_json(json{{"split", {{"mode", "bootstrap"}}}}), ConfigError);
}

TEST(Experiment, ValidateRejectsBadConfig) {
    auto cfg = small_config();
    cfg.beta_alpha = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.mc_passes = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.baseline_keep_prob = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Threads, EnvironmentVariable) {
    EXPECT_EQ(resolve_threads(3), 3u);
    setenv("KDROP_THREADS", "5", 1);
    EXPECT_EQ(resolve_threads(0), 5u);
    setenv("KDROP_THREADS", "zero", 1);
    EXPECT_THROW(resolve_threads(0), ConfigError);
    unsetenv("KDROP_THREADS");
    EXPECT_GE(resolve_threads(0), 1u);
}

TEST(ParallelFor, CoversRangeAndPropagatesErrors) {
    std::vector<int> hits(100, 0);
    parallel_for(100, 8, [&](std::size_t i) { ++hits[i]; });
    for (int h : hits) EXPECT_EQ(h, 1);
    EXPECT_THROW(parallel_for(10, 4, [](std::size_t i) { if (i == 7) throw DataError("boom"); }), DataError);
}

TEST(Outputs, FilesWrittenAndReadable) {
    fixtures::ScratchDir dir("outputs");
    const auto data = fixtures::gaussian_clusters(60, 4, 2, 3.0, 9);
    auto cfg = small_config();
    cfg.write_svg = true;
    const auto res = run_experiment(cfg, data);
    const auto report = write_experiment_outputs(res, dir.path());
    for (const char *f : {"report.json", "predictions.csv", "per_class_brier.csv", "bins.csv", "trace_split0.csv",
                          "model_split2.kdm", "per_class_brier.svg", "probability_bins.svg", "second_choice.svg"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    EXPECT_EQ(read_json_file(dir / "report.json"), report);

    std::ifstream in(dir / "predictions.csv");
    const auto preds = read_predictions_csv(in);
    ASSERT_EQ(preds.size(), 60u);
    EXPECT_EQ(preds[0].instance_id, res.splits[0].predictions[0].instance_id);
    EXPECT_NEAR(preds[0].mean_probs[1], res.splits[0].predictions[0].mean_probs[1], 1e-15);

    const auto model = load_model(dir / "model_split1.kdm");
    const auto eval = evaluate_model(model, data, cfg);
    EXPECT_EQ(eval.splits.size(), 1u);
    EXPECT_EQ(eval.splits[0].predictions.size(), 60u);
}

TEST(Outputs, SvgIsWellFormed) {
    const auto data = fixtures::gaussian_clusters(60, 4, 3, 2.0, 10);
    const auto report = report_json(run_experiment(small_config(), data));
    for (const auto &svg : {svg::per_class_brier_chart(report), svg::probability_bins_chart(report),
                            svg::second_choice_chart(report)}) {
        EXPECT_EQ(svg.rfind("<svg", 0), 0u);
        EXPECT_NE(svg.find("</svg>"), std::string::npos);
    }
}

TEST(Eval, DimensionMismatchRejected) {
    const auto data = fixtures::gaussian_clusters(30, 4, 2, 3.0, 11);
    ModelArtifact m;
    m.head = make_head(KernelConfig{}, 5, 2, HeadOptions{});
    EXPECT_THROW(evaluate_model(m, data, small_config()), DataError);
}
