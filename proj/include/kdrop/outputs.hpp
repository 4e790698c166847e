#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "kdrop/data_io.hpp"
#include "kdrop/error.hpp"
#include "kdrop/experiment.hpp"
#include "kdrop/svg.hpp"

namespace kdrop {

inline nlohmann::json read_json_file(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception &e) {
        throw DataError("'" + path.string() + "': " + e.what());
    }
}

inline void write_svgs(const nlohmann::json &report, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    io::write_text_atomic(dir / "per_class_brier.svg", svg::per_class_brier_chart(report));
    io::write_text_atomic(dir / "probability_bins.svg", svg::probability_bins_chart(report));
    io::write_text_atomic(dir / "second_choice.svg", svg::second_choice_chart(report));
}

/// Writes report.json, the CSV tables, one training trace and one model per
/// split under `dir`. Returns the report.
inline nlohmann::json write_experiment_outputs(const ExperimentResult &res, const std::filesystem::path &dir,
                                               bool save_models = true) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir.string() + "'");

    const auto report = report_json(res);
    io::write_text_atomic(dir / "report.json", report.dump(2) + "\n");

    auto write_stream = [&](const std::string &name, auto &&fn) {
        std::ostringstream os;
        fn(os);
        io::write_text_atomic(dir / name, os.str());
    };
    write_stream("predictions.csv", [&](std::ostream &os) { write_predictions_csv(os, res.splits); });
    write_stream("per_class_brier.csv", [&](std::ostream &os) { write_per_class_csv(os, res); });
    write_stream("bins.csv", [&](std::ostream &os) { write_bins_csv(os, res); });
    for (const auto &s : res.splits) {
        const auto tag = "split" + std::to_string(s.index);
        if (s.trained) write_stream("trace_" + tag + ".csv", [&](std::ostream &os) { write_trace_csv(os, s.trace); });
        if (save_models) save_model(s.model, dir / ("model_" + tag + ".kdm"));
    }
    if (res.config.write_svg) write_svgs(report, dir);
    return report;
}

} // namespace kdrop
