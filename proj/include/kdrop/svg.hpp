#pragma once

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kdrop/error.hpp"

namespace kdrop::svg {

struct Bar {
    std::string label;
    std::vector<double> values; // stacked segments
};

inline std::string escape(const std::string &s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// Stacked vertical bar chart.
inline std::string bar_chart(const std::string &title, const std::vector<Bar> &bars,
                             const std::vector<std::string> &series, double y_max = 0.0) {
    static const char *colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52"};
    const double W = 640, H = 400, left = 60, right = 20, top = 40, bottom = 70;
    if (y_max <= 0.0)
        for (const auto &b : bars) {
            double s = 0.0;
            for (double v : b.values) s += v;
            y_max = std::max(y_max, s);
        }
    if (y_max <= 0.0) y_max = 1.0;
    const double plot_w = W - left - right, plot_h = H - top - bottom;
    const double slot = bars.empty() ? plot_w : plot_w / static_cast<double>(bars.size());

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
       << escape(title) << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << W - right << "\" y2=\"" << top + plot_h
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
       << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = y_max * t / 4.0;
        const double y = top + plot_h - plot_h * t / 4.0;
        os << "<text x=\"" << left - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           << "font-size=\"11\">" << num(v) << "</text>\n";
    }
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double x = left + slot * static_cast<double>(i) + slot * 0.15;
        double base = top + plot_h;
        for (std::size_t s = 0; s < bars[i].values.size(); ++s) {
            const double h = plot_h * bars[i].values[s] / y_max;
            base -= h;
            os << "<rect x=\"" << num(x) << "\" y=\"" << num(base) << "\" width=\"" << num(slot * 0.7)
               << "\" height=\"" << num(h) << "\" fill=\"" << colors[s % 4] << "\"/>\n";
        }
        os << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << top + plot_h + 16
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << escape(bars[i].label)
           << "</text>\n";
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const double y = H - 24;
        const double x = left + 140.0 * static_cast<double>(s);
        os << "<rect x=\"" << x << "\" y=\"" << y - 10 << "\" width=\"12\" height=\"12\" fill=\"" << colors[s % 4]
           << "\"/>\n";
        os << "<text x=\"" << x + 18 << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"12\">"
           << escape(series[s]) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

/// Mean per-class Brier scores of a report.
inline std::string per_class_brier_chart(const nlohmann::json &report) {
    const auto &classes = report.at("dataset").at("classes");
    const auto &pcb = report.at("mean").at("per_class_brier");
    std::vector<Bar> bars;
    for (std::size_t k = 0; k < pcb.size(); ++k) bars.push_back({classes.at(k).get<std::string>(), {pcb[k].get<double>()}});
    return bar_chart("Brier score per class", bars, {"brier"});
}

/// Correct/incorrect counts per max-probability bin, summed over splits.
inline std::string probability_bins_chart(const nlohmann::json &report) {
    std::vector<Bar> bars;
    for (const auto &s : report.at("splits")) {
        const auto &bins = s.at("metrics").at("bins");
        if (bars.empty())
            for (const auto &b : bins)
                bars.push_back({num(b.at("lower").get<double>()) + "-" + num(b.at("upper").get<double>()), {0.0, 0.0}});
        for (std::size_t j = 0; j < bins.size() && j < bars.size(); ++j) {
            bars[j].values[0] += bins[j].at("correct").get<double>();
            bars[j].values[1] += bins[j].at("incorrect").get<double>();
        }
    }
    return bar_chart("Predictions by max probability", bars, {"correct", "incorrect"});
}

/// Accuracy and second-choice accuracy per split.
inline std::string second_choice_chart(const nlohmann::json &report) {
    std::vector<Bar> bars;
    for (const auto &s : report.at("splits")) {
        const auto &m = s.at("metrics");
        const double sc = m.at("second_choice_accuracy").is_null() ? 0.0 : m["second_choice_accuracy"].get<double>();
        bars.push_back({"split " + std::to_string(s.at("index").get<std::size_t>()), {sc}});
    }
    return bar_chart("Second-choice accuracy among errors", bars, {"second choice correct"}, 1.0);
}

} // namespace kdrop::svg
