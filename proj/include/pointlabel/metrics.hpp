#pragma once

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/matrix.hpp"

namespace pointlabel {

/// Class names of the nine-class airborne benchmark, in label order.
inline const std::vector<std::string>& isprs_class_names() {
    static const std::vector<std::string> names{"Powerline", "Low veg",  "Imp. surf", "Car",  "Fence",
                                                "Roof",      "Facade",   "Shrub",     "Tree"};
    return names;
}

struct ClassScore {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::size_t truth_count = 0;
    std::size_t pred_count = 0;
    /// Neither in truth nor in prediction; scores are 0 by convention.
    bool absent = false;
};

struct EvalReport {
    Matrix<std::size_t> confusion;  ///< rows = truth, cols = predicted
    std::vector<ClassScore> classes;
    double overall_accuracy = 0;
    std::size_t total = 0;

    std::size_t class_count() const noexcept { return classes.size(); }

    double mean_f1() const {
        double s = 0;
        std::size_t n = 0;
        for (const auto& c : classes)
            if (!c.absent) {
                s += c.f1;
                ++n;
            }
        return n ? s / static_cast<double>(n) : 0.0;
    }

    /// Confusion row as fractions of the truth count (zeros for empty rows).
    std::vector<double> normalized_row(std::size_t r) const {
        std::vector<double> out(class_count(), 0.0);
        if (classes[r].truth_count == 0) return out;
        for (std::size_t c = 0; c < out.size(); ++c)
            out[c] = static_cast<double>(confusion(r, c)) / static_cast<double>(classes[r].truth_count);
        return out;
    }
};

inline EvalReport evaluate(std::span<const int> pred, std::span<const int> truth, std::size_t class_count) {
    if (pred.size() != truth.size())
        throw ShapeError("prediction has " + std::to_string(pred.size()) + " labels, truth has " +
                         std::to_string(truth.size()));
    if (pred.empty()) throw DomainError("cannot evaluate an empty labeling");
    if (class_count == 0) throw DomainError("class count must be positive");
    EvalReport rep;
    rep.confusion = Matrix<std::size_t>(class_count, class_count);
    rep.classes.assign(class_count, {});
    rep.total = pred.size();
    auto check = [&](int v, const char* what, std::size_t i) {
        if (v < 0 || static_cast<std::size_t>(v) >= class_count)
            throw DomainError(std::string(what) + " label " + std::to_string(v) + " at row " + std::to_string(i) +
                              " outside [0, " + std::to_string(class_count) + ")");
    };
    for (std::size_t i = 0; i < pred.size(); ++i) {
        check(truth[i], "truth", i);
        check(pred[i], "predicted", i);
        ++rep.confusion(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
    }
    std::size_t correct = 0;
    for (std::size_t k = 0; k < class_count; ++k) {
        auto& s = rep.classes[k];
        const std::size_t tp = rep.confusion(k, k);
        correct += tp;
        for (std::size_t j = 0; j < class_count; ++j) {
            s.truth_count += rep.confusion(k, j);
            s.pred_count += rep.confusion(j, k);
        }
        s.absent = s.truth_count == 0 && s.pred_count == 0;
        s.precision = s.pred_count ? static_cast<double>(tp) / static_cast<double>(s.pred_count) : 0.0;
        s.recall = s.truth_count ? static_cast<double>(tp) / static_cast<double>(s.truth_count) : 0.0;
        s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    }
    rep.overall_accuracy = static_cast<double>(correct) / static_cast<double>(rep.total);
    return rep;
}

/// Class count taken as one past the largest label seen (at least 1).
inline EvalReport evaluate(std::span<const int> pred, std::span<const int> truth) {
    int top = 0;
    for (int v : pred) top = std::max(top, v);
    for (int v : truth) top = std::max(top, v);
    return evaluate(pred, truth, static_cast<std::size_t>(top) + 1);
}

namespace detail {

inline std::vector<std::string> report_names(std::size_t n) {
    if (n == isprs_class_names().size()) return isprs_class_names();
    std::vector<std::string> out;
    for (std::size_t k = 0; k < n; ++k) out.push_back("class " + std::to_string(k));
    return out;
}

inline std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
}

}  // namespace detail

/// Aligned text table: row-normalized confusion percentages (truth rows),
/// then the Precision/Correctness, Recall/Completeness and F1 Score rows.
/// Absent classes are marked with '*'.
inline void write_report_text(std::ostream& out, const EvalReport& rep) {
    const auto names = detail::report_names(rep.class_count());
    const std::size_t label_w = 22, col_w = 11;
    auto head = [&](const std::string& s) {
        std::string t = s;
        t.resize(label_w, ' ');
        out << t;
    };
    head("");
    for (std::size_t k = 0; k < names.size(); ++k)
        out << detail::pad(names[k] + (rep.classes[k].absent ? "*" : ""), col_w);
    out << '\n';
    for (std::size_t r = 0; r < names.size(); ++r) {
        head(names[r]);
        for (double v : rep.normalized_row(r)) out << detail::pad(detail::fixed(100 * v, 1), col_w);
        out << '\n';
    }
    auto metric_row = [&](const std::string& label, double ClassScore::*field) {
        head(label);
        for (const auto& c : rep.classes) out << detail::pad(detail::fixed(100 * (c.*field), 1), col_w);
        out << '\n';
    };
    metric_row("Precision/Correctness", &ClassScore::precision);
    metric_row("Recall/Completeness", &ClassScore::recall);
    metric_row("F1 Score", &ClassScore::f1);
    out << "Overall Accuracy " << detail::fixed(100 * rep.overall_accuracy, 2) << "%  (" << rep.total
        << " points)\nMean F1 " << detail::fixed(100 * rep.mean_f1(), 2) << '\n';
    bool any_absent = false;
    for (const auto& c : rep.classes) any_absent |= c.absent;
    if (any_absent) out << "* class absent from truth and prediction; scores set to 0\n";
}

/// Machine-readable form: per-class scores, the raw confusion counts and OA.
inline void write_report_csv(std::ostream& out, const EvalReport& rep) {
    const auto names = detail::report_names(rep.class_count());
    out << "class,name,precision,recall,f1,truth_count,pred_count,absent\n";
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto& c = rep.classes[k];
        out << k << ',' << names[k] << ',' << detail::fixed(c.precision, 6) << ',' << detail::fixed(c.recall, 6) << ','
            << detail::fixed(c.f1, 6) << ',' << c.truth_count << ',' << c.pred_count << ',' << (c.absent ? 1 : 0)
            << '\n';
    }
    out << "\nconfusion";
    for (std::size_t k = 0; k < names.size(); ++k) out << ",pred_" << k;
    out << '\n';
    for (std::size_t r = 0; r < names.size(); ++r) {
        out << "truth_" << r;
        for (std::size_t c = 0; c < names.size(); ++c) out << ',' << rep.confusion(r, c);
        out << '\n';
    }
    out << "\noverall_accuracy," << detail::fixed(rep.overall_accuracy, 6) << "\nmean_f1,"
        << detail::fixed(rep.mean_f1(), 6) << "\ntotal," << rep.total << '\n';
}

}  // namespace pointlabel
