#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/matrix.hpp"

namespace pointlabel {

inline constexpr int kUnlabeled = -1;

struct Point {
    double x = 0, y = 0, z = 0;
    float ir = 0, r = 0, g = 0;
    int label = kUnlabeled;

    bool operator==(const Point&) const = default;
};

/// N points with optional IR-R-G attributes and optional class labels.
/// Either every point carries spectral values / a label, or none does.
struct PointCloud {
    std::vector<Point> points;
    bool has_spectral = false;
    bool has_label = false;

    std::size_t size() const noexcept { return points.size(); }
    bool empty() const noexcept { return points.empty(); }

    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(points.size());
        for (const auto& p : points) out.push_back(p.label);
        return out;
    }
};

/// Which input column feeds each point field. -1 leaves the field unset;
/// unmapped columns are read (they must be numeric) and discarded.
struct ColumnMap {
    int x = 0, y = 1, z = 2;
    int ir = -1, r = -1, g = -1;
    int label = -1;

    static ColumnMap for_schema(bool has_spectral, bool has_label) {
        ColumnMap m;
        if (has_spectral) {
            m.ir = 3;
            m.r = 4;
            m.g = 5;
        }
        if (has_label) m.label = has_spectral ? 6 : 3;
        return m;
    }

    bool has_spectral() const noexcept { return ir >= 0 && r >= 0 && g >= 0; }
    bool has_label() const noexcept { return label >= 0; }
    int max_index() const noexcept { return std::max({x, y, z, ir, r, g, label}); }
};

namespace detail {

inline bool is_blank_or_comment(std::string_view line) {
    for (char c : line) {
        if (c == '#') return true;
        if (c != ' ' && c != '\t' && c != '\r') return false;
    }
    return true;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r' || line[i] == ',')) ++i;
        if (i >= line.size() || line[i] == '#') break;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r' && line[j] != ',') ++j;
        out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::optional<double> to_double(std::string_view tok) {
    if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
    double v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) return std::nullopt;
    return v;
}

}  // namespace detail

/// Parse whitespace-delimited point records with an explicit column mapping.
/// Blank lines and `#` comments are skipped; every data line must have the
/// same number of columns as the first one.
inline PointCloud parse_points(std::istream& in, const ColumnMap& map) {
    PointCloud cloud;
    cloud.has_spectral = map.has_spectral();
    cloud.has_label = map.has_label();
    const std::size_t needed = static_cast<std::size_t>(map.max_index()) + 1;

    std::string line;
    std::size_t line_no = 0;
    std::size_t expected_cols = 0;
    std::vector<double> vals;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::is_blank_or_comment(line)) continue;
        const auto toks = detail::split_ws(line);
        if (toks.size() < needed)
            throw ParseError("expected at least " + std::to_string(needed) + " columns, found " +
                                 std::to_string(toks.size()),
                             line_no);
        if (expected_cols == 0) {
            expected_cols = toks.size();
        } else if (toks.size() != expected_cols) {
            throw SchemaError("line " + std::to_string(line_no) + ": inconsistent column count " +
                              std::to_string(toks.size()) + " (expected " + std::to_string(expected_cols) + ")");
        }
        vals.clear();
        for (auto tok : toks) {
            auto v = detail::to_double(tok);
            if (!v || !std::isfinite(*v)) throw ParseError("malformed number '" + std::string(tok) + "'", line_no);
            vals.push_back(*v);
        }
        Point p;
        p.x = vals[map.x];
        p.y = vals[map.y];
        p.z = vals[map.z];
        if (cloud.has_spectral) {
            p.ir = static_cast<float>(vals[map.ir]);
            p.r = static_cast<float>(vals[map.r]);
            p.g = static_cast<float>(vals[map.g]);
        }
        if (cloud.has_label) {
            const double l = vals[map.label];
            if (l < 0 || l != std::floor(l) || l > 1e6)
                throw ParseError("label must be a non-negative integer", line_no);
            p.label = static_cast<int>(l);
        }
        cloud.points.push_back(p);
    }
    return cloud;
}

/// Parse one of the fixed schemas `xyz`, `xyzL`, `xyzirg`, `xyzirgL`.
inline PointCloud parse_points(std::istream& in, bool has_spectral, bool has_label) {
    return parse_points(in, ColumnMap::for_schema(has_spectral, has_label));
}

/// Schema from the column count of the first data line (3, 4, 6 or 7).
inline ColumnMap detect_schema(std::istream& in) {
    const auto start = in.tellg();
    std::string line;
    std::size_t line_no = 0;
    std::size_t cols = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::is_blank_or_comment(line)) continue;
        cols = detail::split_ws(line).size();
        break;
    }
    in.clear();
    in.seekg(start);
    switch (cols) {
        case 0: return ColumnMap::for_schema(false, false);
        case 3: return ColumnMap::for_schema(false, false);
        case 4: return ColumnMap::for_schema(false, true);
        case 6: return ColumnMap::for_schema(true, false);
        case 7: return ColumnMap::for_schema(true, true);
        default:
            throw SchemaError("line " + std::to_string(line_no) + ": " + std::to_string(cols) +
                              " columns match none of xyz, xyzL, xyzirg, xyzirgL");
    }
}

/// Column map from a comma-separated role list, e.g. "x,y,z,_,_,_,L" or
/// "x,y,z,ir,r,g". Roles: x y z ir r g L, `_` to skip a column.
inline ColumnMap parse_column_roles(std::string_view spec) {
    ColumnMap m;
    m.x = m.y = m.z = -1;
    int col = 0;
    while (true) {
        const auto comma = spec.find(',');
        const auto role = spec.substr(0, comma);
        if (role == "x") m.x = col;
        else if (role == "y") m.y = col;
        else if (role == "z") m.z = col;
        else if (role == "ir") m.ir = col;
        else if (role == "r") m.r = col;
        else if (role == "g") m.g = col;
        else if (role == "L" || role == "label") m.label = col;
        else if (role != "_") throw ParseError("unknown column role '" + std::string(role) + "'");
        ++col;
        if (comma == std::string_view::npos) break;
        spec.remove_prefix(comma + 1);
    }
    if (m.x < 0 || m.y < 0 || m.z < 0) throw ParseError("column roles must include x, y and z");
    const int spectral = (m.ir >= 0) + (m.r >= 0) + (m.g >= 0);
    if (spectral != 0 && spectral != 3) throw ParseError("column roles must map all of ir, r, g or none");
    return m;
}

/// Write one point per line: x y z [ir r g] [L] [p_0 ... p_{C-1}].
/// `labels`, when given, replaces the cloud's own labels.
template <typename T = float>
void write_points(std::ostream& out, const PointCloud& cloud, std::optional<std::span<const int>> labels = std::nullopt,
                  const Matrix<T>* probs = nullptr) {
    const std::size_t n = cloud.size();
    if (labels && labels->size() != n)
        throw ShapeError("label count " + std::to_string(labels->size()) + " does not match point count " +
                         std::to_string(n));
    if (probs && probs->rows() != n)
        throw ShapeError("probability rows " + std::to_string(probs->rows()) + " do not match point count " +
                         std::to_string(n));
    const bool write_label = labels.has_value() || cloud.has_label;
    char buf[128];
    std::string line;
    for (std::size_t i = 0; i < n; ++i) {
        const Point& p = cloud.points[i];
        line.clear();
        std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f", p.x, p.y, p.z);
        line += buf;
        if (cloud.has_spectral) {
            std::snprintf(buf, sizeof buf, " %.6f %.6f %.6f", p.ir, p.r, p.g);
            line += buf;
        }
        if (write_label) {
            std::snprintf(buf, sizeof buf, " %d", labels ? (*labels)[i] : p.label);
            line += buf;
        }
        if (probs) {
            for (std::size_t c = 0; c < probs->cols(); ++c) {
                std::snprintf(buf, sizeof buf, " %.6f", static_cast<double>((*probs)(i, c)));
                line += buf;
            }
        }
        line += '\n';
        out << line;
    }
}

/// N rows x C columns of probabilities, nothing else.
template <typename T>
void write_probabilities(std::ostream& out, const Matrix<T>& probs) {
    char buf[32];
    std::string line;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        line.clear();
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            std::snprintf(buf, sizeof buf, c ? " %.6f" : "%.6f", static_cast<double>(probs(i, c)));
            line += buf;
        }
        line += '\n';
        out << line;
    }
}

}  // namespace pointlabel
