#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/pointcloud.hpp"

namespace pointlabel {

/// Georeferenced grid. (origin_x, origin_y) is the world position of the
/// centre of the upper-left pixel; rows run southwards (y decreasing).
/// Values are stored band-major, each band row-major.
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t bands = 1;
    double origin_x = 0;
    double origin_y = 0;
    double cell_size = 1;
    std::optional<double> nodata;
    std::vector<double> data;

    double at(std::size_t band, std::size_t row, std::size_t col) const {
        return data[(band * height + row) * width + col];
    }
    double& at(std::size_t band, std::size_t row, std::size_t col) { return data[(band * height + row) * width + col]; }

    bool is_nodata(double v) const noexcept { return nodata && v == *nodata; }

    /// Fractional (column, row) pixel coordinates of a world position.
    std::pair<double, double> to_pixel(double x, double y) const noexcept {
        return {(x - origin_x) / cell_size, (origin_y - y) / cell_size};
    }

    void validate() const {
        if (!(cell_size > 0)) throw SchemaError("raster cell size must be positive");
        if (bands != 1 && bands != 3) throw SchemaError("raster must have 1 or 3 bands");
        if (data.size() != width * height * bands)
            throw SchemaError("raster data length " + std::to_string(data.size()) + " does not match " +
                              std::to_string(width) + "x" + std::to_string(height) + "x" + std::to_string(bands));
    }
};

enum class SampleMode { Bilinear, Nearest };
enum class OutOfBounds { Error, Clamp };

/// True when (x, y) lies within the pixel footprint of the raster.
inline bool inside_extent(const Raster& r, double x, double y) {
    const auto [fc, fr] = r.to_pixel(x, y);
    return fc >= -0.5 && fr >= -0.5 && fc <= static_cast<double>(r.width) - 0.5 &&
           fr <= static_cast<double>(r.height) - 0.5;
}

/// Per-band value at world position (x, y).
///
/// Bilinear mode blends the four surrounding pixel centres; coordinates are
/// clamped to the outermost pixel centres, so the half-cell border behaves
/// like edge extension. Nodata neighbours are dropped and the remaining
/// weights renormalised. Nearest mode breaks exact half-pixel ties towards
/// the lower index. With OutOfBounds::Clamp any position is accepted and
/// snapped to the edge.
inline std::vector<double> sample_raster(const Raster& r, double x, double y, SampleMode mode,
                                         OutOfBounds policy = OutOfBounds::Error) {
    if (r.width == 0 || r.height == 0) throw BoundsError("sampling an empty raster");
    if (policy == OutOfBounds::Error && !inside_extent(r, x, y))
        throw BoundsError("query (" + std::to_string(x) + ", " + std::to_string(y) + ") outside raster extent");
    auto [fc, fr] = r.to_pixel(x, y);
    fc = std::clamp(fc, 0.0, static_cast<double>(r.width - 1));
    fr = std::clamp(fr, 0.0, static_cast<double>(r.height - 1));

    std::vector<double> out(r.bands);
    if (mode == SampleMode::Nearest) {
        const auto c = static_cast<std::size_t>(std::ceil(fc - 0.5));
        const auto row = static_cast<std::size_t>(std::ceil(fr - 0.5));
        for (std::size_t b = 0; b < r.bands; ++b) {
            out[b] = r.at(b, row, c);
            if (r.is_nodata(out[b])) throw SamplingError("nearest pixel is nodata");
        }
        return out;
    }

    const auto c0 = static_cast<std::size_t>(std::floor(fc));
    const auto r0 = static_cast<std::size_t>(std::floor(fr));
    const std::size_t c1 = std::min(c0 + 1, r.width - 1);
    const std::size_t r1 = std::min(r0 + 1, r.height - 1);
    const double tx = fc - static_cast<double>(c0);
    const double ty = fr - static_cast<double>(r0);
    const std::size_t cs[4] = {c0, c1, c0, c1};
    const std::size_t rs[4] = {r0, r0, r1, r1};
    const double ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};

    for (std::size_t b = 0; b < r.bands; ++b) {
        double acc = 0, wsum = 0;
        std::size_t valid = 0;
        for (int k = 0; k < 4; ++k) {
            const double v = r.at(b, rs[k], cs[k]);
            if (r.is_nodata(v)) continue;
            ++valid;
            acc += ws[k] * v;
            wsum += ws[k];
        }
        if (valid == 0) throw SamplingError("all neighbouring pixels are nodata");
        if (wsum <= 0) throw SamplingError("query falls on a nodata pixel");
        out[b] = acc / wsum;
    }
    return out;
}

namespace detail {

// Whitespace token reader that skips `#` comments (PNM convention).
class TokenReader {
public:
    explicit TokenReader(std::istream& in) : in_(in) {}

    std::optional<std::string> next() {
        std::string tok;
        int ch;
        while ((ch = in_.get()) != EOF) {
            if (ch == '#') {
                while ((ch = in_.get()) != EOF && ch != '\n') {}
                if (!tok.empty()) return tok;
                continue;
            }
            if (std::isspace(ch)) {
                if (ch == '\n') ++line_;
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(ch));
        }
        if (!tok.empty()) return tok;
        return std::nullopt;
    }

    double number(const char* what) {
        auto tok = next();
        if (!tok) throw ParseError(std::string("unexpected end of input reading ") + what, line_ + 1);
        auto v = to_double(*tok);
        if (!v) throw ParseError(std::string("malformed ") + what + " '" + *tok + "'", line_ + 1);
        return *v;
    }

    std::size_t line() const noexcept { return line_ + 1; }

private:
    std::istream& in_;
    std::size_t line_ = 0;
};

inline std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace detail

/// ESRI ASCII grid. The lower-left-corner georeference is converted to the
/// upper-left pixel-centre convention of Raster. `xllcenter`/`yllcenter`
/// headers are accepted as well; NODATA_value is optional.
inline Raster parse_ascii_grid(std::istream& in) {
    detail::TokenReader tr(in);
    std::map<std::string, double> header;
    std::optional<std::string> pending;
    while (auto tok = tr.next()) {
        const std::string key = detail::lower(*tok);
        if (!std::isalpha(static_cast<unsigned char>(key[0]))) {
            pending = *tok;
            break;
        }
        header[key] = tr.number(key.c_str());
    }
    auto require = [&](const char* key) {
        auto it = header.find(key);
        if (it == header.end()) throw ParseError(std::string("missing ASCII grid header key '") + key + "'");
        return it->second;
    };
    Raster r;
    const double ncols = require("ncols"), nrows = require("nrows");
    if (ncols < 1 || nrows < 1 || ncols != std::floor(ncols) || nrows != std::floor(nrows))
        throw ParseError("ncols/nrows must be positive integers");
    r.width = static_cast<std::size_t>(ncols);
    r.height = static_cast<std::size_t>(nrows);
    r.cell_size = require("cellsize");
    if (!(r.cell_size > 0)) throw ParseError("cellsize must be positive");
    const double h = r.cell_size;
    if (header.count("xllcenter")) {
        r.origin_x = header["xllcenter"];
    } else {
        r.origin_x = require("xllcorner") + h / 2;
    }
    if (header.count("yllcenter")) {
        r.origin_y = header["yllcenter"] + (nrows - 1) * h;
    } else {
        r.origin_y = require("yllcorner") + nrows * h - h / 2;
    }
    if (header.count("nodata_value")) r.nodata = header["nodata_value"];

    const std::size_t expected = r.width * r.height;
    r.data.reserve(expected);
    auto push = [&](const std::string& tok) {
        auto v = detail::to_double(tok);
        if (!v) throw ParseError("malformed grid value '" + tok + "'", tr.line());
        r.data.push_back(*v);
    };
    if (pending) push(*pending);
    while (auto tok = tr.next()) push(*tok);
    if (r.data.size() != expected)
        throw SchemaError("ASCII grid declares " + std::to_string(r.width) + "x" + std::to_string(r.height) + " = " +
                          std::to_string(expected) + " values, found " + std::to_string(r.data.size()));
    return r;
}

inline void write_ascii_grid(std::ostream& out, const Raster& r) {
    if (r.bands != 1) throw SchemaError("ASCII grid holds a single band");
    r.validate();
    const double h = r.cell_size;
    char buf[64];
    out << "ncols " << r.width << "\nnrows " << r.height << "\n";
    std::snprintf(buf, sizeof buf, "xllcorner %.9f\n", r.origin_x - h / 2);
    out << buf;
    std::snprintf(buf, sizeof buf, "yllcorner %.9f\n", r.origin_y - static_cast<double>(r.height) * h + h / 2);
    out << buf;
    std::snprintf(buf, sizeof buf, "cellsize %.9f\n", h);
    out << buf;
    if (r.nodata) {
        std::snprintf(buf, sizeof buf, "NODATA_value %.9g\n", *r.nodata);
        out << buf;
    }
    for (std::size_t row = 0; row < r.height; ++row) {
        for (std::size_t c = 0; c < r.width; ++c) {
            std::snprintf(buf, sizeof buf, c ? " %.9g" : "%.9g", r.at(0, row, c));
            out << buf;
        }
        out << '\n';
    }
}

/// Plain-text PNM image: P3 (3 bands) or P2 (1 band). Samples are rescaled
/// to 0..255 when maxval differs. Georeference is left at the identity and
/// is normally filled from a world file.
inline Raster parse_pnm(std::istream& in) {
    detail::TokenReader tr(in);
    auto magic = tr.next();
    if (!magic || (*magic != "P3" && *magic != "P2")) throw ParseError("expected P3 or P2 image header", 1);
    Raster r;
    r.bands = *magic == "P3" ? 3 : 1;
    const double w = tr.number("width"), h = tr.number("height"), maxval = tr.number("maxval");
    if (w < 1 || h < 1 || maxval < 1) throw ParseError("invalid image dimensions or maxval");
    r.width = static_cast<std::size_t>(w);
    r.height = static_cast<std::size_t>(h);
    r.data.assign(r.width * r.height * r.bands, 0.0);
    const double scale = 255.0 / maxval;
    for (std::size_t row = 0; row < r.height; ++row)
        for (std::size_t c = 0; c < r.width; ++c)
            for (std::size_t b = 0; b < r.bands; ++b) {
                auto tok = tr.next();
                if (!tok) throw SchemaError("image holds fewer samples than declared");
                auto v = detail::to_double(*tok);
                if (!v) throw ParseError("malformed sample '" + *tok + "'", tr.line());
                r.at(b, row, c) = maxval == 255.0 ? *v : *v * scale;
            }
    if (tr.next()) throw SchemaError("image holds more samples than declared");
    return r;
}

inline void write_pnm(std::ostream& out, const Raster& r) {
    r.validate();
    out << (r.bands == 3 ? "P3\n" : "P2\n") << r.width << ' ' << r.height << "\n255\n";
    for (std::size_t row = 0; row < r.height; ++row) {
        for (std::size_t c = 0; c < r.width; ++c)
            for (std::size_t b = 0; b < r.bands; ++b) {
                const long v = std::lround(std::clamp(r.at(b, row, c), 0.0, 255.0));
                out << ((c || b) ? " " : "") << v;
            }
        out << '\n';
    }
}

/// Six-line ESRI world file: cell_x, 0, 0, -cell_y, origin_x, origin_y
/// (origin at the upper-left pixel centre). Pixels must be square and the
/// grid unrotated.
inline void apply_world_file(std::istream& in, Raster& r) {
    detail::TokenReader tr(in);
    double v[6];
    for (double& x : v) x = tr.number("world file entry");
    if (v[1] != 0 || v[2] != 0) throw SchemaError("rotated world files are not supported");
    if (!(v[0] > 0) || std::abs(v[0] + v[3]) > 1e-9 * v[0])
        throw SchemaError("world file must describe square, north-up pixels");
    r.cell_size = v[0];
    r.origin_x = v[4];
    r.origin_y = v[5];
}

inline void write_world_file(std::ostream& out, const Raster& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.9f\n0\n0\n%.9f\n%.9f\n%.9f\n", r.cell_size, -r.cell_size, r.origin_x, r.origin_y);
    out << buf;
}

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return in;
}

}  // namespace detail

/// Load `<name>.ppm`/`.pgm` plus its `<name>.wld` sidecar.
inline Raster read_image(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    Raster r = parse_pnm(in);
    auto world_path = path;
    world_path.replace_extension(".wld");
    auto wld = detail::open_input(world_path);
    apply_world_file(wld, r);
    r.validate();
    return r;
}

inline Raster read_ascii_grid(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    return parse_ascii_grid(in);
}

}  // namespace pointlabel
