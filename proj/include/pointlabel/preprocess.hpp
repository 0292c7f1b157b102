#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/matrix.hpp"
#include "pointlabel/pointcloud.hpp"
#include "pointlabel/raster.hpp"
#include "pointlabel/rng.hpp"

namespace pointlabel {

/// Width of the per-point feature row: centred XYZ, IR-R-G, scene-normalised xyz.
inline constexpr std::size_t kFeatureWidth = 9;
/// Footprints with fewer points than this are ignored.
inline constexpr std::size_t kMinBlockPoints = 10;

inline constexpr double kJitterSigmaXY = 0.08;
inline constexpr double kJitterSigmaZ = 0.04;
inline constexpr double kJitterClipXY = 0.30;
inline constexpr double kJitterClipZ = 0.15;

struct SceneExtent {
    double min_x = 0, min_y = 0, min_z = 0;
    double max_x = 0, max_y = 0, max_z = 0;
};

inline SceneExtent compute_extent(const PointCloud& cloud) {
    if (cloud.empty()) throw DomainError("extent of an empty cloud");
    SceneExtent e{cloud.points[0].x, cloud.points[0].y, cloud.points[0].z,
                  cloud.points[0].x, cloud.points[0].y, cloud.points[0].z};
    for (const auto& p : cloud.points) {
        e.min_x = std::min(e.min_x, p.x);
        e.min_y = std::min(e.min_y, p.y);
        e.min_z = std::min(e.min_z, p.z);
        e.max_x = std::max(e.max_x, p.x);
        e.max_y = std::max(e.max_y, p.y);
        e.max_z = std::max(e.max_z, p.z);
    }
    return e;
}

/// Block size, overlap (metres) and rows sampled per block at one scale.
struct ScaleConfig {
    double size = 10;
    double overlap = 2;
    std::size_t sample_count = 4096;

    bool operator==(const ScaleConfig&) const = default;
};

inline std::vector<ScaleConfig> default_scales() { return {{2, 1, 1024}, {5, 2, 3072}, {10, 2, 4096}}; }

/// "size:overlap:samples" entries separated by commas.
inline std::vector<ScaleConfig> parse_scales(std::string_view spec) {
    std::vector<ScaleConfig> out;
    while (!spec.empty()) {
        const auto comma = spec.find(',');
        const auto item = spec.substr(0, comma);
        const auto c1 = item.find(':');
        const auto c2 = c1 == std::string_view::npos ? c1 : item.find(':', c1 + 1);
        if (c2 == std::string_view::npos) throw ParseError("scale '" + std::string(item) + "' is not size:overlap:samples");
        auto size = detail::to_double(item.substr(0, c1));
        auto overlap = detail::to_double(item.substr(c1 + 1, c2 - c1 - 1));
        auto samples = detail::to_double(item.substr(c2 + 1));
        if (!size || !overlap || !samples || *samples < 1 || *samples != std::floor(*samples))
            throw ParseError("scale '" + std::string(item) + "' is not size:overlap:samples");
        if (!(*overlap >= 0 && *overlap < *size))
            throw DomainError("scale '" + std::string(item) + "' needs 0 <= overlap < size");
        out.push_back({*size, *overlap, static_cast<std::size_t>(*samples)});
        if (comma == std::string_view::npos) break;
        spec.remove_prefix(comma + 1);
    }
    if (out.empty()) throw ParseError("no scales given");
    return out;
}

inline std::string format_scales(std::span<const ScaleConfig> scales) {
    std::string out;
    char buf[96];
    for (const auto& s : scales) {
        std::snprintf(buf, sizeof buf, "%s%g:%g:%zu", out.empty() ? "" : ",", s.size, s.overlap, s.sample_count);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attribution and terrain normalisation

/// Assigns bilinearly interpolated IR-R-G values to every point, overwriting
/// any existing ones. Points outside the image footprint take the edge
/// value; their indices are reported through `clamped` when given.
inline PointCloud attribute_spectral(const PointCloud& cloud, const Raster& image,
                                     std::vector<std::size_t>* clamped = nullptr) {
    if (image.bands != 3) throw SchemaError("spectral attribution needs a 3-band image");
    PointCloud out = cloud;
    out.has_spectral = true;
    for (std::size_t i = 0; i < out.size(); ++i) {
        Point& p = out.points[i];
        if (clamped && !inside_extent(image, p.x, p.y)) clamped->push_back(i);
        std::vector<double> v;
        try {
            v = sample_raster(image, p.x, p.y, SampleMode::Bilinear, OutOfBounds::Clamp);
        } catch (const SamplingError& e) {
            throw SamplingError("point " + std::to_string(i) + ": " + e.what());
        }
        p.ir = static_cast<float>(v[0]);
        p.r = static_cast<float>(v[1]);
        p.g = static_cast<float>(v[2]);
    }
    return out;
}

/// z' = z - DTM(x, y), kept signed. Points over nodata or outside the DTM are
/// dropped; their count is added to `dropped` when given.
inline PointCloud normalize_height(const PointCloud& cloud, const Raster& dtm, std::size_t* dropped = nullptr) {
    if (dtm.bands != 1) throw SchemaError("DTM must be a single-band raster");
    PointCloud out;
    out.has_spectral = cloud.has_spectral;
    out.has_label = cloud.has_label;
    out.points.reserve(cloud.size());
    std::size_t lost = 0;
    for (const auto& p : cloud.points) {
        try {
            const double ground = sample_raster(dtm, p.x, p.y, SampleMode::Bilinear)[0];
            Point q = p;
            q.z = p.z - ground;
            out.points.push_back(q);
        } catch (const SamplingError&) {
            ++lost;
        } catch (const BoundsError&) {
            ++lost;
        }
    }
    if (dropped) *dropped += lost;
    return out;
}

// ---------------------------------------------------------------------------
// Tiling

/// Block origins along one axis: min + i*stride for every i with
/// i*stride <= max - min, so the block starting in each stride cell exists.
inline std::vector<double> tile_origins(double min, double max, double size, double overlap) {
    if (!(overlap >= 0 && overlap < size)) throw DomainError("tiling needs 0 <= overlap < size");
    const double stride = size - overlap;
    const auto count = static_cast<std::size_t>(std::floor((max - min) / stride)) + 1;
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = min + static_cast<double>(i) * stride;
    return out;
}

/// Square footprint [origin, origin + size) in x and y with the indices of
/// the cloud points inside it.
struct Footprint {
    double origin_x = 0;
    double origin_y = 0;
    double size = 0;
    std::size_t scale_id = 0;
    std::vector<std::size_t> members;
};

inline bool footprint_contains(double origin, double size, double v) { return v >= origin && v < origin + size; }

namespace detail {

inline auto point_key(const Point& p) { return std::tie(p.x, p.y, p.z, p.ir, p.r, p.g, p.label); }

// Range of grid indices whose [o, o + size) interval may contain v.
inline std::pair<std::size_t, std::size_t> candidate_range(double v, double min, double stride, double size,
                                                           std::size_t count) {
    const double rel = v - min;
    const double hi = std::floor(rel / stride) + 1;
    const double lo = std::floor((rel - size) / stride) - 1;
    const auto clamp = [&](double i) { return static_cast<std::size_t>(std::clamp(i, 0.0, double(count))); };
    return {clamp(lo), clamp(hi + 1)};
}

}  // namespace detail

/// Every footprint of the grid with at least `min_points` members. Members
/// are listed in a canonical order (sorted by point attributes) so that the
/// result does not depend on the input order of the cloud.
inline std::vector<Footprint> tile_blocks(const PointCloud& cloud, double size, double overlap,
                                          std::size_t scale_id = 0, std::size_t min_points = kMinBlockPoints) {
    if (!(overlap >= 0 && overlap < size)) throw DomainError("tiling needs 0 <= overlap < size");
    if (cloud.empty()) return {};
    const SceneExtent e = compute_extent(cloud);
    const auto xs = tile_origins(e.min_x, e.max_x, size, overlap);
    const auto ys = tile_origins(e.min_y, e.max_y, size, overlap);
    const double stride = size - overlap;

    std::vector<std::vector<std::size_t>> cells(xs.size() * ys.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        const auto [x0, x1] = detail::candidate_range(p.x, e.min_x, stride, size, xs.size());
        const auto [y0, y1] = detail::candidate_range(p.y, e.min_y, stride, size, ys.size());
        for (std::size_t gy = y0; gy < y1; ++gy) {
            if (!footprint_contains(ys[gy], size, p.y)) continue;
            for (std::size_t gx = x0; gx < x1; ++gx)
                if (footprint_contains(xs[gx], size, p.x)) cells[gy * xs.size() + gx].push_back(i);
        }
    }

    std::vector<Footprint> out;
    for (std::size_t gy = 0; gy < ys.size(); ++gy)
        for (std::size_t gx = 0; gx < xs.size(); ++gx) {
            auto& members = cells[gy * xs.size() + gx];
            if (members.size() < min_points) continue;
            std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
                return detail::point_key(cloud.points[a]) < detail::point_key(cloud.points[b]);
            });
            out.push_back({xs[gx], ys[gy], size, scale_id, std::move(members)});
        }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct Pivot {
    double x = 0;
    double y = 0;
};

inline Pivot xy_centroid(const PointCloud& cloud) {
    if (cloud.empty()) return {};
    double sx = 0, sy = 0;
    for (const auto& p : cloud.points) {
        sx += p.x;
        sy += p.y;
    }
    const auto n = static_cast<double>(cloud.size());
    return {sx / n, sy / n};
}

inline PointCloud augment_rotate_z(const PointCloud& cloud, double angle, Pivot pivot) {
    PointCloud out = cloud;
    const double c = std::cos(angle), s = std::sin(angle);
    for (auto& p : out.points) {
        const double dx = p.x - pivot.x, dy = p.y - pivot.y;
        p.x = pivot.x + c * dx - s * dy;
        p.y = pivot.y + s * dx + c * dy;
    }
    return out;
}

/// Clipped Gaussian offset (dx, dy, dz). `noise(sigma)` returns a raw draw.
template <typename Noise>
std::array<double, 3> jitter_offset(Noise&& noise) {
    const double dx = noise(kJitterSigmaXY);
    const double dy = noise(kJitterSigmaXY);
    const double dz = noise(kJitterSigmaZ);
    return {std::clamp(dx, -kJitterClipXY, kJitterClipXY), std::clamp(dy, -kJitterClipXY, kJitterClipXY),
            std::clamp(dz, -kJitterClipZ, kJitterClipZ)};
}

/// Zero-mean normal noise source backed by an engine.
template <typename Engine>
auto normal_noise(Engine& rng) {
    return [&rng](double sigma) { return std::normal_distribution<double>(0.0, sigma)(rng); };
}

/// Adds independent clipped noise to every coordinate. Overloaded for a
/// random engine or for any callable `double(double sigma)`.
template <typename Noise>
    requires std::invocable<Noise&, double>
PointCloud augment_jitter(const PointCloud& cloud, Noise&& noise) {
    PointCloud out = cloud;
    for (auto& p : out.points) {
        const auto d = jitter_offset(noise);
        p.x += d[0];
        p.y += d[1];
        p.z += d[2];
    }
    return out;
}

inline PointCloud augment_jitter(const PointCloud& cloud, Rng& rng) { return augment_jitter(cloud, normal_noise(rng)); }

/// One augmented replica: random rotation about the scene centroid, then jitter.
inline PointCloud augment_scene(const PointCloud& cloud, Rng& rng) {
    const double angle = std::uniform_real_distribution<double>(0.0, 2 * std::numbers::pi)(rng);
    return augment_jitter(augment_rotate_z(cloud, angle, xy_centroid(cloud)), rng);
}

// ---------------------------------------------------------------------------
// Sampling and features

/// S sampled rows: the source point of each row and the offset added to its
/// coordinates (non-zero only for jittered repeats).
struct SampledRows {
    std::vector<std::size_t> parent_idx;
    std::vector<std::array<double, 3>> offsets;
};

/// Draws exactly `count` rows from a footprint. With enough points this is
/// a uniform sample without replacement; otherwise every point appears once
/// and the remainder are repeats drawn with replacement, jittered when
/// `training` is set.
inline SampledRows sample_block(std::span<const std::size_t> members, std::size_t count, bool training, Rng& rng) {
    if (members.size() < kMinBlockPoints)
        throw DomainError("sample_block needs at least " + std::to_string(kMinBlockPoints) + " points, got " +
                          std::to_string(members.size()));
    SampledRows rows;
    std::vector<std::size_t> pool(members.begin(), members.end());
    if (pool.size() >= count) {
        for (std::size_t i = 0; i < count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        pool.resize(count);
        rows.parent_idx = std::move(pool);
        rows.offsets.assign(count, {0.0, 0.0, 0.0});
        return rows;
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    rows.parent_idx = pool;
    rows.offsets.assign(pool.size(), {0.0, 0.0, 0.0});
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    auto noise = normal_noise(rng);
    while (rows.parent_idx.size() < count) {
        rows.parent_idx.push_back(pool[pick(rng)]);
        rows.offsets.push_back(training ? jitter_offset(noise) : std::array<double, 3>{0.0, 0.0, 0.0});
    }
    return rows;
}

/// S x 9 rows: coordinates centred on the sampled rows' centroid, IR-R-G
/// scaled to [0, 1], and coordinates normalised to the scene extent
/// (clamped to [0, 1]; a degenerate axis maps to 0.5).
template <typename T = float>
Matrix<T> assemble_features(const PointCloud& cloud, const SampledRows& rows, const SceneExtent& extent) {
    const double span_x = extent.max_x - extent.min_x;
    const double span_y = extent.max_y - extent.min_y;
    const double span_z = extent.max_z - extent.min_z;
    if (!(span_x > 0) && !(span_y > 0) && !(span_z > 0)) throw DomainError("scene extent is degenerate on all axes");
    const std::size_t n = rows.parent_idx.size();
    if (rows.offsets.size() != n) throw ShapeError("sampled rows and offsets differ in length");

    std::vector<std::array<double, 3>> xyz(n);
    double cx = 0, cy = 0, cz = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Point& p = cloud.points.at(rows.parent_idx[i]);
        xyz[i] = {p.x + rows.offsets[i][0], p.y + rows.offsets[i][1], p.z + rows.offsets[i][2]};
        cx += xyz[i][0];
        cy += xyz[i][1];
        cz += xyz[i][2];
    }
    if (n > 0) {
        cx /= static_cast<double>(n);
        cy /= static_cast<double>(n);
        cz /= static_cast<double>(n);
    }
    auto norm = [](double v, double lo, double span) {
        return span > 0 ? std::clamp((v - lo) / span, 0.0, 1.0) : 0.5;
    };

    Matrix<T> f(n, kFeatureWidth);
    for (std::size_t i = 0; i < n; ++i) {
        const Point& p = cloud.points[rows.parent_idx[i]];
        auto row = f.row(i);
        row[0] = static_cast<T>(xyz[i][0] - cx);
        row[1] = static_cast<T>(xyz[i][1] - cy);
        row[2] = static_cast<T>(xyz[i][2] - cz);
        row[3] = static_cast<T>(p.ir / 255.0);
        row[4] = static_cast<T>(p.r / 255.0);
        row[5] = static_cast<T>(p.g / 255.0);
        row[6] = static_cast<T>(norm(xyz[i][0], extent.min_x, span_x));
        row[7] = static_cast<T>(norm(xyz[i][1], extent.min_y, span_y));
        row[8] = static_cast<T>(norm(xyz[i][2], extent.min_z, span_z));
    }
    return f;
}

/// A sampled footprint ready for the network.
struct Block {
    double origin_x = 0;
    double origin_y = 0;
    double size = 0;
    std::size_t scale_id = 0;
    Matrix<float> features;
    std::vector<std::size_t> parent_idx;
    std::vector<int> labels;  ///< empty for unlabeled clouds
    std::size_t member_count = 0;
};

inline Block make_block(const PointCloud& cloud, const Footprint& fp, std::size_t count, bool training, Rng& rng,
                        const SceneExtent& extent) {
    const SampledRows rows = sample_block(fp.members, count, training, rng);
    Block b;
    b.origin_x = fp.origin_x;
    b.origin_y = fp.origin_y;
    b.size = fp.size;
    b.scale_id = fp.scale_id;
    b.features = assemble_features(cloud, rows, extent);
    b.parent_idx = rows.parent_idx;
    b.member_count = fp.members.size();
    if (cloud.has_label) {
        b.labels.reserve(rows.parent_idx.size());
        for (auto i : rows.parent_idx) b.labels.push_back(cloud.points[i].label);
    }
    return b;
}

/// Tile one scale and sample every footprint. Block k of scale s draws from
/// derive_rng(seed, s, k).
inline std::vector<Block> generate_blocks(const PointCloud& cloud, const ScaleConfig& scale, std::size_t scale_id,
                                          std::uint64_t seed, bool training) {
    std::vector<Block> out;
    if (cloud.empty()) return out;
    const SceneExtent extent = compute_extent(cloud);
    const auto footprints = tile_blocks(cloud, scale.size, scale.overlap, scale_id);
    out.reserve(footprints.size());
    for (std::size_t k = 0; k < footprints.size(); ++k) {
        Rng rng = derive_rng(seed, scale_id, k);
        out.push_back(make_block(cloud, footprints[k], scale.sample_count, training, rng, extent));
    }
    return out;
}

/// Most frequent label among the block's rows; ties go to the lower class.
inline int dominant_class(std::span<const int> labels) {
    if (labels.empty()) throw DomainError("dominant class of an unlabeled block");
    std::vector<std::size_t> counts;
    for (int l : labels) {
        if (l < 0) throw DomainError("dominant class of an unlabeled row");
        if (static_cast<std::size_t>(l) >= counts.size()) counts.resize(l + 1, 0);
        ++counts[l];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

// ---------------------------------------------------------------------------
// Feature subsets

enum class FeatureSet { Xyz, Spectral, Both };

/// Columns of the 9-wide row used by each input subset.
inline std::vector<std::size_t> feature_columns(FeatureSet set) {
    switch (set) {
        case FeatureSet::Xyz: return {0, 1, 2, 6, 7, 8};
        case FeatureSet::Spectral: return {3, 4, 5};
        case FeatureSet::Both: break;
    }
    return {0, 1, 2, 3, 4, 5, 6, 7, 8};
}

inline FeatureSet parse_feature_set(std::string_view s) {
    if (s == "xyz") return FeatureSet::Xyz;
    if (s == "spectral") return FeatureSet::Spectral;
    if (s == "both") return FeatureSet::Both;
    throw ParseError("feature set must be xyz, spectral or both");
}

inline FeatureSet feature_set_for_width(std::size_t width) {
    switch (width) {
        case 6: return FeatureSet::Xyz;
        case 3: return FeatureSet::Spectral;
        case 9: return FeatureSet::Both;
        default: throw SchemaError("no feature set has width " + std::to_string(width));
    }
}

inline const char* to_string(FeatureSet s) {
    switch (s) {
        case FeatureSet::Xyz: return "xyz";
        case FeatureSet::Spectral: return "spectral";
        case FeatureSet::Both: return "both";
    }
    return "both";
}

template <typename T>
Matrix<T> select_features(const Matrix<T>& features, FeatureSet set) {
    if (set == FeatureSet::Both) return features;
    const auto cols = feature_columns(set);
    return select_columns(features, std::span<const std::size_t>(cols));
}

// ---------------------------------------------------------------------------
// Raster input

/// One point per valid DSM pixel: (x, y) = (column, row) in pixel units,
/// z = DSM value, IR-R-G from the image. An optional single-band label
/// raster of the same size supplies class ids.
inline PointCloud raster_to_points(const Raster& dsm, const Raster& image, const Raster* labels = nullptr) {
    if (dsm.bands != 1) throw SchemaError("DSM must be a single-band raster");
    if (image.bands != 3) throw SchemaError("image must have 3 bands");
    if (dsm.width != image.width || dsm.height != image.height)
        throw ShapeError("DSM " + std::to_string(dsm.width) + "x" + std::to_string(dsm.height) +
                         " and image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                         " differ in size");
    if (labels && (labels->width != dsm.width || labels->height != dsm.height || labels->bands != 1))
        throw ShapeError("label raster must match the DSM size");
    PointCloud out;
    out.has_spectral = true;
    out.has_label = labels != nullptr;
    out.points.reserve(dsm.width * dsm.height);
    for (std::size_t row = 0; row < dsm.height; ++row)
        for (std::size_t c = 0; c < dsm.width; ++c) {
            const double z = dsm.at(0, row, c);
            if (dsm.is_nodata(z)) continue;
            Point p;
            p.x = static_cast<double>(c);
            p.y = static_cast<double>(row);
            p.z = z;
            p.ir = static_cast<float>(image.at(0, row, c));
            p.r = static_cast<float>(image.at(1, row, c));
            p.g = static_cast<float>(image.at(2, row, c));
            if (labels) p.label = static_cast<int>(std::lround(labels->at(0, row, c)));
            out.points.push_back(p);
        }
    return out;
}

}  // namespace pointlabel
