#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <thread>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/matrix.hpp"
#include "pointlabel/network.hpp"
#include "pointlabel/preprocess.hpp"

namespace pointlabel {

/// Per-point class probabilities and the number of sampled rows behind them.
/// Rows with zero coverage hold zeros.
struct ProbabilityField {
    Matrix<double> probs;
    std::vector<std::size_t> coverage;

    std::size_t size() const noexcept { return coverage.size(); }
};

/// Accumulated votes of one scale: probability sums and row counts per point.
struct ScaleVotes {
    Matrix<double> sums;
    std::vector<std::size_t> counts;

    /// Mean vote per covered point, renormalised to sum to one.
    ProbabilityField normalized() const {
        ProbabilityField f{Matrix<double>(sums.rows(), sums.cols()), counts};
        for (std::size_t i = 0; i < sums.rows(); ++i) {
            if (counts[i] == 0) continue;
            double total = 0;
            for (double v : sums.row(i)) total += v;
            if (!(total > 0)) continue;
            for (std::size_t c = 0; c < sums.cols(); ++c) f.probs(i, c) = sums(i, c) / total;
        }
        return f;
    }
};

struct PredictOptions {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    /// Blocks evaluated between deterministic merges; bounds memory.
    std::size_t chunk = 64;
};

/// Tiles the cloud at one scale, samples every footprint (no jitter) and
/// runs the network in eval mode; each sampled row's probabilities are added
/// to its parent point. Overlapping blocks and repeated rows simply add
/// more votes. Blocks are merged in tiling order regardless of `threads`.
inline ScaleVotes predict_scale(const PointCloud& cloud, const NetworkParams<float>& params, const ScaleConfig& scale,
                                std::size_t scale_id, const PredictOptions& opts = {}) {
    const std::size_t classes = params.arch.classes;
    ScaleVotes votes{Matrix<double>(cloud.size(), classes), std::vector<std::size_t>(cloud.size(), 0)};
    if (cloud.empty()) return votes;
    const FeatureSet features = feature_set_for_width(params.arch.input_width);
    const SceneExtent extent = compute_extent(cloud);
    const auto footprints = tile_blocks(cloud, scale.size, scale.overlap, scale_id);

    struct Result {
        std::vector<std::size_t> parents;
        Matrix<float> probs;
    };
    const std::size_t threads = std::max<std::size_t>(opts.threads, 1);
    const std::size_t chunk = std::max<std::size_t>(opts.chunk, threads);
    std::vector<Result> results;
    for (std::size_t begin = 0; begin < footprints.size(); begin += chunk) {
        const std::size_t end = std::min(footprints.size(), begin + chunk);
        results.assign(end - begin, {});
        auto work = [&](std::size_t k) {
            Rng rng = derive_rng(opts.seed, scale_id, k);
            Block b = make_block(cloud, footprints[k], scale.sample_count, false, rng, extent);
            results[k - begin] = {std::move(b.parent_idx), predict_probs(select_features(b.features, features), params)};
        };
        if (threads == 1) {
            for (std::size_t k = begin; k < end; ++k) work(k);
        } else {
            std::atomic<std::size_t> next{begin};
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < threads; ++t)
                pool.emplace_back([&] {
                    for (std::size_t k; (k = next.fetch_add(1)) < end;) work(k);
                });
            for (auto& th : pool) th.join();
        }
        for (const auto& r : results)
            for (std::size_t i = 0; i < r.parents.size(); ++i) {
                const std::size_t p = r.parents[i];
                auto row = r.probs.row(i);
                for (std::size_t c = 0; c < classes; ++c) votes.sums(p, c) += static_cast<double>(row[c]);
                ++votes.counts[p];
            }
    }
    return votes;
}

/// Per point, the mean of the normalised probability vectors of every scale
/// that covered it, renormalised. Points no scale covered stay at zero.
inline ProbabilityField average_scales(std::span<const ProbabilityField> fields) {
    if (fields.empty()) throw DomainError("averaging zero scales");
    const std::size_t n = fields[0].size(), classes = fields[0].probs.cols();
    for (const auto& f : fields)
        if (f.size() != n || f.probs.cols() != classes) throw ShapeError("scale fields differ in shape");
    ProbabilityField out{Matrix<double>(n, classes), std::vector<std::size_t>(n, 0)};
    std::vector<double> acc(classes);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        std::size_t scales = 0;
        for (const auto& f : fields) {
            if (f.coverage[i] == 0) continue;
            ++scales;
            out.coverage[i] += f.coverage[i];
            for (std::size_t c = 0; c < classes; ++c) acc[c] += f.probs(i, c);
        }
        if (scales == 0) continue;
        double total = 0;
        for (double v : acc) total += v;
        if (!(total > 0)) continue;
        for (std::size_t c = 0; c < classes; ++c) out.probs(i, c) = acc[c] / total;
    }
    return out;
}

enum class NeighborSearch { BruteForce, Grid };

namespace detail {

inline double dist2(const Point& a, const Point& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

// Closest donor by (squared 3D distance, index).
inline std::size_t nearest_brute(const PointCloud& cloud, std::span<const std::size_t> donors, const Point& q) {
    std::size_t best = donors[0];
    double best_d = dist2(q, cloud.points[best]);
    for (auto j : donors) {
        const double d = dist2(q, cloud.points[j]);
        if (d < best_d || (d == best_d && j < best)) {
            best = j;
            best_d = d;
        }
    }
    return best;
}

// Uniform xy bucket grid over the donor points; rings are searched outward
// until no unvisited bucket can hold a closer (or equally close) donor.
class DonorGrid {
public:
    DonorGrid(const PointCloud& cloud, std::span<const std::size_t> donors) : cloud_(cloud) {
        min_x_ = min_y_ = std::numeric_limits<double>::infinity();
        double max_x = -min_x_, max_y = -min_y_;
        for (auto j : donors) {
            min_x_ = std::min(min_x_, cloud.points[j].x);
            min_y_ = std::min(min_y_, cloud.points[j].y);
            max_x = std::max(max_x, cloud.points[j].x);
            max_y = std::max(max_y, cloud.points[j].y);
        }
        // About two donors per bucket, and never more buckets than O(donors)
        // even when the donors lie on a line.
        const double n = static_cast<double>(donors.size());
        const double ex = max_x - min_x_, ey = max_y - min_y_;
        cell_ = std::max({std::sqrt(2.0 * ex * ey / n), std::max(ex, ey) / n, 1e-9});
        nx_ = static_cast<std::size_t>(ex / cell_) + 1;
        ny_ = static_cast<std::size_t>(ey / cell_) + 1;
        buckets_.assign(nx_ * ny_, {});
        for (auto j : donors) buckets_[bucket(cell_x(cloud.points[j].x), cell_y(cloud.points[j].y))].push_back(j);
    }

    std::size_t nearest(const Point& q) const {
        const long cx = cell_x(q.x), cy = cell_y(q.y);
        const long hx = static_cast<long>(nx_) - 1, hy = static_cast<long>(ny_) - 1;
        std::size_t best = std::numeric_limits<std::size_t>::max();
        double best_d = std::numeric_limits<double>::infinity();
        auto scan = [&](long x, long y) {
            for (auto j : buckets_[bucket(x, y)]) {
                const double d = dist2(q, cloud_.points[j]);
                if (d < best_d || (d == best_d && j < best)) {
                    best = j;
                    best_d = d;
                }
            }
        };
        // First ring that touches the grid, and the last one that can.
        const long r0 = std::max({0L, -cx, cx - hx, -cy, cy - hy});
        const long r1 = std::max({cx, hx - cx, cy, hy - cy, r0});
        for (long r = r0; r <= r1; ++r) {
            // Buckets in ring r lie at least (r - 1) cells away in x or y.
            const double gap = static_cast<double>(r - 1) * cell_;
            if (r >= 1 && best_d < std::numeric_limits<double>::infinity() && gap * gap > best_d) break;
            const long x0 = std::max(cx - r, 0L), x1 = std::min(cx + r, hx);
            const long y0 = std::max(cy - r, 0L), y1 = std::min(cy + r, hy);
            if (cy - r >= 0)
                for (long x = x0; x <= x1; ++x) scan(x, cy - r);
            if (r > 0 && cy + r <= hy)
                for (long x = x0; x <= x1; ++x) scan(x, cy + r);
            const long ys = std::max(cy - r + 1, y0), ye = std::min(cy + r - 1, y1);
            if (cx - r >= 0)
                for (long y = ys; y <= ye; ++y) scan(cx - r, y);
            if (r > 0 && cx + r <= hx)
                for (long y = ys; y <= ye; ++y) scan(cx + r, y);
        }
        return best;
    }

private:
    long cell_x(double x) const { return static_cast<long>(std::floor((x - min_x_) / cell_)); }
    long cell_y(double y) const { return static_cast<long>(std::floor((y - min_y_) / cell_)); }
    std::size_t bucket(long x, long y) const {
        return static_cast<std::size_t>(y) * nx_ + static_cast<std::size_t>(x);
    }

    const PointCloud& cloud_;
    double min_x_, min_y_, cell_;
    std::size_t nx_, ny_;
    std::vector<std::vector<std::size_t>> buckets_;
};

}  // namespace detail

/// Fills every uncovered point with the probability vector of its nearest
/// covered point in 3D (lowest index on ties). Covered rows are returned
/// unchanged.
inline Matrix<double> interpolate_probabilities(const ProbabilityField& field, const PointCloud& cloud,
                                                NeighborSearch search = NeighborSearch::BruteForce) {
    if (field.size() != cloud.size()) throw ShapeError("probability field and cloud differ in length");
    std::vector<std::size_t> donors, missing;
    for (std::size_t i = 0; i < field.size(); ++i) (field.coverage[i] > 0 ? donors : missing).push_back(i);
    if (donors.empty()) throw DomainError("no point was covered by any block");
    Matrix<double> out = field.probs;
    if (missing.empty()) return out;
    std::optional<detail::DonorGrid> grid;
    if (search == NeighborSearch::Grid) grid.emplace(cloud, donors);
    for (auto i : missing) {
        const std::size_t j = grid ? grid->nearest(cloud.points[i]) : detail::nearest_brute(cloud, donors, cloud.points[i]);
        std::copy(field.probs.row(j).begin(), field.probs.row(j).end(), out.row(i).begin());
    }
    return out;
}

inline std::vector<int> labels_from_probabilities(const Matrix<double>& probs) {
    std::vector<int> out(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = static_cast<int>(argmax_row(probs.row(i)));
    return out;
}

/// Nearest-neighbour fill of uncovered points followed by a per-point argmax.
inline std::vector<int> interpolate_labels(const ProbabilityField& field, const PointCloud& cloud,
                                           NeighborSearch search = NeighborSearch::BruteForce) {
    return labels_from_probabilities(interpolate_probabilities(field, cloud, search));
}

struct Prediction {
    Matrix<double> probs;  ///< N x C after interpolation
    std::vector<int> labels;
    std::vector<ProbabilityField> per_scale;
};

/// Multi-scale prediction: every scale votes, scales are averaged, gaps are
/// filled by nearest-neighbour interpolation and each point takes the argmax.
inline Prediction predict(const PointCloud& cloud, const NetworkParams<float>& params,
                          std::span<const ScaleConfig> scales, const PredictOptions& opts = {},
                          NeighborSearch search = NeighborSearch::BruteForce) {
    Prediction out;
    for (std::size_t s = 0; s < scales.size(); ++s)
        out.per_scale.push_back(predict_scale(cloud, params, scales[s], s, opts).normalized());
    const ProbabilityField merged = average_scales(out.per_scale);
    out.probs = interpolate_probabilities(merged, cloud, search);
    out.labels = labels_from_probabilities(out.probs);
    return out;
}

}  // namespace pointlabel
