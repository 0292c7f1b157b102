#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/network.hpp"
#include "pointlabel/preprocess.hpp"
#include "pointlabel/rng.hpp"

namespace pointlabel {

struct TrainConfig {
    double lr_initial = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t batch_size = 32;
    std::size_t epoch_total = 30;
    std::size_t patience = 3;
    double val_fraction = 0.25;
    std::size_t augment_copies = 2;
    std::uint64_t seed = 0;
    FeatureSet features = FeatureSet::Both;

    void validate() const {
        if (!(val_fraction > 0 && val_fraction < 1)) throw DomainError("val_fraction must lie in (0, 1)");
        if (patience < 1) throw DomainError("patience must be >= 1");
        if (!(lr_initial > 0)) throw DomainError("initial learning rate must be positive");
        if (batch_size < 1) throw DomainError("batch size must be >= 1");
        if (epoch_total < 1) throw DomainError("epoch_total must be >= 1");
    }
};

/// lr_initial · (1 − epoch/epoch_total), evaluated once per epoch.
inline double lr_at(std::size_t epoch_current, const TrainConfig& config) {
    if (epoch_current >= config.epoch_total)
        throw DomainError("epoch " + std::to_string(epoch_current) + " outside schedule of " +
                          std::to_string(config.epoch_total) + " epochs");
    return config.lr_initial *
           (1.0 - static_cast<double>(epoch_current) / static_cast<double>(config.epoch_total));
}

// ---------------------------------------------------------------------------
// Data split and balancing

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::string> warnings;
};

/// Per class tag, ⌈fraction·count⌉ items go to validation (at least one
/// item per stratum stays in training; single-item strata stay entirely).
inline Split stratified_split(std::span<const int> tags, double fraction, std::uint64_t seed) {
    if (!(fraction > 0 && fraction < 1)) throw DomainError("split fraction must lie in (0, 1)");
    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < tags.size(); ++i) strata[tags[i]].push_back(i);

    Split out;
    Rng rng = derive_rng(seed, 0x5917);
    for (auto& [tag, items] : strata) {
        std::shuffle(items.begin(), items.end(), rng);
        std::size_t n_val = 0;
        if (items.size() == 1) {
            out.warnings.push_back("class " + std::to_string(tag) + " has a single block; kept for training");
        } else {
            n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(items.size()) - 1e-9));
            n_val = std::clamp<std::size_t>(n_val, 1, items.size() - 1);
        }
        out.val.insert(out.val.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_val));
        out.train.insert(out.train.end(), items.begin() + static_cast<std::ptrdiff_t>(n_val), items.end());
    }
    if (out.train.empty() || out.val.empty()) throw DomainError("stratified split left an empty set");
    return out;
}

/// Indices (into `tags`) with every class repeated round-robin up to the
/// size of the largest class. Originals come first within each class.
inline std::vector<std::size_t> balance_classes(std::span<const int> tags) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < tags.size(); ++i) by_class[tags[i]].push_back(i);
    std::size_t target = 0;
    for (const auto& [tag, items] : by_class) target = std::max(target, items.size());
    std::vector<std::size_t> out;
    out.reserve(target * by_class.size());
    for (const auto& [tag, items] : by_class)
        for (std::size_t k = 0; k < target; ++k) out.push_back(items[k % items.size()]);
    return out;
}

template <typename Item>
std::vector<Item> gather(std::span<const Item> items, std::span<const std::size_t> idx) {
    std::vector<Item> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(items[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
    std::vector<Matrix<double>> m;
    std::vector<Matrix<double>> v;
    std::uint64_t t = 0;
};

/// One Adam update over every learnable tensor. A non-finite gradient
/// rejects the whole step (parameters and state untouched).
template <typename T>
void adam_step(NetworkParams<T>& params, Gradients<T>& grads, AdamState<T>& state, double lr,
               const TrainConfig& config) {
    if (!(lr > 0)) throw DomainError("learning rate must be positive");
    for_each_learnable(params, grads, [](const std::string& name, Matrix<T>& p, Matrix<T>& g) {
        if (p.rows() != g.rows() || p.cols() != g.cols())
            throw ShapeError("gradient " + name + " has shape " + g.shape() + ", parameter " + p.shape());
        for (T x : g.values())
            if (!std::isfinite(static_cast<double>(x))) throw NonFiniteError("non-finite gradient in " + name);
    });
    const bool fresh = state.m.empty();
    std::size_t idx = 0;
    state.t += 1;
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for_each_learnable(params, grads, [&](const std::string&, Matrix<T>& p, Matrix<T>& g) {
        if (fresh) {
            state.m.emplace_back(p.rows(), p.cols());
            state.v.emplace_back(p.rows(), p.cols());
        }
        auto& m = state.m.at(idx);
        auto& v = state.v.at(idx);
        ++idx;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g.values()[i]);
            double& mi = m.values()[i];
            double& vi = v.values()[i];
            mi = b1 * mi + (1 - b1) * gi;
            vi = b2 * vi + (1 - b2) * gi * gi;
            const double m_hat = mi / c1, v_hat = vi / c2;
            p.values()[i] = static_cast<T>(static_cast<double>(p.values()[i]) -
                                           lr * m_hat / (std::sqrt(v_hat) + config.adam_epsilon));
        }
    });
}

// ---------------------------------------------------------------------------
// Early stopping and history

/// Tracks the best validation loss and counts epochs without improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Returns true when `loss` improves on the best so far.
    bool update(std::size_t epoch, double loss) {
        if (loss < best_) {
            best_ = loss;
            best_epoch_ = epoch;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    bool should_stop() const noexcept { return stale_ >= patience_; }
    double best_loss() const noexcept { return best_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }

private:
    std::size_t patience_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t best_epoch_ = 0;
    std::size_t stale_ = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;  ///< 1-based
    double lr = 0;
    double train_loss = 0;
    double train_acc = 0;
    double val_loss = 0;
    double val_acc = 0;
};

inline void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
    out << "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss, r.train_acc,
                      r.val_loss, r.val_acc);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// Fit

struct FitResult {
    NetworkParams<float> best;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool diverged = false;
    std::string stop_reason;
};

/// Loss and accuracy of a block set in eval mode, weighted by rows.
struct BlockScore {
    double loss = 0;
    double accuracy = 0;
};

inline BlockScore score_blocks(std::span<const Block> blocks, const NetworkParams<float>& params, FeatureSet features) {
    double loss = 0;
    std::size_t rows = 0, correct = 0;
    for (const auto& b : blocks) {
        const auto q = predict_probs(select_features(b.features, features), params);
        loss += cross_entropy(q, b.labels) * static_cast<double>(q.rows());
        for (std::size_t i = 0; i < q.rows(); ++i)
            correct += static_cast<int>(argmax_row(q.row(i))) == b.labels[i];
        rows += q.rows();
    }
    if (rows == 0) throw DomainError("scoring an empty block set");
    return {loss / static_cast<double>(rows), static_cast<double>(correct) / static_cast<double>(rows)};
}

/// Supplies the training blocks of each (0-based) epoch.
using TrainSource = std::function<std::vector<Block>(std::size_t epoch)>;
/// Invoked with the new best parameters whenever validation loss improves.
using ImproveHook = std::function<void(const NetworkParams<float>&, const EpochRecord&)>;

/// Mini-batch Adam with per-epoch linear learning-rate decay, validation
/// after every epoch, best-by-validation-loss checkpointing and early
/// stopping. Each batch is one stacked pass, so the loss is the mean over
/// every row of the batch and BN statistics span the whole batch.
inline FitResult fit(const TrainSource& train_source, std::span<const Block> val, NetworkParams<float> params,
                     const TrainConfig& config, const ImproveHook& on_improve = {}) {
    config.validate();
    if (val.empty()) throw DomainError("fit needs a non-empty validation set");
    FitResult result;
    result.best = params;
    AdamState<float> adam;
    EarlyStopping stopper(config.patience);

    for (std::size_t epoch = 0; epoch < config.epoch_total; ++epoch) {
        const double lr = lr_at(epoch, config);
        std::vector<Block> blocks = train_source(epoch);
        if (blocks.empty()) throw DomainError("fit needs a non-empty training set");
        std::vector<std::size_t> order(blocks.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = derive_rng(config.seed, 0xE90C, epoch);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0;
        std::size_t rows = 0, correct = 0;
        bool diverged = false;
        for (std::size_t start = 0; start < order.size() && !diverged; start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            // One stacked pass per batch: BN statistics span every row of the batch.
            std::vector<std::size_t> block_rows;
            std::vector<int> labels;
            std::size_t total = 0;
            for (std::size_t j = start; j < stop; ++j) total += blocks[order[j]].features.rows();
            Matrix<float> x(total, 0);
            for (std::size_t j = start; j < stop; ++j) {
                const Block& b = blocks[order[j]];
                const auto xb = select_features(b.features, config.features);
                if (x.cols() == 0) x = Matrix<float>(total, xb.cols());
                std::copy(xb.values().begin(), xb.values().end(), x.data() + labels.size() * x.cols());
                labels.insert(labels.end(), b.labels.begin(), b.labels.end());
                block_rows.push_back(xb.rows());
            }
            const auto tr = forward(x, params, Mode::Train, true, std::span<const std::size_t>(block_rows));
            const double loss = cross_entropy(tr.probs, labels);
            if (!std::isfinite(loss)) {
                diverged = true;
                break;
            }
            loss_sum += loss * static_cast<double>(x.rows());
            rows += x.rows();
            for (std::size_t i = 0; i < tr.probs.rows(); ++i)
                correct += static_cast<int>(argmax_row(tr.probs.row(i))) == labels[i];
            auto grads = backward(tr, labels, params);
            try {
                adam_step(params, grads, adam, lr, config);
            } catch (const NonFiniteError&) {
                diverged = true;
            }
        }
        if (diverged) {
            result.diverged = true;
            result.stop_reason = "non-finite loss or gradient in epoch " + std::to_string(epoch + 1);
            break;
        }

        const BlockScore v = score_blocks(val, params, config.features);
        EpochRecord rec{epoch + 1, lr, loss_sum / static_cast<double>(rows),
                        static_cast<double>(correct) / static_cast<double>(rows), v.loss, v.accuracy};
        result.history.push_back(rec);
        if (stopper.update(epoch + 1, v.loss)) {
            result.best = params;
            result.best_epoch = epoch + 1;
            result.best_val_loss = v.loss;
            if (on_improve) on_improve(result.best, rec);
        }
        if (stopper.should_stop()) {
            result.stop_reason = "validation loss did not improve for " + std::to_string(config.patience) + " epochs";
            break;
        }
    }
    if (result.stop_reason.empty()) result.stop_reason = "completed " + std::to_string(result.history.size()) + " epochs";
    return result;
}

inline FitResult fit(std::span<const Block> train, std::span<const Block> val, NetworkParams<float> params,
                     const TrainConfig& config, const ImproveHook& on_improve = {}) {
    std::vector<Block> fixed(train.begin(), train.end());
    return fit([fixed](std::size_t) { return fixed; }, val, std::move(params), config, on_improve);
}

// ---------------------------------------------------------------------------
// Training data from a labelled cloud

/// Blocks of a labelled scene split into training and validation sets.
/// Validation blocks are sampled once without jitter; training blocks are
/// re-sampled every epoch from `augment_copies` rotated and jittered
/// replicas of the scene (or from the scene itself when no copies are
/// requested). Footprint membership comes from the un-augmented tiling, so
/// the split is made before augmentation.
class TrainingSet {
public:
    TrainingSet(PointCloud cloud, std::vector<ScaleConfig> scales, const TrainConfig& config)
        : cloud_(std::move(cloud)), scales_(std::move(scales)), config_(config) {
        if (!cloud_.has_label) throw DomainError("training needs a labelled cloud");
        const SceneExtent extent = compute_extent(cloud_);
        std::vector<int> tags;
        for (std::size_t s = 0; s < scales_.size(); ++s) {
            for (auto& fp : tile_blocks(cloud_, scales_[s].size, scales_[s].overlap, s)) {
                std::vector<int> labels;
                labels.reserve(fp.members.size());
                for (auto i : fp.members) labels.push_back(cloud_.points[i].label);
                tags.push_back(dominant_class(labels));
                footprints_.push_back(std::move(fp));
            }
        }
        if (footprints_.size() < 2) throw DomainError("scene yields fewer than two blocks");
        split_ = stratified_split(tags, config_.val_fraction, config_.seed);

        const auto train_tags = gather(std::span<const int>(tags), std::span<const std::size_t>(split_.train));
        for (auto k : balance_classes(train_tags)) train_fp_.push_back(split_.train[k]);

        const auto val_tags = gather(std::span<const int>(tags), std::span<const std::size_t>(split_.val));
        for (auto k : balance_classes(val_tags)) {
            const std::size_t f = split_.val[k];
            Rng rng = derive_rng(config_.seed, 0x7A1, f);
            val_.push_back(make_block(cloud_, footprints_[f], scales_[footprints_[f].scale_id].sample_count, false,
                                      rng, extent));
        }
    }

    const std::vector<Block>& validation() const noexcept { return val_; }
    const Split& split() const noexcept { return split_; }
    std::size_t footprint_count() const noexcept { return footprints_.size(); }
    std::size_t balanced_train_count() const noexcept { return train_fp_.size(); }

    std::vector<Block> epoch_blocks(std::size_t epoch) const {
        std::vector<Block> out;
        const std::size_t copies = std::max<std::size_t>(config_.augment_copies, 1);
        for (std::size_t c = 0; c < copies; ++c) {
            Rng aug_rng = derive_rng(config_.seed, 0xA06 + c, epoch);
            const PointCloud scene = config_.augment_copies ? augment_scene(cloud_, aug_rng) : cloud_;
            const SceneExtent extent = compute_extent(scene);
            for (std::size_t j = 0; j < train_fp_.size(); ++j) {
                const Footprint& fp = footprints_[train_fp_[j]];
                Rng rng = derive_rng(config_.seed, (epoch << 8) + c + 1, j);
                out.push_back(make_block(scene, fp, scales_[fp.scale_id].sample_count, true, rng, extent));
            }
        }
        return out;
    }

    TrainSource source() const {
        return [this](std::size_t epoch) { return epoch_blocks(epoch); };
    }

private:
    PointCloud cloud_;
    std::vector<ScaleConfig> scales_;
    TrainConfig config_;
    std::vector<Footprint> footprints_;
    Split split_;
    std::vector<std::size_t> train_fp_;
    std::vector<Block> val_;
};

}  // namespace pointlabel
