#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pointlabel/container.hpp"
#include "pointlabel/errors.hpp"
#include "pointlabel/matrix.hpp"
#include "pointlabel/rng.hpp"

namespace pointlabel {

enum class Activation { None, ReLU, Sigmoid, Tanh };
enum class Mode { Train, Eval };

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
/// tanh written through the logistic function: 2σ(2x) − 1.
inline double tanh_via_sigmoid(double x) { return 2.0 * sigmoid(2.0 * x) - 1.0; }

struct LayerSpec {
    std::size_t in_width = 1;
    std::size_t out_width = 1;
    bool has_bn = true;
    Activation activation = Activation::ReLU;

    bool operator==(const LayerSpec&) const = default;
};

/// Two-stage point network. Stage 1 maps every point through `stage1`
/// widths; the output of layer `local_index` is the per-point local feature
/// and the max over points of the last stage-1 layer is the global feature.
/// Their concatenation feeds the `head` layers and a linear classifier.
struct Architecture {
    std::size_t input_width = 9;
    std::vector<std::size_t> stage1 = {64, 64, 128, 512, 2048};
    std::vector<std::size_t> head = {256, 128};
    std::size_t classes = 9;
    std::size_t local_index = 1;

    bool operator==(const Architecture&) const = default;

    std::size_t local_width() const { return stage1.at(local_index); }
    std::size_t global_width() const { return stage1.back(); }
    std::size_t concat_width() const { return local_width() + global_width(); }
    std::size_t layer_count() const { return stage1.size() + head.size() + 1; }
    /// Index of the first layer consuming the concatenated features.
    std::size_t fusion_layer() const { return stage1.size(); }

    void validate() const {
        if (input_width < 1 || classes < 1 || stage1.empty()) throw DomainError("architecture widths must be >= 1");
        if (local_index >= stage1.size()) throw DomainError("local feature layer outside stage 1");
        for (auto w : stage1)
            if (w < 1) throw DomainError("architecture widths must be >= 1");
        for (auto w : head)
            if (w < 1) throw DomainError("architecture widths must be >= 1");
    }

    std::vector<LayerSpec> layer_specs() const {
        validate();
        std::vector<LayerSpec> specs;
        std::size_t in = input_width;
        for (auto w : stage1) {
            specs.push_back({in, w, true, Activation::ReLU});
            in = w;
        }
        in = concat_width();
        for (auto w : head) {
            specs.push_back({in, w, true, Activation::ReLU});
            in = w;
        }
        specs.push_back({in, classes, false, Activation::None});
        return specs;
    }

    /// Small network used for gradient checks.
    static Architecture toy(std::size_t input_width = 9, std::size_t classes = 3) {
        return {input_width, {8, 8, 16, 16, 32}, {}, classes, 1};
    }
};

template <typename T>
struct Layer {
    LayerSpec spec;
    Matrix<T> weight;  ///< in x out
    Matrix<T> bias;    ///< 1 x out
    Matrix<T> gamma, beta, running_mean, running_var;  ///< 1 x out, empty without BN
};

template <typename T>
struct NetworkParams {
    Architecture arch;
    std::vector<Layer<T>> layers;
    double momentum = 0.1;
    double epsilon = 1e-5;

    /// Number of learnable scalars (weights, biases, BN scale and shift).
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size() + l.gamma.size() + l.beta.size();
        return n;
    }
};

namespace detail {

// Tensor name prefix of layer l, shared by checkpoints and error messages.
inline std::string layer_prefix(const Architecture& arch, std::size_t l) {
    if (l < arch.stage1.size()) return "stage1." + std::to_string(l) + ".";
    return "head." + std::to_string(l - arch.stage1.size()) + ".";
}

}  // namespace detail

/// Gradients of the learnable tensors, shaped like the layer they belong to.
template <typename T>
struct LayerGrads {
    Matrix<T> weight, bias, gamma, beta;
};

template <typename T>
using Gradients = std::vector<LayerGrads<T>>;

/// Calls fn(name, param, grad) for every learnable tensor pair in a stable order.
template <typename T, typename Fn>
void for_each_learnable(NetworkParams<T>& params, Gradients<T>& grads, Fn&& fn) {
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        auto& l = params.layers[i];
        auto& g = grads.at(i);
        const std::string base = detail::layer_prefix(params.arch, i);
        fn(base + "weight", l.weight, g.weight);
        fn(base + "bias", l.bias, g.bias);
        if (l.spec.has_bn) {
            fn(base + "gamma", l.gamma, g.gamma);
            fn(base + "beta", l.beta, g.beta);
        }
    }
}

template <typename T>
Gradients<T> zero_gradients(const NetworkParams<T>& params) {
    Gradients<T> g(params.layers.size());
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const auto& l = params.layers[i];
        g[i].weight = Matrix<T>(l.weight.rows(), l.weight.cols());
        g[i].bias = Matrix<T>(1, l.bias.cols());
        g[i].gamma = Matrix<T>(l.gamma.rows(), l.gamma.cols());
        g[i].beta = Matrix<T>(l.beta.rows(), l.beta.cols());
    }
    return g;
}

/// Glorot-uniform weights, zero biases, identity BN (γ = 1, β = 0) and
/// running statistics (mean 0, variance 1).
template <typename T = float>
NetworkParams<T> init_params(const Architecture& arch, Rng& rng) {
    NetworkParams<T> p;
    p.arch = arch;
    for (const auto& spec : arch.layer_specs()) {
        Layer<T> l;
        l.spec = spec;
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.in_width + spec.out_width));
        std::uniform_real_distribution<double> u(-bound, bound);
        l.weight = Matrix<T>(spec.in_width, spec.out_width);
        for (T& w : l.weight.values()) w = static_cast<T>(u(rng));
        l.bias = Matrix<T>(1, spec.out_width, T(0));
        if (spec.has_bn) {
            l.gamma = Matrix<T>(1, spec.out_width, T(1));
            l.beta = Matrix<T>(1, spec.out_width, T(0));
            l.running_mean = Matrix<T>(1, spec.out_width, T(0));
            l.running_var = Matrix<T>(1, spec.out_width, T(1));
        }
        p.layers.push_back(std::move(l));
    }
    return p;
}

template <typename To, typename From>
NetworkParams<To> params_cast(const NetworkParams<From>& src) {
    NetworkParams<To> p;
    p.arch = src.arch;
    p.momentum = src.momentum;
    p.epsilon = src.epsilon;
    for (const auto& l : src.layers)
        p.layers.push_back({l.spec, matrix_cast<To>(l.weight), matrix_cast<To>(l.bias), matrix_cast<To>(l.gamma),
                            matrix_cast<To>(l.beta), matrix_cast<To>(l.running_mean), matrix_cast<To>(l.running_var)});
    return p;
}

// ---------------------------------------------------------------------------
// Pointwise layers

/// Intermediates of one layer kept for the backward pass.
template <typename T>
struct LayerTrace {
    Matrix<T> normalized;           ///< ŝ, BN layers only
    std::vector<double> inv_std;    ///< 1/sqrt(Var[s] + ε), BN layers only
    std::vector<double> batch_mean;
    std::vector<double> batch_var;
    Matrix<T> output;               ///< f after BN and activation
};

namespace detail {

template <typename T>
void add_row_vector(Matrix<T>& m, std::span<const double> v) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) row[c] = static_cast<T>(static_cast<double>(row[c]) + v[c]);
    }
}

template <typename T>
std::vector<double> column_sums(const Matrix<T>& m) {
    std::vector<double> s(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) s[c] += static_cast<double>(row[c]);
    }
    return s;
}

inline double activate(Activation a, double z) {
    switch (a) {
        case Activation::None: return z;
        case Activation::ReLU: return z > 0 ? z : 0.0;
        case Activation::Sigmoid: return sigmoid(z);
        case Activation::Tanh: return tanh_via_sigmoid(z);
    }
    return z;
}

// df/dz expressed through the activation output f.
inline double activation_slope(Activation a, double f) {
    switch (a) {
        case Activation::None: return 1.0;
        case Activation::ReLU: return f > 0 ? 1.0 : 0.0;
        case Activation::Sigmoid: return f * (1.0 - f);
        case Activation::Tanh: return 1.0 - f * f;
    }
    return 1.0;
}

// Applies BN (when present) and the activation to the linear output s in place.
template <typename T>
void normalize_and_activate(Matrix<T>& s, Layer<T>& layer, Mode mode, double epsilon, double momentum,
                            LayerTrace<T>* trace) {
    const std::size_t n = s.rows(), k = s.cols();
    if (layer.spec.has_bn) {
        std::vector<double> mean(k), var(k), inv_std(k);
        if (mode == Mode::Train) {
            if (n < 2) throw DomainError("batch normalization in training mode needs at least 2 points, got " + std::to_string(n));
            const std::span<const T> all = s.values();
            for (std::size_t c = 0; c < k; ++c) {
                mean[c] = detail::shifted_mean(all.subspan(c), k, n);
                var[c] = detail::biased_var(all.subspan(c), k, n, mean[c]);
            }
            for (std::size_t c = 0; c < k; ++c) {
                layer.running_mean(0, c) = static_cast<T>((1 - momentum) * static_cast<double>(layer.running_mean(0, c)) + momentum * mean[c]);
                layer.running_var(0, c) = static_cast<T>((1 - momentum) * static_cast<double>(layer.running_var(0, c)) + momentum * var[c]);
            }
        } else {
            for (std::size_t c = 0; c < k; ++c) {
                mean[c] = static_cast<double>(layer.running_mean(0, c));
                var[c] = static_cast<double>(layer.running_var(0, c));
            }
        }
        for (std::size_t c = 0; c < k; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + epsilon);
        if (trace) trace->normalized = Matrix<T>(n, k);
        for (std::size_t r = 0; r < n; ++r) {
            auto row = s.row(r);
            for (std::size_t c = 0; c < k; ++c) {
                const double xhat = (static_cast<double>(row[c]) - mean[c]) * inv_std[c];
                if (trace) trace->normalized(r, c) = static_cast<T>(xhat);
                const double z = static_cast<double>(layer.gamma(0, c)) * xhat + static_cast<double>(layer.beta(0, c));
                row[c] = static_cast<T>(activate(layer.spec.activation, z));
            }
        }
        if (trace) {
            trace->inv_std = std::move(inv_std);
            trace->batch_mean = std::move(mean);
            trace->batch_var = std::move(var);
        }
    } else if (layer.spec.activation != Activation::None) {
        for (T& v : s.values()) v = static_cast<T>(activate(layer.spec.activation, static_cast<double>(v)));
    }
}

}  // namespace detail

/// One shared per-point layer: s = f_in·W + b, then BN over the N rows
/// (batch statistics in Train mode, running statistics in Eval mode) and the
/// activation. Train mode also folds the batch statistics into the running
/// ones with the configured momentum.
template <typename T>
Matrix<T> pointwise_forward(const Matrix<T>& input, Layer<T>& layer, Mode mode, double epsilon = 1e-5,
                            double momentum = 0.1, LayerTrace<T>* trace = nullptr) {
    if (input.cols() != layer.spec.in_width)
        throw ShapeError("layer expects width " + std::to_string(layer.spec.in_width) + ", got " + input.shape());
    Matrix<T> s = matmul(input, layer.weight);
    const auto bias = std::vector<double>(layer.bias.values().begin(), layer.bias.values().end());
    detail::add_row_vector(s, std::span<const double>(bias));
    detail::normalize_and_activate(s, layer, mode, epsilon, momentum, trace);
    if (trace) trace->output = s;
    return s;
}

/// Column-wise maximum over rows [begin, end) (all rows by default) and the
/// winning row of each column (lowest row on ties).
template <typename T>
std::pair<std::vector<T>, std::vector<std::size_t>> global_max_pool(const Matrix<T>& f, std::size_t begin = 0,
                                                                    std::size_t end = std::size_t(-1)) {
    end = std::min(end, f.rows());
    if (begin >= end) throw DomainError("max pooling over zero points");
    std::vector<T> g(f.row(begin).begin(), f.row(begin).end());
    std::vector<std::size_t> arg(f.cols(), begin);
    for (std::size_t r = begin + 1; r < end; ++r) {
        auto row = f.row(r);
        for (std::size_t c = 0; c < f.cols(); ++c)
            if (row[c] > g[c]) {
                g[c] = row[c];
                arg[c] = r;
            }
    }
    return {std::move(g), std::move(arg)};
}

/// Each row becomes [local row ‖ global vector].
template <typename T>
Matrix<T> concat_local_global(const Matrix<T>& local, std::span<const T> global, std::size_t local_width,
                              std::size_t global_width) {
    if (local.cols() != local_width || global.size() != global_width)
        throw ShapeError("concat expects widths " + std::to_string(local_width) + " and " +
                         std::to_string(global_width) + ", got " + std::to_string(local.cols()) + " and " +
                         std::to_string(global.size()));
    Matrix<T> out(local.rows(), local_width + global_width);
    for (std::size_t r = 0; r < local.rows(); ++r) {
        auto row = out.row(r);
        std::copy(local.row(r).begin(), local.row(r).end(), row.begin());
        std::copy(global.begin(), global.end(), row.begin() + local_width);
    }
    return out;
}

/// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> q(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto in = logits.row(r);
        if (in.empty()) continue;
        const double mx = static_cast<double>(*std::max_element(in.begin(), in.end()));
        double sum = 0;
        for (std::size_t c = 0; c < in.size(); ++c) sum += std::exp(static_cast<double>(in[c]) - mx);
        for (std::size_t c = 0; c < in.size(); ++c) q(r, c) = static_cast<T>(std::exp(static_cast<double>(in[c]) - mx) / sum);
    }
    return q;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over points of −ln q[i, label_i], with q floored at 1e-12.
template <typename T>
double cross_entropy(const Matrix<T>& q, std::span<const int> labels) {
    if (labels.size() != q.rows())
        throw ShapeError("label count " + std::to_string(labels.size()) + " does not match " + q.shape());
    if (q.rows() == 0) throw DomainError("cross entropy over zero points");
    double sum = 0;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const int l = labels[i];
        if (l < 0 || static_cast<std::size_t>(l) >= q.cols())
            throw DomainError("label " + std::to_string(l) + " outside 0.." + std::to_string(q.cols() - 1));
        sum -= std::log(std::max(static_cast<double>(q(i, l)), kProbabilityFloor));
    }
    return sum / static_cast<double>(q.rows());
}

// ---------------------------------------------------------------------------
// Whole network

/// Intermediates of a forward pass over one or more blocks stacked by rows.
/// With B blocks, `global` and `argmax_rows` hold B consecutive runs of the
/// global width, block b first; argmax rows index the stacked matrix.
template <typename T>
struct ForwardTrace {
    Mode mode = Mode::Eval;
    Matrix<T> input;
    std::vector<LayerTrace<T>> layers;
    std::vector<std::size_t> offsets;      ///< B + 1 row offsets of the blocks
    std::vector<T> global;                 ///< g per block
    std::vector<std::size_t> argmax_rows;  ///< winning row per global column
    Matrix<T> logits;
    Matrix<T> probs;                       ///< q
};

namespace detail {

template <typename T>
Matrix<T> row_slice(const Matrix<T>& m, std::size_t begin, std::size_t end) {
    Matrix<T> out(end - begin, m.cols());
    std::copy(m.data() + begin * m.cols(), m.data() + end * m.cols(), out.data());
    return out;
}

// Linear part of the fusion layer, with the global half of the product
// computed once per block: [f_local ‖ g_b]·W = f_local·W_local + g_b·W_global.
template <typename T>
Matrix<T> fusion_linear(const Matrix<T>& local, std::span<const T> globals, std::span<const std::size_t> offsets,
                        const Layer<T>& layer) {
    const std::size_t lw = local.cols(), blocks = offsets.size() - 1;
    const std::size_t gw = layer.weight.rows() - std::min(lw, layer.weight.rows());
    if (layer.weight.rows() != lw + gw || globals.size() != blocks * gw)
        throw ShapeError("fusion layer expects width " + std::to_string(layer.weight.rows()) + ", got " +
                         std::to_string(lw) + " + " + std::to_string(globals.size() / std::max<std::size_t>(blocks, 1)));
    Matrix<T> s = matmul(local, row_slice(layer.weight, 0, lw));
    for (std::size_t b = 0; b < blocks; ++b) {
        std::vector<double> shift(layer.weight.cols(), 0.0);
        for (std::size_t k = 0; k < gw; ++k) {
            const double gk = static_cast<double>(globals[b * gw + k]);
            auto wrow = layer.weight.row(lw + k);
            for (std::size_t c = 0; c < shift.size(); ++c) shift[c] += gk * static_cast<double>(wrow[c]);
        }
        for (std::size_t c = 0; c < shift.size(); ++c) shift[c] += static_cast<double>(layer.bias(0, c));
        for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r) {
            auto row = s.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<T>(static_cast<double>(row[c]) + shift[c]);
        }
    }
    return s;
}

// Row offsets of the blocks; no block sizes means one block of every row.
inline std::vector<std::size_t> block_offsets(std::span<const std::size_t> block_rows, std::size_t rows) {
    std::vector<std::size_t> offsets{0};
    if (block_rows.empty()) {
        offsets.push_back(rows);
        return offsets;
    }
    for (auto n : block_rows) {
        if (n == 0) throw DomainError("block with zero points");
        offsets.push_back(offsets.back() + n);
    }
    if (offsets.back() != rows)
        throw ShapeError("block sizes sum to " + std::to_string(offsets.back()) + ", features have " +
                         std::to_string(rows) + " rows");
    return offsets;
}

}  // namespace detail

/// Full forward pass over blocks stacked by rows (`block_rows` gives their
/// sizes; empty means one block). Each block has its own global feature;
/// Train-mode BN statistics are taken over all rows of the batch. Eval mode
/// is a pure function of (features, params); Train mode updates BN running
/// statistics.
template <typename T>
ForwardTrace<T> forward(const Matrix<T>& features, NetworkParams<T>& params, Mode mode, bool keep_trace = true,
                        std::span<const std::size_t> block_rows = {}) {
    const Architecture& arch = params.arch;
    if (features.cols() != arch.input_width)
        throw ShapeError("network expects " + std::to_string(arch.input_width) + " input features, got " +
                         features.shape());
    ForwardTrace<T> tr;
    tr.mode = mode;
    tr.offsets = detail::block_offsets(block_rows, features.rows());
    if (keep_trace) tr.input = features;
    tr.layers.resize(params.layers.size());
    const double eps = params.epsilon, mom = params.momentum;

    // Stage 1: keep the local feature and the last layer alive even without a trace.
    Matrix<T> x = features;
    Matrix<T> local;
    for (std::size_t l = 0; l < arch.stage1.size(); ++l) {
        LayerTrace<T>* lt = keep_trace ? &tr.layers[l] : nullptr;
        x = pointwise_forward(x, params.layers[l], mode, eps, mom, lt);
        if (l == arch.local_index) local = x;
    }
    for (std::size_t b = 0; b + 1 < tr.offsets.size(); ++b) {
        auto [g, arg] = global_max_pool(x, tr.offsets[b], tr.offsets[b + 1]);
        tr.global.insert(tr.global.end(), g.begin(), g.end());
        tr.argmax_rows.insert(tr.argmax_rows.end(), arg.begin(), arg.end());
    }

    const std::size_t fl = arch.fusion_layer();
    {
        Layer<T>& layer = params.layers[fl];
        LayerTrace<T>* lt = keep_trace ? &tr.layers[fl] : nullptr;
        Matrix<T> s = detail::fusion_linear(local, std::span<const T>(tr.global), std::span<const std::size_t>(tr.offsets), layer);
        detail::normalize_and_activate(s, layer, mode, eps, mom, lt);
        if (lt) lt->output = s;
        x = std::move(s);
    }
    for (std::size_t l = fl + 1; l < params.layers.size(); ++l) {
        LayerTrace<T>* lt = keep_trace ? &tr.layers[l] : nullptr;
        x = pointwise_forward(x, params.layers[l], mode, eps, mom, lt);
    }
    tr.probs = softmax_rows(x);
    tr.logits = std::move(x);
    return tr;
}

/// Eval-mode class probabilities (N x C) without keeping intermediates.
template <typename T>
Matrix<T> predict_probs(const Matrix<T>& features, const NetworkParams<T>& params) {
    // Eval mode never writes to params.
    auto& p = const_cast<NetworkParams<T>&>(params);
    return forward(features, p, Mode::Eval, false).probs;
}

namespace detail {

// Backpropagates d_out (gradient w.r.t. the layer output) to the gradient
// w.r.t. the linear output s, filling dgamma/dbeta.
template <typename T>
Matrix<double> backward_to_linear(const Matrix<double>& d_out, const Layer<T>& layer, const LayerTrace<T>& lt,
                                  LayerGrads<T>& g) {
    const std::size_t n = d_out.rows(), k = d_out.cols();
    Matrix<double> dz = d_out;
    if (layer.spec.activation != Activation::None)
        for (std::size_t i = 0; i < dz.size(); ++i)
            dz.values()[i] *= activation_slope(layer.spec.activation, static_cast<double>(lt.output.values()[i]));
    if (!layer.spec.has_bn) return dz;

    std::vector<double> sum_dxhat(k, 0.0), sum_dxhat_xhat(k, 0.0), dgamma(k, 0.0), dbeta(k, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < k; ++c) {
            const double d = dz(r, c);
            const double xhat = static_cast<double>(lt.normalized(r, c));
            dgamma[c] += d * xhat;
            dbeta[c] += d;
            const double dxhat = d * static_cast<double>(layer.gamma(0, c));
            sum_dxhat[c] += dxhat;
            sum_dxhat_xhat[c] += dxhat * xhat;
        }
    for (std::size_t c = 0; c < k; ++c) {
        g.gamma(0, c) = static_cast<T>(dgamma[c]);
        g.beta(0, c) = static_cast<T>(dbeta[c]);
    }
    const double nn = static_cast<double>(n);
    Matrix<double> ds(n, k);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < k; ++c) {
            const double dxhat = dz(r, c) * static_cast<double>(layer.gamma(0, c));
            const double xhat = static_cast<double>(lt.normalized(r, c));
            ds(r, c) = lt.inv_std[c] / nn * (nn * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
        }
    return ds;
}

// Gradient of the max pool: entry j of d_global (column j mod width) lands
// on the winning row argmax_rows[j]; every other entry is zero.
inline Matrix<double> route_pool_gradient(std::span<const double> d_global, std::span<const std::size_t> argmax_rows,
                                          std::size_t rows, std::size_t width = 0) {
    if (d_global.size() != argmax_rows.size()) throw ShapeError("pool gradient and argmax rows differ in length");
    if (width == 0) width = d_global.size();
    Matrix<double> d(rows, width);
    for (std::size_t j = 0; j < d_global.size(); ++j) d(argmax_rows[j], j % width) += d_global[j];
    return d;
}

template <typename T>
void linear_grads(const Matrix<T>& input, const Matrix<double>& ds, LayerGrads<T>& g) {
    const auto dW = matmul_tn(matrix_cast<double>(input), ds);
    g.weight = matrix_cast<T>(dW);
    const auto db = column_sums(ds);
    for (std::size_t c = 0; c < db.size(); ++c) g.bias(0, c) = static_cast<T>(db[c]);
}

}  // namespace detail

/// Analytic gradients of the mean cross-entropy of a Train-mode trace.
/// Softmax and cross-entropy are fused (∂L/∂logit = (q − onehot)/N), the max
/// pool routes each global gradient to its recorded winning row, BN uses the
/// batch-statistics chain rule and activations gate by their output.
template <typename T>
Gradients<T> backward(const ForwardTrace<T>& tr, std::span<const int> labels, const NetworkParams<T>& params) {
    if (tr.mode != Mode::Train) throw DomainError("backward needs a trace recorded in training mode");
    if (tr.input.empty() && tr.probs.rows() > 0) throw DomainError("backward needs a full trace");
    const Architecture& arch = params.arch;
    const std::size_t n = tr.probs.rows(), classes = tr.probs.cols();
    if (labels.size() != n) throw ShapeError("label count does not match trace rows");

    Gradients<T> grads = zero_gradients(params);
    Matrix<double> d(n, classes);
    for (std::size_t i = 0; i < n; ++i) {
        const int l = labels[i];
        if (l < 0 || static_cast<std::size_t>(l) >= classes) throw DomainError("label " + std::to_string(l) + " out of range");
        for (std::size_t c = 0; c < classes; ++c)
            d(i, c) = (static_cast<double>(tr.probs(i, c)) - (static_cast<std::size_t>(l) == c ? 1.0 : 0.0)) / static_cast<double>(n);
    }

    const std::size_t fl = arch.fusion_layer();
    for (std::size_t l = params.layers.size(); l-- > fl + 1;) {
        const auto& layer = params.layers[l];
        Matrix<double> ds = detail::backward_to_linear(d, layer, tr.layers[l], grads[l]);
        detail::linear_grads(tr.layers[l - 1].output, ds, grads[l]);
        d = matmul_nt(ds, matrix_cast<double>(layer.weight));
    }

    // Fusion layer: input is [f_local ‖ g_b] for the rows of block b.
    const std::size_t lw = arch.local_width(), gw = arch.global_width();
    const std::size_t blocks = tr.offsets.size() - 1;
    std::vector<double> d_global(blocks * gw, 0.0);
    Matrix<double> d_local;
    {
        const auto& layer = params.layers[fl];
        Matrix<double> ds = detail::backward_to_linear(d, layer, tr.layers[fl], grads[fl]);
        const auto& local = tr.layers[arch.local_index].output;
        const auto dW_local = matmul_tn(matrix_cast<double>(local), ds);
        auto& gW = grads[fl].weight;
        for (std::size_t r = 0; r < lw; ++r)
            for (std::size_t c = 0; c < gW.cols(); ++c) gW(r, c) = static_cast<T>(dW_local(r, c));
        Matrix<double> dW_global(gw, gW.cols());
        std::vector<double> ds_total(gW.cols(), 0.0);
        for (std::size_t b = 0; b < blocks; ++b) {
            std::vector<double> ds_sum(gW.cols(), 0.0);
            for (std::size_t r = tr.offsets[b]; r < tr.offsets[b + 1]; ++r)
                for (std::size_t c = 0; c < ds_sum.size(); ++c) ds_sum[c] += ds(r, c);
            for (std::size_t k = 0; k < gw; ++k) {
                const double gk = static_cast<double>(tr.global[b * gw + k]);
                auto wrow = layer.weight.row(lw + k);
                double acc = 0;
                for (std::size_t c = 0; c < ds_sum.size(); ++c) {
                    dW_global(k, c) += gk * ds_sum[c];
                    acc += static_cast<double>(wrow[c]) * ds_sum[c];
                }
                d_global[b * gw + k] = acc;
            }
            for (std::size_t c = 0; c < ds_sum.size(); ++c) ds_total[c] += ds_sum[c];
        }
        for (std::size_t k = 0; k < gw; ++k)
            for (std::size_t c = 0; c < gW.cols(); ++c) gW(lw + k, c) = static_cast<T>(dW_global(k, c));
        for (std::size_t c = 0; c < ds_total.size(); ++c) grads[fl].bias(0, c) = static_cast<T>(ds_total[c]);
        d_local = matmul_nt(ds, matrix_cast<double>(detail::row_slice(layer.weight, 0, lw)));
    }

    // Stage 1, last layer first; the pool gradient lands on the winning rows only.
    const std::size_t last = arch.stage1.size() - 1;
    d = detail::route_pool_gradient(d_global, tr.argmax_rows, n, gw);
    for (std::size_t l = last + 1; l-- > 0;) {
        if (l == arch.local_index) d = add(d, d_local);
        const auto& layer = params.layers[l];
        Matrix<double> ds = detail::backward_to_linear(d, layer, tr.layers[l], grads[l]);
        const Matrix<T>& input = l == 0 ? tr.input : tr.layers[l - 1].output;
        detail::linear_grads(input, ds, grads[l]);
        if (l > 0) d = matmul_nt(ds, matrix_cast<double>(layer.weight));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Container holding every weight, bias, BN scale/shift and running statistic.
inline Container to_container(const NetworkParams<float>& params) {
    Container c;
    c.layers = params.layers.size();
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        const std::string p = detail::layer_prefix(params.arch, l);
        c.tensors.push_back({p + "weight", layer.weight});
        c.tensors.push_back({p + "bias", layer.bias});
        if (layer.spec.has_bn) {
            c.tensors.push_back({p + "gamma", layer.gamma});
            c.tensors.push_back({p + "beta", layer.beta});
            c.tensors.push_back({p + "running_mean", layer.running_mean});
            c.tensors.push_back({p + "running_var", layer.running_var});
        }
    }
    return c;
}

/// Rebuilds parameters (and the architecture) from a checkpoint container.
inline NetworkParams<float> from_container(const Container& c) {
    Architecture arch;
    arch.stage1.clear();
    arch.head.clear();
    std::size_t head_layers = 0;
    for (std::size_t i = 0;; ++i) {
        const auto* w = c.find("stage1." + std::to_string(i) + ".weight");
        if (!w) break;
        if (i == 0) arch.input_width = w->rows();
        arch.stage1.push_back(w->cols());
    }
    while (c.find("head." + std::to_string(head_layers) + ".weight")) ++head_layers;
    if (arch.stage1.size() < 2 || head_layers < 1) throw SchemaError("checkpoint does not describe a point network");
    for (std::size_t i = 0; i + 1 < head_layers; ++i) arch.head.push_back(c.at("head." + std::to_string(i) + ".weight").cols());
    arch.classes = c.at("head." + std::to_string(head_layers - 1) + ".weight").cols();
    arch.local_index = 1;
    if (c.layers != arch.layer_count())
        throw SchemaError("checkpoint declares " + std::to_string(c.layers) + " layers but holds " +
                          std::to_string(arch.layer_count()));

    NetworkParams<float> p;
    p.arch = arch;
    const auto specs = arch.layer_specs();
    for (std::size_t l = 0; l < specs.size(); ++l) {
        const std::string pre = detail::layer_prefix(arch, l);
        Layer<float> layer;
        layer.spec = specs[l];
        auto fetch = [&](const char* name, std::size_t rows, std::size_t cols) {
            const auto& m = c.at(pre + name);
            if (m.rows() != rows || m.cols() != cols)
                throw SchemaError("tensor " + pre + name + " has shape " + m.shape() + ", expected " +
                                  Matrix<float>::shape_string(rows, cols));
            return m;
        };
        layer.weight = fetch("weight", specs[l].in_width, specs[l].out_width);
        layer.bias = fetch("bias", 1, specs[l].out_width);
        if (specs[l].has_bn) {
            layer.gamma = fetch("gamma", 1, specs[l].out_width);
            layer.beta = fetch("beta", 1, specs[l].out_width);
            layer.running_mean = fetch("running_mean", 1, specs[l].out_width);
            layer.running_var = fetch("running_var", 1, specs[l].out_width);
        }
        p.layers.push_back(std::move(layer));
    }
    return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& params) {
    save_container(path, to_container(params));
}

inline NetworkParams<float> load_checkpoint(const std::filesystem::path& path) {
    return from_container(load_container(path));
}

}  // namespace pointlabel
