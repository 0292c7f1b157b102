#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "pointlabel/errors.hpp"

namespace pointlabel {

/// Dense row-major 2D array. Storage type T (float in production, double
/// for gradient-check shadows); reductions and products accumulate in double.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match " + shape_string(rows_, cols_));
    }
    Matrix(std::initializer_list<std::initializer_list<T>> init) : rows_(init.size()) {
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw ShapeError("ragged matrix initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    bool operator==(const Matrix&) const = default;

    static std::string shape_string(std::size_t r, std::size_t c) {
        return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <typename To, typename From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
    std::vector<To> out(m.values().begin(), m.values().end());
    return Matrix<To>(m.rows(), m.cols(), std::move(out));
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& m) {
    Matrix<T> out(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
    return out;
}

namespace detail {

inline constexpr std::size_t kPanel = 32;
inline constexpr std::size_t kRowBlock = 4;
inline constexpr std::size_t kRowTile = 64;

// Columns of b repacked into k x kPanel panels of doubles, zero padded.
template <typename T>
std::vector<double> pack_panels(const Matrix<T>& b) {
    const std::size_t k = b.rows(), m = b.cols();
    const std::size_t panels = (m + kPanel - 1) / kPanel;
    std::vector<double> packed(panels * k * kPanel, 0.0);
    for (std::size_t p = 0; p < panels; ++p) {
        double* dst = packed.data() + p * k * kPanel;
        const std::size_t j0 = p * kPanel, width = std::min(kPanel, m - j0);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t c = 0; c < width; ++c) dst[i * kPanel + c] = static_cast<double>(b(i, j0 + c));
    }
    return packed;
}

// Every output element accumulates its k products strictly in index order.
template <typename T, std::size_t Rows>
inline void micro_kernel(const T* const* a, std::size_t k, const double* panel, double (&acc)[Rows][kPanel]) {
    for (std::size_t r = 0; r < Rows; ++r)
        for (std::size_t c = 0; c < kPanel; ++c) acc[r][c] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double* bp = panel + p * kPanel;
        for (std::size_t r = 0; r < Rows; ++r) {
            const double x = static_cast<double>(a[r][p]);
            for (std::size_t c = 0; c < kPanel; ++c) acc[r][c] += x * bp[c];
        }
    }
}

}  // namespace detail

/// Standard product with float64 accumulation, left-to-right over the inner
/// dimension, so results are bit-reproducible and independent of row order.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    using namespace detail;
    if (a.cols() != b.rows())
        throw ShapeError("matmul shape mismatch: " + a.shape() + " x " + b.shape());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix<T> out(n, m);
    if (n == 0 || m == 0) return out;
    const std::vector<double> packed = pack_panels(b);
    const std::size_t panels = (m + kPanel - 1) / kPanel;

    for (std::size_t i0 = 0; i0 < n; i0 += kRowTile) {
        const std::size_t i1 = std::min(n, i0 + kRowTile);
        for (std::size_t p = 0; p < panels; ++p) {
            const double* panel = packed.data() + p * k * kPanel;
            const std::size_t j0 = p * kPanel, width = std::min(kPanel, m - j0);
            std::size_t i = i0;
            for (; i + kRowBlock <= i1; i += kRowBlock) {
                const T* rows[kRowBlock];
                for (std::size_t r = 0; r < kRowBlock; ++r) rows[r] = a.data() + (i + r) * k;
                double acc[kRowBlock][kPanel];
                micro_kernel<T, kRowBlock>(rows, k, panel, acc);
                for (std::size_t r = 0; r < kRowBlock; ++r)
                    for (std::size_t c = 0; c < width; ++c) out(i + r, j0 + c) = static_cast<T>(acc[r][c]);
            }
            for (; i < i1; ++i) {
                const T* rows[1] = {a.data() + i * k};
                double acc[1][kPanel];
                micro_kernel<T, 1>(rows, k, panel, acc);
                for (std::size_t c = 0; c < width; ++c) out(i, j0 + c) = static_cast<T>(acc[0][c]);
            }
        }
    }
    return out;
}

/// aᵀ·b
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn shape mismatch: " + a.shape() + "^T x " + b.shape());
    return matmul(transpose(a), b);
}

/// a·bᵀ
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt shape mismatch: " + a.shape() + " x " + b.shape() + "^T");
    return matmul(a, transpose(b));
}

enum class Axis { Rows, Cols };
enum class Reduction { Max, Mean, Var };

namespace detail {

template <typename T>
double shifted_mean(std::span<const T> xs, std::size_t stride, std::size_t count) {
    const double pivot = static_cast<double>(xs[0]);
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) sum += static_cast<double>(xs[i * stride]) - pivot;
    return pivot + sum / static_cast<double>(count);
}

// Biased (divide-by-n) two-pass variance.
template <typename T>
double biased_var(std::span<const T> xs, std::size_t stride, std::size_t count, double mean) {
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = static_cast<double>(xs[i * stride]) - mean;
        sum += d * d;
    }
    return sum / static_cast<double>(count);
}

}  // namespace detail

/// Reduce along `axis`. Axis::Rows collapses the rows (one value per column),
/// Axis::Cols collapses the columns (one value per row).
template <typename T>
std::vector<T> reduce(const Matrix<T>& m, Axis axis, Reduction kind) {
    const bool over_rows = axis == Axis::Rows;
    const std::size_t count = over_rows ? m.rows() : m.cols();
    const std::size_t outputs = over_rows ? m.cols() : m.rows();
    if (count == 0) throw DomainError("reduction over an empty axis of " + m.shape());
    const std::size_t stride = over_rows ? m.cols() : 1;

    std::vector<T> out(outputs);
    for (std::size_t o = 0; o < outputs; ++o) {
        const std::size_t start = over_rows ? o : o * m.cols();
        std::span<const T> xs = m.values().subspan(start);
        switch (kind) {
            case Reduction::Max: {
                T best = xs[0];
                for (std::size_t i = 1; i < count; ++i) best = std::max(best, xs[i * stride]);
                out[o] = best;
                break;
            }
            case Reduction::Mean:
                out[o] = static_cast<T>(detail::shifted_mean(xs, stride, count));
                break;
            case Reduction::Var: {
                const double mean = detail::shifted_mean(xs, stride, count);
                out[o] = static_cast<T>(detail::biased_var(xs, stride, count, mean));
                break;
            }
        }
    }
    return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
std::size_t argmax_row(std::span<const T> v) {
    if (v.empty()) throw DomainError("argmax of an empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

template <typename T>
std::size_t argmax_row(const std::vector<T>& v) {
    return argmax_row(std::span<const T>(v));
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("add shape mismatch: " + a.shape() + " + " + b.shape());
    Matrix<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += b.values()[i];
    return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("hadamard shape mismatch: " + a.shape() + " * " + b.shape());
    Matrix<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] *= b.values()[i];
    return out;
}

template <typename T>
Matrix<T> scale(Matrix<T> m, T factor) {
    for (T& x : m.values()) x *= factor;
    return m;
}

/// Keep the listed columns, in the listed order.
template <typename T>
Matrix<T> select_columns(const Matrix<T>& m, std::span<const std::size_t> cols) {
    Matrix<T> out(m.rows(), cols.size());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c) {
            if (cols[c] >= m.cols()) throw ShapeError("column index out of range for " + m.shape());
            out(r, c) = m(r, cols[c]);
        }
    return out;
}

}  // namespace pointlabel
