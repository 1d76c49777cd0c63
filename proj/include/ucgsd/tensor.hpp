#pragma once
// Dense double-precision containers: row-major Matrix, diagonal scale vectors,
// and the (c_out, c_in, kh, kw) kernel tensor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ucgsd/errors.hpp"

namespace ucgsd {

using Vector = std::vector<double>;

/// Entries of a diagonal matrix. Strictly positive when used as a gauge or canonical scale.
using DiagVec = std::vector<double>;

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(const DiagVec& d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Convolution kernel laid out as (c_out, c_in, kh, kw).
class Tensor4 {
public:
    Tensor4() = default;

    Tensor4(std::size_t c_out, std::size_t c_in, std::size_t kh, std::size_t kw, double fill = 0.0)
        : c_out_(c_out), c_in_(c_in), kh_(kh), kw_(kw), data_(c_out * c_in * kh * kw, fill) {}

    Tensor4(std::size_t c_out, std::size_t c_in, std::size_t kh, std::size_t kw,
            std::vector<double> data)
        : c_out_(c_out), c_in_(c_in), kh_(kh), kw_(kw), data_(std::move(data)) {
        if (data_.size() != c_out_ * c_in_ * kh_ * kw_)
            throw ShapeError("kernel data length mismatch");
    }

    std::size_t c_out() const noexcept { return c_out_; }
    std::size_t c_in() const noexcept { return c_in_; }
    std::size_t kh() const noexcept { return kh_; }
    std::size_t kw() const noexcept { return kw_; }
    std::size_t spatial() const noexcept { return kh_ * kw_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t index(std::size_t o, std::size_t i, std::size_t u, std::size_t v) const noexcept {
        return ((o * c_in_ + i) * kh_ + u) * kw_ + v;
    }
    double& at(std::size_t o, std::size_t i, std::size_t u, std::size_t v) {
        return data_[index(o, i, u, v)];
    }
    double at(std::size_t o, std::size_t i, std::size_t u, std::size_t v) const {
        return data_[index(o, i, u, v)];
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool same_shape(const Tensor4& other) const noexcept {
        return c_out_ == other.c_out_ && c_in_ == other.c_in_ && kh_ == other.kh_ && kw_ == other.kw_;
    }

    bool operator==(const Tensor4&) const = default;

private:
    std::size_t c_out_ = 0, c_in_ = 0, kh_ = 0, kw_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

/// diag(d) * w
inline Matrix scale_rows(const Matrix& w, const DiagVec& d) {
    if (d.size() != w.rows()) throw ShapeError("scale_rows: length mismatch");
    Matrix r = w;
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (auto& x : r.row(i)) x *= d[i];
    return r;
}

/// w * diag(e)
inline Matrix scale_cols(const Matrix& w, const DiagVec& e) {
    if (e.size() != w.cols()) throw ShapeError("scale_cols: length mismatch");
    Matrix r = w;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        auto row = r.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) row[j] *= e[j];
    }
    return r;
}

inline Matrix transpose(const Matrix& w) {
    Matrix t(w.cols(), w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) t(j, i) = w(i, j);
    return t;
}

inline double frobenius_norm(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

inline double frobenius_norm(const Matrix& m) { return frobenius_norm(m.data()); }

/// ||a - b|| / max(||b||, floor)
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-300) {
    if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        ref += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), floor);
}

inline double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-300) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("relative_error: shape mismatch");
    return relative_error(a.data(), b.data(), floor);
}

inline bool all_finite(std::span<const double> x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

inline DiagVec reciprocal(const DiagVec& d) {
    DiagVec r(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) r[i] = 1.0 / d[i];
    return r;
}

} // namespace ucgsd
