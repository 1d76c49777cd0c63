#pragma once
// Canonical diagonal decomposition W = D * W' * E by geometric-mean balancing.
//
// D and E are positive diagonals chosen so that every row and every column of
// |W'| has unit geometric mean over its nonzero entries. In the log-magnitude
// domain this is a two-way additive fit, a[i][j] ~ r[i] + c[j], solved in
// closed form when the support is full and by alternating mean-removal sweeps
// otherwise. The overall scale is split evenly between D and E within each
// connected component of the support (mean log d == mean log e).

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "ucgsd/errors.hpp"
#include "ucgsd/tensor.hpp"

namespace ucgsd {

/// Magnitudes below this are structural zeros: excluded from means, preserved in W'.
inline constexpr double kStructuralZero = 1e-30;
inline constexpr double kDefaultBalanceTol = 1e-12;
inline constexpr std::size_t kDefaultBalanceMaxIter = 10'000;

struct BalanceResult {
    Vector row_offsets;
    Vector col_offsets;
    double residual = 0.0;       // max |weighted row/col mean| of a - r - c
    std::size_t iterations = 0;  // 1 for the closed-form pass
};

struct ScaleDecomposition {
    DiagVec d;
    Matrix wp;
    DiagVec e;
    double residual = 0.0;
    std::size_t iterations = 0;
};

struct ChannelScaleDecomposition {
    DiagVec d;
    Tensor4 kp;
    DiagVec e;
    double residual = 0.0;
    std::size_t iterations = 0;
};

namespace detail {

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    /// Keeps the smaller root so representatives are deterministic.
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (b < a) std::swap(a, b);
        parent_[b] = a;
    }

private:
    std::vector<std::size_t> parent_;
};

inline double balance_residual(const Matrix& a, const Matrix& w, const Vector& r, const Vector& c) {
    const std::size_t m = a.rows(), n = a.cols();
    Vector col_sum(n, 0.0), col_w(n, 0.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0, ws = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double wij = w(i, j);
            if (wij <= 0.0) continue;
            const double res = a(i, j) - r[i] - c[j];
            s += wij * res;
            ws += wij;
            col_sum[j] += wij * res;
            col_w[j] += wij;
        }
        if (ws > 0.0) worst = std::max(worst, std::abs(s / ws));
    }
    for (std::size_t j = 0; j < n; ++j)
        if (col_w[j] > 0.0) worst = std::max(worst, std::abs(col_sum[j] / col_w[j]));
    return worst;
}

// Shift r up and c down per connected component so that mean(r) == mean(c).
inline void equal_split(const Matrix& w, Vector& r, Vector& c) {
    const std::size_t m = w.rows(), n = w.cols();
    DisjointSets sets(m + n);
    std::vector<bool> row_active(m, false), col_active(n, false);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (w(i, j) > 0.0) {
                sets.unite(i, m + j);
                row_active[i] = col_active[j] = true;
            }
    Vector sum_r(m + n, 0.0), sum_c(m + n, 0.0), cnt_r(m + n, 0.0), cnt_c(m + n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        if (row_active[i]) {
            const auto root = sets.find(i);
            sum_r[root] += r[i];
            cnt_r[root] += 1.0;
        }
    for (std::size_t j = 0; j < n; ++j)
        if (col_active[j]) {
            const auto root = sets.find(m + j);
            sum_c[root] += c[j];
            cnt_c[root] += 1.0;
        }
    for (std::size_t i = 0; i < m; ++i) {
        if (!row_active[i]) {
            r[i] = 0.0;
            continue;
        }
        const auto root = sets.find(i);
        r[i] += 0.5 * (sum_c[root] / cnt_c[root] - sum_r[root] / cnt_r[root]);
    }
    for (std::size_t j = 0; j < n; ++j) {
        if (!col_active[j]) {
            c[j] = 0.0;
            continue;
        }
        const auto root = sets.find(m + j);
        c[j] -= 0.5 * (sum_c[root] / cnt_c[root] - sum_r[root] / cnt_r[root]);
    }
}

} // namespace detail

/// Fits a[i][j] ~ r[i] + c[j] over entries with positive weight so that the
/// weighted residual has zero mean along every active row and column.
///
/// A uniform positive weight matrix is solved in one closed-form pass
/// (r = row mean - grand mean / 2, c = col mean - grand mean / 2). Any other
/// support is solved by alternating weighted row/column sweeps until the
/// residual drops to `tol`. Rows or columns with no active entry get offset 0.
inline BalanceResult balance_log(const Matrix& log_mag, const Matrix& weights,
                                 double tol = kDefaultBalanceTol,
                                 std::size_t max_iter = kDefaultBalanceMaxIter) {
    if (log_mag.rows() != weights.rows() || log_mag.cols() != weights.cols())
        throw ShapeError("balance_log: weight mask shape mismatch");
    if (!(tol > 0.0)) throw ConfigError("balance_log: tol must be positive");
    const std::size_t m = log_mag.rows(), n = log_mag.cols();

    bool any_active = false, uniform = m > 0 && n > 0;
    const double w0 = uniform ? weights(0, 0) : 0.0;
    for (double wv : weights.data()) {
        if (wv < 0.0 || !std::isfinite(wv)) throw ShapeError("balance_log: weights must be >= 0");
        any_active |= wv > 0.0;
        uniform &= wv == w0;
    }
    if (!any_active) throw DegenerateInputError("balance_log: no active entries");

    BalanceResult out;
    out.row_offsets.assign(m, 0.0);
    out.col_offsets.assign(n, 0.0);
    Vector& r = out.row_offsets;
    Vector& c = out.col_offsets;

    if (uniform) {
        Vector col_mean(n, 0.0);
        double grand = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                s += log_mag(i, j);
                col_mean[j] += log_mag(i, j);
            }
            r[i] = s / static_cast<double>(n);
            grand += s;
        }
        grand /= static_cast<double>(m * n);
        for (std::size_t i = 0; i < m; ++i) r[i] -= 0.5 * grand;
        for (std::size_t j = 0; j < n; ++j) c[j] = col_mean[j] / static_cast<double>(m) - 0.5 * grand;
        out.iterations = 1;
        out.residual = detail::balance_residual(log_mag, weights, r, c);
        return out;
    }

    Vector row_w(m, 0.0), col_w(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            row_w[i] += weights(i, j);
            col_w[j] += weights(i, j);
        }

    double residual = 0.0;
    std::size_t iter = 0;
    while (iter < max_iter) {
        ++iter;
        for (std::size_t i = 0; i < m; ++i) {
            if (row_w[i] <= 0.0) continue;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                if (weights(i, j) > 0.0) s += weights(i, j) * (log_mag(i, j) - c[j]);
            r[i] = s / row_w[i];
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (col_w[j] <= 0.0) continue;
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i)
                if (weights(i, j) > 0.0) s += weights(i, j) * (log_mag(i, j) - r[i]);
            c[j] = s / col_w[j];
        }
        residual = detail::balance_residual(log_mag, weights, r, c);
        if (residual <= tol) break;
    }
    if (residual > tol)
        throw ConvergenceError("balance_log: sweeps did not converge", residual, iter);

    detail::equal_split(weights, r, c);
    out.residual = residual;
    out.iterations = iter;
    return out;
}

/// Canonical decomposition W = diag(d) * wp * diag(e).
inline ScaleDecomposition rz_canonicalize(const Matrix& w, double tol = kDefaultBalanceTol,
                                          std::size_t max_iter = kDefaultBalanceMaxIter) {
    const std::size_t m = w.rows(), n = w.cols();
    Matrix log_mag(m, n), mask(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double mag = std::abs(w(i, j));
            if (!std::isfinite(mag)) throw NumericError("rz_canonicalize: non-finite entry");
            if (mag >= kStructuralZero) {
                log_mag(i, j) = std::log(mag);
                mask(i, j) = 1.0;
            }
        }
    bool any = false;
    for (double v : mask.data()) any |= v > 0.0;
    if (!any) throw DegenerateInputError("rz_canonicalize: matrix is all zeros");

    const auto bal = balance_log(log_mag, mask, tol, max_iter);
    ScaleDecomposition out;
    out.d.resize(m);
    out.e.resize(n);
    for (std::size_t i = 0; i < m; ++i) out.d[i] = std::exp(bal.row_offsets[i]);
    for (std::size_t j = 0; j < n; ++j) out.e[j] = std::exp(bal.col_offsets[j]);
    out.wp = Matrix(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.wp(i, j) = w(i, j) / (out.d[i] * out.e[j]);
    out.residual = bal.residual;
    out.iterations = bal.iterations;
    return out;
}

/// Transpose in canonical coordinates: (W')^T, equal to E^-1 W^T D^-1.
inline Matrix uc_adjoint(const Matrix& w) { return transpose(rz_canonicalize(w).wp); }

/// Gauge-fixing projection onto the canonical representative W'.
inline Matrix canonical_project(const Matrix& w) { return rz_canonicalize(w).wp; }

namespace detail {

// Channel-aggregated log magnitudes of a kernel, optionally with the bias as an
// extra column. Weights count the nonzero spatial taps of each (out, in) pair.
inline void aggregate_kernel(const Tensor4& k, const Vector* bias, Matrix& log_mag, Matrix& weights) {
    const std::size_t co = k.c_out(), ci = k.c_in();
    const std::size_t cols = ci + (bias ? 1 : 0);
    log_mag = Matrix(co, cols);
    weights = Matrix(co, cols);
    for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t i = 0; i < ci; ++i) {
            double s = 0.0, cnt = 0.0;
            for (std::size_t u = 0; u < k.kh(); ++u)
                for (std::size_t v = 0; v < k.kw(); ++v) {
                    const double mag = std::abs(k.at(o, i, u, v));
                    if (!std::isfinite(mag)) throw NumericError("kernel: non-finite entry");
                    if (mag >= kStructuralZero) {
                        s += std::log(mag);
                        cnt += 1.0;
                    }
                }
            if (cnt > 0.0) {
                log_mag(o, i) = s / cnt;
                weights(o, i) = cnt;
            }
        }
        if (bias) {
            const double mag = std::abs((*bias)[o]);
            if (mag >= kStructuralZero) {
                log_mag(o, ci) = std::log(mag);
                weights(o, ci) = 1.0;
            }
        }
    }
}

} // namespace detail

/// Channelwise decomposition K[i,j,u,v] = d[i] * kp[i,j,u,v] * e[j]. Each output
/// and input channel of |kp| has unit geometric mean over its nonzero taps.
inline ChannelScaleDecomposition canonicalize_kernel(const Tensor4& k, double tol = kDefaultBalanceTol,
                                                     std::size_t max_iter = kDefaultBalanceMaxIter) {
    Matrix log_mag, weights;
    detail::aggregate_kernel(k, nullptr, log_mag, weights);
    for (std::size_t o = 0; o < k.c_out(); ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < k.c_in(); ++i) s += weights(o, i);
        if (s == 0.0)
            throw DegenerateInputError("canonicalize_kernel: output channel " + std::to_string(o) +
                                       " is all zeros");
    }
    for (std::size_t i = 0; i < k.c_in(); ++i) {
        double s = 0.0;
        for (std::size_t o = 0; o < k.c_out(); ++o) s += weights(o, i);
        if (s == 0.0)
            throw DegenerateInputError("canonicalize_kernel: input channel " + std::to_string(i) +
                                       " is all zeros");
    }
    const auto bal = balance_log(log_mag, weights, tol, max_iter);
    ChannelScaleDecomposition out;
    out.d.resize(k.c_out());
    out.e.resize(k.c_in());
    for (std::size_t o = 0; o < k.c_out(); ++o) out.d[o] = std::exp(bal.row_offsets[o]);
    for (std::size_t i = 0; i < k.c_in(); ++i) out.e[i] = std::exp(bal.col_offsets[i]);
    out.kp = k;
    for (std::size_t o = 0; o < k.c_out(); ++o)
        for (std::size_t i = 0; i < k.c_in(); ++i) {
            const double s = out.d[o] * out.e[i];
            for (std::size_t u = 0; u < k.kh(); ++u)
                for (std::size_t v = 0; v < k.kw(); ++v) out.kp.at(o, i, u, v) /= s;
        }
    out.residual = bal.residual;
    out.iterations = bal.iterations;
    return out;
}

/// Canonical scales of a whole affine layer (weight plus optional bias).
///
/// A bias is treated as one more input column fed by a constant 1, so the
/// layer is canonicalized as [W | b]. `bias_scale` is that column's E entry;
/// the bias itself then lives at scale d[i] * bias_scale.
struct LayerFrame {
    DiagVec d;
    DiagVec e;
    double bias_scale = 1.0;
    double residual = 0.0;
    std::size_t iterations = 0;

    /// Per-entry output scale for the bias: d[i] * bias_scale.
    DiagVec bias_scales() const {
        DiagVec out(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * bias_scale;
        return out;
    }
};

inline LayerFrame dense_frame(const Matrix& w, const Vector* bias, double tol = kDefaultBalanceTol,
                              std::size_t max_iter = kDefaultBalanceMaxIter) {
    LayerFrame f;
    if (!bias) {
        auto dec = rz_canonicalize(w, tol, max_iter);
        f.d = std::move(dec.d);
        f.e = std::move(dec.e);
        f.residual = dec.residual;
        f.iterations = dec.iterations;
        return f;
    }
    if (bias->size() != w.rows()) throw ShapeError("dense_frame: bias length mismatch");
    Matrix aug(w.rows(), w.cols() + 1);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) aug(i, j) = w(i, j);
        aug(i, w.cols()) = (*bias)[i];
    }
    auto dec = rz_canonicalize(aug, tol, max_iter);
    f.d = std::move(dec.d);
    f.bias_scale = dec.e.back();
    dec.e.pop_back();
    f.e = std::move(dec.e);
    f.residual = dec.residual;
    f.iterations = dec.iterations;
    return f;
}

inline LayerFrame conv_frame(const Tensor4& k, const Vector* bias, double tol = kDefaultBalanceTol,
                             std::size_t max_iter = kDefaultBalanceMaxIter) {
    LayerFrame f;
    if (!bias) {
        auto dec = canonicalize_kernel(k, tol, max_iter);
        f.d = std::move(dec.d);
        f.e = std::move(dec.e);
        f.residual = dec.residual;
        f.iterations = dec.iterations;
        return f;
    }
    if (bias->size() != k.c_out()) throw ShapeError("conv_frame: bias length mismatch");
    Matrix log_mag, weights;
    detail::aggregate_kernel(k, bias, log_mag, weights);
    const auto bal = balance_log(log_mag, weights, tol, max_iter);
    f.d.resize(k.c_out());
    f.e.resize(k.c_in());
    for (std::size_t o = 0; o < k.c_out(); ++o) f.d[o] = std::exp(bal.row_offsets[o]);
    for (std::size_t i = 0; i < k.c_in(); ++i) f.e[i] = std::exp(bal.col_offsets[i]);
    f.bias_scale = std::exp(bal.col_offsets[k.c_in()]);
    f.residual = bal.residual;
    f.iterations = bal.iterations;
    return f;
}

} // namespace ucgsd
