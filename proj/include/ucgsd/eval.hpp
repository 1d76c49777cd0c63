#pragma once
// Forward evaluation, reverse-mode differentiation (Euclidean and
// unit-consistent adjoints), losses, and a central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <variant>
#include <vector>

#include "ucgsd/canon.hpp"
#include "ucgsd/errors.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/tensor.hpp"

namespace ucgsd {

/// Output value of every node for one batch (columns are samples).
struct Activations {
    std::vector<Matrix> values;

    const Matrix& output() const { return values.back(); }
    std::size_t batch() const { return values.empty() ? 0 : values.front().cols(); }
};

/// Per-parameter gradients aligned with Network::parameter_keys(), plus the
/// gradient with respect to the network input.
struct GradientSet {
    std::vector<ParamKey> keys;
    std::vector<Vector> values;
    Matrix input;

    Vector& at(ParamKey key) {
        for (std::size_t i = 0; i < keys.size(); ++i)
            if (keys[i] == key) return values[i];
        throw ShapeError("gradient set has no entry for node " + std::to_string(key.node));
    }
    const Vector& at(ParamKey key) const { return const_cast<GradientSet*>(this)->at(key); }

    double norm() const {
        double s = 0.0;
        for (const auto& v : values)
            for (double x : v) s += x * x;
        return std::sqrt(s);
    }
};

inline GradientSet zero_gradients(const Network& net, std::size_t batch = 0) {
    GradientSet g;
    g.keys = net.parameter_keys();
    for (auto k : g.keys) g.values.emplace_back(net.param(k).size(), 0.0);
    g.input = Matrix(net.input_shape().size(), batch);
    return g;
}

/// Weight gradient of a dense node viewed as a matrix.
inline Matrix dense_weight_grad(const Network& net, const GradientSet& g, std::size_t node_id) {
    const auto& d = std::get<op::Dense>(net.node(node_id).spec);
    return Matrix(d.w.rows(), d.w.cols(), g.at({node_id, ParamSlot::weight}));
}

namespace detail {

inline void conv_forward(const op::Conv2d& c, const Shape& in, const Shape& out, const Matrix& x,
                         Matrix& y) {
    const auto& k = c.k;
    const std::size_t batch = x.cols();
    y = Matrix(out.size(), batch);
    for (std::size_t o = 0; o < out.channels; ++o)
        for (std::size_t oy = 0; oy < out.height; ++oy)
            for (std::size_t ox = 0; ox < out.width; ++ox) {
                const std::size_t row = (o * out.height + oy) * out.width + ox;
                for (std::size_t n = 0; n < batch; ++n) y(row, n) = c.b ? (*c.b)[o] : 0.0;
                for (std::size_t i = 0; i < in.channels; ++i)
                    for (std::size_t u = 0; u < k.kh(); ++u) {
                        const auto iy = static_cast<long>(oy * c.stride + u) - static_cast<long>(c.padding);
                        if (iy < 0 || iy >= static_cast<long>(in.height)) continue;
                        for (std::size_t v = 0; v < k.kw(); ++v) {
                            const auto ix = static_cast<long>(ox * c.stride + v) - static_cast<long>(c.padding);
                            if (ix < 0 || ix >= static_cast<long>(in.width)) continue;
                            const double kv = k.at(o, i, u, v);
                            const std::size_t src = (i * in.height + iy) * in.width + ix;
                            const auto xrow = x.row(src);
                            auto yrow = y.row(row);
                            for (std::size_t n = 0; n < batch; ++n) yrow[n] += kv * xrow[n];
                        }
                    }
            }
}

// Accumulates the input signal (through `kernel`) and, when requested, the
// kernel/bias gradients of one convolution.
inline void conv_backward(const op::Conv2d& c, const Tensor4& kernel, const Shape& in, const Shape& out,
                          const Matrix& x, const Matrix& gy, Matrix& gx, Vector* gk, Vector* gb) {
    const std::size_t batch = x.cols();
    for (std::size_t o = 0; o < out.channels; ++o)
        for (std::size_t oy = 0; oy < out.height; ++oy)
            for (std::size_t ox = 0; ox < out.width; ++ox) {
                const std::size_t row = (o * out.height + oy) * out.width + ox;
                const auto grow = gy.row(row);
                if (gb)
                    for (std::size_t n = 0; n < batch; ++n) (*gb)[o] += grow[n];
                for (std::size_t i = 0; i < in.channels; ++i)
                    for (std::size_t u = 0; u < kernel.kh(); ++u) {
                        const auto iy = static_cast<long>(oy * c.stride + u) - static_cast<long>(c.padding);
                        if (iy < 0 || iy >= static_cast<long>(in.height)) continue;
                        for (std::size_t v = 0; v < kernel.kw(); ++v) {
                            const auto ix = static_cast<long>(ox * c.stride + v) - static_cast<long>(c.padding);
                            if (ix < 0 || ix >= static_cast<long>(in.width)) continue;
                            const std::size_t src = (i * in.height + iy) * in.width + ix;
                            const double kv = kernel.at(o, i, u, v);
                            const auto xrow = x.row(src);
                            auto gxrow = gx.row(src);
                            double acc = 0.0;
                            for (std::size_t n = 0; n < batch; ++n) {
                                gxrow[n] += kv * grow[n];
                                acc += xrow[n] * grow[n];
                            }
                            if (gk) (*gk)[kernel.index(o, i, u, v)] += acc;
                        }
                    }
            }
}

enum class Adjoint { euclidean, unit_consistent };

inline void accumulate(std::vector<Matrix>& signals, std::size_t id, const Matrix& g) {
    if (signals[id].empty()) {
        signals[id] = g;
        return;
    }
    auto dst = signals[id].data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Reverse sweep from the terminal node. Returns the signal (gradient of the
// loss with respect to each node's output); fills parameter gradients when
// `grads` is non-null.
inline std::vector<Matrix> reverse_pass(const Network& net, const Activations& acts, const Matrix& upstream,
                                        Adjoint mode, GradientSet* grads) {
    net.validate();
    const std::size_t count = net.size();
    if (acts.values.size() != count) throw ShapeError("activations do not match network");
    const std::size_t batch = acts.batch();
    if (upstream.rows() != acts.output().rows() || upstream.cols() != batch)
        throw ShapeError("upstream gradient shape mismatch");

    std::vector<Matrix> sig(count);
    sig[count - 1] = upstream;

    for (std::size_t id = count; id-- > 0;) {
        if (sig[id].empty()) continue;
        const Node& nd = net.node(id);
        const Matrix& g = sig[id];
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, op::Input>) {
                    if (grads) grads->input = g;
                } else if constexpr (std::is_same_v<T, op::Dense>) {
                    const std::size_t src = nd.inputs[0];
                    const Matrix& x = acts.values[src];
                    if (grads) {
                        auto& gw = grads->at({id, ParamSlot::weight});
                        for (std::size_t i = 0; i < n.w.rows(); ++i) {
                            const auto grow = g.row(i);
                            for (std::size_t j = 0; j < n.w.cols(); ++j) {
                                const auto xrow = x.row(j);
                                double acc = 0.0;
                                for (std::size_t b = 0; b < batch; ++b) acc += grow[b] * xrow[b];
                                gw[i * n.w.cols() + j] += acc;
                            }
                        }
                        if (n.b) {
                            auto& gb = grads->at({id, ParamSlot::bias});
                            for (std::size_t i = 0; i < n.w.rows(); ++i)
                                for (double v : g.row(i)) gb[i] += v;
                        }
                    }
                    const Matrix adj = mode == Adjoint::euclidean ? transpose(n.w) : uc_adjoint(n.w);
                    accumulate(sig, src, matmul(adj, g));
                } else if constexpr (std::is_same_v<T, op::Conv2d>) {
                    const std::size_t src = nd.inputs[0];
                    const Shape& in = net.node(src).shape;
                    Matrix gx(in.size(), batch);
                    Vector* gk = grads ? &grads->at({id, ParamSlot::weight}) : nullptr;
                    Vector* gb = grads && n.b ? &grads->at({id, ParamSlot::bias}) : nullptr;
                    if (mode == Adjoint::euclidean) {
                        conv_backward(n, n.k, in, nd.shape, acts.values[src], g, gx, gk, gb);
                    } else {
                        const Tensor4 kp = canonicalize_kernel(n.k).kp;
                        conv_backward(n, kp, in, nd.shape, acts.values[src], g, gx, gk, gb);
                    }
                    accumulate(sig, src, gx);
                } else if constexpr (std::is_same_v<T, op::Nonlin>) {
                    const std::size_t src = nd.inputs[0];
                    const Matrix& z = acts.values[src];
                    Matrix gz(g.rows(), g.cols());
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gz.data()[i] = activation_derivative(n.kind, n.slope, z.data()[i]) * g.data()[i];
                    accumulate(sig, src, gz);
                } else if constexpr (std::is_same_v<T, op::Add>) {
                    accumulate(sig, nd.inputs[0], g);
                    accumulate(sig, nd.inputs[1], g);
                } else if constexpr (std::is_same_v<T, op::Concat>) {
                    std::size_t row = 0;
                    for (auto src : nd.inputs) {
                        const std::size_t rows = net.node(src).shape.size();
                        Matrix part(rows, batch);
                        for (std::size_t r = 0; r < rows; ++r)
                            std::copy_n(g.row(row + r).begin(), batch, part.row(r).begin());
                        accumulate(sig, src, part);
                        row += rows;
                    }
                } else if constexpr (std::is_same_v<T, op::Split>) {
                    const std::size_t src = nd.inputs[0];
                    Matrix full(net.node(src).shape.size(), batch);
                    const std::size_t offset = n.begin * nd.shape.spatial();
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        std::copy_n(g.row(r).begin(), batch, full.row(offset + r).begin());
                    accumulate(sig, src, full);
                } else if constexpr (std::is_same_v<T, op::Permute>) {
                    const std::size_t src = nd.inputs[0];
                    const std::size_t sp = nd.shape.spatial();
                    Matrix gx(g.rows(), batch);
                    for (std::size_t c = 0; c < n.perm.size(); ++c)
                        for (std::size_t p = 0; p < sp; ++p)
                            std::copy_n(g.row(c * sp + p).begin(), batch, gx.row(n.perm[c] * sp + p).begin());
                    accumulate(sig, src, gx);
                } else if constexpr (std::is_same_v<T, op::AffineGain>) {
                    const std::size_t src = nd.inputs[0];
                    const Matrix& x = acts.values[src];
                    const std::size_t sp = nd.shape.spatial();
                    Matrix gx(g.rows(), batch);
                    Vector* ga = grads ? &grads->at({id, ParamSlot::gain}) : nullptr;
                    Vector* gc = grads ? &grads->at({id, ParamSlot::shift}) : nullptr;
                    for (std::size_t c = 0; c < n.a.size(); ++c)
                        for (std::size_t p = 0; p < sp; ++p) {
                            const std::size_t r = c * sp + p;
                            for (std::size_t b = 0; b < batch; ++b) {
                                gx(r, b) = n.a[c] * g(r, b);
                                if (ga) (*ga)[c] += x(r, b) * g(r, b);
                                if (gc) (*gc)[c] += g(r, b);
                            }
                        }
                    accumulate(sig, src, gx);
                } else {
                    accumulate(sig, nd.inputs[0], g);
                }
            },
            nd.spec);
    }
    for (std::size_t id = 0; id < count; ++id)
        if (sig[id].empty()) sig[id] = Matrix(net.node(id).shape.size(), batch);
    return sig;
}

} // namespace detail

inline Activations forward(const Network& net, const Matrix& x) {
    net.validate();
    const std::size_t count = net.size();
    const std::size_t batch = x.cols();
    if (x.rows() != net.input_shape().size())
        throw ShapeError("input has " + std::to_string(x.rows()) + " features, network expects " +
                         std::to_string(net.input_shape().size()));
    Activations acts;
    acts.values.resize(count);
    for (std::size_t id = 0; id < count; ++id) {
        const Node& nd = net.node(id);
        Matrix& y = acts.values[id];
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, op::Input>) {
                    y = x;
                } else if constexpr (std::is_same_v<T, op::Dense>) {
                    y = matmul(n.w, acts.values[nd.inputs[0]]);
                    if (n.b)
                        for (std::size_t i = 0; i < y.rows(); ++i)
                            for (auto& v : y.row(i)) v += (*n.b)[i];
                } else if constexpr (std::is_same_v<T, op::Conv2d>) {
                    detail::conv_forward(n, net.node(nd.inputs[0]).shape, nd.shape, acts.values[nd.inputs[0]], y);
                } else if constexpr (std::is_same_v<T, op::Nonlin>) {
                    y = acts.values[nd.inputs[0]];
                    for (auto& v : y.data()) v = apply_activation(n.kind, n.slope, v);
                } else if constexpr (std::is_same_v<T, op::Add>) {
                    y = acts.values[nd.inputs[0]];
                    const auto rhs = acts.values[nd.inputs[1]].data();
                    auto out = y.data();
                    for (std::size_t i = 0; i < out.size(); ++i) out[i] += rhs[i];
                } else if constexpr (std::is_same_v<T, op::Concat>) {
                    y = Matrix(nd.shape.size(), batch);
                    std::size_t row = 0;
                    for (auto src : nd.inputs) {
                        const Matrix& part = acts.values[src];
                        for (std::size_t r = 0; r < part.rows(); ++r)
                            std::copy_n(part.row(r).begin(), batch, y.row(row + r).begin());
                        row += part.rows();
                    }
                } else if constexpr (std::is_same_v<T, op::Split>) {
                    const Matrix& src = acts.values[nd.inputs[0]];
                    y = Matrix(nd.shape.size(), batch);
                    const std::size_t offset = n.begin * nd.shape.spatial();
                    for (std::size_t r = 0; r < y.rows(); ++r)
                        std::copy_n(src.row(offset + r).begin(), batch, y.row(r).begin());
                } else if constexpr (std::is_same_v<T, op::Permute>) {
                    const Matrix& src = acts.values[nd.inputs[0]];
                    const std::size_t sp = nd.shape.spatial();
                    y = Matrix(nd.shape.size(), batch);
                    for (std::size_t c = 0; c < n.perm.size(); ++c)
                        for (std::size_t p = 0; p < sp; ++p)
                            std::copy_n(src.row(n.perm[c] * sp + p).begin(), batch, y.row(c * sp + p).begin());
                } else if constexpr (std::is_same_v<T, op::AffineGain>) {
                    y = acts.values[nd.inputs[0]];
                    const std::size_t sp = nd.shape.spatial();
                    for (std::size_t c = 0; c < n.a.size(); ++c)
                        for (std::size_t p = 0; p < sp; ++p)
                            for (auto& v : y.row(c * sp + p)) v = n.a[c] * v + n.c[c];
                } else {
                    y = acts.values[nd.inputs[0]];
                }
            },
            nd.spec);
        if (!all_finite(y.data()))
            throw NumericError("non-finite value at node " + std::to_string(id) + " (" + kind_name(nd.spec) + ")");
    }
    return acts;
}

/// Exact reverse-mode gradients of the loss whose output gradient is `upstream`.
/// Gradients are summed over the batch.
inline GradientSet backward_euclidean(const Network& net, const Activations& acts, const Matrix& upstream) {
    GradientSet grads = zero_gradients(net, acts.batch());
    detail::reverse_pass(net, acts, upstream, detail::Adjoint::euclidean, &grads);
    return grads;
}

/// Error signals propagated through every linear node with its UC adjoint
/// (the canonical representative's transpose) instead of the plain transpose.
/// Entry i is the signal at node i's output; entry input_id() is the input signal.
inline std::vector<Matrix> backward_uc(const Network& net, const Activations& acts, const Matrix& upstream) {
    return detail::reverse_pass(net, acts, upstream, detail::Adjoint::unit_consistent, nullptr);
}

struct LossValue {
    double value = 0.0;
    Matrix grad;
};

/// 0.5 * sum of squared errors over all entries and samples.
inline LossValue loss_mse(const Matrix& pred, const Matrix& target) {
    if (pred.empty()) throw ShapeError("loss_mse: empty input");
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw ShapeError("loss_mse: prediction/target shape mismatch");
    LossValue out{0.0, Matrix(pred.rows(), pred.cols())};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred.data()[i] - target.data()[i];
        out.value += 0.5 * r * r;
        out.grad.data()[i] = r;
    }
    return out;
}

/// Softmax cross-entropy summed over columns. `target` holds one probability
/// vector (usually one-hot) per column.
inline LossValue loss_softmax_xent(const Matrix& logits, const Matrix& target) {
    if (logits.empty()) throw ShapeError("loss_softmax_xent: empty input");
    if (logits.rows() != target.rows() || logits.cols() != target.cols())
        throw ShapeError("loss_softmax_xent: logits/target shape mismatch");
    LossValue out{0.0, Matrix(logits.rows(), logits.cols())};
    for (std::size_t b = 0; b < logits.cols(); ++b) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < logits.rows(); ++k) mx = std::max(mx, logits(k, b));
        double sum = 0.0, tsum = 0.0;
        for (std::size_t k = 0; k < logits.rows(); ++k) sum += std::exp(logits(k, b) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t k = 0; k < logits.rows(); ++k) {
            out.value -= target(k, b) * (logits(k, b) - lse);
            tsum += target(k, b);
        }
        for (std::size_t k = 0; k < logits.rows(); ++k)
            out.grad(k, b) = std::exp(logits(k, b) - lse) * tsum - target(k, b);
    }
    return out;
}

inline LossValue loss_softmax_xent(const Vector& logits, std::size_t label) {
    if (label >= logits.size()) throw ShapeError("loss_softmax_xent: label out of range");
    Matrix target(logits.size(), 1);
    target(label, 0) = 1.0;
    return loss_softmax_xent(Matrix(logits.size(), 1, logits), target);
}

/// Loss selected by the network's terminal node.
inline LossValue network_loss(const Network& net, const Matrix& output, const Matrix& target) {
    if (std::holds_alternative<op::SoftmaxXentOutput>(net.node(net.output_id()).spec))
        return loss_softmax_xent(output, target);
    return loss_mse(output, target);
}

struct FiniteDiffResult {
    GradientSet grads;
    /// Set when some nonlinearity input lies within 10*h of its kink.
    bool flagged = false;
    double min_kink_distance = std::numeric_limits<double>::infinity();
};

/// Distance of the closest nonlinearity input to zero.
inline double min_kink_distance(const Network& net, const Activations& acts) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t id = 0; id < net.size(); ++id) {
        const Node& nd = net.node(id);
        if (!std::holds_alternative<op::Nonlin>(nd.spec)) continue;
        for (double z : acts.values[nd.inputs[0]].data()) best = std::min(best, std::abs(z));
    }
    return best;
}

/// Central differences (L(p + h) - L(p - h)) / 2h for every parameter scalar and input entry.
inline FiniteDiffResult finite_diff_grad(const Network& net, const Matrix& x, const Matrix& target, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: h must be positive");
    FiniteDiffResult out;
    out.grads = zero_gradients(net, x.cols());
    out.min_kink_distance = min_kink_distance(net, forward(net, x));
    out.flagged = out.min_kink_distance < 10.0 * h;

    Network probe = net;
    auto loss_at = [&](const Network& n, const Matrix& in) {
        return network_loss(n, forward(n, in).output(), target).value;
    };
    for (std::size_t k = 0; k < out.grads.keys.size(); ++k) {
        auto p = probe.param(out.grads.keys[k]);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p[i];
            p[i] = saved + h;
            const double up = loss_at(probe, x);
            p[i] = saved - h;
            const double down = loss_at(probe, x);
            p[i] = saved;
            out.grads.values[k][i] = (up - down) / (2.0 * h);
        }
    }
    Matrix xp = x;
    for (std::size_t i = 0; i < xp.size(); ++i) {
        const double saved = xp.data()[i];
        xp.data()[i] = saved + h;
        const double up = loss_at(probe, xp);
        xp.data()[i] = saved - h;
        const double down = loss_at(probe, xp);
        xp.data()[i] = saved;
        out.grads.input.data()[i] = (up - down) / (2.0 * h);
    }
    return out;
}

/// max over entries of |a - b| / max(|a|, |b|, floor, scale_floor * max|b| of the tensor),
/// parameters only. The scaled floor keeps entries that sit at the round-off
/// level of a central difference from dominating.
inline double max_relative_error(const GradientSet& a, const GradientSet& b, double floor = 1e-6,
                                 double scale_floor = 1e-4) {
    if (a.keys != b.keys) throw ShapeError("gradient sets have different parameters");
    double worst = 0.0;
    for (std::size_t k = 0; k < a.values.size(); ++k) {
        if (a.values[k].size() != b.values[k].size()) throw ShapeError("gradient length mismatch");
        double big = 0.0;
        for (double y : b.values[k]) big = std::max(big, std::abs(y));
        const double f = std::max(floor, scale_floor * big);
        for (std::size_t i = 0; i < a.values[k].size(); ++i) {
            const double x = a.values[k][i], y = b.values[k][i];
            worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), f}));
        }
    }
    return worst;
}

} // namespace ucgsd
