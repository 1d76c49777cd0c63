#pragma once
// Gauge-equivariant optimizers and their Euclidean baselines.
//
// Every unit-consistent rule reduces to one elementwise pattern. For a
// parameter entry with canonical scale sigma (d[i] * e[j] for a weight,
// d[i] * e_bias for a bias), the canonical coordinate is theta / sigma and its
// gradient is sigma * g. Descending there and mapping back gives
//   UC-GSD:    theta -= eta * sigma^2 * g
//   momentum:  V' = V / sigma;  V' = mu V' + sigma g;  theta -= eta sigma V';  V = sigma V'
//   Adam:      moments of sigma * g kept in canonical coordinates.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ucgsd/canon.hpp"
#include "ucgsd/errors.hpp"
#include "ucgsd/eval.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/tensor.hpp"

namespace ucgsd {

enum class OptimizerKind { ucgsd, uc_momentum, uc_adam, sgd, sgd_momentum };
enum class RefreshPolicy { per_step, frozen };

inline const char* to_string(OptimizerKind k) {
    switch (k) {
    case OptimizerKind::ucgsd: return "UCGSD";
    case OptimizerKind::uc_momentum: return "UCMomentum";
    case OptimizerKind::uc_adam: return "UCAdam";
    case OptimizerKind::sgd: return "SGD";
    case OptimizerKind::sgd_momentum: return "SGDMomentum";
    }
    return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
    for (auto k : {OptimizerKind::ucgsd, OptimizerKind::uc_momentum, OptimizerKind::uc_adam, OptimizerKind::sgd,
                   OptimizerKind::sgd_momentum})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown optimizer kind '" + s + "'");
}

inline const char* to_string(RefreshPolicy p) { return p == RefreshPolicy::per_step ? "PerStep" : "Frozen"; }

inline RefreshPolicy parse_refresh_policy(const std::string& s) {
    if (s == "PerStep") return RefreshPolicy::per_step;
    if (s == "Frozen") return RefreshPolicy::frozen;
    throw ConfigError("unknown refresh policy '" + s + "'");
}

inline bool is_unit_consistent(OptimizerKind k) {
    return k == OptimizerKind::ucgsd || k == OptimizerKind::uc_momentum || k == OptimizerKind::uc_adam;
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::ucgsd;
    double eta = 0.01;
    double mu = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    RefreshPolicy refresh = RefreshPolicy::per_step;
    /// Replace every layer by its canonical representative after each step.
    bool project = false;

    void validate() const {
        if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
        if (!(mu >= 0.0 && mu < 1.0)) throw ConfigError("mu must be in [0, 1)");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)");
        if (!(eps_adam > 0.0)) throw ConfigError("eps_adam must be > 0");
    }
};

/// State of one parameter tensor. The velocity is kept in original
/// coordinates; Adam moments are kept in canonical coordinates together with
/// the scales (`frame`) they were expressed against.
struct SlotState {
    Vector velocity;
    Vector first_moment;
    Vector second_moment;
    Vector frame;
    std::size_t step = 0;
};

struct OptimizerState {
    std::vector<ParamKey> keys;
    std::vector<SlotState> slots;
    std::vector<Vector> frozen_scales;
    std::size_t step = 0;
};

namespace detail {

inline void check_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw ShapeError(std::string(what) + ": length mismatch");
}

inline void precond_step(std::span<double> p, std::span<const double> g, std::span<const double> sigma, double eta) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= eta * sigma[i] * sigma[i] * g[i];
}

inline void momentum_step(std::span<double> p, std::span<const double> g, std::span<const double> sigma,
                          SlotState& st, double eta, double mu) {
    if (st.velocity.empty()) st.velocity.assign(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double vc = mu * (st.velocity[i] / sigma[i]) + sigma[i] * g[i];
        p[i] -= eta * sigma[i] * vc;
        st.velocity[i] = sigma[i] * vc;
    }
    ++st.step;
}

inline void adam_step(std::span<double> p, std::span<const double> g, std::span<const double> sigma, SlotState& st,
                      const OptimizerConfig& cfg) {
    const std::size_t n = p.size();
    if (st.first_moment.empty()) {
        st.first_moment.assign(n, 0.0);
        st.second_moment.assign(n, 0.0);
    }
    if (!st.frame.empty()) {
        // re-express stored moments against the current canonical frame
        for (std::size_t i = 0; i < n; ++i) {
            const double ratio = st.frame[i] / sigma[i];
            st.first_moment[i] *= ratio;
            st.second_moment[i] *= ratio * ratio;
        }
    }
    st.frame.assign(sigma.begin(), sigma.end());
    ++st.step;
    const double t = static_cast<double>(st.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        const double gc = sigma[i] * g[i];
        st.first_moment[i] = cfg.beta1 * st.first_moment[i] + (1.0 - cfg.beta1) * gc;
        st.second_moment[i] = cfg.beta2 * st.second_moment[i] + (1.0 - cfg.beta2) * gc * gc;
        const double mhat = st.first_moment[i] / c1;
        const double vhat = st.second_moment[i] / c2;
        p[i] -= sigma[i] * cfg.eta * mhat / (std::sqrt(vhat) + cfg.eps_adam);
    }
}

inline Vector outer_scales(const DiagVec& d, const DiagVec& e) {
    Vector s(d.size() * e.size());
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t j = 0; j < e.size(); ++j) s[i * e.size() + j] = d[i] * e[j];
    return s;
}

inline Vector kernel_scales(const Tensor4& k, const DiagVec& d, const DiagVec& e) {
    Vector s(k.size());
    for (std::size_t o = 0; o < k.c_out(); ++o)
        for (std::size_t i = 0; i < k.c_in(); ++i)
            for (std::size_t u = 0; u < k.kh(); ++u)
                for (std::size_t v = 0; v < k.kw(); ++v) s[k.index(o, i, u, v)] = d[o] * e[i];
    return s;
}

} // namespace detail

/// W+ = W - eta * D^2 * G * E^2 with (D, E) the canonical scales of W.
inline Matrix ucgsd_step(const Matrix& w, const Matrix& g, double eta) {
    if (w.rows() != g.rows() || w.cols() != g.cols()) throw ShapeError("ucgsd_step: shape mismatch");
    const auto dec = rz_canonicalize(w);
    Matrix out = w;
    detail::precond_step(out.data(), g.data(), detail::outer_scales(dec.d, dec.e), eta);
    return out;
}

/// b+ = b - eta * d^2 * g_b, with d the bias's output scale.
inline Vector ucgsd_bias_step(const Vector& b, const Vector& g_b, double eta, const DiagVec& d) {
    detail::check_same(b.size(), g_b.size(), "ucgsd_bias_step");
    detail::check_same(b.size(), d.size(), "ucgsd_bias_step");
    Vector out = b;
    detail::precond_step(out, g_b, d, eta);
    return out;
}

/// K+[i,j,u,v] = K - eta * d[i]^2 * dK[i,j,u,v] * e[j]^2.
inline Tensor4 ucgsd_conv_step(const Tensor4& k, const Tensor4& g_k, double eta, const DiagVec& d, const DiagVec& e) {
    if (!k.same_shape(g_k)) throw ShapeError("ucgsd_conv_step: kernel/gradient shape mismatch");
    detail::check_same(d.size(), k.c_out(), "ucgsd_conv_step");
    detail::check_same(e.size(), k.c_in(), "ucgsd_conv_step");
    Tensor4 out = k;
    detail::precond_step(out.data(), g_k.data(), detail::kernel_scales(k, d, e), eta);
    return out;
}

inline std::pair<Matrix, SlotState> uc_momentum_step(const Matrix& w, const Matrix& g, SlotState state, double eta,
                                                     double mu) {
    if (w.rows() != g.rows() || w.cols() != g.cols()) throw ShapeError("uc_momentum_step: shape mismatch");
    if (!state.velocity.empty()) detail::check_same(state.velocity.size(), w.size(), "uc_momentum_step");
    const auto dec = rz_canonicalize(w);
    Matrix out = w;
    detail::momentum_step(out.data(), g.data(), detail::outer_scales(dec.d, dec.e), state, eta, mu);
    return {std::move(out), std::move(state)};
}

inline std::pair<Matrix, SlotState> uc_adam_step(const Matrix& w, const Matrix& g, SlotState state,
                                                 const OptimizerConfig& cfg) {
    if (w.rows() != g.rows() || w.cols() != g.cols()) throw ShapeError("uc_adam_step: shape mismatch");
    if (!state.first_moment.empty()) detail::check_same(state.first_moment.size(), w.size(), "uc_adam_step");
    const auto dec = rz_canonicalize(w);
    Matrix out = w;
    detail::adam_step(out.data(), g.data(), detail::outer_scales(dec.d, dec.e), state, cfg);
    return {std::move(out), std::move(state)};
}

inline Matrix sgd_step(const Matrix& w, const Matrix& g, double eta) {
    if (w.rows() != g.rows() || w.cols() != g.cols()) throw ShapeError("sgd_step: shape mismatch");
    Matrix out = w;
    detail::precond_step(out.data(), g.data(), Vector(w.size(), 1.0), eta);
    return out;
}

inline std::pair<Matrix, SlotState> sgd_momentum_step(const Matrix& w, const Matrix& g, SlotState state, double eta,
                                                      double mu) {
    if (w.rows() != g.rows() || w.cols() != g.cols()) throw ShapeError("sgd_momentum_step: shape mismatch");
    Matrix out = w;
    detail::momentum_step(out.data(), g.data(), Vector(w.size(), 1.0), state, eta, mu);
    return {std::move(out), std::move(state)};
}

/// Canonical per-entry scales of every parameter, aligned with parameter_keys().
///
/// Dense and conv layers are canonicalized together with their bias (see
/// LayerFrame). An affine gain is dimensionless and gets scale 1; its shift is
/// canonicalized as a one-column matrix.
inline std::vector<Vector> canonical_scales(const Network& net) {
    std::vector<Vector> out;
    const auto keys = net.parameter_keys();
    std::size_t k = 0;
    while (k < keys.size()) {
        const Node& nd = net.node(keys[k].node);
        if (auto* d = std::get_if<op::Dense>(&nd.spec)) {
            const auto f = dense_frame(d->w, d->b ? &*d->b : nullptr);
            out.push_back(detail::outer_scales(f.d, f.e));
            if (d->b) out.push_back(f.bias_scales());
        } else if (auto* c = std::get_if<op::Conv2d>(&nd.spec)) {
            const auto f = conv_frame(c->k, c->b ? &*c->b : nullptr);
            out.push_back(detail::kernel_scales(c->k, f.d, f.e));
            if (c->b) out.push_back(f.bias_scales());
        } else if (auto* a = std::get_if<op::AffineGain>(&nd.spec)) {
            out.emplace_back(a->a.size(), 1.0);
            const auto dec = rz_canonicalize(Matrix(a->c.size(), 1, a->c));
            Vector s(a->c.size());
            for (std::size_t i = 0; i < s.size(); ++i) s[i] = dec.d[i] * dec.e[0];
            out.push_back(std::move(s));
        }
        k = out.size();
    }
    return out;
}

/// Maps optimizer state through a gauge given its per-entry parameter factors
/// (see parameter_gauge_factors): velocities and frames scale like the
/// parameters, canonical moments are unchanged.
inline OptimizerState gauge_state(const OptimizerState& st, const std::vector<Vector>& factors) {
    OptimizerState out = st;
    for (std::size_t k = 0; k < out.slots.size(); ++k) {
        auto& s = out.slots[k];
        for (std::size_t i = 0; i < s.velocity.size(); ++i) s.velocity[i] *= factors[k][i];
        for (std::size_t i = 0; i < s.frame.size(); ++i) s.frame[i] *= factors[k][i];
    }
    for (std::size_t k = 0; k < out.frozen_scales.size(); ++k)
        for (std::size_t i = 0; i < out.frozen_scales[k].size(); ++i) out.frozen_scales[k][i] *= factors[k][i];
    return out;
}

/// Replaces every linear layer of a plain chain by its canonical representative.
/// Graphs with residual/concat/split/permute/affine nodes are rejected.
inline Network gauge_fix_projection(const Network& net) {
    net.validate();
    for (std::size_t id = 1; id < net.size(); ++id) {
        const Node& nd = net.node(id);
        const bool allowed = std::holds_alternative<op::Dense>(nd.spec) || std::holds_alternative<op::Conv2d>(nd.spec) ||
                             std::holds_alternative<op::Nonlin>(nd.spec) || is_terminal(nd.spec);
        if (!allowed || nd.inputs.size() != 1 || nd.inputs[0] != id - 1)
            throw UnsupportedStructure(std::string("gauge_fix_projection: node ") + std::to_string(id) + " (" +
                                       kind_name(nd.spec) + ") is not part of a plain layer chain");
    }
    Network out = net;
    const auto keys = out.parameter_keys();
    const auto scales = canonical_scales(net);
    for (std::size_t k = 0; k < keys.size(); ++k) {
        auto p = out.param(keys[k]);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] /= scales[k][i];
    }
    return out;
}

/// Steps every parameter of a network according to an OptimizerConfig.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const OptimizerConfig& config() const noexcept { return cfg_; }
    const OptimizerState& state() const noexcept { return state_; }
    OptimizerState& state() noexcept { return state_; }

    void step(Network& net, const GradientSet& grads) {
        const auto keys = net.parameter_keys();
        if (grads.keys != keys) throw ShapeError("optimizer: gradients do not match network parameters");
        if (state_.keys.empty()) {
            state_.keys = keys;
            state_.slots.assign(keys.size(), SlotState{});
        } else if (state_.keys != keys) {
            throw ShapeError("optimizer: network parameters changed between steps");
        }

        std::vector<Vector> scales;
        if (is_unit_consistent(cfg_.kind)) {
            if (cfg_.refresh == RefreshPolicy::frozen) {
                if (state_.frozen_scales.empty()) state_.frozen_scales = canonical_scales(net);
                scales = state_.frozen_scales;
            } else {
                scales = canonical_scales(net);
            }
        } else {
            for (auto k : keys) scales.emplace_back(net.param(k).size(), 1.0);
        }

        for (std::size_t k = 0; k < keys.size(); ++k) {
            auto p = net.param(keys[k]);
            const Vector& g = grads.values[k];
            const Vector& s = scales[k];
            switch (cfg_.kind) {
            case OptimizerKind::ucgsd:
            case OptimizerKind::sgd: detail::precond_step(p, g, s, cfg_.eta); break;
            case OptimizerKind::uc_momentum:
            case OptimizerKind::sgd_momentum: detail::momentum_step(p, g, s, state_.slots[k], cfg_.eta, cfg_.mu); break;
            case OptimizerKind::uc_adam: detail::adam_step(p, g, s, state_.slots[k], cfg_); break;
            }
        }
        ++state_.step;
        if (cfg_.project) net = gauge_fix_projection(net);
    }

private:
    OptimizerConfig cfg_;
    OptimizerState state_;
};

} // namespace ucgsd
