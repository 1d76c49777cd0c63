#pragma once
// Diagonal rescaling gauge over a network graph.
//
// Every node output (a tensor edge) carries one positive scale per channel.
// Structural nodes tie those scales together: elementwise homogeneous nodes
// and affine gains keep S_out == S_in, Add forces both operands and the result
// onto one scale, Concat/Split/Permute map channel indices, and the Input and
// terminal edges are pinned to the identity. Only Dense/Conv outputs start new
// free variables.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ucgsd/canon.hpp"
#include "ucgsd/errors.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/rng.hpp"

namespace ucgsd {

/// Partition of all per-channel edge scale variables into equivalence classes.
struct GaugeClasses {
    std::vector<std::size_t> offsets;   // first variable of each node's output edge
    std::vector<std::size_t> channels;  // channel count of each node's output edge
    std::vector<std::size_t> class_of;  // variable -> class id
    std::vector<bool> class_pinned;     // class id -> pinned to identity
    std::vector<std::size_t> group_of;  // node -> edge group (edges sharing any class)
    std::vector<bool> group_free;       // group id -> holds at least one free class

    std::size_t variable(std::size_t node_id, std::size_t channel) const { return offsets[node_id] + channel; }
    std::size_t class_id(std::size_t node_id, std::size_t channel) const {
        return class_of[variable(node_id, channel)];
    }

    std::size_t num_classes() const noexcept { return class_pinned.size(); }
    std::size_t num_free_classes() const noexcept {
        std::size_t n = 0;
        for (bool p : class_pinned) n += !p;
        return n;
    }
    std::size_t num_groups() const noexcept { return group_free.size(); }
    std::size_t num_free_groups() const noexcept {
        std::size_t n = 0;
        for (bool f : group_free) n += f;
        return n;
    }
};

/// One positive scale per channel of every node's output edge.
struct GaugeAssignment {
    std::vector<DiagVec> scales;

    const DiagVec& at(std::size_t node_id) const { return scales.at(node_id); }
};

inline GaugeClasses solve_gauge_constraints(const Network& net) {
    net.validate();
    const std::size_t count = net.size();
    GaugeClasses gc;
    gc.offsets.resize(count);
    gc.channels.resize(count);
    std::size_t total = 0;
    for (std::size_t id = 0; id < count; ++id) {
        gc.offsets[id] = total;
        gc.channels[id] = net.node(id).shape.channels;
        total += gc.channels[id];
    }

    detail::DisjointSets vars(total);
    std::vector<bool> pinned_var(total, false);
    auto var = [&](std::size_t id, std::size_t c) { return gc.offsets[id] + c; };
    auto tie_all = [&](std::size_t a, std::size_t b) {
        for (std::size_t c = 0; c < gc.channels[a]; ++c) vars.unite(var(a, c), var(b, c));
    };
    auto pin_all = [&](std::size_t id) {
        for (std::size_t c = 0; c < gc.channels[id]; ++c) pinned_var[var(id, c)] = true;
    };

    for (std::size_t id = 0; id < count; ++id) {
        const Node& nd = net.node(id);
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, op::Input>) {
                    pin_all(id);
                } else if constexpr (std::is_same_v<T, op::Dense> || std::is_same_v<T, op::Conv2d>) {
                    // fresh variables
                } else if constexpr (std::is_same_v<T, op::Nonlin> || std::is_same_v<T, op::AffineGain>) {
                    tie_all(id, nd.inputs[0]);
                } else if constexpr (std::is_same_v<T, op::Add>) {
                    tie_all(id, nd.inputs[0]);
                    tie_all(id, nd.inputs[1]);
                } else if constexpr (std::is_same_v<T, op::Concat>) {
                    std::size_t offset = 0;
                    for (auto src : nd.inputs) {
                        for (std::size_t c = 0; c < gc.channels[src]; ++c)
                            vars.unite(var(id, offset + c), var(src, c));
                        offset += gc.channels[src];
                    }
                } else if constexpr (std::is_same_v<T, op::Split>) {
                    for (std::size_t c = 0; c < gc.channels[id]; ++c)
                        vars.unite(var(id, c), var(nd.inputs[0], n.begin + c));
                } else if constexpr (std::is_same_v<T, op::Permute>) {
                    for (std::size_t c = 0; c < n.perm.size(); ++c)
                        vars.unite(var(id, c), var(nd.inputs[0], n.perm[c]));
                } else {
                    // terminal: the loss sees raw outputs
                    tie_all(id, nd.inputs[0]);
                    pin_all(id);
                }
            },
            nd.spec);
    }

    // Number classes in order of first appearance.
    std::vector<std::size_t> root_class(total, SIZE_MAX);
    gc.class_of.resize(total);
    for (std::size_t v = 0; v < total; ++v) {
        const auto root = vars.find(v);
        if (root_class[root] == SIZE_MAX) {
            root_class[root] = gc.class_pinned.size();
            gc.class_pinned.push_back(false);
        }
        gc.class_of[v] = root_class[root];
    }
    for (std::size_t v = 0; v < total; ++v)
        if (pinned_var[v]) gc.class_pinned[gc.class_of[v]] = true;

    // Edge groups: nodes whose edges share at least one class.
    detail::DisjointSets nodes(count);
    std::vector<std::size_t> first_node_of_class(gc.num_classes(), SIZE_MAX);
    for (std::size_t id = 0; id < count; ++id)
        for (std::size_t c = 0; c < gc.channels[id]; ++c) {
            auto& first = first_node_of_class[gc.class_id(id, c)];
            if (first == SIZE_MAX)
                first = id;
            else
                nodes.unite(first, id);
        }
    std::vector<std::size_t> root_group(count, SIZE_MAX);
    gc.group_of.resize(count);
    for (std::size_t id = 0; id < count; ++id) {
        const auto root = nodes.find(id);
        if (root_group[root] == SIZE_MAX) {
            root_group[root] = gc.group_free.size();
            gc.group_free.push_back(false);
        }
        gc.group_of[id] = root_group[root];
        for (std::size_t c = 0; c < gc.channels[id]; ++c)
            if (!gc.class_pinned[gc.class_id(id, c)]) gc.group_free[gc.group_of[id]] = true;
    }
    return gc;
}

/// Expands one value per class into a per-edge assignment.
inline GaugeAssignment assignment_from_classes(const GaugeClasses& gc, const Vector& class_values) {
    if (class_values.size() != gc.num_classes()) throw ShapeError("class value count mismatch");
    GaugeAssignment s;
    s.scales.resize(gc.offsets.size());
    for (std::size_t id = 0; id < gc.offsets.size(); ++id) {
        s.scales[id].resize(gc.channels[id]);
        for (std::size_t c = 0; c < gc.channels[id]; ++c) s.scales[id][c] = class_values[gc.class_id(id, c)];
    }
    return s;
}

inline GaugeAssignment identity_gauge(const GaugeClasses& gc) {
    return assignment_from_classes(gc, Vector(gc.num_classes(), 1.0));
}

/// Free classes get exp(u) with u uniform in [-log_range, log_range]; pinned classes get 1.
inline GaugeAssignment sample_gauge(const GaugeClasses& gc, std::uint64_t seed, double log_range) {
    if (!(log_range >= 0.0)) throw ConfigError("sample_gauge: log_range must be >= 0");
    Rng rng(seed);
    Vector values(gc.num_classes(), 1.0);
    for (std::size_t k = 0; k < values.size(); ++k) {
        const double u = rng.uniform(-log_range, log_range);
        if (!gc.class_pinned[k]) values[k] = std::exp(u);
    }
    return assignment_from_classes(gc, values);
}

/// Elementwise product: applying `first` and then `second`.
inline GaugeAssignment compose(const GaugeAssignment& second, const GaugeAssignment& first) {
    if (second.scales.size() != first.scales.size()) throw ShapeError("compose: edge count mismatch");
    GaugeAssignment out = first;
    for (std::size_t id = 0; id < out.scales.size(); ++id) {
        if (second.scales[id].size() != first.scales[id].size()) throw ShapeError("compose: channel mismatch");
        for (std::size_t c = 0; c < out.scales[id].size(); ++c) out.scales[id][c] *= second.scales[id][c];
    }
    return out;
}

inline GaugeAssignment inverse(const GaugeAssignment& s) {
    GaugeAssignment out = s;
    for (auto& v : out.scales) v = reciprocal(v);
    return out;
}

/// Throws ConstraintViolation unless `s` is positive, pinned where required,
/// and constant on every class (relative tolerance 1e-12).
inline void check_gauge(const Network& net, const GaugeClasses& gc, const GaugeAssignment& s) {
    if (s.scales.size() != net.size()) throw ConstraintViolation("gauge has wrong number of edges");
    Vector class_value(gc.num_classes(), 0.0);
    std::vector<bool> seen(gc.num_classes(), false);
    for (std::size_t id = 0; id < net.size(); ++id) {
        if (s.scales[id].size() != gc.channels[id])
            throw ConstraintViolation("gauge for node " + std::to_string(id) + " has wrong channel count");
        for (std::size_t c = 0; c < gc.channels[id]; ++c) {
            const double v = s.scales[id][c];
            if (!(v > 0.0) || !std::isfinite(v))
                throw ConstraintViolation("gauge entries must be positive and finite");
            const auto k = gc.class_id(id, c);
            if (gc.class_pinned[k] && std::abs(v - 1.0) > 1e-12)
                throw ConstraintViolation("node " + std::to_string(id) + " channel " + std::to_string(c) +
                                          " is pinned to identity");
            if (!seen[k]) {
                seen[k] = true;
                class_value[k] = v;
            } else if (std::abs(v - class_value[k]) > 1e-12 * class_value[k]) {
                throw ConstraintViolation("node " + std::to_string(id) + " channel " + std::to_string(c) +
                                          " disagrees with a tied scale");
            }
        }
    }
}

/// Per-entry factors f such that the gauged parameter is f * theta, aligned
/// with Network::parameter_keys(). Gradients transform by 1/f.
inline std::vector<Vector> parameter_gauge_factors(const Network& net, const GaugeAssignment& s) {
    std::vector<Vector> out;
    auto edge_feature_scale = [&](std::size_t id, std::size_t feature) {
        return s.scales[id][feature / net.node(id).shape.spatial()];
    };
    for (auto key : net.parameter_keys()) {
        const Node& nd = net.node(key.node);
        const DiagVec& s_out = s.scales[key.node];
        Vector f;
        if (auto* d = std::get_if<op::Dense>(&nd.spec)) {
            if (key.slot == ParamSlot::weight) {
                f.resize(d->w.size());
                for (std::size_t i = 0; i < d->w.rows(); ++i)
                    for (std::size_t j = 0; j < d->w.cols(); ++j)
                        f[i * d->w.cols() + j] = s_out[i] / edge_feature_scale(nd.inputs[0], j);
            } else {
                f = s_out;
            }
        } else if (auto* cv = std::get_if<op::Conv2d>(&nd.spec)) {
            if (key.slot == ParamSlot::weight) {
                const DiagVec& s_in = s.scales[nd.inputs[0]];
                f.resize(cv->k.size());
                for (std::size_t o = 0; o < cv->k.c_out(); ++o)
                    for (std::size_t i = 0; i < cv->k.c_in(); ++i)
                        for (std::size_t u = 0; u < cv->k.kh(); ++u)
                            for (std::size_t v = 0; v < cv->k.kw(); ++v)
                                f[cv->k.index(o, i, u, v)] = s_out[o] / s_in[i];
            } else {
                f = s_out;
            }
        } else {
            // affine gain: the gain is dimensionless, the shift scales like the output
            f = key.slot == ParamSlot::gain ? Vector(s_out.size(), 1.0) : s_out;
        }
        out.push_back(std::move(f));
    }
    return out;
}

/// Maps every parameter to its gauge-transformed value:
/// W -> S_out W S_in^-1, b -> S_out b, K -> channelwise, gain unchanged, shift -> S c.
inline Network apply_gauge(const Network& net, const GaugeAssignment& s) {
    check_gauge(net, solve_gauge_constraints(net), s);
    Network out = net;
    const auto keys = out.parameter_keys();
    const auto factors = parameter_gauge_factors(net, s);
    for (std::size_t k = 0; k < keys.size(); ++k) {
        auto p = out.param(keys[k]);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] *= factors[k][i];
    }
    return out;
}

} // namespace ucgsd
