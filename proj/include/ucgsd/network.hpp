#pragma once
// Network DAG: typed nodes in topological order, each producing one tensor.
//
// Tensors are stored feature-major with the batch along columns: a value of
// shape (C, H, W) for a batch of N samples is a (C*H*W) x N matrix, feature
// index c*H*W + y*W + x. Gauge scales act per channel and broadcast over the
// spatial positions.

#include <cmath>
#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ucgsd/errors.hpp"
#include "ucgsd/rng.hpp"
#include "ucgsd/tensor.hpp"

namespace ucgsd {

struct Shape {
    std::size_t channels = 0;
    std::size_t height = 1;
    std::size_t width = 1;

    std::size_t spatial() const noexcept { return height * width; }
    std::size_t size() const noexcept { return channels * height * width; }
    bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
    return "(" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," +
           std::to_string(s.width) + ")";
}

/// Positively homogeneous (degree 1) elementwise nonlinearities. Nothing else is
/// allowed inside the gauged part of a network.
enum class Activation { relu, leaky_relu, abs };

namespace op {

struct Input {
    Shape shape;
};
/// y = W x (+ b). Consumes the producer's flattened features.
struct Dense {
    Matrix w;
    std::optional<Vector> b;
};
struct Conv2d {
    Tensor4 k;
    std::optional<Vector> b;
    std::size_t stride = 1;
    std::size_t padding = 0;
};
struct Nonlin {
    Activation kind = Activation::relu;
    double slope = 0.01;  // leaky_relu only
};
struct Add {};
/// Channel concatenation of all inputs (equal spatial extent).
struct Concat {};
/// Channel range [begin, end) of the input. A k-way split is k Split nodes.
struct Split {
    std::size_t begin = 0;
    std::size_t end = 0;
};
/// Output channel c is input channel perm[c].
struct Permute {
    std::vector<std::size_t> perm;
};
/// y = a * x + c per channel.
struct AffineGain {
    Vector a;
    Vector c;
};
/// Terminal node scored by squared error.
struct Output {};
/// Terminal node scored by softmax cross-entropy; its input holds logits.
struct SoftmaxXentOutput {};

} // namespace op

using NodeSpec = std::variant<op::Input, op::Dense, op::Conv2d, op::Nonlin, op::Add,
                              op::Concat, op::Split, op::Permute, op::AffineGain,
                              op::Output, op::SoftmaxXentOutput>;

struct Node {
    NodeSpec spec;
    std::vector<std::size_t> inputs;
    Shape shape;  // output shape
};

enum class ParamSlot { weight, bias, gain, shift };

inline const char* to_string(ParamSlot s) {
    switch (s) {
    case ParamSlot::weight: return "weight";
    case ParamSlot::bias: return "bias";
    case ParamSlot::gain: return "gain";
    case ParamSlot::shift: return "shift";
    }
    return "?";
}

struct ParamKey {
    std::size_t node = 0;
    ParamSlot slot = ParamSlot::weight;
    auto operator<=>(const ParamKey&) const = default;
};

inline double apply_activation(Activation kind, double slope, double z) {
    switch (kind) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::leaky_relu: return z > 0.0 ? z : slope * z;
    case Activation::abs: return z >= 0.0 ? z : -z;
    }
    return z;
}

/// Derivative; 0 at the kink for relu, slope for leaky_relu, 0 for abs.
inline double activation_derivative(Activation kind, double slope, double z) {
    switch (kind) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::leaky_relu: return z > 0.0 ? 1.0 : slope;
    case Activation::abs: return z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0);
    }
    return 1.0;
}

inline bool is_terminal(const NodeSpec& s) {
    return std::holds_alternative<op::Output>(s) || std::holds_alternative<op::SoftmaxXentOutput>(s);
}

inline const char* kind_name(const NodeSpec& s) {
    static constexpr const char* names[] = {"input", "dense",  "conv2d",      "nonlin",
                                            "add",   "concat", "split",       "permute",
                                            "affine_gain", "output", "softmax_xent_output"};
    return names[s.index()];
}

class Network {
public:
    std::size_t add_input(Shape shape) { return add(op::Input{shape}, {}); }

    std::size_t add_dense(std::size_t in, Matrix w, std::optional<Vector> b = std::nullopt) {
        return add(op::Dense{std::move(w), std::move(b)}, {in});
    }

    std::size_t add_conv2d(std::size_t in, Tensor4 k, std::optional<Vector> b = std::nullopt,
                           std::size_t stride = 1, std::size_t padding = 0) {
        return add(op::Conv2d{std::move(k), std::move(b), stride, padding}, {in});
    }

    std::size_t add_nonlin(std::size_t in, Activation kind = Activation::relu, double slope = 0.01) {
        return add(op::Nonlin{kind, slope}, {in});
    }

    std::size_t add_add(std::size_t left, std::size_t right) { return add(op::Add{}, {left, right}); }

    std::size_t add_concat(std::vector<std::size_t> parts) { return add(op::Concat{}, std::move(parts)); }

    std::size_t add_split(std::size_t in, std::size_t begin, std::size_t end) {
        return add(op::Split{begin, end}, {in});
    }

    std::size_t add_permute(std::size_t in, std::vector<std::size_t> perm) {
        return add(op::Permute{std::move(perm)}, {in});
    }

    std::size_t add_affine_gain(std::size_t in, Vector a, Vector c) {
        return add(op::AffineGain{std::move(a), std::move(c)}, {in});
    }

    std::size_t add_output(std::size_t in) { return add(op::Output{}, {in}); }

    std::size_t add_softmax_xent_output(std::size_t in) { return add(op::SoftmaxXentOutput{}, {in}); }

    /// Appends a node after checking its inputs and parameter shapes.
    std::size_t add(NodeSpec spec, std::vector<std::size_t> inputs) {
        for (auto in : inputs) {
            if (in >= nodes_.size())
                throw ShapeError("node input " + std::to_string(in) + " does not exist yet");
            if (is_terminal(nodes_[in].spec))
                throw ShapeError("terminal node " + std::to_string(in) + " cannot feed other nodes");
        }
        Shape shape = infer_shape(spec, inputs);
        nodes_.push_back(Node{std::move(spec), std::move(inputs), shape});
        return nodes_.size() - 1;
    }

    /// Checks the whole-graph invariants: one Input, one terminal node, placed last.
    void validate() const {
        std::size_t inputs = 0, terminals = 0;
        for (const auto& n : nodes_) {
            inputs += std::holds_alternative<op::Input>(n.spec);
            terminals += is_terminal(n.spec);
        }
        if (inputs != 1) throw ShapeError("network needs exactly one input node");
        if (terminals != 1 || !is_terminal(nodes_.back().spec))
            throw ShapeError("network needs exactly one terminal output node, placed last");
    }

    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    const Node& node(std::size_t id) const { return nodes_.at(id); }
    Node& node(std::size_t id) { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    std::size_t input_id() const {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (std::holds_alternative<op::Input>(nodes_[i].spec)) return i;
        throw ShapeError("network has no input node");
    }

    std::size_t output_id() const {
        validate();
        return nodes_.size() - 1;
    }

    const Shape& input_shape() const { return nodes_[input_id()].shape; }
    const Shape& output_shape() const { return nodes_[output_id()].shape; }

    /// Every trainable tensor, ordered by node then slot.
    std::vector<ParamKey> parameter_keys() const {
        std::vector<ParamKey> keys;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& s = nodes_[i].spec;
            if (auto* d = std::get_if<op::Dense>(&s)) {
                keys.push_back({i, ParamSlot::weight});
                if (d->b) keys.push_back({i, ParamSlot::bias});
            } else if (auto* c = std::get_if<op::Conv2d>(&s)) {
                keys.push_back({i, ParamSlot::weight});
                if (c->b) keys.push_back({i, ParamSlot::bias});
            } else if (std::holds_alternative<op::AffineGain>(s)) {
                keys.push_back({i, ParamSlot::gain});
                keys.push_back({i, ParamSlot::shift});
            }
        }
        return keys;
    }

    std::span<double> param(ParamKey key) {
        auto r = const_cast<const Network*>(this)->param(key);
        return {const_cast<double*>(r.data()), r.size()};
    }

    std::span<const double> param(ParamKey key) const {
        const auto& s = nodes_.at(key.node).spec;
        if (auto* d = std::get_if<op::Dense>(&s)) {
            if (key.slot == ParamSlot::weight) return d->w.data();
            if (key.slot == ParamSlot::bias && d->b) return *d->b;
        } else if (auto* c = std::get_if<op::Conv2d>(&s)) {
            if (key.slot == ParamSlot::weight) return c->k.data();
            if (key.slot == ParamSlot::bias && c->b) return *c->b;
        } else if (auto* g = std::get_if<op::AffineGain>(&s)) {
            if (key.slot == ParamSlot::gain) return g->a;
            if (key.slot == ParamSlot::shift) return g->c;
        }
        throw ShapeError("node " + std::to_string(key.node) + " has no " + to_string(key.slot) +
                         " parameter");
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (auto k : parameter_keys()) n += param(k).size();
        return n;
    }

private:
    Shape infer_shape(const NodeSpec& spec, const std::vector<std::size_t>& inputs) const {
        auto want_inputs = [&](std::size_t n) {
            if (inputs.size() != n)
                throw ShapeError(std::string(kind_name(spec)) + " node expects " + std::to_string(n) +
                                 " input(s), got " + std::to_string(inputs.size()));
        };
        auto in_shape = [&](std::size_t k) { return nodes_[inputs[k]].shape; };

        return std::visit(
            [&](const auto& n) -> Shape {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, op::Input>) {
                    want_inputs(0);
                    if (n.shape.size() == 0) throw ShapeError("input shape must be non-empty");
                    return n.shape;
                } else if constexpr (std::is_same_v<T, op::Dense>) {
                    want_inputs(1);
                    if (n.w.cols() != in_shape(0).size())
                        throw ShapeError("dense weight has " + std::to_string(n.w.cols()) +
                                         " columns but input has " + std::to_string(in_shape(0).size()) +
                                         " features");
                    if (n.w.rows() == 0) throw ShapeError("dense weight has no rows");
                    if (n.b && n.b->size() != n.w.rows()) throw ShapeError("dense bias length mismatch");
                    return Shape{n.w.rows(), 1, 1};
                } else if constexpr (std::is_same_v<T, op::Conv2d>) {
                    want_inputs(1);
                    const Shape s = in_shape(0);
                    if (n.k.c_in() != s.channels) throw ShapeError("conv input channel mismatch");
                    if (n.stride == 0) throw ShapeError("conv stride must be positive");
                    if (n.b && n.b->size() != n.k.c_out()) throw ShapeError("conv bias length mismatch");
                    const std::size_t ph = s.height + 2 * n.padding, pw = s.width + 2 * n.padding;
                    if (n.k.kh() == 0 || n.k.kw() == 0 || n.k.kh() > ph || n.k.kw() > pw)
                        throw ShapeError("conv kernel larger than padded input");
                    return Shape{n.k.c_out(), (ph - n.k.kh()) / n.stride + 1, (pw - n.k.kw()) / n.stride + 1};
                } else if constexpr (std::is_same_v<T, op::Nonlin>) {
                    want_inputs(1);
                    if (n.kind == Activation::leaky_relu && !(n.slope >= 0.0))
                        throw ShapeError("leaky_relu slope must be >= 0");
                    return in_shape(0);
                } else if constexpr (std::is_same_v<T, op::Add>) {
                    want_inputs(2);
                    if (!(in_shape(0) == in_shape(1)))
                        throw ShapeError("add operands differ: " + to_string(in_shape(0)) + " vs " +
                                         to_string(in_shape(1)));
                    return in_shape(0);
                } else if constexpr (std::is_same_v<T, op::Concat>) {
                    if (inputs.empty()) throw ShapeError("concat needs at least one input");
                    Shape out = in_shape(0);
                    out.channels = 0;
                    for (std::size_t k = 0; k < inputs.size(); ++k) {
                        const Shape s = in_shape(k);
                        if (s.height != out.height || s.width != out.width)
                            throw ShapeError("concat parts differ in spatial extent");
                        out.channels += s.channels;
                    }
                    return out;
                } else if constexpr (std::is_same_v<T, op::Split>) {
                    want_inputs(1);
                    Shape s = in_shape(0);
                    if (n.begin >= n.end || n.end > s.channels)
                        throw ShapeError("split range out of bounds");
                    s.channels = n.end - n.begin;
                    return s;
                } else if constexpr (std::is_same_v<T, op::Permute>) {
                    want_inputs(1);
                    const Shape s = in_shape(0);
                    if (n.perm.size() != s.channels) throw ShapeError("permutation length mismatch");
                    std::vector<bool> seen(n.perm.size(), false);
                    for (auto p : n.perm) {
                        if (p >= n.perm.size() || seen[p]) throw ShapeError("not a permutation");
                        seen[p] = true;
                    }
                    return s;
                } else if constexpr (std::is_same_v<T, op::AffineGain>) {
                    want_inputs(1);
                    const Shape s = in_shape(0);
                    if (n.a.size() != s.channels || n.c.size() != s.channels)
                        throw ShapeError("affine gain length mismatch");
                    return s;
                } else {
                    want_inputs(1);
                    return in_shape(0);
                }
            },
            spec);
    }

    std::vector<Node> nodes_;
};

/// Zero-mean Gaussian with variance 2 / fan_in.
inline Matrix he_normal(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix w(rows, cols);
    const double sd = std::sqrt(2.0 / static_cast<double>(cols));
    for (auto& x : w.data()) x = rng.normal(0.0, sd);
    return w;
}

inline Tensor4 he_normal_kernel(std::size_t c_out, std::size_t c_in, std::size_t kh, std::size_t kw,
                                Rng& rng) {
    Tensor4 k(c_out, c_in, kh, kw);
    const double sd = std::sqrt(2.0 / static_cast<double>(c_in * kh * kw));
    for (auto& x : k.data()) x = rng.normal(0.0, sd);
    return k;
}

} // namespace ucgsd
