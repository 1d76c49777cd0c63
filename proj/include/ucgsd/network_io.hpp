#pragma once
// Network architecture file (JSON) plus a parameter blob in the matrix/kernel
// text formats.
//
//   {"format": "ucgsd-network", "version": 1, "params": "params.txt",
//    "nodes": [{"kind": "input", "shape": [C, H, W], "inputs": []},
//              {"kind": "dense", "shape": [rows, cols], "bias": true, "inputs": [0]}, ...]}
//
// The parameter file holds one block per trainable tensor in parameter_keys()
// order, each preceded by a "# node <id> <slot>" comment. Dense weights are
// matrices, conv kernels use the kernel format, vectors are 1 x n matrices.

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <variant>

#include <json.hpp>

#include "ucgsd/errors.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/text_io.hpp"

namespace ucgsd {

using json = nlohmann::json;

inline const char* activation_name(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::abs: return "abs";
    }
    return "?";
}

/// Accepts only positively homogeneous activations.
inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "leaky_relu") return Activation::leaky_relu;
    if (s == "abs") return Activation::abs;
    if (s == "sigmoid" || s == "tanh" || s == "softmax" || s == "batchnorm" || s == "layernorm")
        throw ConfigError("'" + s + "' is not positively homogeneous and cannot appear inside the gauged network");
    throw ConfigError("unknown nonlinearity '" + s + "'");
}

inline json network_to_json(const Network& net, const std::string& params_file = "params.txt") {
    json nodes = json::array();
    for (const auto& nd : net.nodes()) {
        json j;
        j["kind"] = kind_name(nd.spec);
        j["inputs"] = nd.inputs;
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, op::Input>) {
                    j["shape"] = {n.shape.channels, n.shape.height, n.shape.width};
                } else if constexpr (std::is_same_v<T, op::Dense>) {
                    j["shape"] = {n.w.rows(), n.w.cols()};
                    j["bias"] = n.b.has_value();
                } else if constexpr (std::is_same_v<T, op::Conv2d>) {
                    j["shape"] = {n.k.c_out(), n.k.c_in(), n.k.kh(), n.k.kw()};
                    j["bias"] = n.b.has_value();
                    j["stride"] = n.stride;
                    j["padding"] = n.padding;
                } else if constexpr (std::is_same_v<T, op::Nonlin>) {
                    j["kind"] = activation_name(n.kind);
                    if (n.kind == Activation::leaky_relu) j["slope"] = n.slope;
                } else if constexpr (std::is_same_v<T, op::Split>) {
                    j["begin"] = n.begin;
                    j["end"] = n.end;
                } else if constexpr (std::is_same_v<T, op::Permute>) {
                    j["perm"] = n.perm;
                } else if constexpr (std::is_same_v<T, op::AffineGain>) {
                    j["shape"] = {n.a.size()};
                }
            },
            nd.spec);
        nodes.push_back(std::move(j));
    }
    return json{{"format", "ucgsd-network"}, {"version", 1}, {"params", params_file}, {"nodes", nodes}};
}

inline void write_params(std::ostream& out, const Network& net) {
    for (auto key : net.parameter_keys()) {
        out << "# node " << key.node << ' ' << to_string(key.slot) << '\n';
        const auto& spec = net.node(key.node).spec;
        if (key.slot == ParamSlot::weight) {
            if (auto* d = std::get_if<op::Dense>(&spec))
                write_matrix(out, d->w);
            else
                write_tensor4(out, std::get<op::Conv2d>(spec).k);
        } else {
            const auto p = net.param(key);
            write_vector(out, Vector(p.begin(), p.end()));
        }
    }
}

namespace detail {

template <class T>
T json_get(const json& j, const char* key) {
    if (!j.contains(key)) throw ConfigError(std::string("network node is missing '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("network node field '") + key + "': " + e.what());
    }
}

} // namespace detail

/// Builds a network from its JSON description, reading parameters from `params`.
inline Network network_from_json(const json& doc, std::istream& params) {
    if (!doc.is_object() || doc.value("format", "") != "ucgsd-network")
        throw ConfigError("not a ucgsd-network description");
    if (doc.value("version", 0) != 1) throw ConfigError("unsupported network description version");
    Network net;
    for (const auto& j : doc.at("nodes")) {
        const auto kind = detail::json_get<std::string>(j, "kind");
        const auto inputs = detail::json_get<std::vector<std::size_t>>(j, "inputs");
        auto one = [&] {
            if (inputs.size() != 1) throw ConfigError(kind + " node needs exactly one input");
            return inputs[0];
        };
        if (kind == "input") {
            const auto s = detail::json_get<std::vector<std::size_t>>(j, "shape");
            if (s.size() != 3) throw ConfigError("input shape must be [C, H, W]");
            net.add_input(Shape{s[0], s[1], s[2]});
        } else if (kind == "dense") {
            const auto s = detail::json_get<std::vector<std::size_t>>(j, "shape");
            if (s.size() != 2) throw ConfigError("dense shape must be [rows, cols]");
            Matrix w = read_matrix(params);
            if (w.rows() != s[0] || w.cols() != s[1]) throw ParseError("dense weight block has wrong shape");
            std::optional<Vector> b;
            if (detail::json_get<bool>(j, "bias")) {
                b = read_vector(params);
            }
            net.add_dense(one(), std::move(w), std::move(b));
        } else if (kind == "conv2d") {
            const auto s = detail::json_get<std::vector<std::size_t>>(j, "shape");
            if (s.size() != 4) throw ConfigError("conv2d shape must be [c_out, c_in, kh, kw]");
            Tensor4 k = read_tensor4(params);
            if (k.c_out() != s[0] || k.c_in() != s[1] || k.kh() != s[2] || k.kw() != s[3])
                throw ParseError("conv kernel block has wrong shape");
            std::optional<Vector> b;
            if (detail::json_get<bool>(j, "bias")) b = read_vector(params);
            net.add_conv2d(one(), std::move(k), std::move(b), detail::json_get<std::size_t>(j, "stride"),
                           detail::json_get<std::size_t>(j, "padding"));
        } else if (kind == "relu" || kind == "leaky_relu" || kind == "abs" || kind == "sigmoid" || kind == "tanh" ||
                   kind == "softmax") {
            const auto act = parse_activation(kind);
            net.add_nonlin(one(), act, j.value("slope", 0.01));
        } else if (kind == "add") {
            if (inputs.size() != 2) throw ConfigError("add node needs two inputs");
            net.add_add(inputs[0], inputs[1]);
        } else if (kind == "concat") {
            net.add_concat(inputs);
        } else if (kind == "split") {
            net.add_split(one(), detail::json_get<std::size_t>(j, "begin"), detail::json_get<std::size_t>(j, "end"));
        } else if (kind == "permute") {
            net.add_permute(one(), detail::json_get<std::vector<std::size_t>>(j, "perm"));
        } else if (kind == "affine_gain") {
            Vector a = read_vector(params);
            Vector c = read_vector(params);
            net.add_affine_gain(one(), std::move(a), std::move(c));
        } else if (kind == "output") {
            net.add_output(one());
        } else if (kind == "softmax_xent_output") {
            net.add_softmax_xent_output(one());
        } else {
            throw ConfigError("unknown node kind '" + kind + "'");
        }
    }
    net.validate();
    return net;
}

/// Writes <dir>/network.json and <dir>/params.txt.
inline void save_network(const Network& net, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "network.json");
        out << network_to_json(net, "params.txt").dump(2) << '\n';
    }
    std::ofstream out(dir / "params.txt");
    write_params(out, net);
}

inline Network load_network(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw ParseError("cannot open " + json_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("network description: ") + e.what());
    }
    const auto params_path = json_path.parent_path() / doc.value("params", std::string("params.txt"));
    std::ifstream params(params_path);
    if (!params) throw ParseError("cannot open " + params_path.string());
    return network_from_json(doc, params);
}

} // namespace ucgsd
