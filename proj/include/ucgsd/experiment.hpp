#pragma once
// Experiment configs and the CLI subcommands built on top of the library.
//
// Every command returns a process exit code: 0 ok, 2 config/parse error,
// 3 degenerate input, 4 numeric failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ucgsd/canon.hpp"
#include "ucgsd/equivariance.hpp"
#include "ucgsd/errors.hpp"
#include "ucgsd/eval.hpp"
#include "ucgsd/gauge.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/network_io.hpp"
#include "ucgsd/optim.hpp"
#include "ucgsd/parallel.hpp"
#include "ucgsd/rng.hpp"
#include "ucgsd/tasks.hpp"
#include "ucgsd/text_io.hpp"
#include "ucgsd/trainer.hpp"

namespace ucgsd {

enum ExitCode : int { exit_ok = 0, exit_config = 2, exit_degenerate = 3, exit_numeric = 4 };

struct ConvStemConfig {
    std::size_t in_channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

enum class OutputKind { mse, softmax_xent };

struct ArchitectureConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 0;
    Activation nonlinearity = Activation::relu;
    double leaky_slope = 0.01;
    bool residual = false;
    bool bias = false;
    bool affine_gain = false;
    std::optional<ConvStemConfig> conv_stem;
    OutputKind output = OutputKind::mse;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    TaskKind task = TaskKind::synthetic_regression;
    ArchitectureConfig architecture;
    OptimizerConfig optimizer;
    std::size_t steps = 0;
    std::size_t batch_size = 32;
    double log_range = 0.0;
    std::string out_dir = "out";
    std::size_t dataset_size = 256;
    std::size_t teacher_width = 16;
    std::optional<std::uint64_t> gauge_seed;

    std::uint64_t effective_gauge_seed() const { return gauge_seed ? *gauge_seed : mix_seed(seed, 5); }
};

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || item.key() == a;
        if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
}

template <class T>
T cfg_get(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError("missing key '" + std::string(key) + "' in " + where);
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

template <class T>
T cfg_get_or(const json& j, const char* key, T fallback, const std::string& where) {
    return j.contains(key) ? cfg_get<T>(j, key, where) : fallback;
}

inline std::size_t positive(std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
    return v;
}

} // namespace detail

inline ArchitectureConfig parse_architecture(const json& j) {
    const std::string where = "architecture";
    detail::reject_unknown_keys(j,
                                {"input_dim", "hidden", "output_dim", "nonlinearity", "leaky_slope", "residual", "bias",
                                 "affine_gain", "conv_stem", "output"},
                                where);
    ArchitectureConfig a;
    a.hidden = detail::cfg_get_or<std::vector<std::size_t>>(j, "hidden", {}, where);
    for (auto h : a.hidden) detail::positive(h, "hidden layer width");
    a.output_dim = detail::positive(detail::cfg_get<std::size_t>(j, "output_dim", where), "output_dim");
    a.nonlinearity = parse_activation(detail::cfg_get_or<std::string>(j, "nonlinearity", "relu", where));
    a.leaky_slope = detail::cfg_get_or<double>(j, "leaky_slope", 0.01, where);
    if (!(a.leaky_slope >= 0.0)) throw ConfigError("leaky_slope must be >= 0");
    a.residual = detail::cfg_get_or<bool>(j, "residual", false, where);
    a.bias = detail::cfg_get_or<bool>(j, "bias", false, where);
    a.affine_gain = detail::cfg_get_or<bool>(j, "affine_gain", false, where);
    const auto out = detail::cfg_get_or<std::string>(j, "output", "mse", where);
    if (out == "mse")
        a.output = OutputKind::mse;
    else if (out == "softmax_xent")
        a.output = OutputKind::softmax_xent;
    else
        throw ConfigError("unknown output '" + out + "' (mse | softmax_xent)");

    if (j.contains("conv_stem") && !j.at("conv_stem").is_null()) {
        const auto& c = j.at("conv_stem");
        const std::string w = "architecture.conv_stem";
        detail::reject_unknown_keys(c, {"in_channels", "height", "width", "channels", "kernel", "stride", "padding"}, w);
        ConvStemConfig s;
        s.in_channels = detail::positive(detail::cfg_get<std::size_t>(c, "in_channels", w), "conv in_channels");
        s.height = detail::positive(detail::cfg_get<std::size_t>(c, "height", w), "conv height");
        s.width = detail::positive(detail::cfg_get<std::size_t>(c, "width", w), "conv width");
        s.channels = detail::positive(detail::cfg_get<std::size_t>(c, "channels", w), "conv channels");
        s.kernel = detail::positive(detail::cfg_get<std::size_t>(c, "kernel", w), "conv kernel");
        s.stride = detail::positive(detail::cfg_get_or<std::size_t>(c, "stride", 1, w), "conv stride");
        s.padding = detail::cfg_get_or<std::size_t>(c, "padding", 0, w);
        a.conv_stem = s;
        const std::size_t flat = s.in_channels * s.height * s.width;
        a.input_dim = detail::cfg_get_or<std::size_t>(j, "input_dim", flat, where);
        if (a.input_dim != flat) throw ConfigError("input_dim must equal in_channels * height * width of the conv stem");
    } else {
        a.input_dim = detail::positive(detail::cfg_get<std::size_t>(j, "input_dim", where), "input_dim");
    }
    return a;
}

inline OptimizerConfig parse_optimizer(const json& j) {
    const std::string where = "optimizer";
    detail::reject_unknown_keys(j, {"kind", "eta", "mu", "beta1", "beta2", "eps_adam", "refresh", "project"}, where);
    OptimizerConfig o;
    o.kind = parse_optimizer_kind(detail::cfg_get<std::string>(j, "kind", where));
    o.eta = detail::cfg_get_or<double>(j, "eta", o.eta, where);
    o.mu = detail::cfg_get_or<double>(j, "mu", o.mu, where);
    o.beta1 = detail::cfg_get_or<double>(j, "beta1", o.beta1, where);
    o.beta2 = detail::cfg_get_or<double>(j, "beta2", o.beta2, where);
    o.eps_adam = detail::cfg_get_or<double>(j, "eps_adam", o.eps_adam, where);
    o.refresh = parse_refresh_policy(detail::cfg_get_or<std::string>(j, "refresh", "PerStep", where));
    o.project = detail::cfg_get_or<bool>(j, "project", false, where);
    o.validate();
    return o;
}

inline ExperimentConfig parse_experiment_config(const json& j) {
    const std::string where = "config";
    detail::reject_unknown_keys(j,
                                {"seed", "task", "architecture", "optimizer", "steps", "batch_size", "log_range",
                                 "out_dir", "dataset_size", "teacher_width", "gauge_seed"},
                                where);
    ExperimentConfig c;
    c.seed = detail::cfg_get<std::uint64_t>(j, "seed", where);
    c.task = parse_task_kind(detail::cfg_get<std::string>(j, "task", where));
    if (!j.contains("architecture")) throw ConfigError("missing key 'architecture' in config");
    c.architecture = parse_architecture(j.at("architecture"));
    if (!j.contains("optimizer")) throw ConfigError("missing key 'optimizer' in config");
    c.optimizer = parse_optimizer(j.at("optimizer"));
    c.steps = detail::cfg_get<std::size_t>(j, "steps", where);
    c.batch_size = detail::positive(detail::cfg_get<std::size_t>(j, "batch_size", where), "batch_size");
    c.log_range = detail::cfg_get_or<double>(j, "log_range", 0.0, where);
    if (!(c.log_range >= 0.0)) throw ConfigError("log_range must be >= 0");
    c.out_dir = detail::cfg_get_or<std::string>(j, "out_dir", "out", where);
    c.dataset_size = detail::positive(detail::cfg_get_or<std::size_t>(j, "dataset_size", 256, where), "dataset_size");
    c.teacher_width = detail::positive(detail::cfg_get_or<std::size_t>(j, "teacher_width", 16, where), "teacher_width");
    if (j.contains("gauge_seed")) c.gauge_seed = detail::cfg_get<std::uint64_t>(j, "gauge_seed", where);

    if (c.task == TaskKind::two_moons) {
        if (c.architecture.input_dim != 2) throw ConfigError("TwoMoons needs input_dim 2");
        if (c.architecture.output_dim != 2) throw ConfigError("TwoMoons needs output_dim 2");
        if (c.dataset_size < 2) throw ConfigError("TwoMoons needs dataset_size >= 2");
    } else if (c.architecture.output == OutputKind::softmax_xent) {
        throw ConfigError("softmax_xent output needs a classification task (TwoMoons)");
    }
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_experiment_config(j);
}

/// Every field with defaults filled in, excluding the output directory.
inline json effective_config_json(const ExperimentConfig& c) {
    const auto& a = c.architecture;
    json arch = {{"input_dim", a.input_dim},
                 {"hidden", a.hidden},
                 {"output_dim", a.output_dim},
                 {"nonlinearity", activation_name(a.nonlinearity)},
                 {"leaky_slope", a.leaky_slope},
                 {"residual", a.residual},
                 {"bias", a.bias},
                 {"affine_gain", a.affine_gain},
                 {"output", a.output == OutputKind::mse ? "mse" : "softmax_xent"}};
    if (a.conv_stem) {
        const auto& s = *a.conv_stem;
        arch["conv_stem"] = {{"in_channels", s.in_channels}, {"height", s.height},   {"width", s.width},
                             {"channels", s.channels},       {"kernel", s.kernel},   {"stride", s.stride},
                             {"padding", s.padding}};
    }
    const auto& o = c.optimizer;
    json opt = {{"kind", to_string(o.kind)}, {"eta", o.eta},           {"mu", o.mu},
                {"beta1", o.beta1},          {"beta2", o.beta2},       {"eps_adam", o.eps_adam},
                {"refresh", to_string(o.refresh)}, {"project", o.project}};
    return json{{"seed", c.seed},
                {"task", to_string(c.task)},
                {"architecture", arch},
                {"optimizer", opt},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"log_range", c.log_range},
                {"dataset_size", c.dataset_size},
                {"teacher_width", c.teacher_width},
                {"gauge_seed", c.effective_gauge_seed()}};
}

/// 64-bit FNV-1a of the compact effective-config dump, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string text = effective_config_json(c).dump();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Builds the described network with seeded He-normal weights. Biases, gains
/// and shifts start small and nonzero.
inline Network build_network(const ArchitectureConfig& a, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 11));
    auto small_vector = [&](std::size_t n) {
        Vector v(n);
        for (auto& x : v) x = rng.normal(0.0, 0.1);
        return v;
    };
    auto maybe_bias = [&](std::size_t n) { return a.bias ? std::optional<Vector>(small_vector(n)) : std::nullopt; };
    Network net;
    std::size_t prev;
    auto nonlin = [&](std::size_t in) {
        std::size_t id = net.add_nonlin(in, a.nonlinearity, a.leaky_slope);
        if (a.affine_gain) {
            const std::size_t ch = net.node(id).shape.channels;
            Vector gain(ch);
            for (auto& g : gain) g = 1.0 + rng.normal(0.0, 0.1);
            id = net.add_affine_gain(id, std::move(gain), small_vector(ch));
        }
        return id;
    };

    if (a.conv_stem) {
        const auto& s = *a.conv_stem;
        prev = net.add_input(Shape{s.in_channels, s.height, s.width});
        prev = net.add_conv2d(prev, he_normal_kernel(s.channels, s.in_channels, s.kernel, s.kernel, rng),
                              maybe_bias(s.channels), s.stride, s.padding);
        prev = nonlin(prev);
    } else {
        prev = net.add_input(Shape{a.input_dim, 1, 1});
    }
    std::size_t width = net.node(prev).shape.size();
    for (std::size_t i = 0; i < a.hidden.size(); ++i) {
        const std::size_t h = a.hidden[i];
        if (a.residual && i > 0 && h == width) {
            // x + Dense_b(phi(Dense_a(x)))
            std::size_t branch = net.add_dense(prev, he_normal(h, width, rng), maybe_bias(h));
            branch = nonlin(branch);
            branch = net.add_dense(branch, he_normal(h, h, rng), maybe_bias(h));
            prev = net.add_add(prev, branch);
        } else {
            prev = net.add_dense(prev, he_normal(h, width, rng), maybe_bias(h));
            prev = nonlin(prev);
        }
        width = h;
    }
    prev = net.add_dense(prev, he_normal(a.output_dim, width, rng), maybe_bias(a.output_dim));
    if (a.output == OutputKind::softmax_xent)
        net.add_softmax_xent_output(prev);
    else
        net.add_output(prev);
    net.validate();
    return net;
}

inline Dataset make_dataset(const ExperimentConfig& c) {
    if (c.task == TaskKind::two_moons) return make_two_moons(c.dataset_size);
    return make_synthetic_regression(c.architecture.input_dim, c.architecture.output_dim, c.teacher_width,
                                     c.dataset_size, mix_seed(c.seed, 1));
}

// ---------------------------------------------------------------------------
// Subcommands

struct CommandOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<double> tol;
    std::size_t max_iter = kDefaultBalanceMaxIter;
    bool corrupt_gradient = false;  // gradcheck fault injection
};

namespace detail {

inline ExperimentConfig resolve_config(const CommandOptions& opt) {
    ExperimentConfig c = load_experiment_config(opt.config_path);
    if (opt.seed) c.seed = *opt.seed;
    if (opt.out_dir) c.out_dir = *opt.out_dir;
    return c;
}

inline std::ofstream open_output(const std::filesystem::path& dir, const char* name) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + (dir / name).string());
    return out;
}

/// Maps library exceptions onto exit codes.
template <class F>
int run_guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << '\n';
        return exit_config;
    } catch (const DegenerateInputError& e) {
        err << "degenerate input: " << e.what() << '\n';
        return exit_degenerate;
    } catch (const ConvergenceError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return exit_numeric;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return exit_numeric;
    } catch (const ShapeError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const UnsupportedStructure& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_numeric;
    }
}

} // namespace detail

/// Canonicalizes the matrix in `input_path`; prints D, W', E and a summary line.
/// With an output directory the same text also goes to <out>/canon.txt.
inline int cmd_canon(const std::string& input_path, const CommandOptions& opt, std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        std::ifstream in(input_path);
        if (!in) throw ParseError("cannot open " + input_path);
        const Matrix w = read_matrix(in);
        const auto dec = rz_canonicalize(w, opt.tol.value_or(kDefaultBalanceTol), opt.max_iter);
        std::ostringstream text;
        write_vector(text, dec.d);
        write_matrix(text, dec.wp);
        write_vector(text, dec.e);
        text << "residual=" << format_double(dec.residual) << " iters=" << dec.iterations << '\n';
        out << text.str();
        if (opt.out_dir) detail::open_output(*opt.out_dir, "canon.txt") << text.str();
        return int(exit_ok);
    });
}

/// Trains the configured network; writes train.csv and the final parameters.
inline int cmd_train(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        const auto cfg = detail::resolve_config(opt);
        const auto data = make_dataset(cfg);
        Network net = build_network(cfg.architecture, cfg.seed);
        Optimizer optimizer(cfg.optimizer);
        const BatchSchedule schedule(data.size(), cfg.batch_size, mix_seed(cfg.seed, 3));

        auto csv = detail::open_output(cfg.out_dir, "train.csv");
        csv << "# config_hash=" << config_hash(cfg) << '\n' << "step,loss,grad_norm\n";
        const double initial = dataset_loss(net, data);
        try {
            train(net, optimizer, data, schedule, cfg.steps, [&](const StepRecord& r, const Network&) {
                csv << r.step << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm) << '\n';
            });
        } catch (const NumericError&) {
            csv.flush();
            throw;
        }
        save_network(net, cfg.out_dir);
        out << "initial_loss=" << format_double(initial) << " final_loss=" << format_double(dataset_loss(net, data))
            << " steps=" << cfg.steps << '\n';
        return int(exit_ok);
    });
}

/// Paired-trajectory check under one sampled gauge; writes equiv.csv.
inline int cmd_equivariance(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        const auto cfg = detail::resolve_config(opt);
        const auto data = make_dataset(cfg);
        const Network net = build_network(cfg.architecture, cfg.seed);
        const auto classes = solve_gauge_constraints(net);
        const auto s = sample_gauge(classes, cfg.effective_gauge_seed(), cfg.log_range);
        EquivarianceSetup setup{cfg.optimizer, cfg.steps, cfg.batch_size, mix_seed(cfg.seed, 3),
                                cfg.effective_gauge_seed()};
        const auto rep = check_trajectory_equivariance(net, s, data, setup);
        auto csv = detail::open_output(cfg.out_dir, "equiv.csv");
        write_equivariance_csv(csv, rep, config_hash(cfg));

        const std::string summary =
            "max_weight_dev=" + format_double(rep.max_dev) + " loss_gap=" + format_double(rep.max_loss_gap);
        if (is_unit_consistent(cfg.optimizer.kind)) {
            if (rep.diverged) {
                err << "numeric failure: training diverged\n";
                return int(exit_numeric);
            }
            const bool pass = rep.max_dev <= 1e-6;
            out << (pass ? "PASS " : "FAIL ") << to_string(cfg.optimizer.kind) << ' ' << summary << '\n';
            return pass ? int(exit_ok) : int(exit_numeric);
        }
        out << "baseline " << to_string(cfg.optimizer.kind) << ' ' << summary
            << (rep.diverged ? " (diverged)" : "") << " (equivariance not expected)\n";
        return int(exit_ok);
    });
}

/// Compares backward_euclidean with central differences at 10 seeded
/// evaluation points; flagged points (near a kink) are skipped.
inline int cmd_gradcheck(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        constexpr std::size_t replicas = 10;
        constexpr double h = 1e-5, threshold = 1e-5;
        const auto cfg = detail::resolve_config(opt);
        const auto data = make_dataset(cfg);

        struct Row {
            double err = 0.0;
            bool flagged = false;
        };
        std::vector<Row> rows(replicas);
        parallel_for(replicas, [&](std::size_t r) {
            const Network net = build_network(cfg.architecture, mix_seed(cfg.seed, 100 + r));
            const BatchSchedule pick(data.size(), cfg.batch_size, mix_seed(cfg.seed, 200 + r));
            const auto idx = pick.indices(1);
            const Matrix x = gather_columns(data.inputs, idx), y = gather_columns(data.targets, idx);
            const auto acts = forward(net, x);
            auto analytic = backward_euclidean(net, acts, network_loss(net, acts.output(), y).grad);
            if (opt.corrupt_gradient) analytic.values[0][0] += 1e-3 * (std::abs(analytic.values[0][0]) + 1.0);
            const auto fd = finite_diff_grad(net, x, y, h);
            rows[r] = {fd.flagged ? 0.0 : max_relative_error(analytic, fd.grads), fd.flagged};
        });

        auto csv = detail::open_output(cfg.out_dir, "gradcheck.csv");
        csv << "# config_hash=" << config_hash(cfg) << '\n' << "replica,max_rel_err,flagged\n";
        double worst = 0.0;
        std::size_t used = 0;
        for (std::size_t r = 0; r < replicas; ++r) {
            csv << r << ',' << format_double(rows[r].err) << ',' << (rows[r].flagged ? 1 : 0) << '\n';
            if (rows[r].flagged) continue;
            ++used;
            worst = std::max(worst, rows[r].err);
        }
        if (used == 0) {
            out << "FAIL every evaluation point is within the kink margin\n";
            return int(exit_numeric);
        }
        const bool pass = worst <= threshold;
        out << (pass ? "PASS" : "FAIL") << " max_rel_err=" << format_double(worst) << " points=" << used << '/'
            << replicas << '\n';
        return pass ? int(exit_ok) : int(exit_numeric);
    });
}

} // namespace ucgsd
