#pragma once
// Paired-trajectory check: train a network and its gauge-transformed twin on
// the same batches and measure how far the twin drifts from the gauge image
// of the original.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "ucgsd/gauge.hpp"
#include "ucgsd/optim.hpp"
#include "ucgsd/parallel.hpp"
#include "ucgsd/text_io.hpp"
#include "ucgsd/trainer.hpp"

namespace ucgsd {

inline constexpr double kDeviationFloor = 1e-30;

struct EquivarianceReport {
    std::vector<double> max_weight_dev;  // per step, max over parameter tensors
    std::vector<double> loss_gap;        // per step, relative
    double max_dev = 0.0;
    double max_loss_gap = 0.0;
    std::string optimizer;
    std::uint64_t gauge_seed = 0;
    /// Either trajectory produced a non-finite value; later steps report +inf.
    bool diverged = false;
};

struct EquivarianceSetup {
    OptimizerConfig optimizer;
    std::size_t steps = 200;
    std::size_t batch_size = 32;
    std::uint64_t data_seed = 0;
    std::uint64_t gauge_seed = 0;  // recorded in the report only
};

namespace detail {

struct Trajectory {
    std::vector<std::vector<Vector>> params;  // per step, per parameter tensor
    std::vector<double> losses;
    std::size_t completed = 0;
};

inline Trajectory run_trajectory(Network net, const Dataset& data, const EquivarianceSetup& setup) {
    Trajectory tr;
    Optimizer opt(setup.optimizer);
    const BatchSchedule schedule(data.size(), setup.batch_size, setup.data_seed);
    const auto keys = net.parameter_keys();
    try {
        for (std::size_t t = 1; t <= setup.steps; ++t) {
            const auto idx = schedule.indices(t);
            const auto rec = train_step(net, opt, gather_columns(data.inputs, idx), gather_columns(data.targets, idx), t);
            tr.losses.push_back(rec.loss);
            std::vector<Vector> snap;
            for (auto k : keys) snap.emplace_back(net.param(k).begin(), net.param(k).end());
            tr.params.push_back(std::move(snap));
            tr.completed = t;
        }
    } catch (const NumericError&) {
    }
    return tr;
}

} // namespace detail

/// Trains `net` and apply_gauge(net, s) in lockstep and reports, per step,
///   max_weight_dev = max over tensors ||theta~ - f * theta||_F / max(||theta||_F, 1e-30)
///   loss_gap       = |L~ - L| / max(|L|, 1e-30)
/// where f are the gauge factors of each parameter. The two runs are
/// independent and may execute on separate threads.
inline EquivarianceReport check_trajectory_equivariance(const Network& net, const GaugeAssignment& s,
                                                        const Dataset& data, const EquivarianceSetup& setup) {
    const Network gauged = apply_gauge(net, s);
    const auto factors = parameter_gauge_factors(net, s);

    detail::Trajectory runs[2];
    parallel_for(2, [&](std::size_t i) { runs[i] = detail::run_trajectory(i == 0 ? net : gauged, data, setup); });
    const auto& base = runs[0];
    const auto& twin = runs[1];

    EquivarianceReport rep;
    rep.optimizer = to_string(setup.optimizer.kind);
    rep.gauge_seed = setup.gauge_seed;
    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < setup.steps; ++t) {
        if (t >= base.completed || t >= twin.completed) {
            rep.diverged = true;
            rep.max_weight_dev.push_back(inf);
            rep.loss_gap.push_back(inf);
            continue;
        }
        double dev = 0.0;
        for (std::size_t k = 0; k < factors.size(); ++k) {
            const auto& a = base.params[t][k];
            const auto& b = twin.params[t][k];
            double diff = 0.0, ref = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double mapped = factors[k][i] * a[i];
                diff += (b[i] - mapped) * (b[i] - mapped);
                ref += a[i] * a[i];
            }
            dev = std::max(dev, std::sqrt(diff) / std::max(std::sqrt(ref), kDeviationFloor));
        }
        const double gap =
            std::abs(twin.losses[t] - base.losses[t]) / std::max(std::abs(base.losses[t]), kDeviationFloor);
        rep.max_weight_dev.push_back(dev);
        rep.loss_gap.push_back(gap);
    }
    for (std::size_t t = 0; t < setup.steps; ++t) {
        rep.max_dev = std::max(rep.max_dev, rep.max_weight_dev[t]);
        rep.max_loss_gap = std::max(rep.max_loss_gap, rep.loss_gap[t]);
        if (std::isnan(rep.max_weight_dev[t])) rep.max_dev = inf;
    }
    return rep;
}

/// CSV: one '#' comment line with provenance, a header, then one row per step.
inline void write_equivariance_csv(std::ostream& out, const EquivarianceReport& rep, const std::string& config_digest) {
    out << "# config_hash=" << config_digest << " optimizer=" << rep.optimizer << " gauge_seed=" << rep.gauge_seed
        << '\n';
    out << "step,max_weight_dev,loss_gap\n";
    for (std::size_t t = 0; t < rep.max_weight_dev.size(); ++t)
        out << (t + 1) << ',' << format_double(rep.max_weight_dev[t]) << ',' << format_double(rep.loss_gap[t]) << '\n';
}

} // namespace ucgsd
