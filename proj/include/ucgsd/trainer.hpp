#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "ucgsd/errors.hpp"
#include "ucgsd/eval.hpp"
#include "ucgsd/optim.hpp"
#include "ucgsd/tasks.hpp"

namespace ucgsd {

struct StepRecord {
    std::size_t step = 0;  // 1-based
    double loss = 0.0;     // on the step's batch, before the update
    double grad_norm = 0.0;
};

/// Forward, loss, backward, update. Throws NumericError on a non-finite loss or gradient.
inline StepRecord train_step(Network& net, Optimizer& opt, const Matrix& x, const Matrix& y, std::size_t step) {
    const auto acts = forward(net, x);
    const auto loss = network_loss(net, acts.output(), y);
    if (!std::isfinite(loss.value)) throw NumericError("non-finite loss at step " + std::to_string(step));
    const auto grads = backward_euclidean(net, acts, loss.grad);
    const double gn = grads.norm();
    if (!std::isfinite(gn)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    opt.step(net, grads);
    for (auto k : net.parameter_keys())
        if (!all_finite(net.param(k))) throw NumericError("non-finite parameter after step " + std::to_string(step));
    return {step, loss.value, gn};
}

/// Runs `steps` updates on batches drawn from `schedule`; `on_step` sees the
/// record and the updated network after every step.
inline std::vector<StepRecord> train(Network& net, Optimizer& opt, const Dataset& data, const BatchSchedule& schedule,
                                     std::size_t steps,
                                     const std::function<void(const StepRecord&, const Network&)>& on_step = {}) {
    std::vector<StepRecord> log;
    log.reserve(steps);
    for (std::size_t t = 1; t <= steps; ++t) {
        const auto idx = schedule.indices(t);
        log.push_back(train_step(net, opt, gather_columns(data.inputs, idx), gather_columns(data.targets, idx), t));
        if (on_step) on_step(log.back(), net);
    }
    return log;
}

inline double dataset_loss(const Network& net, const Dataset& data) {
    return network_loss(net, forward(net, data.inputs).output(), data.targets).value;
}

} // namespace ucgsd
