#pragma once
// Seeded toy datasets and the shared mini-batch schedule.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "ucgsd/errors.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/rng.hpp"
#include "ucgsd/tensor.hpp"

namespace ucgsd {

enum class TaskKind { synthetic_regression, two_moons };

inline const char* to_string(TaskKind t) {
    return t == TaskKind::synthetic_regression ? "SyntheticRegression" : "TwoMoons";
}

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "SyntheticRegression") return TaskKind::synthetic_regression;
    if (s == "TwoMoons") return TaskKind::two_moons;
    throw ConfigError("unknown task '" + s + "'");
}

/// Column-per-sample inputs and targets.
struct Dataset {
    Matrix inputs;
    Matrix targets;

    std::size_t size() const noexcept { return inputs.cols(); }
};

/// y = A * relu(B * x) with x ~ N(0, I) and He-initialized teacher weights.
inline Dataset make_synthetic_regression(std::size_t in_dim, std::size_t out_dim, std::size_t teacher_width,
                                         std::size_t n, std::uint64_t seed) {
    if (in_dim == 0 || out_dim == 0 || teacher_width == 0 || n == 0)
        throw ConfigError("synthetic regression needs positive sizes");
    Rng rng(mix_seed(seed, 101));
    const Matrix b = he_normal(teacher_width, in_dim, rng);
    const Matrix a = he_normal(out_dim, teacher_width, rng);
    Dataset ds{Matrix(in_dim, n), Matrix(out_dim, n)};
    for (auto& v : ds.inputs.data()) v = rng.normal();
    Matrix h = matmul(b, ds.inputs);
    for (auto& v : h.data()) v = v > 0.0 ? v : 0.0;
    ds.targets = matmul(a, h);
    return ds;
}

/// Two interleaved half circles, one-hot labels, no noise. Points are evenly
/// spaced along each moon; odd counts put the extra point on the first moon.
inline Dataset make_two_moons(std::size_t n) {
    if (n < 2) throw ConfigError("two moons needs at least 2 samples");
    const std::size_t upper = (n + 1) / 2, lower = n - upper;
    Dataset ds{Matrix(2, n), Matrix(2, n)};
    auto angle = [](std::size_t i, std::size_t count) {
        return count > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
    };
    for (std::size_t i = 0; i < upper; ++i) {
        const double t = angle(i, upper);
        ds.inputs(0, i) = std::cos(t);
        ds.inputs(1, i) = std::sin(t);
        ds.targets(0, i) = 1.0;
    }
    for (std::size_t i = 0; i < lower; ++i) {
        const double t = angle(i, lower);
        ds.inputs(0, upper + i) = 1.0 - std::cos(t);
        ds.inputs(1, upper + i) = 0.5 - std::sin(t);
        ds.targets(1, upper + i) = 1.0;
    }
    return ds;
}

inline Matrix gather_columns(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(m.rows(), idx.size());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < idx.size(); ++c) out(r, c) = m(r, idx[c]);
    return out;
}

/// Sample indices for each step, a pure function of (seed, step). A batch at
/// least as large as the dataset is the full dataset in order.
class BatchSchedule {
public:
    BatchSchedule(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
        : n_(dataset_size), batch_(batch_size), seed_(seed) {
        if (n_ == 0 || batch_ == 0) throw ConfigError("batch schedule needs positive sizes");
    }

    std::vector<std::size_t> indices(std::size_t step) const {
        std::vector<std::size_t> idx;
        if (batch_ >= n_) {
            for (std::size_t i = 0; i < n_; ++i) idx.push_back(i);
            return idx;
        }
        Rng rng(mix_seed(seed_, step));
        idx.reserve(batch_);
        for (std::size_t i = 0; i < batch_; ++i) idx.push_back(static_cast<std::size_t>(rng.below(n_)));
        return idx;
    }

private:
    std::size_t n_, batch_;
    std::uint64_t seed_;
};

} // namespace ucgsd
