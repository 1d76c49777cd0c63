#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ucgsd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input has no usable structure (e.g. an all-zero matrix handed to canonicalization).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Iterative balancing did not reach the requested tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual, std::size_t iterations)
        : Error(what + " (residual=" + std::to_string(residual) +
                ", iters=" + std::to_string(iterations) + ")"),
          residual_(residual), iterations_(iterations) {}

    double residual() const noexcept { return residual_; }
    std::size_t iterations() const noexcept { return iterations_; }

private:
    double residual_;
    std::size_t iterations_;
};

/// NaN/Inf produced during evaluation or training.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A gauge assignment breaks a structural constraint of the graph.
class ConstraintViolation : public Error {
public:
    using Error::Error;
};

/// Operation does not support the given graph topology.
class UnsupportedStructure : public Error {
public:
    using Error::Error;
};

/// Malformed text input (matrix files, parameter dumps).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment or network configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace ucgsd
