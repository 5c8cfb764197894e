#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace odelm {

// Precondition / interface misuse. CLI maps this to exit code 1.
struct ContractViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An op without a reverse rule was reached during backward.
struct UnsupportedOp : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Base for integration failures. CLI maps these to exit code 2.
struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// max_steps exhausted; carries the last state (cast to double) and step size.
struct SolverDivergence : SolverError {
    SolverDivergence(const std::string& msg, std::vector<double> state, double tau, double step)
        : SolverError(msg), last_state(std::move(state)), last_tau(tau), last_step(step) {}
    std::vector<double> last_state;
    double last_tau = 0.0;
    double last_step = 0.0;
};

// NaN/Inf encountered; names the failing tau in the message.
struct NonFiniteError : SolverError {
    NonFiniteError(const std::string& msg, double tau) : SolverError(msg), at_tau(tau) {}
    double at_tau = 0.0;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace odelm
