#pragma once

#include <vector>

#include "odelm/autograd.hpp"

namespace odelm {

// Central-difference oracle for scalar-valued maps built from tape ops.
// Returns max over all input coordinates of
//   |analytic - central| / (|central| + 1e-12).
template <class T, class F>
T grad_check(F&& f, const std::vector<Tensor<T>>& inputs, T eps) {
    if (!(eps > T(0))) throw ContractViolation("grad_check: epsilon must be positive");

    Tape<T> tape;
    tape.set_check_finite(true);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var out = f(tape, vars);
    if (tape.val(out).numel() != 1)
        throw ContractViolation("grad_check: f must be scalar-valued, got shape " +
                                shape_str(tape.val(out).shape()));
    tape.backward(out, Tensor<T>::scalar(T(1)));
    std::vector<Tensor<T>> analytic;
    analytic.reserve(vars.size());
    for (Var v : vars) analytic.push_back(tape.grad(v));

    auto eval = [&](const std::vector<Tensor<T>>& xs) -> T {
        Tape<T> t2;
        std::vector<Var> vs;
        vs.reserve(xs.size());
        for (const auto& x : xs) vs.push_back(t2.leaf(x, false));
        return t2.val(f(t2, vs)).item();
    };

    T max_err = 0;
    std::vector<Tensor<T>> probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::int64_t j = 0; j < inputs[i].numel(); ++j) {
            const T orig = probe[i][j];
            probe[i][j] = orig + eps;
            const T fp = eval(probe);
            probe[i][j] = orig - eps;
            const T fm = eval(probe);
            probe[i][j] = orig;
            const T numeric = (fp - fm) / (T(2) * eps);
            const T rel = std::abs(analytic[i][j] - numeric) / (std::abs(numeric) + T(1e-12));
            max_err = std::max(max_err, rel);
        }
    }
    return max_err;
}

}  // namespace odelm
