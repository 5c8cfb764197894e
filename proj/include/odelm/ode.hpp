#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "odelm/tensor.hpp"

namespace odelm {

enum class Method { euler, rk4, dopri5, adaptive_heun };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::euler: return "euler";
        case Method::rk4: return "rk4";
        case Method::dopri5: return "dopri5";
        case Method::adaptive_heun: return "adaptive_heun";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "euler") return Method::euler;
    if (s == "rk4") return Method::rk4;
    if (s == "dopri5") return Method::dopri5;
    if (s == "adaptive_heun") return Method::adaptive_heun;
    throw ContractViolation("unknown solver method '" + s + "'");
}

inline bool is_adaptive(Method m) { return m == Method::dopri5 || m == Method::adaptive_heun; }

struct SolverConfig {
    Method method = Method::euler;
    int n_steps = 4;        // fixed-step methods
    double rtol = 1e-3;     // adaptive methods
    double atol = 1e-6;
    int max_steps = 100000;  // cap on attempted adaptive steps
    bool record_trajectory = false;
    std::vector<double> checkpoint_taus;

    void validate() const {
        if (n_steps < 1) throw ContractViolation("solver: n_steps must be >= 1");
        if (max_steps < 1) throw ContractViolation("solver: max_steps must be >= 1");
        if (!(rtol > 0.0) || !(atol > 0.0)) throw ContractViolation("solver: rtol and atol must be positive");
    }
};

template <class T>
struct SolverResult {
    Tensor<T> final_state;
    long long nfe = 0;
    long long accepted_steps = 0;
    long long rejected_steps = 0;
    std::vector<std::pair<double, Tensor<T>>> trajectory;
};

// Callable wrapper with the per-integration evaluation counter.
template <class T>
struct FieldEval {
    std::function<Tensor<T>(const Tensor<T>&, T)> fn;
    long long calls = 0;

    Tensor<T> operator()(const Tensor<T>& y, T tau) {
        ++calls;
        return fn(y, tau);
    }
};

namespace detail {

template <class T>
class TrajectoryRecorder {
public:
    TrajectoryRecorder(const SolverConfig& cfg, double t0, double t1,
                       std::vector<std::pair<double, Tensor<T>>>* out)
        : out_(out), record_all_(cfg.record_trajectory && cfg.checkpoint_taus.empty()) {
        if (!cfg.record_trajectory && cfg.checkpoint_taus.empty()) {
            out_ = nullptr;
            return;
        }
        taus_ = cfg.checkpoint_taus;
        std::sort(taus_.begin(), taus_.end());
        for (double c : taus_)
            if (c < t0 - 1e-12 || c > t1 + 1e-12)
                throw ContractViolation("checkpoint tau " + std::to_string(c) + " outside span");
    }

    void start(double t0, const Tensor<T>& y0) {
        if (!out_) return;
        while (next_ < taus_.size() && taus_[next_] <= t0 + 1e-15) {
            out_->emplace_back(taus_[next_], y0);
            ++next_;
        }
        if (record_all_) out_->emplace_back(t0, y0);
    }

    void accepted(double ta, const Tensor<T>& ya, double tb, const Tensor<T>& yb) {
        if (!out_) return;
        while (next_ < taus_.size() && taus_[next_] <= tb + 1e-15) {
            const double c = taus_[next_];
            const double w = (tb > ta) ? (c - ta) / (tb - ta) : 1.0;
            Tensor<T> interp(ya.shape());
            for (std::int64_t i = 0; i < ya.numel(); ++i)
                interp[i] = ya[i] + static_cast<T>(w) * (yb[i] - ya[i]);
            out_->emplace_back(c, std::move(interp));
            ++next_;
        }
        if (record_all_) out_->emplace_back(tb, yb);
    }

private:
    std::vector<double> taus_;
    std::size_t next_ = 0;
    std::vector<std::pair<double, Tensor<T>>>* out_;
    bool record_all_ = false;
};

// RMS of e_i / (atol + rtol * max(|y0_i|, |y1_i|))
template <class T>
double scaled_error_norm(const Tensor<T>& e, const Tensor<T>& y0, const Tensor<T>& y1, double atol, double rtol) {
    double acc = 0.0;
    const std::int64_t n = e.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double sc = atol + rtol * std::max(std::abs(static_cast<double>(y0[i])),
                                                 std::abs(static_cast<double>(y1[i])));
        const double q = static_cast<double>(e[i]) / sc;
        acc += q * q;
    }
    return std::sqrt(acc / static_cast<double>(n));
}

template <class T>
std::vector<double> to_doubles(const Tensor<T>& t) {
    std::vector<double> v(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) v[static_cast<std::size_t>(i)] = static_cast<double>(t[i]);
    return v;
}

}  // namespace detail

template <class T>
SolverResult<T> integrate(FieldEval<T>& field, const Tensor<T>& h0, double t0, double t1,
                          const SolverConfig& cfg) {
    cfg.validate();
    if (!(t0 < t1)) throw ContractViolation("integrate: need t0 < t1");
    if (!all_finite(h0)) throw ContractViolation("integrate: initial state is not finite");

    SolverResult<T> result;
    detail::TrajectoryRecorder<T> rec(cfg, t0, t1, &result.trajectory);
    const long long calls_before = field.calls;

    Tensor<T> y = h0;
    rec.start(t0, y);

    if (cfg.method == Method::euler || cfg.method == Method::rk4) {
        const int n = cfg.n_steps;
        const T h = static_cast<T>((t1 - t0) / n);
        for (int k = 0; k < n; ++k) {
            const double tk = t0 + k * static_cast<double>(h);
            const double tn = (k + 1 == n) ? t1 : t0 + (k + 1) * static_cast<double>(h);
            Tensor<T> ynew;
            if (cfg.method == Method::euler) {
                Tensor<T> k1 = field(y, static_cast<T>(tk));
                ynew = axpy(y, h, k1);
            } else {
                Tensor<T> k1 = field(y, static_cast<T>(tk));
                Tensor<T> k2 = field(axpy(y, h / T(2), k1), static_cast<T>(tk) + h / T(2));
                Tensor<T> k3 = field(axpy(y, h / T(2), k2), static_cast<T>(tk) + h / T(2));
                Tensor<T> k4 = field(axpy(y, h, k3), static_cast<T>(tk) + h);
                ynew = Tensor<T>(y.shape());
                const T w = h / T(6);
                for (std::int64_t i = 0; i < y.numel(); ++i)
                    ynew[i] = y[i] + w * (k1[i] + T(2) * k2[i] + T(2) * k3[i] + k4[i]);
            }
            if (!all_finite(ynew))
                throw NonFiniteError("non-finite state at tau=" + std::to_string(tn), tn);
            rec.accepted(tk, y, tn, ynew);
            y = std::move(ynew);
        }
        result.accepted_steps = n;
        result.rejected_steps = 0;
    } else {
        // Embedded pairs with the shared controller structure:
        //   err <= 1 accepts; new_h = h * clamp(0.9 * err^(-1/(q+1)), 0.2, 10)
        // where q is the embedded order (dopri5: 4, heun: 1).
        const double ctrl_expo = cfg.method == Method::dopri5 ? -0.2 : -0.5;
        const double span = t1 - t0;
        double h = span / 10.0;
        double t = t0;
        long long attempts = 0;

        // Dormand-Prince 5(4) tableau
        static const double a21 = 1.0 / 5;
        static const double a31 = 3.0 / 40, a32 = 9.0 / 40;
        static const double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
        static const double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
        static const double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
        static const double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                            b6 = 11.0 / 84;
        static const double e1 = 35.0 / 384 - 5179.0 / 57600, e3 = 500.0 / 1113 - 7571.0 / 16695,
                            e4 = 125.0 / 192 - 393.0 / 640, e5 = -2187.0 / 6784 + 92097.0 / 339200,
                            e6 = 11.0 / 84 - 187.0 / 2100, e7 = -1.0 / 40;

        auto combine = [](const Tensor<T>& base, double hh,
                          std::initializer_list<std::pair<double, const Tensor<T>*>> terms) {
            Tensor<T> out = base;
            for (const auto& [c, k] : terms) {
                const T w = static_cast<T>(hh * c);
                for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += w * (*k)[i];
            }
            return out;
        };

        Tensor<T> k1;
        if (cfg.method == Method::dopri5) k1 = field(y, static_cast<T>(t0));

        while (t < t1 - 1e-14 * span) {
            if (attempts >= cfg.max_steps)
                throw SolverDivergence("max_steps (" + std::to_string(cfg.max_steps) +
                                           ") exceeded before reaching span end",
                                       detail::to_doubles(y), t, h);
            if (h < 1e-14 * span)
                throw SolverDivergence("step size underflow", detail::to_doubles(y), t, h);
            bool last = false;
            if (t + h >= t1) {
                h = t1 - t;
                last = true;
            }
            ++attempts;

            Tensor<T> ynew;
            Tensor<T> errv(y.shape());
            Tensor<T> k7;
            if (cfg.method == Method::dopri5) {
                Tensor<T> k2 = field(combine(y, h, {{a21, &k1}}), static_cast<T>(t + h / 5));
                Tensor<T> k3 = field(combine(y, h, {{a31, &k1}, {a32, &k2}}), static_cast<T>(t + 3 * h / 10));
                Tensor<T> k4 =
                    field(combine(y, h, {{a41, &k1}, {a42, &k2}, {a43, &k3}}), static_cast<T>(t + 4 * h / 5));
                Tensor<T> k5 = field(combine(y, h, {{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}),
                                     static_cast<T>(t + 8 * h / 9));
                Tensor<T> k6 = field(
                    combine(y, h, {{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}),
                    static_cast<T>(t + h));
                ynew = combine(y, h, {{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
                k7 = field(ynew, static_cast<T>(t + h));
                for (std::int64_t i = 0; i < y.numel(); ++i)
                    errv[i] = static_cast<T>(h) *
                              (static_cast<T>(e1) * k1[i] + static_cast<T>(e3) * k3[i] +
                               static_cast<T>(e4) * k4[i] + static_cast<T>(e5) * k5[i] +
                               static_cast<T>(e6) * k6[i] + static_cast<T>(e7) * k7[i]);
            } else {  // adaptive_heun: Heun 2(1), two evaluations per attempted step
                Tensor<T> kh1 = field(y, static_cast<T>(t));
                Tensor<T> kh2 = field(combine(y, h, {{1.0, &kh1}}), static_cast<T>(t + h));
                ynew = combine(y, h, {{0.5, &kh1}, {0.5, &kh2}});
                for (std::int64_t i = 0; i < y.numel(); ++i)
                    errv[i] = static_cast<T>(h / 2) * (kh2[i] - kh1[i]);
            }
            if (!all_finite(ynew))
                throw NonFiniteError("non-finite state at tau=" + std::to_string(t + h), t + h);

            const double err = detail::scaled_error_norm(errv, y, ynew, cfg.atol, cfg.rtol);
            if (!std::isfinite(err))
                throw NonFiniteError("non-finite error estimate at tau=" + std::to_string(t + h), t + h);

            double fac = (err <= 1e-300) ? 10.0 : 0.9 * std::pow(err, ctrl_expo);
            fac = std::clamp(fac, 0.2, 10.0);

            if (err <= 1.0) {
                const double tn = last ? t1 : t + h;
                rec.accepted(t, y, tn, ynew);
                y = std::move(ynew);
                t = tn;
                ++result.accepted_steps;
                if (cfg.method == Method::dopri5) k1 = std::move(k7);  // FSAL
            } else {
                ++result.rejected_steps;
            }
            h *= fac;
        }
    }

    result.final_state = std::move(y);
    result.nfe = field.calls - calls_before;
    return result;
}

template <class T>
SolverResult<T> integrate(std::function<Tensor<T>(const Tensor<T>&, T)> fn, const Tensor<T>& h0, double t0,
                          double t1, const SolverConfig& cfg) {
    FieldEval<T> field{std::move(fn)};
    return integrate(field, h0, t0, t1, cfg);
}

// 100 * mean over checkpoints of |a - b|_F / (|b|_F + 1e-12), b the reference.
template <class T>
double trajectory_divergence(const SolverResult<T>& a, const SolverResult<T>& b) {
    if (a.trajectory.empty() || a.trajectory.size() != b.trajectory.size())
        throw ContractViolation("trajectory_divergence: results carry different checkpoint sets");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
        if (std::abs(a.trajectory[i].first - b.trajectory[i].first) > 1e-12)
            throw ContractViolation("trajectory_divergence: checkpoint taus differ at index " + std::to_string(i));
        const Tensor<T>& xa = a.trajectory[i].second;
        const Tensor<T>& xb = b.trajectory[i].second;
        require_same_shape(xa, xb, "trajectory_divergence");
        double num = 0.0, den = 0.0;
        for (std::int64_t j = 0; j < xa.numel(); ++j) {
            const double d = static_cast<double>(xa[j]) - static_cast<double>(xb[j]);
            num += d * d;
            den += static_cast<double>(xb[j]) * static_cast<double>(xb[j]);
        }
        acc += std::sqrt(num) / (std::sqrt(den) + 1e-12);
    }
    return 100.0 * acc / static_cast<double>(a.trajectory.size());
}

}  // namespace odelm
