#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "odelm/ode.hpp"

using namespace odelm;

namespace {

Tensor<double> scalar_state(double v) { return Tensor<double>(Shape{1}, {v}); }

FieldEval<double> decay_field() {
    return FieldEval<double>{[](const Tensor<double>& y, double) {
        Tensor<double> d(y.shape());
        for (std::int64_t i = 0; i < y.numel(); ++i) d[i] = -y[i];
        return d;
    }};
}

SolverConfig cfg_of(Method m, int n_steps = 4, double rtol = 1e-3, double atol = 1e-6) {
    SolverConfig c;
    c.method = m;
    c.n_steps = n_steps;
    c.rtol = rtol;
    c.atol = atol;
    return c;
}

double final_error(Method m, int n) {
    FieldEval<double> f = decay_field();
    auto res = integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(m, n));
    return std::abs(res.final_state[0] - std::exp(-1.0));
}

}  // namespace

TEST_CASE("zero field: every method returns the initial state exactly") {
    for (Method m : {Method::euler, Method::rk4, Method::dopri5, Method::adaptive_heun}) {
        FieldEval<double> f{[](const Tensor<double>& y, double) { return Tensor<double>::zeros(y.shape()); }};
        Tensor<double> h0(Shape{3}, {1.5, -2.25, 0.125});
        auto res = integrate(f, h0, 0.0, 1.0, cfg_of(m));
        for (int i = 0; i < 3; ++i) CHECK(res.final_state[i] == h0[i]);
    }
}

TEST_CASE("euler on dH/dtau=-H with 4 steps gives the closed-form recurrence value") {
    FieldEval<double> f = decay_field();
    auto res = integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::euler, 4));
    // (1 - 1/4)^4, dyadic and exact in float64
    CHECK(res.final_state[0] == 0.31640625);
    CHECK(res.nfe == 4);
    CHECK(res.accepted_steps == 4);
    CHECK(res.rejected_steps == 0);
}

TEST_CASE("dopri5 on dH/dtau=-H reaches exp(-1) within 1e-7") {
    FieldEval<double> f = decay_field();
    auto res = integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::dopri5, 4, 1e-8, 1e-10));
    CHECK(std::abs(res.final_state[0] - std::exp(-1.0)) < 1e-7);
    CHECK(res.nfe == 6 * (res.accepted_steps + res.rejected_steps) + 1);
}

TEST_CASE("nfe accounting per method") {
    SECTION("euler: nfe == n_steps; rk4: nfe == 4*n_steps") {
        for (int n : {1, 4, 9}) {
            FieldEval<double> fe = decay_field();
            CHECK(integrate(fe, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::euler, n)).nfe == n);
            FieldEval<double> fr = decay_field();
            CHECK(integrate(fr, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::rk4, n)).nfe == 4 * n);
        }
    }
    SECTION("dopri5 FSAL: nfe == 6*(accepted+rejected) + 1") {
        for (double rtol : {1e-3, 1e-6, 1e-9}) {
            FieldEval<double> f = decay_field();
            auto res = integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::dopri5, 4, rtol, rtol * 1e-3));
            CHECK(res.nfe == 6 * (res.accepted_steps + res.rejected_steps) + 1);
            CHECK(res.rejected_steps >= 0);
        }
    }
    SECTION("adaptive_heun: two evaluations per attempted step") {
        for (double rtol : {1e-3, 1e-6}) {
            FieldEval<double> f = decay_field();
            auto res =
                integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::adaptive_heun, 4, rtol, rtol * 1e-3));
            CHECK(res.nfe == 2 * (res.accepted_steps + res.rejected_steps));
        }
    }
}

TEST_CASE("field evaluation counter increments by one per call") {
    FieldEval<double> f = decay_field();
    CHECK(f.calls == 0);
    f(scalar_state(1.0), 0.0);
    CHECK(f.calls == 1);
    f(scalar_state(1.0), 0.5);
    CHECK(f.calls == 2);
}

TEST_CASE("order of accuracy under step halving") {
    SECTION("euler halving ratio is 2 within 20%") {
        for (int n : {4, 8, 16}) {
            const double ratio = final_error(Method::euler, n) / final_error(Method::euler, 2 * n);
            CHECK(ratio > 1.6);
            CHECK(ratio < 2.4);
        }
    }
    SECTION("rk4 halving ratio is 16 within 20%") {
        for (int n : {8, 16, 32}) {
            const double ratio = final_error(Method::rk4, n) / final_error(Method::rk4, 2 * n);
            CHECK(ratio > 12.8);
            CHECK(ratio < 19.2);
        }
    }
}

TEST_CASE("tightening tolerances tenfold never decreases accepted steps") {
    auto wavy = []() {
        return FieldEval<double>{[](const Tensor<double>& y, double tau) {
            Tensor<double> d(y.shape());
            for (std::int64_t i = 0; i < y.numel(); ++i) d[i] = 0.5 * std::sin(y[i] + 2.0 * tau);
            return d;
        }};
    };
    for (Method m : {Method::dopri5, Method::adaptive_heun}) {
        long long prev = -1;
        for (double rtol : {1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7}) {
            FieldEval<double> f = wavy();
            auto res = integrate(f, scalar_state(0.7), 0.0, 1.0, cfg_of(m, 4, rtol, rtol * 1e-3));
            if (prev >= 0) CHECK(res.accepted_steps >= prev);
            prev = res.accepted_steps;
        }
    }
}

TEST_CASE("harmonic oscillator conserves energy at tight tolerance") {
    FieldEval<double> f{[](const Tensor<double>& y, double) {
        return Tensor<double>(y.shape(), {y[1], -y[0]});
    }};
    Tensor<double> y0(Shape{2}, {1.0, 0.0});
    auto res = integrate(f, y0, 0.0, 1.0, cfg_of(Method::dopri5, 4, 1e-8, 1e-10));
    const double energy = res.final_state[0] * res.final_state[0] + res.final_state[1] * res.final_state[1];
    CHECK(std::abs(energy - 1.0) < 1e-6);
}

TEST_CASE("cross-solver accepted-step agreement on smooth low-curvature fields") {
    for (double amp : {1e-4, 2e-4, 5e-4}) {
        auto mk = [amp]() {
            return FieldEval<double>{[amp](const Tensor<double>& y, double tau) {
                Tensor<double> d(y.shape());
                for (std::int64_t i = 0; i < y.numel(); ++i) d[i] = amp * std::sin(y[i] + tau);
                return d;
            }};
        };
        FieldEval<double> fd = mk(), fh = mk();
        Tensor<double> y0(Shape{4}, {0.9, -1.1, 0.4, 1.3});
        const auto rd = integrate(fd, y0, 0.0, 1.0, cfg_of(Method::dopri5));
        const auto rh = integrate(fh, y0, 0.0, 1.0, cfg_of(Method::adaptive_heun));
        const double rel = std::abs(static_cast<double>(rd.accepted_steps - rh.accepted_steps)) /
                           static_cast<double>(rh.accepted_steps);
        CHECK(rel < 0.15);
    }
}

TEST_CASE("trajectory checkpoints interpolate the solver grid") {
    FieldEval<double> f = decay_field();
    SolverConfig cfg = cfg_of(Method::euler, 4);
    cfg.checkpoint_taus = {0.0, 0.5, 0.67, 1.0};
    auto res = integrate(f, scalar_state(1.0), 0.0, 1.0, cfg);
    REQUIRE(res.trajectory.size() == 4);
    CHECK(res.trajectory[0].second[0] == 1.0);
    CHECK(res.trajectory[1].second[0] == Catch::Approx(0.5625).epsilon(1e-15));
    // linear interpolation between grid values at 0.5 and 0.75
    const double expect = 0.5625 + (0.67 - 0.5) / 0.25 * (0.421875 - 0.5625);
    CHECK(res.trajectory[2].second[0] == Catch::Approx(expect).epsilon(1e-12));
    CHECK(res.trajectory[3].second[0] == 0.31640625);
}

TEST_CASE("trajectory divergence") {
    SECTION("identical results give exactly zero") {
        FieldEval<double> f = decay_field();
        SolverConfig cfg = cfg_of(Method::euler, 4);
        cfg.checkpoint_taus = {0.0, 1.0};
        auto a = integrate(f, scalar_state(1.0), 0.0, 1.0, cfg);
        CHECK(trajectory_divergence(a, a) == 0.0);
    }
    SECTION("zero field: euler vs dopri5 give exactly zero") {
        auto zero = []() {
            return FieldEval<double>{
                [](const Tensor<double>& y, double) { return Tensor<double>::zeros(y.shape()); }};
        };
        SolverConfig ce = cfg_of(Method::euler, 4);
        ce.checkpoint_taus = {0.0, 0.5, 1.0};
        SolverConfig cd = cfg_of(Method::dopri5);
        cd.checkpoint_taus = ce.checkpoint_taus;
        FieldEval<double> f1 = zero(), f2 = zero();
        auto a = integrate(f1, scalar_state(2.5), 0.0, 1.0, ce);
        auto b = integrate(f2, scalar_state(2.5), 0.0, 1.0, cd);
        CHECK(trajectory_divergence(a, b) == 0.0);
    }
    SECTION("euler(4) vs dopri5 reference at tau=1 on the decay problem") {
        SolverConfig ce = cfg_of(Method::euler, 4);
        ce.checkpoint_taus = {1.0};
        SolverConfig cd = cfg_of(Method::dopri5, 4, 1e-8, 1e-10);
        cd.checkpoint_taus = {1.0};
        FieldEval<double> f1 = decay_field(), f2 = decay_field();
        auto a = integrate(f1, scalar_state(1.0), 0.0, 1.0, ce);
        auto b = integrate(f2, scalar_state(1.0), 0.0, 1.0, cd);
        const double expect = 100.0 * std::abs(0.31640625 - std::exp(-1.0)) / std::exp(-1.0);
        CHECK(trajectory_divergence(a, b) == Catch::Approx(expect).margin(1e-4));
        CHECK(expect == Catch::Approx(13.99).margin(0.01));
    }
    SECTION("mismatched checkpoint sets are a contract violation") {
        FieldEval<double> f1 = decay_field(), f2 = decay_field();
        SolverConfig c1 = cfg_of(Method::euler, 4);
        c1.checkpoint_taus = {0.0, 1.0};
        SolverConfig c2 = cfg_of(Method::euler, 4);
        c2.checkpoint_taus = {0.5, 1.0};
        auto a = integrate(f1, scalar_state(1.0), 0.0, 1.0, c1);
        auto b = integrate(f2, scalar_state(1.0), 0.0, 1.0, c2);
        CHECK_THROWS_AS(trajectory_divergence(a, b), ContractViolation);
    }
}

TEST_CASE("solver error paths") {
    SECTION("max_steps exceeded carries last state and step size") {
        FieldEval<double> f{[](const Tensor<double>& y, double) {
            Tensor<double> d(y.shape());
            for (std::int64_t i = 0; i < y.numel(); ++i) d[i] = 40.0 * y[i];
            return d;
        }};
        SolverConfig cfg = cfg_of(Method::dopri5, 4, 1e-12, 1e-14);
        cfg.max_steps = 3;
        try {
            integrate(f, scalar_state(1.0), 0.0, 1.0, cfg);
            FAIL("expected divergence");
        } catch (const SolverDivergence& e) {
            CHECK(e.last_state.size() == 1);
            CHECK(e.last_step > 0.0);
        }
    }
    SECTION("non-finite state names the failing tau") {
        FieldEval<double> f{[](const Tensor<double>& y, double tau) {
            Tensor<double> d(y.shape());
            d[0] = tau > 0.5 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
            return d;
        }};
        CHECK_THROWS_AS(integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::euler, 4)), NonFiniteError);
    }
    SECTION("invalid configuration and span") {
        FieldEval<double> f = decay_field();
        CHECK_THROWS_AS(integrate(f, scalar_state(1.0), 1.0, 0.0, cfg_of(Method::euler, 4)),
                        ContractViolation);
        CHECK_THROWS_AS(integrate(f, scalar_state(1.0), 0.0, 1.0, cfg_of(Method::euler, 0)),
                        ContractViolation);
        SolverConfig bad = cfg_of(Method::dopri5);
        bad.rtol = -1.0;
        CHECK_THROWS_AS(integrate(f, scalar_state(1.0), 0.0, 1.0, bad), ContractViolation);
        Tensor<double> inf_state(Shape{1}, {std::numeric_limits<double>::infinity()});
        CHECK_THROWS_AS(integrate(f, inf_state, 0.0, 1.0, cfg_of(Method::euler, 4)), ContractViolation);
    }
}
