#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "odelm/adjoint.hpp"

using namespace odelm;

namespace {

// Oracle: backprop through the explicitly unrolled Euler graph. This is the
// reference every adjoint claim is checked against.
struct UnrolledGrads {
    Tensor<double> dh0, dw1, db1, dw2, db2, du;
    double dalpha = 0;
};

UnrolledGrads unrolled_euler_grads(const ControlledVectorField<double>& f, const Tensor<double>& h0,
                                   const Tensor<double>& u, int n_steps, const Tensor<double>& cot) {
    Tape<double> t;
    Var vh = t.leaf(h0, true);
    Var vu = t.leaf(u, true);
    ControlledVectorField<double>::GraphVars p{t.leaf(f.w1, true), t.leaf(f.b1, true), t.leaf(f.w2, true),
                                               t.leaf(f.b2, true), t.leaf(f.alpha, true)};
    const double h = 1.0 / n_steps;
    Var x = vh;
    for (int k = 0; k < n_steps; ++k) {
        Var fx = ControlledVectorField<double>::eval_graph(t, x, k * h, vu, p);
        x = t.add(x, t.scale(fx, h));
    }
    t.backward(x, cot);
    return {t.grad(vh),   t.grad(p.w1), t.grad(p.b1), t.grad(p.w2),
            t.grad(p.b2), t.grad(vu),   t.grad(p.alpha).item()};
}

double max_rel(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]) / (std::abs(b[i]) + 1e-12));
    return m;
}

ControlledVectorField<double> tiny_field(std::uint64_t seed = 31) {
    Rng rng(seed);
    return ControlledVectorField<double>::init(4, 1, rng);
}

SolverConfig euler_cfg(int n) {
    SolverConfig c;
    c.method = Method::euler;
    c.n_steps = n;
    return c;
}

// dH/dtau = k*H with k as the single flat parameter; no control, no alpha.
struct LinearTestField {
    double k = 0.5;

    struct Vjp {
        Tensor<double> dH;
        Tensor<double> dtheta;
        Tensor<double> du;
        double dalpha = 0;
    };

    std::int64_t theta_size() const { return 1; }

    Tensor<double> value(const Tensor<double>& H, double, const Tensor<double>&) const {
        return scale(H, k);
    }

    std::pair<Tensor<double>, Vjp> value_and_vjp(const Tensor<double>& H, double tau,
                                                 const Tensor<double>& u, const Tensor<double>& cot) const {
        Vjp v;
        v.dH = scale(cot, k);
        v.dtheta = Tensor<double>(Shape{1}, {dot(cot, H)});
        v.du = Tensor<double>::zeros(Shape{0});
        return {value(H, tau, u), std::move(v)};
    }
};

}  // namespace

TEST_CASE("zero field: backward returns the cotangent and zero parameter grads") {
    auto f = tiny_field();
    f.alpha = Tensor<double>::scalar(0.0);
    Rng rng(3);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    Tensor<double> u = Tensor<double>::full(Shape{1}, 0.5);
    auto [h1, handle] = integrate_with_adjoint(f, h0, u, euler_cfg(4));
    for (std::int64_t i = 0; i < h0.numel(); ++i) CHECK(h1[i] == h0[i]);

    Tensor<double> cot = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    auto g = adjoint_backward(handle, cot);
    for (std::int64_t i = 0; i < cot.numel(); ++i) CHECK(g.dh0[i] == cot[i]);
    // alpha multiplies the MLP, so every theta gradient dies with alpha=0
    for (std::int64_t i = 0; i < g.dtheta.numel(); ++i) CHECK(g.dtheta[i] == 0.0);
    CHECK(g.du[0] == 0.0);
}

TEST_CASE("forward pass matches the plain integrator and the handle stays O(1)") {
    auto f = tiny_field();
    Rng rng(5);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    Tensor<double> u = Tensor<double>::full(Shape{1}, -0.5);
    for (int n : {1, 4, 64}) {
        FieldEval<double> fe{[&](const Tensor<double>& y, double tau) { return f.eval(y, tau, u); }};
        auto plain = integrate(fe, h0, 0.0, 1.0, euler_cfg(n));
        auto [h1, handle] = integrate_with_adjoint(f, h0, u, euler_cfg(n));
        for (std::int64_t i = 0; i < h0.numel(); ++i) CHECK(h1[i] == plain.final_state[i]);
        CHECK(handle.stored_state_count() == 1);
    }
}

TEST_CASE("exact discrete adjoint matches unrolled backprop on the tiny instance") {
    auto f = tiny_field();
    Rng rng(17);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    Tensor<double> u = Tensor<double>::full(Shape{1}, 0.8);
    Tensor<double> cot = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);

    for (int n : {1, 4, 64}) {
        auto oracle = unrolled_euler_grads(f, h0, u, n, cot);
        auto [h1, handle] = integrate_with_adjoint(f, h0, u, euler_cfg(n));
        auto g = adjoint_backward(handle, cot);

        CHECK(max_rel(g.dh0, oracle.dh0) < 1e-6);
        CHECK(max_rel(g.du, oracle.du) < 1e-6);
        CHECK(std::abs(g.dalpha - oracle.dalpha) / (std::abs(oracle.dalpha) + 1e-12) < 1e-6);

        Tensor<double> oracle_theta(Shape{f.theta_size()});
        std::int64_t off = 0;
        for (const Tensor<double>* part : {&oracle.dw1, &oracle.db1, &oracle.dw2, &oracle.db2}) {
            std::copy(part->data(), part->data() + part->numel(), oracle_theta.data() + off);
            off += part->numel();
        }
        CHECK(max_rel(g.dtheta, oracle_theta) < 1e-6);
    }
}

TEST_CASE("adjoint gradients match central finite differences") {
    auto f = tiny_field(77);
    Rng rng(19);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 2, 4}, 0.8);
    Tensor<double> u = Tensor<double>::full(Shape{1}, 0.4);
    Tensor<double> cot = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    const int n = 4;
    const double eps = 1e-6;

    auto loss_of = [&](const ControlledVectorField<double>& ff, const Tensor<double>& hh,
                       const Tensor<double>& uu) {
        FieldEval<double> fe{[&](const Tensor<double>& y, double tau) { return ff.eval(y, tau, uu); }};
        auto res = integrate(fe, hh, 0.0, 1.0, euler_cfg(n));
        return dot(cot, res.final_state);
    };

    auto [h1, handle] = integrate_with_adjoint(f, h0, u, euler_cfg(n));
    auto g = adjoint_backward(handle, cot);

    double worst = 0;
    auto fd_check = [&](double analytic, double* coord) {
        const double orig = *coord;
        *coord = orig + eps;
        const double fp = loss_of(f, h0, u);
        *coord = orig - eps;
        const double fm = loss_of(f, h0, u);
        *coord = orig;
        const double numeric = (fp - fm) / (2 * eps);
        worst = std::max(worst, std::abs(analytic - numeric) / (std::abs(numeric) + 1e-12));
    };

    for (std::int64_t i = 0; i < h0.numel(); ++i) fd_check(g.dh0[i], h0.data() + i);
    fd_check(g.du[0], u.data());
    fd_check(g.dalpha, f.alpha.data());
    Tensor<double> theta = f.flatten_theta();
    for (std::int64_t i = 0; i < theta.numel(); ++i) {
        const double orig = theta[i];
        theta[i] = orig + eps;
        f.unflatten_theta(theta);
        const double fp = loss_of(f, h0, u);
        theta[i] = orig - eps;
        f.unflatten_theta(theta);
        const double fm = loss_of(f, h0, u);
        theta[i] = orig;
        f.unflatten_theta(theta);
        const double numeric = (fp - fm) / (2 * eps);
        worst = std::max(worst, std::abs(g.dtheta[i] - numeric) / (std::abs(numeric) + 1e-12));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("adjoint_backward is exactly linear in the cotangent") {
    auto f = tiny_field(41);
    Rng rng(23);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    Tensor<double> u = Tensor<double>::full(Shape{1}, -1.0);
    Tensor<double> cot = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);

    auto [h1a, ha] = integrate_with_adjoint(f, h0, u, euler_cfg(4));
    auto g1 = adjoint_backward(ha, cot);
    auto [h1b, hb] = integrate_with_adjoint(f, h0, u, euler_cfg(4));
    auto g2 = adjoint_backward(hb, scale(cot, 2.0));

    for (std::int64_t i = 0; i < g1.dh0.numel(); ++i) CHECK(g2.dh0[i] == 2.0 * g1.dh0[i]);
    for (std::int64_t i = 0; i < g1.dtheta.numel(); ++i) CHECK(g2.dtheta[i] == 2.0 * g1.dtheta[i]);
    CHECK(g2.du[0] == 2.0 * g1.du[0]);
    CHECK(g2.dalpha == 2.0 * g1.dalpha);
}

TEST_CASE("zero cotangent gives all-zero outputs") {
    auto f = tiny_field();
    Rng rng(29);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 2, 4}, 1.0);
    Tensor<double> u = Tensor<double>::full(Shape{1}, 1.0);
    auto [h1, handle] = integrate_with_adjoint(f, h0, u, euler_cfg(4));
    auto g = adjoint_backward(handle, Tensor<double>::zeros(h0.shape()));
    for (std::int64_t i = 0; i < g.dh0.numel(); ++i) CHECK(g.dh0[i] == 0.0);
    for (std::int64_t i = 0; i < g.dtheta.numel(); ++i) CHECK(g.dtheta[i] == 0.0);
    CHECK(g.du[0] == 0.0);
    CHECK(g.dalpha == 0.0);
}

TEST_CASE("backward handle is single-use") {
    auto f = tiny_field();
    Tensor<double> h0 = Tensor<double>::full(Shape{1, 1, 4}, 0.5);
    Tensor<double> u = Tensor<double>::zeros(Shape{1});
    auto [h1, handle] = integrate_with_adjoint(f, h0, u, euler_cfg(4));
    auto g = adjoint_backward(handle, Tensor<double>::zeros(h0.shape()));
    CHECK_THROWS_AS(adjoint_backward(handle, Tensor<double>::zeros(h0.shape())), ContractViolation);
}

TEST_CASE("continuous adjoint on the linear field recovers exp(k)") {
    LinearTestField lf;
    Tensor<double> h0(Shape{1}, {1.0});
    Tensor<double> u(Shape{0});
    SolverConfig cfg;
    cfg.method = Method::dopri5;
    cfg.rtol = 1e-8;
    cfg.atol = 1e-10;
    auto [h1, handle] = integrate_with_adjoint(lf, h0, u, cfg);
    CHECK(h1[0] == Catch::Approx(std::exp(0.5)).epsilon(1e-7));

    auto g = adjoint_backward(handle, Tensor<double>(Shape{1}, {1.0}));
    CHECK(g.dh0[0] == Catch::Approx(std::exp(0.5)).epsilon(1e-6));     // sensitivity of h1 to h0
    CHECK(g.dtheta[0] == Catch::Approx(std::exp(0.5)).epsilon(1e-6));  // dh1/dk = h0*e^k at k=0.5
}

TEST_CASE("continuous adjoint with rk4 matches finite differences on the MLP field") {
    auto f = tiny_field(53);
    Rng rng(37);
    Tensor<double> h0 = rng.normal_tensor<double>(Shape{1, 1, 4}, 0.8);
    Tensor<double> u = Tensor<double>::full(Shape{1}, 0.6);
    Tensor<double> cot = rng.normal_tensor<double>(Shape{1, 1, 4}, 1.0);
    SolverConfig cfg;
    cfg.method = Method::rk4;
    cfg.n_steps = 32;

    auto [h1, handle] = integrate_with_adjoint(f, h0, u, cfg);
    auto g = adjoint_backward(handle, cot);

    const double eps = 1e-6;
    auto loss_of = [&](const Tensor<double>& hh) {
        FieldEval<double> fe{[&](const Tensor<double>& y, double tau) { return f.eval(y, tau, u); }};
        return dot(cot, integrate(fe, hh, 0.0, 1.0, cfg).final_state);
    };
    double worst = 0;
    for (std::int64_t i = 0; i < h0.numel(); ++i) {
        Tensor<double> hp = h0, hm = h0;
        hp[i] += eps;
        hm[i] -= eps;
        const double numeric = (loss_of(hp) - loss_of(hm)) / (2 * eps);
        worst = std::max(worst, std::abs(g.dh0[i] - numeric) / (std::abs(numeric) + 1e-12));
    }
    CHECK(worst < 1e-4);
}
