#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "odelm/grad_check.hpp"

using namespace odelm;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double s = 1.0) {
    return rng.normal_tensor<double>(std::move(shape), s);
}

}  // namespace

TEST_CASE("vjp of the identity map returns the cotangent unchanged") {
    Tensor<double> x(Shape{3}, {1.0, -2.0, 0.5});
    Tensor<double> c(Shape{3}, {0.1, 0.2, 0.3});
    auto grads = vjp<double>([](Tape<double>& t, const std::vector<Var>& v) { return v[0]; }, {x}, c);
    REQUIRE(grads.size() == 1);
    for (int i = 0; i < 3; ++i) CHECK(grads[0][i] == c[i]);
}

TEST_CASE("vjp of x*x at 3 with unit cotangent is 6") {
    Tensor<double> x(Shape{1}, {3.0});
    Tensor<double> c(Shape{1}, {1.0});
    auto grads = vjp<double>(
        [](Tape<double>& t, const std::vector<Var>& v) { return t.mul(v[0], v[0]); }, {x}, c);
    CHECK(grads[0][0] == 6.0);
}

TEST_CASE("vjp of a 2x2 matrix product matches central differences") {
    Rng rng(7);
    Tensor<double> a = rand_tensor(Shape{2, 2}, rng);
    Tensor<double> b = rand_tensor(Shape{2, 2}, rng);
    Tensor<double> cot = rand_tensor(Shape{2, 2}, rng);
    // reduce with the fixed cotangent so the map is scalar-valued
    const double err = grad_check<double>(
        [&](Tape<double>& t, const std::vector<Var>& v) {
            Var prod = t.matmul(v[0], v[1]);
            return t.sum_all(t.mul(prod, t.constant(cot)));
        },
        {a, b}, 1e-6);
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check: linear function is exact to rounding") {
    Rng rng(3);
    Tensor<double> x = rand_tensor(Shape{5}, rng);
    Tensor<double> y = rand_tensor(Shape{5}, rng);
    const double err = grad_check<double>(
        [](Tape<double>& t, const std::vector<Var>& v) { return t.sum_all(t.add(v[0], v[1])); }, {x, y},
        1e-6);
    CHECK(err < 1e-9);
}

TEST_CASE("grad_check: softmax cross-entropy on logits [1,2,3], target 0") {
    Tensor<double> logits(Shape{1, 3}, {1.0, 2.0, 3.0});
    const double err = grad_check<double>(
        [](Tape<double>& t, const std::vector<Var>& v) {
            return t.cross_entropy_mean(v[0], {0});
        },
        {logits}, 1e-6);
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check: epsilon must be positive") {
    Tensor<double> x(Shape{1}, {1.0});
    CHECK_THROWS_AS(grad_check<double>(
                        [](Tape<double>& t, const std::vector<Var>& v) { return t.sum_all(v[0]); }, {x}, 0.0),
                    ContractViolation);
}

TEST_CASE("every differentiable op passes grad_check at float64") {
    Rng rng(11);
    const double eps = 1e-6, tol = 1e-5;

    SECTION("add/sub/mul/scale/tanh/gelu chain") {
        Tensor<double> x = rand_tensor(Shape{2, 3}, rng);
        Tensor<double> y = rand_tensor(Shape{2, 3}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var s = t.sub(t.mul(v[0], v[1]), t.scale(v[1], 0.3));
                return t.sum_all(t.gelu(t.tanh_op(s)));
            },
            {x, y}, eps);
        CHECK(err < tol);
    }

    SECTION("mul_scalar") {
        Tensor<double> x = rand_tensor(Shape{4}, rng);
        Tensor<double> s = Tensor<double>::scalar(0.7);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) { return t.sum_all(t.mul_scalar(v[0], v[1])); },
            {x, s}, eps);
        CHECK(err < tol);
    }

    SECTION("add_bias + matmul") {
        Tensor<double> x = rand_tensor(Shape{3, 4}, rng);
        Tensor<double> w = rand_tensor(Shape{4, 2}, rng);
        Tensor<double> b = rand_tensor(Shape{2}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_all(t.tanh_op(t.add_bias(t.matmul(v[0], v[1]), v[2])));
            },
            {x, w, b}, eps);
        CHECK(err < tol);
    }

    SECTION("bmm and bmm_nt") {
        Tensor<double> a = rand_tensor(Shape{2, 3, 4}, rng, 0.5);
        Tensor<double> b = rand_tensor(Shape{2, 4, 2}, rng, 0.5);
        Tensor<double> c = rand_tensor(Shape{2, 5, 4}, rng, 0.5);
        const double err1 = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) { return t.sum_all(t.tanh_op(t.bmm(v[0], v[1]))); },
            {a, b}, eps);
        CHECK(err1 < tol);
        const double err2 = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_all(t.tanh_op(t.bmm_nt(v[0], v[1])));
            },
            {a, c}, eps);
        CHECK(err2 < tol);
    }

    SECTION("permute0213 + reshape") {
        Tensor<double> x = rand_tensor(Shape{2, 3, 2, 2}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var p = t.permute0213(v[0]);
                return t.sum_all(t.gelu(t.reshape(p, Shape{24})));
            },
            {x}, eps);
        CHECK(err < tol);
    }

    SECTION("causal_softmax") {
        Tensor<double> s = rand_tensor(Shape{2, 4, 4}, rng);
        Tensor<double> w = rand_tensor(Shape{2, 4, 4}, rng);
        const double err = grad_check<double>(
            [&](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_all(t.mul(t.causal_softmax(v[0]), t.constant(w)));
            },
            {s}, eps);
        CHECK(err < tol);
    }

    SECTION("layer_norm") {
        Tensor<double> x = rand_tensor(Shape{3, 5}, rng);
        Tensor<double> g = rand_tensor(Shape{5}, rng, 0.3);
        Tensor<double> b = rand_tensor(Shape{5}, rng, 0.3);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_all(t.tanh_op(t.layer_norm(v[0], v[1], v[2])));
            },
            {x, g, b}, eps);
        CHECK(err < tol);
    }

    SECTION("embedding + slice_rows + add_seq") {
        Tensor<double> table = rand_tensor(Shape{7, 3}, rng);
        Tensor<double> pos = rand_tensor(Shape{6, 3}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var e = t.reshape(t.embedding(v[0], {1, 4, 2, 0}), Shape{2, 2, 3});
                Var x = t.add_seq(e, t.slice_rows(v[1], 2));
                return t.sum_all(t.gelu(x));
            },
            {table, pos}, eps);
        CHECK(err < tol);
    }

    SECTION("concat_last + broadcast_bt") {
        Tensor<double> h = rand_tensor(Shape{2, 3, 4}, rng);
        Tensor<double> u = rand_tensor(Shape{2}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var ub = t.broadcast_bt(v[1], 2, 3);
                return t.sum_all(t.gelu(t.concat_last(v[0], ub)));
            },
            {h, u}, eps);
        CHECK(err < tol);
    }

    SECTION("gather_time + cross_entropy_mean") {
        Tensor<double> logits = rand_tensor(Shape{2, 3, 5}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var at = t.gather_time(v[0], {2, 1});
                return t.cross_entropy_mean(at, {0, 4});
            },
            {logits}, eps);
        CHECK(err < tol);
    }

    SECTION("mean_all") {
        Tensor<double> x = rand_tensor(Shape{6}, rng);
        const double err = grad_check<double>(
            [](Tape<double>& t, const std::vector<Var>& v) { return t.mean_all(t.mul(v[0], v[0])); }, {x},
            eps);
        CHECK(err < tol);
    }
}

TEST_CASE("vjp of a composition equals chained per-op vjps") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor<double> x = rand_tensor(Shape{4}, rng);
        Tensor<double> cot = rand_tensor(Shape{4}, rng);

        // whole chain: gelu(tanh(x * x))
        auto whole = vjp<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                return t.gelu(t.tanh_op(t.mul(v[0], v[0])));
            },
            {x}, cot);

        // chained: per-op vjps applied in reverse
        Tensor<double> y1 = mul(x, x);
        Tensor<double> y2(Shape{4});
        for (int i = 0; i < 4; ++i) y2[i] = std::tanh(y1[i]);
        auto g3 = vjp<double>(
            [](Tape<double>& t, const std::vector<Var>& v) { return t.gelu(v[0]); }, {y2}, cot);
        auto g2 = vjp<double>(
            [](Tape<double>& t, const std::vector<Var>& v) { return t.tanh_op(v[0]); }, {y1}, g3[0]);
        auto g1 = vjp<double>(
            [](Tape<double>& t, const std::vector<Var>& v) { return t.mul(v[0], v[0]); }, {x}, g2[0]);

        for (int i = 0; i < 4; ++i)
            CHECK(whole[0][i] == Catch::Approx(g1[0][i]).epsilon(1e-12).margin(1e-14));
    }
}

TEST_CASE("identical inputs give bit-identical vjp outputs") {
    Rng rng(5);
    Tensor<double> x = rand_tensor(Shape{8}, rng);
    Tensor<double> c = rand_tensor(Shape{1}, rng);
    auto run = [&]() {
        return vjp<double>(
            [](Tape<double>& t, const std::vector<Var>& v) {
                return t.mean_all(t.gelu(t.mul(v[0], v[0])));
            },
            {x}, Tensor<double>::scalar(c[0]));
    };
    auto a = run();
    auto b = run();
    REQUIRE(a[0].numel() == b[0].numel());
    CHECK(std::memcmp(a[0].data(), b[0].data(), sizeof(double) * 8) == 0);
}

TEST_CASE("cotangent shape mismatch is a contract violation") {
    Tensor<double> x(Shape{3}, {1, 2, 3});
    CHECK_THROWS_AS(vjp<double>([](Tape<double>& t, const std::vector<Var>& v) { return v[0]; }, {x},
                                Tensor<double>(Shape{2})),
                    ContractViolation);
}

TEST_CASE("op without a reverse rule raises UnsupportedOp") {
    Tensor<double> x(Shape{2}, {1, 2});
    CHECK_THROWS_AS(vjp<double>(
                        [](Tape<double>& t, const std::vector<Var>& v) {
                            return t.sum_all(t.nondiff(v[0], "argmax"));
                        },
                        {x}, Tensor<double>::scalar(1.0)),
                    UnsupportedOp);
}

TEST_CASE("non-finite analytic gradient raises a diagnostic naming the op") {
    Tensor<double> x(Shape{1}, {std::numeric_limits<double>::infinity()});
    Tape<double> t;
    t.set_check_finite(true);
    Var v = t.leaf(x, true);
    Var y = t.sum_all(t.gelu(v));
    try {
        t.backward(y, Tensor<double>::scalar(1.0));
        FAIL("expected a diagnostic error");
    } catch (const ContractViolation& e) {
        CHECK(std::string(e.what()).find("gelu") != std::string::npos);
    }
}
