#include <catch2/catch_amalgamated.hpp>

#include "odelm/tensor.hpp"

using namespace odelm;

TEST_CASE("tensor shape/data invariant") {
    CHECK_NOTHROW(Tensor<double>(Shape{2, 3}, std::vector<double>(6, 0.0)));
    CHECK_THROWS_AS(Tensor<double>(Shape{2, 3}, std::vector<double>(5, 0.0)), ContractViolation);
    Tensor<double> s = Tensor<double>::scalar(4.0);
    CHECK(s.rank() == 0);
    CHECK(s.numel() == 1);
    CHECK(s.item() == 4.0);
}

TEST_CASE("elementwise ops reject mismatched shapes") {
    Tensor<double> a(Shape{2, 2});
    Tensor<double> b(Shape{4});
    CHECK_THROWS_AS(add(a, b), ContractViolation);
    CHECK_THROWS_AS(mul(a, b), ContractViolation);
    CHECK_THROWS_AS(sub(a, b), ContractViolation);
}

TEST_CASE("matmul known values") {
    Tensor<double> a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor<double> b(Shape{2, 2}, {5, 6, 7, 8});
    Tensor<double> c = matmul(a, b);
    CHECK(c[0] == 19.0);
    CHECK(c[1] == 22.0);
    CHECK(c[2] == 43.0);
    CHECK(c[3] == 50.0);
    CHECK_THROWS_AS(matmul(a, Tensor<double>(Shape{3, 2})), ContractViolation);
}

TEST_CASE("reshape preserves element count") {
    Tensor<double> a(Shape{2, 3});
    CHECK_NOTHROW(a.reshaped(Shape{3, 2}));
    CHECK_THROWS_AS(a.reshaped(Shape{4, 2}), ContractViolation);
}

TEST_CASE("rng is deterministic under equal seeds") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    Rng c(43);
    bool any_diff = false;
    Rng a2(42);
    for (int i = 0; i < 10; ++i) any_diff = any_diff || (a2.uniform() != c.uniform());
    CHECK(any_diff);
}

TEST_CASE("gelu endpoints") {
    CHECK(gelu_value(0.0) == 0.0);
    CHECK(gelu_value(10.0) == Catch::Approx(10.0).epsilon(1e-9));
    CHECK(gelu_value(-10.0) == Catch::Approx(0.0).margin(1e-8));
    CHECK(gelu_deriv(0.0) == Catch::Approx(0.5).epsilon(1e-12));
}
