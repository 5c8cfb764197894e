#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "odelm/errors.hpp"

namespace odelm {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

using Shape = std::vector<std::int64_t>;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::f32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::f64; }

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw ContractViolation("negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

// Dense row-major n-d array. Rank-0 (shape []) holds a single scalar.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
            throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    Dtype dtype() const { return dtype_of<T>(); }
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T item() const {
        if (numel() != 1) throw ContractViolation("item() on tensor of " + std::to_string(numel()) + " elements");
        return data_[0];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ContractViolation("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> d(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(d));
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// ---- elementwise kernels ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    return out;
}

// y + h*k, written as an explicit loop so a unit step is bitwise a residual add
template <class T>
Tensor<T> axpy(const Tensor<T>& y, T h, const Tensor<T>& k) {
    require_same_shape(y, k, "axpy");
    Tensor<T> out(y.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) out[i] = y[i] + h * k[i];
    return out;
}

template <class T>
void add_inplace(Tensor<T>& y, const Tensor<T>& k, T c = T(1)) {
    require_same_shape(y, k, "add_inplace");
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += c * k[i];
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "dot");
    T s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

template <class T>
T frob_norm(const Tensor<T>& a) {
    T s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
    return std::sqrt(s);
}

template <class T>
T linf_norm(const Tensor<T>& a) {
    T m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <class T>
bool all_finite(const Tensor<T>& a) {
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (!std::isfinite(a[i])) return false;
    return true;
}

// exact GELU, shared by the tape op and the solver-side field evaluation
template <class T>
T gelu_value(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <class T>
T gelu_deriv(T x) {
    const T phi = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return phi + x * pdf;
}

// ---- matmul kernels (Eigen-backed) ----

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[M,N] (+)= A[M,K] @ B[K,N]
template <class T>
void mm_nn(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N, bool accumulate = false) {
    Eigen::Map<const RowMat<T>> A(a, M, K), B(b, K, N);
    Eigen::Map<RowMat<T>> C(c, M, N);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C[M,N] (+)= A[M,K] @ B[N,K]^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N, bool accumulate = false) {
    Eigen::Map<const RowMat<T>> A(a, M, K), B(b, N, K);
    Eigen::Map<RowMat<T>> C(c, M, N);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C[M,N] (+)= A[K,M]^T @ B[K,N]
template <class T>
void mm_tn(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N, bool accumulate = false) {
    Eigen::Map<const RowMat<T>> A(a, K, M), B(b, K, N);
    Eigen::Map<RowMat<T>> C(c, M, N);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ContractViolation("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    Tensor<T> out(Shape{a.dim(0), b.dim(1)});
    mm_nn(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
    return out;
}

// ---- deterministic RNG ----

// xoshiro-free: mt19937_64 + explicit Box-Muller so draws do not depend on
// the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() {  // in [0,1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::uint64_t next_u64() { return gen_(); }

    // unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = 0;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    template <class T>
    Tensor<T> normal_tensor(Shape shape, double stddev) {
        Tensor<T> t(std::move(shape));
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal() * stddev);
        return t;
    }

private:
    std::mt19937_64 gen_;
};

inline std::string fmt_g(double v, int sig = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", sig, v);
    return buf;
}

}  // namespace odelm
