#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "odelm/tensor.hpp"

namespace odelm {

// Reverse-mode tape over whole tensors. Nodes are appended in evaluation
// order, so parent ids are always smaller than child ids and the reverse
// sweep is a plain index walk.
template <class T>
class Tape;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool grad_alloc = false;
        bool requires_grad = false;
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;
        const char* op = "leaf";
    };

public:
    Var leaf(Tensor<T> v, bool requires_grad = true) {
        return push(std::move(v), requires_grad, {}, nullptr, "leaf");
    }
    Var constant(Tensor<T> v) { return push(std::move(v), false, {}, nullptr, "const"); }

    const Tensor<T>& val(Var v) const { return nodes_[check(v)].value; }
    const Tensor<T>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    // Gradient of the last backward() w.r.t. `v` (zeros if the output did not depend on it).
    Tensor<T> grad(Var v) const {
        const Node& n = nodes_[check(v)];
        if (n.grad_alloc) return n.grad;
        return Tensor<T>::zeros(n.value.shape());
    }

    std::size_t size() const { return nodes_.size(); }
    void set_check_finite(bool on) { check_finite_ = on; }

    void backward(Var out, const Tensor<T>& cotangent) {
        const std::size_t oid = check(out);
        if (!nodes_[oid].value.same_shape(cotangent))
            throw ContractViolation("backward: cotangent shape " + shape_str(cotangent.shape()) +
                                    " does not match output shape " + shape_str(nodes_[oid].value.shape()));
        accumulate(static_cast<int>(oid), cotangent);
        for (std::int64_t id = static_cast<std::int64_t>(oid); id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.grad_alloc || !n.requires_grad || !n.backward) continue;
            n.backward(*this, static_cast<int>(id));
            if (check_finite_) {
                for (int p : n.parents) {
                    const Node& pn = nodes_[static_cast<std::size_t>(p)];
                    if (pn.grad_alloc && !all_finite(pn.grad))
                        throw ContractViolation(std::string("non-finite gradient produced by op '") + n.op + "'");
                }
            }
        }
    }

    // ---- ops ----

    Var add(Var a, Var b) {
        require_same_shape(val(a), val(b), "add");
        Tensor<T> out = odelm::add(val(a), val(b));
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        t.accumulate(a.id, g);
                        t.accumulate(b.id, g);
                    },
                    "add");
    }

    Var sub(Var a, Var b) {
        require_same_shape(val(a), val(b), "sub");
        Tensor<T> out = odelm::sub(val(a), val(b));
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        t.accumulate(a.id, g);
                        t.accumulate(b.id, odelm::scale(g, T(-1)));
                    },
                    "sub");
    }

    Var mul(Var a, Var b) {
        require_same_shape(val(a), val(b), "mul");
        Tensor<T> out = odelm::mul(val(a), val(b));
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        t.accumulate(a.id, odelm::mul(g, t.val(b.id)));
                        t.accumulate(b.id, odelm::mul(g, t.val(a.id)));
                    },
                    "mul");
    }

    Var scale(Var a, T c) {
        Tensor<T> out = odelm::scale(val(a), c);
        return push(std::move(out), needs(a), {a.id},
                    [a, c](Tape& t, int self) { t.accumulate(a.id, odelm::scale(t.node(self).grad, c)); },
                    "scale");
    }

    // a * s where s is a rank-0 var (the learned output scale path)
    Var mul_scalar(Var a, Var s) {
        if (val(s).numel() != 1) throw ContractViolation("mul_scalar: scalar operand must have 1 element");
        const T sv = val(s).item();
        Tensor<T> out = odelm::scale(val(a), sv);
        return push(std::move(out), needs(a) || needs(s), {a.id, s.id},
                    [a, s](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const T svv = t.val(s.id).item();
                        t.accumulate(a.id, odelm::scale(g, svv));
                        Tensor<T> ds = Tensor<T>::full(t.val(s.id).shape(), odelm::dot(g, t.val(a.id)));
                        t.accumulate(s.id, ds);
                    },
                    "mul_scalar");
    }

    // x[..., D] + bias[D]
    Var add_bias(Var x, Var bias) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& bv = val(bias);
        const std::int64_t D = bv.numel();
        if (xv.rank() < 1 || xv.dim(xv.rank() - 1) != D)
            throw ContractViolation("add_bias: trailing dim mismatch " + shape_str(xv.shape()) + " vs " +
                                    shape_str(bv.shape()));
        Tensor<T> out(xv.shape());
        const std::int64_t rows = xv.numel() / D;
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t d = 0; d < D; ++d) out[r * D + d] = xv[r * D + d] + bv[d];
        return push(std::move(out), needs(x) || needs(bias), {x.id, bias.id},
                    [x, bias, D](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        t.accumulate(x.id, g);
                        Tensor<T> db(t.val(bias.id).shape());
                        const std::int64_t rows = g.numel() / D;
                        for (std::int64_t r = 0; r < rows; ++r)
                            for (std::int64_t d = 0; d < D; ++d) db[d] += g[r * D + d];
                        t.accumulate(bias.id, db);
                    },
                    "add_bias");
    }

    Var reshape(Var a, Shape s) {
        Tensor<T> out = val(a).reshaped(s);
        Shape orig = val(a).shape();
        return push(std::move(out), needs(a), {a.id},
                    [a, orig](Tape& t, int self) { t.accumulate(a.id, t.node(self).grad.reshaped(orig)); },
                    "reshape");
    }

    Var matmul(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        Tensor<T> out = odelm::matmul(av, bv);
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const Tensor<T>& av2 = t.val(a.id);
                        const Tensor<T>& bv2 = t.val(b.id);
                        const std::int64_t M = av2.dim(0), K = av2.dim(1), N = bv2.dim(1);
                        if (t.node(a.id).requires_grad) {
                            Tensor<T>& da = t.grad_buf(a.id);
                            mm_nt(g.data(), bv2.data(), da.data(), M, N, K, true);
                        }
                        if (t.node(b.id).requires_grad) {
                            Tensor<T>& db = t.grad_buf(b.id);
                            mm_tn(av2.data(), g.data(), db.data(), K, M, N, true);
                        }
                    },
                    "matmul");
    }

    // [G,M,K] @ [G,K,P] -> [G,M,P]
    Var bmm(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
            throw ContractViolation("bmm: incompatible shapes " + shape_str(av.shape()) + " @ " + shape_str(bv.shape()));
        const std::int64_t G = av.dim(0), M = av.dim(1), K = av.dim(2), P = bv.dim(2);
        Tensor<T> out(Shape{G, M, P});
        for (std::int64_t g = 0; g < G; ++g)
            mm_nn(av.data() + g * M * K, bv.data() + g * K * P, out.data() + g * M * P, M, K, P);
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b, G, M, K, P](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const Tensor<T>& av2 = t.val(a.id);
                        const Tensor<T>& bv2 = t.val(b.id);
                        if (t.node(a.id).requires_grad) {
                            Tensor<T>& da = t.grad_buf(a.id);
                            for (std::int64_t i = 0; i < G; ++i)
                                mm_nt(g.data() + i * M * P, bv2.data() + i * K * P, da.data() + i * M * K, M, P, K, true);
                        }
                        if (t.node(b.id).requires_grad) {
                            Tensor<T>& db = t.grad_buf(b.id);
                            for (std::int64_t i = 0; i < G; ++i)
                                mm_tn(av2.data() + i * M * K, g.data() + i * M * P, db.data() + i * K * P, K, M, P, true);
                        }
                    },
                    "bmm");
    }

    // [G,M,K] @ [G,P,K]^T -> [G,M,P]
    Var bmm_nt(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
            throw ContractViolation("bmm_nt: incompatible shapes " + shape_str(av.shape()) + " @ " +
                                    shape_str(bv.shape()) + "^T");
        const std::int64_t G = av.dim(0), M = av.dim(1), K = av.dim(2), P = bv.dim(1);
        Tensor<T> out(Shape{G, M, P});
        for (std::int64_t g = 0; g < G; ++g)
            mm_nt(av.data() + g * M * K, bv.data() + g * P * K, out.data() + g * M * P, M, K, P);
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b, G, M, K, P](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const Tensor<T>& av2 = t.val(a.id);
                        const Tensor<T>& bv2 = t.val(b.id);
                        if (t.node(a.id).requires_grad) {
                            Tensor<T>& da = t.grad_buf(a.id);
                            for (std::int64_t i = 0; i < G; ++i)
                                mm_nn(g.data() + i * M * P, bv2.data() + i * P * K, da.data() + i * M * K, M, P, K, true);
                        }
                        if (t.node(b.id).requires_grad) {
                            Tensor<T>& db = t.grad_buf(b.id);
                            for (std::int64_t i = 0; i < G; ++i)
                                mm_tn(g.data() + i * M * P, av2.data() + i * M * K, db.data() + i * P * K, P, M, K, true);
                        }
                    },
                    "bmm_nt");
    }

    // [d0,d1,d2,d3] -> [d0,d2,d1,d3]
    Var permute0213(Var a) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 4) throw ContractViolation("permute0213 expects rank-4, got " + shape_str(av.shape()));
        Tensor<T> out = permute_impl(av);
        return push(std::move(out), needs(a), {a.id},
                    [a](Tape& t, int self) { t.accumulate(a.id, permute_impl(t.node(self).grad)); },
                    "permute0213");
    }

    // rows i of each [T,T] matrix softmax over columns j<=i; j>i fixed at 0
    Var causal_softmax(Var scores) {
        const Tensor<T>& sv = val(scores);
        if (sv.rank() != 3 || sv.dim(1) != sv.dim(2))
            throw ContractViolation("causal_softmax expects [G,T,T], got " + shape_str(sv.shape()));
        const std::int64_t G = sv.dim(0), Tn = sv.dim(1);
        Tensor<T> out(sv.shape());
        for (std::int64_t g = 0; g < G; ++g)
            for (std::int64_t i = 0; i < Tn; ++i) {
                const T* row = sv.data() + (g * Tn + i) * Tn;
                T* orow = out.data() + (g * Tn + i) * Tn;
                T mx = row[0];
                for (std::int64_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
                T denom = 0;
                for (std::int64_t j = 0; j <= i; ++j) {
                    orow[j] = std::exp(row[j] - mx);
                    denom += orow[j];
                }
                for (std::int64_t j = 0; j <= i; ++j) orow[j] /= denom;
                for (std::int64_t j = i + 1; j < Tn; ++j) orow[j] = 0;
            }
        return push(std::move(out), needs(scores), {scores.id},
                    [scores, G, Tn](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const Tensor<T>& y = t.val(self);
                        Tensor<T> ds(y.shape());
                        for (std::int64_t b = 0; b < G; ++b)
                            for (std::int64_t i = 0; i < Tn; ++i) {
                                const std::int64_t off = (b * Tn + i) * Tn;
                                T acc = 0;
                                for (std::int64_t j = 0; j <= i; ++j) acc += g[off + j] * y[off + j];
                                for (std::int64_t j = 0; j <= i; ++j) ds[off + j] = y[off + j] * (g[off + j] - acc);
                            }
                        t.accumulate(scores.id, ds);
                    },
                    "causal_softmax");
    }

    // LayerNorm over the trailing dim with affine params
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        const Tensor<T>& xv = val(x);
        const std::int64_t D = val(gamma).numel();
        if (xv.dim(xv.rank() - 1) != D || val(beta).numel() != D)
            throw ContractViolation("layer_norm: affine params must match trailing dim");
        const std::int64_t rows = xv.numel() / D;
        Tensor<T> out(xv.shape());
        Tensor<T> xhat(xv.shape());
        Tensor<T> inv_std(Shape{rows});
        const Tensor<T>& gv = val(gamma);
        const Tensor<T>& bvv = val(beta);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * D;
            T mean = 0;
            for (std::int64_t d = 0; d < D; ++d) mean += xr[d];
            mean /= static_cast<T>(D);
            T var = 0;
            for (std::int64_t d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
            var /= static_cast<T>(D);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            for (std::int64_t d = 0; d < D; ++d) {
                const T xh = (xr[d] - mean) * is;
                xhat[r * D + d] = xh;
                out[r * D + d] = gv[d] * xh + bvv[d];
            }
        }
        return push(std::move(out), needs(x) || needs(gamma) || needs(beta), {x.id, gamma.id, beta.id},
                    [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), D](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const std::int64_t rows = g.numel() / D;
                        const Tensor<T>& gv2 = t.val(gamma.id);
                        if (t.node(gamma.id).requires_grad || t.node(beta.id).requires_grad) {
                            Tensor<T> dgamma(gv2.shape()), dbeta(gv2.shape());
                            for (std::int64_t r = 0; r < rows; ++r)
                                for (std::int64_t d = 0; d < D; ++d) {
                                    dgamma[d] += g[r * D + d] * xhat[r * D + d];
                                    dbeta[d] += g[r * D + d];
                                }
                            t.accumulate(gamma.id, dgamma);
                            t.accumulate(beta.id, dbeta);
                        }
                        if (t.node(x.id).requires_grad) {
                            Tensor<T> dx(g.shape());
                            for (std::int64_t r = 0; r < rows; ++r) {
                                T sum_gg = 0, sum_ggx = 0;
                                for (std::int64_t d = 0; d < D; ++d) {
                                    const T gg = g[r * D + d] * gv2[d];
                                    sum_gg += gg;
                                    sum_ggx += gg * xhat[r * D + d];
                                }
                                const T is = inv_std[r];
                                for (std::int64_t d = 0; d < D; ++d) {
                                    const T gg = g[r * D + d] * gv2[d];
                                    dx[r * D + d] =
                                        is * (gg - (sum_gg + xhat[r * D + d] * sum_ggx) / static_cast<T>(D));
                                }
                            }
                            t.accumulate(x.id, dx);
                        }
                    },
                    "layer_norm");
    }

    Var gelu(Var a) {
        const Tensor<T>& av = val(a);
        Tensor<T> out(av.shape());
        for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = gelu_value(av[i]);
        return push(std::move(out), needs(a), {a.id},
                    [a](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const Tensor<T>& xv = t.val(a.id);
                        Tensor<T> dx(xv.shape());
                        for (std::int64_t i = 0; i < xv.numel(); ++i) dx[i] = g[i] * gelu_deriv(xv[i]);
                        t.accumulate(a.id, dx);
                    },
                    "gelu");
    }

    Var tanh_op(Var a) {
        const Tensor<T>& av = val(a);
        Tensor<T> out(av.shape());
        for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = std::tanh(av[i]);
        return push(std::move(out), needs(a), {a.id},
                    [a](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        const Tensor<T>& y = t.val(self);
                        Tensor<T> dx(y.shape());
                        for (std::int64_t i = 0; i < y.numel(); ++i) dx[i] = g[i] * (T(1) - y[i] * y[i]);
                        t.accumulate(a.id, dx);
                    },
                    "tanh");
    }

    // out[n,:] = table[ids[n],:]
    Var embedding(Var table, const std::vector<std::int64_t>& ids) {
        const Tensor<T>& tv = val(table);
        if (tv.rank() != 2) throw ContractViolation("embedding table must be rank-2");
        const std::int64_t V = tv.dim(0), D = tv.dim(1);
        const std::int64_t N = static_cast<std::int64_t>(ids.size());
        Tensor<T> out(Shape{N, D});
        for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t idx = ids[static_cast<std::size_t>(n)];
            if (idx < 0 || idx >= V) throw ContractViolation("embedding id " + std::to_string(idx) + " out of range");
            std::copy(tv.data() + idx * D, tv.data() + (idx + 1) * D, out.data() + n * D);
        }
        return push(std::move(out), needs(table), {table.id},
                    [table, ids, D](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        Tensor<T> dt(t.val(table.id).shape());
                        for (std::size_t n = 0; n < ids.size(); ++n)
                            for (std::int64_t d = 0; d < D; ++d)
                                dt[ids[n] * D + d] += g[static_cast<std::int64_t>(n) * D + d];
                        t.accumulate(table.id, dt);
                    },
                    "embedding");
    }

    // first n rows of a rank-2 table
    Var slice_rows(Var table, std::int64_t n) {
        const Tensor<T>& tv = val(table);
        if (tv.rank() != 2 || n > tv.dim(0)) throw ContractViolation("slice_rows: bad row count");
        const std::int64_t D = tv.dim(1);
        Tensor<T> out(Shape{n, D});
        std::copy(tv.data(), tv.data() + n * D, out.data());
        return push(std::move(out), needs(table), {table.id},
                    [table, n, D](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        Tensor<T> dt(t.val(table.id).shape());
                        std::copy(g.data(), g.data() + n * D, dt.data());
                        t.accumulate(table.id, dt);
                    },
                    "slice_rows");
    }

    // x[B,T,D] + p[T,D], broadcast over the batch axis
    Var add_seq(Var x, Var p) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& pv = val(p);
        if (xv.rank() != 3 || pv.rank() != 2 || xv.dim(1) != pv.dim(0) || xv.dim(2) != pv.dim(1))
            throw ContractViolation("add_seq: " + shape_str(xv.shape()) + " vs " + shape_str(pv.shape()));
        const std::int64_t B = xv.dim(0), TD = pv.numel();
        Tensor<T> out(xv.shape());
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < TD; ++i) out[b * TD + i] = xv[b * TD + i] + pv[i];
        return push(std::move(out), needs(x) || needs(p), {x.id, p.id},
                    [x, p, B, TD](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        t.accumulate(x.id, g);
                        Tensor<T> dp(t.val(p.id).shape());
                        for (std::int64_t b = 0; b < B; ++b)
                            for (std::int64_t i = 0; i < TD; ++i) dp[i] += g[b * TD + i];
                        t.accumulate(p.id, dp);
                    },
                    "add_seq");
    }

    // concat along the trailing dim of two rank-3 tensors
    Var concat_last(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(1) != bv.dim(1))
            throw ContractViolation("concat_last: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
        const std::int64_t R = av.dim(0) * av.dim(1), Da = av.dim(2), Db = bv.dim(2);
        Tensor<T> out(Shape{av.dim(0), av.dim(1), Da + Db});
        for (std::int64_t r = 0; r < R; ++r) {
            std::copy(av.data() + r * Da, av.data() + (r + 1) * Da, out.data() + r * (Da + Db));
            std::copy(bv.data() + r * Db, bv.data() + (r + 1) * Db, out.data() + r * (Da + Db) + Da);
        }
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [a, b, R, Da, Db](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        Tensor<T> da(t.val(a.id).shape()), db(t.val(b.id).shape());
                        for (std::int64_t r = 0; r < R; ++r) {
                            std::copy(g.data() + r * (Da + Db), g.data() + r * (Da + Db) + Da, da.data() + r * Da);
                            std::copy(g.data() + r * (Da + Db) + Da, g.data() + (r + 1) * (Da + Db), db.data() + r * Db);
                        }
                        t.accumulate(a.id, da);
                        t.accumulate(b.id, db);
                    },
                    "concat_last");
    }

    // v[c] -> [B,T,c]; the control-signal broadcast rule
    Var broadcast_bt(Var v, std::int64_t B, std::int64_t Tn) {
        const Tensor<T>& vv = val(v);
        if (vv.rank() != 1) throw ContractViolation("broadcast_bt expects a vector, got " + shape_str(vv.shape()));
        const std::int64_t C = vv.dim(0);
        Tensor<T> out(Shape{B, Tn, C});
        for (std::int64_t r = 0; r < B * Tn; ++r)
            for (std::int64_t c = 0; c < C; ++c) out[r * C + c] = vv[c];
        return push(std::move(out), needs(v), {v.id},
                    [v, B, Tn, C](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        Tensor<T> dv(t.val(v.id).shape());
                        for (std::int64_t r = 0; r < B * Tn; ++r)
                            for (std::int64_t c = 0; c < C; ++c) dv[c] += g[r * C + c];
                        t.accumulate(v.id, dv);
                    },
                    "broadcast_bt");
    }

    Var sum_all(Var a) {
        T s = 0;
        const Tensor<T>& av = val(a);
        for (std::int64_t i = 0; i < av.numel(); ++i) s += av[i];
        return push(Tensor<T>::scalar(s), needs(a), {a.id},
                    [a](Tape& t, int self) {
                        const T g = t.node(self).grad.item();
                        t.accumulate(a.id, Tensor<T>::full(t.val(a.id).shape(), g));
                    },
                    "sum_all");
    }

    Var mean_all(Var a) {
        const std::int64_t n = val(a).numel();
        Var s = sum_all(a);
        return scale(s, T(1) / static_cast<T>(n));
    }

    // mean over rows of -log softmax(logits)[target]
    Var cross_entropy_mean(Var logits, const std::vector<std::int64_t>& targets) {
        const Tensor<T>& lv = val(logits);
        if (lv.rank() != 2 || static_cast<std::int64_t>(targets.size()) != lv.dim(0))
            throw ContractViolation("cross_entropy_mean: logits " + shape_str(lv.shape()) + " vs " +
                                    std::to_string(targets.size()) + " targets");
        const std::int64_t N = lv.dim(0), V = lv.dim(1);
        Tensor<T> probs(lv.shape());
        T loss = 0;
        for (std::int64_t n = 0; n < N; ++n) {
            const T* row = lv.data() + n * V;
            T mx = row[0];
            for (std::int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
            T denom = 0;
            for (std::int64_t v = 0; v < V; ++v) {
                probs[n * V + v] = std::exp(row[v] - mx);
                denom += probs[n * V + v];
            }
            for (std::int64_t v = 0; v < V; ++v) probs[n * V + v] /= denom;
            const std::int64_t tgt = targets[static_cast<std::size_t>(n)];
            if (tgt < 0 || tgt >= V) throw ContractViolation("cross_entropy_mean: target out of range");
            loss += -(row[tgt] - mx - std::log(denom));
        }
        loss /= static_cast<T>(N);
        return push(Tensor<T>::scalar(loss), needs(logits), {logits.id},
                    [logits, targets, probs = std::move(probs), N, V](Tape& t, int self) {
                        const T g = t.node(self).grad.item();
                        Tensor<T> dl(t.val(logits.id).shape());
                        const T inv = g / static_cast<T>(N);
                        for (std::int64_t n = 0; n < N; ++n) {
                            for (std::int64_t v = 0; v < V; ++v) dl[n * V + v] = probs[n * V + v] * inv;
                            dl[n * V + targets[static_cast<std::size_t>(n)]] -= inv;
                        }
                        t.accumulate(logits.id, dl);
                    },
                    "cross_entropy_mean");
    }

    // out[b,:] = a[b, pos[b], :]
    Var gather_time(Var a, const std::vector<std::int64_t>& pos) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 3 || static_cast<std::int64_t>(pos.size()) != av.dim(0))
            throw ContractViolation("gather_time: bad arguments");
        const std::int64_t B = av.dim(0), Tn = av.dim(1), V = av.dim(2);
        Tensor<T> out(Shape{B, V});
        for (std::int64_t b = 0; b < B; ++b) {
            const std::int64_t p = pos[static_cast<std::size_t>(b)];
            if (p < 0 || p >= Tn) throw ContractViolation("gather_time: position out of range");
            std::copy(av.data() + (b * Tn + p) * V, av.data() + (b * Tn + p + 1) * V, out.data() + b * V);
        }
        return push(std::move(out), needs(a), {a.id},
                    [a, pos, Tn, V](Tape& t, int self) {
                        const Tensor<T>& g = t.node(self).grad;
                        Tensor<T> da(t.val(a.id).shape());
                        for (std::size_t b = 0; b < pos.size(); ++b)
                            for (std::int64_t v = 0; v < V; ++v)
                                da[(static_cast<std::int64_t>(b) * Tn + pos[b]) * V + v] =
                                    g[static_cast<std::int64_t>(b) * V + v];
                        t.accumulate(a.id, da);
                    },
                    "gather_time");
    }

    // forward passthrough without a reverse rule; differentiating through it is an error
    Var nondiff(Var a, const char* name = "nondiff") {
        Tensor<T> out = val(a);
        return push(std::move(out), needs(a), {a.id},
                    [name](Tape&, int) {
                        throw UnsupportedOp(std::string("op '") + name + "' has no reverse rule");
                    },
                    name);
    }

    // custom op with an externally supplied reverse rule (used by the ODE block)
    Var push_custom(Tensor<T> value, std::vector<int> parents, std::function<void(Tape&, int)> backward,
                    const char* op) {
        bool rg = false;
        for (int p : parents) rg = rg || nodes_[static_cast<std::size_t>(p)].requires_grad;
        return push(std::move(value), rg, std::move(parents), std::move(backward), op);
    }

    // internal access used by op closures
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    Tensor<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_alloc) {
            n.grad = Tensor<T>::zeros(n.value.shape());
            n.grad_alloc = true;
        }
        return n.grad;
    }
    void accumulate(int id, const Tensor<T>& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        add_inplace(grad_buf(id), g);
    }

private:
    static Tensor<T> permute_impl(const Tensor<T>& in) {
        const std::int64_t d0 = in.dim(0), d1 = in.dim(1), d2 = in.dim(2), d3 = in.dim(3);
        Tensor<T> out(Shape{d0, d2, d1, d3});
        for (std::int64_t a = 0; a < d0; ++a)
            for (std::int64_t b = 0; b < d1; ++b)
                for (std::int64_t c = 0; c < d2; ++c)
                    std::copy(in.data() + ((a * d1 + b) * d2 + c) * d3,
                              in.data() + ((a * d1 + b) * d2 + c + 1) * d3,
                              out.data() + ((a * d2 + c) * d1 + b) * d3);
        return out;
    }

    bool needs(Var v) const { return nodes_[check(v)].requires_grad; }

    std::size_t check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ContractViolation("invalid tape variable");
        return static_cast<std::size_t>(v.id);
    }

    Var push(Tensor<T> value, bool requires_grad, std::vector<int> parents,
             std::function<void(Tape&, int)> backward, const char* op) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.parents = std::move(parents);
        if (requires_grad) n.backward = std::move(backward);
        n.op = op;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    bool check_finite_ = false;
};

// vjp per the substrate contract: f builds a graph from leaves made of
// `inputs`; returns d(cotangent . f)/d(input) for every input.
template <class T, class F>
std::vector<Tensor<T>> vjp(F&& f, const std::vector<Tensor<T>>& inputs, const Tensor<T>& cotangent) {
    Tape<T> tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var out = f(tape, vars);
    tape.backward(out, cotangent);
    std::vector<Tensor<T>> grads;
    grads.reserve(vars.size());
    for (Var v : vars) grads.push_back(tape.grad(v));
    return grads;
}

}  // namespace odelm
