#pragma once

#include <utility>

#include "odelm/autograd.hpp"
#include "odelm/tensor.hpp"

namespace odelm {

// The control-conditioned vector field
//   dH/dtau = alpha * MLP(concat(H, broadcast(u), broadcast(tau)))
// with one hidden GELU layer of width hidden_dim. The numeric eval() mirrors
// the tape path op for op so the two agree bitwise.
template <class T>
struct ControlledVectorField {
    std::int64_t d_model = 0;
    std::int64_t control_dim = 0;
    std::int64_t hidden_dim = 0;
    Tensor<T> w1;     // [D+c+1, Dh]
    Tensor<T> b1;     // [Dh]
    Tensor<T> w2;     // [Dh, D]
    Tensor<T> b2;     // [D]
    Tensor<T> alpha;  // rank-0 learned output scale

    static ControlledVectorField init(std::int64_t d_model, std::int64_t control_dim, Rng& rng,
                                      T alpha0 = T(0.1), std::int64_t hidden_dim = 0) {
        ControlledVectorField f;
        f.d_model = d_model;
        f.control_dim = control_dim;
        f.hidden_dim = hidden_dim > 0 ? hidden_dim : 4 * d_model;
        // He fan-in scaling, the standard Gaussian init for ReLU-family MLPs
        const std::int64_t in_dim = d_model + control_dim + 1;
        f.w1 = rng.normal_tensor<T>(Shape{in_dim, f.hidden_dim}, std::sqrt(2.0 / static_cast<double>(in_dim)));
        f.b1 = Tensor<T>::zeros(Shape{f.hidden_dim});
        f.w2 = rng.normal_tensor<T>(Shape{f.hidden_dim, d_model},
                                    std::sqrt(2.0 / static_cast<double>(f.hidden_dim)));
        f.b2 = Tensor<T>::zeros(Shape{d_model});
        f.alpha = Tensor<T>::scalar(alpha0);
        return f;
    }

    void check_inputs(const Tensor<T>& H, T tau, const Tensor<T>& u) const {
        if (H.rank() != 3 || H.dim(2) != d_model)
            throw ContractViolation("field: state must be [B,T," + std::to_string(d_model) + "], got " +
                                    shape_str(H.shape()));
        if (u.numel() != control_dim)
            throw ContractViolation("field: control signal has " + std::to_string(u.numel()) +
                                    " components, expected " + std::to_string(control_dim));
        if (static_cast<double>(tau) < -1e-9 || static_cast<double>(tau) > 1.0 + 1e-9)
            throw ContractViolation("field: tau outside [0,1]");
    }

    // numeric evaluation used inside solvers
    Tensor<T> eval(const Tensor<T>& H, T tau, const Tensor<T>& u) const {
        check_inputs(H, tau, u);
        const std::int64_t B = H.dim(0), Tn = H.dim(1), D = d_model, C = control_dim;
        const std::int64_t R = B * Tn, In = D + C + 1;
        Tensor<T> x(Shape{R, In});
        for (std::int64_t r = 0; r < R; ++r) {
            T* row = x.data() + r * In;
            std::copy(H.data() + r * D, H.data() + (r + 1) * D, row);
            for (std::int64_t c = 0; c < C; ++c) row[D + c] = u[c];
            row[D + C] = tau;
        }
        Tensor<T> hmid(Shape{R, hidden_dim});
        mm_nn(x.data(), w1.data(), hmid.data(), R, In, hidden_dim);
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t d = 0; d < hidden_dim; ++d) hmid[r * hidden_dim + d] += b1[d];
        for (std::int64_t i = 0; i < hmid.numel(); ++i) hmid[i] = gelu_value(hmid[i]);
        Tensor<T> out(Shape{R, D});
        mm_nn(hmid.data(), w2.data(), out.data(), R, hidden_dim, D);
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t d = 0; d < D; ++d) out[r * D + d] += b2[d];
        const T a = alpha.item();
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] * a;
        return out.reshaped(Shape{B, Tn, D});
    }

    // tape evaluation; `vars` are the field parameters as graph leaves
    struct GraphVars {
        Var w1, b1, w2, b2, alpha;
    };
    static Var eval_graph(Tape<T>& tape, Var H, T tau, Var u, const GraphVars& p) {
        const Tensor<T>& hv = tape.val(H);
        const std::int64_t B = hv.dim(0), Tn = hv.dim(1), D = hv.dim(2);
        const std::int64_t In = D + tape.val(u).numel() + 1;
        Var ub = tape.broadcast_bt(u, B, Tn);
        Var taub = tape.constant(Tensor<T>::full(Shape{B, Tn, 1}, tau));
        Var x = tape.concat_last(tape.concat_last(H, ub), taub);
        Var flat = tape.reshape(x, Shape{B * Tn, In});
        Var mid = tape.gelu(tape.add_bias(tape.matmul(flat, p.w1), p.b1));
        Var out = tape.add_bias(tape.matmul(mid, p.w2), p.b2);
        Var scaled = tape.mul_scalar(out, p.alpha);
        return tape.reshape(scaled, Shape{B, Tn, D});
    }

    std::int64_t theta_size() const { return w1.numel() + b1.numel() + w2.numel() + b2.numel(); }

    Tensor<T> flatten_theta() const {
        Tensor<T> out(Shape{theta_size()});
        std::int64_t off = 0;
        for (const Tensor<T>* t : {&w1, &b1, &w2, &b2}) {
            std::copy(t->data(), t->data() + t->numel(), out.data() + off);
            off += t->numel();
        }
        return out;
    }

    void unflatten_theta(const Tensor<T>& flat) {
        if (flat.numel() != theta_size()) throw ContractViolation("field: bad flat parameter length");
        std::int64_t off = 0;
        for (Tensor<T>* t : {&w1, &b1, &w2, &b2}) {
            std::copy(flat.data() + off, flat.data() + off + t->numel(), t->data());
            off += t->numel();
        }
    }

    struct Vjp {
        Tensor<T> dH;
        Tensor<T> dtheta;  // flat, matching flatten_theta order
        Tensor<T> du;
        T dalpha = 0;
    };

    std::pair<Tensor<T>, Vjp> value_and_vjp(const Tensor<T>& H, T tau, const Tensor<T>& u,
                                            const Tensor<T>& cotangent) const {
        check_inputs(H, tau, u);
        Tape<T> tape;
        Var vh = tape.leaf(H, true);
        Var vu = tape.leaf(u, true);
        GraphVars p{tape.leaf(w1, true), tape.leaf(b1, true), tape.leaf(w2, true), tape.leaf(b2, true),
                    tape.leaf(alpha, true)};
        Var out = eval_graph(tape, vh, tau, vu, p);
        tape.backward(out, cotangent);
        Vjp v;
        v.dH = tape.grad(vh);
        v.du = tape.grad(vu);
        v.dalpha = tape.grad(p.alpha).item();
        v.dtheta = Tensor<T>(Shape{theta_size()});
        std::int64_t off = 0;
        for (Var pv : {p.w1, p.b1, p.w2, p.b2}) {
            Tensor<T> g = tape.grad(pv);
            std::copy(g.data(), g.data() + g.numel(), v.dtheta.data() + off);
            off += g.numel();
        }
        return {tape.val(out), std::move(v)};
    }

    Tensor<T> value(const Tensor<T>& H, T tau, const Tensor<T>& u) const { return eval(H, tau, u); }

    template <class U>
    ControlledVectorField<U> cast() const {
        ControlledVectorField<U> f;
        f.d_model = d_model;
        f.control_dim = control_dim;
        f.hidden_dim = hidden_dim;
        f.w1 = w1.template cast<U>();
        f.b1 = b1.template cast<U>();
        f.w2 = w2.template cast<U>();
        f.b2 = b2.template cast<U>();
        f.alpha = alpha.template cast<U>();
        return f;
    }
};

}  // namespace odelm
