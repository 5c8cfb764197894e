#pragma once

#include <map>
#include <string>
#include <vector>

#include "odelm/adjoint.hpp"
#include "odelm/autograd.hpp"
#include "odelm/field.hpp"
#include "odelm/param_store.hpp"

namespace odelm {

struct ModelConfig {
    std::int64_t n_layers = 6;
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t vocab_size = 0;
    std::int64_t max_seq_len = 64;
    std::int64_t ode_start = 2;  // half-open block range replaced by the ODE
    std::int64_t ode_end = 4;
    std::int64_t control_dim = 1;
    SolverConfig solver;  // training-time solver

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq_len < 1)
            throw ContractViolation("model config: dimensions must be positive");
        if (d_model % n_heads != 0) throw ContractViolation("model config: d_model must divide into n_heads");
        if (!(0 <= ode_start && ode_start < ode_end && ode_end <= n_layers))
            throw ContractViolation("model config: need 0 <= ode_start < ode_end <= n_layers");
        solver.validate();
    }

    std::map<std::string, std::string> to_kv() const {
        std::map<std::string, std::string> kv;
        kv["n_layers"] = std::to_string(n_layers);
        kv["d_model"] = std::to_string(d_model);
        kv["n_heads"] = std::to_string(n_heads);
        kv["vocab_size"] = std::to_string(vocab_size);
        kv["max_seq_len"] = std::to_string(max_seq_len);
        kv["ode_start"] = std::to_string(ode_start);
        kv["ode_end"] = std::to_string(ode_end);
        kv["control_dim"] = std::to_string(control_dim);
        kv["solver"] = method_name(solver.method);
        kv["n_steps"] = std::to_string(solver.n_steps);
        kv["rtol"] = fmt_g(solver.rtol, 17);
        kv["atol"] = fmt_g(solver.atol, 17);
        return kv;
    }

    static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
        ModelConfig c;
        auto get = [&](const char* k) -> const std::string& {
            auto it = kv.find(k);
            if (it == kv.end()) throw ContractViolation(std::string("model config: missing key '") + k + "'");
            return it->second;
        };
        c.n_layers = std::stoll(get("n_layers"));
        c.d_model = std::stoll(get("d_model"));
        c.n_heads = std::stoll(get("n_heads"));
        c.vocab_size = std::stoll(get("vocab_size"));
        c.max_seq_len = std::stoll(get("max_seq_len"));
        c.ode_start = std::stoll(get("ode_start"));
        c.ode_end = std::stoll(get("ode_end"));
        c.control_dim = std::stoll(get("control_dim"));
        c.solver.method = parse_method(get("solver"));
        c.solver.n_steps = static_cast<int>(std::stoll(get("n_steps")));
        c.solver.rtol = std::stod(get("rtol"));
        c.solver.atol = std::stod(get("atol"));
        return c;
    }
};

enum class ModelKind { baseline, hybrid };

inline const char* kind_name(ModelKind k) { return k == ModelKind::baseline ? "baseline" : "hybrid"; }

// Decoder-only pre-norm transformer. The hybrid variant replaces the block
// range [ode_start, ode_end) with the control-conditioned vector field.
template <class T>
class TransformerLM {
public:
    TransformerLM(ModelConfig cfg, ModelKind kind, std::uint64_t seed) : cfg_(std::move(cfg)), kind_(kind) {
        cfg_.validate();
        Rng rng(seed);
        const std::int64_t D = cfg_.d_model, V = cfg_.vocab_size;
        params_.add("tok_emb", rng.normal_tensor<T>(Shape{V, D}, 0.08));
        params_.add("pos_emb", rng.normal_tensor<T>(Shape{cfg_.max_seq_len, D}, 0.08));
        for (std::int64_t i = 0; i < cfg_.n_layers; ++i) {
            if (kind_ == ModelKind::hybrid && i >= cfg_.ode_start && i < cfg_.ode_end) continue;
            add_block(i, rng);
        }
        if (kind_ == ModelKind::hybrid) {
            auto f = ControlledVectorField<T>::init(D, cfg_.control_dim, rng);
            params_.add("ode.w1", std::move(f.w1));
            params_.add("ode.b1", std::move(f.b1));
            params_.add("ode.w2", std::move(f.w2));
            params_.add("ode.b2", std::move(f.b2));
            params_.add("ode.alpha", std::move(f.alpha));
        }
        params_.add("final_ln.g", Tensor<T>::full(Shape{D}, T(1)));
        params_.add("final_ln.b", Tensor<T>::zeros(Shape{D}));
        params_.add("head.w", rng.normal_tensor<T>(Shape{D, V}, 1.0 / std::sqrt(static_cast<double>(D))));
    }

    const ModelConfig& config() const { return cfg_; }
    ModelKind kind() const { return kind_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    std::int64_t param_count() const { return params_.param_count(); }
    std::int64_t trainable_param_count() const { return params_.trainable_count(); }

    // Steering regime: only the ODE block (including alpha) stays trainable.
    void set_freeze_for_steering() {
        if (kind_ != ModelKind::hybrid)
            throw ContractViolation("set_freeze_for_steering: baseline model has no ODE block");
        params_.set_all_trainable(false);
        params_.set_trainable_prefix("ode.", true);
    }

    ControlledVectorField<T> field() const {
        if (kind_ != ModelKind::hybrid) throw ContractViolation("field(): baseline model has no ODE block");
        ControlledVectorField<T> f;
        f.d_model = cfg_.d_model;
        f.control_dim = cfg_.control_dim;
        f.w1 = params_.value("ode.w1");
        f.b1 = params_.value("ode.b1");
        f.w2 = params_.value("ode.w2");
        f.b2 = params_.value("ode.b2");
        f.alpha = params_.value("ode.alpha");
        f.hidden_dim = f.w1.dim(1);
        return f;
    }

    struct Forward {
        Tape<T> tape;
        Var logits;
        Var u_var;                  // valid for hybrid forwards
        SolverResult<T> ode_stats;  // NFE side channel
        std::map<std::string, Var> leaves;
    };

    // tokens: B*Tn ids, row-major [B,Tn]
    Forward forward(const std::vector<std::int64_t>& tokens, std::int64_t B, std::int64_t Tn,
                    const Tensor<T>& u, const SolverConfig& solver, bool skip_ode = false) const {
        check_tokens(tokens, B, Tn);
        Forward fo;
        Tape<T>& t = fo.tape;
        std::map<std::string, Var> leaves;
        for (const auto& [name, e] : params_) leaves.emplace(name, t.leaf(e.value, e.trainable));

        Var x = t.reshape(t.embedding(leaves.at("tok_emb"), tokens), Shape{B, Tn, cfg_.d_model});
        x = t.add_seq(x, t.slice_rows(leaves.at("pos_emb"), Tn));

        for (std::int64_t i = 0; i < cfg_.n_layers; ++i) {
            const bool replaced = kind_ == ModelKind::hybrid && i >= cfg_.ode_start && i < cfg_.ode_end;
            if (!replaced) {
                x = block_forward(t, x, leaves, i, B, Tn);
            } else if (i == cfg_.ode_start) {
                if (u.numel() != cfg_.control_dim)
                    throw ContractViolation("forward: control signal has " + std::to_string(u.numel()) +
                                            " components, expected " + std::to_string(cfg_.control_dim));
                fo.u_var = t.leaf(u, true);
                if (!skip_ode)
                    x = ode_block_op(t, x, leaves.at("ode.w1"), leaves.at("ode.b1"), leaves.at("ode.w2"),
                                     leaves.at("ode.b2"), leaves.at("ode.alpha"), fo.u_var, solver,
                                     &fo.ode_stats);
            }
        }

        x = t.layer_norm(x, leaves.at("final_ln.g"), leaves.at("final_ln.b"));
        Var flat = t.reshape(x, Shape{B * Tn, cfg_.d_model});
        fo.logits = t.reshape(t.matmul(flat, leaves.at("head.w")), Shape{B, Tn, cfg_.vocab_size});
        fo.leaves = std::move(leaves);
        return fo;
    }

    // Hidden state entering the ODE block (forward-only, no grads kept).
    Tensor<T> ode_entry_state(const std::vector<std::int64_t>& tokens, std::int64_t B, std::int64_t Tn) const {
        if (kind_ != ModelKind::hybrid) throw ContractViolation("ode_entry_state: baseline model");
        check_tokens(tokens, B, Tn);
        Tape<T> t;
        std::map<std::string, Var> leaves;
        for (const auto& [name, e] : params_) leaves.emplace(name, t.leaf(e.value, false));
        Var x = t.reshape(t.embedding(leaves.at("tok_emb"), tokens), Shape{B, Tn, cfg_.d_model});
        x = t.add_seq(x, t.slice_rows(leaves.at("pos_emb"), Tn));
        for (std::int64_t i = 0; i < cfg_.ode_start; ++i) x = block_forward(t, x, leaves, i, B, Tn);
        return t.val(x);
    }

    // Copies tape leaf gradients into the store's gradient buffers.
    void collect_grads(Forward& fo) {
        for (const auto& [name, v] : fo.leaves)
            if (params_.at(name).trainable) params_.accumulate_grad(name, fo.tape.grad(v));
    }

    template <class U>
    TransformerLM<U> cast() const {
        TransformerLM<U> out(cfg_, kind_, 0);
        for (const auto& [name, e] : params_) {
            auto& dst = out.params().at(name);
            dst.value = e.value.template cast<U>();
            dst.trainable = e.trainable;
        }
        return out;
    }

private:
    void check_tokens(const std::vector<std::int64_t>& tokens, std::int64_t B, std::int64_t Tn) const {
        if (B < 1 || Tn < 1 || static_cast<std::int64_t>(tokens.size()) != B * Tn)
            throw ContractViolation("forward: token buffer does not match [B,T]");
        if (Tn > cfg_.max_seq_len)
            throw ContractViolation("forward: sequence length " + std::to_string(Tn) + " exceeds max " +
                                    std::to_string(cfg_.max_seq_len));
        for (auto id : tokens)
            if (id < 0 || id >= cfg_.vocab_size)
                throw ContractViolation("forward: token id " + std::to_string(id) + " out of range");
    }

    void add_block(std::int64_t i, Rng& rng) {
        const std::int64_t D = cfg_.d_model;
        const std::string p = "block" + std::to_string(i) + ".";
        const double ws = 1.0 / std::sqrt(static_cast<double>(D));
        params_.add(p + "ln1.g", Tensor<T>::full(Shape{D}, T(1)));
        params_.add(p + "ln1.b", Tensor<T>::zeros(Shape{D}));
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            params_.add(p + w, rng.normal_tensor<T>(Shape{D, D}, ws));
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            params_.add(p + b, Tensor<T>::zeros(Shape{D}));
        params_.add(p + "ln2.g", Tensor<T>::full(Shape{D}, T(1)));
        params_.add(p + "ln2.b", Tensor<T>::zeros(Shape{D}));
        params_.add(p + "mlp.w1", rng.normal_tensor<T>(Shape{D, 4 * D}, ws));
        params_.add(p + "mlp.b1", Tensor<T>::zeros(Shape{4 * D}));
        params_.add(p + "mlp.w2",
                    rng.normal_tensor<T>(Shape{4 * D, D}, 1.0 / std::sqrt(static_cast<double>(4 * D))));
        params_.add(p + "mlp.b2", Tensor<T>::zeros(Shape{D}));
    }

    Var block_forward(Tape<T>& t, Var x, const std::map<std::string, Var>& leaves, std::int64_t i,
                      std::int64_t B, std::int64_t Tn) const {
        const std::int64_t D = cfg_.d_model, H = cfg_.n_heads, Dh = D / H;
        const std::string p = "block" + std::to_string(i) + ".";
        auto L = [&](const std::string& n) { return leaves.at(p + n); };

        Var h = t.layer_norm(x, L("ln1.g"), L("ln1.b"));
        Var flat = t.reshape(h, Shape{B * Tn, D});
        auto heads = [&](Var m) {
            return t.reshape(t.permute0213(t.reshape(m, Shape{B, Tn, H, Dh})), Shape{B * H, Tn, Dh});
        };
        Var q = heads(t.add_bias(t.matmul(flat, L("attn.wq")), L("attn.bq")));
        Var k = heads(t.add_bias(t.matmul(flat, L("attn.wk")), L("attn.bk")));
        Var v = heads(t.add_bias(t.matmul(flat, L("attn.wv")), L("attn.bv")));
        Var scores = t.scale(t.bmm_nt(q, k), T(1) / static_cast<T>(std::sqrt(static_cast<double>(Dh))));
        Var attn = t.causal_softmax(scores);
        Var ctx = t.bmm(attn, v);  // [B*H, Tn, Dh]
        Var merged = t.reshape(t.permute0213(t.reshape(ctx, Shape{B, H, Tn, Dh})), Shape{B * Tn, D});
        Var proj = t.add_bias(t.matmul(merged, L("attn.wo")), L("attn.bo"));
        x = t.add(x, t.reshape(proj, Shape{B, Tn, D}));

        Var h2 = t.layer_norm(x, L("ln2.g"), L("ln2.b"));
        Var m = t.add_bias(t.matmul(t.reshape(h2, Shape{B * Tn, D}), L("mlp.w1")), L("mlp.b1"));
        m = t.add_bias(t.matmul(t.gelu(m), L("mlp.w2")), L("mlp.b2"));
        return t.add(x, t.reshape(m, Shape{B, Tn, D}));
    }

    ModelConfig cfg_;
    ModelKind kind_;
    ParamStore<T> params_;
};

}  // namespace odelm
