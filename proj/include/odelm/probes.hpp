#pragma once

#include <vector>

#include "odelm/model.hpp"
#include "odelm/train.hpp"

namespace odelm {

struct InvarianceResult {
    double divergence_pct = 0;   // mean over shared checkpoints
    double final_state_pct = 0;  // tau = 1 only
    SolverResult<double> euler_run;
    SolverResult<double> reference_run;
};

// Fixed training solver vs high-precision adaptive reference on the same
// ODE-block entry state; the falsification probe for discretization overfit.
inline InvarianceResult solver_invariance_test(const TransformerLM<double>& model,
                                               const std::vector<std::int64_t>& tokens, std::int64_t B,
                                               std::int64_t Tn, double u_value) {
    const Tensor<double> h0 = model.ode_entry_state(tokens, B, Tn);
    const ControlledVectorField<double> field = model.field();
    const Tensor<double> u = Tensor<double>::full(Shape{model.config().control_dim}, u_value);

    SolverConfig euler_cfg;
    euler_cfg.method = Method::euler;
    euler_cfg.n_steps = model.config().solver.n_steps;
    euler_cfg.checkpoint_taus = {0.0, 0.25, 0.5, 0.75, 1.0};

    SolverConfig ref_cfg;
    ref_cfg.method = Method::dopri5;
    ref_cfg.rtol = 1e-6;
    ref_cfg.atol = 1e-9;
    ref_cfg.checkpoint_taus = euler_cfg.checkpoint_taus;

    FieldEval<double> fe{[&](const Tensor<double>& y, double tau) { return field.eval(y, tau, u); }};
    FieldEval<double> fr{[&](const Tensor<double>& y, double tau) { return field.eval(y, tau, u); }};

    InvarianceResult out;
    out.euler_run = integrate(fe, h0, 0.0, 1.0, euler_cfg);
    out.reference_run = integrate(fr, h0, 0.0, 1.0, ref_cfg);
    out.divergence_pct = trajectory_divergence(out.euler_run, out.reference_run);

    double num = 0, den = 0;
    const Tensor<double>& a = out.euler_run.final_state;
    const Tensor<double>& b = out.reference_run.final_state;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    out.final_state_pct = 100.0 * std::sqrt(num) / (std::sqrt(den) + 1e-12);
    return out;
}

struct SweepRow {
    double u = 0;
    double p_good = 0;
    double p_bad = 0;
};

inline std::vector<SweepRow> control_sweep(const TransformerLM<double>& model, const SteeringTask& task,
                                           double lo = -2.0, double hi = 2.0, double step = 0.25) {
    std::vector<SweepRow> rows;
    const int n = static_cast<int>(std::llround((hi - lo) / step)) + 1;
    for (int i = 0; i < n; ++i) {
        const double u = lo + i * step;
        auto [pg, pb] = steering_eval(model, task, u);
        rows.push_back({u, pg, pb});
    }
    return rows;
}

// p_good non-decreasing in u up to `slack` per grid step
inline bool sweep_monotone(const std::vector<SweepRow>& rows, double slack = 0.02) {
    for (std::size_t i = 1; i < rows.size(); ++i)
        if (rows[i].p_good < rows[i - 1].p_good - slack) return false;
    return true;
}

struct NfeCell {
    double u = 0;
    Method method = Method::dopri5;
    double rtol = 0;
    double atol = 0;
    long long accepted = 0;
    long long rejected = 0;
    long long nfe = 0;
    bool failed = false;
};

struct ToleranceRow {
    double rtol = 0;
    double mean_accepted = 0;
    double mean_nfe = 0;
};

struct ProbeReport {
    std::vector<NfeCell> cells;
    std::vector<ToleranceRow> tolerance_scaling;
    std::vector<std::pair<double, double>> probe_accuracy_by_tau;
};

// Integrates the trained field across a u grid with both adaptive solvers
// at each tolerance; a failed cell is recorded and the scan continues.
inline ProbeReport nfe_probe(const TransformerLM<double>& model, const std::vector<std::int64_t>& tokens,
                             std::int64_t B, std::int64_t Tn,
                             const std::vector<double>& u_grid,
                             const std::vector<double>& rtol_grid = {1e-3, 1e-4, 1e-5, 1e-6}) {
    const Tensor<double> h0 = model.ode_entry_state(tokens, B, Tn);
    const ControlledVectorField<double> field = model.field();

    ProbeReport report;
    for (double rtol : rtol_grid) {
        double acc_sum = 0, nfe_sum = 0;
        int cells = 0;
        for (double uv : u_grid) {
            const Tensor<double> u = Tensor<double>::full(Shape{model.config().control_dim}, uv);
            for (Method m : {Method::dopri5, Method::adaptive_heun}) {
                NfeCell cell;
                cell.u = uv;
                cell.method = m;
                cell.rtol = rtol;
                cell.atol = rtol * 1e-3;  // tighten both together, keeping the default ratio
                SolverConfig cfg;
                cfg.method = m;
                cfg.rtol = cell.rtol;
                cfg.atol = cell.atol;
                try {
                    FieldEval<double> fe{
                        [&](const Tensor<double>& y, double tau) { return field.eval(y, tau, u); }};
                    SolverResult<double> res = integrate(fe, h0, 0.0, 1.0, cfg);
                    cell.accepted = res.accepted_steps;
                    cell.rejected = res.rejected_steps;
                    cell.nfe = res.nfe;
                    acc_sum += static_cast<double>(res.accepted_steps);
                    nfe_sum += static_cast<double>(res.nfe);
                    ++cells;
                } catch (const SolverError&) {
                    cell.failed = true;
                }
                report.cells.push_back(cell);
            }
        }
        ToleranceRow row;
        row.rtol = rtol;
        row.mean_accepted = cells > 0 ? acc_sum / cells : 0.0;
        row.mean_nfe = cells > 0 ? nfe_sum / cells : 0.0;
        report.tolerance_scaling.push_back(row);
    }
    return report;
}

struct ProbeSamples {
    std::vector<double> taus;
    std::vector<std::vector<Tensor<double>>> features;  // [tau][sample] mean-pooled state
    std::vector<double> labels;                         // +-1 per sample
};

// Mean-pooled ODE-block states at the requested taus for u = +1 and u = -1
// runs over the task prompts; the control sign is the label.
inline ProbeSamples collect_probe_samples(const TransformerLM<double>& model, const SteeringTask& task,
                                          const std::vector<double>& taus = {0.0, 0.5, 0.67, 1.0}) {
    const std::int64_t B = static_cast<std::int64_t>(task.prompts.size());
    const std::int64_t D = model.config().d_model;
    const ControlledVectorField<double> field = model.field();
    const Tensor<double> h0 = model.ode_entry_state(task.prompt_rows, B, task.prompt_len);

    SolverConfig cfg;
    cfg.method = Method::dopri5;
    cfg.rtol = 1e-6;
    cfg.atol = 1e-9;
    cfg.checkpoint_taus = taus;

    ProbeSamples samples;
    samples.taus = taus;
    samples.features.resize(taus.size());
    for (double uv : {1.0, -1.0}) {
        const Tensor<double> u = Tensor<double>::full(Shape{model.config().control_dim}, uv);
        FieldEval<double> fe{[&](const Tensor<double>& y, double tau) { return field.eval(y, tau, u); }};
        SolverResult<double> res = integrate(fe, h0, 0.0, 1.0, cfg);
        if (res.trajectory.size() != taus.size())
            throw ContractViolation("linear_probe: trajectory checkpoints missing");
        for (std::size_t ti = 0; ti < taus.size(); ++ti) {
            const Tensor<double>& H = res.trajectory[ti].second;
            for (std::int64_t b = 0; b < B; ++b) {
                Tensor<double> pooled(Shape{D});
                for (std::int64_t t = 0; t < task.prompt_len; ++t)
                    for (std::int64_t d = 0; d < D; ++d) pooled[d] += H[(b * task.prompt_len + t) * D + d];
                for (std::int64_t d = 0; d < D; ++d) pooled[d] /= static_cast<double>(task.prompt_len);
                samples.features[ti].push_back(std::move(pooled));
            }
        }
        for (std::int64_t b = 0; b < B; ++b) samples.labels.push_back(uv);
    }
    return samples;
}

// Closed-form ridge fit (targets +-1, sign readout) on even-index samples,
// accuracy on the odd-index held-out half.
inline double ridge_probe_accuracy(const std::vector<Tensor<double>>& features,
                                   const std::vector<double>& labels, double ridge = 1e-3) {
    if (features.empty() || features.size() != labels.size())
        throw ContractViolation("linear_probe: features and labels disagree");
    bool has_pos = false, has_neg = false;
    for (double l : labels) (l > 0 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw ContractViolation("linear_probe: degenerate single-class labels");

    const std::int64_t D = features.front().numel();
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < features.size(); ++i) (i % 2 == 0 ? train_idx : test_idx).push_back(i);
    bool train_pos = false, train_neg = false;
    for (std::size_t i : train_idx) (labels[i] > 0 ? train_pos : train_neg) = true;
    if (!train_pos || !train_neg)
        throw ContractViolation("linear_probe: training split is single-class");

    RowMat<double> X(train_idx.size(), D + 1);
    Eigen::VectorXd y(train_idx.size());
    for (std::size_t r = 0; r < train_idx.size(); ++r) {
        const Tensor<double>& f = features[train_idx[r]];
        for (std::int64_t d = 0; d < D; ++d) X(static_cast<Eigen::Index>(r), d) = f[d];
        X(static_cast<Eigen::Index>(r), D) = 1.0;
        y(static_cast<Eigen::Index>(r)) = labels[train_idx[r]];
    }
    Eigen::MatrixXd gram = X.transpose() * X;
    gram.diagonal().array() += ridge;
    Eigen::VectorXd w = gram.ldlt().solve(X.transpose() * y);

    int correct = 0;
    for (std::size_t i : test_idx) {
        const Tensor<double>& f = features[i];
        double score = w(D);
        for (std::int64_t d = 0; d < D; ++d) score += w(d) * f[d];
        if ((score >= 0 ? 1.0 : -1.0) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test_idx.size());
}

inline std::vector<std::pair<double, double>> linear_probe(const TransformerLM<double>& model,
                                                           const SteeringTask& task,
                                                           const std::vector<double>& taus = {0.0, 0.5, 0.67,
                                                                                              1.0},
                                                           double ridge = 1e-3) {
    const ProbeSamples samples = collect_probe_samples(model, task, taus);
    std::vector<std::pair<double, double>> out;
    for (std::size_t ti = 0; ti < taus.size(); ++ti)
        out.emplace_back(taus[ti], ridge_probe_accuracy(samples.features[ti], samples.labels, ridge));
    return out;
}

}  // namespace odelm
