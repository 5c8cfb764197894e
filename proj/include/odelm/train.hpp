#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <vector>

#include "odelm/corpus.hpp"
#include "odelm/model.hpp"
#include "odelm/optim.hpp"

namespace odelm {

struct TrainConfig {
    int steps = 500;
    int batch_size = 16;
    std::int64_t seq_len = 64;
    double lr = 3e-4;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    std::uint64_t seed = 1234;
    // pathology thresholds
    double explode_abs = 100.0;
    double explode_rel = 10.0;  // times the trailing-50-step median
    double vanish_abs = 1e-8;   // ODE-block gradient norm
    double vanish_total_min = 1e-4;

    void validate() const {
        if (steps < 1 || batch_size < 1 || seq_len < 1) throw ContractViolation("train config: bad sizes");
    }
};

struct MetricsRecord {
    int step = 0;
    double loss = 0;
    double total_grad_norm = 0;
    double ode_grad_norm = 0;
    double alpha = 0;
    bool exploded = false;
    bool vanished = false;
};

namespace detail {

inline double median_of(std::deque<double> w) {
    std::vector<double> v(w.begin(), w.end());
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid - 1), v.end());
        m = 0.5 * (m + v[mid - 1]);
    }
    return m;
}

}  // namespace detail

// Next-token LM training. Emits one record per step; aborts on a non-finite
// loss after invoking `on_abort` (the CLI saves the last checkpoint there).
template <class T>
std::vector<MetricsRecord> train_lm(TransformerLM<T>& model, const Corpus& corpus, const TrainConfig& cfg,
                                    const std::function<void(const MetricsRecord&)>& on_step = nullptr,
                                    const std::function<void()>& on_abort = nullptr) {
    cfg.validate();
    Rng rng(cfg.seed);
    AdamW<T> opt(cfg.lr, cfg.weight_decay);
    const bool hybrid = model.kind() == ModelKind::hybrid;
    const Tensor<T> u_neutral = Tensor<T>::zeros(Shape{model.config().control_dim});
    std::vector<MetricsRecord> records;
    records.reserve(static_cast<std::size_t>(cfg.steps));
    std::deque<double> norm_history;

    for (int step = 1; step <= cfg.steps; ++step) {
        const auto batch =
            sample_lm_batch(corpus.tokens, cfg.batch_size, cfg.seq_len, rng);
        std::vector<std::int64_t> inputs;
        std::vector<std::int64_t> targets;
        inputs.reserve(static_cast<std::size_t>(cfg.batch_size) * cfg.seq_len);
        targets.reserve(inputs.capacity());
        for (std::int64_t b = 0; b < cfg.batch_size; ++b)
            for (std::int64_t i = 0; i < cfg.seq_len; ++i) {
                inputs.push_back(batch[static_cast<std::size_t>(b * (cfg.seq_len + 1) + i)]);
                targets.push_back(batch[static_cast<std::size_t>(b * (cfg.seq_len + 1) + i + 1)]);
            }

        model.params().zero_grads();
        auto fo = model.forward(inputs, cfg.batch_size, cfg.seq_len, u_neutral, model.config().solver);
        Var flat = fo.tape.reshape(fo.logits,
                                   Shape{cfg.batch_size * cfg.seq_len, model.config().vocab_size});
        Var loss = fo.tape.cross_entropy_mean(flat, targets);
        const double loss_v = static_cast<double>(fo.tape.val(loss).item());

        MetricsRecord rec;
        rec.step = step;
        rec.loss = loss_v;
        if (!std::isfinite(loss_v)) {
            if (on_abort) on_abort();
            throw NonFiniteError("training loss became non-finite at step " + std::to_string(step), 0.0);
        }

        fo.tape.backward(loss, Tensor<T>::scalar(T(1)));
        model.collect_grads(fo);

        rec.total_grad_norm = grad_norm_all(model.params());
        rec.ode_grad_norm = hybrid ? grad_norm_prefix(model.params(), "ode.") : 0.0;
        rec.alpha = hybrid ? static_cast<double>(model.params().value("ode.alpha").item()) : 0.0;

        rec.exploded = rec.total_grad_norm > cfg.explode_abs;
        if (norm_history.size() >= 10)
            rec.exploded = rec.exploded ||
                           rec.total_grad_norm > cfg.explode_rel * detail::median_of(norm_history);
        rec.vanished = hybrid && rec.ode_grad_norm < cfg.vanish_abs &&
                       rec.total_grad_norm > cfg.vanish_total_min;

        norm_history.push_back(rec.total_grad_norm);
        if (norm_history.size() > 50) norm_history.pop_front();

        clip_grad_norm(model.params(), cfg.grad_clip);
        opt.step(model.params());

        if (on_step) on_step(rec);
        records.push_back(rec);
    }
    return records;
}

struct SteeringConfig {
    int steps = 400;  // cap; evaluation-based stop usually ends earlier
    double lr = 2e-3;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    std::uint64_t seed = 7;
    // stop once both polarities clear these probabilities (0 disables);
    // keeps the field no sharper than the task demands
    double stop_p_good = 0.93;
    double stop_p_bad = 0.85;
    int eval_every = 20;
};

struct SteeringRow {
    double u = 0;
    double p_good = 0;
    double p_bad = 0;
    bool success = false;
};

struct SteeringReport {
    std::vector<SteeringRow> rows;  // u in {-1, 0, +1}
};

// Mean P(good-char) and P(bad-char) at the answer position, softmax over the
// full vocabulary. Shared by the steering report and the control sweep.
template <class T>
std::pair<double, double> steering_eval(const TransformerLM<T>& model, const SteeringTask& task,
                                        double u_value) {
    const std::int64_t B = static_cast<std::int64_t>(task.prompts.size());
    const Tensor<T> u = Tensor<T>::full(Shape{model.config().control_dim}, static_cast<T>(u_value));
    auto fo = model.forward(task.prompt_rows, B, task.prompt_len, u, model.config().solver);
    const Tensor<T>& logits = fo.tape.val(fo.logits);
    const std::int64_t V = model.config().vocab_size;
    double pg = 0.0, pb = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const T* row = logits.data() + (b * task.prompt_len + task.answer_pos) * V;
        double mx = static_cast<double>(row[0]);
        for (std::int64_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
        double denom = 0.0;
        for (std::int64_t v = 0; v < V; ++v) denom += std::exp(static_cast<double>(row[v]) - mx);
        pg += std::exp(static_cast<double>(row[task.good_id]) - mx) / denom;
        pb += std::exp(static_cast<double>(row[task.bad_id]) - mx) / denom;
    }
    return {pg / static_cast<double>(B), pb / static_cast<double>(B)};
}

// Trains only the ODE block on (prompt, u, target) pairs; +1/-1 batches
// alternate so the two polarities stay balanced.
template <class T>
SteeringReport steering_train(TransformerLM<T>& model, const SteeringTask& task, const SteeringConfig& cfg,
                              const std::function<void(const MetricsRecord&)>& on_step = nullptr) {
    if (model.kind() != ModelKind::hybrid)
        throw ContractViolation("steering_train: baseline model has no control path");
    for (const auto& [name, e] : model.params())
        if (e.trainable != (name.rfind("ode.", 0) == 0))
            throw ContractViolation("steering_train: call set_freeze_for_steering first");

    AdamW<T> opt(cfg.lr, cfg.weight_decay);
    const std::int64_t B = static_cast<std::int64_t>(task.prompts.size());
    const std::vector<std::int64_t> answer_pos(static_cast<std::size_t>(B), task.answer_pos);

    for (int step = 1; step <= cfg.steps; ++step) {
        const bool positive = step % 2 == 1;
        const Tensor<T> u = Tensor<T>::full(Shape{model.config().control_dim}, positive ? T(1) : T(-1));
        const std::vector<std::int64_t> targets(static_cast<std::size_t>(B),
                                                positive ? task.good_id : task.bad_id);
        model.params().zero_grads();
        auto fo = model.forward(task.prompt_rows, B, task.prompt_len, u, model.config().solver);
        Var at_answer = fo.tape.gather_time(fo.logits, answer_pos);
        Var loss = fo.tape.cross_entropy_mean(at_answer, targets);
        const double loss_v = static_cast<double>(fo.tape.val(loss).item());
        if (!std::isfinite(loss_v))
            throw NonFiniteError("steering loss became non-finite at step " + std::to_string(step), 0.0);
        fo.tape.backward(loss, Tensor<T>::scalar(T(1)));
        model.collect_grads(fo);

        if (on_step) {
            MetricsRecord rec;
            rec.step = step;
            rec.loss = loss_v;
            rec.total_grad_norm = grad_norm_all(model.params());
            rec.ode_grad_norm = grad_norm_prefix(model.params(), "ode.");
            rec.alpha = static_cast<double>(model.params().value("ode.alpha").item());
            on_step(rec);
        }
        clip_grad_norm(model.params(), cfg.grad_clip);
        opt.step(model.params());

        if (cfg.stop_p_good > 0.0 && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            auto [pg_pos, pb_pos] = steering_eval(model, task, 1.0);
            auto [pg_neg, pb_neg] = steering_eval(model, task, -1.0);
            if (pg_pos >= cfg.stop_p_good && pb_neg >= cfg.stop_p_bad) break;
        }
    }

    SteeringReport report;
    for (double uv : {1.0, -1.0, 0.0}) {
        auto [pg, pb] = steering_eval(model, task, uv);
        SteeringRow row;
        row.u = uv;
        row.p_good = pg;
        row.p_bad = pb;
        row.success = uv >= 0.0 ? pg > pb : pb > pg;
        report.rows.push_back(row);
    }
    return report;
}

}  // namespace odelm
