// Command-line harness: train / steer / invariance / sweep / probe / bench.
// Outputs land in --out as metrics.jsonl, report_*.csv and model.ckpt.

#include <cstdio>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "odelm/odelm.hpp"

using namespace odelm;

namespace {

struct CliArgs {
    std::string config_path;
    std::string out_dir = "out";
    long long seed = -1;
    std::string solver;
    int solver_steps = -1;
    double rtol = -1, atol = -1;
    double u = 1.0;
};

const std::set<std::string> kKnownKeys = {
    "model",        "n_layers",     "d_model",     "n_heads",     "max_seq_len",  "ode_start",
    "ode_end",      "control_dim",  "solver",      "n_steps",     "rtol",         "atol",
    "corpus",       "corpus_chars", "steps",       "batch_size",  "seq_len",      "lr",
    "weight_decay", "grad_clip",    "seed",        "model_seed",  "steer_steps",  "steer_lr",
    "steer_prompts", "init",        "explode_abs", "explode_rel", "vanish_abs",   "vanish_total_min",
    "bench_warmup", "bench_trials"};

struct Session {
    KvConfig cfg;
    Corpus corpus;
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    SteeringConfig steer_cfg;
    std::string out_dir;
    std::uint64_t model_seed = 42;
    std::string init_ckpt;
};

Session make_session(const CliArgs& args) {
    Session s;
    if (!args.config_path.empty()) s.cfg = KvConfig::load(args.config_path);
    s.cfg.require_known(kKnownKeys);

    const std::string corpus_path = s.cfg.gets("corpus", "");
    s.corpus = corpus_path.empty()
                   ? builtin_corpus(static_cast<std::size_t>(s.cfg.geti("corpus_chars", 1000000)))
                   : corpus_from_file(corpus_path);

    s.model_cfg.n_layers = s.cfg.geti("n_layers", 6);
    s.model_cfg.d_model = s.cfg.geti("d_model", 64);
    s.model_cfg.n_heads = s.cfg.geti("n_heads", 4);
    s.model_cfg.max_seq_len = s.cfg.geti("max_seq_len", 64);
    s.model_cfg.ode_start = s.cfg.geti("ode_start", 2);
    s.model_cfg.ode_end = s.cfg.geti("ode_end", 4);
    s.model_cfg.control_dim = s.cfg.geti("control_dim", 1);
    s.model_cfg.vocab_size = s.corpus.vocab.size();
    s.model_cfg.solver.method = parse_method(s.cfg.gets("solver", "euler"));
    s.model_cfg.solver.n_steps = static_cast<int>(s.cfg.geti("n_steps", 4));
    s.model_cfg.solver.rtol = s.cfg.getd("rtol", 1e-3);
    s.model_cfg.solver.atol = s.cfg.getd("atol", 1e-6);

    if (!args.solver.empty()) s.model_cfg.solver.method = parse_method(args.solver);
    if (args.solver_steps > 0) s.model_cfg.solver.n_steps = args.solver_steps;
    if (args.rtol > 0) s.model_cfg.solver.rtol = args.rtol;
    if (args.atol > 0) s.model_cfg.solver.atol = args.atol;

    s.train_cfg.steps = static_cast<int>(s.cfg.geti("steps", 500));
    s.train_cfg.batch_size = static_cast<int>(s.cfg.geti("batch_size", 16));
    s.train_cfg.seq_len = s.cfg.geti("seq_len", std::min<std::int64_t>(64, s.model_cfg.max_seq_len));
    s.train_cfg.lr = s.cfg.getd("lr", 3e-4);
    s.train_cfg.weight_decay = s.cfg.getd("weight_decay", 0.01);
    s.train_cfg.grad_clip = s.cfg.getd("grad_clip", 1.0);
    s.train_cfg.seed = static_cast<std::uint64_t>(s.cfg.geti("seed", 1234));
    s.train_cfg.explode_abs = s.cfg.getd("explode_abs", 100.0);
    s.train_cfg.explode_rel = s.cfg.getd("explode_rel", 10.0);
    s.train_cfg.vanish_abs = s.cfg.getd("vanish_abs", 1e-8);
    s.train_cfg.vanish_total_min = s.cfg.getd("vanish_total_min", 1e-4);
    if (args.seed >= 0) s.train_cfg.seed = static_cast<std::uint64_t>(args.seed);

    s.steer_cfg.steps = static_cast<int>(s.cfg.geti("steer_steps", 400));
    s.steer_cfg.lr = s.cfg.getd("steer_lr", 2e-3);
    s.steer_cfg.seed = s.train_cfg.seed;

    s.model_seed = static_cast<std::uint64_t>(s.cfg.geti("model_seed", 42));
    s.init_ckpt = s.cfg.gets("init", "");
    s.out_dir = args.out_dir;
    ensure_dir(s.out_dir);
    return s;
}

std::vector<std::int64_t> probe_batch(const Session& s, std::int64_t B, std::int64_t Tn) {
    Rng rng(s.train_cfg.seed + 1);
    auto windows = sample_lm_batch(s.corpus.tokens, B, Tn, rng);
    std::vector<std::int64_t> tokens;
    tokens.reserve(static_cast<std::size_t>(B * Tn));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < Tn; ++i)
            tokens.push_back(windows[static_cast<std::size_t>(b * (Tn + 1) + i)]);
    return tokens;
}

TransformerLM<double> load_as_double(const Session& s) {
    if (s.init_ckpt.empty())
        throw ContractViolation("this subcommand needs init=<checkpoint> in the config");
    return load_checkpoint<double>(s.init_ckpt);
}

int cmd_train(const Session& s) {
    const std::string kind_s = s.cfg.gets("model", "hybrid");
    if (kind_s != "baseline" && kind_s != "hybrid")
        throw ContractViolation("config key 'model' must be hybrid or baseline");
    const ModelKind kind = kind_s == "baseline" ? ModelKind::baseline : ModelKind::hybrid;

    TransformerLM<float> model(s.model_cfg, kind, s.model_seed);
    MetricsWriter writer(s.out_dir + "/metrics.jsonl");
    const std::string ckpt = s.out_dir + "/model.ckpt";

    int pathologies = 0;
    auto records = train_lm<float>(
        model, s.corpus, s.train_cfg,
        [&](const MetricsRecord& r) {
            writer.write(r);
            if (r.exploded || r.vanished) ++pathologies;
            if (r.step % 50 == 0 || r.step == 1)
                std::printf("step %5d  loss %.4f  |g| %.4f  |g_ode| %.4f  alpha %.4f\n", r.step, r.loss,
                            r.total_grad_norm, r.ode_grad_norm, r.alpha);
        },
        [&]() { save_checkpoint(model, ckpt); });
    writer.flush();
    save_checkpoint(model, ckpt);

    std::printf("trained %s for %zu steps: final loss %.4f, pathological steps %d\n", kind_name(kind),
                records.size(), records.back().loss, pathologies);
    std::printf("wrote %s and %s\n", (s.out_dir + "/metrics.jsonl").c_str(), ckpt.c_str());
    return 0;
}

int cmd_steer(const Session& s) {
    if (s.init_ckpt.empty())
        throw ContractViolation("steer needs init=<pretrained hybrid checkpoint> in the config");
    TransformerLM<float> model = load_checkpoint<float>(s.init_ckpt);
    if (model.kind() != ModelKind::hybrid) throw ContractViolation("steer needs a hybrid checkpoint");
    model.set_freeze_for_steering();

    SteeringTask task =
        make_steering_task(s.corpus.vocab, static_cast<std::size_t>(s.cfg.geti("steer_prompts", 32)));
    if (task.prompt_len > model.config().max_seq_len)
        throw ContractViolation("steering prompts exceed max_seq_len");

    MetricsWriter writer(s.out_dir + "/metrics.jsonl");
    steering_train(model, task, s.steer_cfg, [&](const MetricsRecord& r) {
        writer.write(r);
        if (r.step % 50 == 0 || r.step == 1)
            std::printf("steer step %5d  loss %.4f  alpha %.4f\n", r.step, r.loss, r.alpha);
    });
    writer.flush();
    const std::string ckpt = s.out_dir + "/model.ckpt";
    save_checkpoint(model, ckpt);

    // report from the float64 evaluation path shared with `sweep`
    TransformerLM<double> eval_model = load_checkpoint<double>(ckpt);
    std::vector<std::vector<std::string>> rows;
    for (double uv : {1.0, -1.0, 0.0}) {
        auto [pg, pb] = steering_eval(eval_model, task, uv);
        const bool success = uv >= 0.0 ? pg > pb : pb > pg;
        rows.push_back({csv_num(uv), csv_num(pg), csv_num(pb), success ? "success" : "fail"});
        std::printf("u=%+.1f  P(good)=%.4f  P(bad)=%.4f  %s\n", uv, pg, pb, success ? "success" : "fail");
    }
    write_csv(s.out_dir + "/report_steering.csv", {"u", "p_good", "p_bad", "verdict"}, rows);
    std::printf("wrote %s and %s\n", (s.out_dir + "/report_steering.csv").c_str(), ckpt.c_str());
    return 0;
}

int cmd_invariance(const Session& s, const CliArgs& args) {
    TransformerLM<double> model = load_as_double(s);
    const std::int64_t Tn = std::min<std::int64_t>(model.config().max_seq_len, 32);
    auto tokens = probe_batch(s, 8, Tn);
    auto res = solver_invariance_test(model, tokens, 8, Tn, args.u);
    std::printf("trajectory divergence: %.6f%% (final state only: %.6f%%)\n", res.divergence_pct,
                res.final_state_pct);
    std::printf("euler nfe %lld vs reference nfe %lld (accepted %lld)\n", res.euler_run.nfe,
                res.reference_run.nfe, res.reference_run.accepted_steps);
    write_csv(s.out_dir + "/report_invariance.csv",
              {"u", "divergence_pct", "final_state_pct", "euler_nfe", "ref_nfe", "ref_accepted"},
              {{csv_num(args.u), csv_num(res.divergence_pct), csv_num(res.final_state_pct),
                std::to_string(res.euler_run.nfe), std::to_string(res.reference_run.nfe),
                std::to_string(res.reference_run.accepted_steps)}});
    return 0;
}

int cmd_sweep(const Session& s) {
    TransformerLM<double> model = load_as_double(s);
    SteeringTask task =
        make_steering_task(s.corpus.vocab, static_cast<std::size_t>(s.cfg.geti("steer_prompts", 32)));
    auto rows = control_sweep(model, task);
    std::vector<std::vector<std::string>> csv;
    for (const auto& r : rows) csv.push_back({csv_num(r.u), csv_num(r.p_good), csv_num(r.p_bad)});
    write_csv(s.out_dir + "/report_sweep.csv", {"u", "p_good", "p_bad"}, csv);
    std::printf("sweep rows: %zu, p_good monotone (slack 0.02): %s\n", rows.size(),
                sweep_monotone(rows) ? "yes" : "no");
    return 0;
}

int cmd_probe(const Session& s) {
    TransformerLM<double> model = load_as_double(s);
    SteeringTask task = make_steering_task(s.corpus.vocab, 64);
    std::vector<double> u_grid;
    for (int i = 0; i <= 16; ++i) u_grid.push_back(-2.0 + 0.25 * i);

    auto report = nfe_probe(model, task.prompt_rows, static_cast<std::int64_t>(task.prompts.size()),
                            task.prompt_len, u_grid);
    std::vector<std::vector<std::string>> cells;
    for (const auto& c : report.cells)
        cells.push_back({csv_num(c.u), method_name(c.method), csv_num(c.rtol), csv_num(c.atol),
                         std::to_string(c.accepted), std::to_string(c.rejected), std::to_string(c.nfe),
                         c.failed ? "1" : "0"});
    write_csv(s.out_dir + "/report_nfe.csv",
              {"u", "solver", "rtol", "atol", "accepted", "rejected", "nfe", "failed"}, cells);

    std::vector<std::vector<std::string>> tol;
    for (const auto& r : report.tolerance_scaling) {
        tol.push_back({csv_num(r.rtol), csv_num(r.mean_accepted), csv_num(r.mean_nfe)});
        std::printf("rtol %.0e  mean accepted %.2f  mean nfe %.2f\n", r.rtol, r.mean_accepted, r.mean_nfe);
    }
    write_csv(s.out_dir + "/report_tolerance_scaling.csv", {"rtol", "mean_accepted", "mean_nfe"}, tol);

    auto probe_acc = linear_probe(model, task);
    std::vector<std::vector<std::string>> acc;
    for (const auto& [tau, a] : probe_acc) {
        acc.push_back({csv_num(tau), csv_num(a)});
        std::printf("tau %.2f  probe accuracy %.3f\n", tau, a);
    }
    write_csv(s.out_dir + "/report_linear_probe.csv", {"tau", "accuracy"}, acc);
    return 0;
}

int cmd_bench(const Session& s) {
    TransformerLM<float> baseline(s.model_cfg, ModelKind::baseline, s.model_seed);
    TransformerLM<float> hybrid(s.model_cfg, ModelKind::hybrid, s.model_seed);
    const std::int64_t B = s.train_cfg.batch_size, Tn = s.train_cfg.seq_len;
    auto tokens = probe_batch(s, B, Tn);
    auto r = latency_bench(baseline, hybrid, tokens, B, Tn,
                           static_cast<int>(s.cfg.geti("bench_warmup", 3)),
                           static_cast<int>(s.cfg.geti("bench_trials", 20)));
    std::printf("baseline %.3f ms/batch (std %.3f), hybrid %.3f ms/batch (std %.3f), ratio %.3fx\n",
                r.baseline_median_ms, r.baseline_std_ms, r.hybrid_median_ms, r.hybrid_std_ms, r.ratio);
    write_csv(s.out_dir + "/report_bench.csv", {"model", "median_ms", "std_ms", "relative"},
              {{"baseline", csv_num(r.baseline_median_ms), csv_num(r.baseline_std_ms), csv_num(1.0)},
               {"hybrid", csv_num(r.hybrid_median_ms), csv_num(r.hybrid_std_ms), csv_num(r.ratio)}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continuous-depth controlled transformer harness"};
    app.require_subcommand(1);

    CliArgs args;
    for (const char* name : {"train", "steer", "invariance", "sweep", "probe", "bench"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", args.config_path, "key=value config file");
        sub->add_option("--seed", args.seed, "seed override");
        sub->add_option("--out", args.out_dir, "output directory");
        sub->add_option("--solver", args.solver, "euler|rk4|dopri5|adaptive_heun");
        sub->add_option("--steps", args.solver_steps, "fixed-step solver step count");
        sub->add_option("--rtol", args.rtol, "adaptive relative tolerance");
        sub->add_option("--atol", args.atol, "adaptive absolute tolerance");
        sub->add_option("--u", args.u, "control signal value");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        const Session s = make_session(args);
        if (app.got_subcommand("train")) return cmd_train(s);
        if (app.got_subcommand("steer")) return cmd_steer(s);
        if (app.got_subcommand("invariance")) return cmd_invariance(s, args);
        if (app.got_subcommand("sweep")) return cmd_sweep(s);
        if (app.got_subcommand("probe")) return cmd_probe(s);
        if (app.got_subcommand("bench")) return cmd_bench(s);
        return 1;
    } catch (const SolverError& e) {
        std::cerr << "solver divergence: " << e.what() << "\n";
        return 2;
    } catch (const ContractViolation& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
