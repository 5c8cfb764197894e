#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <vector>

#include "odelm/model.hpp"

namespace odelm {

struct BenchResult {
    double baseline_median_ms = 0;
    double baseline_std_ms = 0;
    double hybrid_median_ms = 0;
    double hybrid_std_ms = 0;
    double ratio = 0;  // hybrid / baseline
    int trials = 0;
};

namespace detail {

template <class T>
std::pair<double, double> time_forward(const TransformerLM<T>& model, const std::vector<std::int64_t>& tokens,
                                       std::int64_t B, std::int64_t Tn, int n_warmup, int n_trials) {
    using Clock = std::chrono::steady_clock;
    const Tensor<T> u = Tensor<T>::zeros(Shape{model.config().control_dim});
    volatile double sink = 0.0;  // keep the forward pass observable
    std::vector<double> ms;
    ms.reserve(static_cast<std::size_t>(n_trials));
    for (int i = 0; i < n_warmup + n_trials; ++i) {
        const auto t0 = Clock::now();
        auto fo = model.forward(tokens, B, Tn, u, model.config().solver);
        sink = sink + static_cast<double>(fo.tape.val(fo.logits)[0]);
        const auto t1 = Clock::now();
        if (i >= n_warmup)
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::vector<double> sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted.size() % 2 == 1
                              ? sorted[sorted.size() / 2]
                              : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    double mean = 0;
    for (double v : ms) mean += v;
    mean /= static_cast<double>(ms.size());
    double var = 0;
    for (double v : ms) var += (v - mean) * (v - mean);
    var /= static_cast<double>(ms.size());
    return {median, std::sqrt(var)};
}

}  // namespace detail

// Median/std forward latency on the identical batch, single-threaded.
template <class T>
BenchResult latency_bench(const TransformerLM<T>& baseline, const TransformerLM<T>& hybrid,
                          const std::vector<std::int64_t>& tokens, std::int64_t B, std::int64_t Tn,
                          int n_warmup = 3, int n_trials = 20) {
    if (n_trials < 1) throw ContractViolation("latency_bench: need at least one trial");
    BenchResult r;
    r.trials = n_trials;
    auto [bm, bs] = detail::time_forward(baseline, tokens, B, Tn, n_warmup, n_trials);
    auto [hm, hs] = detail::time_forward(hybrid, tokens, B, Tn, n_warmup, n_trials);
    r.baseline_median_ms = bm;
    r.baseline_std_ms = bs;
    r.hybrid_median_ms = hm;
    r.hybrid_std_ms = hs;
    r.ratio = hm / bm;
    return r;
}

}  // namespace odelm
