#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "odelm/param_store.hpp"

namespace odelm {

// Global-norm clip over trainable gradients. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, e] : params) {
        if (!e.trainable) continue;
        for (std::int64_t i = 0; i < e.grad.numel(); ++i) {
            const double g = static_cast<double>(e.grad[i]);
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, e] : params) {
            if (!e.trainable) continue;
            for (std::int64_t i = 0; i < e.grad.numel(); ++i) e.grad[i] *= s;
        }
    }
    return norm;
}

template <class T>
double grad_norm_all(const ParamStore<T>& params) {
    double sq = 0.0;
    for (const auto& [name, e] : params)
        for (std::int64_t i = 0; i < e.grad.numel(); ++i) {
            const double g = static_cast<double>(e.grad[i]);
            sq += g * g;
        }
    return std::sqrt(sq);
}

template <class T>
double grad_norm_prefix(const ParamStore<T>& params, const std::string& prefix) {
    double sq = 0.0;
    for (const auto& [name, e] : params) {
        if (name.rfind(prefix, 0) != 0) continue;
        for (std::int64_t i = 0; i < e.grad.numel(); ++i) {
            const double g = static_cast<double>(e.grad[i]);
            sq += g * g;
        }
    }
    return std::sqrt(sq);
}

// Adam with decoupled weight decay applied to every trainable parameter.
// Decaying the output scale together with the weights it multiplies keeps
// the two from trading norm against each other. Moment state is double.
template <class T>
class AdamW {
public:
    AdamW(double lr, double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore<T>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& [name, e] : params) {
            if (!e.trainable) continue;
            auto& [m, v] = state_try_emplace(name, e.value.numel());
            const double decay = wd_;
            for (std::int64_t i = 0; i < e.value.numel(); ++i) {
                const double g = static_cast<double>(e.grad[i]);
                m[static_cast<std::size_t>(i)] = beta1_ * m[static_cast<std::size_t>(i)] + (1.0 - beta1_) * g;
                v[static_cast<std::size_t>(i)] =
                    beta2_ * v[static_cast<std::size_t>(i)] + (1.0 - beta2_) * g * g;
                const double mhat = m[static_cast<std::size_t>(i)] / bc1;
                const double vhat = v[static_cast<std::size_t>(i)] / bc2;
                const double p = static_cast<double>(e.value[i]);
                e.value[i] = static_cast<T>(p - lr_ * (mhat / (std::sqrt(vhat) + eps_) + decay * p));
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    std::pair<std::vector<double>, std::vector<double>>& state_try_emplace(const std::string& name,
                                                                           std::int64_t n) {
        auto it = state_.find(name);
        if (it == state_.end())
            it = state_
                     .emplace(name, std::make_pair(std::vector<double>(static_cast<std::size_t>(n), 0.0),
                                                   std::vector<double>(static_cast<std::size_t>(n), 0.0)))
                     .first;
        return it->second;
    }

    double lr_, wd_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

}  // namespace odelm
