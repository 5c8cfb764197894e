#pragma once

#include <map>
#include <string>

#include "odelm/tensor.hpp"

namespace odelm {

// Named parameters with matching gradient buffers and trainability flags.
// std::map keeps iteration order deterministic (sorted by name).
template <class T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        bool trainable = true;
    };

    void add(const std::string& name, Tensor<T> value, bool trainable = true) {
        if (entries_.count(name)) throw ContractViolation("duplicate parameter '" + name + "'");
        Entry e;
        e.grad = Tensor<T>::zeros(value.shape());
        e.value = std::move(value);
        e.trainable = trainable;
        entries_.emplace(name, std::move(e));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractViolation("unknown parameter '" + name + "'");
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractViolation("unknown parameter '" + name + "'");
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return at(name).value; }
    const Tensor<T>& value(const std::string& name) const { return at(name).value; }
    Tensor<T>& grad(const std::string& name) { return at(name).grad; }

    void accumulate_grad(const std::string& name, const Tensor<T>& g) {
        Entry& e = at(name);
        if (!e.value.same_shape(g))
            throw ContractViolation("gradient shape " + shape_str(g.shape()) + " does not match parameter '" +
                                    name + "' shape " + shape_str(e.value.shape()));
        add_inplace(e.grad, g);
    }

    void zero_grads() {
        for (auto& [name, e] : entries_) e.grad = Tensor<T>::zeros(e.value.shape());
    }

    void set_all_trainable(bool on) {
        for (auto& [name, e] : entries_) e.trainable = on;
    }
    void set_trainable_prefix(const std::string& prefix, bool on) {
        for (auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) e.trainable = on;
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, e] : entries_) n += e.value.numel();
        return n;
    }
    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& [name, e] : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.trainable);
        return out;
    }

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace odelm
