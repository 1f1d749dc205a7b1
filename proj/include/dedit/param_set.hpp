#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "dedit/tensor.hpp"

namespace dedit {

// Named parameter collection. Iteration order is the sorted name order, which
// fixes the layout of checkpoints and the walk order of the optimizer.
// Entries flagged frozen never receive gradients or optimizer updates.
template <class S>
class ParamSetT {
public:
    struct Entry {
        TensorT<S> tensor;
        bool frozen = false;
    };

    void add(const std::string& name, TensorT<S> t, bool frozen) {
        if (m_.count(name)) throw std::invalid_argument("ParamSet: duplicate name '" + name + "'");
        t.set_tracked(!frozen);
        m_.emplace(name, Entry{std::move(t), frozen});
    }

    bool contains(const std::string& name) const { return m_.count(name) != 0; }

    TensorT<S>& at(const std::string& name) {
        auto it = m_.find(name);
        if (it == m_.end()) throw std::out_of_range("ParamSet: no entry '" + name + "'");
        return it->second.tensor;
    }
    const TensorT<S>& at(const std::string& name) const {
        auto it = m_.find(name);
        if (it == m_.end()) throw std::out_of_range("ParamSet: no entry '" + name + "'");
        return it->second.tensor;
    }

    bool frozen(const std::string& name) const {
        auto it = m_.find(name);
        if (it == m_.end()) throw std::out_of_range("ParamSet: no entry '" + name + "'");
        return it->second.frozen;
    }

    std::size_t entry_count() const { return m_.size(); }

    std::size_t scalar_count(bool trainable_only = false) const {
        std::size_t n = 0;
        for (const auto& [name, e] : m_)
            if (!trainable_only || !e.frozen) n += e.tensor.size();
        return n;
    }

    template <class F>
    void for_each(F&& f) const {
        for (const auto& [name, e] : m_) f(name, e.tensor, e.frozen);
    }
    template <class F>
    void for_each(F&& f) {
        for (auto& [name, e] : m_) f(name, e.tensor, e.frozen);
    }

    void zero_grads() {
        for (auto& [name, e] : m_)
            if (!e.frozen) e.tensor.zero_grad();
    }

private:
    std::map<std::string, Entry> m_;
};

using ParamSetF = ParamSetT<float>;
using ParamSetD = ParamSetT<double>;

}  // namespace dedit
