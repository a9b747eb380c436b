#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ddjscc/error.hpp"
#include "ddjscc/tensor.hpp"

namespace ddjscc {

// Named parameter tensors with gradient accumulators and Adam moment buffers.
// Entry order is insertion order and defines the checkpoint serialization
// order.
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        Tensor m1;  // first moment
        Tensor m2;  // second moment
    };

    int add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw UsageError("param '" + name + "' already exists");
        Entry e;
        e.name = name;
        e.grad = Tensor::zeros(init.shape());
        e.m1 = Tensor::zeros(init.shape());
        e.m2 = Tensor::zeros(init.shape());
        e.value = std::move(init);
        entries_.push_back(std::move(e));
        index_[name] = static_cast<int>(entries_.size()) - 1;
        return index_[name];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown param '" + name + "'");
        return it->second;
    }

    std::size_t size() const { return entries_.size(); }
    Entry& entry(int i) { return entries_.at(i); }
    const Entry& entry(int i) const { return entries_.at(i); }

    Tensor& value(const std::string& name) { return entries_[index_of(name)].value; }
    const Tensor& value(const std::string& name) const { return entries_[index_of(name)].value; }
    Tensor& grad(const std::string& name) { return entries_[index_of(name)].grad; }
    const Tensor& grad(const std::string& name) const { return entries_[index_of(name)].grad; }

    void accumulate_grad(int i, const Tensor& g) {
        Entry& e = entries_.at(i);
        if (!e.grad.same_shape(g)) {
            throw DimensionError("grad shape " + g.shape_str() + " != param shape " +
                                 e.value.shape_str() + " for '" + e.name + "'");
        }
        for (std::size_t j = 0; j < g.size(); ++j) e.grad[j] += g[j];
        grads_populated_ = true;
    }

    void zero_grads() {
        for (Entry& e : entries_) {
            for (std::size_t j = 0; j < e.grad.size(); ++j) e.grad[j] = 0.0;
        }
        grads_populated_ = false;
    }

    bool grads_populated() const { return grads_populated_; }
    std::int64_t step_count() const { return step_; }

    friend void adam_step(ParamStore& ps, double lr, double beta1, double beta2, double eps);

  private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
    bool grads_populated_ = false;
    std::int64_t step_ = 0;  // shared across all params, bumped once per adam_step
};

// Standard Adam with bias correction. Parameters whose gradient is exactly
// zero are skipped entirely: their moments stay untouched, which is what
// keeps inactive-layer state frozen between episodes. Gradients are zeroed
// on the way out.
inline void adam_step(ParamStore& ps, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
    if (!ps.grads_populated()) throw UsageError("adam_step: no gradients populated");
    ps.step_ += 1;
    const double t = static_cast<double>(ps.step_);
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        ParamStore::Entry& e = ps.entry(static_cast<int>(i));
        bool all_zero = true;
        for (std::size_t j = 0; j < e.grad.size(); ++j) {
            if (e.grad[j] != 0.0) {
                all_zero = false;
                break;
            }
        }
        if (all_zero) continue;
        for (std::size_t j = 0; j < e.grad.size(); ++j) {
            const double g = e.grad[j];
            e.m1[j] = beta1 * e.m1[j] + (1.0 - beta1) * g;
            e.m2[j] = beta2 * e.m2[j] + (1.0 - beta2) * g * g;
            const double mhat = e.m1[j] / c1;
            const double vhat = e.m2[j] / c2;
            e.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    ps.zero_grads();
}

}  // namespace ddjscc
