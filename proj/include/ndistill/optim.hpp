#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ndistill/ops.hpp"
#include "ndistill/rng.hpp"
#include "ndistill/tensor.hpp"

namespace nd {

/// Trainable value with gradient and momentum buffer of identical shape.
/// Non-trainable entries (normalization running stats) ride along so that
/// checkpointing and composition treat all network state uniformly.
struct Parameter {
    Tensor value;
    Tensor grad;
    Tensor momentum;
    bool trainable = true;

    Parameter() = default;
    explicit Parameter(Tensor v, bool train = true)
        : value(std::move(v)), grad(value.shape), momentum(value.shape), trainable(train) {}
};

/// Named parameter set with deterministic (creation) order.
class ParamStore {
public:
    Parameter& create(const std::string& name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("param exists: " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, Parameter(std::move(value), trainable));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Parameter& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no such param: " + name);
        return items_[it->second].second;
    }
    const Parameter& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no such param: " + name);
        return items_[it->second].second;
    }

    std::size_t size() const { return items_.size(); }
    std::pair<std::string, Parameter>& item(std::size_t i) { return items_[i]; }
    const std::pair<std::string, Parameter>& item(std::size_t i) const { return items_[i]; }

    void zero_grads() {
        for (auto& [name, p] : items_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0f);
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [name, p] : items_)
            if (p.trainable) n += p.value.numel();
        return n;
    }

    /// Copy values (not grads or momentum) of every entry under `old_prefix`
    /// into `dst` with the prefix rewritten.
    void copy_into(ParamStore& dst, const std::string& old_prefix, const std::string& new_prefix) const {
        for (const auto& [name, p] : items_) {
            if (name.rfind(old_prefix, 0) != 0) continue;
            std::string tail = name.substr(old_prefix.size());
            dst.create(new_prefix + tail, p.value, p.trainable);
        }
    }

private:
    std::vector<std::pair<std::string, Parameter>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

/// v <- momentum*v + grad + weight_decay*value; value <- value - lr*v.
/// Grads are zeroed afterwards. Non-trainable entries are untouched.
inline void sgd_momentum_step(ParamStore& params, const SgdConfig& cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params.item(i).second;
        if (!p.trainable) continue;
        for (std::size_t j = 0; j < p.value.numel(); ++j) {
            double v = cfg.momentum * p.momentum.data[j] + p.grad.data[j] + cfg.weight_decay * p.value.data[j];
            p.momentum.data[j] = static_cast<float>(v);
            p.value.data[j] = static_cast<float>(p.value.data[j] - cfg.lr * v);
            p.grad.data[j] = 0.0f;
        }
    }
}

/// Scaled-uniform fan-in init (He-style bound sqrt(6/fan_in)).
inline void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

/// Stair-step learning-rate schedule with linear warmup, mirroring the
/// warmup + exponential-stair recipe used for the teachers.
struct LrSchedule {
    double base = 0.1;
    double warmup_start = 0.01;
    int warmup_steps = 0;
    double decay_factor = 1.0;  // multiplied in every decay_every steps
    int decay_every = 0;

    double at(int step) const {
        if (warmup_steps > 0 && step < warmup_steps)
            return warmup_start + (base - warmup_start) * (static_cast<double>(step) / warmup_steps);
        double lr = base;
        if (decay_every > 0 && decay_factor != 1.0) {
            int k = (step - warmup_steps) / decay_every;
            for (int i = 0; i < k; ++i) lr *= decay_factor;
        }
        return lr;
    }
};

}  // namespace nd
