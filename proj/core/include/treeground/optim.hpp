#pragma once

#include <cstdint>
#include <vector>

#include "treeground/params.hpp"
#include "treeground/tensor.hpp"

namespace tg {

struct AdamConfig {
    double base_lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay_factor = 0.1;
    int64_t decay_period = 35;  // epochs per decay step
};

/// Adam with bias correction and a stepped learning-rate schedule:
/// effective lr = base * decay_factor^floor(epoch / decay_period).
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    double effective_lr(int64_t epoch) const;

    /// One update over the whole store. `grads` is parallel to store order;
    /// a null entry means zero gradient. Aborts (no mutation) on any
    /// non-finite gradient.
    void step(ParamStore& store, const std::vector<const Tensor*>& grads, int64_t epoch);

    int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t step_count_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace tg
