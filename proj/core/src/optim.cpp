#include "treeground/optim.hpp"

#include <cmath>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

double Adam::effective_lr(int64_t epoch) const {
    const int64_t period = cfg_.decay_period > 0 ? cfg_.decay_period : 1;
    return cfg_.base_lr * std::pow(cfg_.decay_factor, static_cast<double>(epoch / period));
}

void Adam::step(ParamStore& store, const std::vector<const Tensor*>& grads, int64_t epoch) {
    if (grads.size() != store.size())
        throw ShapeError(fmt::format("optimizer step: {} gradients for {} parameters", grads.size(), store.size()));
    if (m_.empty()) {
        m_.reserve(store.size());
        v_.reserve(store.size());
        for (auto& [name, p] : store) {
            m_.push_back(Tensor::zeros(p.shape));
            v_.push_back(Tensor::zeros(p.shape));
        }
    }
    // Validate everything before mutating anything.
    for (size_t i = 0; i < store.size(); ++i) {
        if (!grads[i]) continue;
        const auto& [name, p] = store.item(i);
        if (grads[i]->shape != p.shape)
            throw ShapeError(fmt::format("optimizer step: gradient shape {} for parameter '{}' of shape {}",
                                         shape_str(grads[i]->shape), name, shape_str(p.shape)));
        if (!grads[i]->all_finite())
            throw NumericError(fmt::format("optimizer step aborted: non-finite gradient for '{}'", name));
    }

    const int64_t t = ++step_count_;
    const double lr = effective_lr(epoch);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
    for (size_t i = 0; i < store.size(); ++i) {
        auto& p = store.item(i).second;
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < p.data.size(); ++j) {
            const double g = grads[i] ? grads[i]->data[j] : 0.0;
            m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g;
            v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m.data[j] / bc1;
            const double vhat = v.data[j] / bc2;
            p.data[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace tg
