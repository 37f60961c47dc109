#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "treeground/rng.hpp"
#include "treeground/tape.hpp"
#include "treeground/tensor.hpp"

namespace tg {

/// Ordered, named parameter collection. Iteration order is insertion order,
/// which makes optimizer state, checkpoints, and gradient walks deterministic.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;

    size_t size() const { return items_.size(); }
    std::pair<std::string, Tensor>& item(size_t i) { return items_[i]; }
    const std::pair<std::string, Tensor>& item(size_t i) const { return items_[i]; }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> index_;
};

/// Register every parameter on `tape`; returns node ids parallel to store order.
std::vector<int32_t> watch_all(ParamStore& store, Tape& tape);

/// Xavier-uniform init over the first two dims (fan_in = shape[0] treated as
/// input when rank >= 2; rank-1 tensors get zeros).
Tensor xavier_init(const Shape& shape, Rng& rng);
Tensor normal_init(const Shape& shape, Rng& rng, double stddev);

}  // namespace tg
