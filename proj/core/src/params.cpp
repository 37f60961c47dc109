#include "treeground/params.hpp"

#include <cmath>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw DataError(fmt::format("parameter '{}' already registered", name));
    index_.emplace(name, items_.size());
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError(fmt::format("unknown parameter '{}'", name));
    return items_[it->second].second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError(fmt::format("unknown parameter '{}'", name));
    return items_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::vector<int32_t> watch_all(ParamStore& store, Tape& tape) {
    std::vector<int32_t> ids;
    ids.reserve(store.size());
    for (auto& [name, tensor] : store) ids.push_back(tape.watch(tensor));
    return ids;
}

Tensor xavier_init(const Shape& shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    if (t.rank() < 2) return t;
    int64_t fan_in = shape[0];
    int64_t fan_out = shape[1];
    for (size_t d = 2; d < shape.size(); ++d) {
        fan_in *= shape[d];
        fan_out *= shape[d];
    }
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.data) v = rng.uniform(-a, a);
    return t;
}

Tensor normal_init(const Shape& shape, Rng& rng, double stddev) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

}  // namespace tg
