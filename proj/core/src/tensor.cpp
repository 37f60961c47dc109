#include "treeground/tensor.hpp"

#include <cmath>

#include <fmt/format.h>

namespace tg {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    for (int64_t dim : shape) {
        if (dim <= 0) throw ShapeError(fmt::format("tensor dimension must be positive, got {}", shape_str(shape)));
    }
    if (shape_numel(shape) != numel()) {
        throw ShapeError(fmt::format("shape {} does not match {} elements", shape_str(shape), data.size()));
    }
}

Tensor Tensor::zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double v) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
}

double Tensor::value() const {
    if (!is_scalar()) throw ShapeError(fmt::format("expected scalar, got shape {}", shape_str(shape)));
    return data[0];
}

Tensor Tensor::detached() const {
    Tensor t(shape, data);
    t.node.reset();
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::same_values(const Tensor& other, double tol) const {
    if (shape != other.shape) return false;
    for (size_t i = 0; i < data.size(); ++i) {
        if (std::abs(data[i] - other.data[i]) > tol) return false;
    }
    return true;
}

}  // namespace tg
