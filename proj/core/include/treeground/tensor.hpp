#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "treeground/common.hpp"

namespace tg {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Reference to a node on a specific tape instance. The serial disambiguates
/// tapes so a tensor recorded on an old tape is treated as untracked by a new
/// one instead of aliasing an unrelated node.
struct TapeRef {
    uint64_t tape_serial = 0;
    int32_t node = -1;
};

/// Dense row-major tensor of 64-bit floats. Plain value type; gradient
/// tracking is opt-in through the optional tape reference.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::optional<TapeRef> node;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }

    double value() const;  // the single element; throws if not scalar
    double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    double& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    double at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    /// Copy with the tape reference dropped.
    Tensor detached() const;

    bool all_finite() const;
    bool same_values(const Tensor& other, double tol = 0.0) const;
};

}  // namespace tg
