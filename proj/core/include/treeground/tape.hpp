#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "treeground/tensor.hpp"

namespace tg {

/// The primitive set. Every differentiable computation in the project is a
/// composition of these kernels.
enum class Op : uint8_t {
    matmul,
    add,
    sub,
    mul_elementwise,
    scale,
    sigmoid,
    relu,
    softmax_lastdim,
    layernorm_lastdim,
    maxpool_spatial,
    concat,
    embed_lookup,
    l2_distance,
    cosine_similarity,
    mean_lastdim,
    div_elementwise,
    bce_with_logits,
    conv2d,
    reshape,
    transpose2d,
};

const char* op_name(Op op);

/// Per-application attributes (ids for lookups, stride/pad, axis, flags ...).
struct OpAttrs {
    std::vector<int64_t> i;
    std::vector<double> d;
};

/// Gradients keyed by tape node id; watched nodes unreachable from the loss
/// get zero tensors.
using GradMap = std::unordered_map<int32_t, Tensor>;

/// Reverse-mode tape. Records primitive applications in topological order and
/// replays them backward once each. Not shareable while recording.
class Tape {
public:
    Tape();

    /// Register a parameter. Its gradient appears in every backward() result.
    int32_t watch(Tensor& t);

    /// Record a tensor as a non-watched leaf (constants, inputs).
    int32_t constant(const Tensor& t);

    uint64_t serial() const { return serial_; }
    size_t recorded_ops() const { return entries_.size(); }
    size_t backward_visits() const { return backward_visits_; }
    const Shape& node_shape(int32_t id) const { return nodes_[static_cast<size_t>(id)].shape; }

    GradMap backward(const Tensor& loss);

private:
    friend Tensor apply_primitive(Op, std::span<const Tensor* const>, const OpAttrs&, Tape*);

    struct Node {
        Shape shape;
        std::vector<double> value;
        bool watched = false;
    };
    struct Entry {
        Op op;
        std::vector<int32_t> inputs;
        int32_t out;
        OpAttrs attrs;
    };

    int32_t add_node(const Shape& shape, const std::vector<double>& value, bool watched);
    int32_t node_for_input(const Tensor& t);

    uint64_t serial_;
    std::vector<Node> nodes_;
    std::vector<Entry> entries_;
    size_t backward_visits_ = 0;
};

/// Apply one primitive. Validates shapes, computes the forward value, checks
/// finiteness, and records the application when `tape` is non-null and any
/// input is tracked on it (untracked inputs become constant leaves).
Tensor apply_primitive(Op op, std::span<const Tensor* const> inputs, const OpAttrs& attrs, Tape* tape);

/// Convenience wrappers over apply_primitive.
namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b, Tape* t, bool trans_a = false, bool trans_b = false);
Tensor add(const Tensor& a, const Tensor& b, Tape* t);
Tensor sub(const Tensor& a, const Tensor& b, Tape* t);
Tensor mul(const Tensor& a, const Tensor& b, Tape* t);
Tensor div(const Tensor& a, const Tensor& b, Tape* t);
Tensor scale(const Tensor& a, double c, Tape* t);
Tensor sigmoid(const Tensor& a, Tape* t);
Tensor relu(const Tensor& a, Tape* t);
Tensor softmax_lastdim(const Tensor& a, Tape* t);
Tensor layernorm_lastdim(const Tensor& a, Tape* t, double eps = 1e-5);
Tensor maxpool_spatial(const Tensor& chw, Tape* t);
Tensor concat(std::span<const Tensor* const> parts, int64_t axis, Tape* t);
Tensor embed_lookup(const Tensor& table, std::span<const int64_t> ids, Tape* t);
Tensor l2_distance(const Tensor& a, const Tensor& b, Tape* t);
Tensor cosine_similarity(const Tensor& a, const Tensor& b, Tape* t);
Tensor mean_lastdim(const Tensor& a, Tape* t);
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, Tape* t);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad, Tape* t);
Tensor reshape(const Tensor& a, Shape s, Tape* t);
Tensor transpose2d(const Tensor& a, Tape* t);

/// abs(x) composed as relu(x) + relu(-x).
Tensor abs_compose(const Tensor& a, Tape* t);

}  // namespace ops

}  // namespace tg
