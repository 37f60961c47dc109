#include "treeground/tape.hpp"

#include <atomic>
#include <cmath>

#include <fmt/format.h>

namespace tg {

const char* op_name(Op op) {
    switch (op) {
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul_elementwise: return "mul_elementwise";
        case Op::scale: return "scale";
        case Op::sigmoid: return "sigmoid";
        case Op::relu: return "relu";
        case Op::softmax_lastdim: return "softmax_lastdim";
        case Op::layernorm_lastdim: return "layernorm_lastdim";
        case Op::maxpool_spatial: return "maxpool_spatial";
        case Op::concat: return "concat";
        case Op::embed_lookup: return "embed_lookup";
        case Op::l2_distance: return "l2_distance";
        case Op::cosine_similarity: return "cosine_similarity";
        case Op::mean_lastdim: return "mean_lastdim";
        case Op::div_elementwise: return "div_elementwise";
        case Op::bce_with_logits: return "bce_with_logits";
        case Op::conv2d: return "conv2d";
        case Op::reshape: return "reshape";
        case Op::transpose2d: return "transpose2d";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_fail(Op op, const Tensor& a, const Tensor& b) {
    throw ShapeError(fmt::format("{}: incompatible shapes {} and {}", op_name(op), shape_str(a.shape), shape_str(b.shape)));
}

[[noreturn]] void shape_fail1(Op op, const Tensor& a, const char* why) {
    throw ShapeError(fmt::format("{}: shape {} {}", op_name(op), shape_str(a.shape), why));
}

// C(m x n) += A(m x k) * B(k x n), all row-major.
void mm_accum(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* a_row = A + i * k;
        double* c_row = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double a = a_row[p];
            const double* b_row = B + p * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

std::vector<double> transposed(const std::vector<double>& src, int64_t rows, int64_t cols) {
    std::vector<double> out(src.size());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(c * rows + r)] = src[static_cast<size_t>(r * cols + c)];
    return out;
}

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Broadcast codes for binary elementwise ops.
enum Bcast : int64_t { kSame = 0, kRow = 1, kScalarB = 2, kCol = 3 };

int64_t bcast_code(Op op, const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) return kSame;
    if (b.numel() == 1) return kScalarB;
    if (a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1]) return kRow;
    if (a.rank() == 2 && b.rank() == 2 && b.shape[0] == a.shape[0] && b.shape[1] == 1) return kCol;
    shape_fail(op, a, b);
}

double bcast_pick(const Tensor& b, int64_t code, int64_t flat, int64_t cols) {
    switch (code) {
        case kSame: return b.at(flat);
        case kScalarB: return b.at(0);
        case kRow: return b.at(flat % cols);
        case kCol: return b.at(flat / cols);
    }
    return 0.0;
}

// Reduce a full-size gradient onto the broadcast operand's shape.
void bcast_reduce(std::vector<double>& gb, const double* g, int64_t code, int64_t numel, int64_t cols) {
    switch (code) {
        case kSame:
            for (int64_t i = 0; i < numel; ++i) gb[static_cast<size_t>(i)] += g[i];
            break;
        case kScalarB:
            for (int64_t i = 0; i < numel; ++i) gb[0] += g[i];
            break;
        case kRow:
            for (int64_t i = 0; i < numel; ++i) gb[static_cast<size_t>(i % cols)] += g[i];
            break;
        case kCol:
            for (int64_t i = 0; i < numel; ++i) gb[static_cast<size_t>(i / cols)] += g[i];
            break;
    }
}

struct MatmulDims {
    int64_t m, k, n;
    bool a_vec, b_vec;
    bool ta, tb;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    MatmulDims d{};
    d.ta = ta;
    d.tb = tb;
    d.a_vec = a.rank() == 1;
    d.b_vec = b.rank() == 1;
    if ((d.a_vec && ta) || (d.b_vec && tb)) shape_fail(Op::matmul, a, b);
    if (a.rank() > 2 || b.rank() > 2) shape_fail(Op::matmul, a, b);
    int64_t ak, am;
    if (d.a_vec) {
        am = 1;
        ak = a.shape[0];
    } else {
        am = ta ? a.shape[1] : a.shape[0];
        ak = ta ? a.shape[0] : a.shape[1];
    }
    int64_t bk, bn;
    if (d.b_vec) {
        bk = b.shape[0];
        bn = 1;
    } else {
        bk = tb ? b.shape[1] : b.shape[0];
        bn = tb ? b.shape[0] : b.shape[1];
    }
    if (ak != bk) shape_fail(Op::matmul, a, b);
    d.m = am;
    d.k = ak;
    d.n = bn;
    return d;
}

// Materialize the effective row-major (m x k) operand.
std::vector<double> effective(const Tensor& t, bool trans, int64_t rows_eff, int64_t cols_eff) {
    if (!trans) return t.data;
    return transposed(t.data, cols_eff, rows_eff);  // stored as (cols_eff x rows_eff)
}

struct Conv2dDims {
    int64_t cin, h, w, cout, kh, kw, oh, ow, stride, pad;
};

Conv2dDims conv2d_dims(const Tensor& x, const Tensor& wt, const Tensor& b, int64_t stride, int64_t pad) {
    if (x.rank() != 3 || wt.rank() != 4 || b.rank() != 1) {
        throw ShapeError(fmt::format("conv2d: expected x rank 3, w rank 4, b rank 1; got {} {} {}", shape_str(x.shape),
                                     shape_str(wt.shape), shape_str(b.shape)));
    }
    Conv2dDims d{};
    d.cin = x.shape[0];
    d.h = x.shape[1];
    d.w = x.shape[2];
    d.cout = wt.shape[0];
    d.kh = wt.shape[2];
    d.kw = wt.shape[3];
    d.stride = stride;
    d.pad = pad;
    if (wt.shape[1] != d.cin || b.shape[0] != d.cout) shape_fail(Op::conv2d, x, wt);
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.oh < 1 || d.ow < 1) shape_fail(Op::conv2d, x, wt);
    return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// forward kernels; may append saved state (e.g. argmax) to attrs
// ---------------------------------------------------------------------------

namespace {

Tensor forward_op(Op op, std::span<const Tensor* const> in, OpAttrs& attrs) {
    auto need = [&](size_t n) {
        if (in.size() != n)
            throw ShapeError(fmt::format("{}: expected {} inputs, got {}", op_name(op), n, in.size()));
    };
    switch (op) {
        case Op::matmul: {
            need(2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            bool ta = attrs.i.size() > 0 && attrs.i[0] != 0;
            bool tb = attrs.i.size() > 1 && attrs.i[1] != 0;
            auto d = matmul_dims(a, b, ta, tb);
            attrs.i = {ta, tb, d.m, d.k, d.n, d.a_vec, d.b_vec};
            auto A = effective(a, ta, d.m, d.k);
            auto B = effective(b, tb, d.k, d.n);
            std::vector<double> C(static_cast<size_t>(d.m * d.n), 0.0);
            mm_accum(A.data(), B.data(), C.data(), d.m, d.k, d.n);
            Shape os;
            if (d.a_vec && d.b_vec) os = {1};
            else if (d.a_vec) os = {d.n};
            else if (d.b_vec) os = {d.m};
            else os = {d.m, d.n};
            return Tensor(os, std::move(C));
        }
        case Op::add:
        case Op::sub:
        case Op::mul_elementwise:
        case Op::div_elementwise: {
            need(2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            int64_t code = bcast_code(op, a, b);
            if (op == Op::div_elementwise && code != kSame && code != kScalarB) shape_fail(op, a, b);
            attrs.i = {code};
            int64_t cols = a.rank() >= 1 ? a.shape.back() : 1;
            Tensor out = Tensor::zeros(a.shape);
            for (int64_t i = 0; i < a.numel(); ++i) {
                double bv = bcast_pick(b, code, i, cols);
                double av = a.at(i);
                switch (op) {
                    case Op::add: out.at(i) = av + bv; break;
                    case Op::sub: out.at(i) = av - bv; break;
                    case Op::mul_elementwise: out.at(i) = av * bv; break;
                    default: out.at(i) = av / bv; break;
                }
            }
            return out;
        }
        case Op::scale: {
            need(1);
            if (attrs.d.empty()) throw ShapeError("scale: missing constant");
            Tensor out = *in[0];
            out.node.reset();
            for (auto& v : out.data) v *= attrs.d[0];
            return out;
        }
        case Op::sigmoid: {
            need(1);
            Tensor out = *in[0];
            out.node.reset();
            for (auto& v : out.data) v = stable_sigmoid(v);
            return out;
        }
        case Op::relu: {
            need(1);
            Tensor out = *in[0];
            out.node.reset();
            for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
            return out;
        }
        case Op::softmax_lastdim: {
            need(1);
            const Tensor& a = *in[0];
            if (a.rank() < 1) shape_fail1(op, a, "needs rank >= 1");
            int64_t cols = a.shape.back();
            int64_t rows = a.numel() / cols;
            Tensor out = Tensor::zeros(a.shape);
            for (int64_t r = 0; r < rows; ++r) {
                const double* x = a.data.data() + r * cols;
                double* y = out.data.data() + r * cols;
                double mx = x[0];
                for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                double sum = 0.0;
                for (int64_t j = 0; j < cols; ++j) {
                    y[j] = std::exp(x[j] - mx);
                    sum += y[j];
                }
                for (int64_t j = 0; j < cols; ++j) y[j] /= sum;
            }
            return out;
        }
        case Op::layernorm_lastdim: {
            need(1);
            const Tensor& a = *in[0];
            if (a.rank() < 1) shape_fail1(op, a, "needs rank >= 1");
            if (attrs.d.empty()) attrs.d = {1e-5};
            const double eps = attrs.d[0];
            int64_t cols = a.shape.back();
            int64_t rows = a.numel() / cols;
            Tensor out = Tensor::zeros(a.shape);
            for (int64_t r = 0; r < rows; ++r) {
                const double* x = a.data.data() + r * cols;
                double* y = out.data.data() + r * cols;
                double mu = 0.0;
                for (int64_t j = 0; j < cols; ++j) mu += x[j];
                mu /= static_cast<double>(cols);
                double var = 0.0;
                for (int64_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
                var /= static_cast<double>(cols);
                const double inv = 1.0 / std::sqrt(var + eps);
                for (int64_t j = 0; j < cols; ++j) y[j] = (x[j] - mu) * inv;
            }
            return out;
        }
        case Op::maxpool_spatial: {
            need(1);
            const Tensor& a = *in[0];
            if (a.rank() != 3) shape_fail1(op, a, "needs rank 3 (C,H,W)");
            int64_t c = a.shape[0], hw = a.shape[1] * a.shape[2];
            Tensor out = Tensor::zeros({c});
            attrs.i.clear();
            for (int64_t ch = 0; ch < c; ++ch) {
                const double* x = a.data.data() + ch * hw;
                int64_t best = 0;
                for (int64_t i = 1; i < hw; ++i)
                    if (x[i] > x[best]) best = i;
                out.at(ch) = x[best];
                attrs.i.push_back(ch * hw + best);
            }
            return out;
        }
        case Op::concat: {
            if (in.empty()) throw ShapeError("concat: needs at least one input");
            int64_t axis = attrs.i.empty() ? 0 : attrs.i[0];
            attrs.i = {axis};
            const Tensor& first = *in[0];
            if (axis == 0) {
                Shape rest(first.shape.begin() + 1, first.shape.end());
                int64_t dim0 = 0;
                for (const Tensor* t : in) {
                    if (t->rank() != first.rank() || Shape(t->shape.begin() + 1, t->shape.end()) != rest)
                        shape_fail(op, first, *t);
                    dim0 += t->shape[0];
                }
                Shape os = {dim0};
                os.insert(os.end(), rest.begin(), rest.end());
                Tensor out = Tensor::zeros(os);
                double* dst = out.data.data();
                for (const Tensor* t : in) {
                    std::copy(t->data.begin(), t->data.end(), dst);
                    dst += t->data.size();
                }
                return out;
            }
            if (axis == 1) {
                if (first.rank() != 2) shape_fail1(op, first, "axis 1 needs rank 2");
                int64_t rows = first.shape[0], cols = 0;
                for (const Tensor* t : in) {
                    if (t->rank() != 2 || t->shape[0] != rows) shape_fail(op, first, *t);
                    cols += t->shape[1];
                }
                Tensor out = Tensor::zeros({rows, cols});
                int64_t off = 0;
                for (const Tensor* t : in) {
                    int64_t tc = t->shape[1];
                    for (int64_t r = 0; r < rows; ++r)
                        std::copy(t->data.begin() + r * tc, t->data.begin() + (r + 1) * tc,
                                  out.data.begin() + r * cols + off);
                    off += tc;
                }
                return out;
            }
            throw ShapeError("concat: axis must be 0 or 1");
        }
        case Op::embed_lookup: {
            need(1);
            const Tensor& table = *in[0];
            if (table.rank() != 2) shape_fail1(op, table, "table needs rank 2");
            int64_t v = table.shape[0], c = table.shape[1];
            if (attrs.i.empty()) throw ShapeError("embed_lookup: no ids given");
            Tensor out = Tensor::zeros({static_cast<int64_t>(attrs.i.size()), c});
            for (size_t r = 0; r < attrs.i.size(); ++r) {
                int64_t id = attrs.i[r];
                if (id < 0 || id >= v)
                    throw DataError(fmt::format("embed_lookup: id {} out of range [0,{})", id, v));
                std::copy(table.data.begin() + id * c, table.data.begin() + (id + 1) * c,
                          out.data.begin() + static_cast<int64_t>(r) * c);
            }
            return out;
        }
        case Op::l2_distance: {
            need(2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            if (a.shape != b.shape) shape_fail(op, a, b);
            double s = 0.0;
            for (int64_t i = 0; i < a.numel(); ++i) {
                double d = a.at(i) - b.at(i);
                s += d * d;
            }
            return Tensor::scalar(std::sqrt(s));
        }
        case Op::cosine_similarity: {
            need(2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            if (a.shape != b.shape) shape_fail(op, a, b);
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int64_t i = 0; i < a.numel(); ++i) {
                dot += a.at(i) * b.at(i);
                na += a.at(i) * a.at(i);
                nb += b.at(i) * b.at(i);
            }
            if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero vector");
            return Tensor::scalar(dot / (std::sqrt(na) * std::sqrt(nb)));
        }
        case Op::mean_lastdim: {
            need(1);
            const Tensor& a = *in[0];
            if (a.rank() < 1) shape_fail1(op, a, "needs rank >= 1");
            int64_t cols = a.shape.back();
            int64_t rows = a.numel() / cols;
            Shape os(a.shape.begin(), a.shape.end() - 1);
            if (os.empty()) os = {1};
            Tensor out = Tensor::zeros(os);
            for (int64_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (int64_t j = 0; j < cols; ++j) s += a.at(r * cols + j);
                out.at(r) = s / static_cast<double>(cols);
            }
            return out;
        }
        case Op::bce_with_logits: {
            need(2);
            const Tensor& z = *in[0];
            const Tensor& y = *in[1];
            if (z.shape != y.shape) shape_fail(op, z, y);
            double s = 0.0;
            for (int64_t i = 0; i < z.numel(); ++i) {
                double zi = z.at(i), yi = y.at(i);
                s += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
            }
            return Tensor::scalar(s / static_cast<double>(z.numel()));
        }
        case Op::conv2d: {
            need(3);
            const Tensor& x = *in[0];
            const Tensor& wt = *in[1];
            const Tensor& b = *in[2];
            if (attrs.i.size() < 2) throw ShapeError("conv2d: missing stride/pad");
            auto d = conv2d_dims(x, wt, b, attrs.i[0], attrs.i[1]);
            Tensor out = Tensor::zeros({d.cout, d.oh, d.ow});
            for (int64_t co = 0; co < d.cout; ++co) {
                for (int64_t oh = 0; oh < d.oh; ++oh) {
                    for (int64_t ow = 0; ow < d.ow; ++ow) {
                        double acc = b.at(co);
                        for (int64_t ci = 0; ci < d.cin; ++ci) {
                            for (int64_t kh = 0; kh < d.kh; ++kh) {
                                int64_t ih = oh * d.stride - d.pad + kh;
                                if (ih < 0 || ih >= d.h) continue;
                                for (int64_t kw = 0; kw < d.kw; ++kw) {
                                    int64_t iw = ow * d.stride - d.pad + kw;
                                    if (iw < 0 || iw >= d.w) continue;
                                    acc += x.at((ci * d.h + ih) * d.w + iw) *
                                           wt.at(((co * d.cin + ci) * d.kh + kh) * d.kw + kw);
                                }
                            }
                        }
                        out.at((co * d.oh + oh) * d.ow + ow) = acc;
                    }
                }
            }
            return out;
        }
        case Op::reshape: {
            need(1);
            const Tensor& a = *in[0];
            Shape ns(attrs.i.begin(), attrs.i.end());
            if (shape_numel(ns) != a.numel())
                throw ShapeError(fmt::format("reshape: {} elements into shape {}", a.numel(), shape_str(ns)));
            Tensor out(ns, a.data);
            return out;
        }
        case Op::transpose2d: {
            need(1);
            const Tensor& a = *in[0];
            if (a.rank() != 2) shape_fail1(op, a, "needs rank 2");
            return Tensor({a.shape[1], a.shape[0]}, transposed(a.data, a.shape[0], a.shape[1]));
        }
    }
    throw ShapeError("unknown primitive");
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
    static std::atomic<uint64_t> next_serial{1};
    serial_ = next_serial.fetch_add(1);
}

int32_t Tape::add_node(const Shape& shape, const std::vector<double>& value, bool watched) {
    nodes_.push_back(Node{shape, value, watched});
    return static_cast<int32_t>(nodes_.size() - 1);
}

int32_t Tape::watch(Tensor& t) {
    if (t.node && t.node->tape_serial == serial_) {
        nodes_[static_cast<size_t>(t.node->node)].watched = true;
        return t.node->node;
    }
    int32_t id = add_node(t.shape, t.data, true);
    t.node = TapeRef{serial_, id};
    return id;
}

int32_t Tape::constant(const Tensor& t) {
    return add_node(t.shape, t.data, false);
}

int32_t Tape::node_for_input(const Tensor& t) {
    if (t.node && t.node->tape_serial == serial_) return t.node->node;
    return constant(t);
}

Tensor apply_primitive(Op op, std::span<const Tensor* const> inputs, const OpAttrs& attrs, Tape* tape) {
    OpAttrs a = attrs;
    Tensor out = forward_op(op, inputs, a);
    if (!out.all_finite()) {
        throw NumericError(fmt::format("{}: non-finite output", op_name(op)));
    }
    bool tracked = false;
    if (tape) {
        for (const Tensor* t : inputs) {
            if (t->node && t->node->tape_serial == tape->serial()) {
                tracked = true;
                break;
            }
        }
    }
    if (tracked) {
        Tape::Entry e;
        e.op = op;
        for (const Tensor* t : inputs) e.inputs.push_back(tape->node_for_input(*t));
        e.out = tape->add_node(out.shape, out.data, false);
        e.attrs = std::move(a);
        out.node = TapeRef{tape->serial(), e.out};
        tape->entries_.push_back(std::move(e));
    }
    return out;
}

GradMap Tape::backward(const Tensor& loss) {
    if (!loss.node || loss.node->tape_serial != serial_)
        throw ShapeError("backward: loss is not tracked on this tape");
    if (!loss.is_scalar()) throw ShapeError(fmt::format("backward: loss must be scalar, got {}", shape_str(loss.shape)));

    std::vector<std::vector<double>> grads(nodes_.size());
    auto grad_of = [&](int32_t id) -> std::vector<double>& {
        auto& g = grads[static_cast<size_t>(id)];
        if (g.empty()) g.assign(nodes_[static_cast<size_t>(id)].value.size(), 0.0);
        return g;
    };
    grads[static_cast<size_t>(loss.node->node)] = {1.0};
    backward_visits_ = 0;

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        const Entry& e = *it;
        const auto& gout = grads[static_cast<size_t>(e.out)];
        if (gout.empty()) continue;
        ++backward_visits_;
        const double* g = gout.data();
        auto val = [&](int32_t id) -> const std::vector<double>& { return nodes_[static_cast<size_t>(id)].value; };
        auto shp = [&](int32_t id) -> const Shape& { return nodes_[static_cast<size_t>(id)].shape; };

        switch (e.op) {
            case Op::matmul: {
                const auto& ia = e.attrs.i;  // ta tb m k n a_vec b_vec
                bool ta = ia[0], tb = ia[1];
                int64_t m = ia[2], k = ia[3], n = ia[4];
                const auto& av = val(e.inputs[0]);
                const auto& bv = val(e.inputs[1]);
                auto A = ta ? transposed(av, k, m) : av;  // m x k
                auto B = tb ? transposed(bv, n, k) : bv;  // k x n
                // gA_eff = g * B^T ; gB_eff = A^T * g
                std::vector<double> gA(static_cast<size_t>(m * k), 0.0);
                std::vector<double> gB(static_cast<size_t>(k * n), 0.0);
                auto Bt = transposed(B, k, n);  // n x k
                mm_accum(g, Bt.data(), gA.data(), m, n, k);
                auto At = transposed(A, m, k);  // k x m
                mm_accum(At.data(), g, gB.data(), k, m, n);
                auto& ga = grad_of(e.inputs[0]);
                if (ta) {
                    auto gat = transposed(gA, m, k);  // k x m
                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += gat[i];
                } else {
                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += gA[i];
                }
                auto& gb = grad_of(e.inputs[1]);
                if (tb) {
                    auto gbt = transposed(gB, k, n);  // n x k
                    for (size_t i = 0; i < gb.size(); ++i) gb[i] += gbt[i];
                } else {
                    for (size_t i = 0; i < gb.size(); ++i) gb[i] += gB[i];
                }
                break;
            }
            case Op::add:
            case Op::sub: {
                int64_t code = e.attrs.i[0];
                const auto& ashape = shp(e.inputs[0]);
                int64_t numel = static_cast<int64_t>(val(e.inputs[0]).size());
                int64_t cols = ashape.empty() ? 1 : ashape.back();
                auto& ga = grad_of(e.inputs[0]);
                for (int64_t i = 0; i < numel; ++i) ga[static_cast<size_t>(i)] += g[i];
                auto& gb = grad_of(e.inputs[1]);
                if (e.op == Op::add) {
                    bcast_reduce(gb, g, code, numel, cols);
                } else {
                    std::vector<double> neg(gout.size());
                    for (size_t i = 0; i < gout.size(); ++i) neg[i] = -g[i];
                    bcast_reduce(gb, neg.data(), code, numel, cols);
                }
                break;
            }
            case Op::mul_elementwise: {
                int64_t code = e.attrs.i[0];
                const auto& av = val(e.inputs[0]);
                const Tensor b(shp(e.inputs[1]), val(e.inputs[1]));
                const auto& ashape = shp(e.inputs[0]);
                int64_t numel = static_cast<int64_t>(av.size());
                int64_t cols = ashape.empty() ? 1 : ashape.back();
                auto& ga = grad_of(e.inputs[0]);
                std::vector<double> gb_full(static_cast<size_t>(numel));
                for (int64_t i = 0; i < numel; ++i) {
                    double bv = bcast_pick(b, code, i, cols);
                    ga[static_cast<size_t>(i)] += g[i] * bv;
                    gb_full[static_cast<size_t>(i)] = g[i] * av[static_cast<size_t>(i)];
                }
                bcast_reduce(grad_of(e.inputs[1]), gb_full.data(), code, numel, cols);
                break;
            }
            case Op::div_elementwise: {
                int64_t code = e.attrs.i[0];
                const auto& av = val(e.inputs[0]);
                const Tensor b(shp(e.inputs[1]), val(e.inputs[1]));
                const auto& ashape = shp(e.inputs[0]);
                int64_t numel = static_cast<int64_t>(av.size());
                int64_t cols = ashape.empty() ? 1 : ashape.back();
                auto& ga = grad_of(e.inputs[0]);
                std::vector<double> gb_full(static_cast<size_t>(numel));
                for (int64_t i = 0; i < numel; ++i) {
                    double bv = bcast_pick(b, code, i, cols);
                    ga[static_cast<size_t>(i)] += g[i] / bv;
                    gb_full[static_cast<size_t>(i)] = -g[i] * av[static_cast<size_t>(i)] / (bv * bv);
                }
                bcast_reduce(grad_of(e.inputs[1]), gb_full.data(), code, numel, cols);
                break;
            }
            case Op::scale: {
                const double c = e.attrs.d[0];
                auto& ga = grad_of(e.inputs[0]);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * c;
                break;
            }
            case Op::sigmoid: {
                const auto& y = val(e.out);
                auto& ga = grad_of(e.inputs[0]);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            }
            case Op::relu: {
                const auto& x = val(e.inputs[0]);
                auto& ga = grad_of(e.inputs[0]);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
                break;
            }
            case Op::softmax_lastdim: {
                const auto& y = val(e.out);
                const auto& ashape = shp(e.inputs[0]);
                int64_t cols = ashape.back();
                int64_t rows = static_cast<int64_t>(y.size()) / cols;
                auto& ga = grad_of(e.inputs[0]);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * cols;
                    const double* gr = g + r * cols;
                    double dot = 0.0;
                    for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                    for (int64_t j = 0; j < cols; ++j) ga[static_cast<size_t>(r * cols + j)] += yr[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::layernorm_lastdim: {
                const double eps = e.attrs.d[0];
                const auto& x = val(e.inputs[0]);
                const auto& ashape = shp(e.inputs[0]);
                int64_t cols = ashape.back();
                int64_t rows = static_cast<int64_t>(x.size()) / cols;
                auto& ga = grad_of(e.inputs[0]);
                const double nc = static_cast<double>(cols);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * cols;
                    const double* gr = g + r * cols;
                    double mu = 0.0;
                    for (int64_t j = 0; j < cols; ++j) mu += xr[j];
                    mu /= nc;
                    double var = 0.0;
                    for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= nc;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double gmean = 0.0, gymean = 0.0;
                    for (int64_t j = 0; j < cols; ++j) {
                        double yj = (xr[j] - mu) * inv;
                        gmean += gr[j];
                        gymean += gr[j] * yj;
                    }
                    gmean /= nc;
                    gymean /= nc;
                    for (int64_t j = 0; j < cols; ++j) {
                        double yj = (xr[j] - mu) * inv;
                        ga[static_cast<size_t>(r * cols + j)] += inv * (gr[j] - gmean - yj * gymean);
                    }
                }
                break;
            }
            case Op::maxpool_spatial: {
                auto& ga = grad_of(e.inputs[0]);
                for (size_t ch = 0; ch < e.attrs.i.size(); ++ch) ga[static_cast<size_t>(e.attrs.i[ch])] += g[ch];
                break;
            }
            case Op::concat: {
                int64_t axis = e.attrs.i[0];
                if (axis == 0) {
                    size_t off = 0;
                    for (int32_t id : e.inputs) {
                        auto& gi = grad_of(id);
                        for (size_t i = 0; i < gi.size(); ++i) gi[i] += g[off + i];
                        off += gi.size();
                    }
                } else {
                    int64_t rows = shp(e.out)[0];
                    int64_t cols = shp(e.out)[1];
                    int64_t off = 0;
                    for (int32_t id : e.inputs) {
                        int64_t tc = shp(id)[1];
                        auto& gi = grad_of(id);
                        for (int64_t r = 0; r < rows; ++r)
                            for (int64_t c = 0; c < tc; ++c) gi[static_cast<size_t>(r * tc + c)] += g[r * cols + off + c];
                        off += tc;
                    }
                }
                break;
            }
            case Op::embed_lookup: {
                int64_t c = shp(e.inputs[0])[1];
                auto& ga = grad_of(e.inputs[0]);
                for (size_t r = 0; r < e.attrs.i.size(); ++r) {
                    int64_t id = e.attrs.i[r];
                    for (int64_t j = 0; j < c; ++j)
                        ga[static_cast<size_t>(id * c + j)] += g[static_cast<int64_t>(r) * c + j];
                }
                break;
            }
            case Op::l2_distance: {
                const auto& av = val(e.inputs[0]);
                const auto& bv = val(e.inputs[1]);
                const double dist = val(e.out)[0];
                auto& ga = grad_of(e.inputs[0]);
                auto& gb = grad_of(e.inputs[1]);
                if (dist > 0.0) {
                    for (size_t i = 0; i < av.size(); ++i) {
                        double d = (av[i] - bv[i]) / dist * g[0];
                        ga[i] += d;
                        gb[i] -= d;
                    }
                }
                // subgradient 0 at coincident points
                break;
            }
            case Op::cosine_similarity: {
                const auto& av = val(e.inputs[0]);
                const auto& bv = val(e.inputs[1]);
                double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                for (size_t i = 0; i < av.size(); ++i) {
                    dot += av[i] * bv[i];
                    na2 += av[i] * av[i];
                    nb2 += bv[i] * bv[i];
                }
                const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                const double denom = na * nb;
                auto& ga = grad_of(e.inputs[0]);
                auto& gb = grad_of(e.inputs[1]);
                for (size_t i = 0; i < av.size(); ++i) {
                    ga[i] += g[0] * (bv[i] / denom - dot * av[i] / (na2 * denom));
                    gb[i] += g[0] * (av[i] / denom - dot * bv[i] / (nb2 * denom));
                }
                break;
            }
            case Op::mean_lastdim: {
                const auto& ashape = shp(e.inputs[0]);
                int64_t cols = ashape.back();
                int64_t rows = static_cast<int64_t>(val(e.inputs[0]).size()) / cols;
                auto& ga = grad_of(e.inputs[0]);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < cols; ++j)
                        ga[static_cast<size_t>(r * cols + j)] += g[r] / static_cast<double>(cols);
                break;
            }
            case Op::bce_with_logits: {
                const auto& zv = val(e.inputs[0]);
                const auto& yv = val(e.inputs[1]);
                const double n = static_cast<double>(zv.size());
                auto& gz = grad_of(e.inputs[0]);
                auto& gy = grad_of(e.inputs[1]);
                for (size_t i = 0; i < zv.size(); ++i) {
                    gz[i] += g[0] * (stable_sigmoid(zv[i]) - yv[i]) / n;
                    gy[i] += g[0] * (-zv[i]) / n;
                }
                break;
            }
            case Op::conv2d: {
                const Tensor x(shp(e.inputs[0]), val(e.inputs[0]));
                const Tensor wt(shp(e.inputs[1]), val(e.inputs[1]));
                const Tensor bb(shp(e.inputs[2]), val(e.inputs[2]));
                auto d = conv2d_dims(x, wt, bb, e.attrs.i[0], e.attrs.i[1]);
                auto& gx = grad_of(e.inputs[0]);
                auto& gw = grad_of(e.inputs[1]);
                auto& gb = grad_of(e.inputs[2]);
                for (int64_t co = 0; co < d.cout; ++co) {
                    for (int64_t oh = 0; oh < d.oh; ++oh) {
                        for (int64_t ow = 0; ow < d.ow; ++ow) {
                            const double go = g[(co * d.oh + oh) * d.ow + ow];
                            if (go == 0.0) continue;
                            gb[static_cast<size_t>(co)] += go;
                            for (int64_t ci = 0; ci < d.cin; ++ci) {
                                for (int64_t kh = 0; kh < d.kh; ++kh) {
                                    int64_t ih = oh * d.stride - d.pad + kh;
                                    if (ih < 0 || ih >= d.h) continue;
                                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                                        int64_t iw = ow * d.stride - d.pad + kw;
                                        if (iw < 0 || iw >= d.w) continue;
                                        const size_t xi = static_cast<size_t>((ci * d.h + ih) * d.w + iw);
                                        const size_t wi = static_cast<size_t>(((co * d.cin + ci) * d.kh + kh) * d.kw + kw);
                                        gx[xi] += go * wt.data[wi];
                                        gw[wi] += go * x.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case Op::reshape: {
                auto& ga = grad_of(e.inputs[0]);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                break;
            }
            case Op::transpose2d: {
                const auto& os = shp(e.out);
                auto gt = transposed(std::vector<double>(gout.begin(), gout.end()), os[0], os[1]);
                auto& ga = grad_of(e.inputs[0]);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += gt[i];
                break;
            }
        }
    }

    GradMap out;
    for (size_t id = 0; id < nodes_.size(); ++id) {
        if (!nodes_[id].watched) continue;
        Tensor gt = Tensor::zeros(nodes_[id].shape);
        if (!grads[id].empty()) gt.data = std::move(grads[id]);
        out.emplace(static_cast<int32_t>(id), std::move(gt));
    }
    return out;
}

// ---------------------------------------------------------------------------
// wrappers
// ---------------------------------------------------------------------------

namespace ops {

namespace {
Tensor apply2(Op op, const Tensor& a, const Tensor& b, const OpAttrs& attrs, Tape* t) {
    const Tensor* in[2] = {&a, &b};
    return apply_primitive(op, std::span<const Tensor* const>(in, 2), attrs, t);
}
Tensor apply1(Op op, const Tensor& a, const OpAttrs& attrs, Tape* t) {
    const Tensor* in[1] = {&a};
    return apply_primitive(op, std::span<const Tensor* const>(in, 1), attrs, t);
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* t, bool trans_a, bool trans_b) {
    return apply2(Op::matmul, a, b, {{trans_a, trans_b}, {}}, t);
}
Tensor add(const Tensor& a, const Tensor& b, Tape* t) { return apply2(Op::add, a, b, {}, t); }
Tensor sub(const Tensor& a, const Tensor& b, Tape* t) { return apply2(Op::sub, a, b, {}, t); }
Tensor mul(const Tensor& a, const Tensor& b, Tape* t) { return apply2(Op::mul_elementwise, a, b, {}, t); }
Tensor div(const Tensor& a, const Tensor& b, Tape* t) { return apply2(Op::div_elementwise, a, b, {}, t); }
Tensor scale(const Tensor& a, double c, Tape* t) { return apply1(Op::scale, a, {{}, {c}}, t); }
Tensor sigmoid(const Tensor& a, Tape* t) { return apply1(Op::sigmoid, a, {}, t); }
Tensor relu(const Tensor& a, Tape* t) { return apply1(Op::relu, a, {}, t); }
Tensor softmax_lastdim(const Tensor& a, Tape* t) { return apply1(Op::softmax_lastdim, a, {}, t); }
Tensor layernorm_lastdim(const Tensor& a, Tape* t, double eps) {
    return apply1(Op::layernorm_lastdim, a, {{}, {eps}}, t);
}
Tensor maxpool_spatial(const Tensor& chw, Tape* t) { return apply1(Op::maxpool_spatial, chw, {}, t); }
Tensor concat(std::span<const Tensor* const> parts, int64_t axis, Tape* t) {
    return apply_primitive(Op::concat, parts, {{axis}, {}}, t);
}
Tensor embed_lookup(const Tensor& table, std::span<const int64_t> ids, Tape* t) {
    OpAttrs a;
    a.i.assign(ids.begin(), ids.end());
    return apply1(Op::embed_lookup, table, a, t);
}
Tensor l2_distance(const Tensor& a, const Tensor& b, Tape* t) { return apply2(Op::l2_distance, a, b, {}, t); }
Tensor cosine_similarity(const Tensor& a, const Tensor& b, Tape* t) {
    return apply2(Op::cosine_similarity, a, b, {}, t);
}
Tensor mean_lastdim(const Tensor& a, Tape* t) { return apply1(Op::mean_lastdim, a, {}, t); }
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, Tape* t) {
    return apply2(Op::bce_with_logits, logits, targets, {}, t);
}
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad, Tape* t) {
    const Tensor* in[3] = {&x, &w, &b};
    return apply_primitive(Op::conv2d, std::span<const Tensor* const>(in, 3), {{stride, pad}, {}}, t);
}
Tensor reshape(const Tensor& a, Shape s, Tape* t) {
    OpAttrs attrs;
    attrs.i.assign(s.begin(), s.end());
    return apply1(Op::reshape, a, attrs, t);
}
Tensor transpose2d(const Tensor& a, Tape* t) { return apply1(Op::transpose2d, a, {}, t); }

Tensor abs_compose(const Tensor& a, Tape* t) {
    return add(relu(a, t), relu(scale(a, -1.0, t), t), t);
}

}  // namespace ops

}  // namespace tg
