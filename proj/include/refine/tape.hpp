#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace refine::ad {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using SparseMat = Eigen::SparseMatrix<S, Eigen::RowMajor>;

template <class S>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; the tape owns storage.
template <class S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
    const ArrayX<S>& value() const;
    S scalar() const;
};

// Reverse-mode tape over row-major dense arrays. Forward values are computed
// eagerly as ops are recorded; backward() replays the recorded closures in
// reverse, accumulating gradients additively at fan-out. Single-threaded by
// construction: one refinement instance owns one tape.
template <class S>
class Tape {
public:
    using BackFn = std::function<void(Tape&, int /*out id*/)>;

    struct Slot {
        Shape shape;
        ArrayX<S> value;
        ArrayX<S> grad;
        bool requires_grad = false;
    };

    Var<S> leaf(const Shape& shape, const ArrayX<S>& data, bool requires_grad) {
        if (data.size() != numel(shape))
            throw std::invalid_argument("leaf data size does not match shape " + shape_str(shape));
        Slot slot;
        slot.shape = shape;
        slot.value = data;
        slot.requires_grad = requires_grad;
        slots_.push_back(std::move(slot));
        return {this, static_cast<int>(slots_.size()) - 1};
    }

    Var<S> constant(const Shape& shape, const ArrayX<S>& data) { return leaf(shape, data, false); }
    Var<S> scalar_constant(S v) {
        ArrayX<S> d(1);
        d[0] = v;
        return constant({1}, d);
    }

    // Record a computed value plus the closure that propagates its gradient.
    // The closure is dropped when no input requires a gradient.
    Var<S> record(const Shape& shape, ArrayX<S> value, bool requires_grad, BackFn back) {
        Slot slot;
        slot.shape = shape;
        slot.value = std::move(value);
        slot.requires_grad = requires_grad;
        slots_.push_back(std::move(slot));
        int id = static_cast<int>(slots_.size()) - 1;
        if (requires_grad && back) nodes_.push_back({id, std::move(back)});
        return {this, id};
    }

    const ArrayX<S>& value(const Var<S>& v) const { return slots_.at(v.id).value; }
    const ArrayX<S>& value(int id) const { return slots_.at(id).value; }
    const Shape& shape(const Var<S>& v) const { return slots_.at(v.id).shape; }
    const Shape& shape(int id) const { return slots_.at(id).shape; }

    // Gradient buffer, allocated (zero) on first touch.
    ArrayX<S>& grad(int id) {
        Slot& s = slots_.at(id);
        if (s.grad.size() == 0) s.grad = ArrayX<S>::Zero(s.value.size());
        return s.grad;
    }
    ArrayX<S>& grad(const Var<S>& v) { return grad(v.id); }

    // Gradient read that leaves untouched buffers unallocated.
    ArrayX<S> grad_or_zero(const Var<S>& v) const {
        const Slot& s = slots_.at(v.id);
        if (s.grad.size() == 0) return ArrayX<S>::Zero(s.value.size());
        return s.grad;
    }

    bool requires_grad(const Var<S>& v) const { return slots_.at(v.id).requires_grad; }
    bool requires_grad(int id) const { return slots_.at(id).requires_grad; }

    // d loss / d leaf for every leaf on a path to the scalar loss; leaves off
    // the path keep a zero gradient.
    void backward(const Var<S>& loss) {
        if (numel(shape(loss)) != 1) throw std::invalid_argument("backward requires a scalar loss");
        for (auto& s : slots_) s.grad.resize(0);
        grad(loss.id)[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Slot& out = slots_.at(it->out);
            if (out.grad.size() == 0) continue;  // not on any path to the loss
            it->back(*this, it->out);
        }
    }

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        int out;
        BackFn back;
    };
    std::vector<Slot> slots_;
    std::vector<Node> nodes_;
};

template <class S>
const Shape& Var<S>::shape() const {
    return tape->shape(*this);
}
template <class S>
const ArrayX<S>& Var<S>::value() const {
    return tape->value(*this);
}
template <class S>
S Var<S>::scalar() const {
    if (numel(shape()) != 1) throw std::invalid_argument("scalar() on non-scalar var");
    return value()[0];
}

// ---------------------------------------------------------------------------
// broadcasting (right operand may be scalar, matching row, or matching column)

enum class Broadcast { Same, ScalarRight, RowRight, ColRight };

inline Broadcast resolve_broadcast(const Shape& a, const Shape& b) {
    if (a == b) return Broadcast::Same;
    if (numel(b) == 1) return Broadcast::ScalarRight;
    if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Broadcast::RowRight;
    if (a.size() == 2 && b.size() == 2 && b[0] == a[0] && b[1] == 1) return Broadcast::ColRight;
    throw std::invalid_argument("incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {

// b's element aligned with flat index i of the left operand
template <class S>
S bval(const ArrayX<S>& b, Broadcast mode, Eigen::Index i, int cols) {
    switch (mode) {
        case Broadcast::Same: return b[i];
        case Broadcast::ScalarRight: return b[0];
        case Broadcast::RowRight: return b[i % cols];
        case Broadcast::ColRight: return b[i / cols];
    }
    return S(0);
}

template <class S>
void accumulate_broadcast(ArrayX<S>& target, Broadcast mode, Eigen::Index i, int cols, S g) {
    switch (mode) {
        case Broadcast::Same: target[i] += g; break;
        case Broadcast::ScalarRight: target[0] += g; break;
        case Broadcast::RowRight: target[i % cols] += g; break;
        case Broadcast::ColRight: target[i / cols] += g; break;
    }
}

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

namespace detail {

// kind: 0 add, 1 sub, 2 mul, 3 div
template <class S>
Var<S> binary_op(Var<S> a, Var<S> b, int kind) {
    Tape<S>& t = *a.tape;
    if (a.tape != b.tape) throw std::invalid_argument("vars from different tapes");
    const Shape ash = a.shape();
    const Broadcast mode = resolve_broadcast(ash, b.shape());
    const int cols = ash.size() == 2 ? ash[1] : static_cast<int>(a.value().size());
    const ArrayX<S>& av = a.value();
    const ArrayX<S>& bv = b.value();
    ArrayX<S> out(av.size());
    for (Eigen::Index i = 0; i < av.size(); ++i) {
        S x = av[i], y = bval(bv, mode, i, cols);
        out[i] = kind == 0 ? x + y : kind == 1 ? x - y : kind == 2 ? x * y : x / y;
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int aid = a.id, bid = b.id;
    return t.record(ash, std::move(out), rg, [aid, bid, kind, mode, cols](Tape<S>& tp, int out_id) {
        const ArrayX<S>& g = tp.grad(out_id);
        const ArrayX<S>& av2 = tp.value(aid);
        const ArrayX<S>& bv2 = tp.value(bid);
        const bool need_a = tp.requires_grad(aid);
        const bool need_b = tp.requires_grad(bid);
        ArrayX<S>* ga = need_a ? &tp.grad(aid) : nullptr;
        ArrayX<S>* gb = need_b ? &tp.grad(bid) : nullptr;
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            S gi = g[i];
            if (gi == S(0)) continue;
            S y = bval(bv2, mode, i, cols);
            switch (kind) {
                case 0:
                    if (need_a) (*ga)[i] += gi;
                    if (need_b) accumulate_broadcast(*gb, mode, i, cols, gi);
                    break;
                case 1:
                    if (need_a) (*ga)[i] += gi;
                    if (need_b) accumulate_broadcast(*gb, mode, i, cols, -gi);
                    break;
                case 2:
                    if (need_a) (*ga)[i] += gi * y;
                    if (need_b) accumulate_broadcast(*gb, mode, i, cols, gi * av2[i]);
                    break;
                case 3:
                    if (need_a) (*ga)[i] += gi / y;
                    if (need_b) accumulate_broadcast(*gb, mode, i, cols, -gi * av2[i] / (y * y));
                    break;
            }
        }
    });
}

}  // namespace detail

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
    return detail::binary_op(a, b, 0);
}
template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
    return detail::binary_op(a, b, 1);
}
template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
    return detail::binary_op(a, b, 2);
}
template <class S>
Var<S> div(Var<S> a, Var<S> b) {
    return detail::binary_op(a, b, 3);
}

// a*c + d with compile-time constants folded into one node
template <class S>
Var<S> affine(Var<S> a, S scale, S shift = S(0)) {
    Tape<S>& t = *a.tape;
    ArrayX<S> out = a.value() * scale + shift;
    int aid = a.id;
    return t.record(a.shape(), std::move(out), t.requires_grad(a), [aid, scale](Tape<S>& tp, int out_id) {
        tp.grad(aid) += tp.grad(out_id) * scale;
    });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
    return affine(a, c);
}
template <class S>
Var<S> neg(Var<S> a) {
    return affine(a, S(-1));
}

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <class S, class F, class DF>
Var<S> unary_op(Var<S> a, F f, DF df_from_xy) {
    Tape<S>& t = *a.tape;
    const ArrayX<S>& av = a.value();
    ArrayX<S> out(av.size());
    for (Eigen::Index i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    int aid = a.id;
    return t.record(a.shape(), std::move(out), t.requires_grad(a), [aid, df_from_xy](Tape<S>& tp, int out_id) {
        const ArrayX<S>& g = tp.grad(out_id);
        const ArrayX<S>& x = tp.value(aid);
        const ArrayX<S>& y = tp.value(out_id);
        ArrayX<S>& ga = tp.grad(aid);
        for (Eigen::Index i = 0; i < g.size(); ++i)
            if (g[i] != S(0)) ga[i] += g[i] * df_from_xy(x[i], y[i]);
    });
}

}  // namespace detail

template <class S>
Var<S> relu(Var<S> a) {
    return detail::unary_op(
        a, [](S x) { return x > S(0) ? x : S(0); }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
    return detail::unary_op(
        a,
        [](S x) {
            if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
            S e = std::exp(x);
            return e / (S(1) + e);
        },
        [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Var<S> log_op(Var<S> a) {
    return detail::unary_op(
        a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <class S>
Var<S> square(Var<S> a) {
    return detail::unary_op(
        a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <class S>
Var<S> sqrt_op(Var<S> a) {
    return detail::unary_op(
        a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(1) / (S(2) * y); });
}

// clamp(x, lo, hi): pass-through gradient strictly inside, zero outside
template <class S>
Var<S> clamp(Var<S> a, S lo, S hi) {
    return detail::unary_op(
        a, [lo, hi](S x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](S x, S) { return (x > lo && x < hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// matmul and fixed-sparse matmul

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    const Shape &as = a.shape(), &bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw std::invalid_argument("matmul shape mismatch " + shape_str(as) + " x " + shape_str(bs));
    const int m = as[0], k = as[1], n = bs[1];
    detail::ConstMatMap<S> A(a.value().data(), m, k);
    detail::ConstMatMap<S> B(b.value().data(), k, n);
    ArrayX<S> out(static_cast<Eigen::Index>(m) * n);
    detail::MatMap<S>(out.data(), m, n) = A * B;
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int aid = a.id, bid = b.id;
    return t.record({m, n}, std::move(out), rg, [aid, bid, m, k, n](Tape<S>& tp, int out_id) {
        detail::ConstMatMap<S> G(tp.grad(out_id).data(), m, n);
        if (tp.requires_grad(aid)) {
            detail::ConstMatMap<S> B2(tp.value(bid).data(), k, n);
            detail::MatMap<S>(tp.grad(aid).data(), m, k) += G * B2.transpose();
        }
        if (tp.requires_grad(bid)) {
            detail::ConstMatMap<S> A2(tp.value(aid).data(), m, k);
            detail::MatMap<S>(tp.grad(bid).data(), k, n) += A2.transpose() * G;
        }
    });
}

// y = A x for a fixed sparse matrix A (graph aggregation, Laplacian, ...).
template <class S, class M>
Var<S> spmm(std::shared_ptr<M> A_in, Var<S> x) {
    static_assert(std::is_same_v<std::remove_const_t<M>, SparseMat<S>>, "matrix must match the tape scalar");
    std::shared_ptr<const SparseMat<S>> A = A_in;
    Tape<S>& t = *x.tape;
    const Shape& xs = x.shape();
    if (xs.size() != 2 || A->cols() != xs[0]) throw std::invalid_argument("spmm shape mismatch");
    const int k = xs[0], n = xs[1];
    const int m = static_cast<int>(A->rows());
    detail::ConstMatMap<S> X(x.value().data(), k, n);
    ArrayX<S> out(static_cast<Eigen::Index>(m) * n);
    detail::MatMap<S>(out.data(), m, n) = *A * X;
    int xid = x.id;
    return t.record({m, n}, std::move(out), t.requires_grad(x), [A, xid, m, k, n](Tape<S>& tp, int out_id) {
        detail::ConstMatMap<S> G(tp.grad(out_id).data(), m, n);
        detail::MatMap<S>(tp.grad(xid).data(), k, n) += A->transpose() * G;
    });
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
Var<S> sum(Var<S> a) {
    Tape<S>& t = *a.tape;
    ArrayX<S> out(1);
    out[0] = a.value().sum();
    int aid = a.id;
    return t.record({1}, std::move(out), t.requires_grad(a),
                    [aid](Tape<S>& tp, int out_id) { tp.grad(aid) += tp.grad(out_id)[0]; });
}

template <class S>
Var<S> mean(Var<S> a) {
    const S inv = S(1) / S(a.value().size());
    return scale(sum(a), inv);
}

// Row (axis=1) or column (axis=0) sums of a 2D tensor.
template <class S>
Var<S> sum_axis(Var<S> a, int axis) {
    Tape<S>& t = *a.tape;
    const Shape& as = a.shape();
    if (as.size() != 2) throw std::invalid_argument("sum_axis expects a 2D tensor");
    const int m = as[0], n = as[1];
    detail::ConstMatMap<S> A(a.value().data(), m, n);
    int aid = a.id;
    if (axis == 1) {
        ArrayX<S> out(m);
        for (int i = 0; i < m; ++i) out[i] = A.row(i).sum();
        return t.record({m}, std::move(out), t.requires_grad(a), [aid, m, n](Tape<S>& tp, int out_id) {
            const ArrayX<S>& g = tp.grad(out_id);
            detail::MatMap<S> GA(tp.grad(aid).data(), m, n);
            for (int i = 0; i < m; ++i) GA.row(i).array() += g[i];
        });
    }
    if (axis == 0) {
        ArrayX<S> out(n);
        for (int j = 0; j < n; ++j) out[j] = A.col(j).sum();
        return t.record({n}, std::move(out), t.requires_grad(a), [aid, m, n](Tape<S>& tp, int out_id) {
            const ArrayX<S>& g = tp.grad(out_id);
            detail::MatMap<S> GA(tp.grad(aid).data(), m, n);
            for (int j = 0; j < n; ++j) GA.col(j).array() += g[j];
        });
    }
    throw std::invalid_argument("axis must be 0 or 1");
}

// Row-wise minimum with argmin; gradient flows only through the selected
// element, ties broken by the lowest index.
template <class S>
Var<S> min_reduce(Var<S> a, int axis = 1) {
    Tape<S>& t = *a.tape;
    const Shape& as = a.shape();
    if (as.size() != 2 || axis != 1) throw std::invalid_argument("min_reduce expects a 2D tensor, axis=1");
    const int m = as[0], n = as[1];
    detail::ConstMatMap<S> A(a.value().data(), m, n);
    ArrayX<S> out(m);
    auto argmin = std::make_shared<std::vector<int>>(m);
    for (int i = 0; i < m; ++i) {
        int best = 0;
        S bv = A(i, 0);
        for (int j = 1; j < n; ++j)
            if (A(i, j) < bv) {
                bv = A(i, j);
                best = j;
            }
        out[i] = bv;
        (*argmin)[i] = best;
    }
    int aid = a.id;
    return t.record({m}, std::move(out), t.requires_grad(a), [aid, argmin, m, n](Tape<S>& tp, int out_id) {
        const ArrayX<S>& g = tp.grad(out_id);
        detail::MatMap<S> GA(tp.grad(aid).data(), m, n);
        for (int i = 0; i < m; ++i) GA(i, (*argmin)[i]) += g[i];
    });
}

// ---------------------------------------------------------------------------
// gather / scatter

// Row selection: out[r, :] = a[idx[r], :] (1D tensors treated as single column).
template <class S>
Var<S> gather_rows(Var<S> a, std::shared_ptr<const std::vector<int>> idx) {
    Tape<S>& t = *a.tape;
    const Shape& as = a.shape();
    const int n = as.size() == 2 ? as[1] : 1;
    const int m = as[0];
    const int r = static_cast<int>(idx->size());
    detail::ConstMatMap<S> A(a.value().data(), m, n);
    ArrayX<S> out(static_cast<Eigen::Index>(r) * n);
    detail::MatMap<S> O(out.data(), r, n);
    for (int i = 0; i < r; ++i) {
        int src = (*idx)[i];
        if (src < 0 || src >= m) throw std::invalid_argument("gather index out of range");
        O.row(i) = A.row(src);
    }
    Shape os = as.size() == 2 ? Shape{r, n} : Shape{r};
    int aid = a.id;
    return t.record(os, std::move(out), t.requires_grad(a), [aid, idx, m, n, r](Tape<S>& tp, int out_id) {
        detail::ConstMatMap<S> G(tp.grad(out_id).data(), r, n);
        detail::MatMap<S> GA(tp.grad(aid).data(), m, n);
        for (int i = 0; i < r; ++i) GA.row((*idx)[i]) += G.row(i);
    });
}

// Column selection: out[:, c] = a[:, idx[c]]; covers fixed pixel permutations
// such as the horizontal image flip.
template <class S>
Var<S> gather_cols(Var<S> a, std::shared_ptr<const std::vector<int>> idx) {
    Tape<S>& t = *a.tape;
    const Shape& as = a.shape();
    if (as.size() != 2) throw std::invalid_argument("gather_cols expects a 2D tensor");
    const int m = as[0], n = as[1];
    const int c = static_cast<int>(idx->size());
    detail::ConstMatMap<S> A(a.value().data(), m, n);
    ArrayX<S> out(static_cast<Eigen::Index>(m) * c);
    detail::MatMap<S> O(out.data(), m, c);
    for (int j = 0; j < c; ++j) {
        int src = (*idx)[j];
        if (src < 0 || src >= n) throw std::invalid_argument("gather index out of range");
        O.col(j) = A.col(src);
    }
    int aid = a.id;
    return t.record({m, c}, std::move(out), t.requires_grad(a), [aid, idx, m, n, c](Tape<S>& tp, int out_id) {
        detail::ConstMatMap<S> G(tp.grad(out_id).data(), m, c);
        detail::MatMap<S> GA(tp.grad(aid).data(), m, n);
        for (int j = 0; j < c; ++j) GA.col((*idx)[j]) += G.col(j);
    });
}

// Same data under a new shape; gradients pass through untouched.
template <class S>
Var<S> reshape(Var<S> a, const Shape& shape) {
    Tape<S>& t = *a.tape;
    if (numel(shape) != static_cast<int>(a.value().size()))
        throw std::invalid_argument("reshape element count mismatch");
    int aid = a.id;
    return t.record(shape, ArrayX<S>(a.value()), t.requires_grad(a),
                    [aid](Tape<S>& tp, int out_id) { tp.grad(aid) += tp.grad(out_id); });
}

// Horizontal flip of an image tensor {H,W}.
template <class S>
Var<S> hflip(Var<S> img) {
    const Shape& s = img.shape();
    if (s.size() != 2) throw std::invalid_argument("hflip expects {H,W}");
    auto idx = std::make_shared<std::vector<int>>(s[1]);
    for (int k = 0; k < s[1]; ++k) (*idx)[k] = s[1] - 1 - k;
    return gather_cols(img, idx);
}

// ---------------------------------------------------------------------------
// conv2d (single image, CHW layout) via im2col + GEMM

struct Conv2dSpec {
    int stride = 1;
    int pad = 0;
};

template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, Conv2dSpec spec) {
    Tape<S>& t = *x.tape;
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0])
        throw std::invalid_argument("conv2d expects x{C,H,W}, w{Co,C,kh,kw}");
    const int C = xs[0], H = xs[1], W = xs[2];
    const int Co = ws[0], kh = ws[2], kw = ws[3];
    if (b.shape() != Shape{Co}) throw std::invalid_argument("conv2d bias must be {Co}");
    const int Ho = (H + 2 * spec.pad - kh) / spec.stride + 1;
    const int Wo = (W + 2 * spec.pad - kw) / spec.stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d output would be empty");

    // cols: (C*kh*kw) x (Ho*Wo)
    const int K = C * kh * kw;
    auto cols = std::make_shared<detail::RowMat<S>>(K, Ho * Wo);
    {
        const S* xd = x.value().data();
        for (int ci = 0; ci < C; ++ci)
            for (int u = 0; u < kh; ++u)
                for (int v = 0; v < kw; ++v) {
                    const int row = (ci * kh + u) * kw + v;
                    S* dst = cols->data() + static_cast<ptrdiff_t>(row) * (Ho * Wo);
                    for (int ho = 0; ho < Ho; ++ho) {
                        const int hi = ho * spec.stride + u - spec.pad;
                        for (int wo = 0; wo < Wo; ++wo) {
                            const int wi = wo * spec.stride + v - spec.pad;
                            dst[ho * Wo + wo] = (hi >= 0 && hi < H && wi >= 0 && wi < W)
                                                    ? xd[(static_cast<ptrdiff_t>(ci) * H + hi) * W + wi]
                                                    : S(0);
                        }
                    }
                }
    }

    detail::ConstMatMap<S> Wm(w.value().data(), Co, K);
    ArrayX<S> out(static_cast<Eigen::Index>(Co) * Ho * Wo);
    detail::MatMap<S> O(out.data(), Co, Ho * Wo);
    O = Wm * (*cols);
    for (int co = 0; co < Co; ++co) O.row(co).array() += b.value()[co];

    bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    int xid = x.id, wid = w.id, bid = b.id;
    return t.record({Co, Ho, Wo}, std::move(out), rg,
                    [xid, wid, bid, cols, spec, C, H, W, Co, kh, kw, Ho, Wo, K](Tape<S>& tp, int out_id) {
                        detail::ConstMatMap<S> G(tp.grad(out_id).data(), Co, Ho * Wo);
                        if (tp.requires_grad(bid)) {
                            ArrayX<S>& gb = tp.grad(bid);
                            for (int co = 0; co < Co; ++co) gb[co] += G.row(co).sum();
                        }
                        if (tp.requires_grad(wid)) {
                            detail::MatMap<S> GW(tp.grad(wid).data(), Co, K);
                            GW += G * cols->transpose();
                        }
                        if (tp.requires_grad(xid)) {
                            detail::ConstMatMap<S> Wm2(tp.value(wid).data(), Co, K);
                            detail::RowMat<S> gcols = Wm2.transpose() * G;  // K x Ho*Wo
                            S* gx = tp.grad(xid).data();
                            for (int ci = 0; ci < C; ++ci)
                                for (int u = 0; u < kh; ++u)
                                    for (int v = 0; v < kw; ++v) {
                                        const int row = (ci * kh + u) * kw + v;
                                        const S* src = gcols.data() + static_cast<ptrdiff_t>(row) * (Ho * Wo);
                                        for (int ho = 0; ho < Ho; ++ho) {
                                            const int hi = ho * spec.stride + u - spec.pad;
                                            if (hi < 0 || hi >= H) continue;
                                            for (int wo = 0; wo < Wo; ++wo) {
                                                const int wi = wo * spec.stride + v - spec.pad;
                                                if (wi < 0 || wi >= W) continue;
                                                gx[(static_cast<ptrdiff_t>(ci) * H + hi) * W + wi] +=
                                                    src[ho * Wo + wo];
                                            }
                                        }
                                    }
                        }
                    });
}

// ---------------------------------------------------------------------------
// bilinear sampling of a {C,H,W} map at fixed locations (map pixel coords).
// Locations outside the map clamp to the border; invalid points yield zeros.

template <class S>
struct SamplePoints {
    Eigen::Matrix<S, Eigen::Dynamic, 2, Eigen::RowMajor> xy;  // N x (x, y)
    std::vector<char> valid;
};

template <class S, class P>
Var<S> bilinear_sample(Var<S> map, std::shared_ptr<P> pts_in) {
    static_assert(std::is_same_v<std::remove_const_t<P>, SamplePoints<S>>, "points must match the tape scalar");
    std::shared_ptr<const SamplePoints<S>> pts = pts_in;
    Tape<S>& t = *map.tape;
    const Shape& ms = map.shape();
    if (ms.size() != 3) throw std::invalid_argument("bilinear_sample expects {C,H,W}");
    const int C = ms[0], H = ms[1], W = ms[2];
    const int N = static_cast<int>(pts->xy.rows());

    struct Corner {
        int idx00, idx01, idx10, idx11;
        S w00, w01, w10, w11;
        bool valid;
    };
    auto corners = std::make_shared<std::vector<Corner>>(N);
    for (int i = 0; i < N; ++i) {
        Corner& c = (*corners)[i];
        c.valid = pts->valid.empty() || pts->valid[i];
        if (!c.valid) continue;
        S x = std::min(S(W - 1), std::max(S(0), pts->xy(i, 0)));
        S y = std::min(S(H - 1), std::max(S(0), pts->xy(i, 1)));
        int x0 = std::min(W - 1, static_cast<int>(std::floor(x)));
        int y0 = std::min(H - 1, static_cast<int>(std::floor(y)));
        int x1 = std::min(W - 1, x0 + 1);
        int y1 = std::min(H - 1, y0 + 1);
        S fx = x - S(x0), fy = y - S(y0);
        c.idx00 = y0 * W + x0;
        c.idx01 = y0 * W + x1;
        c.idx10 = y1 * W + x0;
        c.idx11 = y1 * W + x1;
        c.w00 = (S(1) - fy) * (S(1) - fx);
        c.w01 = (S(1) - fy) * fx;
        c.w10 = fy * (S(1) - fx);
        c.w11 = fy * fx;
    }

    const S* md = map.value().data();
    ArrayX<S> out = ArrayX<S>::Zero(static_cast<Eigen::Index>(N) * C);
    for (int i = 0; i < N; ++i) {
        const Corner& c = (*corners)[i];
        if (!c.valid) continue;
        for (int ch = 0; ch < C; ++ch) {
            const S* plane = md + static_cast<ptrdiff_t>(ch) * H * W;
            out[static_cast<Eigen::Index>(i) * C + ch] =
                c.w00 * plane[c.idx00] + c.w01 * plane[c.idx01] + c.w10 * plane[c.idx10] + c.w11 * plane[c.idx11];
        }
    }
    int mid = map.id;
    return t.record({N, C}, std::move(out), t.requires_grad(map), [mid, corners, C, H, W, N](Tape<S>& tp, int out_id) {
        const ArrayX<S>& g = tp.grad(out_id);
        S* gm = tp.grad(mid).data();
        for (int i = 0; i < N; ++i) {
            const Corner& c = (*corners)[i];
            if (!c.valid) continue;
            for (int ch = 0; ch < C; ++ch) {
                S gi = g[static_cast<Eigen::Index>(i) * C + ch];
                if (gi == S(0)) continue;
                S* plane = gm + static_cast<ptrdiff_t>(ch) * H * W;
                plane[c.idx00] += gi * c.w00;
                plane[c.idx01] += gi * c.w01;
                plane[c.idx10] += gi * c.w10;
                plane[c.idx11] += gi * c.w11;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Adam

template <class S>
struct AdamState {
    ArrayX<S> m;
    ArrayX<S> v;
    long step = 0;
};

template <class S>
struct AdamConfig {
    S lr = S(7e-5);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
};

// Standard bias-corrected adaptive-moment update, in place.
template <class S>
void adam_step(ArrayX<S>& param, const ArrayX<S>& grad, AdamState<S>& state, const AdamConfig<S>& cfg) {
    if (param.size() != grad.size()) throw std::invalid_argument("adam_step shape mismatch");
    if (state.m.size() != param.size()) {
        state.m = ArrayX<S>::Zero(param.size());
        state.v = ArrayX<S>::Zero(param.size());
        state.step = 0;
    }
    ++state.step;
    state.m = cfg.beta1 * state.m + (S(1) - cfg.beta1) * grad;
    state.v = cfg.beta2 * state.v + (S(1) - cfg.beta2) * grad.square();
    const S bc1 = S(1) - std::pow(cfg.beta1, S(state.step));
    const S bc2 = S(1) - std::pow(cfg.beta2, S(state.step));
    param -= cfg.lr * (state.m / bc1) / ((state.v / bc2).sqrt() + cfg.eps);
}

}  // namespace refine::ad
