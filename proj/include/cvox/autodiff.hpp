#pragma once

// Reverse-mode autodiff over dense tensors. A forward pass builds a DAG of
// nodes holding values and backward closures; backward() runs the closures in
// reverse topological order. Heavy ops (matmul, conv3d) lower to Eigen GEMM.

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cvox/tensor.hpp"

namespace cvox::ad {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard disabling graph construction (inference paths)
struct NoGrad {
    NoGrad() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev_; }
    bool prev_;
};

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<NodePtr<T>> parents;
    std::function<void(Node<T>&)> back;

    void accum_grad_init() {
        if (grad.empty()) grad = Tensor<T>::zeros(val.shape());
    }
};

// Lightweight handle; copyable, shares the node.
template <class T>
class Var {
  public:
    Var() = default;
    explicit Var(NodePtr<T> n) : node_(std::move(n)) {}
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->val = std::move(value);
        node_->requires_grad = requires_grad && grad_mode();
    }

    bool defined() const { return node_ != nullptr; }
    Node<T>& node() const { return *node_; }
    const NodePtr<T>& ptr() const { return node_; }
    const Tensor<T>& value() const { return node_->val; }
    Tensor<T>& value_mut() { return node_->val; }
    const Tensor<T>& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->val.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    void zero_grad() {
        if (node_) node_->grad = Tensor<T>();
    }

    // leaf sharing the same value, detached from the graph
    Var detach() const {
        Var v(node_->val, false);
        return v;
    }

  private:
    NodePtr<T> node_;
};

namespace detail {

template <class T>
bool any_requires(const std::vector<Var<T>>& parents) {
    for (const auto& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

template <class T>
Var<T> make_op(Tensor<T> val, std::vector<Var<T>> parents, std::function<void(Node<T>&)> back) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    if (grad_mode() && any_requires(parents)) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.ptr());
        n->back = std::move(back);
    }
    return Var<T>(std::move(n));
}

template <class T>
void accum(Node<T>& p, const Tensor<T>& g) {
    if (!p.requires_grad) return;
    p.accum_grad_init();
    T* dst = p.grad.data();
    const T* src = g.data();
    for (int64_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRM = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// Runs reverse-mode accumulation from a scalar root. Parameter gradients
// accumulate across calls until zero_grad, which is what gradient
// accumulation over a batch relies on.
template <class T>
void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw Error::contract("backward() root must be scalar");
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({&root.node(), 0});
    seen.insert(&root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i].get();
            ++i;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.node().accum_grad_init();
    root.node().grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->back) n->back(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!same_shape(a.shape(), b.shape()))
        throw Error::contract("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T *pa = a.value().data(), *pb = b.value().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        detail::accum(*n.parents[0], n.grad);
        detail::accum(*n.parents[1], n.grad);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!same_shape(a.shape(), b.shape()))
        throw Error::contract("sub: shape mismatch");
    Tensor<T> out(a.shape());
    const T *pa = a.value().data(), *pb = b.value().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        detail::accum(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i];
            detail::accum(*n.parents[1], g);
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!same_shape(a.shape(), b.shape()))
        throw Error::contract("mul: shape mismatch");
    Tensor<T> out(a.shape());
    const T *pa = a.value().data(), *pb = b.value().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const T *pa = n.parents[0]->val.data(), *pb = n.parents[1]->val.data();
        if (n.parents[0]->requires_grad) {
            Tensor<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * pb[i];
            detail::accum(*n.parents[0], g);
        }
        if (n.parents[1]->requires_grad) {
            Tensor<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * pa[i];
            detail::accum(*n.parents[1], g);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    return detail::make_op<T>(std::move(out), {a}, [c](Node<T>& n) {
        Tensor<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * c;
        detail::accum(*n.parents[0], g);
    });
}

template <class T>
Var<T> shift(const Var<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    return detail::make_op<T>(std::move(out), {a},
                              [](Node<T>& n) { detail::accum(*n.parents[0], n.grad); });
}

template <class T, class FwdFn, class BwdFn>
Var<T> unary_op(const Var<T>& a, FwdFn f, BwdFn dfdx) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
    return detail::make_op<T>(std::move(out), {a}, [dfdx](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        const T* x = n.parents[0]->val.data();
        const T* y = n.val.data();
        Tensor<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * dfdx(x[i], y[i]);
        detail::accum(*n.parents[0], g);
    });
}

template <class T>
Var<T> silu(const Var<T>& a) {
    return unary_op(
        a, [](T x) { T s = T(1) / (T(1) + std::exp(-x)); return x * s; },
        [](T x, T) {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    return unary_op(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh_op(const Var<T>& a) {
    return unary_op(
        a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sin_op(const Var<T>& a) {
    return unary_op(
        a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <class T>
Var<T> exp_op(const Var<T>& a) {
    return unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> abs_op(const Var<T>& a) {
    return unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> square(const Var<T>& a) {
    return unary_op(
        a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// clamp with zero gradient outside the interval
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    return unary_op(
        a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(dsum(a.value())));
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor<T> g(n.parents[0]->val.shape(), n.grad[0]);
        detail::accum(*n.parents[0], g);
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    const T inv = T(1) / static_cast<T>(a.value().size());
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(dmean(a.value())));
    return detail::make_op<T>(std::move(out), {a}, [inv](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor<T> g(n.parents[0]->val.shape(), n.grad[0] * inv);
        detail::accum(*n.parents[0], g);
    });
}

template <class T>
T scalar(const Var<T>& a) {
    if (a.value().size() != 1) throw Error::contract("scalar(): non-scalar var");
    return a.value()[0];
}

// ---------------------------------------------------------------------------
// matrix ops (rank-2 tensors, row-major)
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw Error::contract("matmul: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor<T> out(Shape{n, m});
    {
        detail::CMapRM<T> A(a.value().data(), n, k), B(b.value().data(), k, m);
        detail::MapRM<T> C(out.data(), n, m);
        C.noalias() = A * B;
    }
    return detail::make_op<T>(std::move(out), {a, b}, [n, k, m](Node<T>& n_) {
        detail::CMapRM<T> G(n_.grad.data(), n, m);
        if (n_.parents[0]->requires_grad) {
            Tensor<T> ga(Shape{n, k});
            detail::CMapRM<T> B(n_.parents[1]->val.data(), k, m);
            detail::MapRM<T> GA(ga.data(), n, k);
            GA.noalias() = G * B.transpose();
            detail::accum(*n_.parents[0], ga);
        }
        if (n_.parents[1]->requires_grad) {
            Tensor<T> gb(Shape{k, m});
            detail::CMapRM<T> A(n_.parents[0]->val.data(), n, k);
            detail::MapRM<T> GB(gb.data(), k, m);
            GB.noalias() = A.transpose() * G;
            detail::accum(*n_.parents[1], gb);
        }
    });
}

template <class T>
Var<T> transpose(const Var<T>& x) {
    if (x.shape().size() != 2) throw Error::contract("transpose: rank-2 only");
    const int64_t n = x.shape()[0], m = x.shape()[1];
    Tensor<T> out(Shape{m, n});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < m; ++c) out[c * n + r] = x.value()[r * m + c];
    return detail::make_op<T>(std::move(out), {x}, [n, m](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{n, m});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < m; ++c) g[r * m + c] = nd.grad[c * n + r];
        detail::accum(*nd.parents[0], g);
    });
}

// y[r, :] = x[r, :] + bias  (bias shape {m})
template <class T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& bias) {
    const int64_t n = x.shape()[0], m = x.shape()[1];
    if (bias.value().size() != m) throw Error::contract("add_rowvec: bias size mismatch");
    Tensor<T> out(x.shape());
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < m; ++c) out[r * m + c] = x.value()[r * m + c] + bias.value()[c];
    return detail::make_op<T>(std::move(out), {x, bias}, [n, m](Node<T>& nd) {
        detail::accum(*nd.parents[0], nd.grad);
        if (nd.parents[1]->requires_grad) {
            Tensor<T> gb(Shape{m});
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < m; ++c) gb[c] += nd.grad[r * m + c];
            detail::accum(*nd.parents[1], gb);
        }
    });
}

// y[r, :] = x[r, :] * w[r]  (w is a plain per-row weight, not differentiated)
template <class T>
Var<T> scale_rows(const Var<T>& x, std::vector<T> w) {
    const int64_t n = x.shape()[0], m = x.shape()[1];
    if (static_cast<int64_t>(w.size()) != n) throw Error::contract("scale_rows: weight size mismatch");
    Tensor<T> out(x.shape());
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < m; ++c) out[r * m + c] = x.value()[r * m + c] * w[r];
    return detail::make_op<T>(std::move(out), {x}, [n, m, w = std::move(w)](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(nd.grad.shape());
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < m; ++c) g[r * m + c] = nd.grad[r * m + c] * w[r];
        detail::accum(*nd.parents[0], g);
    });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    const int64_t n = a.shape()[0], ma = a.shape()[1], mb = b.shape()[1];
    if (b.shape()[0] != n) throw Error::contract("concat_cols: row mismatch");
    Tensor<T> out(Shape{n, ma + mb});
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t c = 0; c < ma; ++c) out[r * (ma + mb) + c] = a.value()[r * ma + c];
        for (int64_t c = 0; c < mb; ++c) out[r * (ma + mb) + ma + c] = b.value()[r * mb + c];
    }
    return detail::make_op<T>(std::move(out), {a, b}, [n, ma, mb](Node<T>& nd) {
        if (nd.parents[0]->requires_grad) {
            Tensor<T> g(Shape{n, ma});
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < ma; ++c) g[r * ma + c] = nd.grad[r * (ma + mb) + c];
            detail::accum(*nd.parents[0], g);
        }
        if (nd.parents[1]->requires_grad) {
            Tensor<T> g(Shape{n, mb});
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < mb; ++c) g[r * mb + c] = nd.grad[r * (ma + mb) + ma + c];
            detail::accum(*nd.parents[1], g);
        }
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, int64_t from, int64_t count) {
    const int64_t n = x.shape()[0], m = x.shape()[1];
    if (from < 0 || from + count > m) throw Error::contract("slice_cols: out of range");
    Tensor<T> out(Shape{n, count});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < count; ++c) out[r * count + c] = x.value()[r * m + from + c];
    return detail::make_op<T>(std::move(out), {x}, [n, m, from, count](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{n, m});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < count; ++c) g[r * m + from + c] = nd.grad[r * count + c];
        detail::accum(*nd.parents[0], g);
    });
}

// gathers rows of a (N x C) matrix; duplicate indices accumulate in backward
template <class T>
Var<T> gather_rows(const Var<T>& x, std::vector<int64_t> rows) {
    const int64_t n = x.shape()[0], m = x.shape()[1];
    const int64_t q = static_cast<int64_t>(rows.size());
    Tensor<T> out(Shape{q, m});
    for (int64_t r = 0; r < q; ++r) {
        if (rows[r] < 0 || rows[r] >= n) throw Error::contract("gather_rows: index out of range");
        std::copy_n(x.value().data() + rows[r] * m, m, out.data() + r * m);
    }
    return detail::make_op<T>(std::move(out), {x}, [n, m, rows = std::move(rows)](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{n, m});
        for (size_t r = 0; r < rows.size(); ++r) {
            T* dst = g.data() + rows[r] * m;
            const T* src = nd.grad.data() + static_cast<int64_t>(r) * m;
            for (int64_t c = 0; c < m; ++c) dst[c] += src[c];
        }
        detail::accum(*nd.parents[0], g);
    });
}

// softmax over the last dimension of a rank-2 tensor
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
    const int64_t n = x.shape()[0], m = x.shape()[1];
    Tensor<T> out(x.shape());
    for (int64_t r = 0; r < n; ++r) {
        const T* row = x.value().data() + r * m;
        T mx = row[0];
        for (int64_t c = 1; c < m; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int64_t c = 0; c < m; ++c) z += std::exp(static_cast<double>(row[c] - mx));
        for (int64_t c = 0; c < m; ++c)
            out[r * m + c] = static_cast<T>(std::exp(static_cast<double>(row[c] - mx)) / z);
    }
    return detail::make_op<T>(std::move(out), {x}, [n, m](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{n, m});
        for (int64_t r = 0; r < n; ++r) {
            const T* y = nd.val.data() + r * m;
            const T* gy = nd.grad.data() + r * m;
            double dot = 0.0;
            for (int64_t c = 0; c < m; ++c) dot += static_cast<double>(gy[c]) * y[c];
            for (int64_t c = 0; c < m; ++c)
                g[r * m + c] = y[c] * (gy[c] - static_cast<T>(dot));
        }
        detail::accum(*nd.parents[0], g);
    });
}

// (C, S) -> (S, C) transpose between channel-major maps and row-per-site
// matrices used by the resampler and attention
template <class T>
Var<T> channels_to_rows(const Var<T>& x) {
    if (x.shape().size() < 2) throw Error::contract("channels_to_rows: rank < 2");
    const int64_t C = x.shape()[0];
    const int64_t S = x.value().size() / C;
    Tensor<T> out(Shape{S, C});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t s = 0; s < S; ++s) out[s * C + c] = x.value()[c * S + s];
    return detail::make_op<T>(std::move(out), {x}, [C, S](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(nd.parents[0]->val.shape());
        for (int64_t c = 0; c < C; ++c)
            for (int64_t s = 0; s < S; ++s) g[c * S + s] = nd.grad[s * C + c];
        detail::accum(*nd.parents[0], g);
    });
}

// (S, C) rows -> (C, d, h, w) channel-major volume
template <class T>
Var<T> rows_to_channels(const Var<T>& x, Shape spatial) {
    const int64_t S = x.shape()[0], C = x.shape()[1];
    if (numel(spatial) != S) throw Error::contract("rows_to_channels: spatial mismatch");
    Shape out_shape;
    out_shape.push_back(C);
    for (auto d : spatial) out_shape.push_back(d);
    Tensor<T> out(out_shape);
    for (int64_t s = 0; s < S; ++s)
        for (int64_t c = 0; c < C; ++c) out[c * S + s] = x.value()[s * C + c];
    return detail::make_op<T>(std::move(out), {x}, [C, S](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{S, C});
        for (int64_t s = 0; s < S; ++s)
            for (int64_t c = 0; c < C; ++c) g[s * C + c] = nd.grad[c * S + s];
        detail::accum(*nd.parents[0], g);
    });
}

}  // namespace cvox::ad
