#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "appau/random.hpp"
#include "appau/tensor.hpp"

namespace appau {

// ---------------------------------------------------------------------------
// Reverse-mode graph
// ---------------------------------------------------------------------------

template <typename S>
struct Node;

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<NodePtr<S>> parents;
    std::function<void(Node<S>&)> backward_op;

    Tensor<S>& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor<S>(value.shape(), S(0));
            grad_ready = true;
        }
        return grad;
    }
    void zero_grad() {
        if (grad_ready) grad.fill(S(0));
    }
};

/// Handle to a graph node. Cheap to copy; the graph lives as long as some
/// handle (or child node) refers to it. Leaves created with `leaf` accumulate
/// gradients across backward passes until explicitly zeroed.
template <typename S>
class Var {
public:
    Var() = default;
    explicit Var(NodePtr<S> n) : n_(std::move(n)) {}

    static Var constant(Tensor<S> t) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(t);
        n->requires_grad = false;
        return Var(n);
    }
    static Var leaf(Tensor<S> t) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(t);
        n->requires_grad = true;
        return Var(n);
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor<S>& value() const { return n_->value; }
    Tensor<S>& value() { return n_->value; }
    const Tensor<S>& grad() const { return n_->grad; }
    Tensor<S>& grad() { return n_->ensure_grad(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const Shape& shape() const { return n_->value.shape(); }
    NodePtr<S> node() const { return n_; }

    /// Value of a single-element tensor.
    S scalar() const {
        detail::require(n_->value.size() == 1, "Var::scalar: tensor is not scalar");
        return n_->value[0];
    }

private:
    NodePtr<S> n_;
};

namespace detail {

template <typename S>
NodePtr<S> make_op_node(Tensor<S> value, std::vector<NodePtr<S>> parents,
                        std::function<void(Node<S>&)> backward_op) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_op = std::move(backward_op);
    }
    return n;
}

template <typename S>
void accumulate(Tensor<S>& dst, const Tensor<S>& src) {
    S* d = dst.data();
    const S* s = src.data();
    const std::size_t n = dst.size();
    for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

}  // namespace detail

/// Runs the reverse sweep from a scalar root. Gradients accumulate into every
/// reachable node that requires them (notably parameter leaves).
template <typename S>
void backward(const Var<S>& root) {
    detail::require(root.defined() && root.value().size() == 1, "backward: root must be scalar");
    if (!root.requires_grad()) return;

    // Iterative topological order over the requires_grad subgraph.
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> visited;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<S>* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad().fill(S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* node = *it;
        if (node->backward_op && node->grad_ready) node->backward_op(*node);
    }
}

/// Constant view of a node's value: blocks gradient flow without copying.
template <typename S>
Var<S> detach(const Var<S>& v) {
    return Var<S>::constant(v.value());
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Var<S> unary_op(const Var<S>& x, const char* name, Fwd fwd, Bwd bwd) {
    (void)name;
    Tensor<S> out(x.shape());
    const S* xv = x.value().data();
    S* ov = out.data();
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
    auto xn = x.node();
    return Var<S>(make_op_node<S>(
        std::move(out), {xn}, [xn, bwd](Node<S>& self) {
            if (!xn->requires_grad) return;
            Tensor<S>& gx = xn->ensure_grad();
            const S* g = self.grad.data();
            const S* xv = xn->value.data();
            const S* yv = self.value.data();
            const std::size_t n = self.value.size();
            for (std::size_t i = 0; i < n; ++i) gx[i] += bwd(xv[i], yv[i], g[i]);
        }));
}

}  // namespace detail

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor<S> out(a.shape());
    const S* av = a.value().data();
    const S* bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node(), bn = b.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {an, bn}, [an, bn](Node<S>& self) {
        if (an->requires_grad) detail::accumulate(an->ensure_grad(), self.grad);
        if (bn->requires_grad) detail::accumulate(bn->ensure_grad(), self.grad);
    }));
}

template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor<S> out(a.shape());
    const S* av = a.value().data();
    const S* bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node(), bn = b.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {an, bn}, [an, bn](Node<S>& self) {
        if (an->requires_grad) detail::accumulate(an->ensure_grad(), self.grad);
        if (bn->requires_grad) {
            Tensor<S>& gb = bn->ensure_grad();
            const S* g = self.grad.data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    }));
}

template <typename S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor<S> out(a.shape());
    const S* av = a.value().data();
    const S* bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {an, bn}, [an, bn](Node<S>& self) {
        const S* g = self.grad.data();
        if (an->requires_grad) {
            Tensor<S>& ga = an->ensure_grad();
            const S* bv = bn->value.data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (bn->requires_grad) {
            Tensor<S>& gb = bn->ensure_grad();
            const S* av = an->value.data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    }));
}

/// Elementwise quotient; used mainly on scalar nodes (loss ratios).
template <typename S>
Var<S> operator/(const Var<S>& a, const Var<S>& b) {
    detail::require_same_shape(a.value(), b.value(), "div");
    Tensor<S> out(a.shape());
    const S* av = a.value().data();
    const S* bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    auto an = a.node(), bn = b.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {an, bn}, [an, bn](Node<S>& self) {
        const S* g = self.grad.data();
        const S* av = an->value.data();
        const S* bv = bn->value.data();
        if (an->requires_grad) {
            Tensor<S>& ga = an->ensure_grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bv[i];
        }
        if (bn->requires_grad) {
            Tensor<S>& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
    }));
}

template <typename S>
Var<S> add_scalar(const Var<S>& x, S k) {
    return detail::unary_op(x, "add_scalar", [k](S v) { return v + k; },
                            [](S, S, S g) { return g; });
}

template <typename S>
Var<S> mul_scalar(const Var<S>& x, S k) {
    return detail::unary_op(x, "mul_scalar", [k](S v) { return v * k; },
                            [k](S, S, S g) { return g * k; });
}

template <typename S>
Var<S> neg(const Var<S>& x) {
    return mul_scalar(x, S(-1));
}

template <typename S>
Var<S> log(const Var<S>& x) {
    return detail::unary_op(x, "log", [](S v) { return std::log(v); },
                            [](S xv, S, S g) { return g / xv; });
}

template <typename S>
Var<S> abs(const Var<S>& x) {
    return detail::unary_op(x, "abs", [](S v) { return std::abs(v); },
                            [](S xv, S, S g) -> S {
                                if (xv > S(0)) return g;
                                if (xv < S(0)) return -g;
                                return S(0);
                            });
}

/// Clamp to [lo, hi]; gradient passes only where the input is inside the range.
template <typename S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
    return detail::unary_op(x, "clamp",
                            [lo, hi](S v) { return std::min(hi, std::max(lo, v)); },
                            [lo, hi](S xv, S, S g) -> S { return (xv >= lo && xv <= hi) ? g : S(0); });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
    return detail::unary_op(x, "sigmoid",
                            [](S v) {
                                if (v >= S(0)) {
                                    const S e = std::exp(-v);
                                    return S(1) / (S(1) + e);
                                }
                                const S e = std::exp(v);
                                return e / (S(1) + e);
                            },
                            [](S, S yv, S g) { return g * yv * (S(1) - yv); });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
    return detail::unary_op(x, "relu", [](S v) { return v > S(0) ? v : S(0); },
                            [](S xv, S, S g) { return xv > S(0) ? g : S(0); });
}

template <typename S>
Var<S> leaky_relu(const Var<S>& x, S slope) {
    return detail::unary_op(x, "leaky_relu",
                            [slope](S v) { return v > S(0) ? v : slope * v; },
                            [slope](S xv, S, S g) { return xv > S(0) ? g : slope * g; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(const Var<S>& x) {
    S total = S(0);
    const S* xv = x.value().data();
    for (std::size_t i = 0; i < x.value().size(); ++i) total += xv[i];
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(Tensor<S>::scalar(total), {xn}, [xn](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        const S g = self.grad[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    }));
}

template <typename S>
Var<S> mean_all(const Var<S>& x) {
    return mul_scalar(sum_all(x), S(1) / static_cast<S>(x.value().size()));
}

/// Samples [start, start+count) along the batch axis.
template <typename S>
Var<S> slice_batch(const Var<S>& x, int start, int count) {
    const Shape s = x.shape();
    detail::require(start >= 0 && count >= 1 && start + count <= s.n, "slice_batch: range out of bounds");
    const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
    Tensor<S> out(Shape(count, s.c, s.h, s.w));
    std::copy_n(x.value().data() + start * per, count * per, out.data());
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {xn}, [xn, start, per](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        const S* g = self.grad.data();
        S* dst = gx.data() + start * per;
        for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += g[i];
    }));
}

template <typename S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
    const Shape sa = a.shape(), sb = b.shape();
    detail::require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
                    "concat_channels: non-channel dims differ");
    Tensor<S> out(Shape(sa.n, sa.c + sb.c, sa.h, sa.w));
    const std::size_t plane = static_cast<std::size_t>(sa.h) * sa.w;
    const std::size_t a_block = sa.c * plane, b_block = sb.c * plane;
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(a.value().data() + n * a_block, a_block, out.data() + n * (a_block + b_block));
        std::copy_n(b.value().data() + n * b_block, b_block,
                    out.data() + n * (a_block + b_block) + a_block);
    }
    auto an = a.node(), bn = b.node();
    return Var<S>(detail::make_op_node<S>(
        std::move(out), {an, bn}, [an, bn, a_block, b_block, n_batch = sa.n](Node<S>& self) {
            const S* g = self.grad.data();
            for (int n = 0; n < n_batch; ++n) {
                const S* gn = g + n * (a_block + b_block);
                if (an->requires_grad) {
                    S* ga = an->ensure_grad().data() + n * a_block;
                    for (std::size_t i = 0; i < a_block; ++i) ga[i] += gn[i];
                }
                if (bn->requires_grad) {
                    S* gb = bn->ensure_grad().data() + n * b_block;
                    for (std::size_t i = 0; i < b_block; ++i) gb[i] += gn[a_block + i];
                }
            }
        }));
}

/// x (N,C,H,W) scaled per pixel by a single-channel map (N,1,H,W).
template <typename S>
Var<S> scale_by_map(const Var<S>& x, const Var<S>& m) {
    const Shape sx = x.shape(), sm = m.shape();
    detail::require(sm.c == 1 && sm.n == sx.n && sm.h == sx.h && sm.w == sx.w,
                    "scale_by_map: map must be (N,1,H,W) matching x");
    Tensor<S> out(sx);
    const std::size_t plane = static_cast<std::size_t>(sx.h) * sx.w;
    for (int n = 0; n < sx.n; ++n) {
        const S* mp = m.value().data() + n * plane;
        for (int c = 0; c < sx.c; ++c) {
            const S* xp = x.value().data() + (n * sx.c + c) * plane;
            S* op = out.data() + (n * sx.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) op[i] = xp[i] * mp[i];
        }
    }
    auto xn = x.node(), mn = m.node();
    return Var<S>(detail::make_op_node<S>(
        std::move(out), {xn, mn}, [xn, mn, sx, plane](Node<S>& self) {
            const S* g = self.grad.data();
            for (int n = 0; n < sx.n; ++n) {
                const S* mp = mn->value.data() + n * plane;
                for (int c = 0; c < sx.c; ++c) {
                    const std::size_t off = (n * sx.c + c) * plane;
                    if (xn->requires_grad) {
                        S* gx = xn->ensure_grad().data() + off;
                        for (std::size_t i = 0; i < plane; ++i) gx[i] += g[off + i] * mp[i];
                    }
                    if (mn->requires_grad) {
                        S* gm = mn->ensure_grad().data() + n * plane;
                        const S* xp = xn->value.data() + off;
                        for (std::size_t i = 0; i < plane; ++i) gm[i] += g[off + i] * xp[i];
                    }
                }
            }
        }));
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MapRow = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapRow = Eigen::Map<const RowMat<S>>;

struct ConvDims {
    int cin, h, w, cout, kh, kw, stride, pad, oh, ow;
    std::size_t k() const { return static_cast<std::size_t>(cin) * kh * kw; }
    std::size_t opix() const { return static_cast<std::size_t>(oh) * ow; }
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad) {
    require(w.c == x.c, "conv2d: input channels " + std::to_string(x.c) +
                            " do not match kernel " + std::to_string(w.c));
    ConvDims d;
    d.cin = x.c;
    d.h = x.h;
    d.w = x.w;
    d.cout = w.n;
    d.kh = w.h;
    d.kw = w.w;
    d.stride = stride;
    d.pad = pad;
    d.oh = (x.h + 2 * pad - w.h) / stride + 1;
    d.ow = (x.w + 2 * pad - w.w) / stride + 1;
    require(d.oh > 0 && d.ow > 0, "conv2d: kernel larger than padded input");
    return d;
}

/// Expands one image into a (Cin*kh*kw) x (oh*ow) patch matrix, zero padded.
template <typename S>
void im2col(const S* x, const ConvDims& d, S* col) {
    const std::size_t opix = d.opix();
    std::fill(col, col + d.k() * opix, S(0));
    for (int ci = 0; ci < d.cin; ++ci) {
        const S* xc = x + static_cast<std::size_t>(ci) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                S* row = col + ((static_cast<std::size_t>(ci) * d.kh + ki) * d.kw + kj) * opix;
                for (int oh = 0; oh < d.oh; ++oh) {
                    const int ih = oh * d.stride + ki - d.pad;
                    if (ih < 0 || ih >= d.h) continue;
                    const S* xrow = xc + static_cast<std::size_t>(ih) * d.w;
                    S* orow = row + static_cast<std::size_t>(oh) * d.ow;
                    for (int ow = 0; ow < d.ow; ++ow) {
                        const int iw = ow * d.stride + kj - d.pad;
                        if (iw >= 0 && iw < d.w) orow[ow] = xrow[iw];
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch matrix back into image layout (adjoint of im2col).
template <typename S>
void col2im(const S* col, const ConvDims& d, S* x) {
    const std::size_t opix = d.opix();
    for (int ci = 0; ci < d.cin; ++ci) {
        S* xc = x + static_cast<std::size_t>(ci) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const S* row = col + ((static_cast<std::size_t>(ci) * d.kh + ki) * d.kw + kj) * opix;
                for (int oh = 0; oh < d.oh; ++oh) {
                    const int ih = oh * d.stride + ki - d.pad;
                    if (ih < 0 || ih >= d.h) continue;
                    S* xrow = xc + static_cast<std::size_t>(ih) * d.w;
                    const S* orow = row + static_cast<std::size_t>(oh) * d.ow;
                    for (int ow = 0; ow < d.ow; ++ow) {
                        const int iw = ow * d.stride + kj - d.pad;
                        if (iw >= 0 && iw < d.w) xrow[iw] += orow[ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D convolution, NCHW, kernel (Cout,Cin,kh,kw), optional bias (1,Cout,1,1).
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
    const detail::ConvDims d = detail::conv_dims(x.shape(), w.shape(), stride, pad);
    const int batch = x.shape().n;
    const std::size_t k = d.k(), opix = d.opix();
    const bool has_bias = b.defined();
    if (has_bias) {
        detail::require(b.shape() == Shape(1, d.cout, 1, 1), "conv2d: bias must be (1,Cout,1,1)");
    }

    Tensor<S> out(Shape(batch, d.cout, d.oh, d.ow));
    std::vector<S> col(k * opix);
    detail::CMapRow<S> wmat(w.value().data(), d.cout, k);
    for (int n = 0; n < batch; ++n) {
        detail::im2col(x.value().data() + n * d.cin * static_cast<std::size_t>(d.h) * d.w, d, col.data());
        detail::MapRow<S> on(out.data() + n * d.cout * opix, d.cout, opix);
        detail::CMapRow<S> cm(col.data(), k, opix);
        on.noalias() = wmat * cm;
        if (has_bias) {
            for (int co = 0; co < d.cout; ++co) on.row(co).array() += b.value()[co];
        }
    }

    std::vector<NodePtr<S>> parents{x.node(), w.node()};
    if (has_bias) parents.push_back(b.node());
    auto xn = x.node(), wn = w.node();
    auto bn = has_bias ? b.node() : nullptr;
    return Var<S>(detail::make_op_node<S>(
        std::move(out), std::move(parents), [xn, wn, bn, d, batch, k, opix](Node<S>& self) {
            std::vector<S> col(k * opix);
            std::vector<S> colg;
            detail::CMapRow<S> wmat(wn->value.data(), d.cout, k);
            const std::size_t in_block = static_cast<std::size_t>(d.cin) * d.h * d.w;
            for (int n = 0; n < batch; ++n) {
                detail::CMapRow<S> gn(self.grad.data() + n * d.cout * opix, d.cout, opix);
                if (bn && bn->requires_grad) {
                    Tensor<S>& gb = bn->ensure_grad();
                    for (int co = 0; co < d.cout; ++co) gb[co] += gn.row(co).sum();
                }
                if (wn->requires_grad || xn->requires_grad) {
                    detail::im2col(xn->value.data() + n * in_block, d, col.data());
                }
                if (wn->requires_grad) {
                    detail::MapRow<S> gw(wn->ensure_grad().data(), d.cout, k);
                    detail::CMapRow<S> cm(col.data(), k, opix);
                    gw.noalias() += gn * cm.transpose();
                }
                if (xn->requires_grad) {
                    colg.resize(k * opix);
                    detail::MapRow<S> cg(colg.data(), k, opix);
                    cg.noalias() = wmat.transpose() * gn;
                    detail::col2im(colg.data(), d, xn->ensure_grad().data() + n * in_block);
                }
            }
        }));
}

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, int stride, int pad) {
    return conv2d(x, w, Var<S>(), stride, pad);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Which statistics batch normalization uses, and whether the running
/// averages are updated. Batch/BatchUpdate backprop through the statistics.
enum class BnStats { BatchUpdate, Batch, Running };

template <typename S>
Var<S> batch_norm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                    Tensor<S>& running_mean, Tensor<S>& running_var, BnStats stats,
                    S momentum = S(0.1), S eps = S(1e-5)) {
    const Shape s = x.shape();
    detail::require(gamma.shape() == Shape(1, s.c, 1, 1) && beta.shape() == Shape(1, s.c, 1, 1),
                    "batch_norm2d: gamma/beta must be (1,C,1,1)");
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t m = static_cast<std::size_t>(s.n) * plane;

    std::vector<S> mean(s.c), invstd(s.c);
    if (stats == BnStats::Running) {
        for (int c = 0; c < s.c; ++c) {
            mean[c] = running_mean[c];
            invstd[c] = S(1) / std::sqrt(running_var[c] + eps);
        }
    } else {
        for (int c = 0; c < s.c; ++c) {
            S sum = S(0);
            for (int n = 0; n < s.n; ++n) {
                const S* xp = x.value().data() + (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += xp[i];
            }
            const S mu = sum / static_cast<S>(m);
            S sq = S(0);
            for (int n = 0; n < s.n; ++n) {
                const S* xp = x.value().data() + (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const S dv = xp[i] - mu;
                    sq += dv * dv;
                }
            }
            const S var = sq / static_cast<S>(m);
            mean[c] = mu;
            invstd[c] = S(1) / std::sqrt(var + eps);
            if (stats == BnStats::BatchUpdate) {
                running_mean[c] = (S(1) - momentum) * running_mean[c] + momentum * mu;
                running_var[c] = (S(1) - momentum) * running_var[c] + momentum * var;
            }
        }
    }

    // xhat kept for the backward pass.
    auto xhat = std::make_shared<Tensor<S>>(s);
    Tensor<S> out(s);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const std::size_t off = (n * s.c + c) * plane;
            const S* xp = x.value().data() + off;
            S* hp = xhat->data() + off;
            S* op = out.data() + off;
            const S mu = mean[c], is = invstd[c];
            const S g = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t i = 0; i < plane; ++i) {
                hp[i] = (xp[i] - mu) * is;
                op[i] = g * hp[i] + bt;
            }
        }
    }

    auto xn = x.node(), gn = gamma.node(), btn = beta.node();
    const bool through_stats = stats != BnStats::Running;
    return Var<S>(detail::make_op_node<S>(
        std::move(out), {xn, gn, btn},
        [xn, gn, btn, xhat, invstd, s, plane, m, through_stats](Node<S>& self) {
            const S* g = self.grad.data();
            for (int c = 0; c < s.c; ++c) {
                S sum_g = S(0), sum_gx = S(0);
                for (int n = 0; n < s.n; ++n) {
                    const std::size_t off = (n * s.c + c) * plane;
                    const S* gp = g + off;
                    const S* hp = xhat->data() + off;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * hp[i];
                    }
                }
                if (gn->requires_grad) gn->ensure_grad()[c] += sum_gx;
                if (btn->requires_grad) btn->ensure_grad()[c] += sum_g;
                if (xn->requires_grad) {
                    Tensor<S>& gx = xn->ensure_grad();
                    const S gamma_is = gn->value[c] * invstd[c];
                    const S mg = sum_g / static_cast<S>(m);
                    const S mgx = sum_gx / static_cast<S>(m);
                    for (int n = 0; n < s.n; ++n) {
                        const std::size_t off = (n * s.c + c) * plane;
                        const S* gp = g + off;
                        const S* hp = xhat->data() + off;
                        S* dst = gx.data() + off;
                        if (through_stats) {
                            for (std::size_t i = 0; i < plane; ++i) {
                                dst[i] += gamma_is * (gp[i] - mg - hp[i] * mgx);
                            }
                        } else {
                            for (std::size_t i = 0; i < plane; ++i) dst[i] += gamma_is * gp[i];
                        }
                    }
                }
            }
        }));
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

template <typename S>
Var<S> max_pool2(const Var<S>& x) {
    const Shape s = x.shape();
    detail::require(s.h % 2 == 0 && s.w % 2 == 0, "max_pool2: odd spatial size");
    const int oh = s.h / 2, ow = s.w / 2;
    Tensor<S> out(Shape(s.n, s.c, oh, ow));
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    const S* xv = x.value().data();
    std::size_t oi = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j, ++oi) {
                    std::size_t best = base + (2 * i) * static_cast<std::size_t>(s.w) + 2 * j;
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj) {
                            const std::size_t idx =
                                base + (2 * i + di) * static_cast<std::size_t>(s.w) + (2 * j + dj);
                            if (xv[idx] > xv[best]) best = idx;
                        }
                    out[oi] = xv[best];
                    (*argmax)[oi] = static_cast<std::uint32_t>(best);
                }
        }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {xn}, [xn, argmax](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        const S* g = self.grad.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*argmax)[i]] += g[i];
    }));
}

/// Average pooling with kernel == stride == k (used for pyramid downsampling).
template <typename S>
Var<S> avg_pool(const Var<S>& x, int k) {
    const Shape s = x.shape();
    detail::require(k >= 1 && s.h % k == 0 && s.w % k == 0, "avg_pool: size not divisible by kernel");
    const int oh = s.h / k, ow = s.w / k;
    const S inv = S(1) / static_cast<S>(k * k);
    Tensor<S> out(Shape(s.n, s.c, oh, ow));
    const S* xv = x.value().data();
    std::size_t oi = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j, ++oi) {
                    S acc = S(0);
                    for (int di = 0; di < k; ++di) {
                        const S* row = xv + base + (i * k + di) * static_cast<std::size_t>(s.w) + j * k;
                        for (int dj = 0; dj < k; ++dj) acc += row[dj];
                    }
                    out[oi] = acc * inv;
                }
        }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {xn}, [xn, s, k, oh, ow, inv](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        const S* g = self.grad.data();
        std::size_t oi = 0;
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
                for (int i = 0; i < oh; ++i)
                    for (int j = 0; j < ow; ++j, ++oi) {
                        const S gv = g[oi] * inv;
                        for (int di = 0; di < k; ++di) {
                            S* row = gx.data() + base + (i * k + di) * static_cast<std::size_t>(s.w) + j * k;
                            for (int dj = 0; dj < k; ++dj) row[dj] += gv;
                        }
                    }
            }
    }));
}

template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
    const Shape s = x.shape();
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const S inv = S(1) / static_cast<S>(plane);
    Tensor<S> out(Shape(s.n, s.c, 1, 1));
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const S* xp = x.value().data() + (n * s.c + c) * plane;
            S acc = S(0);
            for (std::size_t i = 0; i < plane; ++i) acc += xp[i];
            out.at(n, c, 0, 0) = acc * inv;
        }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {xn}, [xn, s, plane, inv](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const S gv = self.grad.at(n, c, 0, 0) * inv;
                S* xp = gx.data() + (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) xp[i] += gv;
            }
    }));
}

namespace detail {

/// Half-pixel source coordinates for x2 bilinear upsampling.
struct Lerp2 {
    std::vector<int> i0, i1;
    std::vector<float> w1;  // weight of i1; i0 gets (1 - w1)
};

inline Lerp2 lerp2_table(int out_size, int in_size) {
    Lerp2 t;
    t.i0.resize(out_size);
    t.i1.resize(out_size);
    t.w1.resize(out_size);
    for (int o = 0; o < out_size; ++o) {
        const double src = (o + 0.5) / 2.0 - 0.5;
        double f = std::floor(src);
        int i0 = static_cast<int>(f);
        double w = src - f;
        if (i0 < 0) {
            i0 = 0;
            w = 0.0;
        }
        if (i0 >= in_size - 1) {
            i0 = in_size - 1;
            w = 0.0;
        }
        t.i0[o] = i0;
        t.i1[o] = std::min(i0 + 1, in_size - 1);
        t.w1[o] = static_cast<float>(w);
    }
    return t;
}

}  // namespace detail

/// Doubles spatial resolution with bilinear interpolation (half-pixel centers).
template <typename S>
Var<S> upsample_bilinear2(const Var<S>& x) {
    const Shape s = x.shape();
    const int oh = s.h * 2, ow = s.w * 2;
    const detail::Lerp2 th = detail::lerp2_table(oh, s.h);
    const detail::Lerp2 tw = detail::lerp2_table(ow, s.w);
    Tensor<S> out(Shape(s.n, s.c, oh, ow));
    const S* xv = x.value().data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t ib = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
            const std::size_t ob = (static_cast<std::size_t>(n) * s.c + c) * oh * ow;
            for (int i = 0; i < oh; ++i) {
                const S wi1 = static_cast<S>(th.w1[i]);
                const S wi0 = S(1) - wi1;
                const S* r0 = xv + ib + th.i0[i] * static_cast<std::size_t>(s.w);
                const S* r1 = xv + ib + th.i1[i] * static_cast<std::size_t>(s.w);
                S* orow = out.data() + ob + i * static_cast<std::size_t>(ow);
                for (int j = 0; j < ow; ++j) {
                    const S wj1 = static_cast<S>(tw.w1[j]);
                    const S wj0 = S(1) - wj1;
                    orow[j] = wi0 * (wj0 * r0[tw.i0[j]] + wj1 * r0[tw.i1[j]]) +
                              wi1 * (wj0 * r1[tw.i0[j]] + wj1 * r1[tw.i1[j]]);
                }
            }
        }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(
        std::move(out), {xn}, [xn, s, oh, ow, th, tw](Node<S>& self) {
            if (!xn->requires_grad) return;
            Tensor<S>& gx = xn->ensure_grad();
            const S* g = self.grad.data();
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const std::size_t ib = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
                    const std::size_t ob = (static_cast<std::size_t>(n) * s.c + c) * oh * ow;
                    for (int i = 0; i < oh; ++i) {
                        const S wi1 = static_cast<S>(th.w1[i]);
                        const S wi0 = S(1) - wi1;
                        S* r0 = gx.data() + ib + th.i0[i] * static_cast<std::size_t>(s.w);
                        S* r1 = gx.data() + ib + th.i1[i] * static_cast<std::size_t>(s.w);
                        const S* grow = g + ob + i * static_cast<std::size_t>(ow);
                        for (int j = 0; j < ow; ++j) {
                            const S wj1 = static_cast<S>(tw.w1[j]);
                            const S wj0 = S(1) - wj1;
                            const S gv = grow[j];
                            r0[tw.i0[j]] += wi0 * wj0 * gv;
                            r0[tw.i1[j]] += wi0 * wj1 * gv;
                            r1[tw.i0[j]] += wi1 * wj0 * gv;
                            r1[tw.i1[j]] += wi1 * wj1 * gv;
                        }
                    }
                }
        }));
}

// ---------------------------------------------------------------------------
// Dropout, softmax, gathers
// ---------------------------------------------------------------------------

/// Inverted dropout. With active == false this is the identity.
template <typename S>
Var<S> dropout(const Var<S>& x, double rate, RngStream& rng, bool active) {
    detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
    if (!active || rate == 0.0) return x;
    auto mask = std::make_shared<Tensor<S>>(x.shape());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    Tensor<S> out(x.shape());
    const S* xv = x.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const S m = rng.uniform() < rate ? S(0) : keep_scale;
        (*mask)[i] = m;
        out[i] = xv[i] * m;
    }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {xn}, [xn, mask](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        const S* g = self.grad.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*mask)[i];
    }));
}

/// Softmax over the channel axis at every (n, h, w) position, with
/// max-subtraction for numerical stability.
template <typename S>
Var<S> softmax_channels(const Var<S>& x) {
    const Shape s = x.shape();
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    Tensor<S> out(s);
    const S* xv = x.value().data();
    for (int n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
            S mx = xv[base];
            for (int c = 1; c < s.c; ++c) mx = std::max(mx, xv[base + c * plane]);
            S denom = S(0);
            for (int c = 0; c < s.c; ++c) {
                const S e = std::exp(xv[base + c * plane] - mx);
                out[base + c * plane] = e;
                denom += e;
            }
            for (int c = 0; c < s.c; ++c) out[base + c * plane] /= denom;
        }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(std::move(out), {xn}, [xn, s, plane](Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S>& gx = xn->ensure_grad();
        const S* g = self.grad.data();
        const S* p = self.value.data();
        for (int n = 0; n < s.n; ++n)
            for (std::size_t pos = 0; pos < plane; ++pos) {
                const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + pos;
                S dot = S(0);
                for (int c = 0; c < s.c; ++c) dot += g[base + c * plane] * p[base + c * plane];
                for (int c = 0; c < s.c; ++c) {
                    const std::size_t i = base + c * plane;
                    gx[i] += p[i] * (g[i] - dot);
                }
            }
    }));
}

/// Picks one channel per sample: out(n,0,h,w) = x(n, idx[n], h, w).
template <typename S>
Var<S> gather_channel(const Var<S>& x, std::vector<int> idx) {
    const Shape s = x.shape();
    detail::require(static_cast<int>(idx.size()) == s.n, "gather_channel: one index per sample");
    for (int i : idx) detail::require(i >= 0 && i < s.c, "gather_channel: index out of range");
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    Tensor<S> out(Shape(s.n, 1, s.h, s.w));
    for (int n = 0; n < s.n; ++n) {
        std::copy_n(x.value().data() + (n * s.c + idx[n]) * plane, plane, out.data() + n * plane);
    }
    auto xn = x.node();
    return Var<S>(detail::make_op_node<S>(
        std::move(out), {xn}, [xn, s, plane, idx = std::move(idx)](Node<S>& self) {
            if (!xn->requires_grad) return;
            Tensor<S>& gx = xn->ensure_grad();
            const S* g = self.grad.data();
            for (int n = 0; n < s.n; ++n) {
                S* dst = gx.data() + (n * s.c + idx[n]) * plane;
                for (std::size_t i = 0; i < plane; ++i) dst[i] += g[n * plane + i];
            }
        }));
}

}  // namespace appau
