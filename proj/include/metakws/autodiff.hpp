#pragma once

// Reverse-mode automatic differentiation with differentiable backward rules.
//
// Every backward rule is written in terms of the same differentiable ops as
// the forward pass. Running grad() with create_graph=true therefore records
// the backward computation as a new graph, and differentiating a function of
// those gradients yields exact second-order terms (double backward).

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metakws/kernels.hpp"
#include "metakws/tensor.hpp"

namespace metakws::ad {

template <class T>
class Var;

template <class T>
using BackwardFn = std::function<std::vector<Var<T>>(const Var<T>& grad_out, const std::vector<bool>& needs)>;

template <class T>
struct Node {
    Tensor<T> value;
    std::vector<Var<T>> parents;
    BackwardFn<T> backward;
    bool requires_grad = false;
    const char* op = "const";
};

/// Thread-local switch for graph recording. Off inside no-grad regions and
/// inside grad(..., create_graph=false).
class GradMode {
  public:
    static bool enabled() noexcept { return flag(); }

  private:
    friend class GradModeGuard;
    static bool& flag() noexcept {
        thread_local bool on = true;
        return on;
    }
};

class GradModeGuard {
  public:
    explicit GradModeGuard(bool enabled) : previous_(GradMode::flag()) { GradMode::flag() = enabled; }
    ~GradModeGuard() { GradMode::flag() = previous_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

  private:
    bool previous_;
};

struct NoGradGuard : GradModeGuard {
    NoGradGuard() : GradModeGuard(false) {}
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
  public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->op = "leaf";
    }

    static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }
    static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    Node<T>* node() const noexcept { return node_.get(); }
    explicit operator bool() const noexcept { return static_cast<bool>(node_); }

    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

  private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, BackwardFn<T> backward, const char* op) {
    bool track = false;
    if (GradMode::enabled())
        for (const auto& p : parents) track = track || p.requires_grad();
    if (!track) return Var<T>::constant(std::move(value));
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    n->requires_grad = true;
    n->op = op;
    return Var<T>::from_node(std::move(n));
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
    auto out = Tensor<T>::uninitialized(a.shape());
    const auto src = a.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
    return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* op) {
    require_same_shape(a.shape(), b.shape(), op);
    auto out = Tensor<T>::uninitialized(a.shape());
    const auto x = a.data(), y = b.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
    return out;
}

}  // namespace detail

// ----------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, T c);
template <class T>
Var<T> sum(const Var<T>& a);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    auto v = detail::zip(a.value(), b.value(), [](T x, T y) { return x + y; }, "add");
    return detail::make_result<T>(std::move(v), {a, b},
                                  [](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{g, g}; },
                                  "add");
}

template <class T>
Var<T> neg(const Var<T>& a) {
    return detail::make_result<T>(
        detail::map(a.value(), [](T x) { return -x; }), {a},
        [](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{neg(g)}; }, "neg");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    auto v = detail::zip(a.value(), b.value(), [](T x, T y) { return x - y; }, "sub");
    return detail::make_result<T>(
        std::move(v), {a, b},
        [](const Var<T>& g, const std::vector<bool>& needs) {
            return std::vector<Var<T>>{g, needs[1] ? neg(g) : Var<T>{}};
        },
        "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    auto v = detail::zip(a.value(), b.value(), [](T x, T y) { return x * y; }, "mul");
    return detail::make_result<T>(
        std::move(v), {a, b},
        [a, b](const Var<T>& g, const std::vector<bool>& needs) {
            return std::vector<Var<T>>{needs[0] ? mul(g, b) : Var<T>{}, needs[1] ? mul(g, a) : Var<T>{}};
        },
        "mul");
}

/// Elementwise product with a constant tensor (masks, one-hot targets).
template <class T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& m) {
    auto v = detail::zip(a.value(), m, [](T x, T y) { return x * y; }, "mul_const");
    return detail::make_result<T>(
        std::move(v), {a},
        [m](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{mul_const(g, m)}; },
        "mul_const");
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    return detail::make_result<T>(
        detail::map(a.value(), [c](T x) { return x * c; }), {a},
        [c](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{scale(g, c)}; }, "scale");
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
    return detail::make_result<T>(
        detail::map(a.value(), [c](T x) { return x + c; }), {a},
        [](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{g}; }, "add_scalar");
}

template <class T>
Var<T> exp(const Var<T>& a) {
    return detail::make_result<T>(
        detail::map(a.value(), [](T x) { return std::exp(x); }), {a},
        [a](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{mul(g, exp(a))}; }, "exp");
}

template <class T>
Var<T> pow_scalar(const Var<T>& a, T p) {
    return detail::make_result<T>(
        detail::map(a.value(), [p](T x) { return std::pow(x, p); }), {a},
        [a, p](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{mul(g, scale(pow_scalar(a, p - T(1)), p))};
        },
        "pow");
}

template <class T>
Var<T> log(const Var<T>& a) {
    return detail::make_result<T>(
        detail::map(a.value(), [](T x) { return std::log(x); }), {a},
        [a](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{mul(g, pow_scalar(a, T(-1)))}; },
        "log");
}

/// Second derivative is zero almost everywhere, so the mask is a constant.
template <class T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> mask = detail::map(a.value(), [](T x) { return x > T(0) ? T(1) : T(0); });
    auto v = detail::map(a.value(), [](T x) { return x > T(0) ? x : T(0); });
    return detail::make_result<T>(
        std::move(v), {a},
        [mask = std::move(mask)](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{mul_const(g, mask)};
        },
        "relu");
}

template <class T>
Var<T> stop_gradient(const Var<T>& a) {
    return Var<T>::constant(a.value());
}

// ----------------------------------------------------------------- reductions

template <class T>
Var<T> broadcast_scalar(const Var<T>& s, const Shape& shape) {
    if (s.value().size() != 1) throw DimensionError("broadcast_scalar: expected scalar, got " + shape_str(s.shape()));
    return detail::make_result<T>(
        Tensor<T>(shape, s.value()[0]), {s},
        [](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{sum(g)}; }, "broadcast_scalar");
}

template <class T>
Var<T> sum(const Var<T>& a) {
    T acc = T(0);
    for (T x : a.value().data()) acc += x;
    const Shape in_shape = a.shape();
    return detail::make_result<T>(
        Tensor<T>::scalar(acc), {a},
        [in_shape](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{broadcast_scalar(g, in_shape)};
        },
        "sum");
}

template <class T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> expand_mid(const Var<T>& v, std::size_t outer, std::size_t inner, const Shape& out_shape);

/// View x as [outer, mid, inner] and sum over outer and inner, giving [mid].
template <class T>
Var<T> sum_mid(const Var<T>& x, std::size_t outer, std::size_t mid, std::size_t inner) {
    if (outer * mid * inner != x.value().size())
        throw DimensionError("sum_mid: " + shape_str(x.shape()) + " is not " +
                             shape_str({outer, mid, inner}) + " in size");
    Tensor<T> out({mid});
    const auto src = x.value().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            const T* p = src.data() + (o * mid + m) * inner;
            T acc = T(0);
            for (std::size_t i = 0; i < inner; ++i) acc += p[i];
            out[m] += acc;
        }
    const Shape in_shape = x.shape();
    return detail::make_result<T>(
        std::move(out), {x},
        [outer, inner, in_shape](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{expand_mid(g, outer, inner, in_shape)};
        },
        "sum_mid");
}

/// Broadcast a [mid] vector to out_shape viewed as [outer, mid, inner].
template <class T>
Var<T> expand_mid(const Var<T>& v, std::size_t outer, std::size_t inner, const Shape& out_shape) {
    const std::size_t mid = v.value().size();
    if (v.value().rank() != 1 || outer * mid * inner != shape_size(out_shape))
        throw DimensionError("expand_mid: cannot broadcast " + shape_str(v.shape()) + " to " + shape_str(out_shape));
    auto out = Tensor<T>::uninitialized(out_shape);
    auto dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            T* p = dst.data() + (o * mid + m) * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] = v.value()[m];
        }
    return detail::make_result<T>(
        std::move(out), {v},
        [outer, mid, inner](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{sum_mid(g, outer, mid, inner)};
        },
        "expand_mid");
}

// ----------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    const Shape in_shape = a.shape();
    return detail::make_result<T>(
        a.value().reshaped(std::move(shape)), {a},
        [in_shape](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{reshape(g, in_shape)}; },
        "reshape");
}

/// Collapse all but the leading dimension.
template <class T>
Var<T> flatten(const Var<T>& a) {
    if (a.value().rank() < 1) throw DimensionError("flatten: scalar input");
    const std::size_t n = a.shape()[0];
    return reshape(a, {n, a.value().size() / n});
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    return detail::make_result<T>(
        kernels::transpose2d(a.value()), {a},
        [](const Var<T>& g, const std::vector<bool>&) { return std::vector<Var<T>>{transpose(g)}; }, "transpose");
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    return detail::make_result<T>(
        kernels::matmul(a.value(), b.value()), {a, b},
        [a, b](const Var<T>& g, const std::vector<bool>& needs) {
            return std::vector<Var<T>>{needs[0] ? matmul(g, transpose(b)) : Var<T>{},
                                       needs[1] ? matmul(transpose(a), g) : Var<T>{}};
        },
        "matmul");
}

// ----------------------------------------------------------------- convolution
//
// The three convolution maps are mutually adjoint, so their derivatives close
// over the same set:  d conv(x,w) -> (input_grad(g,w), weight_grad(x,g)),
// d input_grad(g,w) -> (conv(G,w), weight_grad(G,g)),
// d weight_grad(x,g) -> (input_grad(g,G), conv(x,G)).

using kernels::ConvGeometry;

template <class T>
Var<T> conv2d_input_grad(const Var<T>& gy, const Var<T>& w, const ConvGeometry& geom);
template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, const ConvGeometry& geom);

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const ConvGeometry& geom) {
    return detail::make_result<T>(
        kernels::conv2d_forward(x.value(), w.value(), geom), {x, w},
        [x, w, geom](const Var<T>& g, const std::vector<bool>& needs) {
            return std::vector<Var<T>>{needs[0] ? conv2d_input_grad(g, w, geom) : Var<T>{},
                                       needs[1] ? conv2d_weight_grad(x, g, geom) : Var<T>{}};
        },
        "conv2d");
}

template <class T>
Var<T> conv2d_input_grad(const Var<T>& gy, const Var<T>& w, const ConvGeometry& geom) {
    return detail::make_result<T>(
        kernels::conv2d_input_grad(gy.value(), w.value(), geom), {gy, w},
        [gy, w, geom](const Var<T>& g, const std::vector<bool>& needs) {
            return std::vector<Var<T>>{needs[0] ? conv2d(g, w, geom) : Var<T>{},
                                       needs[1] ? conv2d_weight_grad(g, gy, geom) : Var<T>{}};
        },
        "conv2d_input_grad");
}

template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, const ConvGeometry& geom) {
    return detail::make_result<T>(
        kernels::conv2d_weight_grad(x.value(), gy.value(), geom), {x, gy},
        [x, gy, geom](const Var<T>& g, const std::vector<bool>& needs) {
            return std::vector<Var<T>>{needs[0] ? conv2d_input_grad(gy, g, geom) : Var<T>{},
                                       needs[1] ? conv2d(x, g, geom) : Var<T>{}};
        },
        "conv2d_weight_grad");
}

// ----------------------------------------------------------------- gather / pooling

template <class T>
Var<T> scatter_add(const Var<T>& src, std::shared_ptr<const std::vector<std::size_t>> idx, const Shape& out_shape);

/// out[i] = x[idx[i]].
template <class T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<std::size_t>> idx, const Shape& out_shape) {
    if (idx->size() != shape_size(out_shape))
        throw DimensionError("gather: index count does not match " + shape_str(out_shape));
    auto out = Tensor<T>::uninitialized(out_shape);
    for (std::size_t i = 0; i < idx->size(); ++i) out[i] = x.value()[(*idx)[i]];
    const Shape in_shape = x.shape();
    return detail::make_result<T>(
        std::move(out), {x},
        [idx, in_shape](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{scatter_add(g, idx, in_shape)};
        },
        "gather");
}

/// out[idx[i]] += src[i]; adjoint of gather.
template <class T>
Var<T> scatter_add(const Var<T>& src, std::shared_ptr<const std::vector<std::size_t>> idx, const Shape& out_shape) {
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < idx->size(); ++i) out[(*idx)[i]] += src.value()[i];
    const Shape src_shape = src.shape();
    return detail::make_result<T>(
        std::move(out), {src},
        [idx, src_shape](const Var<T>& g, const std::vector<bool>&) {
            return std::vector<Var<T>>{gather(g, idx, src_shape)};
        },
        "scatter_add");
}

template <class T>
Var<T> max_pool2d(const Var<T>& x, std::size_t window) {
    Shape out_shape;
    auto idx = std::make_shared<const std::vector<std::size_t>>(kernels::max_pool_indices(x.value(), window, out_shape));
    return gather(x, std::move(idx), out_shape);
}

// ----------------------------------------------------------------- layers

/// x [B, F] times weight [O, F] transposed, plus bias [O].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    auto y = matmul(x, transpose(weight));
    return add(y, expand_mid(bias, y.shape()[0], std::size_t{1}, y.shape()));
}

/// Per-channel bias for an NCHW tensor.
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw DimensionError("add_channel_bias: expected NCHW, got " + shape_str(s));
    return add(x, expand_mid(bias, s[0], s[2] * s[3], s));
}

/// Batch normalization over (N, H, W) per channel using the statistics of the
/// batch itself. Composed from differentiable primitives so that its
/// gradient is differentiable as well.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw DimensionError("batch_norm: expected NCHW, got " + shape_str(s));
    const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
    if (gamma.value().size() != c || beta.value().size() != c)
        throw DimensionError("batch_norm: parameter shape " + shape_str(gamma.shape()) + " vs input " + shape_str(s));
    const T inv_count = T(1) / static_cast<T>(n * hw);
    auto mu = scale(sum_mid(x, n, c, hw), inv_count);
    auto centered = sub(x, expand_mid(mu, n, hw, s));
    auto var = scale(sum_mid(mul(centered, centered), n, c, hw), inv_count);
    auto inv_std = pow_scalar(add_scalar(var, eps), T(-0.5));
    auto y = mul(centered, expand_mid(mul(inv_std, gamma), n, hw, s));
    return add(y, expand_mid(beta, n, hw, s));
}

/// Row-wise log-softmax of [B, C] logits, max-shifted for stability.
template <class T>
Var<T> log_softmax(const Var<T>& logits) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("log_softmax: expected [B, C], got " + shape_str(s));
    const std::size_t b = s[0], c = s[1];
    Tensor<T> row_max({b});
    for (std::size_t i = 0; i < b; ++i) {
        T m = logits.value()[i * c];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, logits.value()[i * c + j]);
        row_max[i] = m;
    }
    auto shift = expand_mid(Var<T>::constant(std::move(row_max)), 1, c, s);
    auto z = sub(logits, shift);
    auto lse = log(sum_mid(exp(z), 1, b, c));
    return sub(z, expand_mid(lse, 1, c, s));
}

template <class T>
Var<T> softmax(const Var<T>& logits) {
    return exp(log_softmax(logits));
}

// ----------------------------------------------------------------- differentiation

/// Gradients of a rank-0 root with respect to `wrt`. Parameters the root does
/// not depend on get zero gradients. With create_graph the returned
/// gradients are graph nodes that can be differentiated again.
template <class T>
std::vector<Var<T>> grad(const Var<T>& root, const std::vector<Var<T>>& wrt, bool create_graph = false) {
    if (!root || root.value().rank() != 0)
        throw DimensionError("grad: root must be a scalar, got " + (root ? shape_str(root.shape()) : "null"));

    // Post-order over the nodes that require grad.
    std::vector<Node<T>*> order;
    if (root.requires_grad()) {
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].node();
                if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::unordered_set<Node<T>*> requested;
    for (const auto& w : wrt) requested.insert(w.node());

    GradModeGuard mode(create_graph);
    std::unordered_map<Node<T>*, Var<T>> grads;
    grads[root.node()] = Var<T>::constant(Tensor<T>::scalar(T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->backward) continue;
        auto found = grads.find(n);
        if (found == grads.end()) continue;
        const Var<T> g = found->second;
        std::vector<bool> needs(n->parents.size());
        for (std::size_t i = 0; i < needs.size(); ++i) needs[i] = n->parents[i].requires_grad();
        auto parent_grads = n->backward(g, needs);
        // Interior gradients are complete once propagated.
        if (!requested.count(n)) grads.erase(n);
        for (std::size_t i = 0; i < parent_grads.size(); ++i) {
            if (!needs[i] || !parent_grads[i]) continue;
            Node<T>* p = n->parents[i].node();
            auto [slot, inserted] = grads.try_emplace(p, parent_grads[i]);
            if (!inserted) slot->second = add(slot->second, parent_grads[i]);
        }
    }

    std::vector<Var<T>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto found = grads.find(w.node());
        if (found != grads.end())
            out.push_back(found->second);
        else
            out.push_back(Var<T>::constant(Tensor<T>(w.shape())));
    }
    return out;
}

}  // namespace metakws::ad
