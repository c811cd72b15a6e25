// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "hlm/tensor.hpp"

namespace hlm {

struct node;
using node_ptr = std::shared_ptr<node>;

// Gradient slots for an op's parents. A null slot means that parent does not
// need a gradient and the op may skip computing it.
class grad_sink {
public:
    explicit grad_sink(std::vector<tensor*> slots) : slots_(std::move(slots)) {}
    bool want(std::size_t i) const { return slots_[i] != nullptr; }
    tensor& at(std::size_t i) { return *slots_[i]; }

private:
    std::vector<tensor*> slots_;
};

using backward_fn = std::function<void(const tensor& grad_out, const node& self, grad_sink& sink)>;

struct node {
    tensor value;
    tensor grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<node_ptr> parents;
    backward_fn backward;
};

inline bool& grad_mode_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

class no_grad_guard {
public:
    no_grad_guard() : saved_(grad_mode_enabled()) { grad_mode_enabled() = false; }
    ~no_grad_guard() { grad_mode_enabled() = saved_; }
    no_grad_guard(const no_grad_guard&) = delete;
    no_grad_guard& operator=(const no_grad_guard&) = delete;

private:
    bool saved_;
};

class var {
public:
    var() = default;
    explicit var(node_ptr n) : n_(std::move(n)) {}

    explicit var(tensor value, bool requires_grad = false) : n_(std::make_shared<node>()) {
        require_finite(value, "leaf");
        n_->value = std::move(value);
        n_->requires_grad = requires_grad;
    }

    static var constant(tensor value) { return var(std::move(value), false); }
    static var parameter(tensor value) { return var(std::move(value), true); }

    bool defined() const noexcept { return static_cast<bool>(n_); }
    const tensor& value() const { return n_->value; }
    tensor& mutable_value() { return n_->value; }
    const shape_t& shape() const { return n_->value.shape(); }
    std::size_t dim(std::size_t i) const { return n_->value.dim(i); }
    std::size_t size() const { return n_->value.size(); }
    double item() const { return n_->value.item(); }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_leaf() const { return n_->is_leaf; }
    const char* op() const { return n_->op; }

    void set_requires_grad(bool rg) {
        require(n_->is_leaf, errc::invalid_argument, "set_requires_grad on non-leaf");
        n_->requires_grad = rg;
    }

    // Accumulated gradient of a leaf; nullopt when the leaf does not track gradients.
    std::optional<tensor> gradient() const {
        if (!n_->requires_grad) {
            return std::nullopt;
        }
        if (n_->grad.empty() && !n_->value.empty()) {
            return tensor(n_->value.shape());
        }
        return n_->grad;
    }

    void zero_grad() { n_->grad = tensor(); }

    // A new leaf sharing no history with this one.
    var detach() const { return var(n_->value, false); }

    const node_ptr& ptr() const { return n_; }

private:
    node_ptr n_;
};

namespace detail {

inline var make_result(tensor value, std::vector<var> parents, const char* op, backward_fn bw) {
    finalize(value, op);
    auto n = std::make_shared<node>();
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    if (grad_mode_enabled()) {
        for (const auto& p : parents) {
            rg = rg || p.requires_grad();
        }
    }
    if (rg) {
        n->requires_grad = true;
        n->is_leaf = false;
        n->parents.reserve(parents.size());
        for (auto& p : parents) {
            n->parents.push_back(p.ptr());
        }
        n->backward = std::move(bw);
    }
    return var(std::move(n));
}

inline void accumulate(tensor& dst, const tensor& src) {
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] += src[i];
    }
}

inline std::vector<node*> topo_order(node* root) {
    std::vector<node*> order;
    std::unordered_map<node*, bool> visited;
    std::vector<std::pair<node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited[root] = true;
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            node* p = n->parents[i++].get();
            if (p->requires_grad && !visited[p]) {
                visited[p] = true;
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    return order;  // parents before children
}

inline std::unordered_map<node*, tensor> run_backward(const var& loss) {
    require(loss.defined(), errc::invalid_argument, "backward on undefined variable");
    require(loss.size() == 1, errc::shape_mismatch,
            "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    std::unordered_map<node*, tensor> grads;
    if (!loss.requires_grad()) {
        return grads;
    }
    auto order = topo_order(loss.ptr().get());
    grads.reserve(order.size());
    grads[loss.ptr().get()] = tensor(loss.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        node* n = *it;
        if (n->is_leaf) {
            continue;
        }
        auto found = grads.find(n);
        if (found == grads.end()) {
            continue;
        }
        std::vector<tensor*> slots(n->parents.size(), nullptr);
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            node* p = n->parents[i].get();
            if (p->requires_grad) {
                auto [pit, inserted] = grads.try_emplace(p);
                if (inserted) {
                    pit->second = tensor(p->value.shape());
                }
                slots[i] = &pit->second;
            }
        }
        grad_sink sink(std::move(slots));
        const tensor g = std::move(found->second);
        found->second = tensor();
        n->backward(g, *n, sink);
    }
    return grads;
}

}  // namespace detail

// Accumulates gradients into every reachable leaf that requires grad, then
// releases the graph.
inline void backward(const var& loss) {
    auto grads = detail::run_backward(loss);
    if (!loss.requires_grad()) {
        return;
    }
    auto order = detail::topo_order(loss.ptr().get());
    for (node* n : order) {
        if (n->is_leaf) {
            auto it = grads.find(n);
            if (it != grads.end()) {
                if (n->grad.empty()) {
                    n->grad = std::move(it->second);
                } else {
                    detail::accumulate(n->grad, it->second);
                }
            }
        }
    }
    for (node* n : order) {
        if (!n->is_leaf) {
            n->backward = nullptr;
            n->parents.clear();
        }
    }
}

// Functional gradient: d loss / d input for each input. Leaves the graph
// intact and does not touch accumulated leaf gradients. Inputs that do not
// track gradients yield nullopt.
inline std::vector<std::optional<tensor>> grad(const var& loss, const std::vector<var>& inputs) {
    auto grads = detail::run_backward(loss);
    std::vector<std::optional<tensor>> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
        if (!in.requires_grad()) {
            out.emplace_back(std::nullopt);
            continue;
        }
        auto it = grads.find(in.ptr().get());
        if (it == grads.end()) {
            out.emplace_back(tensor(in.shape()));
        } else {
            out.emplace_back(std::move(it->second));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

namespace detail {
using rmat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using cmap = Eigen::Map<const rmat>;
using mmap = Eigen::Map<rmat>;

inline cmap as_mat(const tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return cmap(t.data().data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline mmap as_mat(tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return mmap(t.data().data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline std::vector<std::size_t> strides_of(const shape_t& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) {
        st[i - 1] = st[i] * s[i];
    }
    return st;
}

inline tensor permute_tensor(const tensor& x, const std::vector<std::size_t>& perm) {
    const auto& in = x.shape();
    const std::size_t r = in.size();
    shape_t out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in[perm[i]];
    }
    auto in_st = strides_of(in);
    std::vector<std::size_t> src_st(r);
    for (std::size_t i = 0; i < r; ++i) {
        src_st[i] = in_st[perm[i]];
    }
    tensor out(out_shape);
    if (out.empty()) {
        return out;
    }
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    const std::size_t inner = r ? out_shape[r - 1] : 1;
    const std::size_t inner_st = r ? src_st[r - 1] : 1;
    for (std::size_t o = 0; o < out.size(); o += inner) {
        for (std::size_t k = 0; k < inner; ++k) {
            out[o + k] = x[src + k * inner_st];
        }
        // advance all but the innermost axis
        for (std::size_t ax = r - 1; ax-- > 0;) {
            ++idx[ax];
            src += src_st[ax];
            if (idx[ax] < out_shape[ax]) {
                break;
            }
            src -= src_st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

// Maps every input element to its reduced output index.
inline std::vector<std::size_t> reduce_index(const shape_t& in, const std::vector<std::size_t>& axes,
                                             shape_t& out_shape, std::size_t& group) {
    std::vector<bool> reduced(in.size(), false);
    for (auto a : axes) {
        require(a < in.size(), errc::invalid_argument, "reduction axis out of range for " + shape_str(in));
        reduced[a] = true;
    }
    out_shape.clear();
    group = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (reduced[i]) {
            group *= in[i];
        } else {
            out_shape.push_back(in[i]);
        }
    }
    auto out_st = strides_of(out_shape);
    std::vector<std::size_t> map(shape_numel(in));
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t lin = 0; lin < map.size(); ++lin) {
        std::size_t o = 0;
        for (std::size_t i = 0, k = 0; i < in.size(); ++i) {
            if (!reduced[i]) {
                o += idx[i] * out_st[k++];
            }
        }
        map[lin] = o;
        for (std::size_t ax = in.size(); ax-- > 0;) {
            if (++idx[ax] < in[ax]) {
                break;
            }
            idx[ax] = 0;
        }
    }
    return map;
}

inline std::size_t last_dim(const shape_t& s, const char* op) {
    require(!s.empty(), errc::shape_mismatch, std::string(op) + ": requires rank >= 1");
    return s.back();
}

}  // namespace detail

inline var add(const var& a, const var& b) {
    require_same_shape(a.value(), b.value(), "add");
    tensor out = a.value() + b.value();
    return detail::make_result(std::move(out), {a, b}, "add", [](const tensor& g, const node&, grad_sink& s) {
        if (s.want(0)) detail::accumulate(s.at(0), g);
        if (s.want(1)) detail::accumulate(s.at(1), g);
    });
}

inline var sub(const var& a, const var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    tensor out = a.value() - b.value();
    return detail::make_result(std::move(out), {a, b}, "sub", [](const tensor& g, const node&, grad_sink& s) {
        if (s.want(0)) detail::accumulate(s.at(0), g);
        if (s.want(1)) {
            auto& t = s.at(1);
            for (std::size_t i = 0; i < g.size(); ++i) t[i] -= g[i];
        }
    });
}

inline var mul(const var& a, const var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::make_result(std::move(out), {a, b}, "mul", [](const tensor& g, const node& n, grad_sink& s) {
        const auto& x = n.parents[0]->value;
        const auto& y = n.parents[1]->value;
        if (s.want(0)) {
            auto& t = s.at(0);
            for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * y[i];
        }
        if (s.want(1)) {
            auto& t = s.at(1);
            for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * x[i];
        }
    });
}

inline var scale(const var& a, double c) {
    tensor out = c * a.value();
    return detail::make_result(std::move(out), {a}, "scale", [c](const tensor& g, const node&, grad_sink& s) {
        auto& t = s.at(0);
        for (std::size_t i = 0; i < g.size(); ++i) t[i] += c * g[i];
    });
}

inline var add_scalar(const var& a, double c) {
    tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    return detail::make_result(std::move(out), {a}, "add_scalar", [](const tensor& g, const node&, grad_sink& s) {
        detail::accumulate(s.at(0), g);
    });
}

inline var operator+(const var& a, const var& b) { return add(a, b); }
inline var operator-(const var& a, const var& b) { return sub(a, b); }
inline var operator*(const var& a, const var& b) { return mul(a, b); }
inline var operator*(double c, const var& a) { return scale(a, c); }

// x (..., C) + b (C)
inline var add_bias(const var& x, const var& b) {
    const std::size_t c = detail::last_dim(x.shape(), "add_bias");
    require(b.value().rank() == 1 && b.dim(0) == c, errc::shape_mismatch,
            "add_bias: bias " + shape_str(b.shape()) + " does not match trailing axis of " + shape_str(x.shape()));
    tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % c];
    return detail::make_result(std::move(out), {x, b}, "add_bias", [c](const tensor& g, const node&, grad_sink& s) {
        if (s.want(0)) detail::accumulate(s.at(0), g);
        if (s.want(1)) {
            auto& t = s.at(1);
            for (std::size_t i = 0; i < g.size(); ++i) t[i % c] += g[i];
        }
    });
}

inline double silu_value(double x) { return x / (1.0 + std::exp(-x)); }

inline var silu(const var& x) {
    tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = silu_value(x.value()[i]);
    return detail::make_result(std::move(out), {x}, "silu", [](const tensor& g, const node& n, grad_sink& s) {
        const auto& xv = n.parents[0]->value;
        auto& t = s.at(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-xv[i]));
            t[i] += g[i] * sig * (1.0 + xv[i] * (1.0 - sig));
        }
    });
}

inline var exp(const var& x) {
    tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
    return detail::make_result(std::move(out), {x}, "exp", [](const tensor& g, const node& n, grad_sink& s) {
        auto& t = s.at(0);
        for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * n.value[i];
    });
}

inline var log(const var& x) {
    for (double v : x.value().data()) {
        require(v > 0.0, errc::non_finite, "log: non-positive input");
    }
    tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x.value()[i]);
    return detail::make_result(std::move(out), {x}, "log", [](const tensor& g, const node& n, grad_sink& s) {
        const auto& xv = n.parents[0]->value;
        auto& t = s.at(0);
        for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] / xv[i];
    });
}

inline var square(const var& x) { return mul(x, x); }

// (..., k) x (k, n) -> (..., n)
inline var matmul(const var& a, const var& b) {
    require(b.value().rank() == 2, errc::shape_mismatch, "matmul: right operand must be 2-D, got " + shape_str(b.shape()));
    const std::size_t k = detail::last_dim(a.shape(), "matmul");
    require(k == b.dim(0), errc::shape_mismatch,
            "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t n = b.dim(1);
    const std::size_t m = a.size() / (k ? k : 1);
    shape_t os = a.shape();
    os.back() = n;
    tensor out(os);
    detail::as_mat(out, m, n).noalias() = detail::as_mat(a.value(), m, k) * detail::as_mat(b.value(), k, n);
    return detail::make_result(std::move(out), {a, b}, "matmul", [m, k, n](const tensor& g, const node& nd, grad_sink& s) {
        const auto G = detail::as_mat(g, m, n);
        if (s.want(0)) {
            detail::as_mat(s.at(0), m, k).noalias() += G * detail::as_mat(nd.parents[1]->value, k, n).transpose();
        }
        if (s.want(1)) {
            detail::as_mat(s.at(1), k, n).noalias() += detail::as_mat(nd.parents[0]->value, m, k).transpose() * G;
        }
    });
}

// Batched matmul over the leading axis with optional transposes.
inline var bmm(const var& a, const var& b, bool trans_a = false, bool trans_b = false) {
    require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0), errc::shape_mismatch,
            "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t batch = a.dim(0);
    const std::size_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
    const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
    const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
    require(k == kb, errc::shape_mismatch,
            "bmm: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    tensor out({batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
        auto A = detail::as_mat(a.value(), ar, ac, i * ar * ac);
        auto B = detail::as_mat(b.value(), br, bc, i * br * bc);
        auto C = detail::as_mat(out, m, n, i * m * n);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
    }
    return detail::make_result(std::move(out), {a, b}, "bmm",
        [=](const tensor& g, const node& nd, grad_sink& s) {
            for (std::size_t i = 0; i < batch; ++i) {
                auto G = detail::as_mat(g, m, n, i * m * n);
                auto A = detail::as_mat(nd.parents[0]->value, ar, ac, i * ar * ac);
                auto B = detail::as_mat(nd.parents[1]->value, br, bc, i * br * bc);
                if (s.want(0)) {
                    auto GA = detail::as_mat(s.at(0), ar, ac, i * ar * ac);
                    // d op(A) = G op(B)^T
                    if (!trans_a) {
                        if (!trans_b) GA.noalias() += G * B.transpose();
                        else GA.noalias() += G * B;
                    } else {
                        if (!trans_b) GA.noalias() += B * G.transpose();
                        else GA.noalias() += B.transpose() * G.transpose();
                    }
                }
                if (s.want(1)) {
                    auto GB = detail::as_mat(s.at(1), br, bc, i * br * bc);
                    // d op(B) = op(A)^T G
                    if (!trans_b) {
                        if (!trans_a) GB.noalias() += A.transpose() * G;
                        else GB.noalias() += A * G;
                    } else {
                        if (!trans_a) GB.noalias() += G.transpose() * A;
                        else GB.noalias() += G.transpose() * A.transpose();
                    }
                }
            }
        });
}

inline var softmax(const var& x) {
    const std::size_t c = detail::last_dim(x.shape(), "softmax");
    tensor out(x.shape());
    const auto& xv = x.value();
    for (std::size_t r = 0; r < out.size(); r += c) {
        double mx = xv[r];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xv[r + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (out[r + j] = std::exp(xv[r + j] - mx));
        for (std::size_t j = 0; j < c; ++j) out[r + j] /= z;
    }
    return detail::make_result(std::move(out), {x}, "softmax", [c](const tensor& g, const node& n, grad_sink& s) {
        const auto& y = n.value;
        auto& t = s.at(0);
        for (std::size_t r = 0; r < g.size(); r += c) {
            double d = 0.0;
            for (std::size_t j = 0; j < c; ++j) d += g[r + j] * y[r + j];
            for (std::size_t j = 0; j < c; ++j) t[r + j] += y[r + j] * (g[r + j] - d);
        }
    });
}

// Row-wise log-softmax restricted to entries where mask is true; masked-out
// entries produce 0 and receive no gradient.
inline var masked_log_softmax(const var& x, const std::vector<bool>& mask) {
    const std::size_t c = detail::last_dim(x.shape(), "masked_log_softmax");
    require(mask.size() == x.size(), errc::shape_mismatch, "masked_log_softmax: mask size mismatch");
    tensor out(x.shape());
    const auto& xv = x.value();
    for (std::size_t r = 0; r < out.size(); r += c) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) if (mask[r + j]) mx = std::max(mx, xv[r + j]);
        if (mx == -INFINITY) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) if (mask[r + j]) z += std::exp(xv[r + j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) if (mask[r + j]) out[r + j] = xv[r + j] - lse;
    }
    return detail::make_result(std::move(out), {x}, "masked_log_softmax",
        [c, mask](const tensor& g, const node& n, grad_sink& s) {
            const auto& y = n.value;
            auto& t = s.at(0);
            for (std::size_t r = 0; r < g.size(); r += c) {
                double gs = 0.0;
                for (std::size_t j = 0; j < c; ++j) if (mask[r + j]) gs += g[r + j];
                for (std::size_t j = 0; j < c; ++j) {
                    if (mask[r + j]) t[r + j] += g[r + j] - std::exp(y[r + j]) * gs;
                }
            }
        });
}

// Normalizes over the trailing axis; gain and bias (C) are optional.
inline var layer_norm(const var& x, const var& gain = {}, const var& bias = {}, double eps = 1e-5) {
    const std::size_t c = detail::last_dim(x.shape(), "layer_norm");
    const bool affine = gain.defined();
    if (affine) {
        require(gain.value().rank() == 1 && gain.dim(0) == c && bias.defined() && bias.shape() == gain.shape(),
                errc::shape_mismatch, "layer_norm: affine parameters must have shape (" + std::to_string(c) + ")");
    }
    const std::size_t rows = x.size() / c;
    tensor out(x.shape());
    tensor xhat(x.shape());
    std::vector<double> inv_std(rows);
    const auto& xv = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv[o + j];
        mu /= static_cast<double>(c);
        double var_ = 0.0;
        for (std::size_t j = 0; j < c; ++j) var_ += (xv[o + j] - mu) * (xv[o + j] - mu);
        var_ /= static_cast<double>(c);
        inv_std[r] = 1.0 / std::sqrt(var_ + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[o + j] = (xv[o + j] - mu) * inv_std[r];
            out[o + j] = affine ? xhat[o + j] * gain.value()[j] + bias.value()[j] : xhat[o + j];
        }
    }
    std::vector<var> parents{x};
    if (affine) {
        parents.push_back(gain);
        parents.push_back(bias);
    }
    return detail::make_result(std::move(out), std::move(parents), "layer_norm",
        [c, rows, affine, xhat = std::move(xhat), inv_std = std::move(inv_std)](const tensor& g, const node& n, grad_sink& s) {
            std::vector<double> dxh(c);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t o = r * c;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dxh[j] = affine ? g[o + j] * n.parents[1]->value[j] : g[o + j];
                    m1 += dxh[j];
                    m2 += dxh[j] * xhat[o + j];
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                if (s.want(0)) {
                    auto& t = s.at(0);
                    for (std::size_t j = 0; j < c; ++j) t[o + j] += inv_std[r] * (dxh[j] - m1 - xhat[o + j] * m2);
                }
                if (affine && s.want(1)) {
                    auto& t = s.at(1);
                    for (std::size_t j = 0; j < c; ++j) t[j] += g[o + j] * xhat[o + j];
                }
                if (affine && s.want(2)) {
                    auto& t = s.at(2);
                    for (std::size_t j = 0; j < c; ++j) t[j] += g[o + j];
                }
            }
        });
}

inline var mean(const var& x, const std::vector<std::size_t>& axes) {
    shape_t os;
    std::size_t group = 1;
    auto map = detail::reduce_index(x.shape(), axes, os, group);
    tensor out(os);
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += x.value()[i];
    for (auto& v : out.data()) v *= inv;
    return detail::make_result(std::move(out), {x}, "mean",
        [map = std::move(map), inv](const tensor& g, const node&, grad_sink& s) {
            auto& t = s.at(0);
            for (std::size_t i = 0; i < map.size(); ++i) t[i] += g[map[i]] * inv;
        });
}

inline var sum(const var& x) {
    double acc = 0.0;
    for (double v : x.value().data()) acc += v;
    return detail::make_result(tensor::scalar(acc), {x}, "sum", [](const tensor& g, const node&, grad_sink& s) {
        auto& t = s.at(0);
        const double gv = g[0];
        for (auto& v : t.data()) v += gv;
    });
}

inline var mean_all(const var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline var reshape(const var& x, shape_t shape) {
    tensor out = x.value().reshaped(std::move(shape));
    return detail::make_result(std::move(out), {x}, "reshape", [](const tensor& g, const node&, grad_sink& s) {
        detail::accumulate(s.at(0), g);
    });
}

inline var permute(const var& x, std::vector<std::size_t> perm) {
    require(perm.size() == x.value().rank(), errc::shape_mismatch, "permute: axis count mismatch for " + shape_str(x.shape()));
    std::vector<std::size_t> inv(perm.size());
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        require(perm[i] < perm.size() && !seen[perm[i]], errc::invalid_argument, "permute: invalid permutation");
        seen[perm[i]] = true;
        inv[perm[i]] = i;
    }
    tensor out = detail::permute_tensor(x.value(), perm);
    return detail::make_result(std::move(out), {x}, "permute",
        [inv = std::move(inv)](const tensor& g, const node&, grad_sink& s) {
            detail::accumulate(s.at(0), detail::permute_tensor(g, inv));
        });
}

// Contiguous slice [start, start+len) along an axis.
inline var slice(const var& x, std::size_t axis, std::size_t start, std::size_t len) {
    const auto& sh = x.shape();
    require(axis < sh.size() && start + len <= sh[axis], errc::shape_mismatch,
            "slice: range out of bounds for " + shape_str(sh));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    shape_t os = sh;
    os[axis] = len;
    tensor out(os);
    const std::size_t full = sh[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.value().data().begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), len * inner,
                    out.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner));
    }
    return detail::make_result(std::move(out), {x}, "slice",
        [=](const tensor& g, const node&, grad_sink& s) {
            auto& t = s.at(0);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < len * inner; ++k) t[(o * full + start) * inner + k] += g[o * len * inner + k];
            }
        });
}

inline std::vector<var> split(const var& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
    std::size_t total = 0;
    for (auto v : sizes) total += v;
    require(axis < x.value().rank() && total == x.dim(axis), errc::shape_mismatch,
            "split: sizes do not cover axis of " + shape_str(x.shape()));
    std::vector<var> parts;
    std::size_t start = 0;
    for (auto v : sizes) {
        parts.push_back(slice(x, axis, start, v));
        start += v;
    }
    return parts;
}

inline var concat(const std::vector<var>& xs, std::size_t axis) {
    require(!xs.empty(), errc::invalid_argument, "concat: no inputs");
    shape_t os = xs[0].shape();
    require(axis < os.size(), errc::shape_mismatch, "concat: axis out of range");
    std::size_t total = 0;
    for (const auto& x : xs) {
        shape_t a = x.shape(), b = os;
        require(a.size() == b.size(), errc::shape_mismatch, "concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
        a[axis] = b[axis] = 0;
        require(a == b, errc::shape_mismatch, "concat: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(os));
        total += x.dim(axis);
    }
    os[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
    for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
    tensor out(os);
    std::vector<std::size_t> widths;
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t w = x.dim(axis);
        widths.push_back(w);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(x.value().data().begin() + static_cast<std::ptrdiff_t>(o * w * inner), w * inner,
                        out.data().begin() + static_cast<std::ptrdiff_t>((o * total + off) * inner));
        }
        off += w;
    }
    return detail::make_result(std::move(out), xs, "concat",
        [=](const tensor& g, const node&, grad_sink& s) {
            std::size_t off2 = 0;
            for (std::size_t p = 0; p < widths.size(); ++p) {
                const std::size_t w = widths[p];
                if (s.want(p)) {
                    auto& t = s.at(p);
                    for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t k = 0; k < w * inner; ++k) t[o * w * inner + k] += g[(o * total + off2) * inner + k];
                    }
                }
                off2 += w;
            }
        });
}

// L2 norm over the trailing axis; output drops that axis.
inline var l2_norm(const var& x) {
    const std::size_t c = detail::last_dim(x.shape(), "l2_norm");
    shape_t os(x.shape().begin(), x.shape().end() - 1);
    tensor out(os);
    for (std::size_t r = 0; r < out.size(); ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += x.value()[r * c + j] * x.value()[r * c + j];
        out[r] = std::sqrt(acc);
    }
    return detail::make_result(std::move(out), {x}, "l2_norm", [c](const tensor& g, const node& n, grad_sink& s) {
        const auto& xv = n.parents[0]->value;
        auto& t = s.at(0);
        for (std::size_t r = 0; r < n.value.size(); ++r) {
            if (n.value[r] == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) t[r * c + j] += g[r] * xv[r * c + j] / n.value[r];
        }
    });
}

// Pairwise cosine similarity between rows: a (n, d), b (m, d) -> (n, m).
inline var cosine_similarity(const var& a, const var& b) {
    require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(1), errc::shape_mismatch,
            "cosine_similarity: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
    auto normalize = [d](const tensor& x, std::vector<double>& norms) {
        tensor u(x.shape());
        const std::size_t rows = x.dim(0);
        norms.assign(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += x[r * d + j] * x[r * d + j];
            require(acc > 0.0, errc::invalid_argument, "cosine_similarity: zero-norm row " + std::to_string(r));
            norms[r] = std::sqrt(acc);
            for (std::size_t j = 0; j < d; ++j) u[r * d + j] = x[r * d + j] / norms[r];
        }
        return u;
    };
    std::vector<double> na, nb;
    tensor ua = normalize(a.value(), na);
    tensor ub = normalize(b.value(), nb);
    tensor out({n, m});
    detail::as_mat(out, n, m).noalias() = detail::as_mat(ua, n, d) * detail::as_mat(ub, m, d).transpose();
    return detail::make_result(std::move(out), {a, b}, "cosine_similarity",
        [=, ua = std::move(ua), ub = std::move(ub), na = std::move(na), nb = std::move(nb)](
            const tensor& g, const node&, grad_sink& s) {
            auto G = detail::as_mat(g, n, m);
            auto project = [d](const detail::rmat& gu, const tensor& u, const std::vector<double>& norms, tensor& dst) {
                for (std::size_t r = 0; r < norms.size(); ++r) {
                    double proj = 0.0;
                    for (std::size_t j = 0; j < d; ++j) proj += gu(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) * u[r * d + j];
                    for (std::size_t j = 0; j < d; ++j) {
                        dst[r * d + j] += (gu(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) - proj * u[r * d + j]) / norms[r];
                    }
                }
            };
            if (s.want(0)) {
                detail::rmat gu = G * detail::as_mat(ub, m, d);
                project(gu, ua, na, s.at(0));
            }
            if (s.want(1)) {
                detail::rmat gu = G.transpose() * detail::as_mat(ua, n, d);
                project(gu, ub, nb, s.at(1));
            }
        });
}

inline var mse(const var& a, const var& b) {
    require_same_shape(a.value(), b.value(), "mse");
    return mean_all(square(sub(a, b)));
}

// Gathers rows of a (V, C) table.
inline var take_rows(const var& table, const std::vector<std::size_t>& idx) {
    require(table.value().rank() == 2, errc::shape_mismatch, "take_rows: table must be 2-D");
    const std::size_t v = table.dim(0), c = table.dim(1);
    tensor out({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < v, errc::invalid_argument, "take_rows: index " + std::to_string(idx[i]) + " out of range");
        std::copy_n(table.value().data().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    return detail::make_result(std::move(out), {table}, "take_rows", [idx, c](const tensor& g, const node&, grad_sink& s) {
        auto& t = s.at(0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t j = 0; j < c; ++j) t[idx[i] * c + j] += g[i * c + j];
        }
    });
}

// Repeats x along a new leading axis of size n.
inline var expand_leading(const var& x, std::size_t n) {
    shape_t os{n};
    os.insert(os.end(), x.shape().begin(), x.shape().end());
    tensor out(os);
    const std::size_t w = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(x.value().data().begin(), w, out.data().begin() + static_cast<std::ptrdiff_t>(i * w));
    }
    return detail::make_result(std::move(out), {x}, "expand_leading", [n, w](const tensor& g, const node&, grad_sink& s) {
        auto& t = s.at(0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) t[j] += g[i * w + j];
        }
    });
}

// Feature-wise affine modulation h' = gamma * h + beta. h is (B, N, C) with
// gamma/beta (B, C), or h is (N, C) with gamma/beta (C).
inline var modulate(const var& h, const var& gamma, const var& beta) {
    const auto& hs = h.shape();
    std::size_t batch = 1, tokens = 0, c = 0;
    if (hs.size() == 3) {
        batch = hs[0];
        tokens = hs[1];
        c = hs[2];
        require(gamma.shape() == shape_t({batch, c}), errc::shape_mismatch,
                "modulate: gamma " + shape_str(gamma.shape()) + " does not match features " + shape_str(hs));
    } else {
        require(hs.size() == 2, errc::shape_mismatch, "modulate: features must be 2-D or 3-D, got " + shape_str(hs));
        tokens = hs[0];
        c = hs[1];
        require(gamma.shape() == shape_t({c}), errc::shape_mismatch,
                "modulate: gamma " + shape_str(gamma.shape()) + " does not match features " + shape_str(hs));
    }
    require(beta.shape() == gamma.shape(), errc::shape_mismatch,
            "modulate: beta " + shape_str(beta.shape()) + " differs from gamma " + shape_str(gamma.shape()));
    tensor out(hs);
    const auto& hv = h.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < tokens; ++t) {
            const std::size_t o = (b * tokens + t) * c;
            for (std::size_t j = 0; j < c; ++j) out[o + j] = gv[b * c + j] * hv[o + j] + bv[b * c + j];
        }
    }
    return detail::make_result(std::move(out), {h, gamma, beta}, "modulate",
        [=](const tensor& g, const node& n, grad_sink& s) {
            const auto& hv2 = n.parents[0]->value;
            const auto& gv2 = n.parents[1]->value;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t t = 0; t < tokens; ++t) {
                    const std::size_t o = (b * tokens + t) * c;
                    for (std::size_t j = 0; j < c; ++j) {
                        if (s.want(0)) s.at(0)[o + j] += g[o + j] * gv2[b * c + j];
                        if (s.want(1)) s.at(1)[b * c + j] += g[o + j] * hv2[o + j];
                        if (s.want(2)) s.at(2)[b * c + j] += g[o + j];
                    }
                }
            }
        });
}

// Mean over contiguous row segments: x (N, C), offsets of size B+1 -> (B, C).
inline var segment_mean(const var& x, const std::vector<std::size_t>& offsets) {
    require(x.value().rank() == 2, errc::shape_mismatch, "segment_mean: input must be 2-D");
    require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == x.dim(0), errc::invalid_argument,
            "segment_mean: offsets must span all rows");
    const std::size_t c = x.dim(1), nseg = offsets.size() - 1;
    tensor out({nseg, c});
    for (std::size_t sgm = 0; sgm < nseg; ++sgm) {
        const std::size_t lo = offsets[sgm], hi = offsets[sgm + 1];
        require(hi > lo, errc::invalid_argument, "segment_mean: empty segment");
        for (std::size_t r = lo; r < hi; ++r) {
            for (std::size_t j = 0; j < c; ++j) out[sgm * c + j] += x.value()[r * c + j];
        }
        const double inv = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t j = 0; j < c; ++j) out[sgm * c + j] *= inv;
    }
    return detail::make_result(std::move(out), {x}, "segment_mean", [offsets, c, nseg](const tensor& g, const node&, grad_sink& s) {
        auto& t = s.at(0);
        for (std::size_t sgm = 0; sgm < nseg; ++sgm) {
            const std::size_t lo = offsets[sgm], hi = offsets[sgm + 1];
            const double inv = 1.0 / static_cast<double>(hi - lo);
            for (std::size_t r = lo; r < hi; ++r) {
                for (std::size_t j = 0; j < c; ++j) t[r * c + j] += g[sgm * c + j] * inv;
            }
        }
    });
}

// y[b] = W[b] x[b] + bias with a fixed summation order so a shared weight
// and per-item copies of it produce bit-identical results. weight is (O, K)
// shared or (B, O, K) per item; x is (B, K); bias is (O).
inline var batched_affine(const var& x, const var& weight, const var& bias) {
    require(x.value().rank() == 2, errc::shape_mismatch, "batched_affine: input must be (B, K), got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), k = x.dim(1);
    const bool per_item = weight.value().rank() == 3;
    const std::size_t o = per_item ? weight.dim(1) : weight.dim(0);
    if (per_item) {
        require(weight.dim(0) == batch && weight.dim(2) == k, errc::shape_mismatch,
                "batched_affine: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
    } else {
        require(weight.value().rank() == 2 && weight.dim(1) == k, errc::shape_mismatch,
                "batched_affine: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
    }
    require(bias.shape() == shape_t({o}), errc::shape_mismatch, "batched_affine: bias must be (" + std::to_string(o) + ")");
    tensor out({batch, o});
    const auto& wv = weight.value();
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* w = wv.data().data() + (per_item ? b * o * k : 0);
        for (std::size_t i = 0; i < o; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += w[i * k + j] * xv[b * k + j];
            out[b * o + i] = acc + bias.value()[i];
        }
    }
    return detail::make_result(std::move(out), {x, weight, bias}, "batched_affine",
        [=](const tensor& g, const node& n, grad_sink& s) {
            const auto& wv2 = n.parents[1]->value;
            const auto& xv2 = n.parents[0]->value;
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t woff = per_item ? b * o * k : 0;
                for (std::size_t i = 0; i < o; ++i) {
                    const double gi = g[b * o + i];
                    if (s.want(2)) s.at(2)[i] += gi;
                    for (std::size_t j = 0; j < k; ++j) {
                        if (s.want(0)) s.at(0)[b * k + j] += gi * wv2[woff + i * k + j];
                        if (s.want(1)) s.at(1)[woff + i * k + j] += gi * xv2[b * k + j];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct grad_check_report {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<std::size_t> non_finite;  // coordinates whose evaluation was not finite
    bool pass = false;
};

// Compares an analytic gradient with central differences using step
// h = step * (1 + |x_i|). Relative error per coordinate is
// |a - n| / max(|a|, |n|, 1e-4 * max(1, max_j |n_j|)).
inline grad_check_report grad_check(const std::function<double(const tensor&)>& f,
                                    const std::function<tensor(const tensor&)>& analytic,
                                    const tensor& point, double step = 1e-5, double tolerance = 1e-5) {
    grad_check_report rep;
    const tensor a = analytic(point);
    require_same_shape(a, point, "grad_check");
    std::vector<double> numeric(point.size(), 0.0);
    std::vector<bool> ok(point.size(), true);
    double nmax = 1.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        tensor xp = point, xm = point;
        const double h = step * (1.0 + std::abs(point[i]));
        xp[i] += h;
        xm[i] -= h;
        double fp = 0.0, fm = 0.0;
        try {
            fp = f(xp);
            fm = f(xm);
        } catch (const error&) {
            fp = fm = NAN;
        }
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            ok[i] = false;
            rep.non_finite.push_back(i);
            continue;
        }
        numeric[i] = (fp - fm) / (xp[i] - xm[i]);
        nmax = std::max(nmax, std::abs(numeric[i]));
    }
    const double floor = 1e-4 * nmax;
    for (std::size_t i = 0; i < point.size(); ++i) {
        if (!ok[i]) continue;
        const double denom = std::max({std::abs(a[i]), std::abs(numeric[i]), floor});
        const double rel = std::abs(a[i] - numeric[i]) / denom;
        if (rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_index = i;
        }
    }
    rep.pass = rep.non_finite.empty() && rep.max_rel_error < tolerance;
    return rep;
}

// Convenience overload: differentiates a scalar-valued graph function.
inline grad_check_report grad_check(const std::function<var(const var&)>& f, const tensor& point,
                                    double step = 1e-5, double tolerance = 1e-5) {
    auto value = [&](const tensor& x) {
        no_grad_guard ng;
        return f(var::constant(x)).item();
    };
    auto analytic = [&](const tensor& x) {
        var xv = var::parameter(x);
        var y = f(xv);
        auto g = grad(y, {xv});
        return *g[0];
    };
    return grad_check(value, analytic, point, step, tolerance);
}

}  // namespace hlm
