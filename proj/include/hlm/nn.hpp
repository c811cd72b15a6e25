// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hlm/autograd.hpp"

namespace hlm::nn {

struct param_ref {
    std::string name;
    var* value;
};
using param_list = std::vector<param_ref>;

inline void set_trainable(param_list& params, bool trainable) {
    for (auto& p : params) {
        p.value->set_requires_grad(trainable);
        p.value->zero_grad();
    }
}

inline std::size_t count_parameters(const param_list& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value->size();
    return n;
}

struct linear {
    var weight;  // (in, out)
    var bias;    // (out)

    linear() = default;
    linear(std::size_t in, std::size_t out, std::mt19937_64& gen, double gain = 1.0) {
        const double a = gain * std::sqrt(6.0 / static_cast<double>(in + out));
        weight = var::parameter(tensor::uniform({in, out}, gen, -a, a));
        bias = var::parameter(tensor({out}));
    }

    static linear zeros(std::size_t in, std::size_t out) {
        linear l;
        l.weight = var::parameter(tensor({in, out}));
        l.bias = var::parameter(tensor({out}));
        return l;
    }

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    var operator()(const var& x) const {
        require(!x.shape().empty() && x.shape().back() == in_features(), errc::shape_mismatch,
                "linear: input " + shape_str(x.shape()) + " does not end in width " + std::to_string(in_features()));
        return add_bias(matmul(x, weight), bias);
    }

    void collect(const std::string& prefix, param_list& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

struct layer_norm_affine {
    var gain;
    var bias;

    layer_norm_affine() = default;
    explicit layer_norm_affine(std::size_t c)
        : gain(var::parameter(tensor({c}, 1.0))), bias(var::parameter(tensor({c}))) {}

    var operator()(const var& x) const { return layer_norm(x, gain, bias); }

    void collect(const std::string& prefix, param_list& out) {
        out.push_back({prefix + ".gain", &gain});
        out.push_back({prefix + ".bias", &bias});
    }
};

// Multi-head attention. Queries x (G, N, C), context (G, M, C_ctx).
struct attention {
    linear q, k, v, o;
    std::size_t heads = 1;

    attention() = default;
    attention(std::size_t width, std::size_t ctx_width, std::size_t n_heads, std::mt19937_64& gen)
        : q(width, width, gen), k(ctx_width, width, gen), v(ctx_width, width, gen), o(width, width, gen, 0.5),
          heads(n_heads) {
        require(n_heads > 0 && width % n_heads == 0, errc::invalid_argument, "attention: width must divide into heads");
    }

    var split_heads(const var& x) const {
        const std::size_t g = x.dim(0), n = x.dim(1), c = x.dim(2);
        if (heads == 1) return x;
        auto r = reshape(x, {g, n, heads, c / heads});
        return reshape(permute(r, {0, 2, 1, 3}), {g * heads, n, c / heads});
    }

    var merge_heads(const var& x, std::size_t g) const {
        if (heads == 1) return x;
        const std::size_t n = x.dim(1), dh = x.dim(2);
        auto r = reshape(x, {g, heads, n, dh});
        return reshape(permute(r, {0, 2, 1, 3}), {g, n, heads * dh});
    }

    var operator()(const var& x, const var& ctx) const {
        require(x.value().rank() == 3 && ctx.value().rank() == 3 && x.dim(0) == ctx.dim(0), errc::shape_mismatch,
                "attention: expected (G, N, C) inputs, got " + shape_str(x.shape()) + " and " + shape_str(ctx.shape()));
        const std::size_t g = x.dim(0);
        const std::size_t dh = q.out_features() / heads;
        auto qh = split_heads(q(x));
        auto kh = split_heads(k(ctx));
        auto vh = split_heads(v(ctx));
        auto scores = scale(bmm(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        auto attn = softmax(scores);
        return o(merge_heads(bmm(attn, vh), g));
    }

    void collect(const std::string& prefix, param_list& out) {
        q.collect(prefix + ".q", out);
        k.collect(prefix + ".k", out);
        v.collect(prefix + ".v", out);
        o.collect(prefix + ".o", out);
    }
};

// Residual MLP block: x + W2 silu(W1 LN(x)).
struct mlp_block {
    layer_norm_affine norm;
    linear fc1, fc2;

    mlp_block() = default;
    mlp_block(std::size_t width, std::size_t hidden, std::mt19937_64& gen)
        : norm(width), fc1(width, hidden, gen), fc2(hidden, width, gen, 0.5) {}

    var operator()(const var& x) const { return add(x, fc2(silu(fc1(norm(x))))); }

    void collect(const std::string& prefix, param_list& out) {
        norm.collect(prefix + ".norm", out);
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// Sinusoidal features of a scalar position, width must be even.
inline std::vector<double> sinusoidal(double pos, std::size_t width, double max_period = 10000.0) {
    std::vector<double> out(width);
    const std::size_t half = width / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = std::cos(pos * freq);
        out[half + i] = std::sin(pos * freq);
    }
    return out;
}

class adam {
public:
    struct options {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    adam() = default;
    adam(param_list params, options opt) : params_(std::move(params)), opt_(opt) {
        for (auto& p : params_) {
            m_.emplace_back(p.value->shape());
            v_.emplace_back(p.value->shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.value->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto g = params_[i].value->gradient();
            if (!g) continue;
            require(g->all_finite(), errc::divergence, "non-finite gradient for " + params_[i].name);
            auto& w = params_[i].value->mutable_value();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = (*g)[j];
                m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
                v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
                w[j] -= opt_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
            }
            finalize(w, params_[i].name.c_str());
        }
    }

    std::size_t steps() const { return t_; }
    const options& opts() const { return opt_; }

private:
    param_list params_;
    options opt_;
    std::vector<tensor> m_, v_;
    std::size_t t_ = 0;
};

using named_tensors = std::map<std::string, tensor>;

inline named_tensors snapshot(const param_list& params) {
    named_tensors out;
    for (const auto& p : params) {
        require(out.emplace(p.name, p.value->value()).second, errc::invalid_argument, "duplicate parameter name " + p.name);
    }
    return out;
}

inline void restore(param_list& params, const named_tensors& from) {
    for (auto& p : params) {
        auto it = from.find(p.name);
        require(it != from.end(), errc::format, "checkpoint is missing parameter " + p.name);
        require(it->second.shape() == p.value->shape(), errc::format,
                "checkpoint parameter " + p.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                    shape_str(p.value->shape()));
        const bool rg = p.value->requires_grad();
        *p.value = var(it->second, rg);
    }
}

}  // namespace hlm::nn
