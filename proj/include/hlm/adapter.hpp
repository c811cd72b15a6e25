// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "hlm/backbone.hpp"

namespace hlm {

struct adapter_config {
    std::size_t style_width = 32;     // D_s
    std::size_t encoder_width = 64;
    std::size_t encoder_blocks = 3;
    std::size_t trunk_width = 64;
    std::size_t rank = 4;             // r
    double alpha = 4.0;               // alpha_lora, net scale alpha/r

    void validate() const {
        require(style_width >= 1 && encoder_width >= 1 && encoder_blocks >= 1 && trunk_width >= 1 && rank >= 1,
                errc::invalid_argument, "adapter config sizes must be positive");
    }
};

// Per-frame MLP blocks over the flattened (J*D) latent, then mean pooling over
// frames. Frames are processed independently, so shuffling them leaves the
// embedding unchanged.
struct style_encoder {
    nn::linear input;
    std::vector<nn::mlp_block> blocks;
    nn::layer_norm_affine norm;
    nn::linear output;
    std::size_t in_width = 0;

    style_encoder() = default;
    style_encoder(std::size_t latent_width, const adapter_config& c, std::mt19937_64& gen)
        : input(latent_width, c.encoder_width, gen), norm(c.encoder_width),
          output(c.encoder_width, c.style_width, gen), in_width(latent_width) {
        for (std::size_t i = 0; i < c.encoder_blocks; ++i) blocks.emplace_back(c.encoder_width, 2 * c.encoder_width, gen);
    }

    void collect(const std::string& prefix, nn::param_list& out) {
        input.collect(prefix + ".input", out);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
        norm.collect(prefix + ".norm", out);
        output.collect(prefix + ".output", out);
    }

    // Rows of frames (N, J*D), segment offsets per reference -> (B, D_s)
    var encode_rows(const var& rows, const std::vector<std::size_t>& offsets) const {
        require(rows.value().rank() == 2 && rows.dim(1) == in_width, errc::shape_mismatch,
                "encode_style: latent width " + (rows.value().rank() == 2 ? std::to_string(rows.dim(1)) : shape_str(rows.shape())) +
                    " does not match trained encoder width " + std::to_string(in_width));
        auto h = input(rows);
        for (const auto& b : blocks) h = b(h);
        return segment_mean(output(norm(h)), offsets);
    }

    // z0 (B, T, J, D) equal-length batch -> (B, D_s)
    var operator()(const var& z0) const {
        require(z0.value().rank() == 4, errc::shape_mismatch, "encode_style: expected (B, T, J, D), got " + shape_str(z0.shape()));
        const std::size_t b = z0.dim(0), t = z0.dim(1), w = z0.dim(2) * z0.dim(3);
        require(w == in_width, errc::shape_mismatch,
                "encode_style: latent width " + std::to_string(w) + " does not match trained encoder width " +
                    std::to_string(in_width));
        std::vector<std::size_t> offsets(b + 1);
        for (std::size_t i = 0; i <= b; ++i) offsets[i] = i * t;
        return encode_rows(reshape(z0, {b * t, w}), offsets);
    }
};

// Shared trunk then per-FiLM-layer heads. A-heads random, B-heads zero.
struct hyper_network {
    nn::linear trunk1, trunk2;
    std::vector<nn::linear> a_heads, b_heads;
    std::size_t rank = 4;
    double alpha = 4.0;
    std::size_t time_width = 0, film_width = 0;

    hyper_network() = default;
    hyper_network(std::size_t layers, std::size_t film_out, std::size_t d_e, const adapter_config& c, std::mt19937_64& gen)
        : trunk1(c.style_width, c.trunk_width, gen), trunk2(c.trunk_width, c.trunk_width, gen), rank(c.rank),
          alpha(c.alpha), time_width(d_e), film_width(film_out) {
        require(c.rank < std::min(film_out, d_e), errc::invalid_argument, "LoRA rank must be below both FiLM widths");
        for (std::size_t l = 0; l < layers; ++l) {
            a_heads.emplace_back(c.trunk_width, c.rank * d_e, gen);
            b_heads.push_back(nn::linear::zeros(c.trunk_width, film_out * c.rank));
        }
    }

    void collect(const std::string& prefix, nn::param_list& out) {
        trunk1.collect(prefix + ".trunk1", out);
        trunk2.collect(prefix + ".trunk2", out);
        for (std::size_t l = 0; l < a_heads.size(); ++l) {
            a_heads[l].collect(prefix + ".a_head" + std::to_string(l), out);
            b_heads[l].collect(prefix + ".b_head" + std::to_string(l), out);
        }
    }

    lora_factors operator()(const var& s) const {
        require(s.value().rank() == 2 && s.dim(1) == trunk1.in_features(), errc::shape_mismatch,
                "hyper_lora: style embedding " + shape_str(s.shape()) + " does not have width " +
                    std::to_string(trunk1.in_features()));
        const std::size_t b = s.dim(0);
        auto h = silu(trunk2(silu(trunk1(s))));
        lora_factors f;
        f.alpha = alpha;
        f.rank = rank;
        for (std::size_t l = 0; l < a_heads.size(); ++l) {
            f.a.push_back(reshape(a_heads[l](h), {b, rank, time_width}));
            f.b.push_back(reshape(b_heads[l](h), {b, film_width, rank}));
        }
        return f;
    }
};

struct style_adapter {
    adapter_config cfg;
    style_encoder encoder;
    hyper_network hyper;

    style_adapter() = default;
    style_adapter(const denoiser& net, std::size_t latent_width, const adapter_config& c, std::uint64_t seed) : cfg(c) {
        cfg.validate();
        auto g1 = make_rng(seed, "style-encoder-init");
        auto g2 = make_rng(seed, "hypernetwork-init");
        encoder = style_encoder(latent_width, c, g1);
        hyper = hyper_network(net.film_layers(), 2 * net.cfg.hidden, net.cfg.time_width, c, g2);
    }

    nn::param_list parameters() {
        nn::param_list p;
        encoder.collect("style_encoder", p);
        hyper.collect("hypernetwork", p);
        return p;
    }
};

// W'_l = W_l + (alpha/r) B_l(s) A_l(s) for every FiLM layer.
inline adapted_films precompute_adapted_films(const lora_factors& f, const denoiser& net) {
    require(f.layers() == net.film_layers(), errc::shape_mismatch, "factor set layer count differs from backbone");
    adapted_films out;
    for (std::size_t l = 0; l < f.layers(); ++l) {
        out.weights.push_back(adapted_weight(net.blocks[l].film, f.a[l], f.b[l], f.alpha, f.rank));
    }
    return out;
}

// Reference latents for a list of sequences of possibly different lengths.
// Frames beyond a multiple of the token group are dropped.
struct reference_rows {
    var rows;                          // (N, J*D)
    std::vector<std::size_t> offsets;  // B + 1
};

inline reference_rows encode_references(const motion_vae& vae, const std::vector<const motion::motion_sequence*>& refs) {
    no_grad_guard ng;
    const std::size_t g = vae.cfg.frames_per_token, w = vae.latent_width();
    std::vector<double> rows;
    reference_rows out;
    out.offsets.push_back(0);
    for (const auto* m : refs) {
        const std::size_t len = (m->length() / g) * g;
        require(len >= g, errc::invalid_argument, "reference motion shorter than one latent token");
        auto c = motion::crop(*m, 0, len);
        auto z = vae.encode(var::constant(c.frames.reshaped({1, len, motion::num_features}))).mean.value();
        rows.insert(rows.end(), z.data().begin(), z.data().end());
        out.offsets.push_back(out.offsets.back() + len / g);
    }
    out.rows = var::constant(tensor({out.offsets.back(), w}, std::move(rows)));
    return out;
}

}  // namespace hlm
