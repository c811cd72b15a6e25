// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hlm/motion.hpp"
#include "hlm/nn.hpp"
#include "hlm/schedule.hpp"

namespace hlm {

// Per-channel fixed affine x * s + o over the trailing axis.
inline var channel_affine(const var& x, const tensor& s, const tensor& o) {
    const std::size_t c = s.size();
    require(!x.shape().empty() && x.shape().back() == c, errc::shape_mismatch,
            "channel_affine: trailing width of " + shape_str(x.shape()) + " is not " + std::to_string(c));
    auto flat = reshape(x, {x.size() / c, c});
    return reshape(modulate(flat, var::constant(s), var::constant(o)), x.shape());
}

// ---------------------------------------------------------------------------
// Motion autoencoder: groups of frames -> (J, D) latent tokens per group
// ---------------------------------------------------------------------------

struct vae_config {
    std::size_t frames_per_token = 4;
    std::size_t hidden = 128;
    std::size_t latent_joints = 4;    // J
    std::size_t latent_channels = 8;  // D
    double kl_weight = 1e-3;
    double fps = 20.0;  // used to integrate decoded root velocity

    void validate() const {
        require(fps > 0.0, errc::invalid_argument, "vae fps must be positive");
        require(frames_per_token >= 1 && hidden >= 1 && latent_joints >= 1 && latent_channels >= 1,
                errc::invalid_argument, "vae config sizes must be positive");
        require(kl_weight >= 0.0, errc::invalid_argument, "kl_weight must be non-negative");
    }
};

struct vae_encoding {
    var mean;     // (B, T_lat, J, D) standardized latent units
    var log_var;  // posterior log-variance, raw units
    var z0;       // mean when inferring, reparameterized sample when training
};

// KL(N(mu, exp(lv)) || N(0, 1)) averaged over elements
inline var gaussian_kl(const var& mu, const var& log_var) {
    auto t = sub(add(square(mu), exp(log_var)), add_scalar(log_var, 1.0));
    return scale(mean_all(t), 0.5);
}

struct motion_vae {
    vae_config cfg;
    nn::linear enc1, enc2, enc_out, dec1, dec2, dec_out;
    // fixed statistics stored with the weights, never optimized
    var feature_mean, feature_std;   // (F)
    var latent_shift, latent_scale;  // (J*D)

    motion_vae() = default;
    motion_vae(const vae_config& c, std::mt19937_64& gen) : cfg(c) {
        cfg.validate();
        const std::size_t in = cfg.frames_per_token * motion::num_features;
        const std::size_t lat = latent_width();
        enc1 = nn::linear(in, cfg.hidden, gen);
        enc2 = nn::linear(cfg.hidden, cfg.hidden, gen);
        enc_out = nn::linear(cfg.hidden, 2 * lat, gen, 0.5);
        dec1 = nn::linear(lat, cfg.hidden, gen);
        dec2 = nn::linear(cfg.hidden, cfg.hidden, gen);
        dec_out = nn::linear(cfg.hidden, in, gen, 0.5);
        feature_mean = var::constant(tensor({motion::num_features}));
        feature_std = var::constant(tensor({motion::num_features}, 1.0));
        latent_shift = var::constant(tensor({lat}));
        latent_scale = var::constant(tensor({lat}, 1.0));
    }

    std::size_t latent_width() const { return cfg.latent_joints * cfg.latent_channels; }

    void collect(const std::string& prefix, nn::param_list& out) {
        enc1.collect(prefix + ".enc1", out);
        enc2.collect(prefix + ".enc2", out);
        enc_out.collect(prefix + ".enc_out", out);
        dec1.collect(prefix + ".dec1", out);
        dec2.collect(prefix + ".dec2", out);
        dec_out.collect(prefix + ".dec_out", out);
    }
    void collect_buffers(const std::string& prefix, nn::param_list& out) {
        out.push_back({prefix + ".feature_mean", &feature_mean});
        out.push_back({prefix + ".feature_std", &feature_std});
        out.push_back({prefix + ".latent_shift", &latent_shift});
        out.push_back({prefix + ".latent_scale", &latent_scale});
    }

    // (B, T, F) raw -> (B, T/g, g*F) normalized
    var group_frames(const var& frames) const {
        require(frames.value().rank() == 3 && frames.dim(2) == motion::num_features, errc::shape_mismatch,
                "vae: expected frames (B, T, " + std::to_string(motion::num_features) + "), got " +
                    shape_str(frames.shape()));
        const std::size_t b = frames.dim(0), t = frames.dim(1), g = cfg.frames_per_token;
        require(t >= g && t % g == 0, errc::shape_mismatch,
                "vae: frame count " + std::to_string(t) + " must be a positive multiple of " + std::to_string(g));
        tensor s(feature_std.shape()), o(feature_std.shape());
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = 1.0 / feature_std.value()[i];
            o[i] = -feature_mean.value()[i] * s[i];
        }
        return reshape(channel_affine(frames, s, o), {b, t / g, g * motion::num_features});
    }

    // Posterior mean in raw (unstandardized) units, (B, T_lat, J*D), plus log-variance.
    std::pair<var, var> posterior(const var& frames) const {
        auto x = group_frames(frames);
        const std::size_t lat = latent_width();
        auto h = silu(enc2(silu(enc1(x))));
        auto stats = split(enc_out(h), 2, {lat, lat});
        return {stats[0], stats[1]};
    }

    vae_encoding encode(const var& frames, std::mt19937_64* sample_gen = nullptr) const {
        auto [mu_raw, lv] = posterior(frames);
        const shape_t ls{mu_raw.dim(0), mu_raw.dim(1), cfg.latent_joints, cfg.latent_channels};
        tensor s(latent_scale.shape()), o(latent_scale.shape());
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = 1.0 / latent_scale.value()[i];
            o[i] = -latent_shift.value()[i] * s[i];
        }
        vae_encoding out;
        out.log_var = reshape(lv, ls);
        out.mean = reshape(channel_affine(mu_raw, s, o), ls);
        out.z0 = out.mean;
        if (sample_gen) {
            auto eps = var::constant(tensor::randn(mu_raw.shape(), *sample_gen));
            auto raw = add(mu_raw, mul(exp(scale(lv, 0.5)), eps));
            out.z0 = reshape(channel_affine(raw, s, o), ls);
        }
        return out;
    }

    // Raw-unit latent (B, T_lat, J*D) -> frames (B, T_lat*g, F)
    var decode_raw(const var& raw) const {
        const std::size_t b = raw.dim(0), tl = raw.dim(1), g = cfg.frames_per_token;
        auto y = dec_out(silu(dec2(silu(dec1(raw)))));
        y = reshape(y, {b, tl * g, motion::num_features});
        return channel_affine(y, feature_std.value(), feature_mean.value());
    }

    // Standardized latents (B, T_lat, J, D) -> frames (B, T_lat*g, F)
    var decode(const var& z) const {
        require(z.value().rank() == 4 && z.dim(2) == cfg.latent_joints && z.dim(3) == cfg.latent_channels,
                errc::shape_mismatch,
                "vae decode: expected latents (B, T, " + std::to_string(cfg.latent_joints) + ", " +
                    std::to_string(cfg.latent_channels) + "), got " + shape_str(z.shape()));
        auto flat = reshape(z, {z.dim(0), z.dim(1), latent_width()});
        return integrate_root(decode_raw(channel_affine(flat, latent_scale.value(), latent_shift.value())));
    }

    // Decoded absolute root positions drift; rebuild them as the running sum
    // of the decoded root velocity, starting at the origin.
    var integrate_root(const var& frames) const {
        const std::size_t b = frames.dim(0), t = frames.dim(1);
        tensor lower({t, t});
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t k = 0; k < i; ++k) lower[i * t + k] = 1.0 / cfg.fps;
        auto vel = slice(frames, 2, motion::root_vel, 2);
        auto rows = reshape(permute(vel, {0, 2, 1}), {2 * b, t});
        auto pos = batched_affine(rows, var::constant(std::move(lower)), var::constant(tensor({t})));
        pos = permute(reshape(pos, {b, 2, t}), {0, 2, 1});
        return concat({pos, slice(frames, 2, 2, motion::root_vel - 2), vel}, 2);
    }
};

// ---------------------------------------------------------------------------
// FiLM and low-rank factors
// ---------------------------------------------------------------------------

// Per-layer low-rank factors for a batch: A (B, r, D_e), B (B, 2*D_h, r).
struct lora_factors {
    std::vector<var> a;
    std::vector<var> b;
    double alpha = 4.0;
    std::size_t rank = 4;

    double scale_factor() const { return alpha / static_cast<double>(rank); }
    std::size_t layers() const { return a.size(); }
};

// Materialized per-item FiLM weights W' = W + (alpha/r) B A, each (B, 2*D_h, D_e).
struct adapted_films {
    std::vector<var> weights;
};

struct film_generator {
    var weight;  // (2*D_h, D_e)
    var bias;    // (2*D_h)

    film_generator() = default;
    film_generator(std::size_t hidden, std::size_t time_width, std::mt19937_64& gen, double init_scale) {
        const double a = init_scale * std::sqrt(6.0 / static_cast<double>(2 * hidden + time_width));
        weight = var::parameter(tensor::uniform({2 * hidden, time_width}, gen, -a, a));
        bias = var::parameter(tensor({2 * hidden}));
    }
    std::size_t hidden() const { return bias.size() / 2; }
    std::size_t time_width() const { return weight.dim(1); }

    void collect(const std::string& prefix, nn::param_list& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

// split(W phi(e) + b), phi = SiLU. e is (B, D_e); returns (gamma0, beta0) each (B, D_h).
inline std::pair<var, var> film_generate(const var& e, const film_generator& g) {
    require(e.value().rank() == 2 && e.dim(1) == g.time_width(), errc::shape_mismatch,
            "film_generate: embedding " + shape_str(e.shape()) + " does not have width " + std::to_string(g.time_width()));
    auto out = batched_affine(silu(e), g.weight, g.bias);
    auto halves = split(out, 1, {g.hidden(), g.hidden()});
    return {halves[0], halves[1]};
}

// split((W + (alpha/r) B A) phi(e) + b) evaluated without materializing W'.
inline std::pair<var, var> apply_lora_film(const var& e, const film_generator& g, const var& a, const var& b,
                                           double alpha, std::size_t rank) {
    require(rank >= 1, errc::invalid_argument, "apply_lora_film: rank must be >= 1");
    const std::size_t batch = e.dim(0), o = 2 * g.hidden(), k = g.time_width();
    require(a.shape() == shape_t({batch, rank, k}), errc::shape_mismatch,
            "apply_lora_film: A " + shape_str(a.shape()) + " expected " + shape_str({batch, rank, k}));
    require(b.shape() == shape_t({batch, o, rank}), errc::shape_mismatch,
            "apply_lora_film: B " + shape_str(b.shape()) + " expected " + shape_str({batch, o, rank}));
    auto phi = silu(e);
    auto base = batched_affine(phi, g.weight, g.bias);
    auto low = batched_affine(batched_affine(phi, a, var::constant(tensor({rank}))), b, var::constant(tensor({o})));
    auto out = add(base, scale(low, alpha / static_cast<double>(rank)));
    auto halves = split(out, 1, {g.hidden(), g.hidden()});
    return {halves[0], halves[1]};
}

// W' = W + (alpha/r) B A per item. Zero factors give W' == W bitwise.
inline var adapted_weight(const film_generator& g, const var& a, const var& b, double alpha, std::size_t rank) {
    const std::size_t batch = a.dim(0);
    auto delta = scale(bmm(b, a), alpha / static_cast<double>(rank));
    return add(expand_leading(g.weight, batch), delta);
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct denoiser_config {
    std::size_t blocks = 2;        // L
    std::size_t hidden = 32;       // D_h
    std::size_t heads = 2;
    std::size_t latent_joints = 4;     // J
    std::size_t latent_channels = 8;   // D
    std::size_t time_width = 32;       // D_e
    std::size_t text_tokens = 2;
    std::size_t num_contents = 5;      // text table has one extra null row
    std::size_t ff_mult = 2;
    double text_dropout = 0.1;

    void validate() const {
        require(blocks >= 1 && hidden >= 1 && heads >= 1 && latent_joints >= 1 && latent_channels >= 1 &&
                    time_width >= 2 && text_tokens >= 1 && num_contents >= 1 && ff_mult >= 1,
                errc::invalid_argument, "denoiser config sizes must be positive");
        require(hidden % heads == 0, errc::invalid_argument, "hidden width must divide into heads");
        require(time_width % 2 == 0, errc::invalid_argument, "time embedding width must be even");
        require(text_dropout >= 0.0 && text_dropout < 1.0, errc::invalid_argument, "text dropout must be in [0, 1)");
    }
    std::size_t null_token() const { return num_contents; }
};

// Which FiLM weights each denoise call uses.
struct film_mode {
    const lora_factors* lora = nullptr;
    const adapted_films* adapted = nullptr;
};

struct denoiser_block {
    nn::layer_norm_affine norm_t, norm_j, norm_x;
    nn::attention temporal, joint, cross;
    film_generator film;
    nn::linear fc1, fc2;

    denoiser_block() = default;
    denoiser_block(const denoiser_config& c, std::mt19937_64& gen)
        : norm_t(c.hidden), norm_j(c.hidden), norm_x(c.hidden), temporal(c.hidden, c.hidden, c.heads, gen),
          joint(c.hidden, c.hidden, c.heads, gen), cross(c.hidden, c.hidden, c.heads, gen),
          film(c.hidden, c.time_width, gen, 0.1), fc1(c.hidden, c.ff_mult * c.hidden, gen),
          fc2(c.ff_mult * c.hidden, c.hidden, gen, 0.5) {}

    void collect(const std::string& prefix, nn::param_list& out) {
        norm_t.collect(prefix + ".norm_t", out);
        norm_j.collect(prefix + ".norm_j", out);
        norm_x.collect(prefix + ".norm_x", out);
        temporal.collect(prefix + ".temporal", out);
        joint.collect(prefix + ".joint", out);
        cross.collect(prefix + ".cross", out);
        film.collect(prefix + ".film", out);
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

struct denoiser {
    denoiser_config cfg;
    nn::linear input_proj, time1, time2, output_proj;
    nn::layer_norm_affine output_norm;
    var joint_embed;  // (J, D_h)
    var text_table;   // (C + 1, text_tokens * D_h)
    std::vector<denoiser_block> blocks;

    denoiser() = default;
    denoiser(const denoiser_config& c, std::mt19937_64& gen) : cfg(c) {
        cfg.validate();
        input_proj = nn::linear(c.latent_channels, c.hidden, gen);
        time1 = nn::linear(c.time_width, c.time_width, gen);
        time2 = nn::linear(c.time_width, c.time_width, gen);
        output_norm = nn::layer_norm_affine(c.hidden);
        output_proj = nn::linear(c.hidden, c.latent_channels, gen, 0.5);
        joint_embed = var::parameter(tensor::randn({c.latent_joints, c.hidden}, gen, 0.5));
        text_table = var::parameter(tensor::randn({c.num_contents + 1, c.text_tokens * c.hidden}, gen, 0.5));
        for (std::size_t l = 0; l < c.blocks; ++l) blocks.emplace_back(c, gen);
    }

    std::size_t film_layers() const { return blocks.size(); }

    void collect(const std::string& prefix, nn::param_list& out) {
        input_proj.collect(prefix + ".input_proj", out);
        time1.collect(prefix + ".time1", out);
        time2.collect(prefix + ".time2", out);
        output_norm.collect(prefix + ".output_norm", out);
        output_proj.collect(prefix + ".output_proj", out);
        out.push_back({prefix + ".joint_embed", &joint_embed});
        out.push_back({prefix + ".text_table", &text_table});
        for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(prefix + ".block" + std::to_string(l), out);
    }

    // e_t: sinusoidal features, then a learned two-layer projection. (B, D_e)
    var time_embedding(const std::vector<std::size_t>& ts) const {
        tensor feats({ts.size(), cfg.time_width});
        for (std::size_t i = 0; i < ts.size(); ++i) {
            auto s = nn::sinusoidal(static_cast<double>(ts[i]), cfg.time_width);
            std::copy(s.begin(), s.end(), feats.data().begin() + static_cast<std::ptrdiff_t>(i * cfg.time_width));
        }
        return time2(silu(time1(var::constant(std::move(feats)))));
    }

    // z_t (B, T, J, D); ts and text ids per item; returns v_hat with z_t's shape.
    var operator()(const var& z_t, const std::vector<std::size_t>& ts, const std::vector<std::size_t>& text,
                   film_mode mode = {}) const {
        require(z_t.value().rank() == 4 && z_t.dim(2) == cfg.latent_joints && z_t.dim(3) == cfg.latent_channels,
                errc::shape_mismatch,
                "denoise: expected z_t (B, T, " + std::to_string(cfg.latent_joints) + ", " +
                    std::to_string(cfg.latent_channels) + "), got " + shape_str(z_t.shape()));
        const std::size_t b = z_t.dim(0), t = z_t.dim(1), j = cfg.latent_joints, h = cfg.hidden;
        require(ts.size() == b && text.size() == b, errc::shape_mismatch, "denoise: need one timestep and text id per item");
        for (auto c : text) {
            require(c <= cfg.null_token(), errc::invalid_argument, "denoise: text id " + std::to_string(c) + " out of range");
        }
        if (mode.lora) {
            require(mode.lora->layers() == blocks.size() && mode.lora->b.size() == blocks.size(), errc::shape_mismatch,
                    "denoise: factor set has " + std::to_string(mode.lora->layers()) + " layers, backbone has " +
                        std::to_string(blocks.size()) + " FiLM layers");
        }
        if (mode.adapted) {
            require(mode.adapted->weights.size() == blocks.size(), errc::shape_mismatch,
                    "denoise: adapted FiLM set has " + std::to_string(mode.adapted->weights.size()) +
                        " layers, backbone has " + std::to_string(blocks.size()));
        }

        // tokens (B, T*J, D_h) in time-major order plus temporal and joint position codes
        tensor pos({t, j, h});
        for (std::size_t ti = 0; ti < t; ++ti) {
            auto s = nn::sinusoidal(static_cast<double>(ti), h, 100.0);
            for (std::size_t ji = 0; ji < j; ++ji) std::copy(s.begin(), s.end(), pos.data().begin() + static_cast<std::ptrdiff_t>((ti * j + ji) * h));
        }
        auto pos_v = add(var::constant(std::move(pos)), expand_leading(joint_embed, t));
        auto x = reshape(input_proj(z_t), {b, t * j, h});
        x = add(x, expand_leading(reshape(pos_v, {t * j, h}), b));

        auto e = time_embedding(ts);
        auto ctx = reshape(take_rows(text_table, text), {b, cfg.text_tokens, h});

        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const auto& blk = blocks[l];
            // temporal attention over T per (item, joint)
            auto ht = permute(reshape(blk.norm_t(x), {b, t, j, h}), {0, 2, 1, 3});
            ht = reshape(ht, {b * j, t, h});
            auto at = reshape(permute(reshape(blk.temporal(ht, ht), {b, j, t, h}), {0, 2, 1, 3}), {b, t * j, h});
            x = add(x, at);
            // joint attention over J per (item, frame)
            auto hj = reshape(blk.norm_j(x), {b * t, j, h});
            x = add(x, reshape(blk.joint(hj, hj), {b, t * j, h}));
            // text cross-attention
            x = add(x, blk.cross(blk.norm_x(x), ctx));
            // feedforward on the FiLM-modulated input, (1 + gamma0) convention
            std::pair<var, var> gb;
            if (mode.adapted) {
                gb = film_from_weight(e, mode.adapted->weights[l], blk.film);
            } else if (mode.lora) {
                gb = apply_lora_film(e, blk.film, mode.lora->a[l], mode.lora->b[l], mode.lora->alpha, mode.lora->rank);
            } else {
                gb = film_generate(e, blk.film);
            }
            auto m = modulate(layer_norm(x), add_scalar(gb.first, 1.0), gb.second);
            x = add(x, blk.fc2(silu(blk.fc1(m))));
        }
        auto out = output_proj(output_norm(x));
        return reshape(out, {b, t, j, cfg.latent_channels});
    }

    static std::pair<var, var> film_from_weight(const var& e, const var& weight, const film_generator& g) {
        auto out = batched_affine(silu(e), weight, g.bias);
        auto halves = split(out, 1, {g.hidden(), g.hidden()});
        return {halves[0], halves[1]};
    }
};

// ---------------------------------------------------------------------------
// Combined backbone and pretraining
// ---------------------------------------------------------------------------

struct backbone {
    motion_vae vae;
    denoiser net;
    diffusion::noise_schedule sched;
    std::size_t window = 48;  // training window in frames

    backbone() = default;
    backbone(const vae_config& vc, const denoiser_config& dc, std::size_t diffusion_steps,
             diffusion::schedule_kind kind, std::uint64_t seed) {
        require(vc.latent_joints == dc.latent_joints && vc.latent_channels == dc.latent_channels,
                errc::invalid_argument, "vae and denoiser latent shapes differ");
        auto g1 = make_rng(seed, "vae-init");
        auto g2 = make_rng(seed, "denoiser-init");
        vae = motion_vae(vc, g1);
        net = denoiser(dc, g2);
        sched = diffusion::make_schedule(diffusion_steps, kind);
    }

    nn::param_list parameters() {
        nn::param_list p;
        vae.collect("vae", p);
        net.collect("denoiser", p);
        return p;
    }
    nn::param_list state() {
        auto p = parameters();
        vae.collect_buffers("vae", p);
        return p;
    }
    void freeze() {
        auto p = parameters();
        nn::set_trainable(p, false);
    }
};

struct pretrain_config {
    std::size_t vae_steps = 1500;
    std::size_t denoiser_steps = 3000;
    std::size_t batch = 64;
    double vae_lr = 1e-3;
    double denoiser_lr = 1e-3;
    std::size_t steps_per_epoch = 50;
    std::uint64_t seed = 0;
};

struct pretrain_report {
    std::vector<double> vae_epoch_loss;
    std::vector<double> denoiser_epoch_loss;
    std::size_t text_conditions = 0;
    std::size_t null_conditions = 0;
    double reconstruction_mse = 0.0;  // normalized units, held-out split
};

// Random root-centred windows of `len` frames stacked into (B, len, F).
inline tensor sample_windows(const std::vector<const motion::motion_sequence*>& pool, std::size_t count, std::size_t len,
                             std::mt19937_64& gen, std::vector<std::size_t>* picked = nullptr) {
    require(!pool.empty(), errc::invalid_argument, "no sequences to draw windows from");
    tensor out({count, len, motion::num_features});
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t k = pick(gen);
        const auto& m = *pool[k];
        require(m.length() >= len, errc::invalid_argument, "sequence shorter than the training window");
        std::uniform_int_distribution<std::size_t> start(0, m.length() - len);
        auto w = motion::crop(m, start(gen), len);
        std::copy(w.frames.data().begin(), w.frames.data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * len * motion::num_features));
        if (picked) picked->push_back(k);
    }
    return out;
}

inline std::vector<const motion::motion_sequence*> split_pool(const motion::dataset& ds, motion::split_kind split) {
    std::vector<const motion::motion_sequence*> pool;
    for (const auto& m : ds.sequences) {
        if (m.split == split) pool.push_back(&m);
    }
    return pool;
}

inline double require_finite_loss(double v, const char* stage, std::size_t step) {
    require(std::isfinite(v), errc::divergence,
            std::string(stage) + " diverged: non-finite loss at step " + std::to_string(step));
    return v;
}

inline pretrain_report pretrain_backbone(backbone& bb, const motion::dataset& ds, const pretrain_config& pc,
                                         const std::function<void(const std::string&, std::size_t, double)>& log = {}) {
    require(pc.batch >= 1 && pc.steps_per_epoch >= 1, errc::invalid_argument, "pretrain: batch and epoch sizes must be positive");
    auto train = split_pool(ds, motion::split_kind::train);
    auto held = split_pool(ds, motion::split_kind::test);
    pretrain_report rep;

    // feature statistics from training frames
    {
        tensor mean({motion::num_features}), sq({motion::num_features});
        auto gen = make_rng(pc.seed, "feature-stats");
        auto w = sample_windows(train, 256, bb.window, gen);
        const std::size_t rows = w.size() / motion::num_features;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t f = 0; f < motion::num_features; ++f) {
                mean[f] += w[r * motion::num_features + f];
                sq[f] += w[r * motion::num_features + f] * w[r * motion::num_features + f];
            }
        }
        tensor sd({motion::num_features});
        for (std::size_t f = 0; f < motion::num_features; ++f) {
            mean[f] /= static_cast<double>(rows);
            sd[f] = std::sqrt(std::max(sq[f] / static_cast<double>(rows) - mean[f] * mean[f], 1e-6));
        }
        bb.vae.feature_mean = var::constant(mean);
        bb.vae.feature_std = var::constant(sd);
    }

    // autoencoder: reconstruction + KL
    {
        nn::param_list p;
        bb.vae.collect("vae", p);
        nn::adam opt(p, {.lr = pc.vae_lr});
        auto gen = make_rng(pc.seed, "vae-train");
        double acc = 0.0;
        for (std::size_t step = 1; step <= pc.vae_steps; ++step) {
            auto frames = var::constant(sample_windows(train, pc.batch, bb.window, gen));
            auto [mu_raw, lv] = bb.vae.posterior(frames);
            auto eps = var::constant(tensor::randn(mu_raw.shape(), gen));
            auto z = add(mu_raw, mul(exp(scale(lv, 0.5)), eps));
            auto recon = bb.vae.group_frames(bb.vae.decode_raw(z));
            auto target = bb.vae.group_frames(frames);
            auto loss = add(mse(recon, target), scale(gaussian_kl(mu_raw, lv), bb.vae.cfg.kl_weight));
            acc += require_finite_loss(loss.item(), "vae pretraining", step);
            opt.zero_grad();
            backward(loss);
            opt.step();
            if (step % pc.steps_per_epoch == 0) {
                rep.vae_epoch_loss.push_back(acc / static_cast<double>(pc.steps_per_epoch));
                if (log) log("vae", rep.vae_epoch_loss.size(), rep.vae_epoch_loss.back());
                acc = 0.0;
            }
        }
    }

    // latent standardization from posterior means
    {
        no_grad_guard ng;
        auto gen = make_rng(pc.seed, "latent-stats");
        auto frames = var::constant(sample_windows(train, 256, bb.window, gen));
        auto mu = bb.vae.posterior(frames).first.value();
        const std::size_t lat = bb.vae.latent_width(), rows = mu.size() / lat;
        tensor mean({lat}), sd({lat});
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < lat; ++c) mean[c] += mu[r * lat + c];
        }
        for (std::size_t c = 0; c < lat; ++c) mean[c] /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < lat; ++c) sd[c] += (mu[r * lat + c] - mean[c]) * (mu[r * lat + c] - mean[c]);
        }
        for (std::size_t c = 0; c < lat; ++c) sd[c] = std::sqrt(std::max(sd[c] / static_cast<double>(rows), 1e-8));
        bb.vae.latent_shift = var::constant(mean);
        bb.vae.latent_scale = var::constant(sd);
    }

    // held-out reconstruction error in normalized units
    if (!held.empty()) {
        no_grad_guard ng;
        auto gen = make_rng(pc.seed, "vae-heldout");
        auto frames = var::constant(sample_windows(held, 128, bb.window, gen));
        auto recon = bb.vae.decode(bb.vae.encode(frames).mean);
        rep.reconstruction_mse = mse(bb.vae.group_frames(recon), bb.vae.group_frames(frames)).item();
    }

    // denoiser: velocity regression with text dropout
    {
        nn::param_list vp;
        bb.vae.collect("vae", vp);
        nn::set_trainable(vp, false);
        nn::param_list p;
        bb.net.collect("denoiser", p);
        nn::adam opt(p, {.lr = pc.denoiser_lr});
        auto gen = make_rng(pc.seed, "denoiser-train");
        std::uniform_int_distribution<std::size_t> tdist(1, bb.sched.num_steps);
        std::bernoulli_distribution drop(bb.net.cfg.text_dropout);
        double acc = 0.0;
        for (std::size_t step = 1; step <= pc.denoiser_steps; ++step) {
            std::vector<std::size_t> picked;
            auto frames = sample_windows(train, pc.batch, bb.window, gen, &picked);
            tensor z0;
            {
                no_grad_guard ng;
                z0 = bb.vae.encode(var::constant(frames)).mean.value();
            }
            std::vector<std::size_t> ts(pc.batch), text(pc.batch);
            auto eps = tensor::randn(z0.shape(), gen);
            tensor zt(z0.shape()), vt(z0.shape());
            const std::size_t per = z0.size() / pc.batch;
            for (std::size_t i = 0; i < pc.batch; ++i) {
                ts[i] = tdist(gen);
                const bool null = drop(gen);
                text[i] = null ? bb.net.cfg.null_token() : train[picked[i]]->content_id;
                ++(null ? rep.null_conditions : rep.text_conditions);
                const double a = bb.sched.alpha(ts[i]), s = bb.sched.sigma(ts[i]);
                for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
                    zt[k] = a * z0[k] + s * eps[k];
                    vt[k] = a * eps[k] - s * z0[k];
                }
            }
            auto loss = mse(bb.net(var::constant(zt), ts, text), var::constant(vt));
            acc += require_finite_loss(loss.item(), "denoiser pretraining", step);
            opt.zero_grad();
            backward(loss);
            opt.step();
            if (step % pc.steps_per_epoch == 0) {
                rep.denoiser_epoch_loss.push_back(acc / static_cast<double>(pc.steps_per_epoch));
                if (log) log("denoiser", rep.denoiser_epoch_loss.size(), rep.denoiser_epoch_loss.back());
                acc = 0.0;
            }
        }
    }
    bb.freeze();
    return rep;
}

}  // namespace hlm
