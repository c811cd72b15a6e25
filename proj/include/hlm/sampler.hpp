// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hlm/adapter.hpp"

namespace hlm {

enum class backprop_mode { full, frozen_velocity };

inline backprop_mode parse_backprop_mode(std::string_view s) {
    if (s == "full") return backprop_mode::full;
    if (s == "frozen-velocity") return backprop_mode::frozen_velocity;
    throw error(errc::invalid_argument, "unknown backprop mode '" + std::string(s) + "'");
}
inline const char* backprop_mode_name(backprop_mode m) { return m == backprop_mode::full ? "full" : "frozen-velocity"; }

struct guidance_config {
    double w_text = 7.5;
    double w_style = 1.5;
    double lambda_style = 0.75;
    double eps_stab = 1e-8;
    backprop_mode backprop = backprop_mode::full;
    std::size_t guidance_t_min = 0;  // style guidance active for t in [min, max]
    std::size_t guidance_t_max = static_cast<std::size_t>(-1);
    std::size_t steps = 50;

    void validate() const {
        require(std::isfinite(w_text) && std::isfinite(w_style) && std::isfinite(lambda_style), errc::invalid_argument,
                "guidance weights must be finite");
        require(eps_stab > 0.0, errc::invalid_argument, "eps_stab must be positive");
        require(steps >= 1, errc::invalid_argument, "need at least one sampling step");
    }
};

// v = v_u + w_t (v_t - v_u) + w_s (v_s - v_t), evaluated as
// (1 - w_t) v_u + (w_t - w_s) v_t + w_s v_s with zero-weight terms skipped,
// so (1, 0) returns v_t exactly and w_s = 0 never reads v_s.
inline tensor cfg_combine(const tensor& v_uncond, const tensor& v_text, const tensor& v_style, double w_text, double w_style) {
    require_same_shape(v_uncond, v_text, "cfg_combine");
    require_same_shape(v_text, v_style, "cfg_combine");
    const double cu = 1.0 - w_text, ct = w_text - w_style, cs = w_style;
    tensor out(v_text.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double acc = 0.0;
        bool first = true;
        auto term = [&](double c, double x) {
            if (c == 0.0) return;
            const double v = c == 1.0 ? x : c * x;
            acc = first ? v : acc + v;
            first = false;
        };
        term(cu, v_uncond[i]);
        term(ct, v_text[i]);
        term(cs, v_style[i]);
        out[i] = acc;
    }
    return out;
}

// The same combination on autograd values (used when guidance needs the graph).
inline var cfg_combine(const var& v_uncond, const var& v_text, const var& v_style, double w_text, double w_style) {
    require_same_shape(v_uncond.value(), v_text.value(), "cfg_combine");
    require_same_shape(v_text.value(), v_style.value(), "cfg_combine");
    const double cu = 1.0 - w_text, ct = w_text - w_style, cs = w_style;
    var acc;
    auto term = [&](double c, const var& x) {
        if (c == 0.0) return;
        auto v = c == 1.0 ? x : scale(x, c);
        acc = acc.defined() ? add(acc, v) : v;
    };
    term(cu, v_uncond);
    term(ct, v_text);
    term(cs, v_style);
    return acc.defined() ? acc : scale(v_text, 0.0);
}

// z - lambda g / (||g|| + eps) per item (leading axis).
inline tensor normalized_step(const tensor& z, const tensor& g, double lambda, double eps) {
    require_same_shape(z, g, "normalized_step");
    const std::size_t b = z.dim(0), per = z.size() / b;
    tensor out = z;
    for (std::size_t i = 0; i < b; ++i) {
        double nrm = 0.0;
        for (std::size_t k = i * per; k < (i + 1) * per; ++k) nrm += g[k] * g[k];
        const double c = lambda / (std::sqrt(nrm) + eps);
        for (std::size_t k = i * per; k < (i + 1) * per; ++k) out[k] = z[k] - c * g[k];
    }
    return out;
}

struct guidance_result {
    tensor z;
    std::vector<double> loss;  // per item
    bool skipped = false;
    std::string diagnostic;
};

// One style-guidance update. velocity_fn maps z_t to the combined velocity;
// in frozen-velocity mode v_hat is treated as a constant.
inline guidance_result style_guidance_step(const tensor& z_t, const std::function<var(const var&)>& velocity_fn,
                                           const tensor& v_hat, const tensor& s_ref, std::size_t t,
                                           const guidance_config& cfg, const style_encoder& enc,
                                           const diffusion::noise_schedule& sched) {
    diffusion::require_timestep(sched, t);
    guidance_result r;
    r.z = z_t;
    if (cfg.lambda_style == 0.0) return r;
    auto z = var::parameter(z_t);
    var v = cfg.backprop == backprop_mode::full ? velocity_fn(z) : var::constant(v_hat);
    auto z0 = sub(scale(z, sched.alpha(t)), scale(v, sched.sigma(t)));
    auto s = enc(z0);
    require(s.shape() == s_ref.shape(), errc::shape_mismatch,
            "style guidance: reference embeddings " + shape_str(s_ref.shape()) + " vs predicted " + shape_str(s.shape()));
    auto diff = sub(s, var::constant(s_ref));
    auto per_item = mean(square(diff), {1});
    for (std::size_t i = 0; i < per_item.size(); ++i) r.loss.push_back(per_item.value()[i] * static_cast<double>(s.dim(1)));
    auto loss = sum(square(diff));
    auto g = grad(loss, {z})[0];
    if (!g || !g->all_finite()) {
        r.skipped = true;
        r.diagnostic = "non-finite style gradient at t=" + std::to_string(t) + "; step skipped";
        return r;
    }
    r.z = normalized_step(z_t, *g, cfg.lambda_style, cfg.eps_stab);
    return r;
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

enum class constraint_kind { trajectory, keyframe };

struct constraint_spec {
    constraint_kind kind = constraint_kind::trajectory;
    tensor root_path;                                  // (T, 2) target root ground positions
    std::vector<std::pair<std::size_t, tensor>> keys;  // (frame, (F) target features; joints 1..8 and root)
    double weight = 0.0;                               // normalized step size per sampling step
    std::size_t iterations = 1;                        // gradient updates per sampling step
};

inline void validate_constraint(const constraint_spec& c, std::size_t frames) {
    if (c.kind == constraint_kind::trajectory) {
        require(c.root_path.shape() == shape_t({frames, 2}), errc::invalid_argument,
                "trajectory constraint must be (" + std::to_string(frames) + ", 2), got " + shape_str(c.root_path.shape()));
    } else {
        require(!c.keys.empty(), errc::invalid_argument, "keyframe constraint needs at least one key");
        for (const auto& [f, pose] : c.keys) {
            require(f < frames, errc::invalid_argument,
                    "keyframe " + std::to_string(f) + " outside sequence of " + std::to_string(frames) + " frames");
            require(pose.size() == motion::num_features, errc::shape_mismatch, "keyframe pose must have F features");
        }
    }
    require(c.weight >= 0.0 && std::isfinite(c.weight), errc::invalid_argument, "constraint weight must be finite and >= 0");
}

// Constraint loss on decoded frames (B, T, F); same constraint for every item.
inline var constraint_loss(const var& frames, const constraint_spec& c) {
    const std::size_t b = frames.dim(0), t = frames.dim(1), f = motion::num_features;
    tensor w(frames.shape()), target(frames.shape());
    if (c.kind == constraint_kind::trajectory) {
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t k = 0; k < t; ++k) {
                for (std::size_t d = 0; d < 2; ++d) {
                    w[(i * t + k) * f + d] = 1.0 / static_cast<double>(t);
                    target[(i * t + k) * f + d] = c.root_path[k * 2 + d];
                }
            }
        }
    } else {
        for (std::size_t i = 0; i < b; ++i) {
            for (const auto& [k, pose] : c.keys) {
                for (std::size_t d = 0; d < motion::root_vel; ++d) {
                    w[(i * t + k) * f + d] = 1.0 / static_cast<double>(c.keys.size());
                    target[(i * t + k) * f + d] = pose[d];
                }
            }
        }
    }
    auto diff = sub(frames, var::constant(std::move(target)));
    return sum(mul(square(diff), var::constant(std::move(w))));
}

// ---------------------------------------------------------------------------
// Sampling loop
// ---------------------------------------------------------------------------

struct sample_trace {
    std::vector<std::size_t> timesteps;
    std::vector<double> style_loss;       // batch mean per step (0 when inactive)
    std::vector<double> constraint_loss;  // batch mean per step
    std::vector<std::string> diagnostics;
};

struct sampler {
    const backbone* bb = nullptr;
    const style_adapter* ad = nullptr;  // null: backbone only

    // Style embeddings for reference motions, (B, D_s).
    tensor style_embeddings(const std::vector<const motion::motion_sequence*>& refs) const {
        require(ad != nullptr, errc::missing_checkpoint, "style references need an adapter checkpoint");
        no_grad_guard ng;
        auto r = encode_references(bb->vae, refs);
        return ad->encoder.encode_rows(r.rows, r.offsets).value();
    }

    // Reverse diffusion from z at t_start down to 0.
    tensor reverse(tensor z, std::size_t t_start, const std::vector<std::size_t>& text, const std::optional<tensor>& s_ref,
                   const guidance_config& g, const constraint_spec* constraint = nullptr, sample_trace* trace = nullptr) const {
        g.validate();
        require(bb != nullptr, errc::missing_checkpoint, "sampler needs a backbone checkpoint");
        diffusion::require_timestep(bb->sched, t_start);
        const std::size_t b = z.dim(0);
        require(text.size() == b, errc::shape_mismatch, "one prompt per trajectory required");
        for (auto c : text) {
            require(c < bb->net.cfg.num_contents, errc::invalid_argument, "invalid prompt id " + std::to_string(c));
        }
        const bool styled = ad != nullptr && s_ref.has_value();
        if (s_ref) require(s_ref->dim(0) == b, errc::shape_mismatch, "one style reference per trajectory required");
        if (constraint) validate_constraint(*constraint, z.dim(1) * bb->vae.cfg.frames_per_token);
        if (t_start == 0) return z;
        std::optional<adapted_films> films;
        if (styled) {
            no_grad_guard ng;
            auto f = ad->hyper(var::constant(*s_ref));
            films = precompute_adapted_films(f, bb->net);
        }
        const std::vector<std::size_t> null_text(b, bb->net.cfg.null_token());
        auto velocity = [&](const var& zv, std::size_t t) {
            const std::vector<std::size_t> ts(b, t);
            var vu = g.w_text == 1.0 && g.w_style == 0.0 ? var() : bb->net(zv, ts, null_text);
            var vt = bb->net(zv, ts, text);
            var vs = styled && g.w_style != 0.0 ? bb->net(zv, ts, text, {.adapted = &*films}) : vt;
            if (!vu.defined()) vu = vt;
            return cfg_combine(vu, vt, vs, g.w_text, g.w_style);
        };
        const auto steps = diffusion::sampling_timesteps(t_start, g.steps);
        for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
            const std::size_t t = steps[i], t_prev = steps[i + 1];
            if (t == t_prev) continue;
            tensor v;
            {
                no_grad_guard ng;
                v = velocity(var::constant(z), t).value();
            }
            double sl = 0.0, cl = 0.0;
            if (styled && g.lambda_style != 0.0 && t >= g.guidance_t_min && t <= g.guidance_t_max) {
                auto fn = [&](const var& zv) { return velocity(zv, t); };
                auto r = style_guidance_step(z, fn, v, *s_ref, t, g, ad->encoder, bb->sched);
                if (r.skipped && trace) trace->diagnostics.push_back(r.diagnostic);
                for (double l : r.loss) sl += l / static_cast<double>(b);
                z = std::move(r.z);
            }
            if (constraint && constraint->weight > 0.0) {
                for (std::size_t it = 0; it < constraint->iterations; ++it) {
                    auto zv = var::parameter(z);
                    var vv = g.backprop == backprop_mode::full ? velocity(zv, t) : var::constant(v);
                    auto z0 = sub(scale(zv, bb->sched.alpha(t)), scale(vv, bb->sched.sigma(t)));
                    auto loss = constraint_loss(bb->vae.decode(z0), *constraint);
                    cl = loss.item() / static_cast<double>(b);
                    auto gz = grad(loss, {zv})[0];
                    if (!gz || !gz->all_finite()) {
                        if (trace) trace->diagnostics.push_back("non-finite constraint gradient at t=" + std::to_string(t));
                        break;
                    }
                    z = normalized_step(z, *gz, constraint->weight, g.eps_stab);
                }
            }
            z = diffusion::ddim_step(z, v, t, t_prev, bb->sched);
            if (trace) {
                trace->timesteps.push_back(t);
                trace->style_loss.push_back(sl);
                trace->constraint_loss.push_back(cl);
            }
        }
        return z;
    }

    // Per-item seeded start noise so results do not depend on batch composition.
    tensor initial_noise(std::size_t batch, std::size_t frames, std::uint64_t seed) const {
        const std::size_t g = bb->vae.cfg.frames_per_token;
        require(frames >= g && frames % g == 0, errc::invalid_argument,
                "length must be a positive multiple of " + std::to_string(g) + " frames");
        const shape_t one{1, frames / g, bb->net.cfg.latent_joints, bb->net.cfg.latent_channels};
        tensor z({batch, one[1], one[2], one[3]});
        const std::size_t per = shape_numel(one);
        for (std::size_t i = 0; i < batch; ++i) {
            auto gen = make_rng(seed, "sample-noise", i);
            auto n = tensor::randn(one, gen);
            std::copy(n.data().begin(), n.data().end(), z.data().begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        return z;
    }

    tensor decode(const tensor& z) const {
        no_grad_guard ng;
        return bb->vae.decode(var::constant(z)).value();
    }

    // Full generation: returns frames (B, T, F).
    tensor sample(const std::vector<std::size_t>& prompts, const std::optional<tensor>& s_ref, std::size_t frames,
                  const guidance_config& g, std::uint64_t seed, const constraint_spec* constraint = nullptr,
                  sample_trace* trace = nullptr, tensor* latent = nullptr) const {
        require(bb != nullptr, errc::missing_checkpoint, "sampler needs a backbone checkpoint");
        auto z = reverse(initial_noise(prompts.size(), frames, seed), bb->sched.num_steps, prompts, s_ref, g, constraint, trace);
        if (latent) *latent = z;
        return decode(z);
    }

    // Deterministic DDIM inversion of clean latents to t_end with the
    // text-conditioned velocity (no style, no CFG).
    tensor invert(tensor z0, const std::vector<std::size_t>& text, std::size_t t_end, std::size_t steps) const {
        require(bb != nullptr, errc::missing_checkpoint, "sampler needs a backbone checkpoint");
        require(t_end <= bb->sched.num_steps, errc::invalid_argument,
                "invert_steps " + std::to_string(t_end) + " exceeds diffusion length " + std::to_string(bb->sched.num_steps));
        require(steps >= 1, errc::invalid_argument, "need at least one inversion step");
        auto ts = diffusion::sampling_timesteps(t_end, steps);
        std::reverse(ts.begin(), ts.end());
        no_grad_guard ng;
        for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
            if (ts[i] == ts[i + 1]) continue;
            const std::vector<std::size_t> tv(z0.dim(0), ts[i]);
            auto v = bb->net(var::constant(z0), tv, text).value();
            z0 = diffusion::ddim_invert_step(z0, v, ts[i], ts[i + 1], bb->sched);
        }
        return z0;
    }

    // Encode a source motion, invert to invert_t, then guided reverse with the target prompt and style.
    tensor transfer(const motion::motion_sequence& source, std::size_t prompt, const std::optional<tensor>& s_ref,
                    std::size_t invert_t, const guidance_config& g, tensor* latent = nullptr) const {
        require(bb != nullptr, errc::missing_checkpoint, "sampler needs a backbone checkpoint");
        require(invert_t <= bb->sched.num_steps, errc::invalid_argument,
                "invert_steps " + std::to_string(invert_t) + " exceeds diffusion length " + std::to_string(bb->sched.num_steps));
        const std::size_t gsz = bb->vae.cfg.frames_per_token;
        const std::size_t len = (source.length() / gsz) * gsz;
        auto src = motion::crop(source, 0, len);
        tensor z0;
        {
            no_grad_guard ng;
            z0 = bb->vae.encode(var::constant(src.frames.reshaped({1, len, motion::num_features}))).mean.value();
        }
        auto zt = invert(z0, {prompt}, invert_t, g.steps);
        auto out = reverse(zt, invert_t, {prompt}, s_ref, g);
        if (latent) *latent = out;
        return decode(out);
    }
};

// Frames (B, T, F) back into motion records.
inline std::vector<motion::motion_sequence> to_sequences(const tensor& frames, const std::vector<std::size_t>& contents,
                                                         const std::vector<std::size_t>& styles, double fps = 20.0) {
    const std::size_t b = frames.dim(0), t = frames.dim(1), f = frames.dim(2);
    std::vector<motion::motion_sequence> out;
    for (std::size_t i = 0; i < b; ++i) {
        motion::motion_sequence m;
        m.frames = tensor({t, f}, std::vector<double>(frames.data().begin() + static_cast<std::ptrdiff_t>(i * t * f),
                                                      frames.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * t * f)));
        m.fps = fps;
        m.content_id = static_cast<std::uint32_t>(contents.at(i));
        m.style_id = static_cast<std::uint32_t>(styles.at(i));
        m.split = motion::split_kind::test;
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace hlm
