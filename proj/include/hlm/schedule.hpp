// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "hlm/tensor.hpp"

namespace hlm::diffusion {

enum class schedule_kind { cosine, linear_vp };

inline schedule_kind parse_schedule_kind(std::string_view s) {
    if (s == "cosine") return schedule_kind::cosine;
    if (s == "linear-vp") return schedule_kind::linear_vp;
    throw error(errc::invalid_argument, "unknown schedule kind '" + std::string(s) + "'");
}

inline const char* schedule_kind_name(schedule_kind k) { return k == schedule_kind::cosine ? "cosine" : "linear-vp"; }

// Variance-preserving schedule over t = 0..num_steps with alpha_t^2 + sigma_t^2 = 1.
struct noise_schedule {
    schedule_kind kind = schedule_kind::cosine;
    std::size_t num_steps = 0;
    std::vector<double> alphas;
    std::vector<double> sigmas;

    double alpha(std::size_t t) const { return alphas.at(t); }
    double sigma(std::size_t t) const { return sigmas.at(t); }
};

inline noise_schedule make_schedule(std::size_t num_steps, schedule_kind kind = schedule_kind::cosine) {
    require(num_steps >= 2, errc::invalid_argument, "schedule needs at least 2 steps");
    noise_schedule s;
    s.kind = kind;
    s.num_steps = num_steps;
    s.alphas.resize(num_steps + 1);
    s.sigmas.resize(num_steps + 1);
    const double n = static_cast<double>(num_steps);
    if (kind == schedule_kind::cosine) {
        // angle parameterization: alpha = cos(phi), sigma = sin(phi), phi in [0, pi/2]
        for (std::size_t t = 0; t <= num_steps; ++t) {
            const double phi = 0.5 * std::numbers::pi * static_cast<double>(t) / n;
            s.alphas[t] = std::cos(phi);
            s.sigmas[t] = std::sin(phi);
        }
        s.alphas[0] = 1.0;
        s.sigmas[0] = 0.0;
    } else {
        const double beta_lo = 1e-4 * 1000.0 / n, beta_hi = 0.02 * 1000.0 / n;
        double abar = 1.0;
        s.alphas[0] = 1.0;
        s.sigmas[0] = 0.0;
        for (std::size_t t = 1; t <= num_steps; ++t) {
            const double beta = beta_lo + (beta_hi - beta_lo) * static_cast<double>(t - 1) / (n - 1.0);
            abar *= (1.0 - std::min(beta, 0.999));
            s.alphas[t] = std::sqrt(abar);
            s.sigmas[t] = std::sqrt(1.0 - abar);
        }
    }
    return s;
}

inline void require_timestep(const noise_schedule& s, std::size_t t) {
    require(t <= s.num_steps, errc::invalid_argument,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.num_steps) + "]");
}

// z_t = alpha_t z0 + sigma_t eps
inline tensor forward_diffuse(const tensor& z0, std::size_t t, const tensor& eps, const noise_schedule& s) {
    require_timestep(s, t);
    require_same_shape(z0, eps, "forward_diffuse");
    return axpby(s.alpha(t), z0, s.sigma(t), eps);
}

// v_t = alpha_t eps - sigma_t z0
inline tensor target_velocity(const tensor& z0, const tensor& eps, std::size_t t, const noise_schedule& s) {
    require_timestep(s, t);
    require_same_shape(z0, eps, "target_velocity");
    return axpby(s.alpha(t), eps, -s.sigma(t), z0);
}

struct clean_estimate {
    tensor z0;   // alpha_t z_t - sigma_t v
    tensor eps;  // sigma_t z_t + alpha_t v
};

inline clean_estimate recover_clean(const tensor& z_t, const tensor& v_hat, std::size_t t, const noise_schedule& s) {
    require_timestep(s, t);
    require_same_shape(z_t, v_hat, "recover_clean");
    return {axpby(s.alpha(t), z_t, -s.sigma(t), v_hat), axpby(s.sigma(t), z_t, s.alpha(t), v_hat)};
}

// Deterministic (eta = 0) reassembly at a target timestep.
inline tensor reassemble(const clean_estimate& c, std::size_t t, const noise_schedule& s) {
    return axpby(s.alpha(t), c.z0, s.sigma(t), c.eps);
}

inline tensor ddim_step(const tensor& z_t, const tensor& v_hat, std::size_t t, std::size_t t_prev, const noise_schedule& s) {
    require_timestep(s, t);
    require_timestep(s, t_prev);
    require(t_prev <= t, errc::invalid_argument,
            "ddim_step: t_prev " + std::to_string(t_prev) + " exceeds t " + std::to_string(t));
    return reassemble(recover_clean(z_t, v_hat, t, s), t_prev, s);
}

inline tensor ddim_invert_step(const tensor& z_t, const tensor& v_hat, std::size_t t, std::size_t t_next,
                               const noise_schedule& s) {
    require_timestep(s, t);
    require_timestep(s, t_next);
    require(t_next >= t, errc::invalid_argument,
            "ddim_invert_step: t_next " + std::to_string(t_next) + " is below t " + std::to_string(t));
    return reassemble(recover_clean(z_t, v_hat, t, s), t_next, s);
}

// Uniformly spaced sampling timesteps from t_max down to 0 (inclusive of both).
inline std::vector<std::size_t> sampling_timesteps(std::size_t t_max, std::size_t steps) {
    require(steps >= 1, errc::invalid_argument, "need at least one sampling step");
    std::vector<std::size_t> ts(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
        const double frac = static_cast<double>(steps - i) / static_cast<double>(steps);
        ts[i] = static_cast<std::size_t>(std::llround(frac * static_cast<double>(t_max)));
    }
    return ts;
}

struct diffusion_state {
    tensor z_t;
    std::size_t t = 0;
    std::uint64_t rng_seed = 0;
};

}  // namespace hlm::diffusion
