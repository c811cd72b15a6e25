// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>

#include <toml.hpp>

#include "hlm/pipeline.hpp"

namespace hlm {

namespace detail {

using setter = std::function<void(const toml::node&, const std::string&)>;

inline double as_real(const toml::node& n, const std::string& key) {
    if (auto v = n.value<double>()) return *v;
    throw error(errc::invalid_argument, "config: '" + key + "' must be a number");
}
inline std::size_t as_count(const toml::node& n, const std::string& key) {
    auto v = n.value<std::int64_t>();
    require(v.has_value() && n.is_integer() && *v >= 0, errc::invalid_argument, "config: '" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(*v);
}
inline std::string as_text(const toml::node& n, const std::string& key) {
    auto v = n.value<std::string>();
    require(v.has_value() && n.is_string(), errc::invalid_argument, "config: '" + key + "' must be a string");
    return *v;
}

inline setter real(double& d) {
    return [&d](const toml::node& n, const std::string& k) { d = as_real(n, k); };
}
inline setter count(std::size_t& d) {
    return [&d](const toml::node& n, const std::string& k) { d = as_count(n, k); };
}
inline setter seed(std::uint64_t& d) {
    return [&d](const toml::node& n, const std::string& k) { d = as_count(n, k); };
}

// section -> key -> setter, every accepted key listed once
inline std::map<std::string, std::map<std::string, setter>> config_schema(pipeline_config& c) {
    std::map<std::string, std::map<std::string, setter>> s;
    s["run"] = {{"seed", seed(c.seed)},
                {"reps_per_cell", count(c.reps_per_cell)},
                {"diffusion_steps", count(c.diffusion_steps)},
                {"schedule", [&c](const toml::node& n, const std::string& k) { c.schedule = diffusion::parse_schedule_kind(as_text(n, k)); }},
                {"window", count(c.window)},
                {"styles_fraction", real(c.styles_fraction)},
                {"eval_per_cell", count(c.eval_per_cell)}};
    s["vae"] = {{"frames_per_token", count(c.vae.frames_per_token)}, {"hidden", count(c.vae.hidden)},
                {"latent_joints", count(c.vae.latent_joints)},       {"latent_channels", count(c.vae.latent_channels)},
                {"kl_weight", real(c.vae.kl_weight)},                {"fps", real(c.vae.fps)}};
    s["denoiser"] = {{"blocks", count(c.denoiser.blocks)},        {"hidden", count(c.denoiser.hidden)},
                     {"heads", count(c.denoiser.heads)},          {"latent_joints", count(c.denoiser.latent_joints)},
                     {"latent_channels", count(c.denoiser.latent_channels)}, {"time_width", count(c.denoiser.time_width)},
                     {"text_tokens", count(c.denoiser.text_tokens)}, {"ff_mult", count(c.denoiser.ff_mult)},
                     {"text_dropout", real(c.denoiser.text_dropout)}};
    s["pretrain"] = {{"vae_steps", count(c.pretrain.vae_steps)}, {"denoiser_steps", count(c.pretrain.denoiser_steps)},
                     {"batch", count(c.pretrain.batch)},         {"vae_lr", real(c.pretrain.vae_lr)},
                     {"denoiser_lr", real(c.pretrain.denoiser_lr)}, {"steps_per_epoch", count(c.pretrain.steps_per_epoch)}};
    s["adapter"] = {{"style_width", count(c.adapter.style_width)}, {"encoder_width", count(c.adapter.encoder_width)},
                    {"encoder_blocks", count(c.adapter.encoder_blocks)}, {"trunk_width", count(c.adapter.trunk_width)},
                    {"rank", count(c.adapter.rank)},               {"alpha", real(c.adapter.alpha)}};
    s["train"] = {{"epochs", count(c.train.epochs)}, {"steps_per_epoch", count(c.train.steps_per_epoch)},
                  {"batch", count(c.train.batch)},   {"lr", real(c.train.lr)},
                  {"tau", real(c.train.tau)},        {"lambda_supcon", real(c.train.lambda_supcon)},
                  {"min_per_style", count(c.train.min_per_style)}};
    s["guidance"] = {{"w_text", real(c.guidance.w_text)},
                     {"w_style", real(c.guidance.w_style)},
                     {"lambda_style", real(c.guidance.lambda_style)},
                     {"eps_stab", real(c.guidance.eps_stab)},
                     {"backprop", [&c](const toml::node& n, const std::string& k) { c.guidance.backprop = parse_backprop_mode(as_text(n, k)); }},
                     {"t_min", count(c.guidance.guidance_t_min)},
                     {"t_max", count(c.guidance.guidance_t_max)},
                     {"steps", count(c.guidance.steps)}};
    s["classifier"] = {{"hidden", count(c.classifier.hidden)}, {"embed", count(c.classifier.embed)},
                       {"steps", count(c.classifier.steps)},   {"batch", count(c.classifier.batch)},
                       {"lr", real(c.classifier.lr)},          {"window", count(c.classifier.window)},
                       {"windows_per_sequence", count(c.classifier.windows_per_sequence)},
                       {"min_held_out_accuracy", real(c.classifier.min_held_out_accuracy)}};
    return s;
}

}  // namespace detail

// Applies a TOML document on top of `c`. Unknown sections or keys are errors.
inline void apply_config_text(pipeline_config& c, std::string_view text, const std::string& origin = "config") {
    toml::table doc;
    try {
        doc = toml::parse(text, origin);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << origin << ": " << e.description() << " at line " << e.source().begin.line;
        throw error(errc::invalid_argument, os.str());
    }
    auto schema = detail::config_schema(c);
    for (const auto& [section, node] : doc) {
        const std::string name(section.str());
        auto it = schema.find(name);
        require(it != schema.end(), errc::invalid_argument, origin + ": unknown section [" + name + "]");
        const auto* tbl = node.as_table();
        require(tbl != nullptr, errc::invalid_argument, origin + ": '" + name + "' must be a table");
        for (const auto& [key, value] : *tbl) {
            const std::string k(key.str());
            auto kt = it->second.find(k);
            require(kt != it->second.end(), errc::invalid_argument, origin + ": unknown key '" + name + "." + k + "'");
            kt->second(value, name + "." + k);
        }
    }
}

inline void apply_config_file(pipeline_config& c, const std::string& path) {
    apply_config_text(c, motion::io::read_file(path), path);
}

inline nlohmann::json to_json(const pipeline_config& c) {
    using nlohmann::json;
    return json{{"run",
                 {{"seed", c.seed},
                  {"reps_per_cell", c.reps_per_cell},
                  {"diffusion_steps", c.diffusion_steps},
                  {"schedule", diffusion::schedule_kind_name(c.schedule)},
                  {"window", c.window},
                  {"styles_fraction", c.styles_fraction},
                  {"eval_per_cell", c.eval_per_cell}}},
                {"vae", to_json(c.vae)},
                {"denoiser", to_json(c.denoiser)},
                {"pretrain",
                 {{"vae_steps", c.pretrain.vae_steps},
                  {"denoiser_steps", c.pretrain.denoiser_steps},
                  {"batch", c.pretrain.batch},
                  {"vae_lr", c.pretrain.vae_lr},
                  {"denoiser_lr", c.pretrain.denoiser_lr},
                  {"steps_per_epoch", c.pretrain.steps_per_epoch}}},
                {"adapter", to_json(c.adapter)},
                {"train",
                 {{"epochs", c.train.epochs},
                  {"steps_per_epoch", c.train.steps_per_epoch},
                  {"batch", c.train.batch},
                  {"lr", c.train.lr},
                  {"tau", c.train.tau},
                  {"lambda_supcon", c.train.lambda_supcon},
                  {"min_per_style", c.train.min_per_style}}},
                {"guidance",
                 {{"w_text", c.guidance.w_text},
                  {"w_style", c.guidance.w_style},
                  {"lambda_style", c.guidance.lambda_style},
                  {"eps_stab", c.guidance.eps_stab},
                  {"backprop", backprop_mode_name(c.guidance.backprop)},
                  {"t_min", c.guidance.guidance_t_min},
                  {"t_max", c.guidance.guidance_t_max},
                  {"steps", c.guidance.steps}}},
                {"classifier",
                 {{"hidden", c.classifier.hidden},
                  {"embed", c.classifier.embed},
                  {"steps", c.classifier.steps},
                  {"batch", c.classifier.batch},
                  {"lr", c.classifier.lr},
                  {"window", c.classifier.window},
                  {"windows_per_sequence", c.classifier.windows_per_sequence},
                  {"min_held_out_accuracy", c.classifier.min_held_out_accuracy}}}};
}

}  // namespace hlm
