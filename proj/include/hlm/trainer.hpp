// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hlm/adapter.hpp"

namespace hlm {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline var velocity_loss(const var& v_hat, const var& v_target) {
    require_same_shape(v_hat.value(), v_target.value(), "velocity_loss");
    return mse(v_hat, v_target);
}

// Supervised contrastive loss summed over anchors. For anchor i, positives
// P(i) share its label, A(i) is everything except i; anchors without
// positives contribute 0.
inline var supcon_loss(const var& embeddings, const std::vector<std::size_t>& labels, double tau) {
    require(embeddings.value().rank() == 2, errc::shape_mismatch, "supcon_loss: embeddings must be (N, D)");
    const std::size_t n = embeddings.dim(0);
    require(n >= 2, errc::invalid_argument, "supcon_loss: need at least 2 embeddings");
    require(labels.size() == n, errc::shape_mismatch, "supcon_loss: one label per embedding");
    require(tau > 0.0, errc::invalid_argument, "supcon_loss: temperature must be positive");
    auto logits = scale(cosine_similarity(embeddings, embeddings), 1.0 / tau);
    std::vector<bool> mask(n * n, true);
    for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = false;
    auto logp = masked_log_softmax(logits, mask);
    tensor weights({n, n});
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t np = 0;
        for (std::size_t p = 0; p < n; ++p) np += (p != i && labels[p] == labels[i]);
        if (np == 0) continue;
        any = true;
        for (std::size_t p = 0; p < n; ++p) {
            if (p != i && labels[p] == labels[i]) weights[i * n + p] = -1.0 / static_cast<double>(np);
        }
    }
    if (!any) return mul(sum(logp), var::constant(tensor::scalar(0.0)));
    return sum(mul(logp, var::constant(std::move(weights))));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char checkpoint_magic[4] = {'H', 'L', 'C', 'K'};
inline constexpr std::uint16_t checkpoint_version = 1;

struct checkpoint {
    nn::named_tensors tensors;
    json metadata = json::object();
    bool operator==(const checkpoint&) const = default;
};

// Layout: magic, u16 version, u32 metadata length, metadata JSON, u32 tensor
// count, per tensor (u16 name length, name, u8 rank, u64 dims), u64 payload
// length, f64 payload in table order, u32 CRC32 of every byte after the magic.
inline std::string encode_checkpoint(const checkpoint& ck) {
    motion::io::writer w;
    w.raw(std::string(checkpoint_magic, 4));
    w.pod<std::uint16_t>(checkpoint_version);
    const std::string meta = ck.metadata.dump();
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
    w.raw(meta);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
    std::uint64_t payload = 0;
    for (const auto& [name, t] : ck.tensors) {
        w.str16(name);
        w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) w.pod<std::uint64_t>(d);
        payload += 8 * t.size();
    }
    w.pod<std::uint64_t>(payload);
    for (const auto& [name, t] : ck.tensors) {
        for (double v : t.data()) w.pod<double>(v);
    }
    const auto crc = motion::io::crc32_of(w.bytes().substr(4));
    w.pod<std::uint32_t>(crc);
    return std::move(w.bytes());
}

inline checkpoint decode_checkpoint(std::string_view bytes) {
    require(bytes.size() >= 10, errc::format, "checkpoint: truncated file");
    motion::io::reader r(bytes, "checkpoint");
    require(r.take(4) == std::string_view(checkpoint_magic, 4), errc::format, "checkpoint: bad magic bytes");
    const auto version = r.pod<std::uint16_t>();
    require(version == checkpoint_version, errc::format, "checkpoint: unsupported version " + std::to_string(version));
    std::uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    require(stored == motion::io::crc32_of(std::string(bytes.substr(4, bytes.size() - 8))), errc::format,
            "checkpoint: CRC32 mismatch");
    checkpoint ck;
    const auto meta_len = r.pod<std::uint32_t>();
    try {
        ck.metadata = json::parse(r.take(meta_len));
    } catch (const json::exception& e) {
        throw error(errc::format, std::string("checkpoint: bad metadata: ") + e.what());
    }
    const auto count = r.pod<std::uint32_t>();
    std::vector<std::pair<std::string, shape_t>> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.str16();
        const auto rank = r.pod<std::uint8_t>();
        shape_t s(rank);
        for (auto& d : s) d = r.pod<std::uint64_t>();
        table.emplace_back(std::move(name), std::move(s));
    }
    const auto payload = r.pod<std::uint64_t>();
    require(r.remaining() == payload + 4, errc::format, "checkpoint: payload length does not match file size");
    for (auto& [name, s] : table) {
        tensor t(s);
        for (auto& v : t.data()) v = r.pod<double>();
        require(ck.tensors.emplace(name, std::move(t)).second, errc::format, "checkpoint: duplicate tensor " + name);
    }
    return ck;
}

inline void save_checkpoint(const checkpoint& ck, const std::filesystem::path& path) {
    motion::io::write_file_atomic(path, encode_checkpoint(ck));
}

inline checkpoint load_checkpoint(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), errc::missing_checkpoint, "missing checkpoint " + path.string());
    return decode_checkpoint(motion::io::read_file(path));
}

// Backbone <-> checkpoint. Configs travel in the metadata.
inline json to_json(const vae_config& c) {
    return {{"frames_per_token", c.frames_per_token}, {"hidden", c.hidden}, {"latent_joints", c.latent_joints},
            {"latent_channels", c.latent_channels}, {"kl_weight", c.kl_weight}, {"fps", c.fps}};
}
inline json to_json(const denoiser_config& c) {
    return {{"blocks", c.blocks}, {"hidden", c.hidden}, {"heads", c.heads}, {"latent_joints", c.latent_joints},
            {"latent_channels", c.latent_channels}, {"time_width", c.time_width}, {"text_tokens", c.text_tokens},
            {"num_contents", c.num_contents}, {"ff_mult", c.ff_mult}, {"text_dropout", c.text_dropout}};
}
inline json to_json(const adapter_config& c) {
    return {{"style_width", c.style_width}, {"encoder_width", c.encoder_width}, {"encoder_blocks", c.encoder_blocks},
            {"trunk_width", c.trunk_width}, {"rank", c.rank}, {"alpha", c.alpha}};
}

inline checkpoint backbone_checkpoint(backbone& bb, json extra = json::object()) {
    checkpoint ck;
    ck.tensors = nn::snapshot(bb.state());
    ck.metadata = std::move(extra);
    ck.metadata["kind"] = "backbone";
    ck.metadata["vae"] = to_json(bb.vae.cfg);
    ck.metadata["denoiser"] = to_json(bb.net.cfg);
    ck.metadata["diffusion_steps"] = bb.sched.num_steps;
    ck.metadata["schedule"] = diffusion::schedule_kind_name(bb.sched.kind);
    ck.metadata["window"] = bb.window;
    return ck;
}

inline backbone backbone_from_checkpoint(const checkpoint& ck) {
    const auto& m = ck.metadata;
    require(m.value("kind", "") == "backbone", errc::format, "checkpoint is not a backbone checkpoint");
    try {
        vae_config vc;
        vc.frames_per_token = m["vae"]["frames_per_token"];
        vc.hidden = m["vae"]["hidden"];
        vc.latent_joints = m["vae"]["latent_joints"];
        vc.latent_channels = m["vae"]["latent_channels"];
        vc.kl_weight = m["vae"]["kl_weight"];
        vc.fps = m["vae"].value("fps", 20.0);
        denoiser_config dc;
        const auto& d = m["denoiser"];
        dc.blocks = d["blocks"];
        dc.hidden = d["hidden"];
        dc.heads = d["heads"];
        dc.latent_joints = d["latent_joints"];
        dc.latent_channels = d["latent_channels"];
        dc.time_width = d["time_width"];
        dc.text_tokens = d["text_tokens"];
        dc.num_contents = d["num_contents"];
        dc.ff_mult = d["ff_mult"];
        dc.text_dropout = d["text_dropout"];
        backbone bb(vc, dc, m["diffusion_steps"], diffusion::parse_schedule_kind(m["schedule"].get<std::string>()), 0);
        bb.window = m["window"];
        auto st = bb.state();
        nn::restore(st, ck.tensors);
        bb.freeze();
        return bb;
    } catch (const json::exception& e) {
        throw error(errc::format, std::string("backbone checkpoint metadata: ") + e.what());
    }
}

inline checkpoint adapter_checkpoint(style_adapter& ad, json extra = json::object()) {
    checkpoint ck;
    ck.tensors = nn::snapshot(ad.parameters());
    ck.metadata = std::move(extra);
    ck.metadata["kind"] = "adapter";
    ck.metadata["adapter"] = to_json(ad.cfg);
    return ck;
}

inline style_adapter adapter_from_checkpoint(const checkpoint& ck, const backbone& bb) {
    const auto& m = ck.metadata;
    require(m.value("kind", "") == "adapter", errc::format, "checkpoint is not an adapter checkpoint");
    try {
        adapter_config c;
        const auto& a = m["adapter"];
        c.style_width = a["style_width"];
        c.encoder_width = a["encoder_width"];
        c.encoder_blocks = a["encoder_blocks"];
        c.trunk_width = a["trunk_width"];
        c.rank = a["rank"];
        c.alpha = a["alpha"];
        style_adapter ad(bb.net, bb.vae.latent_width(), c, 0);
        auto p = ad.parameters();
        nn::restore(p, ck.tensors);
        nn::set_trainable(p, false);
        return ad;
    } catch (const json::exception& e) {
        throw error(errc::format, std::string("adapter checkpoint metadata: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Adapter training
// ---------------------------------------------------------------------------

struct train_config {
    std::size_t epochs = 200;
    std::size_t steps_per_epoch = 10;
    std::size_t batch = 64;
    double lr = 1e-4;
    double tau = 0.07;
    double lambda_supcon = 1.0;
    std::size_t min_per_style = 2;
    std::uint64_t seed = 0;

    void validate() const {
        require(epochs >= 1 && steps_per_epoch >= 1, errc::invalid_argument, "epochs and steps_per_epoch must be >= 1");
        require(tau > 0.0, errc::invalid_argument, "tau must be positive");
        require(lr > 0.0, errc::invalid_argument, "learning rate must be positive");
        require(min_per_style >= 2, errc::invalid_argument, "need at least 2 samples per style in a batch");
    }
};

struct train_step_log {
    std::size_t step = 0;
    double l_vel = 0, l_supcon = 0, l_total = 0, wall_seconds = 0;
};

struct train_report {
    std::vector<double> epoch_total, epoch_vel, epoch_supcon;
    std::vector<std::pair<std::size_t, std::size_t>> first_epoch_pairs;  // (target, reference) sequence indices
    std::vector<std::string> warnings;
    std::vector<std::uint32_t> trained_styles;
    double probe_supcon_before = 0, probe_supcon_after = 0;
};

inline std::string to_jsonl(const train_step_log& s) {
    return json{{"step", s.step}, {"L_vel", s.l_vel}, {"L_supcon", s.l_supcon}, {"L_total", s.l_total},
                {"wall_time", s.wall_seconds}}
        .dump();
}

namespace detail {

// Cached reference latents per dataset sequence.
struct reference_cache {
    std::vector<tensor> rows;  // (T_lat, J*D) per sequence

    reference_cache(const motion_vae& vae, const motion::dataset& ds) {
        for (const auto& m : ds.sequences) {
            auto r = encode_references(vae, {&m});
            rows.push_back(r.rows.value());
        }
    }

    reference_rows gather(const std::vector<std::size_t>& idx) const {
        reference_rows out;
        std::vector<double> data;
        out.offsets.push_back(0);
        std::size_t w = 0;
        for (auto i : idx) {
            const auto& r = rows[i];
            w = r.dim(1);
            data.insert(data.end(), r.data().begin(), r.data().end());
            out.offsets.push_back(out.offsets.back() + r.dim(0));
        }
        out.rows = var::constant(tensor({out.offsets.back(), w}, std::move(data)));
        return out;
    }
};

}  // namespace detail

inline train_report train_style_adapter(backbone& bb, style_adapter& ad, const motion::dataset& ds, const train_config& cfg,
                                        const std::function<void(const train_step_log&)>& log = {}) {
    cfg.validate();
    bb.freeze();
    train_report rep;

    // targets and references: training split, grouped by style then content
    std::map<std::uint32_t, std::map<std::uint32_t, std::vector<std::size_t>>> by_style;
    for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
        const auto& m = ds.sequences[i];
        if (m.split == motion::split_kind::train) by_style[m.style_id][m.content_id].push_back(i);
    }
    std::vector<std::uint32_t> styles;
    for (const auto& [s, contents] : by_style) {
        if (contents.size() < 2) {
            rep.warnings.push_back("style " + std::to_string(s) + " has a single content; excluded from misaligned pairing");
            continue;
        }
        styles.push_back(s);
    }
    require(styles.size() >= 2, errc::invalid_argument, "adapter training needs at least 2 styles with 2+ contents");
    rep.trained_styles = styles;
    const std::size_t per_style = std::max(cfg.min_per_style, cfg.batch / styles.size());
    const std::size_t batch = per_style * styles.size();

    detail::reference_cache cache(bb.vae, ds);

    // probe batch drawn from the held-out split of the trained styles
    std::vector<std::size_t> probe;
    std::vector<std::size_t> probe_labels;
    for (std::size_t i = 0; i < ds.sequences.size() && probe.size() < 64; ++i) {
        const auto& m = ds.sequences[i];
        if (m.split == motion::split_kind::test && std::find(styles.begin(), styles.end(), m.style_id) != styles.end()) {
            probe.push_back(i);
            probe_labels.push_back(m.style_id);
        }
    }
    auto probe_loss = [&] {
        if (probe.size() < 2) return 0.0;
        no_grad_guard ng;
        auto r = cache.gather(probe);
        return supcon_loss(ad.encoder.encode_rows(r.rows, r.offsets), probe_labels, cfg.tau).item();
    };
    rep.probe_supcon_before = probe_loss();

    auto params = ad.parameters();
    nn::set_trainable(params, true);
    nn::adam opt(params, {.lr = cfg.lr});
    auto gen = make_rng(cfg.seed, "adapter-train");
    std::uniform_int_distribution<std::size_t> tdist(1, bb.sched.num_steps);
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double acc_t = 0, acc_v = 0, acc_s = 0;
        for (std::size_t k = 0; k < cfg.steps_per_epoch; ++k) {
            ++step;
            std::vector<std::size_t> targets, refs, labels;
            for (auto s : styles) {
                const auto& contents = by_style[s];
                std::vector<std::uint32_t> cids;
                for (const auto& [c, v] : contents) cids.push_back(c);
                for (std::size_t j = 0; j < per_style; ++j) {
                    std::uniform_int_distribution<std::size_t> pc(0, cids.size() - 1);
                    const auto tc = cids[pc(gen)];
                    std::uniform_int_distribution<std::size_t> pi(0, contents.at(tc).size() - 1);
                    const auto target = contents.at(tc)[pi(gen)];
                    // reference: same style, different content
                    std::uniform_int_distribution<std::size_t> po(0, cids.size() - 2);
                    auto rc = cids[po(gen)];
                    if (rc == tc) rc = cids.back();
                    std::uniform_int_distribution<std::size_t> pr(0, contents.at(rc).size() - 1);
                    targets.push_back(target);
                    refs.push_back(contents.at(rc)[pr(gen)]);
                    labels.push_back(s);
                }
            }
            if (epoch == 0) {
                for (std::size_t i = 0; i < batch; ++i) rep.first_epoch_pairs.emplace_back(targets[i], refs[i]);
            }
            std::vector<const motion::motion_sequence*> pool;
            for (auto i : targets) pool.push_back(&ds.sequences[i]);
            // one window per target, in order
            tensor frames({batch, bb.window, motion::num_features});
            for (std::size_t i = 0; i < batch; ++i) {
                const auto& m = *pool[i];
                std::uniform_int_distribution<std::size_t> st(0, m.length() - bb.window);
                auto w = motion::crop(m, st(gen), bb.window);
                std::copy(w.frames.data().begin(), w.frames.data().end(),
                          frames.data().begin() + static_cast<std::ptrdiff_t>(i * w.frames.size()));
            }
            tensor z0;
            {
                no_grad_guard ng;
                z0 = bb.vae.encode(var::constant(frames)).mean.value();
            }
            auto eps = tensor::randn(z0.shape(), gen);
            tensor zt(z0.shape()), vt(z0.shape());
            std::vector<std::size_t> ts(batch), text(batch);
            const std::size_t per = z0.size() / batch;
            for (std::size_t i = 0; i < batch; ++i) {
                ts[i] = tdist(gen);
                text[i] = ds.sequences[targets[i]].content_id;
                const double a = bb.sched.alpha(ts[i]), s = bb.sched.sigma(ts[i]);
                for (std::size_t q = i * per; q < (i + 1) * per; ++q) {
                    zt[q] = a * z0[q] + s * eps[q];
                    vt[q] = a * eps[q] - s * z0[q];
                }
            }
            auto r = cache.gather(refs);
            auto s = ad.encoder.encode_rows(r.rows, r.offsets);
            auto factors = ad.hyper(s);
            auto v_hat = bb.net(var::constant(zt), ts, text, {.lora = &factors});
            auto l_vel = velocity_loss(v_hat, var::constant(vt));
            var total = l_vel;
            double l_sup = 0.0;
            if (cfg.lambda_supcon != 0.0) {
                auto ls = supcon_loss(s, labels, cfg.tau);
                l_sup = ls.item();
                total = add(l_vel, scale(ls, cfg.lambda_supcon));
            }
            train_step_log entry{step, l_vel.item(), l_sup, total.item(),
                                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
            require_finite_loss(entry.l_total, "adapter training", step);
            opt.zero_grad();
            backward(total);
            opt.step();
            acc_t += entry.l_total;
            acc_v += entry.l_vel;
            acc_s += entry.l_supcon;
            if (log) log(entry);
        }
        const double n = static_cast<double>(cfg.steps_per_epoch);
        rep.epoch_total.push_back(acc_t / n);
        rep.epoch_vel.push_back(acc_v / n);
        rep.epoch_supcon.push_back(acc_s / n);
    }
    nn::set_trainable(params, false);
    rep.probe_supcon_after = probe_loss();
    return rep;
}

}  // namespace hlm
