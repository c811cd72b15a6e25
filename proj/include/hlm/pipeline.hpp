// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hlm/eval.hpp"
#include "hlm/sampler.hpp"
#include "hlm/trainer.hpp"

namespace hlm {

// Everything a seeded run needs. Sub-seeds are derived from `seed` by purpose
// tag in reseed(); the per-module seed fields are overwritten there.
struct pipeline_config {
    std::uint64_t seed = 0;
    std::size_t reps_per_cell = 40;
    std::size_t diffusion_steps = 1000;
    diffusion::schedule_kind schedule = diffusion::schedule_kind::cosine;
    std::size_t window = 48;
    vae_config vae;
    denoiser_config denoiser;
    pretrain_config pretrain;
    adapter_config adapter;
    train_config train;
    guidance_config guidance;
    eval::classifier_config classifier;
    double styles_fraction = 1.0;
    std::size_t eval_per_cell = 2;  // samples per (style, content)

    pipeline_config() {
        train.epochs = 300;
        train.lr = 1e-3;
        guidance.w_text = 2.5;
    }

    void reseed() {
        pretrain.seed = derive_seed(seed, "pretrain");
        train.seed = derive_seed(seed, "train-adapter");
        classifier.seed = derive_seed(seed, "classifier");
    }
    std::uint64_t data_seed() const { return derive_seed(seed, "dataset"); }
    std::uint64_t backbone_seed() const { return derive_seed(seed, "backbone-init"); }
    std::uint64_t adapter_seed() const { return derive_seed(seed, "adapter-init"); }
    std::uint64_t sample_seed(std::uint64_t eval_seed) const { return derive_seed(seed, "eval-sample", eval_seed); }

    void validate() const {
        require(reps_per_cell >= 1, errc::invalid_argument, "reps_per_cell must be >= 1");
        require(styles_fraction > 0.0 && styles_fraction <= 1.0, errc::invalid_argument, "styles_fraction must be in (0, 1]");
        require(eval_per_cell >= 1, errc::invalid_argument, "eval_per_cell must be >= 1");
        require(window >= vae.frames_per_token && window % vae.frames_per_token == 0, errc::invalid_argument,
                "window must be a multiple of the latent token group");
        vae.validate();
        train.validate();
        guidance.validate();
        adapter.validate();
    }
};

inline motion::dataset make_dataset(const pipeline_config& c) {
    return motion::generate_dataset(motion::default_styles(), motion::default_contents(), c.reps_per_cell, c.data_seed());
}

inline backbone make_backbone(const pipeline_config& c) {
    backbone bb(c.vae, c.denoiser, c.diffusion_steps, c.schedule, c.backbone_seed());
    bb.window = c.window;
    return bb;
}

// Which styles an adapter trains on, and which styles it is judged on. With a
// partial fraction the evaluation uses the complement (styles never trained).
struct style_split {
    std::vector<std::uint32_t> trained, evaluated;
};

inline style_split split_styles(std::size_t num_styles, double fraction) {
    style_split s;
    s.trained = motion::style_subset(num_styles, fraction);
    for (std::uint32_t k = 0; k < num_styles; ++k) {
        if (std::find(s.trained.begin(), s.trained.end(), k) == s.trained.end()) s.evaluated.push_back(k);
    }
    if (s.evaluated.empty()) s.evaluated = s.trained;
    return s;
}

// Prompt, intended style and a reference motion per generated item. The
// reference has the intended style and a content different from the prompt,
// taken from the held-out split when possible.
struct eval_plan {
    std::vector<std::size_t> prompts, styles;
    std::vector<const motion::motion_sequence*> refs;
};

inline std::vector<const motion::motion_sequence*> reference_pool(const motion::dataset& ds, std::uint32_t style,
                                                                  std::size_t content) {
    std::vector<const motion::motion_sequence*> held, other;
    for (const auto& m : ds.sequences) {
        if (m.style_id != style || m.content_id == content) continue;
        (m.split == motion::split_kind::test ? held : other).push_back(&m);
    }
    auto pool = held.empty() ? other : held;
    require(!pool.empty(), errc::invalid_argument,
            "no reference motion for style " + std::to_string(style) + " with content other than " + std::to_string(content));
    return pool;
}

inline eval_plan make_eval_plan(const motion::dataset& ds, const std::vector<std::uint32_t>& styles, std::size_t per_cell,
                                std::uint64_t seed) {
    eval_plan p;
    auto gen = make_rng(seed, "eval-references");
    for (auto s : styles) {
        for (std::size_t c = 0; c < ds.num_contents(); ++c) {
            const auto pool = reference_pool(ds, s, c);
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            for (std::size_t r = 0; r < per_cell; ++r) {
                p.prompts.push_back(c);
                p.styles.push_back(s);
                p.refs.push_back(pool[pick(gen)]);
            }
        }
    }
    return p;
}

// Style and content classifiers plus real-motion features for the Frechet term.
struct evaluator {
    eval::classifier style_clf, content_clf;
    std::size_t window = 48;
    std::uint64_t seed = 0;

    evaluator() = default;
    evaluator(const motion::dataset& ds, const eval::classifier_config& cfg) : window(cfg.window), seed(cfg.seed) {
        style_clf = eval::train_classifier(ds, eval::label_kind::style, cfg);
        content_clf = eval::train_classifier(ds, eval::label_kind::content, cfg);
    }

    void validate(double threshold) const {
        eval::require_valid(style_clf, threshold);
        eval::require_valid(content_clf, threshold);
    }

    // real held-out windows of the given styles, at least `min_rows` of them
    tensor real_features(const motion::dataset& ds, const std::vector<std::uint32_t>& styles, std::size_t min_rows) const {
        auto sub = motion::filter_styles(ds, styles);
        std::size_t held = 0;
        for (const auto& m : sub.sequences) held += m.split == motion::split_kind::test;
        require(held > 0, errc::invalid_argument, "no held-out motions for the evaluated styles");
        const std::size_t per = std::max<std::size_t>(1, (min_rows + held - 1) / held);
        return style_clf.embeddings(eval::evaluation_windows(sub, motion::split_kind::test, window, per, seed));
    }

    eval::metric_report score(const std::vector<motion::motion_sequence>& ms, const eval_plan& p, const tensor& real) const {
        eval::metric_report r;
        r.samples = ms.size();
        r.sra_top1 = eval::sra(ms, p.styles, style_clf, 1);
        r.sra_top3 = eval::sra(ms, p.styles, style_clf, 3);
        r.content_acc = eval::content_accuracy(ms, p.prompts, content_clf);
        r.latent_fid = eval::latent_fid(style_clf.embeddings(ms), real);
        return r;
    }
};

// Enough items per cell for a full-rank covariance of the Frechet features.
inline std::size_t items_per_cell(const pipeline_config& c, std::size_t styles, std::size_t contents) {
    const std::size_t need = 2 * c.classifier.embed;
    const std::size_t cells = std::max<std::size_t>(1, styles * contents);
    return std::max(c.eval_per_cell, (need + cells - 1) / cells);
}

// Generates the plan's motions under one guidance setting and scores them.
inline eval::metric_report evaluate_variant(const sampler& s, const motion::dataset& ds, const evaluator& ev,
                                            const eval_plan& plan, const guidance_config& g, std::uint64_t seed,
                                            const tensor& real, std::vector<motion::motion_sequence>* out = nullptr) {
    std::optional<tensor> s_ref;
    if (s.ad != nullptr) s_ref = s.style_embeddings(plan.refs);
    auto frames = s.sample(plan.prompts, s_ref, ev.window, g, seed);
    auto ms = to_sequences(frames, plan.prompts, plan.styles, ds.sequences.empty() ? 20.0 : ds.sequences[0].fps);
    auto r = ev.score(ms, plan, real);
    if (out) *out = std::move(ms);
    return r;
}

// Style embeddings of held-out-content motions classified by their nearest
// training-split embedding.
inline double style_space_accuracy(const backbone& bb, const style_adapter& ad, const motion::dataset& ds) {
    std::vector<const motion::motion_sequence*> gallery, queries;
    std::vector<std::size_t> gl, ql;
    for (const auto& m : ds.sequences) {
        if (m.split == motion::split_kind::train) {
            gallery.push_back(&m);
            gl.push_back(m.style_id);
        } else {
            queries.push_back(&m);
            ql.push_back(m.style_id);
        }
    }
    sampler s{&bb, &ad};
    return eval::nearest_neighbor_accuracy(s.style_embeddings(gallery), gl, s.style_embeddings(queries), ql);
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct ablation_axes {
    std::vector<double> fractions{1.0, 0.25};
    std::vector<bool> supcon{true, false};
    std::vector<bool> guidance{true, false};
};

inline std::string cell_name(double fraction, bool supcon, bool guidance) {
    std::ostringstream os;
    os << "frac=" << eval::fixed(fraction, 2) << "/supcon=" << (supcon ? "on" : "off") << "/guidance=" << (guidance ? "on" : "off");
    return os.str();
}

struct ablation_result {
    std::vector<eval::metric_report> cells;                    // mean over seeds
    std::map<std::string, std::vector<eval::metric_report>> per_seed;  // by cell name
};

inline std::string config_digest(const nlohmann::json& j) {
    const auto s = j.dump();
    std::ostringstream os;
    os << std::hex << std::setw(8) << std::setfill('0') << motion::io::crc32_of(s);
    return os.str();
}

using progress_fn = std::function<void(const std::string&)>;
using adapter_fn = std::function<void(double fraction, bool supcon, std::uint64_t seed, const style_adapter&)>;

// For every (fraction, supcon) pair and seed an adapter is trained with a
// seed-derived initialization and batch order, then sampled with guidance on
// and off. A failed training or evaluation marks the cell and the grid moves on.
inline ablation_result run_ablation_grid(const backbone& bb, const motion::dataset& ds, const evaluator& ev,
                                         const pipeline_config& base, const ablation_axes& axes,
                                         const std::vector<std::uint64_t>& seeds, const progress_fn& log = {},
                                         const adapter_fn& on_adapter = {}) {
    require(!seeds.empty(), errc::invalid_argument, "ablation needs at least one seed");
    ablation_result res;
    for (double frac : axes.fractions) {
        const auto split = split_styles(ds.num_styles(), frac);
        const std::size_t per = items_per_cell(base, split.evaluated.size(), ds.num_contents());
        const tensor real = ev.real_features(ds, split.evaluated, 2 * base.classifier.embed);
        for (bool supcon : axes.supcon) {
            for (std::uint64_t seed : seeds) {
                pipeline_config c = base;
                c.styles_fraction = frac;
                c.train.lambda_supcon = supcon ? base.train.lambda_supcon : 0.0;
                c.train.seed = derive_seed(base.train.seed, "grid-seed", seed);
                std::optional<style_adapter> ad;
                std::string failure;
                try {
                    backbone frozen = bb;
                    style_adapter a(frozen.net, frozen.vae.latent_width(), c.adapter, derive_seed(base.adapter_seed(), "grid-seed", seed));
                    train_style_adapter(frozen, a, motion::filter_styles(ds, split.trained), c.train);
                    ad = std::move(a);
                    if (on_adapter) on_adapter(frac, supcon, seed, *ad);
                } catch (const std::exception& e) {
                    failure = std::string("adapter training failed: ") + e.what();
                }
                const auto plan = make_eval_plan(ds, split.evaluated, per, derive_seed(base.seed, "grid-plan", seed));
                for (bool guided : axes.guidance) {
                    const auto name = cell_name(frac, supcon, guided);
                    eval::metric_report r;
                    if (ad) {
                        try {
                            guidance_config g = c.guidance;
                            if (!guided) g.lambda_style = 0.0;
                            sampler s{&bb, &*ad};
                            r = evaluate_variant(s, ds, ev, plan, g, base.sample_seed(seed), real);
                        } catch (const std::exception& e) {
                            r.failed = true;
                            r.failure = std::string("evaluation failed: ") + e.what();
                        }
                    } else {
                        r.failed = true;
                        r.failure = failure;
                    }
                    r.cell = name;
                    res.per_seed[name].push_back(r);
                    if (log) log(name + " seed=" + std::to_string(seed) + (r.failed ? " failed: " + r.failure : " sra=" + eval::fixed(r.sra_top1, 4)));
                }
            }
        }
    }
    // means in axis order
    for (double frac : axes.fractions) {
        for (bool supcon : axes.supcon) {
            for (bool guided : axes.guidance) {
                const auto name = cell_name(frac, supcon, guided);
                const auto& runs = res.per_seed[name];
                eval::metric_report m;
                m.cell = name;
                double n = 0;
                for (const auto& r : runs) {
                    if (r.failed) {
                        m.failed = true;
                        m.failure = r.failure;
                        continue;
                    }
                    m.sra_top1 += r.sra_top1;
                    m.sra_top3 += r.sra_top3;
                    m.content_acc += r.content_acc;
                    m.latent_fid += r.latent_fid;
                    m.samples += r.samples;
                    n += 1;
                }
                if (n > 0) {
                    m.sra_top1 /= n;
                    m.sra_top3 /= n;
                    m.content_acc /= n;
                    m.latent_fid /= n;
                }
                res.cells.push_back(m);
            }
        }
    }
    return res;
}

inline nlohmann::json to_json(const eval::metric_report& r) {
    nlohmann::json j{{"cell", r.cell},           {"sra_top1", r.sra_top1},     {"sra_top3", r.sra_top3},
                     {"content_acc", r.content_acc}, {"latent_fid", r.latent_fid}, {"samples", r.samples},
                     {"config_digest", r.config_digest}, {"status", r.failed ? "failed" : "ok"}};
    if (r.failed) j["failure"] = r.failure;
    return j;
}

}  // namespace hlm
