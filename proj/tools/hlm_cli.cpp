// SPDX-License-Identifier: Apache-2.0
// hlm: data generation, training, sampling, evaluation and rendering.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "hlm/config.hpp"

namespace fs = std::filesystem;
using namespace hlm;
using nlohmann::json;

namespace {

constexpr const char* version = "0.1.0";

// Options shared by every subcommand; per-command overrides are optional so
// only flags actually given replace config-file values.
struct options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::string data, backbone_path, adapter_path;
    std::optional<double> w_text, w_style, lambda_style, styles_fraction;
    bool no_supcon = false, no_style_guidance = false;
    std::optional<std::string> backprop;
    // command specific
    std::string prompt;
    std::optional<std::uint32_t> style;
    std::size_t count = 1, frames = 48;
    std::size_t source = 0, invert_steps = 500;
    std::string constraint_kind = "trajectory";
    std::size_t target = 0;
    double constraint_weight = 0.3;
    std::size_t constraint_iterations = 2;
    std::vector<std::size_t> keys;
    std::size_t seeds = 3;
    std::vector<double> fractions{1.0, 0.25};
    std::string input, output;
    std::size_t index = 0, stride = 4;
    bool svg = false;
};

std::size_t worker_cap() {
    // all kernels are sequential; the cap is validated and recorded only
    const char* env = std::getenv("HLM_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    require(end != env && *end == '\0' && v >= 1, errc::invalid_argument, "HLM_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

pipeline_config effective_config(const options& o) {
    pipeline_config c;
    if (!o.config_path.empty()) apply_config_file(c, o.config_path);
    if (o.seed) c.seed = *o.seed;
    if (o.w_text) c.guidance.w_text = *o.w_text;
    if (o.w_style) c.guidance.w_style = *o.w_style;
    if (o.lambda_style) c.guidance.lambda_style = *o.lambda_style;
    if (o.no_style_guidance) c.guidance.lambda_style = 0.0;
    if (o.backprop) c.guidance.backprop = parse_backprop_mode(*o.backprop);
    if (o.styles_fraction) c.styles_fraction = *o.styles_fraction;
    if (o.no_supcon) c.train.lambda_supcon = 0.0;
    c.reseed();
    c.validate();
    return c;
}

std::string file_digest(const fs::path& p) {
    std::ostringstream os;
    os << std::hex << std::setw(8) << std::setfill('0') << motion::io::crc32_of(motion::io::read_file(p));
    return os.str();
}

fs::path in_out(const options& o, const std::string& given, const char* fallback) {
    return given.empty() ? fs::path(o.out) / fallback : fs::path(given);
}

void write_sidecar(const fs::path& artifact, const std::string& command, const pipeline_config& c,
                   const std::vector<fs::path>& inputs, json extra = json::object()) {
    json j;
    j["command"] = command;
    j["seed"] = c.seed;
    j["version"] = version;
    j["config"] = to_json(c);
    j["threads"] = worker_cap();
    json in = json::object();
    for (const auto& p : inputs) in[p.string()] = file_digest(p);
    j["inputs"] = in;
    j["output_digest"] = file_digest(artifact);
    for (auto& [k, v] : extra.items()) j[k] = v;
    motion::io::write_file_atomic(artifact.string() + ".json", j.dump(2) + "\n");
}

std::size_t resolve_prompt(const motion::dataset& ds, const std::string& p) {
    for (std::size_t i = 0; i < ds.num_contents(); ++i) {
        if (p == ds.content_names[i] || p == ds.content_prompts[i] || p == std::to_string(i)) return i;
    }
    throw error(errc::invalid_argument, "unknown prompt '" + p + "'");
}

backbone load_backbone(const fs::path& p) { return backbone_from_checkpoint(load_checkpoint(p)); }

motion::dataset as_dataset(const motion::dataset& like, std::vector<motion::motion_sequence> ms) {
    motion::dataset out;
    out.style_names = like.style_names;
    out.content_names = like.content_names;
    out.content_prompts = like.content_prompts;
    for (auto& m : ms) m.split = motion::split_kind::test;
    out.sequences = std::move(ms);
    return out;
}

json trace_json(const sample_trace& t) {
    return json{{"timesteps", t.timesteps}, {"style_loss", t.style_loss}, {"constraint_loss", t.constraint_loss},
                {"diagnostics", t.diagnostics}};
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

// ---------------------------------------------------------------------------

int cmd_gen_data(const options& o) {
    auto c = effective_config(o);
    fs::create_directories(o.out);
    auto ds = make_dataset(c);
    const fs::path out = fs::path(o.out) / "dataset.hlmd";
    motion::save_dataset(ds, out);
    write_sidecar(out, "gen-data", c, {}, {{"sequences", ds.sequences.size()}});
    std::cout << out.string() << '\n';
    return 0;
}

int cmd_pretrain(const options& o) {
    auto c = effective_config(o);
    const auto data = in_out(o, o.data, "dataset.hlmd");
    auto ds = motion::load_dataset(data);
    fs::create_directories(o.out);
    c.denoiser.num_contents = ds.num_contents();
    auto bb = make_backbone(c);
    auto rep = pretrain_backbone(bb, ds, c.pretrain, [](const std::string& stage, std::size_t epoch, double loss) {
        log_line(stage + " epoch " + std::to_string(epoch) + " loss " + eval::fixed(loss));
    });
    const fs::path out = fs::path(o.out) / "backbone.hlck";
    save_checkpoint(backbone_checkpoint(bb, {{"seed", c.seed}}), out);
    write_sidecar(out, "pretrain", c, {data},
                  {{"reconstruction_mse", rep.reconstruction_mse},
                   {"vae_epoch_loss", rep.vae_epoch_loss},
                   {"denoiser_epoch_loss", rep.denoiser_epoch_loss}});
    std::cout << out.string() << '\n';
    return 0;
}

int cmd_train_adapter(const options& o) {
    auto c = effective_config(o);
    const auto data = in_out(o, o.data, "dataset.hlmd");
    const auto bpath = in_out(o, o.backbone_path, "backbone.hlck");
    auto ds = motion::load_dataset(data);
    auto bb = load_backbone(bpath);
    fs::create_directories(o.out);
    const auto split = split_styles(ds.num_styles(), c.styles_fraction);
    style_adapter ad(bb.net, bb.vae.latent_width(), c.adapter, c.adapter_seed());
    std::string jsonl;
    auto rep = train_style_adapter(bb, ad, motion::filter_styles(ds, split.trained), c.train, [&](const train_step_log& l) {
        jsonl += to_jsonl(l) + "\n";
    });
    for (const auto& w : rep.warnings) log_line("warning: " + w);
    const fs::path out = fs::path(o.out) / "adapter.hlck";
    save_checkpoint(adapter_checkpoint(ad, {{"seed", c.seed}, {"trained_styles", rep.trained_styles}}), out);
    // timing fields vary run to run; kept out of the digested artifact
    motion::io::write_file_atomic(fs::path(o.out) / "train_log.jsonl", jsonl);
    write_sidecar(out, "train-adapter", c, {data, bpath},
                  {{"trained_styles", rep.trained_styles},
                   {"warnings", rep.warnings},
                   {"probe_supcon_before", rep.probe_supcon_before},
                   {"probe_supcon_after", rep.probe_supcon_after}});
    std::cout << out.string() << '\n';
    return 0;
}

struct loaded {
    motion::dataset ds;
    backbone bb;
    std::optional<style_adapter> ad;
    std::vector<fs::path> inputs;
};

loaded load_models(const options& o, bool need_adapter) {
    loaded l;
    const auto data = in_out(o, o.data, "dataset.hlmd");
    const auto bpath = in_out(o, o.backbone_path, "backbone.hlck");
    const auto apath = in_out(o, o.adapter_path, "adapter.hlck");
    l.bb = load_backbone(bpath);
    l.ds = motion::load_dataset(data);
    l.inputs = {data, bpath};
    if (need_adapter) {
        l.ad = adapter_from_checkpoint(load_checkpoint(apath), l.bb);
        l.inputs.push_back(apath);
    }
    return l;
}

std::vector<const motion::motion_sequence*> pick_refs(const loaded& l, std::uint32_t style, std::size_t prompt,
                                                      std::size_t count, std::uint64_t seed) {
    const auto pool = reference_pool(l.ds, style, prompt);
    auto gen = make_rng(seed, "cli-references");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<const motion::motion_sequence*> refs;
    for (std::size_t i = 0; i < count; ++i) refs.push_back(pool[pick(gen)]);
    return refs;
}

int cmd_sample(const options& o) {
    auto c = effective_config(o);
    auto l = load_models(o, o.style.has_value());
    fs::create_directories(o.out);
    const std::size_t prompt = resolve_prompt(l.ds, o.prompt);
    require(o.count >= 1, errc::invalid_argument, "--count must be >= 1");
    sampler s{&l.bb, l.ad ? &*l.ad : nullptr};
    std::optional<tensor> s_ref;
    std::vector<std::size_t> styles(o.count, 0);
    json refs = json::array();
    if (o.style) {
        require(*o.style < l.ds.num_styles(), errc::invalid_argument, "unknown style id " + std::to_string(*o.style));
        auto r = pick_refs(l, *o.style, prompt, o.count, c.seed);
        for (const auto* m : r) refs.push_back(m - l.ds.sequences.data());
        s_ref = s.style_embeddings(r);
        styles.assign(o.count, *o.style);
    }
    sample_trace trace;
    auto frames = s.sample(std::vector<std::size_t>(o.count, prompt), s_ref, o.frames, c.guidance, c.seed, nullptr, &trace);
    auto ms = to_sequences(frames, std::vector<std::size_t>(o.count, prompt), styles, l.bb.vae.cfg.fps);
    const fs::path out = fs::path(o.out) / "samples.hlmd";
    motion::save_dataset(as_dataset(l.ds, ms), out);
    if (o.svg) motion::io::write_file_atomic(fs::path(o.out) / "samples.svg", motion::render_svg(ms[0], o.stride).document);
    write_sidecar(out, "sample", c, l.inputs,
                  {{"prompt", prompt}, {"style", o.style ? json(*o.style) : json(nullptr)}, {"references", refs},
                   {"trace", trace_json(trace)}});
    std::cout << out.string() << '\n';
    return 0;
}

int cmd_transfer(const options& o) {
    auto c = effective_config(o);
    auto l = load_models(o, o.style.has_value());
    fs::create_directories(o.out);
    require(o.source < l.ds.sequences.size(), errc::invalid_argument, "source index out of range");
    const auto& src = l.ds.sequences[o.source];
    const std::size_t prompt = o.prompt.empty() ? src.content_id : resolve_prompt(l.ds, o.prompt);
    sampler s{&l.bb, l.ad ? &*l.ad : nullptr};
    std::optional<tensor> s_ref;
    std::uint32_t style = src.style_id;
    if (o.style) {
        style = *o.style;
        s_ref = s.style_embeddings(pick_refs(l, style, prompt, 1, c.seed));
    }
    auto frames = s.transfer(src, prompt, s_ref, o.invert_steps, c.guidance);
    auto ms = to_sequences(frames, {prompt}, {style}, l.bb.vae.cfg.fps);
    const fs::path out = fs::path(o.out) / "transfer.hlmd";
    motion::save_dataset(as_dataset(l.ds, ms), out);
    if (o.svg) motion::io::write_file_atomic(fs::path(o.out) / "transfer.svg", motion::render_svg(ms[0], o.stride).document);
    write_sidecar(out, "transfer", c, l.inputs, {{"source", o.source}, {"invert_steps", o.invert_steps}, {"prompt", prompt}});
    std::cout << out.string() << '\n';
    return 0;
}

int cmd_sample_constrained(const options& o) {
    auto c = effective_config(o);
    auto l = load_models(o, o.style.has_value());
    fs::create_directories(o.out);
    require(o.target < l.ds.sequences.size(), errc::invalid_argument, "target index out of range");
    const auto& tgt = l.ds.sequences[o.target];
    require(tgt.length() >= o.frames, errc::invalid_argument, "target motion shorter than --frames");
    const auto win = motion::crop(tgt, 0, o.frames);
    const std::size_t prompt = o.prompt.empty() ? tgt.content_id : resolve_prompt(l.ds, o.prompt);
    constraint_spec spec;
    spec.weight = o.constraint_weight;
    spec.iterations = o.constraint_iterations;
    if (o.constraint_kind == "trajectory") {
        spec.kind = constraint_kind::trajectory;
        spec.root_path = tensor({o.frames, 2});
        for (std::size_t t = 0; t < o.frames; ++t) {
            spec.root_path[2 * t] = win.at(t, 0);
            spec.root_path[2 * t + 1] = win.at(t, 1);
        }
    } else if (o.constraint_kind == "keyframe") {
        spec.kind = constraint_kind::keyframe;
        auto keys = o.keys.empty() ? std::vector<std::size_t>{0, o.frames - 1} : o.keys;
        for (auto k : keys) {
            require(k < o.frames, errc::invalid_argument, "keyframe index outside --frames");
            tensor pose({motion::num_features});
            for (std::size_t f = 0; f < motion::num_features; ++f) pose[f] = win.at(k, f);
            spec.keys.emplace_back(k, pose);
        }
    } else {
        throw error(errc::invalid_argument, "--kind must be trajectory or keyframe");
    }
    sampler s{&l.bb, l.ad ? &*l.ad : nullptr};
    std::optional<tensor> s_ref;
    std::uint32_t style = tgt.style_id;
    if (o.style) {
        style = *o.style;
        s_ref = s.style_embeddings(pick_refs(l, style, prompt, 1, c.seed));
    }
    sample_trace trace;
    auto frames = s.sample({prompt}, s_ref, o.frames, c.guidance, c.seed, &spec, &trace);
    auto ms = to_sequences(frames, {prompt}, {style}, l.bb.vae.cfg.fps);
    const fs::path out = fs::path(o.out) / "constrained.hlmd";
    motion::save_dataset(as_dataset(l.ds, ms), out);
    if (o.svg) motion::io::write_file_atomic(fs::path(o.out) / "constrained.svg", motion::render_svg(ms[0], o.stride).document);
    write_sidecar(out, "sample-constrained", c, l.inputs,
                  {{"kind", o.constraint_kind}, {"target", o.target}, {"weight", o.constraint_weight}, {"trace", trace_json(trace)}});
    std::cout << out.string() << '\n';
    return 0;
}

std::vector<std::uint64_t> seed_list(std::size_t n) {
    require(n >= 1, errc::invalid_argument, "--seeds must be >= 1");
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = i;
    return s;
}

// Backbone only, adapter without guidance, adapter with guidance; one row per
// variant and seed plus the seed means.
int cmd_eval(const options& o) {
    auto c = effective_config(o);
    auto l = load_models(o, true);
    fs::create_directories(o.out);
    evaluator ev(l.ds, c.classifier);
    json clf{{"style_held_out_accuracy", ev.style_clf.held_out_accuracy},
             {"content_held_out_accuracy", ev.content_clf.held_out_accuracy}};
    ev.validate(c.classifier.min_held_out_accuracy);
    const auto split = split_styles(l.ds.num_styles(), 1.0);
    const auto real = ev.real_features(l.ds, split.evaluated, 2 * c.classifier.embed);
    const std::string digest = config_digest(to_json(c));
    std::vector<eval::metric_report> rows;
    struct variant {
        const char* name;
        bool adapter;
        bool guided;
    };
    const variant variants[] = {{"backbone", false, false}, {"adapter", true, false}, {"adapter+guidance", true, true}};
    for (const auto& v : variants) {
        eval::metric_report mean;
        mean.cell = std::string(v.name) + "/mean";
        const auto seeds = seed_list(o.seeds);
        for (auto seed : seeds) {
            const auto plan = make_eval_plan(l.ds, split.evaluated, items_per_cell(c, split.evaluated.size(), l.ds.num_contents()),
                                             derive_seed(c.seed, "eval-plan", seed));
            guidance_config g = c.guidance;
            if (!v.adapter) g.w_style = 0.0;
            if (!v.guided) g.lambda_style = 0.0;
            sampler s{&l.bb, v.adapter ? &*l.ad : nullptr};
            auto r = evaluate_variant(s, l.ds, ev, plan, g, c.sample_seed(seed), real);
            r.cell = std::string(v.name) + "/seed=" + std::to_string(seed);
            r.config_digest = digest;
            rows.push_back(r);
            mean.sra_top1 += r.sra_top1 / static_cast<double>(seeds.size());
            mean.sra_top3 += r.sra_top3 / static_cast<double>(seeds.size());
            mean.content_acc += r.content_acc / static_cast<double>(seeds.size());
            mean.latent_fid += r.latent_fid / static_cast<double>(seeds.size());
            mean.samples += r.samples;
            log_line(r.cell + " sra " + eval::fixed(r.sra_top1, 4));
        }
        mean.config_digest = digest;
        rows.push_back(mean);
    }
    const fs::path out = fs::path(o.out) / "metrics.csv";
    motion::io::write_file_atomic(out, eval::to_csv(rows));
    json j = json::array();
    for (const auto& r : rows) j.push_back(to_json(r));
    motion::io::write_file_atomic(fs::path(o.out) / "metrics.json", j.dump(2) + "\n");
    write_sidecar(out, "eval", c, l.inputs, {{"classifiers", clf}});
    std::cout << out.string() << '\n';
    return 0;
}

int cmd_ablate(const options& o) {
    auto c = effective_config(o);
    auto l = load_models(o, false);
    fs::create_directories(o.out);
    evaluator ev(l.ds, c.classifier);
    ev.validate(c.classifier.min_held_out_accuracy);
    ablation_axes axes;
    axes.fractions = o.fractions;
    auto res = run_ablation_grid(l.bb, l.ds, ev, c, axes, seed_list(o.seeds), log_line);
    const std::string digest = config_digest(to_json(c));
    for (auto& r : res.cells) r.config_digest = digest;
    const fs::path out = fs::path(o.out) / "ablation.csv";
    motion::io::write_file_atomic(out, eval::to_csv(res.cells));
    json j{{"cells", json::array()}, {"per_seed", json::object()}};
    for (const auto& r : res.cells) j["cells"].push_back(to_json(r));
    for (const auto& [name, runs] : res.per_seed) {
        for (const auto& r : runs) j["per_seed"][name].push_back(to_json(r));
    }
    motion::io::write_file_atomic(fs::path(o.out) / "ablation.json", j.dump(2) + "\n");
    write_sidecar(out, "ablate", c, l.inputs);
    std::cout << out.string() << '\n';
    return 0;
}

int cmd_render(const options& o) {
    require(!o.input.empty(), errc::invalid_argument, "--input is required");
    auto ds = motion::load_dataset(o.input);
    require(o.index < ds.sequences.size(), errc::invalid_argument, "--index out of range");
    auto svg = motion::render_svg(ds.sequences[o.index], o.stride);
    const fs::path out = o.output.empty() ? fs::path(o.out) / "render.svg" : fs::path(o.output);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    motion::io::write_file_atomic(out, svg.document);
    std::cout << out.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hlm: style-conditioned motion diffusion with hypernetwork LoRA adapters"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version);
    options o;

    auto common = [&](CLI::App* sc) {
        sc->add_option("--config", o.config_path, "TOML config file")->check(CLI::ExistingFile);
        sc->add_option("--seed", o.seed, "master seed");
        sc->add_option("--out", o.out, "output directory");
    };
    auto models = [&](CLI::App* sc) {
        sc->add_option("--data", o.data, "dataset file (default <out>/dataset.hlmd)");
        sc->add_option("--backbone", o.backbone_path, "backbone checkpoint (default <out>/backbone.hlck)");
        sc->add_option("--adapter", o.adapter_path, "adapter checkpoint (default <out>/adapter.hlck)");
    };
    auto guidance = [&](CLI::App* sc) {
        sc->add_option("--w-text", o.w_text, "text guidance weight");
        sc->add_option("--w-style", o.w_style, "style guidance weight");
        sc->add_option("--lambda-style", o.lambda_style, "style-encoder guidance step size");
        sc->add_flag("--no-style-guidance", o.no_style_guidance, "disable style-encoder guidance");
        sc->add_option("--backprop-mode", o.backprop, "full or frozen-velocity")->check(CLI::IsMember({"full", "frozen-velocity"}));
    };
    auto training = [&](CLI::App* sc) {
        sc->add_option("--styles-fraction", o.styles_fraction, "fraction of styles seen by the adapter");
        sc->add_flag("--no-supcon", o.no_supcon, "train without the contrastive term");
    };
    auto outputs = [&](CLI::App* sc) {
        sc->add_flag("--svg", o.svg, "also write an SVG render of the first motion");
        sc->add_option("--stride", o.stride, "frame stride for SVG renders");
    };

    std::vector<std::pair<CLI::App*, std::function<int(const options&)>>> cmds;
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic styled locomotion dataset");
    common(gen);
    cmds.emplace_back(gen, cmd_gen_data);

    auto* pre = app.add_subcommand("pretrain", "train the VAE and the denoiser backbone");
    common(pre);
    pre->add_option("--data", o.data, "dataset file (default <out>/dataset.hlmd)");
    cmds.emplace_back(pre, cmd_pretrain);

    auto* tra = app.add_subcommand("train-adapter", "train the style encoder and hypernetwork on a frozen backbone");
    common(tra);
    tra->add_option("--data", o.data, "dataset file (default <out>/dataset.hlmd)");
    tra->add_option("--backbone", o.backbone_path, "backbone checkpoint (default <out>/backbone.hlck)");
    training(tra);
    cmds.emplace_back(tra, cmd_train_adapter);

    auto* smp = app.add_subcommand("sample", "generate motions for a prompt, optionally in a reference style");
    common(smp);
    models(smp);
    guidance(smp);
    outputs(smp);
    smp->add_option("--prompt", o.prompt, "content name, prompt text or id")->required();
    smp->add_option("--style", o.style, "style id; a reference of that style is drawn from the dataset");
    smp->add_option("--count", o.count, "number of motions");
    smp->add_option("--frames", o.frames, "frames per motion");
    cmds.emplace_back(smp, cmd_sample);

    auto* trf = app.add_subcommand("transfer", "re-style a dataset motion through DDIM inversion");
    common(trf);
    models(trf);
    guidance(trf);
    outputs(trf);
    trf->add_option("--source", o.source, "dataset index of the source motion");
    trf->add_option("--prompt", o.prompt, "target content (default: the source content)");
    trf->add_option("--style", o.style, "target style id");
    trf->add_option("--invert-steps", o.invert_steps, "inversion depth in diffusion steps");
    cmds.emplace_back(trf, cmd_transfer);

    auto* con = app.add_subcommand("sample-constrained", "sample under a root trajectory or keyframe constraint");
    common(con);
    models(con);
    guidance(con);
    outputs(con);
    con->add_option("--kind", o.constraint_kind, "trajectory or keyframe")->check(CLI::IsMember({"trajectory", "keyframe"}));
    con->add_option("--target", o.target, "dataset index supplying the target path or poses");
    con->add_option("--prompt", o.prompt, "content (default: the target's content)");
    con->add_option("--style", o.style, "style id");
    con->add_option("--weight", o.constraint_weight, "normalized constraint step per sampling step");
    con->add_option("--iterations", o.constraint_iterations, "constraint updates per sampling step");
    con->add_option("--keys", o.keys, "keyframe indices")->delimiter(',');
    con->add_option("--frames", o.frames, "frames per motion");
    cmds.emplace_back(con, cmd_sample_constrained);

    auto* evl = app.add_subcommand("eval", "score backbone, adapter and guided samples");
    common(evl);
    models(evl);
    guidance(evl);
    evl->add_option("--seeds", o.seeds, "number of evaluation seeds");
    cmds.emplace_back(evl, cmd_eval);

    auto* abl = app.add_subcommand("ablate", "supcon x guidance x style-fraction grid");
    common(abl);
    models(abl);
    guidance(abl);
    abl->add_option("--seeds", o.seeds, "number of seeds per cell");
    abl->add_option("--fractions", o.fractions, "style fractions")->delimiter(',');
    cmds.emplace_back(abl, cmd_ablate);

    auto* ren = app.add_subcommand("render", "draw one motion of a dataset file as SVG");
    common(ren);
    ren->add_option("--input", o.input, "dataset or sample file")->required();
    ren->add_option("--index", o.index, "sequence index");
    ren->add_option("--stride", o.stride, "frame stride");
    ren->add_option("--output", o.output, "SVG path (default <out>/render.svg)");
    cmds.emplace_back(ren, cmd_render);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << '\n' << app.help();
        return 2;
    }
    try {
        worker_cap();
        for (auto& [sc, fn] : cmds) {
            if (sc->parsed()) return fn(o);
        }
    } catch (const hlm::error& e) {
        std::cerr << "error: " << errc_name(e.code()) << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
