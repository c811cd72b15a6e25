// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "hlm/config.hpp"
#include "hlm/pipeline.hpp"
#include "tiny_models.hpp"

using namespace hlm;

TEST(Config, AppliesKnownKeys) {
    pipeline_config c;
    apply_config_text(c, R"(
[run]
seed = 9
styles_fraction = 0.25
schedule = "linear-vp"
[train]
lr = 0.0005
epochs = 3
[guidance]
backprop = "frozen-velocity"
w_style = 2
)");
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.styles_fraction, 0.25);
    EXPECT_EQ(c.schedule, diffusion::schedule_kind::linear_vp);
    EXPECT_EQ(c.train.lr, 0.0005);
    EXPECT_EQ(c.train.epochs, 3u);
    EXPECT_EQ(c.guidance.backprop, backprop_mode::frozen_velocity);
    EXPECT_EQ(c.guidance.w_style, 2.0);
    EXPECT_EQ(to_json(c)["train"]["epochs"], 3);
}

TEST(Config, RejectsUnknownKeysSectionsAndTypes) {
    pipeline_config c;
    EXPECT_THROW(apply_config_text(c, "[train]\nlearning_rate = 1.0\n"), error);
    EXPECT_THROW(apply_config_text(c, "[nope]\nx = 1\n"), error);
    EXPECT_THROW(apply_config_text(c, "seed = 1\n"), error);
    EXPECT_THROW(apply_config_text(c, "[train]\nepochs = \"many\"\n"), error);
    EXPECT_THROW(apply_config_text(c, "[train]\nepochs = 1.5\n"), error);
    EXPECT_THROW(apply_config_text(c, "[guidance]\nbackprop = \"sideways\"\n"), error);
    EXPECT_THROW(apply_config_text(c, "[train\n"), error);
    try {
        apply_config_text(c, "[train]\nlearning_rate = 1.0\n");
    } catch (const error& e) {
        EXPECT_NE(std::string(e.what()).find("train.learning_rate"), std::string::npos);
    }
}

TEST(Config, JsonEchoIsStable) {
    pipeline_config a, b;
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(config_digest(to_json(a)), config_digest(to_json(b)));
    b.train.lr = 2e-3;
    EXPECT_NE(config_digest(to_json(a)), config_digest(to_json(b)));
}

TEST(Pipeline, SeedDerivationIsPurposeTagged) {
    pipeline_config c;
    c.seed = 5;
    c.reseed();
    EXPECT_NE(c.pretrain.seed, c.train.seed);
    EXPECT_NE(c.data_seed(), c.backbone_seed());
    auto d = c;
    d.reseed();
    EXPECT_EQ(c.train.seed, d.train.seed);
}

TEST(Pipeline, StyleSplitUsesComplementForPartialFraction) {
    auto full = split_styles(8, 1.0);
    EXPECT_EQ(full.trained.size(), 8u);
    EXPECT_EQ(full.evaluated, full.trained);
    auto quarter = split_styles(8, 0.25);
    EXPECT_EQ(quarter.trained, (std::vector<std::uint32_t>{0, 1}));
    EXPECT_EQ(quarter.evaluated, (std::vector<std::uint32_t>{2, 3, 4, 5, 6, 7}));
}

TEST(Pipeline, EvalPlanReferencesShareStyleNotContent) {
    auto ds = motion::generate_dataset(motion::default_styles(), motion::default_contents(), 2, 1);
    auto plan = make_eval_plan(ds, {0, 3}, 2, 7);
    ASSERT_EQ(plan.prompts.size(), 2u * 5u * 2u);
    for (std::size_t i = 0; i < plan.prompts.size(); ++i) {
        EXPECT_EQ(plan.refs[i]->style_id, plan.styles[i]);
        EXPECT_NE(plan.refs[i]->content_id, plan.prompts[i]);
        if (plan.prompts[i] != motion::held_out_content(plan.styles[i], 5)) {
            EXPECT_EQ(plan.refs[i]->split, motion::split_kind::test);
        }
    }
    auto again = make_eval_plan(ds, {0, 3}, 2, 7);
    EXPECT_EQ(again.refs, plan.refs);
}

TEST(Pipeline, ItemsPerCellCoversFrechetRank) {
    pipeline_config c;
    c.classifier.embed = 32;
    c.eval_per_cell = 2;
    EXPECT_EQ(items_per_cell(c, 8, 5), 2u);
    EXPECT_EQ(items_per_cell(c, 6, 5), 3u);
}

namespace {
struct grid_fixture {
    tiny_models m;
    pipeline_config cfg;
    evaluator ev;
    grid_fixture() {
        cfg.window = 16;
        cfg.classifier.window = 16;
        cfg.classifier.embed = 4;
        cfg.classifier.hidden = 16;
        cfg.classifier.steps = 150;
        cfg.classifier.batch = 32;
        cfg.classifier.windows_per_sequence = 2;
        cfg.adapter = tiny_models::adapter();
        cfg.train.epochs = 2;
        cfg.train.steps_per_epoch = 2;
        cfg.train.batch = 16;
        cfg.guidance.steps = 3;
        cfg.eval_per_cell = 1;
        cfg.seed = 1;
        cfg.reseed();
        ev = evaluator(m.ds, cfg.classifier);
    }
};
grid_fixture& fixture() {
    static grid_fixture f;
    return f;
}
}  // namespace

TEST(Ablation, SingleCellSingleSeedEqualsOnePipelineRun) {
    auto& f = fixture();
    ablation_axes axes{{1.0}, {true}, {true}};
    auto res = run_ablation_grid(f.m.bb, f.m.ds, f.ev, f.cfg, axes, {4});
    ASSERT_EQ(res.cells.size(), 1u);
    EXPECT_FALSE(res.cells[0].failed);

    // same steps by hand
    pipeline_config c = f.cfg;
    c.train.seed = derive_seed(f.cfg.train.seed, "grid-seed", 4);
    backbone bb = f.m.bb;
    style_adapter ad(bb.net, bb.vae.latent_width(), c.adapter, derive_seed(f.cfg.adapter_seed(), "grid-seed", 4));
    train_style_adapter(bb, ad, f.m.ds, c.train);
    const auto split = split_styles(8, 1.0);
    auto plan = make_eval_plan(f.m.ds, split.evaluated, items_per_cell(c, 8, 5), derive_seed(f.cfg.seed, "grid-plan", 4));
    auto real = f.ev.real_features(f.m.ds, split.evaluated, 2 * c.classifier.embed);
    sampler s{&f.m.bb, &ad};
    auto r = evaluate_variant(s, f.m.ds, f.ev, plan, c.guidance, f.cfg.sample_seed(4), real);
    EXPECT_EQ(r.sra_top1, res.cells[0].sra_top1);
    EXPECT_EQ(r.content_acc, res.cells[0].content_acc);
    EXPECT_EQ(r.latent_fid, res.cells[0].latent_fid);
}

TEST(Ablation, FailedCellIsMarkedAndGridContinues) {
    auto& f = fixture();
    // one trained style cannot form contrastive batches
    ablation_axes axes{{0.125, 1.0}, {true}, {false}};
    auto res = run_ablation_grid(f.m.bb, f.m.ds, f.ev, f.cfg, axes, {1});
    ASSERT_EQ(res.cells.size(), 2u);
    EXPECT_TRUE(res.cells[0].failed);
    EXPECT_NE(res.cells[0].failure.find("adapter training failed"), std::string::npos);
    EXPECT_FALSE(res.cells[1].failed);
    auto csv = eval::to_csv(res.cells);
    EXPECT_NE(csv.find(",failed\n"), std::string::npos);
    EXPECT_NE(csv.find(",ok\n"), std::string::npos);
}

TEST(Ablation, CsvIsByteIdenticalAcrossRuns) {
    auto& f = fixture();
    ablation_axes axes{{1.0}, {true, false}, {false}};
    auto a = eval::to_csv(run_ablation_grid(f.m.bb, f.m.ds, f.ev, f.cfg, axes, {2, 3}).cells);
    auto b = eval::to_csv(run_ablation_grid(f.m.bb, f.m.ds, f.ev, f.cfg, axes, {2, 3}).cells);
    EXPECT_EQ(a, b);
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 3);
}
