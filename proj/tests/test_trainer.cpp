// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "hlm/trainer.hpp"
#include "supcon_oracle.hpp"

using namespace hlm;

TEST(VelocityLoss, Examples) {
    auto gen = make_rng(1, "t");
    auto v = var::constant(tensor::randn({2, 3, 2, 2}, gen));
    EXPECT_EQ(velocity_loss(v, v).item(), 0.0);
    tensor shifted = v.value();
    for (auto& x : shifted.data()) x += 2.0;
    EXPECT_NEAR(velocity_loss(var::constant(shifted), v).item(), 4.0, 1e-12);
    auto w = tensor::randn(v.shape(), gen);
    double acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += (w[i] - v.value()[i]) * (w[i] - v.value()[i]);
    EXPECT_NEAR(velocity_loss(var::constant(w), v).item(), acc / static_cast<double>(w.size()), 1e-14);
    EXPECT_THROW(velocity_loss(v, var::constant(tensor({2, 3}))), error);
}

TEST(SupCon, TwoSameStyleIsExactlyZero) {
    auto gen = make_rng(2, "t");
    auto s = var::constant(tensor::randn({2, 5}, gen));
    EXPECT_EQ(supcon_loss(s, {3, 3}, 0.07).item(), 0.0);
}

TEST(SupCon, TwoDistinctStylesIsZeroBySkipping) {
    auto gen = make_rng(3, "t");
    auto s = var::constant(tensor::randn({2, 5}, gen));
    EXPECT_EQ(supcon_loss(s, {0, 1}, 0.07).item(), 0.0);
}

TEST(SupCon, ThreeItemExampleMatchesOracle) {
    tensor s({3, 2}, {1.0, 0.0, 1.0, 0.0, 0.0, 1.0});
    const std::vector<std::size_t> labels{0, 0, 1};
    const double got = supcon_loss(var::constant(s), labels, 0.07).item();
    EXPECT_NEAR(got, supcon_oracle(s, labels, 0.07), 1e-10);
    // closed form: anchors 0 and 1 each give log(1 + exp(-1/0.07)); anchor 2 is skipped
    EXPECT_NEAR(got, 2.0 * std::log1p(std::exp(-1.0 / 0.07)), 1e-12);
}

TEST(SupCon, MatchesOracleOnRandomBatches) {
    auto gen = make_rng(4, "t");
    std::uniform_int_distribution<std::size_t> nd(2, 8), ld(0, 3);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = nd(gen);
        auto s = tensor::randn({n, 4}, gen);
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = ld(gen);
        const double tau = trial % 2 ? 0.07 : 0.5;
        ASSERT_NEAR(supcon_loss(var::constant(s), labels, tau).item(), supcon_oracle(s, labels, tau), 1e-10) << trial;
    }
}

TEST(SupCon, GradientMatchesFiniteDifferences) {
    auto gen = make_rng(5, "t");
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> labels{0, 1, 0, 2, 1, 0};
        auto rep = grad_check([&](const var& x) { return supcon_loss(x, labels, 0.5); }, tensor::randn({6, 3}, gen));
        EXPECT_LT(rep.max_rel_error, 1e-5);
    }
}

TEST(SupCon, Errors) {
    auto gen = make_rng(6, "t");
    EXPECT_THROW(supcon_loss(var::constant(tensor::randn({1, 3}, gen)), {0}, 0.07), error);
    EXPECT_THROW(supcon_loss(var::constant(tensor::randn({2, 3}, gen)), {0, 0}, 0.0), error);
    tensor z({2, 3});
    z[0] = 1.0;
    EXPECT_THROW(supcon_loss(var::constant(z), {0, 0}, 0.07), error);
}

namespace {
std::filesystem::path tmp(const std::string& n) {
    return std::filesystem::temp_directory_path() / ("hlm_trainer_" + std::to_string(::getpid()) + "_" + n);
}
}  // namespace

TEST(Checkpoint, RoundtripAndCorruption) {
    auto gen = make_rng(7, "t");
    checkpoint ck;
    ck.tensors["a.weight"] = tensor::randn({3, 4}, gen);
    ck.tensors["b"] = tensor::scalar(2.5);
    ck.metadata = {{"kind", "test"}, {"seed", 7}};
    auto p = tmp("rt.hlck");
    save_checkpoint(ck, p);
    EXPECT_TRUE(load_checkpoint(p) == ck);
    auto bytes = motion::io::read_file(p);
    EXPECT_EQ(bytes.substr(0, 4), "HLCK");
    auto tampered = bytes;
    tampered[bytes.size() - 12] ^= 0x01;
    try {
        decode_checkpoint(tampered);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::format);
        EXPECT_NE(std::string(e.what()).find("CRC32"), std::string::npos);
    }
    auto version = bytes;
    version[4] = 7;
    EXPECT_THROW(decode_checkpoint(version), error);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, 30)), error);
    std::filesystem::remove(p);
    try {
        load_checkpoint(p);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::missing_checkpoint);
    }
}

namespace {

struct tiny_setup {
    motion::dataset ds;
    backbone bb;

    tiny_setup() {
        ds = motion::generate_dataset(motion::default_styles(), motion::default_contents(), 2, 5);
        vae_config vc;
        vc.hidden = 16;
        vc.latent_joints = 2;
        vc.latent_channels = 3;
        denoiser_config dc;
        dc.blocks = 1;
        dc.hidden = 8;
        dc.heads = 1;
        dc.latent_joints = 2;
        dc.latent_channels = 3;
        dc.time_width = 8;
        bb = backbone(vc, dc, 100, diffusion::schedule_kind::cosine, 3);
        bb.window = 16;
        pretrain_config pc;
        pc.vae_steps = 40;
        pc.denoiser_steps = 40;
        pc.batch = 8;
        pc.steps_per_epoch = 20;
        pretrain_backbone(bb, ds, pc);
    }
};

adapter_config tiny_adapter() {
    adapter_config ac;
    ac.style_width = 6;
    ac.encoder_width = 8;
    ac.encoder_blocks = 1;
    ac.trunk_width = 8;
    ac.rank = 2;
    ac.alpha = 2.0;
    return ac;
}

}  // namespace

TEST(Checkpoint, BackboneAndAdapterRoundtrip) {
    tiny_setup s;
    auto p = tmp("bb.hlck");
    save_checkpoint(backbone_checkpoint(s.bb), p);
    auto bb2 = backbone_from_checkpoint(load_checkpoint(p));
    EXPECT_TRUE(nn::snapshot(bb2.state()) == nn::snapshot(s.bb.state()));
    EXPECT_EQ(encode_checkpoint(backbone_checkpoint(bb2)), encode_checkpoint(backbone_checkpoint(s.bb)));
    style_adapter ad(s.bb.net, s.bb.vae.latent_width(), tiny_adapter(), 4);
    auto ack = adapter_checkpoint(ad);
    auto ad2 = adapter_from_checkpoint(decode_checkpoint(encode_checkpoint(ack)), s.bb);
    EXPECT_TRUE(nn::snapshot(ad2.parameters()) == nn::snapshot(ad.parameters()));
    EXPECT_THROW(adapter_from_checkpoint(backbone_checkpoint(s.bb), s.bb), error);
    std::filesystem::remove(p);
}

TEST(AdapterTraining, FrozenBackbonePairingAuditAndDeterminism) {
    tiny_setup s;
    const auto before = encode_checkpoint(backbone_checkpoint(s.bb));
    train_config tc;
    tc.epochs = 4;
    tc.steps_per_epoch = 5;
    tc.batch = 16;
    tc.lr = 3e-3;
    tc.seed = 2;
    auto run = [&] {
        style_adapter ad(s.bb.net, s.bb.vae.latent_width(), tiny_adapter(), 4);
        std::vector<std::string> log;
        auto rep = train_style_adapter(s.bb, ad, s.ds, tc, [&](const train_step_log& l) { log.push_back(to_jsonl(l)); });
        return std::tuple{rep, encode_checkpoint(adapter_checkpoint(ad)), log};
    };
    auto [rep, bytes, log] = run();
    EXPECT_EQ(encode_checkpoint(backbone_checkpoint(s.bb)), before);
    ASSERT_EQ(rep.first_epoch_pairs.size(), 5u * 16u);
    for (auto [t, r] : rep.first_epoch_pairs) {
        EXPECT_EQ(s.ds.sequences[t].style_id, s.ds.sequences[r].style_id);
        EXPECT_NE(s.ds.sequences[t].content_id, s.ds.sequences[r].content_id);
        EXPECT_EQ(s.ds.sequences[t].split, motion::split_kind::train);
    }
    ASSERT_EQ(log.size(), 20u);
    auto j = json::parse(log[0]);
    for (const char* k : {"step", "L_vel", "L_supcon", "L_total", "wall_time"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_LT(rep.epoch_total.back(), rep.epoch_total.front());
    auto [rep2, bytes2, log2] = run();
    EXPECT_EQ(bytes, bytes2);
}

TEST(AdapterTraining, ZeroSupConWeightIsPureVelocityLoss) {
    tiny_setup s;
    train_config tc;
    tc.epochs = 1;
    tc.steps_per_epoch = 3;
    tc.batch = 16;
    tc.lambda_supcon = 0.0;
    style_adapter ad(s.bb.net, s.bb.vae.latent_width(), tiny_adapter(), 4);
    train_style_adapter(s.bb, ad, s.ds, tc, [](const train_step_log& l) {
        EXPECT_EQ(l.l_supcon, 0.0);
        EXPECT_EQ(l.l_total, l.l_vel);
    });
}

TEST(AdapterTraining, StyleSubsetsUseTheSameCodePath) {
    tiny_setup s;
    train_config tc;
    tc.epochs = 1;
    tc.steps_per_epoch = 1;
    tc.batch = 8;
    for (double frac : {1.0, 0.75, 0.5, 0.25}) {
        auto sub = motion::filter_styles(s.ds, motion::style_subset(8, frac));
        style_adapter ad(s.bb.net, s.bb.vae.latent_width(), tiny_adapter(), 4);
        auto rep = train_style_adapter(s.bb, ad, sub, tc);
        EXPECT_EQ(rep.trained_styles.size(), motion::style_subset(8, frac).size());
    }
}

TEST(AdapterTraining, SingleContentStyleIsExcludedWithWarning) {
    tiny_setup s;
    auto ds = s.ds;
    std::erase_if(ds.sequences, [](const motion::motion_sequence& m) { return m.style_id == 0 && m.content_id != 1; });
    train_config tc;
    tc.epochs = 1;
    tc.steps_per_epoch = 1;
    tc.batch = 14;
    style_adapter ad(s.bb.net, s.bb.vae.latent_width(), tiny_adapter(), 4);
    auto rep = train_style_adapter(s.bb, ad, ds, tc);
    EXPECT_EQ(rep.warnings.size(), 1u);
    EXPECT_EQ(rep.trained_styles.size(), 7u);
    EXPECT_EQ(std::count(rep.trained_styles.begin(), rep.trained_styles.end(), 0u), 0);
}
