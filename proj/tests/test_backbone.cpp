// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "hlm/adapter.hpp"

using namespace hlm;

namespace {

denoiser_config tiny_denoiser() {
    denoiser_config c;
    c.blocks = 2;
    c.hidden = 8;
    c.heads = 2;
    c.latent_joints = 2;
    c.latent_channels = 3;
    c.time_width = 6;
    c.num_contents = 3;
    return c;
}

vae_config tiny_vae() {
    vae_config v;
    v.hidden = 16;
    v.latent_joints = 2;
    v.latent_channels = 3;
    return v;
}

tensor frames_for(std::size_t b, std::size_t t, std::uint64_t seed) {
    motion::generator_options opt;
    opt.min_length = opt.max_length = 96;
    auto ds = motion::generate_dataset(motion::default_styles(), motion::default_contents(), 1, seed, opt);
    tensor out({b, t, motion::num_features});
    for (std::size_t i = 0; i < b; ++i) {
        auto w = motion::crop(ds.sequences[i * 3], 0, t);
        std::copy(w.frames.data().begin(), w.frames.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * w.frames.size()));
    }
    return out;
}

}  // namespace

TEST(Vae, EncodeShapeWithUngroupedFrames) {
    vae_config v;
    v.frames_per_token = 1;
    v.latent_joints = 4;
    v.latent_channels = 8;
    auto gen = make_rng(1, "t");
    motion_vae vae(v, gen);
    auto enc = vae.encode(var::constant(frames_for(1, 64, 2)));
    EXPECT_EQ(enc.z0.shape(), shape_t({1, 64, 4, 8}));
    EXPECT_EQ(vae.decode(enc.z0).shape(), shape_t({1, 64, motion::num_features}));
}

TEST(Vae, GroupedShapeContractAndWidthErrors) {
    auto gen = make_rng(1, "t");
    motion_vae vae(tiny_vae(), gen);
    auto enc = vae.encode(var::constant(frames_for(2, 48, 2)));
    EXPECT_EQ(enc.mean.shape(), shape_t({2, 12, 2, 3}));
    EXPECT_EQ(vae.decode(enc.mean).shape(), shape_t({2, 48, motion::num_features}));
    EXPECT_THROW(vae.encode(var::constant(tensor({1, 48, 7}))), error);
    EXPECT_THROW(vae.encode(var::constant(tensor({1, 46, motion::num_features}))), error);
    EXPECT_THROW(vae.decode(var::constant(tensor({1, 4, 3, 3}))), error);
}

TEST(Vae, KlFixedPointIsZero) {
    auto z = var::constant(tensor({3, 4}));
    EXPECT_EQ(gaussian_kl(z, z).item(), 0.0);
    auto mu = var::constant(tensor({1}, 2.0));
    EXPECT_DOUBLE_EQ(gaussian_kl(mu, var::constant(tensor({1}))).item(), 2.0);
}

TEST(Vae, DecodeIsDeterministicAndSampleDiffersFromMean) {
    auto gen = make_rng(1, "t");
    motion_vae vae(tiny_vae(), gen);
    auto z = tensor::randn({1, 5, 2, 3}, gen);
    EXPECT_EQ(vae.decode(var::constant(z)).value(), vae.decode(var::constant(z)).value());
    auto f = var::constant(frames_for(1, 16, 3));
    auto g2 = make_rng(4, "s");
    auto enc = vae.encode(f, &g2);
    EXPECT_NE(enc.z0.value(), enc.mean.value());
    EXPECT_EQ(vae.encode(f).z0.value(), enc.mean.value());
}

TEST(Vae, DecodedRootPositionsIntegrateDecodedVelocity) {
    auto gen = make_rng(5, "t");
    motion_vae vae(tiny_vae(), gen);
    auto z = tensor::randn({2, 3, 2, 3}, gen);
    auto raw = vae.decode_raw(channel_affine(reshape(var::constant(z), {2, 3, 6}), vae.latent_scale.value(),
                                             vae.latent_shift.value()))
                   .value();
    auto out = vae.decode(var::constant(z)).value();
    const std::size_t t = 12, f = motion::num_features;
    for (std::size_t b = 0; b < 2; ++b) {
        double x = 0, zz = 0;
        for (std::size_t k = 0; k < t; ++k) {
            const std::size_t row = (b * t + k) * f;
            EXPECT_NEAR(out[row], x, 1e-12);
            EXPECT_NEAR(out[row + 1], zz, 1e-12);
            for (std::size_t c = 2; c < f; ++c) EXPECT_EQ(out[row + c], raw[row + c]);
            x += raw[row + motion::root_vel] / vae.cfg.fps;
            zz += raw[row + motion::root_vel + 1] / vae.cfg.fps;
        }
    }
}

TEST(Film, GenerateWithZeroWeightGivesBias) {
    auto gen = make_rng(2, "t");
    film_generator g(4, 6, gen, 1.0);
    g.weight = var::parameter(tensor({8, 6}));
    g.bias = var::parameter(tensor::randn({8}, gen));
    auto e = var::constant(tensor::randn({3, 6}, gen));
    auto [gm, bt] = film_generate(e, g);
    for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_EQ(gm.value()[b * 4 + j], g.bias.value()[j]);
            EXPECT_EQ(bt.value()[b * 4 + j], g.bias.value()[4 + j]);
        }
    }
}

TEST(Film, ZeroEmbeddingGivesBiasBecauseSiluOfZeroIsZero) {
    auto gen = make_rng(3, "t");
    film_generator g(4, 6, gen, 1.0);
    g.bias = var::parameter(tensor::randn({8}, gen));
    auto [gm, bt] = film_generate(var::constant(tensor({2, 6})), g);
    EXPECT_EQ(gm.value()[5], g.bias.value()[1]);
    EXPECT_EQ(bt.value()[7], g.bias.value()[7]);
}

TEST(Film, MatchesDenseOracle) {
    auto gen = make_rng(4, "t");
    film_generator g(3, 5, gen, 1.0);
    g.bias = var::parameter(tensor::randn({6}, gen));
    auto e = tensor::randn({2, 5}, gen);
    auto [gm, bt] = film_generate(var::constant(e), g);
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t o = 0; o < 6; ++o) {
            double acc = g.bias.value()[o];
            for (std::size_t k = 0; k < 5; ++k) acc += g.weight.value()[o * 5 + k] * silu_value(e[b * 5 + k]);
            const double got = o < 3 ? gm.value()[b * 3 + o] : bt.value()[b * 3 + o - 3];
            EXPECT_NEAR(got, acc, 1e-14);
        }
    }
    EXPECT_THROW(film_generate(var::constant(tensor({2, 4})), g), error);
}

TEST(Film, ModulateExamples) {
    auto gen = make_rng(5, "t");
    auto h = var::constant(tensor::randn({2, 3, 4}, gen));
    auto ones = var::constant(tensor({2, 4}, 1.0));
    auto zeros = var::constant(tensor({2, 4}));
    EXPECT_EQ(modulate(h, ones, zeros).value(), h.value());
    auto beta = var::constant(tensor::randn({2, 4}, gen));
    auto out = modulate(h, zeros, beta).value();
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out[(b * 3 + t) * 4 + c], beta.value()[b * 4 + c]);
    EXPECT_THROW(modulate(h, var::constant(tensor({2, 5})), var::constant(tensor({2, 5}))), error);
    // (1 + gamma0) convention with zero generator output is the identity
    EXPECT_EQ(modulate(h, add_scalar(zeros, 1.0), zeros).value(), h.value());
}

TEST(Lora, ZeroBOrZeroAlphaMatchesPlainFilm) {
    auto gen = make_rng(6, "t");
    film_generator g(4, 6, gen, 1.0);
    auto e = var::constant(tensor::randn({3, 6}, gen));
    auto a = var::constant(tensor::randn({3, 2, 6}, gen));
    auto b0 = var::constant(tensor({3, 8, 2}));
    auto base = film_generate(e, g);
    auto z = apply_lora_film(e, g, a, b0, 2.0, 2);
    EXPECT_EQ(z.first.value(), base.first.value());
    EXPECT_EQ(z.second.value(), base.second.value());
    auto b = var::constant(tensor::randn({3, 8, 2}, gen));
    auto za = apply_lora_film(e, g, a, b, 0.0, 2);
    EXPECT_EQ(za.first.value(), base.first.value());
    EXPECT_THROW(apply_lora_film(e, g, a, var::constant(tensor({3, 8, 3})), 1.0, 2), error);
}

TEST(Lora, MatchesDenseRecomputation) {
    auto gen = make_rng(7, "t");
    film_generator g(3, 5, gen, 1.0);
    auto e = tensor::randn({2, 5}, gen);
    auto a = tensor::randn({2, 2, 5}, gen);
    auto b = tensor::randn({2, 6, 2}, gen);
    const double alpha = 3.0;
    auto [gm, bt] = apply_lora_film(var::constant(e), g, var::constant(a), var::constant(b), alpha, 2);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t o = 0; o < 6; ++o) {
            double acc = g.bias.value()[o];
            for (std::size_t k = 0; k < 5; ++k) {
                double w = g.weight.value()[o * 5 + k];
                for (std::size_t r = 0; r < 2; ++r) w += alpha / 2.0 * b[(i * 6 + o) * 2 + r] * a[(i * 2 + r) * 5 + k];
                acc += w * silu_value(e[i * 5 + k]);
            }
            const double got = o < 3 ? gm.value()[i * 3 + o] : bt.value()[i * 3 + o - 3];
            EXPECT_NEAR(got, acc, 1e-12);
        }
    }
}

TEST(Denoiser, ShapeDeterminismAndErrors) {
    auto gen = make_rng(8, "t");
    denoiser net(tiny_denoiser(), gen);
    auto z = var::constant(tensor::randn({2, 5, 2, 3}, gen));
    auto v1 = net(z, {3, 900}, {0, 3});
    EXPECT_EQ(v1.shape(), z.shape());
    EXPECT_EQ(v1.value(), net(z, {3, 900}, {0, 3}).value());
    EXPECT_THROW(net(z, {3}, {0, 1}), error);
    EXPECT_THROW(net(z, {3, 4}, {0, 4}), error);
    EXPECT_THROW(net(var::constant(tensor({2, 5, 3, 3})), {1, 1}, {0, 0}), error);
    lora_factors wrong;
    wrong.a.resize(1);
    wrong.b.resize(1);
    EXPECT_THROW(net(z, {3, 4}, {0, 1}, {.lora = &wrong}), error);
}

TEST(Denoiser, ZeroFactorsAreBitIdenticalToNoFactors) {
    auto gen = make_rng(9, "t");
    denoiser net(tiny_denoiser(), gen);
    auto z = var::constant(tensor::randn({2, 4, 2, 3}, gen));
    lora_factors f;
    f.rank = 2;
    f.alpha = 2.0;
    for (std::size_t l = 0; l < net.film_layers(); ++l) {
        f.a.push_back(var::constant(tensor::randn({2, 2, 6}, gen)));
        f.b.push_back(var::constant(tensor({2, 16, 2})));
    }
    auto base = net(z, {10, 500}, {1, 2}).value();
    EXPECT_EQ(net(z, {10, 500}, {1, 2}, {.lora = &f}).value(), base);
    adapted_films af;
    for (std::size_t l = 0; l < net.film_layers(); ++l) af.weights.push_back(adapted_weight(net.blocks[l].film, f.a[l], f.b[l], f.alpha, f.rank));
    for (std::size_t l = 0; l < net.film_layers(); ++l) {
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t k = 0; k < 16 * 6; ++k) EXPECT_EQ(af.weights[l].value()[i * 96 + k], net.blocks[l].film.weight.value()[k]);
    }
    EXPECT_EQ(net(z, {10, 500}, {1, 2}, {.adapted = &af}).value(), base);
}

TEST(Denoiser, PrecomputedMatchesOnTheFly) {
    auto gen = make_rng(10, "t");
    denoiser net(tiny_denoiser(), gen);
    auto z = var::constant(tensor::randn({2, 4, 2, 3}, gen));
    lora_factors f;
    f.rank = 2;
    f.alpha = 2.0;
    adapted_films af;
    for (std::size_t l = 0; l < net.film_layers(); ++l) {
        f.a.push_back(var::constant(tensor::randn({2, 2, 6}, gen)));
        f.b.push_back(var::constant(tensor::randn({2, 16, 2}, gen, 0.3)));
        af.weights.push_back(adapted_weight(net.blocks[l].film, f.a[l], f.b[l], f.alpha, f.rank));
    }
    auto a = net(z, {10, 500}, {1, 2}, {.lora = &f}).value();
    auto b = net(z, {10, 500}, {1, 2}, {.adapted = &af}).value();
    EXPECT_LT(max_abs_diff(a, b), 1e-12);
    EXPECT_GT(max_abs_diff(a, net(z, {10, 500}, {1, 2}).value()), 1e-6);
}

TEST(Denoiser, GradientWrtLatentMatchesFiniteDifferences) {
    auto gen = make_rng(11, "t");
    denoiser net(tiny_denoiser(), gen);
    auto w = var::constant(tensor::randn({1, 3, 2, 3}, gen));
    auto f = [&](const var& z) { return sum(mul(net(z, {321}, {1}), w)); };
    auto rep = grad_check(f, tensor::randn({1, 3, 2, 3}, gen));
    EXPECT_TRUE(rep.pass) << rep.max_rel_error;
    EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(Denoiser, BranchesDifferOnlyInTextEmbedding) {
    auto gen = make_rng(12, "t");
    denoiser net(tiny_denoiser(), gen);
    auto z = var::constant(tensor::randn({1, 3, 2, 3}, gen));
    auto cond = net(z, {50}, {1}).value();
    auto uncond = net(z, {50}, {net.cfg.null_token()}).value();
    EXPECT_NE(cond, uncond);
    // swapping the table rows swaps the outputs
    auto& tab = net.text_table.mutable_value();
    const std::size_t w = tab.dim(1);
    for (std::size_t j = 0; j < w; ++j) std::swap(tab[1 * w + j], tab[net.cfg.null_token() * w + j]);
    EXPECT_EQ(net(z, {50}, {net.cfg.null_token()}).value(), cond);
    EXPECT_EQ(net(z, {50}, {1}).value(), uncond);
}

TEST(Pretrain, LossDecreasesDropoutRateAndDeterminism) {
    auto ds = motion::generate_dataset(motion::default_styles(), motion::default_contents(), 2, 5);
    auto run = [&] {
        auto dc = tiny_denoiser();
        dc.num_contents = 5;
        backbone bb(tiny_vae(), dc, 100, diffusion::schedule_kind::cosine, 3);
        bb.window = 16;
        pretrain_config pc;
        pc.vae_steps = 200;
        pc.denoiser_steps = 120;
        pc.batch = 16;
        pc.steps_per_epoch = 20;
        pc.seed = 9;
        auto rep = pretrain_backbone(bb, ds, pc);
        return std::pair{rep, nn::snapshot(bb.state())};
    };
    auto [rep, w1] = run();
    ASSERT_EQ(rep.denoiser_epoch_loss.size(), 6u);
    EXPECT_LT(rep.denoiser_epoch_loss.back(), rep.denoiser_epoch_loss.front());
    EXPECT_LT(rep.vae_epoch_loss.back(), rep.vae_epoch_loss.front());
    const double total = static_cast<double>(rep.null_conditions + rep.text_conditions);
    const double rate = static_cast<double>(rep.null_conditions) / total;
    // binomial(1920, 0.1): sd ~ 0.0068
    EXPECT_NEAR(rate, 0.1, 0.03);
    auto [rep2, w2] = run();
    EXPECT_TRUE(w1 == w2);
}

// ---------------------------------------------------------------------------
// Style adapter
// ---------------------------------------------------------------------------

TEST(StyleEncoder, DeterministicAndFrameShuffleInvariant) {
    auto gen = make_rng(13, "t");
    adapter_config ac;
    ac.style_width = 5;
    ac.encoder_width = 8;
    style_encoder enc(6, ac, gen);
    auto z = tensor::randn({2, 7, 2, 3}, gen);
    auto s1 = enc(var::constant(z)).value();
    EXPECT_EQ(s1.shape(), shape_t({2, 5}));
    EXPECT_EQ(s1, enc(var::constant(z)).value());
    std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    tensor zp(z.shape());
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 7; ++t)
            for (std::size_t k = 0; k < 6; ++k) zp[(b * 7 + t) * 6 + k] = z[(b * 7 + perm[t]) * 6 + k];
    EXPECT_LT(max_abs_diff(enc(var::constant(zp)).value(), s1), 1e-12);
    EXPECT_THROW(enc(var::constant(tensor({1, 3, 2, 4}))), error);
}

TEST(StyleEncoder, LengthIndependentOutputWidth) {
    auto gen = make_rng(14, "t");
    style_encoder enc(6, {}, gen);
    auto rows = var::constant(tensor::randn({12, 6}, gen));
    EXPECT_EQ(enc.encode_rows(rows, {0, 3, 12}).shape(), shape_t({2, 32}));
}

TEST(HyperNetwork, FreshInitGivesZeroUpdateWithDeclaredShapes) {
    auto gen = make_rng(15, "t");
    denoiser net(tiny_denoiser(), gen);
    adapter_config ac;
    ac.rank = 2;
    ac.alpha = 2.0;
    ac.style_width = 5;
    style_adapter ad(net, 6, ac, 1);
    auto s = var::constant(tensor::randn({3, 5}, gen));
    auto f = ad.hyper(s);
    ASSERT_EQ(f.layers(), net.film_layers());
    for (std::size_t l = 0; l < f.layers(); ++l) {
        EXPECT_EQ(f.a[l].shape(), shape_t({3, 2, 6}));
        EXPECT_EQ(f.b[l].shape(), shape_t({3, 16, 2}));
        for (double v : f.b[l].value().data()) EXPECT_EQ(v, 0.0);
        EXPECT_GT(l2(f.a[l].value()), 0.0);
    }
    auto films = precompute_adapted_films(f, net);
    for (std::size_t l = 0; l < f.layers(); ++l)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t k = 0; k < 96; ++k) EXPECT_EQ(films.weights[l].value()[i * 96 + k], net.blocks[l].film.weight.value()[k]);
}

TEST(HyperNetwork, UpdateRankIsBoundedByR) {
    auto gen = make_rng(16, "t");
    denoiser net(tiny_denoiser(), gen);
    adapter_config ac;
    ac.rank = 2;
    ac.style_width = 5;
    style_adapter ad(net, 6, ac, 1);
    // make B-heads non-trivial, as after training
    for (auto& h : ad.hyper.b_heads) h.weight = var::parameter(tensor::randn(h.weight.shape(), gen));
    auto f = ad.hyper(var::constant(tensor::randn({1, 5}, gen)));
    for (std::size_t l = 0; l < f.layers(); ++l) {
        auto delta = bmm(f.b[l], f.a[l]).value();
        Eigen::Map<const Eigen::Matrix<double, 16, 6, Eigen::RowMajor>> m(delta.data().data());
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m * ac.alpha / 2.0));
        auto sv = svd.singularValues();
        EXPECT_GT(sv(1), 1e-6);
        for (Eigen::Index i = 2; i < sv.size(); ++i) EXPECT_LE(sv(i), 1e-10);
    }
}

TEST(HyperNetwork, RejectsBadRankAndWidth) {
    auto gen = make_rng(17, "t");
    denoiser net(tiny_denoiser(), gen);
    adapter_config ac;
    ac.rank = 6;
    EXPECT_THROW(style_adapter(net, 6, ac, 1), error);
    style_adapter ok(net, 6, {}, 1);
    EXPECT_THROW(ok.hyper(var::constant(tensor({1, 7}))), error);
}

TEST(HyperNetwork, GradientReachesZeroBHeads) {
    auto gen = make_rng(18, "t");
    denoiser net(tiny_denoiser(), gen);
    adapter_config ac;
    ac.rank = 2;
    ac.style_width = 5;
    style_adapter ad(net, 6, ac, 1);
    auto params = ad.parameters();
    nn::set_trainable(params, true);
    auto z = var::constant(tensor::randn({2, 3, 2, 3}, gen));
    auto target = var::constant(tensor::randn({2, 3, 2, 3}, gen));
    auto f = ad.hyper(ad.encoder(var::constant(tensor::randn({2, 4, 2, 3}, gen))));
    auto loss = mse(net(z, {100, 700}, {0, 1}, {.lora = &f}), target);
    backward(loss);
    for (auto& h : ad.hyper.b_heads) {
        auto g = h.weight.gradient();
        ASSERT_TRUE(g.has_value());
        EXPECT_GT(l2(*g), 1e-8);
    }
}
