// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "hlm/eval.hpp"

using namespace hlm;
using namespace hlm::eval;

namespace {

using dense = std::vector<std::vector<double>>;

// Cyclic Jacobi eigenvalues of a symmetric matrix, independent of Eigen.
std::pair<std::vector<double>, dense> jacobi(dense a) {
    const std::size_t n = a.size();
    dense v(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
    return {ev, v};
}

dense matmul(const dense& a, const dense& b) {
    const std::size_t n = a.size(), m = b[0].size(), k = b.size();
    dense c(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t l = 0; l < k; ++l) c[i][j] += a[i][l] * b[l][j];
    return c;
}

std::pair<std::vector<double>, dense> moments(const tensor& x) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> mu(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mu[j] += x[i * d + j] / static_cast<double>(n);
    dense c(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) c[a][b] += (x[i * d + a] - mu[a]) * (x[i * d + b] - mu[b]) / static_cast<double>(n - 1);
    return {mu, c};
}

double fid_oracle(const tensor& x, const tensor& y) {
    auto [m1, c1] = moments(x);
    auto [m2, c2] = moments(y);
    const std::size_t d = m1.size();
    auto [e1, v1] = jacobi(c1);
    dense s1(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < d; ++k) s1[i][j] += v1[i][k] * std::sqrt(std::max(e1[k], 0.0)) * v1[j][k];
    auto [e2, v2] = jacobi(matmul(matmul(s1, c2), s1));
    double fid = 0;
    for (std::size_t j = 0; j < d; ++j) fid += (m1[j] - m2[j]) * (m1[j] - m2[j]) + c1[j][j] + c2[j][j];
    for (double e : e2) fid -= 2 * std::sqrt(std::max(e, 0.0));
    return fid;
}

tensor gaussian_rows(std::size_t n, std::size_t d, std::uint64_t seed, double spread = 1.0) {
    auto gen = make_rng(seed, "fid");
    auto x = tensor::randn({n, d}, gen, spread);
    // correlate the columns a little
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 1; j < d; ++j) x[i * d + j] += 0.5 * x[i * d + j - 1];
    return x;
}

const motion::dataset& data() {
    static const auto ds = motion::generate_dataset(motion::default_styles(), motion::default_contents(), 4, 11);
    return ds;
}

classifier_config quick() {
    classifier_config c;
    c.steps = 400;
    c.batch = 64;
    c.windows_per_sequence = 2;
    c.seed = 4;
    return c;
}

const classifier& style_clf() {
    static const auto c = train_classifier(data(), label_kind::style, quick());
    return c;
}

}  // namespace

TEST(LatentFid, IdenticalSetsGiveZero) {
    auto x = gaussian_rows(200, 5, 1);
    EXPECT_NEAR(latent_fid(x, x), 0.0, 1e-8);
}

TEST(LatentFid, MeanShiftEqualsSquaredNorm) {
    auto x = gaussian_rows(300, 4, 2);
    auto y = x;
    const std::vector<double> delta{0.5, -1.0, 0.25, 2.0};
    for (std::size_t i = 0; i < 300; ++i)
        for (std::size_t j = 0; j < 4; ++j) y[i * 4 + j] += delta[j];
    EXPECT_NEAR(latent_fid(x, y), 0.25 + 1.0 + 0.0625 + 4.0, 1e-6);
}

TEST(LatentFid, SymmetricAndMatchesJacobiOracle) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto x = gaussian_rows(120, 6, 10 + s);
        auto y = gaussian_rows(150, 6, 20 + s, 1.7);
        const double a = latent_fid(x, y), b = latent_fid(y, x);
        EXPECT_NEAR(a, b, 1e-8 * std::max(1.0, a));
        EXPECT_NEAR(a, fid_oracle(x, y), 1e-8 * std::max(1.0, a));
        EXPECT_GT(a, 0.0);
    }
}

TEST(LatentFid, RejectsTooFewSamples) {
    auto x = gaussian_rows(9, 5, 3);
    auto y = gaussian_rows(50, 5, 4);
    EXPECT_THROW(latent_fid(x, y), error);
    EXPECT_THROW(latent_fid(y, gaussian_rows(50, 4, 5)), error);
}

TEST(Features, FixedWidthAndFinite) {
    const auto& m = data().sequences[0];
    auto f = motion_features(motion::crop(m, 0, 48));
    EXPECT_EQ(f.size(), 3 * 16 + 13u);
    for (double v : f) EXPECT_TRUE(std::isfinite(v));
    // content sees only the root block, style sees everything
    auto fc = features_for(label_kind::content, motion::crop(m, 0, 48));
    ASSERT_EQ(fc.size(), root_feature_width);
    for (std::size_t i = 0; i < fc.size(); ++i) EXPECT_EQ(fc[i], f[joint_feature_width + i]);
    EXPECT_EQ(features_for(label_kind::style, motion::crop(m, 0, 48)), f);
}

TEST(Classifier, StyleClassifierGeneralizesToHeldOutContent) {
    const auto& c = style_clf();
    EXPECT_GE(c.train_accuracy, c.held_out_accuracy - 0.05);
    EXPECT_GE(c.held_out_accuracy, 0.9);
    EXPECT_NO_THROW(require_valid(c, 0.9));
    EXPECT_THROW(require_valid(c, 1.01), error);
}

TEST(Classifier, ContentClassifierLearnsPrompts) {
    // pipeline-sized corpus; trajectory cues need more sequences per style
    const auto ds = motion::generate_dataset(motion::default_styles(), motion::default_contents(), 10, 0);
    classifier_config cfg;
    auto c = train_classifier(ds, label_kind::content, cfg);
    EXPECT_GE(c.held_out_accuracy, 0.95);
    EXPECT_NO_THROW(require_valid(c, 0.95));
}

TEST(Classifier, SeededTrainingIsReproducible) {
    auto a = train_classifier(data(), label_kind::style, quick());
    EXPECT_EQ(a.l3.weight.value(), style_clf().l3.weight.value());
    EXPECT_EQ(a.held_out_accuracy, style_clf().held_out_accuracy);
}

TEST(Classifier, ShuffledLabelsGiveChanceAccuracy) {
    auto c = train_classifier(data(), label_kind::style, quick(), true);
    auto held = evaluation_windows(data(), motion::split_kind::test, 48, 2, 4);
    const double k = 8.0, n = static_cast<double>(held.size());
    const double chance = 1.0 / k, sd = std::sqrt(chance * (1 - chance) / n);
    // memorization can leave weak structure; accept a generous band
    EXPECT_LT(c.held_out_accuracy, chance + 6 * sd + 0.1);
    EXPECT_THROW(require_valid(c, 0.95), error);
}

TEST(Sra, TopKBoundsAndOrderInvariance) {
    const auto& c = style_clf();
    auto ms = evaluation_windows(data(), motion::split_kind::test, 48, 1, 7);
    std::vector<std::size_t> labels;
    for (const auto& m : ms) labels.push_back(m.style_id);
    EXPECT_EQ(sra(ms, labels, c, 8), 1.0);
    const double t1 = sra(ms, labels, c, 1), t3 = sra(ms, labels, c, 3);
    EXPECT_GE(t3, t1);
    EXPECT_NEAR(t1, accuracy_of(c, ms, label_kind::style), 0.0);
    auto rev_ms = ms;
    auto rev_l = labels;
    std::reverse(rev_ms.begin(), rev_ms.end());
    std::reverse(rev_l.begin(), rev_l.end());
    EXPECT_EQ(sra(rev_ms, rev_l, c, 1), t1);
    EXPECT_EQ(sra(rev_ms, rev_l, c, 3), t3);
}

TEST(Sra, RejectsBadInput) {
    const auto& c = style_clf();
    auto ms = evaluation_windows(data(), motion::split_kind::test, 48, 1, 7);
    std::vector<std::size_t> labels(ms.size(), 0);
    labels[0] = 8;
    EXPECT_THROW(sra(ms, labels, c), error);
    labels.pop_back();
    EXPECT_THROW(sra(ms, labels, c), error);
    EXPECT_THROW(sra(ms, std::vector<std::size_t>(ms.size(), 0), c, 0), error);
}

TEST(Report, CsvIsStableAndMarksFailures) {
    metric_report a{"supcon=on/guidance=on/frac=1.00/seed=0", 0.5, 0.75, 1.0, 2.5, 80, "abc", false, ""};
    metric_report b = a;
    b.cell = "x";
    b.failed = true;
    b.failure = "diverged";
    auto csv = to_csv({a, b});
    EXPECT_EQ(csv, std::string(report_csv_header()) + "\n" +
                       "supcon=on/guidance=on/frac=1.00/seed=0,0.500000,0.750000,1.000000,2.500000,80,abc,ok\n"
                       "x,0.500000,0.750000,1.000000,2.500000,80,abc,failed\n");
}

TEST(NearestNeighbor, ExamplesAndErrors) {
    tensor gallery({3, 2}, {0, 0, 10, 0, 0, 10});
    tensor queries({3, 2}, {1, 1, 9, 1, 1, 8});
    EXPECT_EQ(nearest_neighbor_accuracy(gallery, {0, 1, 2}, queries, {0, 1, 2}), 1.0);
    EXPECT_NEAR(nearest_neighbor_accuracy(gallery, {0, 1, 2}, queries, {0, 1, 1}), 2.0 / 3.0, 1e-15);
    // tie between rows 0 and 1 goes to row 0
    EXPECT_EQ(nearest_neighbor_accuracy(gallery, {4, 5, 6}, tensor({1, 2}, {5, 0}), {4}), 1.0);
    EXPECT_THROW(nearest_neighbor_accuracy(gallery, {0, 1}, queries, {0, 1, 2}), error);
    EXPECT_THROW(nearest_neighbor_accuracy(gallery, {0, 1, 2}, tensor({1, 3}), {0}), error);
}
