// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hlm/motion.hpp"
#include "hlm/nn.hpp"

namespace hlm::eval {

// Pooled statistics of one motion: per local joint channel mean, std and
// mean absolute frame delta; root speed and turning statistics; a step-rate
// proxy from the feet.
inline std::vector<double> motion_features(const motion::motion_sequence& m) {
    const std::size_t t = m.length();
    require(t >= 4, errc::invalid_argument, "motion too short for evaluation features");
    std::vector<double> f;
    const double n = static_cast<double>(t);
    for (std::size_t c = 2; c < motion::root_vel; ++c) {
        double mu = 0, sq = 0, dl = 0;
        for (std::size_t k = 0; k < t; ++k) mu += m.at(k, c);
        mu /= n;
        for (std::size_t k = 0; k < t; ++k) sq += (m.at(k, c) - mu) * (m.at(k, c) - mu);
        for (std::size_t k = 1; k < t; ++k) dl += std::abs(m.at(k, c) - m.at(k - 1, c));
        f.push_back(mu);
        f.push_back(std::sqrt(sq / n));
        f.push_back(dl / (n - 1.0) * m.fps);
    }
    // root motion from positions (robust to generated velocity channels)
    std::vector<double> vx(t - 1), vz(t - 1), sp(t - 1);
    for (std::size_t k = 0; k + 1 < t; ++k) {
        vx[k] = (m.at(k + 1, 0) - m.at(k, 0)) * m.fps;
        vz[k] = (m.at(k + 1, 1) - m.at(k, 1)) * m.fps;
        sp[k] = std::hypot(vx[k], vz[k]);
    }
    auto avg = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    const double msp = avg(sp);
    double ssp = 0;
    for (double s : sp) ssp += (s - msp) * (s - msp);
    double turn = 0, cnt = 0;
    for (std::size_t k = 0; k + 2 < t; ++k) {
        const double cr = vx[k] * vz[k + 1] - vz[k] * vx[k + 1];
        const double dt = vx[k] * vx[k + 1] + vz[k] * vz[k + 1];
        if (sp[k] > 0.05 && sp[k + 1] > 0.05) {
            turn += std::atan2(cr, dt) * m.fps;
            cnt += 1;
        }
    }
    f.push_back(avg(vx));
    f.push_back(avg(vz));
    f.push_back(msp);
    f.push_back(std::sqrt(ssp / static_cast<double>(sp.size())));
    f.push_back(cnt > 0 ? turn / cnt : 0.0);
    // net displacement direction relative to the first heading
    f.push_back(m.at(t - 1, 0) - m.at(0, 0));
    f.push_back(m.at(t - 1, 1) - m.at(0, 1));
    // gait-envelope invariant cues: cycle rate and amplitude ratios
    auto channel = [&](std::size_t j, std::size_t axis) {
        std::vector<double> v(t);
        for (std::size_t k = 0; k < t; ++k) v[k] = m.at(k, 2 * j + axis);
        return v;
    };
    auto spread = [&](const std::vector<double>& v) {
        const double mu = avg(v);
        double s = 0;
        for (double x : v) s += (x - mu) * (x - mu);
        return std::sqrt(s / static_cast<double>(v.size()));
    };
    auto cycle_rate = [&](const std::vector<double>& v) {
        // crossings of the mean with hysteresis at a quarter of the spread
        const double mu = avg(v), h = 0.25 * spread(v);
        int state = 0;
        double crossings = 0;
        for (double x : v) {
            const int s = x > mu + h ? 1 : (x < mu - h ? -1 : state);
            if (state != 0 && s != state) crossings += 1;
            state = s;
        }
        return 0.5 * crossings * m.fps / n;
    };
    const auto knee_l = channel(motion::joint::knee_l, 0), knee_r = channel(motion::joint::knee_r, 0);
    const auto hand_l = channel(motion::joint::hand_l, 0), pelvis_y = channel(motion::joint::pelvis, 1);
    const auto head_u = channel(motion::joint::head, 0);
    const double leg = spread(knee_l) + spread(knee_r) + 1e-6;
    f.push_back(cycle_rate(knee_l));
    f.push_back(cycle_rate(knee_r));
    f.push_back(spread(hand_l) / leg);
    f.push_back(spread(pelvis_y) / leg);
    f.push_back((spread(knee_l) - spread(knee_r)) / leg);
    f.push_back(avg(head_u));
    return f;
}

enum class label_kind { style, content };

// Width of the per-joint block at the front of motion_features, and of the
// root-motion block after it.
inline constexpr std::size_t joint_feature_width = 3 * (motion::root_vel - 2);
inline constexpr std::size_t root_feature_width = 7;

// Content is what the root does. The joint statistics mostly carry style and
// make content decisions brittle on unseen style/content pairs, so the content
// classifier only sees the root block.
inline std::vector<double> features_for(label_kind k, const motion::motion_sequence& m) {
    auto f = motion_features(m);
    if (k == label_kind::style) return f;
    const auto first = f.begin() + static_cast<std::ptrdiff_t>(joint_feature_width);
    return std::vector<double>(first, first + static_cast<std::ptrdiff_t>(root_feature_width));
}

struct classifier_config {
    std::size_t hidden = 64;
    std::size_t embed = 32;  // penultimate width, used as the Frechet feature space
    std::size_t steps = 1500;
    std::size_t batch = 128;
    double lr = 3e-3;
    std::size_t window = 48;
    std::size_t windows_per_sequence = 4;
    double min_held_out_accuracy = 0.95;
    std::uint64_t seed = 0;
};

struct classifier {
    label_kind kind = label_kind::style;
    std::size_t num_classes = 0;
    nn::linear l1, l2, l3;
    std::vector<double> feat_mean, feat_std;
    double held_out_accuracy = 0.0;
    double train_accuracy = 0.0;

    void collect(nn::param_list& out) {
        l1.collect("l1", out);
        l2.collect("l2", out);
        l3.collect("l3", out);
    }

    var standardized(const std::vector<std::vector<double>>& feats) const {
        const std::size_t d = feat_mean.size();
        tensor x({feats.size(), d});
        for (std::size_t i = 0; i < feats.size(); ++i) {
            require(feats[i].size() == d, errc::shape_mismatch, "classifier: feature width mismatch");
            for (std::size_t j = 0; j < d; ++j) x[i * d + j] = (feats[i][j] - feat_mean[j]) / feat_std[j];
        }
        return var::constant(std::move(x));
    }
    var embed(const var& x) const { return silu(l2(silu(l1(x)))); }
    var logits(const var& x) const { return l3(embed(x)); }

    tensor logits(const std::vector<motion::motion_sequence>& ms) const {
        no_grad_guard ng;
        std::vector<std::vector<double>> f;
        for (const auto& m : ms) f.push_back(features_for(kind, m));
        return logits(standardized(f)).value();
    }
    tensor embeddings(const std::vector<motion::motion_sequence>& ms) const {
        no_grad_guard ng;
        std::vector<std::vector<double>> f;
        for (const auto& m : ms) f.push_back(features_for(kind, m));
        return embed(standardized(f)).value();
    }
    std::vector<std::size_t> predict(const std::vector<motion::motion_sequence>& ms) const {
        auto lg = logits(ms);
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < ms.size(); ++i) {
            const double* row = lg.data().data() + i * num_classes;
            out.push_back(static_cast<std::size_t>(std::max_element(row, row + num_classes) - row));
        }
        return out;
    }
};

inline std::size_t label_of(const motion::motion_sequence& m, label_kind k) {
    return k == label_kind::style ? m.style_id : m.content_id;
}

// Fixed-length windows so real and generated motions are compared like for like.
inline std::vector<motion::motion_sequence> evaluation_windows(const motion::dataset& ds, motion::split_kind split,
                                                               std::size_t window, std::size_t per_sequence,
                                                               std::uint64_t seed) {
    std::vector<motion::motion_sequence> out;
    auto gen = make_rng(seed, "eval-windows", static_cast<std::uint64_t>(split));
    for (const auto& m : ds.sequences) {
        if (m.split != split) continue;
        require(m.length() >= window, errc::invalid_argument, "sequence shorter than evaluation window");
        std::uniform_int_distribution<std::size_t> st(0, m.length() - window);
        for (std::size_t k = 0; k < per_sequence; ++k) out.push_back(motion::crop(m, st(gen), window));
    }
    return out;
}

inline double accuracy_of(const classifier& c, const std::vector<motion::motion_sequence>& ms, label_kind k) {
    if (ms.empty()) return 0.0;
    auto p = c.predict(ms);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ms.size(); ++i) ok += p[i] == label_of(ms[i], k);
    return static_cast<double>(ok) / static_cast<double>(ms.size());
}

// Trains on the training split, records held-out (test split) accuracy.
// label_shuffle permutes training labels (a chance-level sanity check).
inline classifier train_classifier(const motion::dataset& ds, label_kind kind, const classifier_config& cfg,
                                   bool label_shuffle = false) {
    classifier c;
    c.kind = kind;
    c.num_classes = kind == label_kind::style ? ds.num_styles() : ds.num_contents();
    require(c.num_classes >= 2, errc::invalid_argument, "classifier needs at least 2 classes");
    auto train = evaluation_windows(ds, motion::split_kind::train, cfg.window, cfg.windows_per_sequence, cfg.seed);
    auto held = evaluation_windows(ds, motion::split_kind::test, cfg.window, cfg.windows_per_sequence, cfg.seed);
    require(!train.empty(), errc::invalid_argument, "classifier: empty training split");

    std::vector<std::vector<double>> feats;
    std::vector<std::size_t> labels;
    for (const auto& m : train) {
        feats.push_back(features_for(kind, m));
        labels.push_back(label_of(m, kind));
    }
    if (label_shuffle) {
        auto g = make_rng(cfg.seed, "label-shuffle");
        std::shuffle(labels.begin(), labels.end(), g);
    }
    const std::size_t d = feats[0].size();
    c.feat_mean.assign(d, 0.0);
    c.feat_std.assign(d, 0.0);
    for (const auto& f : feats) {
        for (std::size_t j = 0; j < d; ++j) c.feat_mean[j] += f[j];
    }
    for (auto& v : c.feat_mean) v /= static_cast<double>(feats.size());
    for (const auto& f : feats) {
        for (std::size_t j = 0; j < d; ++j) c.feat_std[j] += (f[j] - c.feat_mean[j]) * (f[j] - c.feat_mean[j]);
    }
    for (auto& v : c.feat_std) v = std::sqrt(std::max(v / static_cast<double>(feats.size()), 1e-12));

    auto gen = make_rng(cfg.seed, kind == label_kind::style ? "style-classifier" : "content-classifier");
    c.l1 = nn::linear(d, cfg.hidden, gen);
    c.l2 = nn::linear(cfg.hidden, cfg.embed, gen);
    c.l3 = nn::linear(cfg.embed, c.num_classes, gen);
    nn::param_list params;
    c.collect(params);
    nn::adam opt(params, {.lr = cfg.lr});
    auto x_all = c.standardized(feats).value();
    std::uniform_int_distribution<std::size_t> pick(0, feats.size() - 1);
    const std::size_t k = c.num_classes;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        tensor xb({cfg.batch, d});
        tensor onehot({cfg.batch, k});
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            const std::size_t r = pick(gen);
            std::copy_n(x_all.data().begin() + static_cast<std::ptrdiff_t>(r * d), d,
                        xb.data().begin() + static_cast<std::ptrdiff_t>(i * d));
            onehot[i * k + labels[r]] = -1.0 / static_cast<double>(cfg.batch);
        }
        auto lp = masked_log_softmax(c.logits(var::constant(std::move(xb))), std::vector<bool>(cfg.batch * k, true));
        auto loss = sum(mul(lp, var::constant(std::move(onehot))));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    nn::set_trainable(params, false);
    if (!label_shuffle) {
        c.train_accuracy = accuracy_of(c, train, kind);
    } else {
        // accuracy against the shuffled labels it was trained on
        auto p = c.predict(train);
        std::size_t ok = 0;
        for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == labels[i];
        c.train_accuracy = static_cast<double>(ok) / static_cast<double>(p.size());
    }
    c.held_out_accuracy = accuracy_of(c, held, kind);
    return c;
}

inline void require_valid(const classifier& c, double threshold) {
    std::ostringstream os;
    os << (c.kind == label_kind::style ? "style" : "content") << " classifier held-out accuracy " << c.held_out_accuracy
       << " is below the required " << threshold << "; evaluation blocked";
    require(c.held_out_accuracy >= threshold, errc::evaluation_blocked, os.str());
}

// Fraction of motions whose intended label is among the top-k predictions.
inline double topk_accuracy(const std::vector<motion::motion_sequence>& ms, const std::vector<std::size_t>& intended,
                            const classifier& c, std::size_t k) {
    require(ms.size() == intended.size(), errc::shape_mismatch, "one intended label per motion");
    require(k >= 1, errc::invalid_argument, "k must be >= 1");
    if (ms.empty()) return 0.0;
    for (auto l : intended) require(l < c.num_classes, errc::invalid_argument, "unknown label id " + std::to_string(l));
    auto lg = c.logits(ms);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ms.size(); ++i) {
        const double* row = lg.data().data() + i * c.num_classes;
        const double mine = row[intended[i]];
        std::size_t better = 0;
        for (std::size_t j = 0; j < c.num_classes; ++j) {
            // ties broken by index so the result is order-independent
            if (row[j] > mine || (row[j] == mine && j < intended[i])) ++better;
        }
        ok += better < k;
    }
    return static_cast<double>(ok) / static_cast<double>(ms.size());
}

inline double sra(const std::vector<motion::motion_sequence>& ms, const std::vector<std::size_t>& intended_styles,
                  const classifier& style_clf, std::size_t k = 1) {
    return topk_accuracy(ms, intended_styles, style_clf, k);
}

inline double content_accuracy(const std::vector<motion::motion_sequence>& ms, const std::vector<std::size_t>& intended,
                               const classifier& content_clf) {
    return topk_accuracy(ms, intended, content_clf, 1);
}

// 1-nearest-neighbour accuracy of query rows against a labelled gallery
// (Euclidean; ties go to the earlier gallery row).
inline double nearest_neighbor_accuracy(const tensor& gallery, const std::vector<std::size_t>& gallery_labels,
                                        const tensor& queries, const std::vector<std::size_t>& query_labels) {
    require(gallery.rank() == 2 && queries.rank() == 2 && gallery.dim(1) == queries.dim(1), errc::shape_mismatch,
            "nearest neighbour: embeddings must be (N, d) with equal d");
    require(gallery.dim(0) == gallery_labels.size() && queries.dim(0) == query_labels.size(), errc::shape_mismatch,
            "nearest neighbour: one label per row");
    require(gallery.dim(0) >= 1, errc::invalid_argument, "nearest neighbour: empty gallery");
    if (queries.dim(0) == 0) return 0.0;
    const std::size_t d = gallery.dim(1);
    std::size_t ok = 0;
    for (std::size_t q = 0; q < queries.dim(0); ++q) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t label = 0;
        for (std::size_t g = 0; g < gallery.dim(0); ++g) {
            double dist = 0;
            for (std::size_t k = 0; k < d; ++k) {
                const double x = gallery[g * d + k] - queries[q * d + k];
                dist += x * x;
            }
            if (dist < best) {
                best = dist;
                label = gallery_labels[g];
            }
        }
        ok += label == query_labels[q];
    }
    return static_cast<double>(ok) / static_cast<double>(queries.dim(0));
}

// Frechet distance between Gaussian fits of two feature sets (rows = samples).
inline double latent_fid(const tensor& x, const tensor& y) {
    require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(1), errc::shape_mismatch, "latent_fid: feature sets must be (N, d)");
    const std::size_t d = x.dim(1);
    require(x.dim(0) >= 2 * d && y.dim(0) >= 2 * d, errc::invalid_argument,
            "latent_fid: need at least " + std::to_string(2 * d) + " samples per side, got " + std::to_string(x.dim(0)) +
                " and " + std::to_string(y.dim(0)));
    using mat = Eigen::MatrixXd;
    auto stats = [d](const tensor& t) {
        const auto n = static_cast<Eigen::Index>(t.dim(0));
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(t.data().data(), n,
                                                                                                   static_cast<Eigen::Index>(d));
        Eigen::VectorXd mu = m.colwise().mean();
        mat c = m.rowwise() - mu.transpose();
        mat cov = (c.transpose() * c) / static_cast<double>(n - 1);
        return std::pair{mu, mat(0.5 * (cov + cov.transpose()))};
    };
    auto [m1, c1] = stats(x);
    auto [m2, c2] = stats(y);
    // tr sqrt(C1 C2) = tr sqrt(C1^1/2 C2 C1^1/2), a symmetric PSD matrix
    Eigen::SelfAdjointEigenSolver<mat> e1(c1);
    Eigen::VectorXd ev = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    mat s1 = e1.eigenvectors() * ev.asDiagonal() * e1.eigenvectors().transpose();
    mat inner = s1 * c2 * s1;
    Eigen::SelfAdjointEigenSolver<mat> e2(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = e2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double fid = (m1 - m2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    return std::max(fid, 0.0);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct metric_report {
    std::string cell;
    double sra_top1 = 0, sra_top3 = 0, content_acc = 0, latent_fid = 0;
    std::size_t samples = 0;
    std::string config_digest;
    bool failed = false;
    std::string failure;
};

inline std::string fixed(double v, int digits = 6) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline const char* report_csv_header() { return "cell,sra_top1,sra_top3,content_acc,latent_fid,samples,config_digest,status"; }

inline std::string to_csv_row(const metric_report& r) {
    std::ostringstream os;
    os << r.cell << ',' << fixed(r.sra_top1) << ',' << fixed(r.sra_top3) << ',' << fixed(r.content_acc) << ','
       << fixed(r.latent_fid) << ',' << r.samples << ',' << r.config_digest << ',' << (r.failed ? "failed" : "ok");
    return os.str();
}

inline std::string to_csv(const std::vector<metric_report>& rows) {
    std::string out = std::string(report_csv_header()) + "\n";
    for (const auto& r : rows) out += to_csv_row(r) + "\n";
    return out;
}

}  // namespace hlm::eval
