#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"

namespace ap = analogy_probe;

namespace {

struct Synthetic {
    ap::Matrix<float> x;
    std::vector<int> y;
};

Synthetic clusters(std::uint64_t seed, std::size_t n, std::size_t d, double separation) {
    ap::SeededRng rng(seed);
    Synthetic s;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        std::vector<float> row(d);
        for (std::size_t c = 0; c < d; ++c) {
            row[c] = static_cast<float>(rng.normal());
        }
        row[0] += static_cast<float>(label == 1 ? separation : -separation);
        s.x.append_row(row);
        s.y.push_back(label);
    }
    return s;
}

} // namespace

TEST(probing, separable_clusters_are_learned) {
    const auto s = clusters(1, 100, 8, 3.0);
    const auto cv = ap::train_probe_cv(s.x, s.y, 5, 0);
    EXPECT_GE(cv.mean_accuracy, 0.95);
    ASSERT_EQ(cv.fold_accuracies.size(), 5u);
    double sum = 0.0;
    for (double a : cv.fold_accuracies) {
        sum += a;
    }
    EXPECT_DOUBLE_EQ(cv.mean_accuracy, sum / 5.0);
}

TEST(probing, permuted_labels_sit_at_chance) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto s = clusters(100 + seed, 200, 8, 3.0);
        ap::SeededRng rng(seed);
        rng.shuffle(s.y.begin(), s.y.end());
        total += ap::train_probe_cv(s.x, s.y, 5, seed).mean_accuracy;
    }
    const double mean = total / 20.0;
    EXPECT_GE(mean, 0.40);
    EXPECT_LE(mean, 0.60);
}

TEST(probing, deterministic_per_seed) {
    const auto s = clusters(2, 60, 4, 0.5);
    const auto a = ap::train_probe_cv(s.x, s.y, 5, 9);
    const auto b = ap::train_probe_cv(s.x, s.y, 5, 9);
    EXPECT_EQ(a.fold_accuracies, b.fold_accuracies);
    EXPECT_EQ(ap::stratified_folds(s.y, 5, 9), ap::stratified_folds(s.y, 5, 9));
    EXPECT_NE(ap::stratified_folds(s.y, 5, 9), ap::stratified_folds(s.y, 5, 10));
}

TEST(probing, folds_are_stratified) {
    std::vector<int> y(23, 0);
    for (std::size_t i = 0; i < 11; ++i) {
        y[i] = 1;
    }
    const auto folds = ap::stratified_folds(y, 5, 3);
    for (int f = 0; f < 5; ++f) {
        int pos = 0, neg = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (folds[i] == f) {
                (y[i] == 1 ? pos : neg)++;
            }
        }
        EXPECT_GE(pos, 2);
        EXPECT_LE(pos, 3);
        EXPECT_GE(neg, 2);
        EXPECT_LE(neg, 3);
    }
    EXPECT_THROW(ap::stratified_folds(std::vector<int>{0, 0, 0, 0, 0, 1}, 5, 0), ap::ValidationError);
}

TEST(probing, feature_scaling_does_not_change_results) {
    const auto s = clusters(3, 80, 6, 1.0);
    ap::Matrix<float> scaled = s.x;
    for (std::size_t r = 0; r < scaled.rows(); ++r) {
        scaled(r, 0) *= 1000.0f;
        scaled(r, 3) *= 0.001f;
    }
    const auto a = ap::train_probe_cv(s.x, s.y, 5, 1);
    const auto b = ap::train_probe_cv(scaled, s.y, 5, 1);
    for (std::size_t f = 0; f < 5; ++f) {
        EXPECT_NEAR(a.fold_accuracies[f], b.fold_accuracies[f], 1e-12);
    }
}

TEST(probing, training_accuracy_beats_majority) {
    const auto s = clusters(4, 90, 5, 0.3);
    std::vector<std::size_t> rows(s.y.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i] = i;
    }
    ap::LinearProbe probe;
    probe.fit(s.x, s.y, rows, {});
    const double majority = 45.0 / 90.0;
    EXPECT_GE(probe.accuracy(s.x, s.y, rows), majority);
}

TEST(probing, designated_cell_stands_out) {
    ap::ProbeDataset ds;
    ds.n_layers = 2;
    ds.n_heads = 2;
    ds.cells.resize(4);
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 2; ++h) {
            const bool designated = l == 1 && h == 0;
            auto s = clusters(10 + l * 2 + h, 100, 6, designated ? 3.0 : 0.0);
            ds.cell(l, h).x = s.x;
            ds.cell(l, h).y = s.y;
        }
    }
    const auto r = ap::probe_grid(ds, 5);
    EXPECT_GT(r.accuracy(1, 0), 0.9);
    EXPECT_LT(r.accuracy(0, 0), 0.75);
    EXPECT_LT(r.accuracy(1, 1), 0.75);
    EXPECT_NE(r.to_csv().find("layer,head_0,head_1"), std::string::npos);
    EXPECT_EQ(r.metadata()["seed"], 5);
}

TEST(probing, head_activation_matches_recomputation) {
    const auto m = fixtures::toy_model();
    const std::vector<int> ids{10, 300, 301, 20, 33, 290};
    const auto tr = ap::forward(m, ids);
    const int D = m.config.d_model, dh = m.config.d_head();
    for (int l = 0; l < m.config.n_layers; ++l) {
        const auto& w = m.layers[l];
        std::vector<std::vector<double>> v(ids.size(), std::vector<double>(D, 0.0));
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const auto x = tr.residual(l, static_cast<int>(t));
            double ss = 0.0;
            for (float e : x) {
                ss += static_cast<double>(e) * e;
            }
            const double inv = 1.0 / std::sqrt(ss / D + m.config.norm_epsilon);
            for (int r = 0; r < D; ++r) {
                for (int c = 0; c < D; ++c) {
                    v[t][r] += w.wv[r * D + c] * (x[c] * inv * w.attn_norm[c]);
                }
            }
        }
        for (int h = 0; h < m.config.n_heads; ++h) {
            const int pos = static_cast<int>(ids.size()) - 1;
            const auto got = ap::extract_head_activation(tr, l, h, pos);
            ASSERT_EQ(static_cast<int>(got.size()), dh);
            const auto weights = tr.attention_row(l, h, pos);
            for (int e = 0; e < dh; ++e) {
                double want = 0.0;
                for (int j = 0; j <= pos; ++j) {
                    want += weights[j] * v[j][h * dh + e];
                }
                EXPECT_NEAR(got[e], want, 1e-5);
            }
        }
    }
    EXPECT_THROW(ap::extract_head_activation(tr, 4, 0, 0), ap::ValidationError);
}

TEST(probing, dataset_from_stories) {
    const auto m = fixtures::toy_model(7, 2, 2, 16);
    std::vector<ap::StoryInstance> stories;
    for (int i = 0; i < 5; ++i) {
        stories.push_back({"s" + std::to_string(i), "a fox tricked a crow", "a seller flattered a buyer",
                           "a crow tricked a fox " + std::to_string(i), true, ap::Label::unlabeled});
    }
    const auto pairs = ap::probe_pairs(stories);
    ASSERT_EQ(pairs.size(), 10u);
    EXPECT_EQ(pairs[1].label, ap::probe_distractor);
    const auto ds = ap::build_probe_dataset(m, pairs);
    EXPECT_EQ(ds.cells.size(), 4u);
    EXPECT_EQ(ds.cell(1, 1).x.rows(), 10u);
    EXPECT_EQ(ds.cell(1, 1).x.cols(), 8u);
    EXPECT_EQ(ds.sample_count(), 40u);
    const auto r = ap::probe_grid(ds, 0);
    for (double a : r.accuracy.data()) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
}
