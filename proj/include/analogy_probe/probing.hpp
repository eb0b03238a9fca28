#ifndef ANALOGY_PROBE_PROBING_HPP
#define ANALOGY_PROBE_PROBING_HPP

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "engine.hpp"
#include "parallel.hpp"
#include "report.hpp"

namespace analogy_probe {

/// Attention-weighted value vector of (layer, head) at `pos`, taken before
/// the output projection.
inline std::vector<float> extract_head_activation(const ForwardTrace& trace, int layer, int head, int pos) {
    if (layer < 0 || layer >= trace.n_layers || head < 0 || head >= trace.n_heads || pos < 0 || pos >= trace.seq_len) {
        throw ValidationError("head activation index (layer " + std::to_string(layer) + ", head " + std::to_string(head) +
                              ", pos " + std::to_string(pos) + ") out of range");
    }
    const auto v = trace.head_output(layer, head, pos);
    return {v.begin(), v.end()};
}

inline constexpr int probe_target = 1;
inline constexpr int probe_distractor = 0;

/// A source story paired with one candidate; label 1 = analogous target,
/// 0 = lexical distractor.
struct ProbePair {
    std::string id;
    std::string source;
    std::string candidate;
    int label = probe_target;
};

/// Both pairings of every story.
inline std::vector<ProbePair> probe_pairs(const std::vector<StoryInstance>& stories) {
    std::vector<ProbePair> pairs;
    for (const auto& s : stories) {
        pairs.push_back({s.id + "/target", s.source, s.target, probe_target});
        pairs.push_back({s.id + "/distractor", s.source, s.distractor, probe_distractor});
    }
    return pairs;
}

/// Samples for one (layer, head) cell.
struct ProbeCell {
    Matrix<float> x;
    std::vector<int> y;
    std::vector<std::string> pair_ids;
};

struct ProbeDataset {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<ProbeCell> cells; // layer-major

    ProbeCell& cell(int layer, int head) { return cells[static_cast<std::size_t>(layer) * n_heads + head]; }
    const ProbeCell& cell(int layer, int head) const { return cells[static_cast<std::size_t>(layer) * n_heads + head]; }

    std::size_t sample_count() const {
        std::size_t n = 0;
        for (const auto& c : cells) {
            n += c.y.size();
        }
        return n;
    }
};

/// One forward pass per pair; the final-token activation of every head.
inline ProbeDataset build_probe_dataset(const Model& model, const std::vector<ProbePair>& pairs) {
    const int L = model.config.n_layers;
    const int H = model.config.n_heads;
    std::vector<ForwardTrace> traces(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto& p = pairs[i];
        if (p.label != probe_target && p.label != probe_distractor) {
            throw ValidationError("pair '" + p.id + "' has a label other than target/distractor");
        }
        const auto seq = model.vocab.tokenize(render_story_pair(p.source, p.candidate).text);
        if (seq.size() > static_cast<std::size_t>(model.config.max_seq_len)) {
            throw ValidationError("pair '" + p.id + "' is " + std::to_string(seq.size()) +
                                  " tokens, longer than max_seq_len");
        }
        traces[i] = forward(model, seq.ids);
    });
    ProbeDataset ds;
    ds.n_layers = L;
    ds.n_heads = H;
    ds.cells.resize(static_cast<std::size_t>(L) * H);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const int last = traces[i].seq_len - 1;
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                auto& c = ds.cell(l, h);
                c.x.append_row(traces[i].head_output(l, h, last));
                c.y.push_back(pairs[i].label);
                c.pair_ids.push_back(pairs[i].id);
            }
        }
    }
    return ds;
}

struct ProbeHyperparameters {
    double l2 = 1e-3;
    double learning_rate = 0.1;
    int iterations = 500;
};

/// L2-regularized logistic regression on standardized features, trained by
/// full-batch gradient descent from zero weights.
class LinearProbe {
public:
    void fit(const Matrix<float>& x, const std::vector<int>& y, const std::vector<std::size_t>& rows,
             const ProbeHyperparameters& hp) {
        const std::size_t d = x.cols();
        const auto n = static_cast<double>(rows.size());
        mean_.assign(d, 0.0);
        scale_.assign(d, 1.0);
        for (auto r : rows) {
            for (std::size_t c = 0; c < d; ++c) {
                mean_[c] += x(r, c);
            }
        }
        for (auto& m : mean_) {
            m /= n;
        }
        std::vector<double> var(d, 0.0);
        for (auto r : rows) {
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = x(r, c) - mean_[c];
                var[c] += diff * diff;
            }
        }
        for (std::size_t c = 0; c < d; ++c) {
            const double sd = std::sqrt(var[c] / n);
            scale_[c] = sd > 0.0 ? sd : 1.0;
        }

        std::vector<double> z(rows.size() * d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t c = 0; c < d; ++c) {
                z[i * d + c] = (x(rows[i], c) - mean_[c]) / scale_[c];
            }
        }

        weights_.assign(d, 0.0);
        bias_ = 0.0;
        std::vector<double> grad(d);
        for (int it = 0; it < hp.iterations; ++it) {
            std::fill(grad.begin(), grad.end(), 0.0);
            double grad_b = 0.0;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                double logit = bias_;
                for (std::size_t c = 0; c < d; ++c) {
                    logit += weights_[c] * z[i * d + c];
                }
                const double err = sigmoid(logit) - static_cast<double>(y[rows[i]]);
                for (std::size_t c = 0; c < d; ++c) {
                    grad[c] += err * z[i * d + c];
                }
                grad_b += err;
            }
            for (std::size_t c = 0; c < d; ++c) {
                weights_[c] -= hp.learning_rate * (grad[c] / n + hp.l2 * weights_[c]);
            }
            bias_ -= hp.learning_rate * grad_b / n;
        }
    }

    int predict(std::span<const float> features) const {
        double logit = bias_;
        for (std::size_t c = 0; c < weights_.size(); ++c) {
            logit += weights_[c] * ((features[c] - mean_[c]) / scale_[c]);
        }
        return logit > 0.0 ? 1 : 0;
    }

    double accuracy(const Matrix<float>& x, const std::vector<int>& y, const std::vector<std::size_t>& rows) const {
        if (rows.empty()) {
            return 0.0;
        }
        std::size_t right = 0;
        for (auto r : rows) {
            right += predict(x.row(r)) == y[r] ? 1 : 0;
        }
        return static_cast<double>(right) / static_cast<double>(rows.size());
    }

    const std::vector<double>& weights() const { return weights_; }
    double bias() const { return bias_; }

private:
    static double sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

    std::vector<double> mean_;
    std::vector<double> scale_;
    std::vector<double> weights_;
    double bias_ = 0.0;
};

/// Fold index for every sample. Each class is shuffled with the seed and cut
/// into `folds` contiguous chunks; remainders go to the earliest folds.
inline std::vector<int> stratified_folds(const std::vector<int>& y, int folds, std::uint64_t seed) {
    if (folds < 2) {
        throw ValidationError("cross-validation needs at least 2 folds");
    }
    SeededRng rng(seed);
    std::vector<int> fold_of(y.size(), -1);
    for (int cls : {0, 1}) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] == cls) {
                members.push_back(i);
            }
        }
        if (members.size() < static_cast<std::size_t>(folds)) {
            throw ValidationError("class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                                  " samples, fewer than " + std::to_string(folds) + " folds");
        }
        rng.shuffle(members.begin(), members.end());
        const std::size_t base = members.size() / folds;
        const std::size_t extra = members.size() % folds;
        std::size_t cursor = 0;
        for (int f = 0; f < folds; ++f) {
            const std::size_t take = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
            for (std::size_t k = 0; k < take; ++k) {
                fold_of[members[cursor++]] = f;
            }
        }
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (fold_of[i] < 0) {
            throw ValidationError("probe label " + std::to_string(y[i]) + " is neither 0 nor 1");
        }
    }
    return fold_of;
}

struct ProbeCvResult {
    double mean_accuracy = 0.0;
    std::vector<double> fold_accuracies;
};

/// Stratified k-fold cross-validation; returns the mean validation accuracy.
inline ProbeCvResult train_probe_cv(const Matrix<float>& x, const std::vector<int>& y, int folds, std::uint64_t seed,
                                    const ProbeHyperparameters& hp = {}) {
    if (x.rows() != y.size()) {
        throw ValidationError("probe features and labels differ in length");
    }
    const auto fold_of = stratified_folds(y, folds, seed);
    ProbeCvResult result;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train, valid;
        bool has[2] = {false, false};
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (fold_of[i] == f) {
                valid.push_back(i);
            } else {
                train.push_back(i);
                has[y[i]] = true;
            }
        }
        if (!has[0] || !has[1]) {
            throw ValidationError("fold " + std::to_string(f) + " training split is missing a class");
        }
        LinearProbe probe;
        probe.fit(x, y, train, hp);
        result.fold_accuracies.push_back(probe.accuracy(x, y, valid));
    }
    double sum = 0.0;
    for (double a : result.fold_accuracies) {
        sum += a;
    }
    result.mean_accuracy = sum / static_cast<double>(folds);
    return result;
}

struct ProbeResult {
    Matrix<double> accuracy; // layers x heads
    std::vector<std::vector<double>> fold_accuracies; // layer-major cells
    std::uint64_t seed = 0;
    int folds = 5;
    ProbeHyperparameters hyperparameters;

    std::string to_csv() const {
        std::vector<std::string> heads;
        for (std::size_t h = 0; h < accuracy.cols(); ++h) {
            heads.push_back("head_" + std::to_string(h));
        }
        return csv::labelled_matrix("layer", csv::index_labels(accuracy.rows()), heads, accuracy);
    }

    nlohmann::json metadata() const {
        return {{"seed", seed},
                {"folds", folds},
                {"l2", hyperparameters.l2},
                {"learning_rate", hyperparameters.learning_rate},
                {"iterations", hyperparameters.iterations},
                {"n_layers", accuracy.rows()},
                {"n_heads", accuracy.cols()},
                {"fold_accuracies", fold_accuracies}};
    }
};

inline ProbeResult probe_grid(const ProbeDataset& ds, std::uint64_t seed, int folds = 5,
                              const ProbeHyperparameters& hp = {}) {
    ProbeResult r;
    r.seed = seed;
    r.folds = folds;
    r.hyperparameters = hp;
    r.accuracy = Matrix<double>(ds.n_layers, ds.n_heads, 0.0);
    r.fold_accuracies.resize(ds.cells.size());
    parallel_for(ds.cells.size(), [&](std::size_t i) {
        const auto cv = train_probe_cv(ds.cells[i].x, ds.cells[i].y, folds, seed, hp);
        r.accuracy.data()[i] = cv.mean_accuracy;
        r.fold_accuracies[i] = cv.fold_accuracies;
    });
    return r;
}

inline ProbeResult probe_grid(const Model& model, const std::vector<ProbePair>& pairs, std::uint64_t seed, int folds = 5,
                              const ProbeHyperparameters& hp = {}) {
    return probe_grid(build_probe_dataset(model, pairs), seed, folds, hp);
}

} // namespace analogy_probe

#endif
