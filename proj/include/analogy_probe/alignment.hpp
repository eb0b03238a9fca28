#ifndef ANALOGY_PROBE_ALIGNMENT_HPP
#define ANALOGY_PROBE_ALIGNMENT_HPP

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "dataset.hpp"
#include "engine.hpp"
#include "parallel.hpp"
#include "report.hpp"

namespace analogy_probe {

namespace detail {

template<typename T>
Matrix<double> unit_rows(const Matrix<T>& m, const char* which) {
    Matrix<double> out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            ss += static_cast<double>(m(r, c)) * static_cast<double>(m(r, c));
        }
        if (!(ss > 0.0) || !std::isfinite(ss)) {
            throw ValidationError(std::string(which) + " row " + std::to_string(r) +
                                  " is a zero or non-finite vector; cosine is undefined");
        }
        const double inv = 1.0 / std::sqrt(ss);
        for (std::size_t c = 0; c < m.cols(); ++c) {
            out(r, c) = static_cast<double>(m(r, c)) * inv;
        }
    }
    return out;
}

} // namespace detail

/// Cosine similarity between every source row and every candidate row.
template<typename T>
Matrix<double> cosine_matrix(const Matrix<T>& source, const Matrix<T>& candidate) {
    if (source.rows() == 0 || candidate.rows() == 0) {
        throw ValidationError("alignment needs at least one source and one candidate vector");
    }
    if (source.cols() != candidate.cols()) {
        throw ValidationError("source and candidate vectors differ in dimension");
    }
    const auto s = detail::unit_rows(source, "source");
    const auto c = detail::unit_rows(candidate, "candidate");
    Matrix<double> sim(s.rows(), c.rows());
    for (std::size_t i = 0; i < s.rows(); ++i) {
        for (std::size_t j = 0; j < c.rows(); ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < s.cols(); ++k) {
                dot += s(i, k) * c(j, k);
            }
            sim(i, j) = dot;
        }
    }
    return sim;
}

struct MasScore {
    double score = 0.0;
    /// Mutual best-match (source index, candidate index) pairs.
    std::vector<std::pair<std::size_t, std::size_t>> matches;
};

/// Mutual alignment from a precomputed similarity matrix. For every source
/// row i the best candidate j* is found, then the best source row for j*;
/// the pair counts when that is i again. Ties go to the lowest index.
inline MasScore mutual_alignment_from_similarity(const Matrix<double>& sim) {
    MasScore out;
    const std::size_t m = sim.rows();
    const std::size_t n = sim.cols();
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best_j = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (sim(i, j) > sim(i, best_j)) {
                best_j = j;
            }
        }
        std::size_t best_i = 0;
        for (std::size_t r = 1; r < m; ++r) {
            if (sim(r, best_j) > sim(best_i, best_j)) {
                best_i = r;
            }
        }
        if (best_i == i) {
            out.matches.emplace_back(i, best_j);
        }
    }
    out.score = static_cast<double>(out.matches.size()) / static_cast<double>(std::min(m, n));
    return out;
}

/// Mutual Alignment Score of source rows S (m x d) and candidate rows C (n x d).
template<typename T>
MasScore mutual_alignment_score(const Matrix<T>& source, const Matrix<T>& candidate) {
    return mutual_alignment_from_similarity(cosine_matrix(source, candidate));
}

/// Cosine matrix (source rows x candidate columns) plus the mutual-match mask.
struct SimilarityHeatmap {
    Matrix<double> similarity;
    Matrix<int> mutual;
    std::vector<std::string> source_tokens;
    std::vector<std::string> candidate_tokens;

    std::string similarity_csv() const { return csv::labelled_matrix("source", source_labels(), candidate_tokens, similarity); }

    std::string mask_csv() const {
        std::vector<std::string> header{"source"};
        header.insert(header.end(), candidate_tokens.begin(), candidate_tokens.end());
        std::string out = csv::row(header);
        const auto labels = source_labels();
        for (std::size_t r = 0; r < mutual.rows(); ++r) {
            std::vector<std::string> fields{labels[r]};
            for (std::size_t c = 0; c < mutual.cols(); ++c) {
                fields.push_back(std::to_string(mutual(r, c)));
            }
            out += csv::row(fields);
        }
        return out;
    }

private:
    std::vector<std::string> source_labels() const {
        return source_tokens.size() == similarity.rows() ? source_tokens : csv::index_labels(similarity.rows());
    }
};

template<typename T>
SimilarityHeatmap similarity_heatmap(const Matrix<T>& source, const Matrix<T>& candidate,
                                     std::vector<std::string> source_tokens = {},
                                     std::vector<std::string> candidate_tokens = {}) {
    SimilarityHeatmap h;
    h.similarity = cosine_matrix(source, candidate);
    h.mutual = Matrix<int>(h.similarity.rows(), h.similarity.cols(), 0);
    for (auto [i, j] : mutual_alignment_from_similarity(h.similarity).matches) {
        h.mutual(i, j) = 1;
    }
    h.source_tokens = source_tokens.empty() ? csv::index_labels(source.rows()) : std::move(source_tokens);
    h.candidate_tokens = candidate_tokens.empty() ? csv::index_labels(candidate.rows()) : std::move(candidate_tokens);
    return h;
}

struct MasResult {
    std::vector<double> mas_target;
    std::vector<double> mas_distractor;
    std::vector<double> relative;
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> target_matches;
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> distractor_matches;
};

/// Token states of both stories of one jointly encoded pair.
struct StoryPairStates {
    ForwardTrace trace;
    TokenSequence seq;
    TokenSpan source;
    TokenSpan candidate;
};

inline StoryPairStates encode_story_pair(const Model& model, const std::string& source, const std::string& candidate) {
    const auto prompt = render_story_pair(source, candidate);
    StoryPairStates out;
    out.seq = model.vocab.tokenize(prompt.text);
    out.source = contained_token_span(out.seq, prompt.source);
    out.candidate = contained_token_span(out.seq, prompt.candidate);
    if (out.source.empty() || out.candidate.empty()) {
        throw ValidationError("story span resolves to zero tokens");
    }
    out.trace = forward(model, out.seq.ids);
    return out;
}

/// MAS of source vs. target and source vs. distractor at every layer input.
inline MasResult mas_layer_profile(const Model& model, const StoryInstance& story) {
    const auto target = encode_story_pair(model, story.source, story.target);
    const auto distractor = encode_story_pair(model, story.source, story.distractor);
    MasResult r;
    for (int l = 0; l < model.config.n_layers; ++l) {
        const auto t = mutual_alignment_score(target.trace.residual_rows(l, target.source.begin, target.source.end),
                                              target.trace.residual_rows(l, target.candidate.begin, target.candidate.end));
        const auto d = mutual_alignment_score(
            distractor.trace.residual_rows(l, distractor.source.begin, distractor.source.end),
            distractor.trace.residual_rows(l, distractor.candidate.begin, distractor.candidate.end));
        r.mas_target.push_back(t.score);
        r.mas_distractor.push_back(d.score);
        r.relative.push_back(t.score - d.score);
        r.target_matches.push_back(t.matches);
        r.distractor_matches.push_back(d.matches);
    }
    return r;
}

/// Heatmap of one story pair at one layer, axes labelled with token strings.
inline SimilarityHeatmap story_heatmap(const Model& model, const std::string& source, const std::string& candidate,
                                       int layer) {
    if (layer < 0 || layer > model.config.n_layers) {
        throw ValidationError("heatmap layer " + std::to_string(layer) + " out of range");
    }
    const auto enc = encode_story_pair(model, source, candidate);
    auto labels = [&](TokenSpan s) {
        std::vector<std::string> out;
        for (int t = s.begin; t < s.end; ++t) {
            out.push_back(model.vocab.decode(std::span<const int>(&enc.seq.ids[t], 1)));
        }
        return out;
    };
    return similarity_heatmap(enc.trace.residual_rows(layer, enc.source.begin, enc.source.end),
                              enc.trace.residual_rows(layer, enc.candidate.begin, enc.candidate.end), labels(enc.source),
                              labels(enc.candidate));
}

/// Mean relative MAS per layer, split by label.
struct RelativeMasAggregate {
    std::map<Label, std::vector<double>> mean_relative;
    std::map<Label, std::size_t> count;

    std::string to_csv() const {
        std::string out = csv::row({"layer", "label", "mean_relative"});
        for (const auto& [label, values] : mean_relative) {
            for (std::size_t l = 0; l < values.size(); ++l) {
                out += csv::row({std::to_string(l), to_string(label), csv::number(values[l])});
            }
        }
        return out;
    }
};

inline RelativeMasAggregate relative_mas_aggregate(const std::vector<MasResult>& results, const std::vector<Label>& labels) {
    if (results.size() != labels.size()) {
        throw ValidationError("one label per MAS result is required");
    }
    RelativeMasAggregate agg;
    for (std::size_t i = 0; i < results.size(); ++i) {
        auto& sum = agg.mean_relative[labels[i]];
        if (sum.empty()) {
            sum.assign(results[i].relative.size(), 0.0);
        }
        if (sum.size() != results[i].relative.size()) {
            throw ValidationError("MAS curves differ in layer count");
        }
        for (std::size_t l = 0; l < sum.size(); ++l) {
            sum[l] += results[i].relative[l];
        }
        ++agg.count[labels[i]];
    }
    for (auto& [label, values] : agg.mean_relative) {
        for (auto& v : values) {
            v /= static_cast<double>(agg.count[label]);
        }
    }
    return agg;
}

inline std::vector<MasResult> mas_profiles(const Model& model, const std::vector<StoryInstance>& stories) {
    std::vector<MasResult> out(stories.size());
    parallel_for(stories.size(), [&](std::size_t i) { out[i] = mas_layer_profile(model, stories[i]); });
    return out;
}

} // namespace analogy_probe

#endif
