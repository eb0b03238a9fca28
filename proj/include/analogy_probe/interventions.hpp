#ifndef ANALOGY_PROBE_INTERVENTIONS_HPP
#define ANALOGY_PROBE_INTERVENTIONS_HPP

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "engine.hpp"
#include "parallel.hpp"
#include "report.hpp"

namespace analogy_probe {

/// Layers knocked out around `center`: k = ceil(L / 5) layers, floor(k/2)
/// below the center and ceil(k/2) - 1 above it, clipped to [0, L).
inline std::vector<int> knockout_window(int center_layer, int n_layers) {
    if (n_layers <= 0 || center_layer < 0 || center_layer >= n_layers) {
        throw ValidationError("knockout window center " + std::to_string(center_layer) + " outside [0, " +
                              std::to_string(n_layers) + ")");
    }
    const int k = (n_layers + 4) / 5;
    const int lo = std::max(0, center_layer - k / 2);
    const int hi = std::min(n_layers - 1, center_layer + (k - 1) / 2);
    std::vector<int> layers;
    for (int l = lo; l <= hi; ++l) {
        layers.push_back(l);
    }
    return layers;
}

enum class SpanKind { e1, e2, link, e3 };

inline std::string to_string(SpanKind k) {
    switch (k) {
    case SpanKind::e1:
        return "e1";
    case SpanKind::e2:
        return "e2";
    case SpanKind::link:
        return "link";
    default:
        return "e3";
    }
}

inline SpanKind parse_span_kind(const std::string& s) {
    if (s == "e1") {
        return SpanKind::e1;
    }
    if (s == "e2") {
        return SpanKind::e2;
    }
    if (s == "link") {
        return SpanKind::link;
    }
    if (s == "e3") {
        return SpanKind::e3;
    }
    throw ValidationError("unknown span '" + s + "' (expected e1, e2, link or e3)");
}

inline TokenSpan span_of(const AnalogyTokens& t, SpanKind k) {
    switch (k) {
    case SpanKind::e1:
        return t.e1;
    case SpanKind::e2:
        return t.e2;
    case SpanKind::link:
        return t.link;
    default:
        return t.e3;
    }
}

/// Knocks out attention from the resolution token to `span` in `layers`.
inline Knockout make_knockout(const AnalogyTokens& t, SpanKind span, std::vector<int> layers) {
    const TokenSpan s = span_of(t, span);
    if (s.empty()) {
        throw ValidationError("span " + to_string(span) + " resolves to zero tokens");
    }
    return Knockout{std::move(layers), t.resolution, s.begin, s.end};
}

/// Copies residual_pre[src_layer][src_pos] of `source` into a patch for
/// (tgt_layer, tgt_pos).
inline Patch patch_from_trace(const ForwardTrace& source, int src_layer, int src_pos, int tgt_layer, int tgt_pos) {
    if (src_layer < 0 || src_layer > source.n_layers || src_pos < 0 || src_pos >= source.seq_len) {
        throw PlanError("patch source (" + std::to_string(src_layer) + ", " + std::to_string(src_pos) +
                        ") outside the source trace");
    }
    const auto v = source.residual(src_layer, src_pos);
    return Patch{tgt_layer, tgt_pos, std::vector<float>(v.begin(), v.end())};
}

/// Case-folded, whitespace-collapsed e4 is a prefix of the generation.
inline bool generation_answers(std::string_view generation, std::string_view e4) {
    const std::string want = text::normalize(e4, false);
    return !want.empty() && text::starts_with(text::normalize(generation, false), want);
}

struct SweepOptions {
    /// Generated tokens compared against the baseline.
    int max_new = 8;
};

/// Rows are the baseline followed by one row per knocked-out span; columns
/// are center layers. Correct instances report answer accuracy, incorrect
/// instances the rate at which the generation changed.
struct SweepReport {
    Label label = Label::correct;
    int n_layers = 0;
    std::size_t n_instances = 0;
    std::vector<std::string> rows;
    Matrix<double> values;

    std::string to_csv() const { return csv::labelled_matrix("position", rows, csv::index_labels(n_layers), values); }
};

inline SweepReport knockout_sweep(const Model& model, const std::vector<AnalogyInstance>& instances,
                                  const std::vector<SpanKind>& positions, const SweepOptions& opts = {}) {
    const int L = model.config.n_layers;
    SweepReport report;
    report.n_layers = L;
    report.n_instances = instances.size();
    report.rows.push_back("baseline");
    for (auto p : positions) {
        report.rows.push_back(to_string(p));
    }
    report.values = Matrix<double>(report.rows.size(), static_cast<std::size_t>(L), 0.0);
    if (instances.empty()) {
        return report;
    }
    report.label = instances.front().label;
    for (const auto& inst : instances) {
        if (inst.label == Label::unlabeled || inst.label != report.label) {
            throw ValidationError("knockout sweep needs instances sharing one correct/incorrect label; '" + inst.id +
                                  "' is " + to_string(inst.label));
        }
    }

    std::vector<AnalogyTokens> tokens(instances.size());
    std::vector<std::string> baseline(instances.size());
    parallel_for(instances.size(), [&](std::size_t i) {
        tokens[i] = tokenize_analogy(instances[i], model.vocab);
        baseline[i] = greedy_decode(model, tokens[i].seq.ids, opts.max_new).text;
    });

    auto score = [&](std::size_t i, const std::string& generation) {
        if (report.label == Label::correct) {
            return generation_answers(generation, instances[i].e4) ? 1.0 : 0.0;
        }
        return generation != baseline[i] ? 1.0 : 0.0;
    };

    const std::size_t cells_per_instance = positions.size() * static_cast<std::size_t>(L);
    std::vector<double> outcome(instances.size() * cells_per_instance, 0.0);
    parallel_for(outcome.size(), [&](std::size_t idx) {
        const std::size_t i = idx / cells_per_instance;
        const std::size_t rem = idx % cells_per_instance;
        const SpanKind span = positions[rem / L];
        const int center = static_cast<int>(rem % L);
        InterventionPlan plan;
        plan.knockouts.push_back(make_knockout(tokens[i], span, knockout_window(center, L)));
        outcome[idx] = score(i, greedy_decode(model, tokens[i].seq.ids, opts.max_new, plan).text);
    });

    const auto n = static_cast<double>(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const double base = score(i, baseline[i]);
        for (int l = 0; l < L; ++l) {
            report.values(0, l) += base;
        }
        for (std::size_t p = 0; p < positions.size(); ++p) {
            for (int l = 0; l < L; ++l) {
                report.values(p + 1, l) += outcome[i * cells_per_instance + p * L + l];
            }
        }
    }
    for (auto& v : report.values.data()) {
        v /= n;
    }
    return report;
}

/// Relations used for the first-pair replacement experiment.
inline const std::vector<std::string> first_pair_relations = {"official language of", "author of", "composer of"};

/// Replaces (e1, e2) of every incorrect instance with the first pair of a
/// seeded-uniform same-relation correct instance. When `relations` is
/// non-empty, only incorrect instances whose relation id or surface is
/// listed are kept.
inline std::vector<AnalogyInstance> swap_first_pairs(const std::vector<AnalogyInstance>& incorrect,
                                                     const std::vector<AnalogyInstance>& correct, std::uint64_t seed,
                                                     const std::vector<std::string>& relations = {}) {
    std::map<std::string, std::vector<const AnalogyInstance*>> donors;
    for (const auto& c : correct) {
        donors[c.relation_id].push_back(&c);
    }
    auto selected = [&](const AnalogyInstance& a) {
        return relations.empty() || std::find(relations.begin(), relations.end(), a.relation_id) != relations.end() ||
               std::find(relations.begin(), relations.end(), a.relation_surface) != relations.end();
    };
    SeededRng rng(seed);
    std::vector<AnalogyInstance> out;
    for (const auto& inc : incorrect) {
        if (!selected(inc)) {
            continue;
        }
        auto it = donors.find(inc.relation_id);
        if (it == donors.end() || it->second.empty()) {
            throw ValidationError("relation '" + inc.relation_id + "' has no correct donor for instance '" + inc.id + "'");
        }
        const AnalogyInstance& donor = *it->second[rng.uniform_index(it->second.size())];
        AnalogyInstance swapped = inc;
        swapped.e1 = donor.e1;
        swapped.e2 = donor.e2;
        swapped.label = Label::unlabeled;
        rerender(swapped);
        out.push_back(std::move(swapped));
    }
    return out;
}

/// Fraction of instances whose greedy generation answers e4.
inline double answer_rate(const Model& model, const std::vector<AnalogyInstance>& instances, int max_new = 8) {
    if (instances.empty()) {
        return 0.0;
    }
    std::vector<int> hit(instances.size(), 0);
    parallel_for(instances.size(), [&](std::size_t i) {
        const auto seq = model.vocab.tokenize(instances[i].prompt);
        hit[i] = generation_answers(greedy_decode(model, seq.ids, max_new).text, instances[i].e4) ? 1 : 0;
    });
    double sum = 0.0;
    for (int h : hit) {
        sum += h;
    }
    return sum / static_cast<double>(instances.size());
}

/// Per-cell correction rates for (source layer in e2) x (target layer in the link).
struct PatchGridReport {
    int n_layers = 0;
    std::size_t n_instances = 0;
    Matrix<double> gain;
    /// Highest-gain (source, target) cell; empty when no cell corrects anything.
    std::optional<std::pair<int, int>> best_cell;
    double best_gain = 0.0;

    std::string to_csv() const {
        return csv::labelled_matrix("source_layer", csv::index_labels(n_layers), csv::index_labels(n_layers), gain);
    }

    nlohmann::json summary() const {
        nlohmann::json j;
        j["best_cell"] = best_cell ? nlohmann::json::array({best_cell->first, best_cell->second}) : nlohmann::json(nullptr);
        j["gain"] = best_gain;
        j["n_instances"] = n_instances;
        return j;
    }
};

/// Aggregates corrected flags into per-cell rates; `corrected(i, src, tgt)`
/// reports whether instance i was fixed by that cell.
inline PatchGridReport aggregate_patch_grid(int n_layers, std::size_t n_instances,
                                            const std::function<bool(std::size_t, int, int)>& corrected) {
    PatchGridReport report;
    report.n_layers = n_layers;
    report.n_instances = n_instances;
    report.gain = Matrix<double>(n_layers, n_layers, 0.0);
    const std::size_t cells = static_cast<std::size_t>(n_layers) * n_layers;
    std::vector<char> flags(n_instances * cells, 0);
    parallel_for(flags.size(), [&](std::size_t idx) {
        const std::size_t i = idx / cells;
        const std::size_t cell = idx % cells;
        flags[idx] = corrected(i, static_cast<int>(cell / n_layers), static_cast<int>(cell % n_layers)) ? 1 : 0;
    });
    for (std::size_t i = 0; i < n_instances; ++i) {
        for (std::size_t cell = 0; cell < cells; ++cell) {
            report.gain.data()[cell] += flags[i * cells + cell];
        }
    }
    if (n_instances > 0) {
        for (auto& g : report.gain.data()) {
            g /= static_cast<double>(n_instances);
        }
    }
    for (int s = 0; s < n_layers; ++s) {
        for (int t = 0; t < n_layers; ++t) {
            const double g = report.gain(s, t);
            if (g > report.best_gain) {
                report.best_gain = g;
                report.best_cell = std::make_pair(s, t);
            }
        }
    }
    return report;
}

/// Patches the last e2 token's state at each source layer into the last link
/// token at each target layer and records whether the answer gets fixed.
inline PatchGridReport patch_grid_sweep(const Model& model, const std::vector<AnalogyInstance>& instances,
                                        const SweepOptions& opts = {}) {
    std::vector<AnalogyTokens> tokens(instances.size());
    std::vector<ForwardTrace> baseline(instances.size());
    parallel_for(instances.size(), [&](std::size_t i) {
        tokens[i] = tokenize_analogy(instances[i], model.vocab);
        baseline[i] = forward(model, tokens[i].seq.ids);
    });
    return aggregate_patch_grid(model.config.n_layers, instances.size(), [&](std::size_t i, int src, int tgt) {
        InterventionPlan plan;
        plan.patches.push_back(patch_from_trace(baseline[i], src, tokens[i].e2.last(), tgt, tokens[i].link.last()));
        const auto gen = greedy_decode(model, tokens[i].seq.ids, opts.max_new, plan);
        return generation_answers(gen.text, instances[i].e4);
    });
}

} // namespace analogy_probe

#endif
