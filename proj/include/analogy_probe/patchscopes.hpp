#ifndef ANALOGY_PROBE_PATCHSCOPES_HPP
#define ANALOGY_PROBE_PATCHSCOPES_HPP

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "engine.hpp"
#include "interventions.hpp"
#include "parallel.hpp"
#include "report.hpp"

namespace analogy_probe {

enum class PromptKind { relational_e2, relational_e3, relational_resolution, attributive_default };

inline std::string to_string(PromptKind k) {
    switch (k) {
    case PromptKind::relational_e2:
        return "relational_e2";
    case PromptKind::relational_e3:
        return "relational_e3";
    case PromptKind::relational_resolution:
        return "relational_resolution";
    default:
        return "attributive_default";
    }
}

inline PromptKind parse_prompt_kind(const std::string& s) {
    for (auto k : {PromptKind::relational_e2, PromptKind::relational_e3, PromptKind::relational_resolution,
                   PromptKind::attributive_default}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw ValidationError("unknown target prompt kind '" + s + "'");
}

/// Few-shot exemplars shared by the three relational prompts.
inline constexpr const char* relational_exemplars =
    "Japan is to Tokyo: capital of, Theory of Evolution is to Charles Darwin: founder of, "
    "Peace is to olive branch: symbol of, ";

/// Entity-description prompt; the trailing "x" is the placeholder.
inline constexpr const char* attributive_prompt =
    "Syria: Country in the Middle East, Leonardo DiCaprio: American actor, Samsung: South Korean multinational "
    "major appliance and consumer electronics corporation, x";

/// A rendered target prompt with the byte range of its placeholder "x".
struct TargetPrompt {
    PromptKind kind = PromptKind::attributive_default;
    std::string text;
    CharSpan placeholder;
};

namespace detail {

inline TargetPrompt fill_tail(PromptKind kind, const std::string& tail, const std::string& entity) {
    TargetPrompt p;
    p.kind = kind;
    const std::size_t slot = tail.find("{}");
    const std::string filled = tail.substr(0, slot) + entity + tail.substr(slot + 2);
    p.text = std::string(relational_exemplars) + filled;
    // The placeholder is the standalone "x" outside the substituted entity.
    const std::size_t tail_start = std::string(relational_exemplars).size();
    const std::size_t x_in_tail = tail.find('x');
    const std::size_t shift = x_in_tail > slot ? entity.size() - 2 : 0;
    const std::size_t x = tail_start + x_in_tail + shift;
    p.placeholder = {x, x + 1};
    return p;
}

} // namespace detail

/// Target prompts of `kind` for the instance. The resolution kind yields two
/// prompts, one filled with e3 and one with e4.
inline std::vector<TargetPrompt> build_prompts(PromptKind kind, const AnalogyInstance& a) {
    auto require = [&](const std::string& field, const char* name) {
        if (field.empty()) {
            throw ValidationError("instance '" + a.id + "' has no " + name + " for a " + to_string(kind) + " prompt");
        }
    };
    switch (kind) {
    case PromptKind::relational_e2:
        require(a.e1, "e1");
        return {detail::fill_tail(kind, "{} is to x", a.e1)};
    case PromptKind::relational_e3:
        require(a.e4, "e4");
        return {detail::fill_tail(kind, "x is to {}", a.e4)};
    case PromptKind::relational_resolution:
        require(a.e3, "e3");
        require(a.e4, "e4");
        return {detail::fill_tail(kind, "{} is x", a.e3), detail::fill_tail(kind, "{} is x", a.e4)};
    case PromptKind::attributive_default: {
        TargetPrompt p;
        p.kind = kind;
        p.text = attributive_prompt;
        p.placeholder = {p.text.size() - 1, p.text.size()};
        return {p};
    }
    }
    throw ValidationError("unknown target prompt kind");
}

/// Token position of the placeholder; it must fall in exactly one token.
inline int placeholder_position(const TargetPrompt& p, const TokenSequence& seq) {
    const TokenSpan s = token_span(seq, p.placeholder);
    if (s.empty() || s.end - s.begin != 1) {
        throw ValidationError("placeholder of " + to_string(p.kind) + " prompt does not map to exactly one token");
    }
    return s.begin;
}

struct PatchscopeOptions {
    int max_new = 24;
    /// Injection layer; defaults to the source layer.
    std::optional<int> target_layer;
};

/// Decodes the target prompt with its placeholder state replaced by the
/// source state at (src_layer, src_pos).
inline std::string run_patchscope(const Model& model, const ForwardTrace& source, int src_layer, int src_pos,
                                  const TargetPrompt& prompt, const PatchscopeOptions& opts = {}) {
    const auto seq = model.vocab.tokenize(prompt.text);
    const int placeholder = placeholder_position(prompt, seq);
    InterventionPlan plan;
    plan.patches.push_back(
        patch_from_trace(source, src_layer, src_pos, opts.target_layer.value_or(src_layer), placeholder));
    return greedy_decode(model, seq.ids, opts.max_new, plan).text;
}

struct DescriptionScore {
    std::string description;
    bool relational_hit = false;
    bool attributive_hit = false;
    std::vector<std::string> matched;
};

/// Case-insensitive substring match against any alias.
inline bool score_relational(const std::string& description, const std::vector<std::string>& aliases,
                             std::vector<std::string>* matched = nullptr) {
    if (aliases.empty()) {
        throw ValidationError("relational scoring needs at least one alias");
    }
    const std::string hay = text::casefold(description);
    bool hit = false;
    for (const auto& alias : aliases) {
        const std::string needle = text::casefold(alias);
        if (!needle.empty() && hay.find(needle) != std::string::npos) {
            hit = true;
            if (matched != nullptr) {
                matched->push_back(alias);
            }
        }
    }
    return hit;
}

/// Case-insensitive whole-word match against any related entity.
inline bool score_attributive(const std::string& description, const std::set<std::string>& related,
                              std::vector<std::string>* matched = nullptr) {
    if (related.empty()) {
        throw ValidationError("attributive scoring needs a non-empty related-entity set");
    }
    const std::string hay = text::casefold(description);
    bool hit = false;
    for (const auto& entity : related) {
        const std::string needle = text::casefold(entity);
        if (needle.empty()) {
            continue;
        }
        for (std::size_t pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
            const bool left = pos == 0 || !text::is_word_char(hay[pos - 1]);
            const std::size_t end = pos + needle.size();
            const bool right = end >= hay.size() || !text::is_word_char(hay[end]);
            if (left && right) {
                hit = true;
                if (matched != nullptr) {
                    matched->push_back(entity);
                }
                break;
            }
        }
    }
    return hit;
}

inline DescriptionScore score_description(const std::string& description, const std::vector<std::string>& aliases,
                                          const std::set<std::string>& related) {
    DescriptionScore s;
    s.description = description;
    if (!aliases.empty()) {
        s.relational_hit = score_relational(description, aliases, &s.matched);
    }
    if (!related.empty()) {
        s.attributive_hit = score_attributive(description, related, &s.matched);
    }
    return s;
}

/// Entity -> related entity strings, read from a JSON object sidecar.
using RelatedEntities = std::map<std::string, std::set<std::string>>;

inline RelatedEntities load_related_entities(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("related-entity file '" + path.string() + "': " + e.what());
    }
    if (!j.is_object()) {
        throw FormatError("related-entity file must map entity names to string lists");
    }
    RelatedEntities out;
    for (const auto& [entity, list] : j.items()) {
        if (!list.is_array()) {
            throw FormatError("related entities of '" + entity + "' must be a list");
        }
        for (const auto& s : list) {
            out[entity].insert(s.get<std::string>());
        }
    }
    return out;
}

enum class DecodePosition { e2, e3, resolution };
enum class InfoKind { relational, attributive };

inline std::string to_string(DecodePosition p) {
    return p == DecodePosition::e2 ? "e2" : p == DecodePosition::e3 ? "e3" : "resolution";
}

inline DecodePosition parse_decode_position(const std::string& s) {
    if (s == "e2") {
        return DecodePosition::e2;
    }
    if (s == "e3") {
        return DecodePosition::e3;
    }
    if (s == "resolution") {
        return DecodePosition::resolution;
    }
    throw ValidationError("unknown decode position '" + s + "' (expected e2, e3 or resolution)");
}

inline InfoKind parse_info_kind(const std::string& s) {
    if (s == "relational") {
        return InfoKind::relational;
    }
    if (s == "attributive") {
        return InfoKind::attributive;
    }
    throw ValidationError("unknown information kind '" + s + "' (expected relational or attributive)");
}

/// Per-layer hit proportions, one curve per label present in the input.
struct LayerCurve {
    int n_layers = 0;
    bool no_data = true;
    std::map<Label, std::vector<double>> proportion;
    std::map<Label, std::size_t> count;

    std::string to_csv() const {
        std::string out = csv::row({"layer", "label", "proportion"});
        for (const auto& [label, values] : proportion) {
            for (std::size_t l = 0; l < values.size(); ++l) {
                out += csv::row({std::to_string(l), to_string(label), csv::number(values[l])});
            }
        }
        return out;
    }
};

/// Counts hits over every (instance, layer). `describe(i, layer)` produces
/// the description for instance i; `hit(i, description)` scores it.
inline LayerCurve sweep_curve(const std::vector<AnalogyInstance>& instances, int n_layers,
                              const std::function<std::vector<std::string>(std::size_t, int)>& describe,
                              const std::function<bool(std::size_t, const std::string&)>& hit) {
    LayerCurve curve;
    curve.n_layers = n_layers;
    if (instances.empty()) {
        return curve;
    }
    curve.no_data = false;
    std::vector<char> flags(instances.size() * static_cast<std::size_t>(n_layers), 0);
    parallel_for(flags.size(), [&](std::size_t idx) {
        const std::size_t i = idx / n_layers;
        const int layer = static_cast<int>(idx % n_layers);
        for (const auto& d : describe(i, layer)) {
            if (hit(i, d)) {
                flags[idx] = 1;
                break;
            }
        }
    });
    for (std::size_t i = 0; i < instances.size(); ++i) {
        auto& values = curve.proportion[instances[i].label];
        values.resize(n_layers, 0.0);
        ++curve.count[instances[i].label];
        for (int l = 0; l < n_layers; ++l) {
            values[l] += flags[i * n_layers + l];
        }
    }
    for (auto& [label, values] : curve.proportion) {
        for (auto& v : values) {
            v /= static_cast<double>(curve.count[label]);
        }
    }
    return curve;
}

/// Patchscope decoding of one position across all source layers.
inline LayerCurve layer_sweep_decode(const Model& model, const std::vector<AnalogyInstance>& instances,
                                     DecodePosition position, InfoKind info, const RelatedEntities& related = {},
                                     const PatchscopeOptions& opts = {}) {
    std::vector<AnalogyTokens> tokens(instances.size());
    std::vector<ForwardTrace> traces(instances.size());
    std::vector<std::vector<TargetPrompt>> prompts(instances.size());
    std::vector<std::set<std::string>> related_sets(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto& a = instances[i];
        if (info == InfoKind::relational) {
            const PromptKind kind = position == DecodePosition::e2   ? PromptKind::relational_e2
                                    : position == DecodePosition::e3 ? PromptKind::relational_e3
                                                                     : PromptKind::relational_resolution;
            prompts[i] = build_prompts(kind, a);
        } else {
            prompts[i] = build_prompts(PromptKind::attributive_default, a);
            const std::string& entity = position == DecodePosition::e2   ? a.e2
                                        : position == DecodePosition::e3 ? a.e3
                                                                         : a.e4;
            auto it = related.find(entity);
            if (it == related.end() || it->second.empty()) {
                throw ValidationError("no related entities for '" + entity + "' (instance '" + a.id + "')");
            }
            related_sets[i] = it->second;
        }
    }
    parallel_for(instances.size(), [&](std::size_t i) {
        tokens[i] = tokenize_analogy(instances[i], model.vocab);
        traces[i] = forward(model, tokens[i].seq.ids);
    });
    auto source_pos = [&](std::size_t i) {
        switch (position) {
        case DecodePosition::e2:
            return tokens[i].e2.last();
        case DecodePosition::e3:
            return tokens[i].e3.last();
        default:
            return tokens[i].resolution;
        }
    };
    return sweep_curve(
        instances, model.config.n_layers,
        [&](std::size_t i, int layer) {
            std::vector<std::string> out;
            for (const auto& p : prompts[i]) {
                out.push_back(run_patchscope(model, traces[i], layer, source_pos(i), p, opts));
            }
            return out;
        },
        [&](std::size_t i, const std::string& d) {
            return info == InfoKind::relational ? score_relational(d, instances[i].aliases)
                                                : score_attributive(d, related_sets[i]);
        });
}

} // namespace analogy_probe

#endif
