#ifndef ANALOGY_PROBE_DATASET_HPP
#define ANALOGY_PROBE_DATASET_HPP

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "engine.hpp"
#include "tokenizer.hpp"

namespace analogy_probe {

enum class Label { unlabeled, correct, incorrect };

inline std::string to_string(Label l) {
    switch (l) {
    case Label::correct:
        return "correct";
    case Label::incorrect:
        return "incorrect";
    default:
        return "unlabeled";
    }
}

inline Label parse_label(const std::string& s) {
    if (s == "correct") {
        return Label::correct;
    }
    if (s == "incorrect") {
        return Label::incorrect;
    }
    if (s == "unlabeled" || s.empty()) {
        return Label::unlabeled;
    }
    throw FormatError("unknown label '" + s + "'");
}

/// Byte range [begin, end) inside a prompt.
struct CharSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool operator==(const CharSpan&) const = default;
};

/// Token range [begin, end) inside a tokenized prompt.
struct TokenSpan {
    int begin = 0;
    int end = 0;

    bool empty() const { return end <= begin; }
    int last() const { return end - 1; }
    bool operator==(const TokenSpan&) const = default;
};

inline constexpr const char* default_query_template = "The {relation} {entity} is";

struct RelationPairRecord {
    std::string relation_id;
    std::string relation_surface;
    std::vector<std::string> aliases;
    std::string head;
    std::string tail;
    std::string query_template = default_query_template;
};

struct AnalogyInstance {
    std::string id;
    std::string relation_id;
    std::string relation_surface;
    std::vector<std::string> aliases;
    std::string query_template = default_query_template;
    std::string e1, e2, e3, e4;
    std::string prompt;
    CharSpan e1_span, e2_span, link_span, e3_span;
    Label label = Label::unlabeled;

    bool operator==(const AnalogyInstance&) const = default;
};

/// Renders "e1 is to e2 as e3 is to" and records the entity and link offsets.
inline AnalogyInstance make_analogy(std::string id, const RelationPairRecord& first, const RelationPairRecord& second) {
    AnalogyInstance a;
    a.id = std::move(id);
    a.relation_id = first.relation_id;
    a.relation_surface = first.relation_surface;
    a.aliases = first.aliases;
    a.query_template = first.query_template;
    a.e1 = first.head;
    a.e2 = first.tail;
    a.e3 = second.head;
    a.e4 = second.tail;

    std::string& p = a.prompt;
    a.e1_span = {0, a.e1.size()};
    p = a.e1 + " is to ";
    a.e2_span = {p.size(), p.size() + a.e2.size()};
    p += a.e2 + " ";
    a.link_span = {p.size(), p.size() + 2};
    p += "as ";
    a.e3_span = {p.size(), p.size() + a.e3.size()};
    p += a.e3 + " is to";
    return a;
}

/// Re-renders the prompt after the entities changed.
inline void rerender(AnalogyInstance& a) {
    RelationPairRecord first{a.relation_id, a.relation_surface, a.aliases, a.e1, a.e2, a.query_template};
    RelationPairRecord second{a.relation_id, a.relation_surface, a.aliases, a.e3, a.e4, a.query_template};
    const Label label = a.label;
    a = make_analogy(a.id, first, second);
    a.label = label;
}

struct AnalogyTokens {
    TokenSequence seq;
    TokenSpan e1, e2, link, e3;
    int resolution = 0;
};

/// Tokens overlapping the byte range [span.begin, span.end).
inline TokenSpan token_span(const TokenSequence& seq, CharSpan span) {
    TokenSpan out{-1, -1};
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const auto [b, e] = seq.char_spans[t];
        if (b < span.end && e > span.begin) {
            if (out.begin < 0) {
                out.begin = static_cast<int>(t);
            }
            out.end = static_cast<int>(t) + 1;
        }
    }
    if (out.begin < 0) {
        return {0, 0};
    }
    return out;
}

inline AnalogyTokens tokenize_analogy(const AnalogyInstance& a, const Vocab& vocab) {
    AnalogyTokens out;
    out.seq = vocab.tokenize(a.prompt);
    out.e1 = token_span(out.seq, a.e1_span);
    out.e2 = token_span(out.seq, a.e2_span);
    out.link = token_span(out.seq, a.link_span);
    out.e3 = token_span(out.seq, a.e3_span);
    out.resolution = static_cast<int>(out.seq.size()) - 1;
    const std::array<std::pair<const char*, TokenSpan>, 4> spans{
        {{"e1", out.e1}, {"e2", out.e2}, {"link", out.link}, {"e3", out.e3}}};
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (spans[i].second.empty()) {
            throw ValidationError("instance '" + a.id + "': span " + spans[i].first + " resolves to zero tokens");
        }
        for (std::size_t j = i + 1; j < spans.size(); ++j) {
            if (spans[i].second.end > spans[j].second.begin) {
                throw ValidationError("instance '" + a.id + "': spans " + spans[i].first + " and " + spans[j].first +
                                      " share a token; the vocabulary merges across the span boundary");
            }
        }
    }
    return out;
}

struct StoryInstance {
    std::string id;
    std::string source;
    std::string target;
    std::string distractor;
    /// Whether the target is listed first in the first of the two trials.
    bool target_first = true;
    Label label = Label::unlabeled;

    bool operator==(const StoryInstance&) const = default;
};

// ---------------------------------------------------------------- JSON lines

inline void to_json(nlohmann::json& j, const AnalogyInstance& a) {
    auto span = [](CharSpan s) { return nlohmann::json::array({s.begin, s.end}); };
    j = {{"id", a.id},
         {"relation_id", a.relation_id},
         {"relation_surface", a.relation_surface},
         {"aliases", a.aliases},
         {"query_template", a.query_template},
         {"e1", a.e1},
         {"e2", a.e2},
         {"e3", a.e3},
         {"e4", a.e4},
         {"prompt", a.prompt},
         {"spans", {{"e1", span(a.e1_span)}, {"e2", span(a.e2_span)}, {"link", span(a.link_span)}, {"e3", span(a.e3_span)}}},
         {"label", to_string(a.label)}};
}

inline void from_json(const nlohmann::json& j, AnalogyInstance& a) {
    const std::string id = j.value("id", std::string("<no id>"));
    try {
        a.id = j.at("id").get<std::string>();
        a.relation_id = j.at("relation_id").get<std::string>();
        a.relation_surface = j.value("relation_surface", a.relation_id);
        a.aliases = j.value("aliases", std::vector<std::string>{});
        a.query_template = j.value("query_template", std::string(default_query_template));
        a.e1 = j.at("e1").get<std::string>();
        a.e2 = j.at("e2").get<std::string>();
        a.e3 = j.at("e3").get<std::string>();
        a.e4 = j.at("e4").get<std::string>();
        a.prompt = j.at("prompt").get<std::string>();
        const auto& spans = j.at("spans");
        auto span = [&](const char* name) {
            const auto& s = spans.at(name);
            return CharSpan{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()};
        };
        a.e1_span = span("e1");
        a.e2_span = span("e2");
        a.link_span = span("link");
        a.e3_span = span("e3");
        a.label = parse_label(j.value("label", std::string("unlabeled")));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("instance '" + id + "': " + e.what());
    }
    for (CharSpan s : {a.e1_span, a.e2_span, a.link_span, a.e3_span}) {
        if (s.begin > s.end || s.end > a.prompt.size()) {
            throw FormatError("instance '" + id + "': span outside the prompt");
        }
    }
}

inline void to_json(nlohmann::json& j, const StoryInstance& s) {
    j = {{"id", s.id},
         {"source", s.source},
         {"target", s.target},
         {"distractor", s.distractor},
         {"target_first", s.target_first},
         {"label", to_string(s.label)}};
}

inline void from_json(const nlohmann::json& j, StoryInstance& s) {
    const std::string id = j.value("id", std::string("<no id>"));
    try {
        s.id = j.at("id").get<std::string>();
        s.source = j.at("source").get<std::string>();
        s.target = j.at("target").get<std::string>();
        s.distractor = j.at("distractor").get<std::string>();
        s.target_first = j.value("target_first", true);
        s.label = parse_label(j.value("label", std::string("unlabeled")));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("story '" + id + "': " + e.what());
    }
    if (s.target == s.distractor) {
        throw FormatError("story '" + id + "': target and distractor are identical");
    }
}

inline void from_json(const nlohmann::json& j, RelationPairRecord& r) {
    try {
        r.relation_id = j.at("relation_id").get<std::string>();
        r.relation_surface = j.at("relation_surface").get<std::string>();
        r.aliases = j.value("aliases", std::vector<std::string>{});
        r.head = j.at("head").get<std::string>();
        r.tail = j.at("tail").get<std::string>();
        r.query_template = j.value("query_template", std::string(default_query_template));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("knowledge-base record: ") + e.what());
    }
    if (r.relation_id.empty() || r.relation_surface.empty() || r.head.empty() || r.tail.empty()) {
        throw FormatError("knowledge-base record for relation '" + r.relation_id + "' has an empty field");
    }
    if (r.aliases.empty()) {
        r.aliases.push_back(r.relation_surface);
    }
}

inline std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    std::vector<nlohmann::json> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            rows.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

template<typename T>
std::vector<T> load_json_lines(const std::filesystem::path& path) {
    std::vector<T> out;
    for (const auto& row : read_json_lines(path)) {
        out.push_back(row.get<T>());
    }
    return out;
}

template<typename T>
std::string dump_json_lines(const std::vector<T>& items) {
    std::string out;
    for (const auto& item : items) {
        out += nlohmann::json(item).dump();
        out.push_back('\n');
    }
    return out;
}

// ------------------------------------------------------------------- oracles

/// Anything that answers a prompt with text.
class ModelOracle {
public:
    virtual ~ModelOracle() = default;
    virtual std::string answer(const std::string& prompt) const = 0;
};

/// Greedy continuation from the engine.
class EngineOracle : public ModelOracle {
public:
    EngineOracle(const Model& model, int max_new) : model_(model), max_new_(max_new) {}

    std::string answer(const std::string& prompt) const override {
        const auto seq = model_.vocab.tokenize(prompt);
        return greedy_decode(model_, seq.ids, max_new_).text;
    }

private:
    const Model& model_;
    int max_new_;
};

/// Lookup table of prompt -> answer; unknown prompts get `fallback`.
class ScriptedOracle : public ModelOracle {
public:
    explicit ScriptedOracle(std::map<std::string, std::string> answers, std::string fallback = {})
        : answers_(std::move(answers)), fallback_(std::move(fallback)) {}

    static ScriptedOracle load(const std::filesystem::path& path) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file_bytes(path));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("scripted oracle '" + path.string() + "': " + e.what());
        }
        std::map<std::string, std::string> answers;
        const auto table = j.value("answers", nlohmann::json::object());
        for (const auto& [k, v] : table.items()) {
            answers[k] = v.get<std::string>();
        }
        return ScriptedOracle(std::move(answers), j.value("fallback", std::string()));
    }

    std::string answer(const std::string& prompt) const override {
        auto it = answers_.find(prompt);
        return it == answers_.end() ? fallback_ : it->second;
    }

private:
    std::map<std::string, std::string> answers_;
    std::string fallback_;
};

class FunctionOracle : public ModelOracle {
public:
    explicit FunctionOracle(std::function<std::string(const std::string&)> fn) : fn_(std::move(fn)) {}
    std::string answer(const std::string& prompt) const override { return fn_(prompt); }

private:
    std::function<std::string(const std::string&)> fn_;
};

/// Normalized prefix match: case-folded, punctuation stripped, whitespace collapsed.
inline bool answer_matches(std::string_view answer, std::string_view expected) {
    const std::string want = text::normalize(expected, true);
    if (want.empty()) {
        return false;
    }
    return text::starts_with(text::normalize(answer, true), want);
}

// ------------------------------------------------------------------- filters

struct QueryEvidence {
    std::string query;
    std::string expected;
    std::string answer;
    bool matched = false;
};

struct FilterDecision {
    bool keep = false;
    std::vector<QueryEvidence> evidence;
};

inline std::string relation_query(const std::string& query_template, const std::string& relation,
                                  const std::string& entity) {
    return text::replace_all(text::replace_all(query_template, "{relation}", relation), "{entity}", entity);
}

inline QueryEvidence ask(const ModelOracle& oracle, std::string query, const std::string& expected) {
    QueryEvidence ev;
    ev.answer = oracle.answer(query);
    ev.query = std::move(query);
    ev.expected = expected;
    ev.matched = answer_matches(ev.answer, expected);
    return ev;
}

/// Keeps the instance only if the oracle recalls both pairs from their relation.
inline FilterDecision knowledge_filter(const ModelOracle& oracle, const AnalogyInstance& a) {
    FilterDecision d;
    d.evidence.push_back(ask(oracle, relation_query(a.query_template, a.relation_surface, a.e1), a.e2));
    d.evidence.push_back(ask(oracle, relation_query(a.query_template, a.relation_surface, a.e3), a.e4));
    d.keep = d.evidence[0].matched && d.evidence[1].matched;
    return d;
}

/// Drops the instance if e4 is reachable without e2 or without the first pair.
inline FilterDecision shortcut_filter(const ModelOracle& oracle, const AnalogyInstance& a) {
    FilterDecision d;
    d.evidence.push_back(ask(oracle, a.e1 + " is to as " + a.e3 + " is to", a.e4));
    d.evidence.push_back(ask(oracle, a.e3 + " is to", a.e4));
    d.keep = !d.evidence[0].matched && !d.evidence[1].matched;
    return d;
}

/// Correct iff the oracle's continuation of the full analogy starts with e4.
inline Label label_instance(const ModelOracle& oracle, const AnalogyInstance& a) {
    return answer_matches(oracle.answer(a.prompt), a.e4) ? Label::correct : Label::incorrect;
}

// ------------------------------------------------------------- construction

/// All ordered cross-combinations of same-relation pairs, relations in order
/// of first appearance. `allow_list`, when non-empty, restricts relations.
inline std::vector<AnalogyInstance> generate_analogies(const std::vector<RelationPairRecord>& pairs,
                                                       const std::vector<std::string>& allow_list = {}) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<const RelationPairRecord*>> by_relation;
    for (const auto& p : pairs) {
        if (!allow_list.empty() && std::find(allow_list.begin(), allow_list.end(), p.relation_id) == allow_list.end()) {
            continue;
        }
        auto [it, inserted] = by_relation.try_emplace(p.relation_id);
        if (inserted) {
            order.push_back(p.relation_id);
        }
        it->second.push_back(&p);
    }
    std::vector<AnalogyInstance> out;
    for (const auto& rel : order) {
        const auto& group = by_relation[rel];
        for (std::size_t i = 0; i < group.size(); ++i) {
            for (std::size_t j = 0; j < group.size(); ++j) {
                if (i == j || (group[i]->head == group[j]->head && group[i]->tail == group[j]->tail)) {
                    continue;
                }
                out.push_back(make_analogy(rel + "/" + std::to_string(i) + "-" + std::to_string(j), *group[i], *group[j]));
            }
        }
    }
    return out;
}

/// Seeded uniform sample of `n_per_label` correct and `n_per_label`
/// incorrect instances, each group kept in input order.
inline std::vector<AnalogyInstance> sample_split(const std::vector<AnalogyInstance>& instances, std::size_t n_per_label,
                                                 std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<AnalogyInstance> out;
    for (Label label : {Label::correct, Label::incorrect}) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < instances.size(); ++i) {
            if (instances[i].label == label) {
                pool.push_back(i);
            }
        }
        if (pool.size() < n_per_label) {
            throw ValidationError("need " + std::to_string(n_per_label) + " " + to_string(label) + " instances, have " +
                                  std::to_string(pool.size()));
        }
        for (std::size_t i = 0; i < n_per_label; ++i) {
            std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
        }
        pool.resize(n_per_label);
        std::sort(pool.begin(), pool.end());
        for (auto i : pool) {
            out.push_back(instances[i]);
        }
    }
    return out;
}

// ------------------------------------------------------------ story analogies

/// Option labels for the two-option story prompt.
struct OptionScheme {
    std::string first = "1";
    std::string second = "2";
};

struct StoryTrial {
    std::string prompt;
    std::string reply;
    int target_option = 0; // 0 = first listed, 1 = second listed
    int selected = -1;     // -1 when the reply names no option
};

struct StoryVerdict {
    bool correct = false;
    bool unparseable = false;
    std::array<StoryTrial, 2> trials;
};

inline std::string render_story_prompt(const StoryInstance& s, bool target_listed_first, const OptionScheme& scheme) {
    const std::string& a = target_listed_first ? s.target : s.distractor;
    const std::string& b = target_listed_first ? s.distractor : s.target;
    return "Source story: " + s.source + "\nWhich of the following stories is analogous to the source story?\n" +
           scheme.first + ". " + a + "\n" + scheme.second + ". " + b + "\nAnswer:";
}

/// Index (0 or 1) of the first standalone option label in `reply`, or -1.
inline int parse_selection(std::string_view reply, const OptionScheme& scheme) {
    const std::array<std::string_view, 2> labels{scheme.first, scheme.second};
    for (std::size_t pos = 0; pos < reply.size(); ++pos) {
        for (int option = 0; option < 2; ++option) {
            const auto& label = labels[option];
            if (reply.compare(pos, label.size(), label) != 0) {
                continue;
            }
            const bool left_ok = pos == 0 || !text::is_word_char(reply[pos - 1]);
            const std::size_t after = pos + label.size();
            const bool right_ok = after >= reply.size() || !text::is_word_char(reply[after]);
            if (left_ok && right_ok) {
                return option;
            }
        }
    }
    return -1;
}

/// Asks twice with the options swapped; correct only if the target is
/// selected both times.
inline StoryVerdict story_eval(const ModelOracle& oracle, const StoryInstance& s, const OptionScheme& scheme = {}) {
    StoryVerdict v;
    for (int trial = 0; trial < 2; ++trial) {
        const bool target_listed_first = (trial == 0) == s.target_first;
        StoryTrial& t = v.trials[trial];
        t.prompt = render_story_prompt(s, target_listed_first, scheme);
        t.reply = oracle.answer(t.prompt);
        t.target_option = target_listed_first ? 0 : 1;
        t.selected = parse_selection(t.reply, scheme);
        if (t.selected < 0) {
            v.unparseable = true;
        }
    }
    v.correct = !v.unparseable && v.trials[0].selected == v.trials[0].target_option &&
                v.trials[1].selected == v.trials[1].target_option;
    return v;
}

/// Joint encoding of a story pair; records where each story's text sits.
/// Each span starts at the space after its "Story X:" label so that word
/// tokens carrying a leading space stay inside it.
struct StoryPairPrompt {
    std::string text;
    CharSpan source;
    CharSpan candidate;
};

inline StoryPairPrompt render_story_pair(const std::string& source, const std::string& candidate) {
    StoryPairPrompt p;
    p.text = "Story A: ";
    p.source = {p.text.size() - 1, p.text.size() + source.size()};
    p.text += source + "\nStory B: ";
    p.candidate = {p.text.size() - 1, p.text.size() + candidate.size()};
    p.text += candidate;
    return p;
}

/// Tokens lying entirely inside the byte range; scaffolding tokens that
/// straddle the boundary are excluded.
inline TokenSpan contained_token_span(const TokenSequence& seq, CharSpan span) {
    TokenSpan out{-1, -1};
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const auto [b, e] = seq.char_spans[t];
        if (b >= span.begin && e <= span.end) {
            if (out.begin < 0) {
                out.begin = static_cast<int>(t);
            }
            out.end = static_cast<int>(t) + 1;
        }
    }
    if (out.begin < 0) {
        return {0, 0};
    }
    return out;
}

} // namespace analogy_probe

#endif
