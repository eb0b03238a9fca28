#include <map>
#include <set>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"

namespace ap = analogy_probe;

namespace {

std::vector<ap::RelationPairRecord> twelve_instance_kb() {
    return {fixtures::pair("capital", "France", "Paris"), fixtures::pair("capital", "Japan", "Tokyo"),
            fixtures::pair("capital", "Italy", "Rome"),   fixtures::pair("language", "Spain", "Spanish"),
            fixtures::pair("language", "Brazil", "Portuguese"), fixtures::pair("language", "Egypt", "Arabic")};
}

// Knows every fact except Italy's capital, for which it answers Milan.
std::string knowledge_answer(const std::string& prompt) {
    static const std::map<std::string, std::string> facts{
        {"The capital France is", " Paris, of course"}, {"The capital Japan is", " tokyo"},
        {"The capital Italy is", " Milan"},             {"The language Spain is", " Spanish"},
        {"The language Brazil is", " Portuguese."},     {"The language Egypt is", " ARABIC and more"}};
    auto it = facts.find(prompt);
    return it == facts.end() ? "" : it->second;
}

// Completes e4 from the bare e3 prompt for Brazil, and from the pair-less
// prompt for (Spain, Egypt).
std::string shortcut_answer(const std::string& prompt) {
    if (prompt == "Brazil is to") {
        return " Portuguese";
    }
    if (prompt == "Spain is to as Egypt is to") {
        return " Arabic";
    }
    return " something else";
}

std::set<std::string> kept_ids(const std::vector<ap::AnalogyInstance>& inst, const ap::ModelOracle& oracle,
                               ap::FilterDecision (*filter)(const ap::ModelOracle&, const ap::AnalogyInstance&)) {
    std::set<std::string> out;
    for (const auto& a : inst) {
        if (filter(oracle, a).keep) {
            out.insert(a.id);
        }
    }
    return out;
}

} // namespace

TEST(dataset, pair_generation_counts) {
    for (int n = 1; n <= 6; ++n) {
        std::vector<ap::RelationPairRecord> kb;
        for (int i = 0; i < n; ++i) {
            kb.push_back(fixtures::pair("r", "h" + std::to_string(i), "t" + std::to_string(i)));
        }
        EXPECT_EQ(ap::generate_analogies(kb).size(), static_cast<std::size_t>(n * (n - 1)));
    }
    const auto twelve = ap::generate_analogies(twelve_instance_kb());
    EXPECT_EQ(twelve.size(), 12u);
    EXPECT_EQ(ap::generate_analogies(twelve_instance_kb(), {"language"}).size(), 6u);
    auto dup = twelve_instance_kb();
    dup.push_back(fixtures::pair("capital", "France", "Paris"));
    // the duplicate pairs with the other two capitals (4 instances) but never with its twin
    EXPECT_EQ(ap::generate_analogies(dup).size(), 16u);
}

TEST(dataset, analogy_rendering_and_spans) {
    const auto a = ap::generate_analogies(twelve_instance_kb()).front();
    EXPECT_EQ(a.id, "capital/0-1");
    EXPECT_EQ(a.prompt, "France is to Paris as Japan is to");
    EXPECT_EQ(a.prompt.substr(a.e2_span.begin, a.e2_span.end - a.e2_span.begin), "Paris");
    EXPECT_EQ(a.prompt.substr(a.link_span.begin, a.link_span.end - a.link_span.begin), "as");
    EXPECT_EQ(a.prompt.substr(a.e3_span.begin, a.e3_span.end - a.e3_span.begin), "Japan");
    EXPECT_EQ(a.e4, "Tokyo");

    const auto m = fixtures::toy_model();
    const auto t = ap::tokenize_analogy(a, m.vocab);
    EXPECT_EQ(t.resolution, static_cast<int>(t.seq.size()) - 1);
    EXPECT_LT(t.e1.end, t.e2.begin + 1);
    EXPECT_LE(t.e2.end, t.link.begin);
    EXPECT_LE(t.link.end, t.e3.begin);
}

TEST(dataset, jsonl_round_trip) {
    auto inst = ap::generate_analogies(twelve_instance_kb());
    inst[3].label = ap::Label::incorrect;
    fixtures::ScratchDir dir("jsonl");
    ap::write_file_bytes(dir.path() / "a.jsonl", ap::dump_json_lines(inst));
    EXPECT_EQ(ap::load_json_lines<ap::AnalogyInstance>(dir.path() / "a.jsonl"), inst);
    ap::write_file_bytes(dir.path() / "bad.jsonl", "{\"id\": \"x\"}\n");
    EXPECT_THROW(ap::load_json_lines<ap::AnalogyInstance>(dir.path() / "bad.jsonl"), ap::FormatError);
}

TEST(dataset, knowledge_filter_truth_table) {
    const auto inst = ap::generate_analogies(twelve_instance_kb());
    const ap::FunctionOracle oracle(knowledge_answer);
    const std::set<std::string> want{"capital/0-1", "capital/1-0", "language/0-1", "language/0-2",
                                     "language/1-0", "language/1-2", "language/2-0", "language/2-1"};
    EXPECT_EQ(kept_ids(inst, oracle, ap::knowledge_filter), want);
    const auto d = ap::knowledge_filter(oracle, inst[0]);
    ASSERT_EQ(d.evidence.size(), 2u);
    EXPECT_EQ(d.evidence[0].query, "The capital France is");
    EXPECT_EQ(d.evidence[1].query, "The capital Japan is");
}

TEST(dataset, shortcut_filter_truth_table) {
    const auto inst = ap::generate_analogies(twelve_instance_kb());
    const ap::FunctionOracle oracle(shortcut_answer);
    std::set<std::string> want;
    for (const auto& a : inst) {
        want.insert(a.id);
    }
    for (const char* dropped : {"language/0-1", "language/2-1", "language/0-2"}) {
        want.erase(dropped);
    }
    EXPECT_EQ(kept_ids(inst, oracle, ap::shortcut_filter), want);
    EXPECT_EQ(ap::shortcut_filter(oracle, inst[0]).evidence[0].query, "France is to as Japan is to");
}

TEST(dataset, scripted_oracle_file) {
    fixtures::ScratchDir dir("oracle");
    ap::write_file_bytes(dir.path() / "o.json",
                         R"({"answers": {"The capital France is": " Paris"}, "fallback": " no idea"})");
    const auto oracle = ap::ScriptedOracle::load(dir.path() / "o.json");
    EXPECT_EQ(oracle.answer("The capital France is"), " Paris");
    EXPECT_EQ(oracle.answer("anything"), " no idea");
}

TEST(dataset, knowledge_filter_is_monotone_and_order_independent) {
    const auto inst = ap::generate_analogies(twelve_instance_kb());
    const ap::FunctionOracle partial(knowledge_answer);
    const ap::FunctionOracle fuller([](const std::string& p) {
        return p == "The capital Italy is" ? std::string(" Rome") : knowledge_answer(p);
    });
    const auto small = kept_ids(inst, partial, ap::knowledge_filter);
    const auto large = kept_ids(inst, fuller, ap::knowledge_filter);
    EXPECT_TRUE(std::includes(large.begin(), large.end(), small.begin(), small.end()));
    EXPECT_EQ(large.size(), 12u);

    auto shuffled = inst;
    ap::SeededRng rng(3);
    rng.shuffle(shuffled.begin(), shuffled.end());
    EXPECT_EQ(kept_ids(shuffled, partial, ap::knowledge_filter), small);
}

TEST(dataset, labeling_uses_prefix_match) {
    const auto a = ap::generate_analogies(twelve_instance_kb()).front();
    EXPECT_EQ(ap::label_instance(ap::FunctionOracle([](const std::string&) { return std::string(" Tokyo!"); }), a),
              ap::Label::correct);
    EXPECT_EQ(ap::label_instance(ap::FunctionOracle([](const std::string&) { return std::string(" Kyoto"); }), a),
              ap::Label::incorrect);
    EXPECT_TRUE(ap::answer_matches("  TOKYO, Japan", "Tokyo"));
    EXPECT_FALSE(ap::answer_matches("Tok yo", "Tokyo"));
}

TEST(dataset, sampling_is_seeded_and_ordered) {
    auto inst = ap::generate_analogies(twelve_instance_kb());
    for (std::size_t i = 0; i < inst.size(); ++i) {
        inst[i].label = i % 3 == 0 ? ap::Label::correct : ap::Label::incorrect;
    }
    const auto a = ap::sample_split(inst, 3, 8);
    EXPECT_EQ(a, ap::sample_split(inst, 3, 8));
    ASSERT_EQ(a.size(), 6u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[i].label, ap::Label::correct);
        EXPECT_EQ(a[i + 3].label, ap::Label::incorrect);
    }
    auto index_of = [&](const std::string& id) {
        for (std::size_t i = 0; i < inst.size(); ++i) {
            if (inst[i].id == id) {
                return i;
            }
        }
        return inst.size();
    };
    for (std::size_t i = 0; i + 1 < 3; ++i) {
        EXPECT_LT(index_of(a[i].id), index_of(a[i + 1].id));
        EXPECT_LT(index_of(a[i + 3].id), index_of(a[i + 4].id));
    }
    bool differs = false;
    for (std::uint64_t seed = 0; seed < 10 && !differs; ++seed) {
        differs = ap::sample_split(inst, 3, seed) != a;
    }
    EXPECT_TRUE(differs);
    EXPECT_THROW(ap::sample_split(inst, 5, 0), ap::ValidationError);
}

TEST(dataset, story_prompt_and_selection_parsing) {
    const ap::StoryInstance s{"s", "SRC", "TGT", "DIS", true, ap::Label::unlabeled};
    EXPECT_EQ(ap::render_story_prompt(s, true, {}),
              "Source story: SRC\nWhich of the following stories is analogous to the source story?\n1. TGT\n2. DIS\nAnswer:");
    EXPECT_EQ(ap::parse_selection(" 2. because", {}), 1);
    EXPECT_EQ(ap::parse_selection("Option 1", {}), 0);
    EXPECT_EQ(ap::parse_selection("12 stories", {}), -1);
    EXPECT_EQ(ap::parse_selection("Story B fits", {"A", "B"}), 1);
    EXPECT_EQ(ap::parse_selection("Apples", {"A", "B"}), -1);
}

TEST(dataset, story_eval_both_orders_rule) {
    for (const ap::OptionScheme& scheme : {ap::OptionScheme{"1", "2"}, ap::OptionScheme{"A", "B"}}) {
        for (bool target_first : {true, false}) {
            const ap::StoryInstance s{"s", "SRC", "TGT", "DIS", target_first, ap::Label::unlabeled};
            const ap::FunctionOracle first([&](const std::string&) { return " " + scheme.first; });
            const ap::FunctionOracle second([&](const std::string&) { return " " + scheme.second; });
            const ap::FunctionOracle keyed([&](const std::string& p) {
                return p.find(scheme.first + ". TGT") != std::string::npos ? " " + scheme.first : " " + scheme.second;
            });
            const ap::FunctionOracle contrarian([&](const std::string& p) {
                return p.find(scheme.first + ". TGT") != std::string::npos ? " " + scheme.second : " " + scheme.first;
            });
            const ap::FunctionOracle mute([](const std::string&) { return std::string(" hmm"); });
            EXPECT_FALSE(ap::story_eval(first, s, scheme).correct);
            EXPECT_FALSE(ap::story_eval(second, s, scheme).correct);
            const auto v = ap::story_eval(keyed, s, scheme);
            EXPECT_TRUE(v.correct);
            EXPECT_NE(v.trials[0].target_option, v.trials[1].target_option);
            EXPECT_FALSE(ap::story_eval(contrarian, s, scheme).correct);
            const auto u = ap::story_eval(mute, s, scheme);
            EXPECT_FALSE(u.correct);
            EXPECT_TRUE(u.unparseable);
        }
    }
}

TEST(dataset, story_pair_spans_exclude_scaffolding) {
    const auto p = ap::render_story_pair("a fox", "a crow");
    EXPECT_EQ(p.text, "Story A: a fox\nStory B: a crow");
    EXPECT_EQ(p.text.substr(p.source.begin, p.source.end - p.source.begin), " a fox");
    const auto m = fixtures::toy_model();
    const auto seq = m.vocab.tokenize(p.text);
    const auto span = ap::contained_token_span(seq, p.candidate);
    EXPECT_EQ(m.vocab.decode(std::span<const int>(seq.ids.data() + span.begin, span.end - span.begin)), " a crow");
}
