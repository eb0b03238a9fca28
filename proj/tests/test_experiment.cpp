#include <cstdlib>
#include <set>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"

namespace ap = analogy_probe;
namespace fs = std::filesystem;

namespace {

const fs::path samples{SAMPLES_DIR};

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "config.json") {
    const auto path = dir / name;
    ap::write_file_bytes(path, j.dump(2));
    return path;
}

std::set<std::string> diagnostic_fields(const std::vector<ap::Diagnostic>& d) {
    std::set<std::string> out;
    for (const auto& x : d) {
        out.insert(x.field);
    }
    return out;
}

int run_tool(const std::string& args) {
    const std::string cmd = std::string(TOOL_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(experiment, build_dataset_golden_run) {
    fixtures::ScratchDir dir("golden");
    const auto cfg = write_config(dir.path(), {{"analysis", "build-dataset"},
                                               {"kb", (samples / "kb.jsonl").string()},
                                               {"seed", 0},
                                               {"output_dir", "out"}});
    const auto manifest = ap::run(cfg);
    const auto out = dir.path() / "out";
    const auto rows = ap::load_json_lines<ap::AnalogyInstance>(out / "analogies.jsonl");
    // 4 capitals, 3 languages, 3 authors: 12 + 6 + 6
    EXPECT_EQ(rows.size(), 24u);
    EXPECT_EQ(rows.front().prompt, "France is to Paris as Japan is to");
    EXPECT_EQ(rows.back().id, "author of/2-1");
    const auto summary = nlohmann::json::parse(ap::read_file_bytes(out / "build.json"));
    EXPECT_EQ(summary["n_analogies"], 24);
    EXPECT_EQ(summary["seed"], 0);

    const auto written = nlohmann::json::parse(ap::read_file_bytes(out / "manifest.json"));
    EXPECT_EQ(written["config_hash"], manifest.config_hash);
    EXPECT_EQ(written["tool_version"], ap::tool_version);
    EXPECT_EQ(written["outputs"]["analogies.jsonl"], ap::sha256_hex(ap::read_file_bytes(out / "analogies.jsonl")));
    EXPECT_FALSE(fs::exists(out / ".analogy-probe.lock"));
    EXPECT_FALSE(fs::exists(out / "analogies.jsonl.tmp"));
}

TEST(experiment, sha256_known_vector) {
    EXPECT_EQ(ap::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(experiment, repeated_runs_are_byte_identical) {
    fixtures::ScratchDir dir("repeat");
    const auto cfg = write_config(dir.path(), {{"analysis", "probe"},
                                               {"model_dir", (samples / "model").string()},
                                               {"dataset", (samples / "stories.jsonl").string()},
                                               {"seed", 4},
                                               {"output_dir", "out"}});
    const auto a = ap::run(cfg);
    const auto first = ap::read_file_bytes(dir.path() / "out" / "probe_accuracy.csv");
    const auto b = ap::run(cfg);
    EXPECT_EQ(a.checksums, b.checksums);
    EXPECT_EQ(a.config_hash, b.config_hash);
    EXPECT_EQ(ap::read_file_bytes(dir.path() / "out" / "probe_accuracy.csv"), first);
    const auto c = ap::run(cfg, {{"seed", 5}});
    EXPECT_NE(c.config_hash, a.config_hash);
}

TEST(experiment, validation_flags_fields) {
    fixtures::ScratchDir dir("validate");
    const auto bad = write_config(dir.path(), {{"analysis", "knockout"},
                                               {"model_dir", "missing_model"},
                                               {"dataset", "missing.jsonl"},
                                               {"seed", -3},
                                               {"output_dir", "out"},
                                               {"params", {{"positions", {"e2", "e9"}}, {"max_new", 0}}}});
    const auto fields = diagnostic_fields(ap::validate(bad));
    for (const char* f : {"seed", "model_dir", "dataset", "params.positions", "params.max_new"}) {
        EXPECT_TRUE(fields.count(f)) << f;
    }

    const auto unknown = write_config(dir.path(), {{"analysis", "nonsense"}, {"seed", 0}}, "unknown.json");
    const auto uf = diagnostic_fields(ap::validate(unknown));
    EXPECT_TRUE(uf.count("analysis"));
    EXPECT_TRUE(uf.count("output_dir"));

    ap::write_file_bytes(dir.path() / "broken.json", "{not json");
    EXPECT_EQ(diagnostic_fields(ap::validate(dir.path() / "broken.json")), std::set<std::string>{"$"});

    const auto attr = write_config(dir.path(), {{"analysis", "patchscope-sweep"},
                                                {"model_dir", (samples / "model").string()},
                                                {"dataset", (samples / "analogies.jsonl").string()},
                                                {"seed", 0},
                                                {"output_dir", "out"},
                                                {"params", {{"info", "attributive"}}}},
                                   "attr.json");
    EXPECT_TRUE(diagnostic_fields(ap::validate(attr)).count("related_entities"));

    const auto good = write_config(dir.path(), {{"analysis", "mas"},
                                                {"model_dir", (samples / "model").string()},
                                                {"dataset", (samples / "stories.jsonl").string()},
                                                {"seed", 0},
                                                {"output_dir", "out"}},
                                   "good.json");
    EXPECT_TRUE(ap::validate(good).empty());
}

TEST(experiment, patch_grid_validation_names_the_instance) {
    fixtures::ScratchDir dir("grid");
    auto rows = ap::read_json_lines(samples / "analogies.jsonl");
    rows[2]["spans"].erase("link");
    std::string body;
    for (const auto& r : rows) {
        body += r.dump() + "\n";
    }
    ap::write_file_bytes(dir.path() / "data.jsonl", body);
    const auto cfg = write_config(dir.path(), {{"analysis", "patch-grid"},
                                               {"model_dir", (samples / "model").string()},
                                               {"dataset", "data.jsonl"},
                                               {"seed", 0},
                                               {"output_dir", "out"}});
    const auto diags = ap::validate(cfg);
    ASSERT_EQ(diags.size(), 1u);
    EXPECT_EQ(diags[0].field, "dataset");
    EXPECT_NE(diags[0].message.find(rows[2]["id"].get<std::string>()), std::string::npos);
    EXPECT_NE(diags[0].message.find("spans.link"), std::string::npos);
    EXPECT_THROW(ap::run(cfg), ap::ConfigError);
}

TEST(experiment, cli_exit_codes) {
    fixtures::ScratchDir dir("cli");
    const auto ok = write_config(dir.path(), {{"analysis", "story-eval"},
                                              {"dataset", (samples / "stories_unlabeled.jsonl").string()},
                                              {"oracle", {{"kind", "scripted"}, {"path", (samples / "oracle.json").string()}}},
                                              {"seed", 0},
                                              {"output_dir", "out"}},
                                 "ok.json");
    EXPECT_EQ(run_tool("validate " + ok.string()), 0);
    EXPECT_EQ(run_tool("run " + ok.string()), 0);
    EXPECT_EQ(run_tool("run " + ok.string() + " --seed -1"), 2);
    EXPECT_EQ(run_tool("run " + ok.string() + " --output-dir " + (dir.path() / "elsewhere").string()), 0);
    EXPECT_TRUE(fs::exists(dir.path() / "elsewhere" / "story_eval.json"));

    // unlabeled instances cannot be swept: a runtime failure, not a config error
    const auto fails = write_config(dir.path(), {{"analysis", "knockout"},
                                                 {"model_dir", (samples / "model").string()},
                                                 {"dataset", (samples / "analogies_unlabeled.jsonl").string()},
                                                 {"seed", 0},
                                                 {"output_dir", "out_fail"}},
                                    "fails.json");
    EXPECT_EQ(run_tool("run " + fails.string()), 1);
    EXPECT_EQ(run_tool("validate " + (dir.path() / "absent.json").string()), 2);

    // a held lock refuses a second writer
    fs::create_directories(dir.path() / "out");
    ap::write_file_bytes(dir.path() / "out" / ".analogy-probe.lock", "");
    EXPECT_EQ(run_tool("run " + ok.string()), 1);
}

TEST(experiment, story_eval_outputs_labels) {
    fixtures::ScratchDir dir("stories");
    const auto cfg = write_config(dir.path(), {{"analysis", "story-eval"},
                                               {"dataset", (samples / "stories_unlabeled.jsonl").string()},
                                               {"oracle", {{"kind", "scripted"}, {"path", (samples / "oracle.json").string()}}},
                                               {"seed", 0},
                                               {"output_dir", "out"}});
    ap::run(cfg);
    const auto labelled = ap::load_json_lines<ap::StoryInstance>(dir.path() / "out" / "stories_labelled.jsonl");
    ASSERT_EQ(labelled.size(), 10u);
    // the scripted oracle always picks option 1 for every fourth story
    for (std::size_t i = 0; i < labelled.size(); ++i) {
        EXPECT_EQ(labelled[i].label, i % 4 == 3 ? ap::Label::incorrect : ap::Label::correct) << labelled[i].id;
    }
}
