#ifndef ANALOGY_PROBE_EXPERIMENT_HPP
#define ANALOGY_PROBE_EXPERIMENT_HPP

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "alignment.hpp"
#include "dataset.hpp"
#include "interventions.hpp"
#include "model.hpp"
#include "patchscopes.hpp"
#include "probing.hpp"

namespace analogy_probe {

namespace fs = std::filesystem;

inline constexpr const char* tool_version = "0.1.0";

/// Invalid run configuration; maps to exit status 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

struct Diagnostic {
    std::string field;
    std::string message;
};

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

enum class Analysis { knockout, patchscope_sweep, patch_grid, swap_pairs, probe, mas, build_dataset, filter, story_eval };

inline const std::map<std::string, Analysis>& analysis_names() {
    static const std::map<std::string, Analysis> names{
        {"knockout", Analysis::knockout},   {"patchscope-sweep", Analysis::patchscope_sweep},
        {"patch-grid", Analysis::patch_grid}, {"swap-pairs", Analysis::swap_pairs},
        {"probe", Analysis::probe},         {"mas", Analysis::mas},
        {"build-dataset", Analysis::build_dataset}, {"filter", Analysis::filter},
        {"story-eval", Analysis::story_eval}};
    return names;
}

/// Parsed run configuration with paths resolved against the config file.
struct RunConfig {
    Analysis analysis = Analysis::knockout;
    std::string analysis_name;
    std::optional<fs::path> model_dir;
    std::optional<fs::path> dataset;
    std::optional<fs::path> kb;
    std::optional<fs::path> related_entities;
    std::string oracle_kind = "engine";
    std::optional<fs::path> oracle_path;
    int oracle_max_new = 8;
    std::uint64_t seed = 0;
    fs::path output_dir;
    nlohmann::json params = nlohmann::json::object();
    nlohmann::json raw;
};

namespace detail {

inline bool needs_model(Analysis a, const std::string& oracle_kind) {
    switch (a) {
    case Analysis::build_dataset:
        return false;
    case Analysis::swap_pairs:
        return false;
    case Analysis::filter:
    case Analysis::story_eval:
        return oracle_kind == "engine";
    default:
        return true;
    }
}

inline bool uses_analogies(Analysis a) {
    return a == Analysis::knockout || a == Analysis::patchscope_sweep || a == Analysis::patch_grid ||
           a == Analysis::swap_pairs || a == Analysis::filter;
}

inline bool uses_stories(Analysis a) { return a == Analysis::probe || a == Analysis::mas || a == Analysis::story_eval; }

inline fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

/// Cross-field check of an analogy dataset: every line needs the entity
/// fields and the spans the analysis reads.
inline void check_analogy_lines(const fs::path& path, Analysis a, std::vector<Diagnostic>& out) {
    std::vector<nlohmann::json> rows;
    try {
        rows = read_json_lines(path);
    } catch (const Error& e) {
        out.push_back({"dataset", e.what()});
        return;
    }
    std::vector<std::string> fields{"id", "relation_id", "e1", "e2", "e3", "e4", "prompt"};
    std::vector<std::string> spans{"e1", "e2", "link", "e3"};
    if (a == Analysis::patch_grid) {
        spans = {"e2", "link"};
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const std::string id = row.is_object() && row.contains("id") && row["id"].is_string()
                                   ? row["id"].get<std::string>()
                                   : "line " + std::to_string(i + 1);
        if (!row.is_object()) {
            out.push_back({"dataset", "instance " + id + ": not a JSON object"});
            continue;
        }
        for (const auto& f : fields) {
            if (!row.contains(f) || !row[f].is_string()) {
                out.push_back({"dataset", "instance " + id + ": missing field " + f});
            }
        }
        if (a == Analysis::filter || a == Analysis::swap_pairs) {
            continue;
        }
        for (const auto& s : spans) {
            if (!row.contains("spans") || !row["spans"].is_object() || !row["spans"].contains(s)) {
                out.push_back({"dataset", "instance " + id + ": missing field spans." + s});
            }
        }
    }
}

} // namespace detail

/// Schema and cross-field checks. Never throws; problems come back as
/// diagnostics naming the offending field.
inline std::vector<Diagnostic> validate_config(const nlohmann::json& j, const fs::path& base_dir,
                                               RunConfig* parsed = nullptr) {
    std::vector<Diagnostic> diags;
    if (!j.is_object()) {
        diags.push_back({"$", "config must be a JSON object"});
        return diags;
    }
    RunConfig cfg;
    cfg.raw = j;

    if (!j.contains("analysis") || !j["analysis"].is_string()) {
        diags.push_back({"analysis", "required string naming the analysis"});
    } else {
        cfg.analysis_name = j["analysis"].get<std::string>();
        auto it = analysis_names().find(cfg.analysis_name);
        if (it == analysis_names().end()) {
            diags.push_back({"analysis", "unknown analysis '" + cfg.analysis_name + "'"});
        } else {
            cfg.analysis = it->second;
        }
    }
    if (!j.contains("seed")) {
        diags.push_back({"seed", "required non-negative integer"});
    } else if (!j["seed"].is_number_integer() || j["seed"].get<long long>() < 0) {
        diags.push_back({"seed", "must be a non-negative integer"});
    } else {
        cfg.seed = j["seed"].get<std::uint64_t>();
    }
    if (!j.contains("output_dir") || !j["output_dir"].is_string() || j["output_dir"].get<std::string>().empty()) {
        diags.push_back({"output_dir", "required path"});
    } else {
        cfg.output_dir = detail::resolve(base_dir, j["output_dir"].get<std::string>());
    }
    if (j.contains("params")) {
        if (!j["params"].is_object()) {
            diags.push_back({"params", "must be an object"});
        } else {
            cfg.params = j["params"];
        }
    }
    if (j.contains("oracle")) {
        const auto& o = j["oracle"];
        if (!o.is_object() || !o.contains("kind") || !o["kind"].is_string()) {
            diags.push_back({"oracle.kind", "oracle needs a kind of engine or scripted"});
        } else {
            cfg.oracle_kind = o["kind"].get<std::string>();
            if (cfg.oracle_kind != "engine" && cfg.oracle_kind != "scripted") {
                diags.push_back({"oracle.kind", "unknown oracle kind '" + cfg.oracle_kind + "'"});
            }
            if (o.contains("max_new")) {
                if (!o["max_new"].is_number_integer() || o["max_new"].get<int>() < 1) {
                    diags.push_back({"oracle.max_new", "must be a positive integer"});
                } else {
                    cfg.oracle_max_new = o["max_new"].get<int>();
                }
            }
            if (cfg.oracle_kind == "scripted") {
                if (!o.contains("path") || !o["path"].is_string()) {
                    diags.push_back({"oracle.path", "scripted oracle needs a path"});
                } else {
                    cfg.oracle_path = detail::resolve(base_dir, o["path"].get<std::string>());
                    if (!fs::is_regular_file(*cfg.oracle_path)) {
                        diags.push_back({"oracle.path", "file does not exist: " + cfg.oracle_path->string()});
                    }
                }
            }
        }
    }

    auto optional_path = [&](const char* key, std::optional<fs::path>& slot, bool directory) {
        if (!j.contains(key)) {
            return;
        }
        if (!j[key].is_string()) {
            diags.push_back({key, "must be a path string"});
            return;
        }
        slot = detail::resolve(base_dir, j[key].get<std::string>());
        const bool ok = directory ? fs::is_directory(*slot) : fs::is_regular_file(*slot);
        if (!ok) {
            diags.push_back({key, std::string(directory ? "directory" : "file") + " does not exist: " + slot->string()});
        }
    };
    optional_path("model_dir", cfg.model_dir, true);
    optional_path("dataset", cfg.dataset, false);
    optional_path("kb", cfg.kb, false);
    optional_path("related_entities", cfg.related_entities, false);

    if (cfg.model_dir && fs::is_directory(*cfg.model_dir)) {
        for (const char* f : {model_files::config, model_files::archive, model_files::vocab}) {
            if (!fs::is_regular_file(*cfg.model_dir / f)) {
                diags.push_back({"model_dir", std::string("model directory lacks ") + f});
            }
        }
    }

    const bool known = analysis_names().count(cfg.analysis_name) > 0;
    if (known) {
        const Analysis a = cfg.analysis;
        if (detail::needs_model(a, cfg.oracle_kind) && !j.contains("model_dir")) {
            diags.push_back({"model_dir", "required for analysis '" + cfg.analysis_name + "'"});
        }
        if (a == Analysis::build_dataset && !j.contains("kb")) {
            diags.push_back({"kb", "required for analysis 'build-dataset'"});
        }
        if (a != Analysis::build_dataset && !j.contains("dataset")) {
            diags.push_back({"dataset", "required for analysis '" + cfg.analysis_name + "'"});
        }
        const auto& p = cfg.params;
        auto positive_int = [&](const char* key) {
            if (p.contains(key) && (!p[key].is_number_integer() || p[key].get<long long>() < 1)) {
                diags.push_back({std::string("params.") + key, "must be a positive integer"});
            }
        };
        positive_int("max_new");
        positive_int("folds");
        positive_int("sample_per_label");
        if (a == Analysis::knockout && p.contains("positions")) {
            if (!p["positions"].is_array()) {
                diags.push_back({"params.positions", "must be a list of span names"});
            } else {
                for (const auto& s : p["positions"]) {
                    if (!s.is_string() || (s != "e1" && s != "e2" && s != "link" && s != "e3")) {
                        diags.push_back({"params.positions", "unknown span " + s.dump()});
                    }
                }
            }
        }
        if (a == Analysis::patchscope_sweep) {
            const std::string pos = p.value("position", std::string("e2"));
            const std::string info = p.value("info", std::string("relational"));
            if (pos != "e2" && pos != "e3" && pos != "resolution") {
                diags.push_back({"params.position", "must be e2, e3 or resolution"});
            }
            if (info != "relational" && info != "attributive") {
                diags.push_back({"params.info", "must be relational or attributive"});
            }
            if (info == "attributive" && !j.contains("related_entities")) {
                diags.push_back({"related_entities", "required for attributive decoding"});
            }
        }
        if (a == Analysis::story_eval && p.contains("scheme") && p["scheme"] != "1/2" && p["scheme"] != "A/B") {
            diags.push_back({"params.scheme", "must be \"1/2\" or \"A/B\""});
        }
        if (cfg.dataset && fs::is_regular_file(*cfg.dataset)) {
            if (detail::uses_analogies(a)) {
                detail::check_analogy_lines(*cfg.dataset, a, diags);
            } else if (detail::uses_stories(a)) {
                try {
                    (void)load_json_lines<StoryInstance>(*cfg.dataset);
                } catch (const Error& e) {
                    diags.push_back({"dataset", e.what()});
                }
            }
        }
    }
    if (parsed != nullptr) {
        *parsed = std::move(cfg);
    }
    return diags;
}

inline nlohmann::json read_config_file(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
}

inline std::vector<Diagnostic> validate(const fs::path& config_path) {
    nlohmann::json j;
    try {
        j = read_config_file(config_path);
    } catch (const ConfigError& e) {
        return {{"$", e.what()}};
    }
    return validate_config(j, config_path.parent_path());
}

/// Output files of one run, keyed by file name.
using RunOutputs = std::map<std::string, std::string>;

struct RunManifest {
    std::string config_hash;
    std::string version = tool_version;
    std::map<std::string, std::string> checksums;
    double wall_clock_seconds = 0.0;

    nlohmann::json to_json() const {
        return {{"config_hash", config_hash},
                {"tool_version", version},
                {"outputs", checksums},
                {"wall_clock_seconds", wall_clock_seconds}};
    }
};

namespace detail {

/// Exclusive lock on an output directory for the lifetime of the object.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".analogy-probe.lock") {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw Error("output directory '" + dir.string() + "' is locked by another run (" + path_.string() + ")");
        }
    }
    ~DirectoryLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

inline void write_atomically(const fs::path& path, std::string_view bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, bytes);
    fs::rename(tmp, path);
}

inline std::unique_ptr<ModelOracle> make_oracle(const RunConfig& cfg, const Model* model) {
    if (cfg.oracle_kind == "scripted") {
        return std::make_unique<ScriptedOracle>(ScriptedOracle::load(*cfg.oracle_path));
    }
    if (model == nullptr) {
        throw ConfigError("engine oracle needs model_dir");
    }
    return std::make_unique<EngineOracle>(*model, cfg.oracle_max_new);
}

inline std::vector<AnalogyInstance> with_label(const std::vector<AnalogyInstance>& all, Label label) {
    std::vector<AnalogyInstance> out;
    for (const auto& a : all) {
        if (a.label == label) {
            out.push_back(a);
        }
    }
    return out;
}

inline RunOutputs run_knockout(const RunConfig& cfg, const Model& model) {
    const auto instances = load_json_lines<AnalogyInstance>(*cfg.dataset);
    std::vector<SpanKind> positions{SpanKind::e1, SpanKind::e2, SpanKind::link, SpanKind::e3};
    if (cfg.params.contains("positions")) {
        positions.clear();
        for (const auto& s : cfg.params["positions"]) {
            positions.push_back(parse_span_kind(s.get<std::string>()));
        }
    }
    SweepOptions opts;
    opts.max_new = cfg.params.value("max_new", 8);
    RunOutputs out;
    nlohmann::json summary{{"seed", cfg.seed}, {"n_layers", model.config.n_layers}, {"max_new", opts.max_new}};
    for (Label label : {Label::correct, Label::incorrect}) {
        const auto subset = with_label(instances, label);
        if (subset.empty()) {
            continue;
        }
        const auto report = knockout_sweep(model, subset, positions, opts);
        out["knockout_" + to_string(label) + ".csv"] = report.to_csv();
        summary["instances"][to_string(label)] = subset.size();
    }
    if (out.empty()) {
        throw ValidationError("knockout needs instances labelled correct or incorrect");
    }
    out["knockout.json"] = summary.dump(2) + "\n";
    return out;
}

inline RunOutputs run_patchscope_sweep(const RunConfig& cfg, const Model& model) {
    const auto instances = load_json_lines<AnalogyInstance>(*cfg.dataset);
    const auto position = parse_decode_position(cfg.params.value("position", std::string("e2")));
    const auto info = parse_info_kind(cfg.params.value("info", std::string("relational")));
    RelatedEntities related;
    if (cfg.related_entities) {
        related = load_related_entities(*cfg.related_entities);
    }
    PatchscopeOptions opts;
    opts.max_new = cfg.params.value("max_new", 24);
    if (cfg.params.contains("target_layer")) {
        opts.target_layer = cfg.params["target_layer"].get<int>();
    }
    const auto curve = layer_sweep_decode(model, instances, position, info, related, opts);
    nlohmann::json summary{{"seed", cfg.seed},
                           {"position", to_string(position)},
                           {"info", info == InfoKind::relational ? "relational" : "attributive"},
                           {"max_new", opts.max_new},
                           {"no_data", curve.no_data}};
    for (const auto& [label, n] : curve.count) {
        summary["instances"][to_string(label)] = n;
    }
    return {{"patchscope_curve.csv", curve.to_csv()}, {"patchscope.json", summary.dump(2) + "\n"}};
}

inline RunOutputs run_patch_grid(const RunConfig& cfg, const Model& model) {
    const auto instances = load_json_lines<AnalogyInstance>(*cfg.dataset);
    SweepOptions opts;
    opts.max_new = cfg.params.value("max_new", 8);
    const auto report = patch_grid_sweep(model, instances, opts);
    auto summary = report.summary();
    summary["seed"] = cfg.seed;
    return {{"patch_grid.csv", report.to_csv()}, {"patch_grid.json", summary.dump(2) + "\n"}};
}

inline RunOutputs run_swap_pairs(const RunConfig& cfg, const Model* model) {
    const auto instances = load_json_lines<AnalogyInstance>(*cfg.dataset);
    std::vector<std::string> relations = cfg.params.value("relations", std::vector<std::string>{});
    const auto swapped =
        swap_first_pairs(with_label(instances, Label::incorrect), with_label(instances, Label::correct), cfg.seed, relations);
    nlohmann::json summary{{"seed", cfg.seed}, {"n_swapped", swapped.size()}, {"relations", relations}};
    if (model != nullptr) {
        summary["gain"] = answer_rate(*model, swapped, cfg.params.value("max_new", 8));
    }
    return {{"swapped.jsonl", dump_json_lines(swapped)}, {"swap_pairs.json", summary.dump(2) + "\n"}};
}

inline RunOutputs run_probe(const RunConfig& cfg, const Model& model) {
    const auto stories = load_json_lines<StoryInstance>(*cfg.dataset);
    const int folds = cfg.params.value("folds", 5);
    const auto result = probe_grid(model, probe_pairs(stories), cfg.seed, folds);
    auto meta = result.metadata();
    meta["n_pairs"] = 2 * stories.size();
    return {{"probe_accuracy.csv", result.to_csv()}, {"probe.json", meta.dump(2) + "\n"}};
}

inline RunOutputs run_mas(const RunConfig& cfg, const Model& model) {
    auto stories = load_json_lines<StoryInstance>(*cfg.dataset);
    if (stories.empty()) {
        throw ValidationError("mas needs at least one story");
    }
    std::unique_ptr<ModelOracle> oracle;
    std::vector<Label> labels;
    for (auto& s : stories) {
        if (s.label == Label::unlabeled) {
            if (!oracle) {
                oracle = make_oracle(cfg, &model);
            }
            s.label = story_eval(*oracle, s).correct ? Label::correct : Label::incorrect;
        }
        labels.push_back(s.label);
    }
    const auto profiles = mas_profiles(model, stories);
    const auto agg = relative_mas_aggregate(profiles, labels);

    std::string per_story = csv::row({"story", "label", "layer", "mas_target", "mas_distractor", "relative"});
    for (std::size_t i = 0; i < stories.size(); ++i) {
        for (std::size_t l = 0; l < profiles[i].relative.size(); ++l) {
            per_story += csv::row({stories[i].id, to_string(labels[i]), std::to_string(l),
                                   csv::number(profiles[i].mas_target[l]), csv::number(profiles[i].mas_distractor[l]),
                                   csv::number(profiles[i].relative[l])});
        }
    }
    const auto story_index = cfg.params.value("heatmap_story", std::size_t{0});
    const int layer = cfg.params.value("heatmap_layer", model.config.n_layers / 2);
    if (story_index >= stories.size()) {
        throw ValidationError("params.heatmap_story is out of range");
    }
    const auto& hs = stories[story_index];
    const auto heatmap = story_heatmap(model, hs.source, hs.target, layer);
    nlohmann::json summary{{"seed", cfg.seed}, {"heatmap_story", hs.id}, {"heatmap_layer", layer}};
    for (const auto& [label, n] : agg.count) {
        summary["instances"][to_string(label)] = n;
    }
    return {{"mas_relative.csv", agg.to_csv()},
            {"mas_profiles.csv", per_story},
            {"heatmap.csv", heatmap.similarity_csv()},
            {"heatmap_mask.csv", heatmap.mask_csv()},
            {"mas.json", summary.dump(2) + "\n"}};
}

inline RunOutputs run_build_dataset(const RunConfig& cfg) {
    const auto pairs = load_json_lines<RelationPairRecord>(*cfg.kb);
    const auto relations = cfg.params.value("relations", std::vector<std::string>{});
    const auto analogies = generate_analogies(pairs, relations);
    nlohmann::json summary{{"seed", cfg.seed}, {"n_pairs", pairs.size()}, {"n_analogies", analogies.size()}};
    return {{"analogies.jsonl", dump_json_lines(analogies)}, {"build.json", summary.dump(2) + "\n"}};
}

inline RunOutputs run_filter(const RunConfig& cfg, const Model* model) {
    const auto instances = load_json_lines<AnalogyInstance>(*cfg.dataset);
    const auto oracle = make_oracle(cfg, model);
    std::vector<FilterDecision> knowledge(instances.size()), shortcut(instances.size());
    std::vector<AnalogyInstance> labelled = instances;
    parallel_for(instances.size(), [&](std::size_t i) {
        knowledge[i] = knowledge_filter(*oracle, instances[i]);
        shortcut[i] = shortcut_filter(*oracle, instances[i]);
        labelled[i].label = label_instance(*oracle, instances[i]);
    });
    std::vector<AnalogyInstance> kept;
    std::string evidence;
    auto ev_json = [](const FilterDecision& d) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : d.evidence) {
            arr.push_back({{"query", e.query}, {"expected", e.expected}, {"answer", e.answer}, {"matched", e.matched}});
        }
        return nlohmann::json{{"keep", d.keep}, {"queries", arr}};
    };
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (knowledge[i].keep && shortcut[i].keep) {
            kept.push_back(labelled[i]);
        }
        evidence += nlohmann::json{{"id", instances[i].id},
                                   {"knowledge", ev_json(knowledge[i])},
                                   {"shortcut", ev_json(shortcut[i])},
                                   {"label", to_string(labelled[i].label)}}
                        .dump() +
                    "\n";
    }
    nlohmann::json summary{{"seed", cfg.seed}, {"n_input", instances.size()}, {"n_kept", kept.size()}};
    summary["n_correct"] = with_label(kept, Label::correct).size();
    summary["n_incorrect"] = with_label(kept, Label::incorrect).size();
    RunOutputs out{{"filtered.jsonl", dump_json_lines(kept)}, {"filter_evidence.jsonl", evidence}};
    if (cfg.params.contains("sample_per_label")) {
        const auto n = cfg.params["sample_per_label"].get<std::size_t>();
        out["sampled.jsonl"] = dump_json_lines(sample_split(kept, n, cfg.seed));
        summary["sample_per_label"] = n;
    }
    out["filter.json"] = summary.dump(2) + "\n";
    return out;
}

inline RunOutputs run_story_eval(const RunConfig& cfg, const Model* model) {
    auto stories = load_json_lines<StoryInstance>(*cfg.dataset);
    const auto oracle = make_oracle(cfg, model);
    OptionScheme scheme;
    if (cfg.params.value("scheme", std::string("1/2")) == "A/B") {
        scheme = {"A", "B"};
    }
    std::vector<StoryVerdict> verdicts(stories.size());
    parallel_for(stories.size(), [&](std::size_t i) { verdicts[i] = story_eval(*oracle, stories[i], scheme); });
    std::string transcript;
    std::size_t correct = 0, unparseable = 0;
    for (std::size_t i = 0; i < stories.size(); ++i) {
        const auto& v = verdicts[i];
        stories[i].label = v.correct ? Label::correct : Label::incorrect;
        correct += v.correct ? 1 : 0;
        unparseable += v.unparseable ? 1 : 0;
        nlohmann::json trials = nlohmann::json::array();
        for (const auto& t : v.trials) {
            trials.push_back({{"prompt", t.prompt}, {"reply", t.reply}, {"target_option", t.target_option},
                              {"selected", t.selected}});
        }
        transcript += nlohmann::json{{"id", stories[i].id}, {"correct", v.correct}, {"unparseable", v.unparseable},
                                     {"trials", trials}}
                          .dump() +
                      "\n";
    }
    nlohmann::json summary{{"seed", cfg.seed},
                           {"n_stories", stories.size()},
                           {"correct", correct},
                           {"incorrect", stories.size() - correct},
                           {"unparseable", unparseable}};
    return {{"story_eval.jsonl", transcript},
            {"stories_labelled.jsonl", dump_json_lines(stories)},
            {"story_eval.json", summary.dump(2) + "\n"}};
}

} // namespace detail

/// Runs a parsed configuration and returns its outputs without touching disk.
inline RunOutputs execute(const RunConfig& cfg) {
    std::optional<Model> model;
    if (cfg.model_dir) {
        model = load_model_dir(*cfg.model_dir);
    }
    const Model* m = model ? &*model : nullptr;
    switch (cfg.analysis) {
    case Analysis::knockout:
        return detail::run_knockout(cfg, *m);
    case Analysis::patchscope_sweep:
        return detail::run_patchscope_sweep(cfg, *m);
    case Analysis::patch_grid:
        return detail::run_patch_grid(cfg, *m);
    case Analysis::swap_pairs:
        return detail::run_swap_pairs(cfg, m);
    case Analysis::probe:
        return detail::run_probe(cfg, *m);
    case Analysis::mas:
        return detail::run_mas(cfg, *m);
    case Analysis::build_dataset:
        return detail::run_build_dataset(cfg);
    case Analysis::filter:
        return detail::run_filter(cfg, m);
    case Analysis::story_eval:
        return detail::run_story_eval(cfg, m);
    }
    throw ConfigError("unhandled analysis");
}

inline std::string format_diagnostics(const std::vector<Diagnostic>& diags) {
    std::string out;
    for (const auto& d : diags) {
        out += d.field + ": " + d.message + "\n";
    }
    return out;
}

/// Validates, executes and writes every output plus manifest.json under the
/// output directory. `overrides` replaces top-level config fields.
inline RunManifest run(const fs::path& config_path, const nlohmann::json& overrides = nlohmann::json::object()) {
    const auto started = std::chrono::steady_clock::now();
    nlohmann::json j = read_config_file(config_path);
    if (j.is_object()) {
        for (const auto& [key, value] : overrides.items()) {
            j[key] = value;
        }
    }
    RunConfig cfg;
    const auto diags = validate_config(j, config_path.parent_path(), &cfg);
    if (!diags.empty()) {
        throw ConfigError(format_diagnostics(diags));
    }

    fs::create_directories(cfg.output_dir);
    detail::DirectoryLock lock(cfg.output_dir);
    const RunOutputs outputs = execute(cfg);

    RunManifest manifest;
    manifest.config_hash = sha256_hex(j.dump());
    for (const auto& [name, bytes] : outputs) {
        detail::write_atomically(cfg.output_dir / name, bytes);
        manifest.checksums[name] = sha256_hex(bytes);
    }
    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    detail::write_atomically(cfg.output_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    return manifest;
}

} // namespace analogy_probe

#endif
