// Command-line front end: run / validate experiment configs, and write toy
// models for smoke runs.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "analogy_probe/analogy_probe.hpp"

namespace ap = analogy_probe;

namespace {

int cmd_run(const std::string& config, const std::optional<long long>& seed, const std::string& output_dir,
            const std::string& model_dir) {
    nlohmann::json overrides = nlohmann::json::object();
    if (seed) {
        overrides["seed"] = *seed;
    }
    if (!output_dir.empty()) {
        overrides["output_dir"] = std::filesystem::absolute(output_dir).string();
    }
    if (!model_dir.empty()) {
        overrides["model_dir"] = std::filesystem::absolute(model_dir).string();
    }
    try {
        const auto manifest = ap::run(config, overrides);
        std::cout << manifest.to_json().dump(2) << "\n";
        return 0;
    } catch (const ap::ConfigError& e) {
        std::cerr << "config error:\n" << e.what();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "analysis error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_validate(const std::string& config) {
    const auto diags = ap::validate(config);
    if (diags.empty()) {
        std::cout << "ok\n";
        return 0;
    }
    std::cerr << ap::format_diagnostics(diags);
    return 2;
}

int cmd_toy_model(const std::vector<std::string>& corpora, const std::string& out, const ap::ModelConfig& shape,
                  std::uint64_t seed) {
    try {
        std::vector<std::string> texts;
        for (const auto& corpus : corpora) {
            for (const auto& row : ap::read_json_lines(corpus)) {
                for (const auto& [key, value] : row.items()) {
                    if (value.is_string()) {
                        texts.push_back(value.get<std::string>());
                    }
                }
            }
        }
        auto model = ap::random_model(shape, ap::corpus_vocab(texts), seed);
        model.config.validate();
        ap::save_model_dir(model, out);
        std::cout << "wrote " << out << " (vocab " << model.config.vocab_size << ")\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "toy-model: " << e.what() << "\n";
        return 1;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"analogy-probe: interpretability workbench for analogical reasoning"};
    app.require_subcommand(1);

    std::string config;
    std::optional<long long> seed;
    std::string output_dir, model_dir;
    auto* run = app.add_subcommand("run", "run the analysis described by a config file");
    run->add_option("config", config, "config JSON")->required();
    run->add_option("--seed", seed, "override the config seed");
    run->add_option("--output-dir", output_dir, "override the output directory");
    run->add_option("--model-dir", model_dir, "override the model directory");

    auto* validate = app.add_subcommand("validate", "check a config without running it");
    validate->add_option("config", config, "config JSON")->required();

    std::vector<std::string> corpora;
    std::string out;
    ap::ModelConfig shape;
    shape.n_layers = 4;
    shape.n_heads = 2;
    shape.d_model = 16;
    shape.d_ff = 32;
    shape.max_seq_len = 256;
    std::uint64_t toy_seed = 0;
    auto* toy = app.add_subcommand("toy-model", "write a seeded random model whose vocabulary covers a JSONL corpus");
    toy->add_option("out", out, "model directory to write")->required();
    toy->add_option("corpus", corpora, "JSONL files; every string field feeds the vocabulary")->required();
    toy->add_option("--layers", shape.n_layers);
    toy->add_option("--heads", shape.n_heads);
    toy->add_option("--d-model", shape.d_model);
    toy->add_option("--d-ff", shape.d_ff);
    toy->add_option("--max-seq-len", shape.max_seq_len);
    toy->add_option("--seed", toy_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    if (*run) {
        return cmd_run(config, seed, output_dir, model_dir);
    }
    if (*validate) {
        return cmd_validate(config);
    }
    return cmd_toy_model(corpora, out, shape, toy_seed);
}
