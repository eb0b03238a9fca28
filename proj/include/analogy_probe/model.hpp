#ifndef ANALOGY_PROBE_MODEL_HPP
#define ANALOGY_PROBE_MODEL_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "tensor_archive.hpp"
#include "tokenizer.hpp"

namespace analogy_probe {

struct ModelConfig {
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int d_ff = 0;
    int vocab_size = 0;
    int max_seq_len = 0;
    float norm_epsilon = 1e-5f;
    float rope_base = 10000.0f;

    int d_head() const { return n_heads > 0 ? d_model / n_heads : 0; }

    void validate() const {
        auto require = [](bool ok, const char* what) {
            if (!ok) {
                throw ValidationError(std::string("model config: ") + what);
            }
        };
        require(n_layers > 0, "n_layers must be positive");
        require(n_heads > 0, "n_heads must be positive");
        require(d_model > 0, "d_model must be positive");
        require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        require(d_head() % 2 == 0, "d_head must be even for rotary embeddings");
        require(d_ff > 0, "d_ff must be positive");
        require(vocab_size > 0, "vocab_size must be positive");
        require(max_seq_len > 0, "max_seq_len must be positive");
        require(norm_epsilon > 0.0f, "norm_epsilon must be positive");
        require(rope_base > 0.0f, "rope_base must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},         {"d_model", c.d_model},
         {"d_ff", c.d_ff},               {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
         {"norm_epsilon", c.norm_epsilon}, {"rope_base", c.rope_base}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    try {
        j.at("n_layers").get_to(c.n_layers);
        j.at("n_heads").get_to(c.n_heads);
        j.at("d_model").get_to(c.d_model);
        j.at("d_ff").get_to(c.d_ff);
        j.at("vocab_size").get_to(c.vocab_size);
        j.at("max_seq_len").get_to(c.max_seq_len);
        j.at("norm_epsilon").get_to(c.norm_epsilon);
        j.at("rope_base").get_to(c.rope_base);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

/// Parameter names used in archives.
namespace param {
inline std::string layer(int i, const char* suffix) { return "layers." + std::to_string(i) + "." + suffix; }
inline const std::string tok_embeddings = "tok_embeddings";
inline const std::string final_norm = "final_norm";
inline const std::string output = "output";
} // namespace param

struct LayerWeights {
    std::vector<float> attn_norm; // [d_model]
    std::vector<float> wq;        // [d_model, d_model], y = W x
    std::vector<float> wk;
    std::vector<float> wv;
    std::vector<float> wo;
    std::vector<float> ffn_norm;  // [d_model]
    std::vector<float> w_gate;    // [d_ff, d_model]
    std::vector<float> w_up;      // [d_ff, d_model]
    std::vector<float> w_down;    // [d_model, d_ff]
};

/// Immutable decoder-only transformer: config, weights and vocabulary.
struct Model {
    ModelConfig config;
    Vocab vocab;
    std::vector<float> tok_embeddings; // [vocab, d_model]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;     // [d_model]
    std::vector<float> output;         // [vocab, d_model]

    /// Checks every required tensor against the config and copies it in.
    static Model from_archive(const ModelConfig& config, const TensorArchive& archive, Vocab vocab) {
        config.validate();
        if (archive.empty()) {
            throw ValidationError("archive holds no tensors; expected parameters for " + std::to_string(config.n_layers) +
                                  " layers");
        }
        if (vocab.size() != static_cast<std::size_t>(config.vocab_size)) {
            throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " tokens but config says " +
                                  std::to_string(config.vocab_size));
        }
        const std::int64_t d = config.d_model;
        const std::int64_t f = config.d_ff;
        const std::int64_t v = config.vocab_size;

        auto take = [&](const std::string& name, std::vector<std::int64_t> shape) {
            const Tensor& t = archive.at(name);
            if (t.shape != shape) {
                std::string expected;
                for (auto s : shape) {
                    expected += (expected.empty() ? "" : "x") + std::to_string(s);
                }
                throw ValidationError("shape mismatch for '" + name + "': expected " + expected);
            }
            return t.values;
        };

        Model m;
        m.config = config;
        m.vocab = std::move(vocab);
        m.tok_embeddings = take(param::tok_embeddings, {v, d});
        for (int i = 0; i < config.n_layers; ++i) {
            LayerWeights w;
            w.attn_norm = take(param::layer(i, "attn_norm"), {d});
            w.wq = take(param::layer(i, "wq"), {d, d});
            w.wk = take(param::layer(i, "wk"), {d, d});
            w.wv = take(param::layer(i, "wv"), {d, d});
            w.wo = take(param::layer(i, "wo"), {d, d});
            w.ffn_norm = take(param::layer(i, "ffn_norm"), {d});
            w.w_gate = take(param::layer(i, "w_gate"), {f, d});
            w.w_up = take(param::layer(i, "w_up"), {f, d});
            w.w_down = take(param::layer(i, "w_down"), {d, f});
            m.layers.push_back(std::move(w));
        }
        m.final_norm = take(param::final_norm, {d});
        m.output = take(param::output, {v, d});
        return m;
    }

    TensorArchive to_archive() const {
        const std::int64_t d = config.d_model;
        const std::int64_t f = config.d_ff;
        const std::int64_t v = config.vocab_size;
        TensorArchive a;
        a.put(param::tok_embeddings, {v, d}, tok_embeddings);
        for (int i = 0; i < config.n_layers; ++i) {
            const auto& w = layers[i];
            a.put(param::layer(i, "attn_norm"), {d}, w.attn_norm);
            a.put(param::layer(i, "wq"), {d, d}, w.wq);
            a.put(param::layer(i, "wk"), {d, d}, w.wk);
            a.put(param::layer(i, "wv"), {d, d}, w.wv);
            a.put(param::layer(i, "wo"), {d, d}, w.wo);
            a.put(param::layer(i, "ffn_norm"), {d}, w.ffn_norm);
            a.put(param::layer(i, "w_gate"), {f, d}, w.w_gate);
            a.put(param::layer(i, "w_up"), {f, d}, w.w_up);
            a.put(param::layer(i, "w_down"), {d, f}, w.w_down);
        }
        a.put(param::final_norm, {d}, final_norm);
        a.put(param::output, {v, d}, output);
        return a;
    }

    /// Zero-initialized parameters of the right shapes, norms set to one.
    static Model zeros(const ModelConfig& config, Vocab vocab) {
        config.validate();
        const auto d = static_cast<std::size_t>(config.d_model);
        const auto f = static_cast<std::size_t>(config.d_ff);
        const auto v = static_cast<std::size_t>(config.vocab_size);
        Model m;
        m.config = config;
        m.vocab = std::move(vocab);
        m.tok_embeddings.assign(v * d, 0.0f);
        m.layers.resize(config.n_layers);
        for (auto& w : m.layers) {
            w.attn_norm.assign(d, 1.0f);
            w.wq.assign(d * d, 0.0f);
            w.wk.assign(d * d, 0.0f);
            w.wv.assign(d * d, 0.0f);
            w.wo.assign(d * d, 0.0f);
            w.ffn_norm.assign(d, 1.0f);
            w.w_gate.assign(f * d, 0.0f);
            w.w_up.assign(f * d, 0.0f);
            w.w_down.assign(d * f, 0.0f);
        }
        m.final_norm.assign(d, 1.0f);
        m.output.assign(v * d, 0.0f);
        return m;
    }
};

/// File names inside a model directory.
namespace model_files {
inline constexpr const char* config = "config.json";
inline constexpr const char* archive = "model.tarc";
inline constexpr const char* vocab = "vocab.json";
} // namespace model_files

inline Model load_model_dir(const std::filesystem::path& dir) {
    ModelConfig config;
    try {
        config = nlohmann::json::parse(read_file_bytes(dir / model_files::config)).get<ModelConfig>();
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("model config: " + std::string(e.what()));
    }
    return Model::from_archive(config, load_archive(dir / model_files::archive), Vocab::load(dir / model_files::vocab));
}

inline void save_model_dir(const Model& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file_bytes(dir / model_files::config, nlohmann::json(model.config).dump(2));
    save_archive(model.to_archive(), dir / model_files::archive);
    model.vocab.save(dir / model_files::vocab);
}

} // namespace analogy_probe

#endif
