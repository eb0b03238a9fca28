#ifndef ANALOGY_PROBE_TOY_MODEL_HPP
#define ANALOGY_PROBE_TOY_MODEL_HPP

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "core.hpp"
#include "model.hpp"
#include "tokenizer.hpp"

namespace analogy_probe {

/// Word-level vocabulary harvested from `texts`: every whitespace-separated
/// word both bare and with a leading space, plus single punctuation marks,
/// on top of the byte fallback tokens.
inline Vocab corpus_vocab(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts) {
        std::string current;
        auto flush = [&] {
            if (!current.empty()) {
                words.insert(current);
                words.insert(" " + current);
                current.clear();
            }
        };
        for (char ch : t) {
            const auto u = static_cast<unsigned char>(ch);
            if (std::isspace(u)) {
                flush();
            } else if (std::ispunct(u)) {
                flush();
                words.insert(std::string(1, ch));
            } else {
                current.push_back(ch);
            }
        }
        flush();
    }
    return Vocab::with_byte_fallback(std::vector<std::string>(words.begin(), words.end()));
}

/// Gaussian-initialized model; all parameters are a pure function of the
/// config, vocabulary and seed.
inline Model random_model(const ModelConfig& config, Vocab vocab, std::uint64_t seed) {
    ModelConfig cfg = config;
    cfg.vocab_size = static_cast<int>(vocab.size());
    Model m = Model::zeros(cfg, std::move(vocab));
    SeededRng rng(seed);
    auto fill = [&](std::vector<float>& v, double stddev) {
        for (auto& x : v) {
            x = static_cast<float>(rng.normal() * stddev);
        }
    };
    const double d = cfg.d_model;
    fill(m.tok_embeddings, 1.0);
    for (auto& w : m.layers) {
        fill(w.wq, 1.0 / std::sqrt(d));
        fill(w.wk, 1.0 / std::sqrt(d));
        fill(w.wv, 1.0 / std::sqrt(d));
        fill(w.wo, 1.0 / std::sqrt(d));
        fill(w.w_gate, 1.0 / std::sqrt(d));
        fill(w.w_up, 1.0 / std::sqrt(d));
        fill(w.w_down, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)));
        for (auto& g : w.attn_norm) {
            g = static_cast<float>(1.0 + 0.1 * rng.normal());
        }
        for (auto& g : w.ffn_norm) {
            g = static_cast<float>(1.0 + 0.1 * rng.normal());
        }
    }
    fill(m.output, 1.0 / std::sqrt(d));
    return m;
}

} // namespace analogy_probe

#endif
