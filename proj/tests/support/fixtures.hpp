// Shared fixtures: seeded toy models, a hand-wired routing model, and
// scratch directories.
#ifndef ANALOGY_PROBE_TEST_FIXTURES_HPP
#define ANALOGY_PROBE_TEST_FIXTURES_HPP

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "analogy_probe/analogy_probe.hpp"

namespace fixtures {

namespace ap = analogy_probe;
namespace fs = std::filesystem;

inline const std::vector<std::string>& toy_corpus() {
    static const std::vector<std::string> texts{
        "Paris is to France as Tokyo is to Japan",
        "Spanish is to Spain as Portuguese is to Brazil",
        "Hamlet is to Shakespeare as Faust is to Goethe",
        "Story A: a fox tricked a crow into dropping its cheese.",
        "Story B: a seller flattered a buyer into paying too much.",
        "The capital of Italy is Rome",
    };
    return texts;
}

inline ap::ModelConfig toy_config(int layers = 4, int heads = 4, int d_model = 16) {
    ap::ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    c.d_ff = 2 * d_model;
    c.max_seq_len = 256;
    return c;
}

inline ap::Model toy_model(std::uint64_t seed = 7, int layers = 4, int heads = 4, int d_model = 16) {
    return ap::random_model(toy_config(layers, heads, d_model), ap::corpus_vocab(toy_corpus()), seed);
}

/// Random token ids of length [min_len, max_len].
inline std::vector<int> random_prompt(ap::SeededRng& rng, const ap::Model& m, int min_len, int max_len) {
    const auto len = static_cast<std::size_t>(min_len) + rng.uniform_index(static_cast<std::size_t>(max_len - min_len + 1));
    std::vector<int> ids(len);
    for (auto& id : ids) {
        id = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(m.config.vocab_size)));
    }
    return ids;
}

/// Two-layer, one-head model wired so that the last token ("R") reads the
/// marker token "M" in both layers, and the output compares the two copies
/// against a constant: with both reads intact the model emits "X", with
/// either read removed it emits "Y".
///
///   dim 0: is R        dim 1: is M       dim 4: constant 1
///   layer 0 copies M into dim 2, layer 1 copies M into dim 3
///   logit(X) = dim2 + dim3, logit(Y) = 2.8 * dim4
///
/// Queries and keys live in dims 6 and 7, which the huge rope base leaves
/// unrotated, so the routing does not depend on distance.
struct RoutingModel {
    ap::Model model;
    int filler[3] = {0, 0, 0};
    int marker = 0;
    int resolver = 0;
    int x = 0;
    int y = 0;
};

inline RoutingModel routing_model() {
    ap::ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 1;
    c.d_model = 8;
    c.d_ff = 4;
    c.max_seq_len = 64;
    c.rope_base = 1e30f;
    auto vocab = ap::Vocab::with_byte_fallback({" a", " b", " c", " M", " R", " X", " Y"});
    c.vocab_size = static_cast<int>(vocab.size());
    RoutingModel r{ap::Model::zeros(c, vocab)};
    r.filler[0] = vocab.id(" a");
    r.filler[1] = vocab.id(" b");
    r.filler[2] = vocab.id(" c");
    r.marker = vocab.id(" M");
    r.resolver = vocab.id(" R");
    r.x = vocab.id(" X");
    r.y = vocab.id(" Y");

    const std::size_t D = 8;
    auto& m = r.model;
    for (int t = 0; t < c.vocab_size; ++t) {
        m.tok_embeddings[t * D + 4] = 1.0f;
    }
    m.tok_embeddings[r.resolver * D + 0] = 1.0f;
    m.tok_embeddings[r.marker * D + 1] = 1.0f;
    for (std::size_t l = 0; l < 2; ++l) {
        auto& w = m.layers[l];
        const std::size_t dst = 2 + l;
        w.wq[6 * D + 0] = 30.0f;
        w.wk[6 * D + 1] = 1.0f;
        w.wv[dst * D + 1] = 1.0f;
        w.wo[dst * D + dst] = 1.0f;
    }
    m.output[r.x * D + 2] = 1.0f;
    m.output[r.x * D + 3] = 1.0f;
    m.output[r.y * D + 4] = 2.8f;
    return r;
}

/// Single-layer model with no attention or FFN contribution: the last
/// residual alone picks the next token, so patching it steers decoding.
inline ap::Model passthrough_model(std::uint64_t seed) {
    auto c = toy_config(1, 2, 16);
    auto m = ap::random_model(c, ap::corpus_vocab(toy_corpus()), seed);
    for (auto& w : m.layers) {
        std::fill(w.wo.begin(), w.wo.end(), 0.0f);
        std::fill(w.w_down.begin(), w.w_down.end(), 0.0f);
    }
    return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("analogy_probe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

inline ap::RelationPairRecord pair(const std::string& rel, const std::string& head, const std::string& tail) {
    ap::RelationPairRecord r;
    r.relation_id = rel;
    r.relation_surface = rel;
    r.aliases = {rel};
    r.head = head;
    r.tail = tail;
    return r;
}

} // namespace fixtures

#endif
