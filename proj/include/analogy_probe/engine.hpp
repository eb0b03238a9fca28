#ifndef ANALOGY_PROBE_ENGINE_HPP
#define ANALOGY_PROBE_ENGINE_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "model.hpp"

namespace analogy_probe {

/// Blocks attention from query row `src_pos` to keys [block_begin, block_end)
/// in every head of the listed layers.
struct Knockout {
    std::vector<int> layers;
    int src_pos = 0;
    int block_begin = 0;
    int block_end = 0;
};

/// Overwrites the residual stream entering `layer` at `pos`.
struct Patch {
    int layer = 0;
    int pos = 0;
    std::vector<float> vector;
};

struct InterventionPlan {
    std::vector<Knockout> knockouts;
    std::vector<Patch> patches;

    bool empty() const { return knockouts.empty() && patches.empty(); }
};

/// Everything recorded during one instrumented forward pass.
struct ForwardTrace {
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int seq_len = 0;
    std::vector<int> tokens;
    std::vector<float> residual_pre; // (L+1) x T x d_model: state entering each layer, then the final state
    std::vector<float> attn_weights; // L x H x T x T, zero above the diagonal
    std::vector<float> head_outputs; // L x T x d_model: per-head attention-weighted values, heads concatenated
    std::vector<float> logits_last;  // vocab

    int d_head() const { return d_model / n_heads; }

    std::span<const float> residual(int layer, int pos) const {
        return {residual_pre.data() + (static_cast<std::size_t>(layer) * seq_len + pos) * d_model,
                static_cast<std::size_t>(d_model)};
    }

    std::span<const float> attention_row(int layer, int head, int query) const {
        const std::size_t t = static_cast<std::size_t>(seq_len);
        return {attn_weights.data() + ((static_cast<std::size_t>(layer) * n_heads + head) * t + query) * t, t};
    }

    std::span<const float> head_output(int layer, int head, int pos) const {
        const std::size_t base = (static_cast<std::size_t>(layer) * seq_len + pos) * d_model;
        return {head_outputs.data() + base + static_cast<std::size_t>(head) * d_head(), static_cast<std::size_t>(d_head())};
    }

    /// Rows [begin, end) of the residual stream entering `layer`.
    Matrix<float> residual_rows(int layer, int begin, int end) const {
        Matrix<float> out;
        for (int t = begin; t < end; ++t) {
            out.append_row(residual(layer, t));
        }
        return out;
    }

    bool operator==(const ForwardTrace&) const = default;
};

struct GenerationResult {
    std::vector<int> new_token_ids;
    std::string text;
    std::optional<std::vector<ForwardTrace>> traces;
};

namespace detail {

inline void matvec(std::span<const float> w, std::span<const float> x, std::span<float> y) {
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < y.size(); ++r) {
        const float* row = w.data() + r * cols;
        float acc = 0.0f;
        for (std::size_t c = 0; c < cols; ++c) {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

inline void rms_norm(std::span<const float> x, std::span<const float> gain, float eps, std::span<float> out) {
    float ss = 0.0f;
    for (float v : x) {
        ss += v * v;
    }
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
}

/// Masked softmax in place. Entries flagged in `blocked` get an additive
/// -inf before normalization and come out exactly zero.
inline void masked_softmax(std::span<float> scores, const std::vector<char>& blocked) {
    constexpr float neg_inf = -std::numeric_limits<float>::infinity();
    float max_score = neg_inf;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (blocked[j]) {
            scores[j] += neg_inf;
        }
        max_score = std::max(max_score, scores[j]);
    }
    if (max_score == neg_inf) {
        throw PlanError("knockout masks every key of an attention row");
    }
    float sum = 0.0f;
    for (auto& s : scores) {
        s = std::exp(s - max_score);
        sum += s;
    }
    for (auto& s : scores) {
        s /= sum;
    }
}

/// Attention-weighted sum of value rows: out = sum_j weights[j] * values[j].
inline void weighted_value_sum(std::span<const float> weights, std::span<const float> values, std::size_t value_stride,
                               std::size_t width, std::span<float> out) {
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t j = 0; j < weights.size(); ++j) {
        const float w = weights[j];
        if (w == 0.0f) {
            continue;
        }
        const float* v = values.data() + j * value_stride;
        for (std::size_t c = 0; c < width; ++c) {
            out[c] += w * v[c];
        }
    }
}

/// Interleaved rotary embedding applied in place to one head vector.
inline void apply_rope(std::span<float> head, int pos, float base) {
    const std::size_t dh = head.size();
    for (std::size_t i = 0; i < dh / 2; ++i) {
        const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(dh));
        const double angle = static_cast<double>(pos) * freq;
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(std::sin(angle));
        const float a = head[2 * i];
        const float b = head[2 * i + 1];
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
    }
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

} // namespace detail

/// Rejects plans whose layers, positions or vector widths do not fit a
/// prompt of `seq_len` tokens.
inline void validate_plan(const ModelConfig& config, int seq_len, const InterventionPlan& plan) {
    for (const auto& k : plan.knockouts) {
        if (k.layers.empty()) {
            throw PlanError("knockout lists no layers");
        }
        for (int layer : k.layers) {
            if (layer < 0 || layer >= config.n_layers) {
                throw PlanError("knockout layer " + std::to_string(layer) + " outside [0, " +
                                std::to_string(config.n_layers) + ")");
            }
        }
        if (k.src_pos < 0 || k.src_pos >= seq_len) {
            throw PlanError("knockout source position " + std::to_string(k.src_pos) + " outside the prompt");
        }
        if (k.block_begin < 0 || k.block_end > seq_len || k.block_begin >= k.block_end) {
            throw PlanError("knockout span [" + std::to_string(k.block_begin) + ", " + std::to_string(k.block_end) +
                            ") is empty or outside the prompt");
        }
    }
    std::set<std::pair<int, int>> targets;
    for (const auto& p : plan.patches) {
        if (p.layer < 0 || p.layer >= config.n_layers) {
            throw PlanError("patch layer " + std::to_string(p.layer) + " outside [0, " + std::to_string(config.n_layers) +
                            ")");
        }
        if (p.pos < 0 || p.pos >= seq_len) {
            throw PlanError("patch position " + std::to_string(p.pos) + " outside the prompt");
        }
        if (p.vector.size() != static_cast<std::size_t>(config.d_model)) {
            throw PlanError("patch vector has dimension " + std::to_string(p.vector.size()) + ", expected d_model = " +
                            std::to_string(config.d_model));
        }
        if (!targets.emplace(p.layer, p.pos).second) {
            throw PlanError("two patches target layer " + std::to_string(p.layer) + ", position " + std::to_string(p.pos));
        }
    }
}

/// Instrumented forward pass over `tokens`, applying `plan` when given.
///
/// Patches overwrite the residual stream entering their layer before that
/// layer runs, so the trace records the patched value. Knockouts add -inf to
/// the blocked scores of their query row in every head of their layers.
inline ForwardTrace forward(const Model& model, std::span<const int> tokens, const InterventionPlan* plan = nullptr) {
    const ModelConfig& cfg = model.config;
    const int T = static_cast<int>(tokens.size());
    if (T == 0) {
        throw ValidationError("cannot run a forward pass over an empty prompt");
    }
    if (T > cfg.max_seq_len) {
        throw ValidationError("prompt of " + std::to_string(T) + " tokens exceeds max_seq_len " +
                              std::to_string(cfg.max_seq_len));
    }
    for (int id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw ValidationError("token id " + std::to_string(id) + " outside the vocabulary");
        }
    }
    if (plan != nullptr) {
        validate_plan(cfg, T, *plan);
    }

    const int L = cfg.n_layers;
    const int H = cfg.n_heads;
    const auto D = static_cast<std::size_t>(cfg.d_model);
    const auto F = static_cast<std::size_t>(cfg.d_ff);
    const auto dh = static_cast<std::size_t>(cfg.d_head());
    const auto uT = static_cast<std::size_t>(T);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    ForwardTrace trace;
    trace.n_layers = L;
    trace.n_heads = H;
    trace.d_model = cfg.d_model;
    trace.seq_len = T;
    trace.tokens.assign(tokens.begin(), tokens.end());
    trace.residual_pre.assign((L + 1) * uT * D, 0.0f);
    trace.attn_weights.assign(static_cast<std::size_t>(L) * H * uT * uT, 0.0f);
    trace.head_outputs.assign(L * uT * D, 0.0f);

    std::vector<float> x(uT * D);
    for (std::size_t t = 0; t < uT; ++t) {
        const float* e = model.tok_embeddings.data() + static_cast<std::size_t>(tokens[t]) * D;
        std::copy(e, e + D, x.begin() + t * D);
    }

    std::vector<float> h(uT * D), q(uT * D), k(uT * D), v(uT * D), proj(D);
    std::vector<float> gate(F), up(F);
    std::vector<float> scores(uT);
    std::vector<char> blocked(uT);

    for (int layer = 0; layer < L; ++layer) {
        const LayerWeights& w = model.layers[layer];
        if (plan != nullptr) {
            for (const auto& p : plan->patches) {
                if (p.layer == layer) {
                    std::copy(p.vector.begin(), p.vector.end(), x.begin() + static_cast<std::size_t>(p.pos) * D);
                }
            }
        }
        std::copy(x.begin(), x.end(), trace.residual_pre.begin() + layer * uT * D);

        for (std::size_t t = 0; t < uT; ++t) {
            std::span<const float> xt(x.data() + t * D, D);
            std::span<float> ht(h.data() + t * D, D);
            detail::rms_norm(xt, w.attn_norm, cfg.norm_epsilon, ht);
            detail::matvec(w.wq, ht, {q.data() + t * D, D});
            detail::matvec(w.wk, ht, {k.data() + t * D, D});
            detail::matvec(w.wv, ht, {v.data() + t * D, D});
            for (int head = 0; head < H; ++head) {
                detail::apply_rope({q.data() + t * D + head * dh, dh}, static_cast<int>(t), cfg.rope_base);
                detail::apply_rope({k.data() + t * D + head * dh, dh}, static_cast<int>(t), cfg.rope_base);
            }
        }

        float* head_out = trace.head_outputs.data() + layer * uT * D;
        for (int head = 0; head < H; ++head) {
            for (std::size_t i = 0; i < uT; ++i) {
                std::span<float> row(scores.data(), i + 1);
                std::fill(blocked.begin(), blocked.end(), 0);
                if (plan != nullptr) {
                    for (const auto& ko : plan->knockouts) {
                        if (ko.src_pos != static_cast<int>(i) ||
                            std::find(ko.layers.begin(), ko.layers.end(), layer) == ko.layers.end()) {
                            continue;
                        }
                        for (int j = ko.block_begin; j < ko.block_end && j <= static_cast<int>(i); ++j) {
                            blocked[j] = 1;
                        }
                    }
                }
                const float* qi = q.data() + i * D + head * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float* kj = k.data() + j * D + head * dh;
                    float dot = 0.0f;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dot += qi[c] * kj[c];
                    }
                    row[j] = dot * scale;
                }
                detail::masked_softmax(row, blocked);
                float* weights = trace.attn_weights.data() + ((static_cast<std::size_t>(layer) * H + head) * uT + i) * uT;
                std::copy(row.begin(), row.end(), weights);
                detail::weighted_value_sum(row, {v.data() + head * dh, uT * D}, D, dh,
                                           {head_out + i * D + head * dh, dh});
            }
        }

        for (std::size_t t = 0; t < uT; ++t) {
            detail::matvec(w.wo, {head_out + t * D, D}, proj);
            for (std::size_t c = 0; c < D; ++c) {
                x[t * D + c] += proj[c];
            }
            std::span<float> ht(h.data() + t * D, D);
            detail::rms_norm({x.data() + t * D, D}, w.ffn_norm, cfg.norm_epsilon, ht);
            detail::matvec(w.w_gate, ht, gate);
            detail::matvec(w.w_up, ht, up);
            for (std::size_t f = 0; f < F; ++f) {
                gate[f] = detail::silu(gate[f]) * up[f];
            }
            detail::matvec(w.w_down, gate, proj);
            for (std::size_t c = 0; c < D; ++c) {
                x[t * D + c] += proj[c];
            }
        }
    }
    std::copy(x.begin(), x.end(), trace.residual_pre.begin() + L * uT * D);

    std::vector<float> last(D);
    detail::rms_norm({x.data() + (uT - 1) * D, D}, model.final_norm, cfg.norm_epsilon, last);
    trace.logits_last.assign(static_cast<std::size_t>(cfg.vocab_size), 0.0f);
    detail::matvec(model.output, last, trace.logits_last);
    return trace;
}

inline ForwardTrace forward(const Model& model, std::span<const int> tokens, const InterventionPlan& plan) {
    return forward(model, tokens, &plan);
}

/// Index of the largest logit; the lowest id wins exact ties.
inline int argmax_token(std::span<const float> logits) {
    int best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

/// Greedy decoding. The plan is applied on every step; its positions refer
/// to the original prompt.
inline GenerationResult greedy_decode(const Model& model, std::span<const int> prompt, int max_new,
                                      const InterventionPlan* plan = nullptr, bool keep_traces = false) {
    if (max_new < 1) {
        throw ValidationError("max_new must be at least 1");
    }
    if (prompt.size() + static_cast<std::size_t>(max_new) > static_cast<std::size_t>(model.config.max_seq_len)) {
        throw ValidationError("sequence of " + std::to_string(prompt.size()) + " + " + std::to_string(max_new) +
                              " tokens would exceed max_seq_len " + std::to_string(model.config.max_seq_len));
    }
    if (plan != nullptr) {
        validate_plan(model.config, static_cast<int>(prompt.size()), *plan);
    }
    GenerationResult result;
    if (keep_traces) {
        result.traces.emplace();
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new; ++step) {
        ForwardTrace trace = forward(model, seq, plan);
        const int next = argmax_token(trace.logits_last);
        result.new_token_ids.push_back(next);
        seq.push_back(next);
        if (keep_traces) {
            result.traces->push_back(std::move(trace));
        }
    }
    result.text = model.vocab.decode(result.new_token_ids);
    return result;
}

inline GenerationResult greedy_decode(const Model& model, std::span<const int> prompt, int max_new,
                                      const InterventionPlan& plan, bool keep_traces = false) {
    return greedy_decode(model, prompt, max_new, &plan, keep_traces);
}

} // namespace analogy_probe

#endif
