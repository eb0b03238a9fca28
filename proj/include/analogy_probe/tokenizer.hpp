#ifndef ANALOGY_PROBE_TOKENIZER_HPP
#define ANALOGY_PROBE_TOKENIZER_HPP

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "tensor_archive.hpp"

namespace analogy_probe {

/// Spelling of the single-byte fallback token for byte `b`, e.g. "<0x41>".
inline std::string byte_token(unsigned char b) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "<0x%02X>", static_cast<unsigned>(b));
    return buf;
}

struct TokenSequence {
    std::vector<int> ids;
    /// Byte offsets [first, second) of each token in the source text.
    std::vector<std::pair<std::size_t, std::size_t>> char_spans;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
};

/// Token vocabulary with greedy longest-match segmentation.
///
/// Every vocabulary holds the 256 fallback tokens produced by byte_token();
/// they never take part in literal matching, so text is always tokenizable.
class Vocab {
public:
    Vocab() = default;

    /// Builds a vocabulary from id-ordered token strings.
    explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) { index(); }

    /// The 256 byte tokens first, followed by `words` (duplicates dropped).
    static Vocab with_byte_fallback(const std::vector<std::string>& words) {
        std::vector<std::string> tokens;
        tokens.reserve(256 + words.size());
        for (int b = 0; b < 256; ++b) {
            tokens.push_back(byte_token(static_cast<unsigned char>(b)));
        }
        std::unordered_map<std::string, int> seen;
        for (const auto& t : tokens) {
            seen.emplace(t, 0);
        }
        for (const auto& w : words) {
            if (!w.empty() && seen.emplace(w, 0).second) {
                tokens.push_back(w);
            }
        }
        return Vocab(std::move(tokens));
    }

    static Vocab from_json(const nlohmann::json& j) {
        if (!j.is_object()) {
            throw FormatError("vocabulary must be a JSON object mapping token to id");
        }
        std::vector<std::string> tokens(j.size());
        std::vector<bool> filled(j.size(), false);
        for (const auto& [token, id] : j.items()) {
            if (!id.is_number_integer()) {
                throw FormatError("vocabulary id for '" + token + "' is not an integer");
            }
            const auto i = id.get<long long>();
            if (i < 0 || static_cast<std::size_t>(i) >= tokens.size() || filled[i]) {
                throw FormatError("vocabulary ids must be dense and unique in [0, size)");
            }
            tokens[i] = token;
            filled[i] = true;
        }
        return Vocab(std::move(tokens));
    }

    static Vocab load(const std::filesystem::path& path) {
        try {
            return from_json(nlohmann::json::parse(read_file_bytes(path)));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("vocabulary '" + path.string() + "': " + e.what());
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            j[tokens_[i]] = i;
        }
        return j;
    }

    void save(const std::filesystem::path& path) const { write_file_bytes(path, to_json().dump(1)); }

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) {
            throw ValidationError("token '" + token + "' is not in the vocabulary");
        }
        return it->second;
    }

    bool contains(const std::string& token) const { return ids_.count(token) > 0; }

    int byte_id(unsigned char b) const { return byte_ids_[b]; }

    TokenSequence tokenize(std::string_view text) const {
        TokenSequence seq;
        std::size_t pos = 0;
        while (pos < text.size()) {
            const std::size_t longest = std::min(max_literal_len_, text.size() - pos);
            int found = -1;
            std::size_t found_len = 0;
            for (std::size_t len = longest; len > 0; --len) {
                auto it = literal_ids_.find(std::string(text.substr(pos, len)));
                if (it != literal_ids_.end()) {
                    found = it->second;
                    found_len = len;
                    break;
                }
            }
            if (found < 0) {
                found = byte_ids_[static_cast<unsigned char>(text[pos])];
                found_len = 1;
            }
            seq.ids.push_back(found);
            seq.char_spans.emplace_back(pos, pos + found_len);
            pos += found_len;
        }
        return seq;
    }

    /// Concatenates token spellings; byte tokens contribute their raw byte.
    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (int id : ids) {
            const auto idx = static_cast<std::size_t>(id);
            if (idx < byte_of_.size() && byte_of_[idx] >= 0) {
                out.push_back(static_cast<char>(byte_of_[idx]));
            } else {
                out += tokens_.at(idx);
            }
        }
        return out;
    }

private:
    static int parse_byte_token(const std::string& t) {
        if (t.size() != 6 || t.compare(0, 3, "<0x") != 0 || t[5] != '>') {
            return -1;
        }
        int value = 0;
        for (int i = 3; i < 5; ++i) {
            const char c = t[i];
            if (c >= '0' && c <= '9') {
                value = value * 16 + (c - '0');
            } else if (c >= 'A' && c <= 'F') {
                value = value * 16 + (c - 'A' + 10);
            } else {
                return -1;
            }
        }
        return value;
    }

    void index() {
        ids_.clear();
        literal_ids_.clear();
        max_literal_len_ = 0;
        byte_ids_.fill(-1);
        byte_of_.assign(tokens_.size(), -1);
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            const auto& t = tokens_[i];
            if (t.empty()) {
                throw FormatError("vocabulary contains an empty token at id " + std::to_string(i));
            }
            if (!ids_.emplace(t, static_cast<int>(i)).second) {
                throw FormatError("vocabulary token '" + t + "' appears twice");
            }
            if (const int b = parse_byte_token(t); b >= 0) {
                byte_ids_[b] = static_cast<int>(i);
                byte_of_[i] = b;
            } else {
                literal_ids_.emplace(t, static_cast<int>(i));
                max_literal_len_ = std::max(max_literal_len_, t.size());
            }
        }
        for (int b = 0; b < 256; ++b) {
            if (byte_ids_[b] < 0) {
                throw FormatError("vocabulary is missing byte fallback token " + byte_token(static_cast<unsigned char>(b)));
            }
        }
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    std::unordered_map<std::string, int> literal_ids_;
    std::array<int, 256> byte_ids_{};
    std::vector<int> byte_of_;
    std::size_t max_literal_len_ = 0;
};

} // namespace analogy_probe

#endif
