#ifndef ANALOGY_PROBE_CORE_HPP
#define ANALOGY_PROBE_CORE_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace analogy_probe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated files (archives, vocabularies, JSON lines).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Inputs that are well-formed but inconsistent with each other.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Intervention plans that reference out-of-range layers or positions.
class PlanError : public Error {
public:
    using Error::Error;
};

/// Dense row-major matrix. Rows are exposed as spans.
template<typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ValidationError("matrix data size does not match shape");
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    void append_row(std::span<const T> values) {
        if (rows_ == 0 && cols_ == 0) {
            cols_ = values.size();
        }
        if (values.size() != cols_) {
            throw ValidationError("row width does not match matrix");
        }
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    const std::vector<T>& data() const { return data_; }
    std::vector<T>& data() { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

/// Seeded generator with platform-independent derived distributions.
///
/// std::mt19937_64 has a fully specified output sequence, but the standard
/// distributions do not, so sampling helpers are implemented here.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, n) by rejection sampling.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) {
            throw ValidationError("uniform_index over an empty range");
        }
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t draw;
        do {
            draw = engine_();
        } while (draw >= limit);
        return static_cast<std::size_t>(draw % bound);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) {
            u1 = uniform01();
        }
        const double u2 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    template<typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::iter_swap(first + (i - 1), first + uniform_index(i));
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

namespace text {

inline std::string casefold(std::string_view s) {
    std::string out(s);
    for (auto& ch : out) {
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
}

/// Case-folds, optionally drops ASCII punctuation, collapses whitespace runs
/// to one space and trims both ends.
inline std::string normalize(std::string_view s, bool strip_punctuation) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char raw : s) {
        const auto ch = static_cast<unsigned char>(raw);
        if (std::isspace(ch)) {
            pending_space = true;
            continue;
        }
        if (strip_punctuation && std::ispunct(ch)) {
            continue;
        }
        if (pending_space && !out.empty()) {
            out.push_back(' ');
        }
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(ch)));
    }
    return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
    return s.substr(0, prefix.size()) == prefix;
}

inline bool is_word_char(char c) {
    const auto ch = static_cast<unsigned char>(c);
    return std::isalnum(ch) || ch == '_' || ch >= 0x80;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

} // namespace text

} // namespace analogy_probe

#endif
