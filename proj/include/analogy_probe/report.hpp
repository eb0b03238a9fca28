#ifndef ANALOGY_PROBE_REPORT_HPP
#define ANALOGY_PROBE_REPORT_HPP

#include <cstdio>
#include <string>
#include <vector>

#include "core.hpp"

namespace analogy_probe::csv {

inline std::string number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

/// Quotes a field when it holds a comma, quote, or line break.
inline std::string field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos && (s.empty() || (s.front() != ' ' && s.back() != ' '))) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += "\"\"";
        } else {
            out.push_back(c);
        }
    }
    out += "\"";
    return out;
}

inline std::string row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) {
            out.push_back(',');
        }
        out += field(fields[i]);
    }
    out.push_back('\n');
    return out;
}

/// Matrix with a labelled header row and a label column.
template<typename T>
std::string labelled_matrix(const std::string& corner, const std::vector<std::string>& row_labels,
                            const std::vector<std::string>& col_labels, const Matrix<T>& m) {
    std::vector<std::string> header{corner};
    header.insert(header.end(), col_labels.begin(), col_labels.end());
    std::string out = row(header);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        std::vector<std::string> fields{row_labels.at(r)};
        for (std::size_t c = 0; c < m.cols(); ++c) {
            fields.push_back(number(static_cast<double>(m(r, c))));
        }
        out += row(fields);
    }
    return out;
}

inline std::vector<std::string> index_labels(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(std::to_string(i));
    }
    return out;
}

} // namespace analogy_probe::csv

#endif
