#ifndef ANALOGY_PROBE_TENSOR_ARCHIVE_HPP
#define ANALOGY_PROBE_TENSOR_ARCHIVE_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"

namespace analogy_probe {

/*
 * Archive layout:
 *
 *   "TARC1\n"                       6 magic bytes
 *   u64 little-endian               byte length of the JSON header
 *   JSON header                     {name: {"dtype": "f32", "shape": [...], "offset": n}}
 *   payload                         little-endian f32 values, offsets relative to payload start
 */
inline constexpr std::string_view archive_magic = "TARC1\n";

struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> values;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : shape) {
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }
};

class TensorArchive {
public:
    const std::map<std::string, Tensor>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    bool contains(const std::string& name) const { return entries_.count(name) > 0; }

    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            throw ValidationError("archive is missing tensor '" + name + "'");
        }
        return it->second;
    }

    void put(std::string name, std::vector<std::int64_t> shape, std::vector<float> values) {
        Tensor t{std::move(shape), std::move(values)};
        for (auto d : t.shape) {
            if (d < 0) {
                throw ValidationError("negative dimension in tensor '" + name + "'");
            }
        }
        if (t.element_count() != t.values.size()) {
            throw ValidationError("tensor '" + name + "' has " + std::to_string(t.values.size()) +
                                  " values but its shape holds " + std::to_string(t.element_count()));
        }
        entries_[std::move(name)] = std::move(t);
    }

private:
    std::map<std::string, Tensor> entries_;
};

namespace detail {

inline void append_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace detail

/// Serializes an archive. Tensors are laid out in name order, so the output
/// is a pure function of the archive contents.
inline std::string serialize_archive(const TensorArchive& archive) {
    nlohmann::json header = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [name, tensor] : archive.entries()) {
        header[name] = {{"dtype", "f32"}, {"shape", tensor.shape}, {"offset", offset}};
        offset += tensor.values.size() * sizeof(float);
    }
    const std::string header_text = header.dump();

    std::string out;
    out.reserve(archive_magic.size() + 8 + header_text.size() + offset);
    out.append(archive_magic);
    const auto header_len = static_cast<std::uint64_t>(header_text.size());
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((header_len >> (8 * i)) & 0xffu));
    }
    out.append(header_text);
    for (const auto& [name, tensor] : archive.entries()) {
        for (float v : tensor.values) {
            detail::append_u32_le(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    return out;
}

inline TensorArchive parse_archive(std::string_view bytes) {
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < archive_magic.size() || bytes.substr(0, archive_magic.size()) != archive_magic) {
        throw FormatError("malformed archive header: missing TARC1 magic");
    }
    std::size_t cursor = archive_magic.size();
    if (bytes.size() < cursor + 8) {
        throw FormatError("malformed archive header: missing header length");
    }
    const std::uint64_t header_len = detail::read_u64_le(raw + cursor);
    cursor += 8;
    if (header_len > bytes.size() - cursor) {
        throw FormatError("malformed archive header: header length exceeds file size");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(cursor, header_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed archive header: ") + e.what());
    }
    if (!header.is_object()) {
        throw FormatError("malformed archive header: expected a JSON object");
    }
    cursor += header_len;
    const std::size_t payload_size = bytes.size() - cursor;

    struct Extent {
        std::size_t begin;
        std::size_t end;
        std::string name;
    };
    std::vector<Extent> extents;
    TensorArchive archive;

    for (const auto& [name, entry] : header.items()) {
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") || !entry.contains("offset")) {
            throw FormatError("malformed archive header: entry '" + name + "' needs dtype, shape and offset");
        }
        if (entry["dtype"] != "f32") {
            throw FormatError("malformed archive header: entry '" + name + "' has unsupported dtype");
        }
        if (!entry["shape"].is_array() || !entry["offset"].is_number_unsigned()) {
            throw FormatError("malformed archive header: entry '" + name + "' has a bad shape or offset");
        }
        std::vector<std::int64_t> shape;
        std::size_t count = 1;
        for (const auto& d : entry["shape"]) {
            if (!d.is_number_unsigned()) {
                throw FormatError("malformed archive header: entry '" + name + "' has a non-integer dimension");
            }
            shape.push_back(d.get<std::int64_t>());
            count *= d.get<std::size_t>();
        }
        const auto offset = entry["offset"].get<std::size_t>();
        const std::size_t nbytes = count * sizeof(float);
        if (offset + nbytes > payload_size) {
            throw FormatError("truncated payload: tensor '" + name + "' needs bytes [" + std::to_string(offset) + ", " +
                              std::to_string(offset + nbytes) + ") but the payload has " + std::to_string(payload_size));
        }
        extents.push_back({offset, offset + nbytes, name});

        std::vector<float> values(count);
        const unsigned char* src = raw + cursor + offset;
        for (std::size_t i = 0; i < count; ++i) {
            values[i] = std::bit_cast<float>(detail::read_u32_le(src + 4 * i));
        }
        archive.put(name, std::move(shape), std::move(values));
    }

    std::sort(extents.begin(), extents.end(), [](const Extent& a, const Extent& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < extents.size(); ++i) {
        if (extents[i].begin < extents[i - 1].end) {
            throw FormatError("malformed archive header: tensors '" + extents[i - 1].name + "' and '" + extents[i].name +
                              "' overlap");
        }
    }
    return archive;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write '" + path.string() + "'");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("short write to '" + path.string() + "'");
    }
}

inline TensorArchive load_archive(const std::filesystem::path& path) { return parse_archive(read_file_bytes(path)); }

inline void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_archive(archive));
}

} // namespace analogy_probe

#endif
