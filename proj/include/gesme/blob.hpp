#pragma once

// Shared manifest+blob plumbing: named tensors serialized as little-endian
// IEEE-754 binary32 at recorded byte offsets, described by a JSON table.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gesme/common.hpp"
#include "gesme/tensor.hpp"

namespace gesme::detail {

inline void append_f32_le(std::string& out, float value) {
    auto bits = std::bit_cast<std::uint32_t>(value);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const std::string& blob, std::size_t byte_offset) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i)
        bits = (bits << 8) | static_cast<std::uint8_t>(blob[byte_offset + static_cast<std::size_t>(i)]);
    return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

// Appends every tensor to the blob and returns the manifest table.
template <typename T>
nlohmann::json tensor_table(const std::vector<std::pair<std::string, Tensor<T>>>& items,
                            std::string& blob) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, tensor] : items) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = std::vector<std::int64_t>(tensor.shape().begin(), tensor.shape().end());
        entry["offset"] = blob.size();
        table.push_back(std::move(entry));
        for (const T& v : tensor.values()) append_f32_le(blob, static_cast<float>(v));
    }
    return table;
}

// Materializes one manifest entry from the blob.  `where` names the artifact
// for error messages.
template <typename T>
Tensor<T> read_tensor_entry(const nlohmann::json& entry, const std::string& blob,
                            const std::string& where) {
    auto name = entry.at("name").get<std::string>();
    auto dims = entry.at("shape").get<std::vector<std::int64_t>>();
    auto tensor = Tensor<T>(Shape(dims.begin(), dims.end()));
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto bytes = static_cast<std::uint64_t>(tensor.size()) * 4;
    if (offset + bytes > blob.size())
        throw IoError("corrupt " + where + ": tensor '" + name + "' runs past the end of the blob");
    auto out = tensor.values();
    for (std::int64_t k = 0; k < tensor.size(); ++k)
        out[static_cast<std::size_t>(k)] =
            static_cast<T>(read_f32_le(blob, offset + static_cast<std::uint64_t>(k) * 4));
    return tensor;
}

}  // namespace gesme::detail
