#pragma once

// Shared framing for the toolkit's binary formats: 4-byte magic, u16
// version, u32 header length, header JSON.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <ostream>
#include <string_view>

#include <json.hpp>

#include "abltx/channel.hpp"

namespace abltx::detail {

constexpr std::uint16_t kFormatVersion = 1;

void write_envelope(std::ostream &out, std::string_view magic, const nlohmann::json &header);
nlohmann::json read_envelope(std::istream &in, std::string_view magic, const std::filesystem::path &path);

// Writes through `<path>.partial` and renames on success.
void write_file_atomic(const std::filesystem::path &path, const std::function<void(std::ostream &)> &body);

template <typename T>
void put_le(std::ostream &out, T value) {
    out.write(reinterpret_cast<const char *>(&value), sizeof(T));
}

template <typename T>
bool get_le(std::istream &in, T &value) {
    return static_cast<bool>(in.read(reinterpret_cast<char *>(&value), sizeof(T)));
}

nlohmann::json module_table_to_json(const ModuleTable &table);
ModuleTable module_table_from_json(const nlohmann::json &j);

} // namespace abltx::detail
