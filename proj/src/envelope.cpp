#include "envelope.hpp"

#include <fstream>
#include <string>

#include "abltx/error.hpp"

namespace abltx::detail {

void write_envelope(std::ostream &out, std::string_view magic, const nlohmann::json &header) {
    const std::string text = header.dump();
    out.write(magic.data(), 4);
    put_le<std::uint16_t>(out, kFormatVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

nlohmann::json read_envelope(std::istream &in, std::string_view magic, const std::filesystem::path &path) {
    char got[4] = {};
    if (!in.read(got, 4) || std::string_view(got, 4) != magic)
        throw ContractError("corrupt magic in '" + path.string() + "': expected " + std::string(magic));
    std::uint16_t version = 0;
    std::uint32_t length = 0;
    if (!get_le(in, version) || !get_le(in, length))
        throw ContractError("truncated header in '" + path.string() + "'");
    if (version != kFormatVersion)
        throw ContractError("unsupported version " + std::to_string(version) + " in '" + path.string() + "'");
    std::string text(length, '\0');
    if (!in.read(text.data(), length)) throw ContractError("truncated header in '" + path.string() + "'");
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error &e) {
        throw ContractError("malformed header JSON in '" + path.string() + "': " + e.what());
    }
}

void write_file_atomic(const std::filesystem::path &path, const std::function<void(std::ostream &)> &body) {
    const std::filesystem::path partial = path.string() + ".partial";
    {
        std::ofstream out(partial, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + partial.string() + "' for writing");
        body(out);
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(partial);
            throw IoError("write failed on '" + partial.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(partial, path, ec);
    if (ec) throw IoError("cannot rename '" + partial.string() + "': " + ec.message());
}

nlohmann::json module_table_to_json(const ModuleTable &table) {
    auto arr = nlohmann::json::array();
    for (const auto &m : table) arr.push_back({m.path, m.n_channels});
    return arr;
}

ModuleTable module_table_from_json(const nlohmann::json &j) {
    ModuleTable table;
    if (!j.is_array()) throw ContractError("module_table must be an array");
    for (const auto &entry : j) {
        if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() || !entry[1].is_number_unsigned())
            throw ContractError("module_table entries must be [path, n_channels]");
        table.push_back({entry[0].get<std::string>(), entry[1].get<std::uint64_t>()});
    }
    return table;
}

} // namespace abltx::detail
