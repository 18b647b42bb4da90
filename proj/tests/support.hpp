#pragma once

// Fixture helpers shared by the unit and acceptance tests.

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "abltx/checkpoint.hpp"
#include "abltx/dtype.hpp"
#include "abltx/dump.hpp"

namespace abltx::test {

class TempDir {
public:
    TempDir() {
        std::string tmpl = (std::filesystem::temp_directory_path() / "abltx-test-XXXXXX").string();
        if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    const std::filesystem::path &path() const { return path_; }
    std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

struct TensorData {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    std::vector<double> values; // narrowed on write
};

inline void write_tensors(const std::filesystem::path &path, const std::vector<TensorData> &tensors,
                          const nlohmann::ordered_json &metadata = nlohmann::ordered_json::object()) {
    std::vector<TensorSpec> layout;
    for (const auto &t : tensors) layout.push_back({t.name, t.dtype, t.shape});
    std::size_t i = 0;
    write_checkpoint(path, layout, metadata, [&](const TensorMeta &meta, const auto &emit) {
        const auto &t = tensors[i++];
        std::vector<std::byte> raw(meta.byte_length);
        narrow(t.dtype, t.values, raw);
        emit(raw);
    });
}

inline std::vector<std::byte> read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::byte> out(bytes.size());
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

inline void write_file(const std::filesystem::path &path, const std::string &bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

// Module table with `n_modules` linear projections spread over layers.
inline ModuleTable small_table(std::mt19937_64 &rng, std::size_t n_modules, std::uint64_t max_channels) {
    ModuleTable table;
    std::uniform_int_distribution<std::uint64_t> width(1, max_channels);
    const char *kinds[] = {"q_proj", "k_proj", "up_proj", "down_proj"};
    for (std::size_t m = 0; m < n_modules; ++m)
        table.push_back({"model.layers." + std::to_string(m / 4) + ".mlp." + kinds[m % 4], width(rng)});
    return table;
}

inline DumpHeader dump_header(std::string model_id, const ModuleTable &table, const std::vector<std::uint32_t> &tokens,
                              const std::vector<TokenRole> &roles, ValueDType dtype = ValueDType::F32) {
    DumpHeader h;
    h.model_id = std::move(model_id);
    h.input_set_hash = hash_tokens(tokens);
    h.module_table = table;
    h.token_count = tokens.size();
    h.token_roles = roles;
    h.value_dtype = dtype;
    return h;
}

// frames: token-major, frame_size values per token.
inline void write_dump(const std::filesystem::path &path, const DumpHeader &header, const std::vector<float> &frames) {
    DumpWriter w(path, header);
    const auto n = header.frame_size();
    for (std::uint64_t t = 0; t < header.token_count; ++t)
        w.write_frame(std::span<const float>(frames).subspan(t * n, n));
    w.finish();
}

} // namespace abltx::test
