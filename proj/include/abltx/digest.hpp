#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace abltx {

using Digest = std::array<std::uint8_t, 32>;

// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256 &) = delete;
    Sha256 &operator=(const Sha256 &) = delete;

    void update(std::span<const std::byte> data);
    void update(std::string_view data);
    Digest finish();

private:
    struct State;
    std::unique_ptr<State> state_;
};

std::string to_hex(const Digest &digest);
// Throws ContractError unless `hex` is exactly 64 hex characters.
Digest digest_from_hex(std::string_view hex);

Digest sha256_file(const std::filesystem::path &path);

} // namespace abltx
