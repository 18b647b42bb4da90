#include "abltx/digest.hpp"

#include <vector>

#include <openssl/evp.h>

#include "abltx/error.hpp"
#include "abltx/io.hpp"

namespace abltx {

struct Sha256::State {
    EVP_MD_CTX *ctx = nullptr;
};

Sha256::Sha256() : state_(std::make_unique<State>()) {
    state_->ctx = EVP_MD_CTX_new();
    if (state_->ctx == nullptr || EVP_DigestInit_ex(state_->ctx, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 init failed");
}

Sha256::~Sha256() {
    if (state_ && state_->ctx) EVP_MD_CTX_free(state_->ctx);
}

void Sha256::update(std::span<const std::byte> data) {
    EVP_DigestUpdate(state_->ctx, data.data(), data.size());
}

void Sha256::update(std::string_view data) {
    EVP_DigestUpdate(state_->ctx, data.data(), data.size());
}

Digest Sha256::finish() {
    Digest out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(state_->ctx, out.data(), &len);
    return out;
}

std::string to_hex(const Digest &digest) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (std::uint8_t b : digest) {
        s.push_back(kHex[b >> 4]);
        s.push_back(kHex[b & 0xF]);
    }
    return s;
}

Digest digest_from_hex(std::string_view hex) {
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (hex.size() != 64) throw ContractError("malformed hash field: expected 64 hex characters");
    Digest out{};
    for (std::size_t i = 0; i < 32; ++i) {
        const int hi = nibble(hex[2 * i]);
        const int lo = nibble(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) throw ContractError("malformed hash field: non-hex character");
        out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
    }
    return out;
}

Digest sha256_file(const std::filesystem::path &path) {
    File f(path, File::Mode::Read);
    Sha256 sha;
    std::vector<std::byte> buf(1 << 20);
    std::uint64_t offset = 0;
    for (;;) {
        const std::size_t n = f.read_at(offset, buf);
        if (n == 0) break;
        sha.update(std::span(buf.data(), n));
        offset += n;
    }
    return sha.finish();
}

} // namespace abltx
