#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "abltx/channel.hpp"
#include "abltx/digest.hpp"

namespace abltx {

enum class TokenRole : std::uint8_t { Prompt, Answer };
enum class RoleFilter { All, AnswerOnly, PromptOnly };
enum class ValueDType : std::uint8_t { F32, F16 };

std::string_view role_filter_name(RoleFilter filter);
std::optional<RoleFilter> parse_role_filter(std::string_view name);
bool role_selected(RoleFilter filter, TokenRole role);

// Token roles travel as a string of 'P' / 'A' characters.
std::string encode_roles(std::span<const TokenRole> roles);
std::vector<TokenRole> decode_roles(std::string_view text);

// SHA-256 over the token ids as little-endian u32; sibling captures on the
// same inputs produce the same digest.
Digest hash_tokens(std::span<const std::uint32_t> tokens);

struct DumpHeader {
    std::string model_id;
    Digest input_set_hash{};
    ModuleTable module_table;
    std::uint64_t token_count = 0;
    std::vector<TokenRole> token_roles;
    ValueDType value_dtype = ValueDType::F32;

    std::uint64_t frame_size() const { return total_channels(module_table); }
    void validate() const;
    nlohmann::json to_json() const;
    static DumpHeader from_json(const nlohmann::json &j);
};

// Writes "ACTD" files: magic, u16 version, u32 header length, header JSON,
// then token_count frames of little-endian values.
class DumpWriter {
public:
    DumpWriter(const std::filesystem::path &path, DumpHeader header);
    ~DumpWriter();
    DumpWriter(const DumpWriter &) = delete;
    DumpWriter &operator=(const DumpWriter &) = delete;

    const DumpHeader &header() const { return header_; }
    void write_frame(std::span<const float> frame);
    // Fails with "premature stream end" unless token_count frames were written.
    void finish();

private:
    std::filesystem::path path_;
    std::filesystem::path partial_;
    std::ofstream out_;
    DumpHeader header_;
    std::uint64_t frames_ = 0;
    std::vector<std::uint16_t> half_buf_;
    bool finished_ = false;
};

// Lazy frame iterator. Holds one frame buffer (plus a raw buffer for F16
// payloads); a truncated file fails at the first incomplete frame.
class DumpReader {
public:
    explicit DumpReader(const std::filesystem::path &path);

    const DumpHeader &header() const { return header_; }
    // Next frame, or nullopt after the last one. The span stays valid until
    // the following call.
    std::optional<std::span<const float>> next();
    std::uint64_t frames_read() const { return frames_read_; }
    std::size_t buffer_bytes() const;

private:
    std::filesystem::path path_;
    std::ifstream in_;
    DumpHeader header_;
    std::uint64_t frames_read_ = 0;
    std::vector<float> frame_;
    std::vector<std::uint16_t> raw_half_;
};

// Per-channel absolute-difference sums of a token-aligned dump pair.
struct DiffDump {
    std::string model_a;
    std::string model_b;
    Digest input_set_hash{};
    RoleFilter role_filter = RoleFilter::All;
    ModuleTable module_table;
    std::vector<double> sum_abs_diff;
    std::vector<std::uint64_t> token_count;

    bool operator==(const DiffDump &) const = default;
};

// Sums |a - b| over the tokens selected by `filter`, in 64-bit floats, token
// by token per channel. Channel ranges are split across workers; each
// channel's summation order is fixed, so results do not depend on `workers`.
DiffDump reduce_pair(DumpReader &a, DumpReader &b, RoleFilter filter, unsigned workers = 1);
DiffDump reduce_pair(const std::filesystem::path &a, const std::filesystem::path &b, RoleFilter filter,
                     unsigned workers = 1);

// "ACTR" files: magic, u16 version, u32 header length, header JSON, then
// per channel an (f64 sum, u64 count) record in module_table order.
void write_diff(const std::filesystem::path &path, const DiffDump &diff);
DiffDump read_diff(const std::filesystem::path &path);

} // namespace abltx
