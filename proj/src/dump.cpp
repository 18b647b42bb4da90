#include "abltx/dump.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "abltx/dtype.hpp"
#include "abltx/error.hpp"
#include "abltx/parallel.hpp"
#include "envelope.hpp"

namespace abltx {

namespace {

constexpr std::string_view kDumpMagic = "ACTD";
constexpr std::string_view kDiffMagic = "ACTR";

// Frames buffered per reduce_pair batch, in values.
constexpr std::size_t kBatchValues = 1 << 20;

std::string_view value_dtype_name(ValueDType d) { return d == ValueDType::F32 ? "F32" : "F16"; }

} // namespace

std::string_view role_filter_name(RoleFilter filter) {
    switch (filter) {
    case RoleFilter::All: return "all";
    case RoleFilter::AnswerOnly: return "answer";
    case RoleFilter::PromptOnly: return "prompt";
    }
    return "?";
}

std::optional<RoleFilter> parse_role_filter(std::string_view name) {
    for (auto f : {RoleFilter::All, RoleFilter::AnswerOnly, RoleFilter::PromptOnly})
        if (role_filter_name(f) == name) return f;
    return std::nullopt;
}

bool role_selected(RoleFilter filter, TokenRole role) {
    switch (filter) {
    case RoleFilter::All: return true;
    case RoleFilter::AnswerOnly: return role == TokenRole::Answer;
    case RoleFilter::PromptOnly: return role == TokenRole::Prompt;
    }
    return false;
}

std::string encode_roles(std::span<const TokenRole> roles) {
    std::string s(roles.size(), 'P');
    for (std::size_t i = 0; i < roles.size(); ++i)
        if (roles[i] == TokenRole::Answer) s[i] = 'A';
    return s;
}

std::vector<TokenRole> decode_roles(std::string_view text) {
    std::vector<TokenRole> roles;
    roles.reserve(text.size());
    for (char c : text) {
        if (c == 'P') roles.push_back(TokenRole::Prompt);
        else if (c == 'A') roles.push_back(TokenRole::Answer);
        else throw ContractError(std::string("token_roles: unexpected character '") + c + "'");
    }
    return roles;
}

Digest hash_tokens(std::span<const std::uint32_t> tokens) {
    Sha256 sha;
    sha.update(std::as_bytes(tokens));
    return sha.finish();
}

void DumpHeader::validate() const {
    if (token_roles.size() != token_count)
        throw ContractError("dump header: token_roles length " + std::to_string(token_roles.size()) +
                            " != token_count " + std::to_string(token_count));
    ChannelLayout layout(module_table); // rejects duplicate modules
}

nlohmann::json DumpHeader::to_json() const {
    return {{"model_id", model_id},
            {"input_set_hash", to_hex(input_set_hash)},
            {"module_table", detail::module_table_to_json(module_table)},
            {"token_count", token_count},
            {"token_roles", encode_roles(token_roles)},
            {"value_dtype", value_dtype_name(value_dtype)}};
}

DumpHeader DumpHeader::from_json(const nlohmann::json &j) {
    DumpHeader h;
    try {
        h.model_id = j.at("model_id").get<std::string>();
        h.input_set_hash = digest_from_hex(j.at("input_set_hash").get<std::string>());
        h.module_table = detail::module_table_from_json(j.at("module_table"));
        h.token_count = j.at("token_count").get<std::uint64_t>();
        h.token_roles = decode_roles(j.at("token_roles").get<std::string>());
        const auto dtype = j.at("value_dtype").get<std::string>();
        if (dtype == "F32") h.value_dtype = ValueDType::F32;
        else if (dtype == "F16") h.value_dtype = ValueDType::F16;
        else throw ContractError("dump header: unsupported value_dtype " + dtype);
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("dump header: ") + e.what());
    }
    h.validate();
    return h;
}

DumpWriter::DumpWriter(const std::filesystem::path &path, DumpHeader header)
    : path_(path), partial_(path.string() + ".partial"), header_(std::move(header)) {
    header_.validate();
    out_.open(partial_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + partial_.string() + "' for writing");
    detail::write_envelope(out_, kDumpMagic, header_.to_json());
    if (!out_) throw IoError("write failed on '" + partial_.string() + "'");
}

DumpWriter::~DumpWriter() {
    if (!finished_) {
        out_.close();
        std::error_code ec;
        std::filesystem::remove(partial_, ec);
    }
}

void DumpWriter::write_frame(std::span<const float> frame) {
    if (frame.size() != header_.frame_size())
        throw ContractError("frame length mismatch: got " + std::to_string(frame.size()) + ", expected " +
                            std::to_string(header_.frame_size()));
    if (frames_ >= header_.token_count)
        throw ContractError("more frames than token_count " + std::to_string(header_.token_count));
    if (header_.value_dtype == ValueDType::F32) {
        out_.write(reinterpret_cast<const char *>(frame.data()), static_cast<std::streamsize>(frame.size_bytes()));
    } else {
        half_buf_.resize(frame.size());
        for (std::size_t i = 0; i < frame.size(); ++i) half_buf_[i] = float_to_half(frame[i]);
        out_.write(reinterpret_cast<const char *>(half_buf_.data()),
                   static_cast<std::streamsize>(half_buf_.size() * sizeof(std::uint16_t)));
    }
    if (!out_) throw IoError("write failed on '" + partial_.string() + "'");
    ++frames_;
}

void DumpWriter::finish() {
    if (frames_ != header_.token_count)
        throw ContractError("premature stream end: wrote " + std::to_string(frames_) + " of " +
                            std::to_string(header_.token_count) + " frames");
    out_.close();
    if (!out_) throw IoError("write failed on '" + partial_.string() + "'");
    std::error_code ec;
    std::filesystem::rename(partial_, path_, ec);
    if (ec) throw IoError("cannot rename '" + partial_.string() + "': " + ec.message());
    finished_ = true;
}

DumpReader::DumpReader(const std::filesystem::path &path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open dump '" + path.string() + "'");
    header_ = DumpHeader::from_json(detail::read_envelope(in_, kDumpMagic, path));
}

std::optional<std::span<const float>> DumpReader::next() {
    if (frames_read_ == header_.token_count) {
        if (in_.peek() != std::char_traits<char>::eof())
            throw ContractError("trailing bytes after last frame in '" + path_.string() + "'");
        return std::nullopt;
    }
    const std::size_t n = header_.frame_size();
    frame_.resize(n);
    bool ok;
    if (header_.value_dtype == ValueDType::F32) {
        ok = static_cast<bool>(in_.read(reinterpret_cast<char *>(frame_.data()), static_cast<std::streamsize>(n * 4)));
    } else {
        raw_half_.resize(n);
        ok = static_cast<bool>(in_.read(reinterpret_cast<char *>(raw_half_.data()), static_cast<std::streamsize>(n * 2)));
        if (ok)
            for (std::size_t i = 0; i < n; ++i) frame_[i] = half_to_float(raw_half_[i]);
    }
    if (!ok)
        throw ContractError("truncated dump '" + path_.string() + "': frame " + std::to_string(frames_read_) +
                            " is incomplete");
    ++frames_read_;
    return std::span<const float>(frame_);
}

std::size_t DumpReader::buffer_bytes() const {
    return frame_.capacity() * sizeof(float) + raw_half_.capacity() * sizeof(std::uint16_t);
}

namespace {

void require_aligned(const DumpHeader &a, const DumpHeader &b) {
    if (a.module_table != b.module_table) throw ContractError("header mismatch: module_table");
    if (a.input_set_hash != b.input_set_hash) throw ContractError("header mismatch: input_set_hash");
    if (a.token_count != b.token_count) throw ContractError("header mismatch: token_count");
    if (a.token_roles != b.token_roles) throw ContractError("header mismatch: token_roles");
}

} // namespace

DiffDump reduce_pair(DumpReader &a, DumpReader &b, RoleFilter filter, unsigned workers) {
    const auto &ha = a.header();
    const auto &hb = b.header();
    require_aligned(ha, hb);

    const std::size_t n = ha.frame_size();
    DiffDump diff;
    diff.model_a = ha.model_id;
    diff.model_b = hb.model_id;
    diff.input_set_hash = ha.input_set_hash;
    diff.role_filter = filter;
    diff.module_table = ha.module_table;
    diff.sum_abs_diff.assign(n, 0.0);

    std::uint64_t selected = 0;
    for (auto role : ha.token_roles) selected += role_selected(filter, role) ? 1 : 0;
    diff.token_count.assign(n, selected);
    if (n == 0) {
        while (a.next()) b.next();
        return diff;
    }

    const std::size_t batch = std::max<std::size_t>(1, kBatchValues / n);
    std::vector<float> frames_a, frames_b;
    frames_a.reserve(batch * n);
    frames_b.reserve(batch * n);
    const unsigned shards = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));

    std::uint64_t token = 0;
    bool done = false;
    while (!done) {
        frames_a.clear();
        frames_b.clear();
        std::size_t rows = 0;
        while (rows < batch) {
            auto fa = a.next();
            auto fb = b.next();
            if (!fa || !fb) {
                done = true;
                break;
            }
            const bool keep = role_selected(filter, ha.token_roles[token++]);
            if (!keep) continue;
            frames_a.insert(frames_a.end(), fa->begin(), fa->end());
            frames_b.insert(frames_b.end(), fb->begin(), fb->end());
            ++rows;
        }
        if (rows == 0) continue;
        parallel_for(shards, shards, [&](std::size_t shard) {
            const std::size_t begin = n * shard / shards;
            const std::size_t end = n * (shard + 1) / shards;
            double *sums = diff.sum_abs_diff.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const float *ra = frames_a.data() + r * n;
                const float *rb = frames_b.data() + r * n;
                for (std::size_t i = begin; i < end; ++i)
                    sums[i] += std::fabs(static_cast<double>(ra[i]) - static_cast<double>(rb[i]));
            }
        });
    }
    return diff;
}

DiffDump reduce_pair(const std::filesystem::path &a, const std::filesystem::path &b, RoleFilter filter,
                     unsigned workers) {
    DumpReader ra(a);
    DumpReader rb(b);
    return reduce_pair(ra, rb, filter, workers);
}

void write_diff(const std::filesystem::path &path, const DiffDump &diff) {
    const std::size_t n = total_channels(diff.module_table);
    if (diff.sum_abs_diff.size() != n || diff.token_count.size() != n)
        throw ContractError("diff dump: record count does not match module_table");
    nlohmann::json header = {{"model_a", diff.model_a},
                             {"model_b", diff.model_b},
                             {"input_set_hash", to_hex(diff.input_set_hash)},
                             {"role_filter", role_filter_name(diff.role_filter)},
                             {"module_table", detail::module_table_to_json(diff.module_table)}};
    detail::write_file_atomic(path, [&](std::ostream &out) {
        detail::write_envelope(out, kDiffMagic, header);
        for (std::size_t i = 0; i < n; ++i) {
            detail::put_le<double>(out, diff.sum_abs_diff[i]);
            detail::put_le<std::uint64_t>(out, diff.token_count[i]);
        }
    });
}

DiffDump read_diff(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open diff '" + path.string() + "'");
    const auto header = detail::read_envelope(in, kDiffMagic, path);
    DiffDump diff;
    try {
        diff.model_a = header.at("model_a").get<std::string>();
        diff.model_b = header.at("model_b").get<std::string>();
        diff.input_set_hash = digest_from_hex(header.at("input_set_hash").get<std::string>());
        const auto filter = parse_role_filter(header.at("role_filter").get<std::string>());
        if (!filter) throw ContractError("diff header: unknown role_filter");
        diff.role_filter = *filter;
        diff.module_table = detail::module_table_from_json(header.at("module_table"));
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("diff header: ") + e.what());
    }
    const std::size_t n = total_channels(diff.module_table);
    diff.sum_abs_diff.resize(n);
    diff.token_count.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!detail::get_le(in, diff.sum_abs_diff[i]) || !detail::get_le(in, diff.token_count[i]))
            throw ContractError("truncated diff '" + path.string() + "' at channel " + std::to_string(i));
        if (!(diff.sum_abs_diff[i] >= 0.0))
            throw ContractError("diff '" + path.string() + "': negative or NaN sum at channel " + std::to_string(i));
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw ContractError("trailing bytes in diff '" + path.string() + "'");
    // token counts are uniform within a module
    ChannelLayout layout(diff.module_table);
    for (std::size_t m = 0; m < diff.module_table.size(); ++m) {
        const auto begin = layout.module_offset(m);
        const auto end = layout.module_offset(m + 1);
        for (auto i = begin; i < end; ++i)
            if (diff.token_count[i] != diff.token_count[begin])
                throw ContractError("diff '" + path.string() + "': token counts differ within module " +
                                    diff.module_table[m].path);
    }
    return diff;
}

} // namespace abltx
