#include "abltx/mask.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "abltx/error.hpp"
#include "envelope.hpp"

namespace abltx {

namespace {

constexpr int kMaskVersion = 1;

void check_p(double p) {
    if (!(p > 0.0 && p <= 100.0)) throw ContractError("selection ratio p must be in (0, 100], got " + std::to_string(p));
}

nlohmann::json channels_to_json(const std::vector<ChannelId> &channels) {
    auto arr = nlohmann::json::array();
    for (const auto &c : channels) arr.push_back({c.module_path, c.index});
    return arr;
}

std::vector<ChannelId> channels_from_json(const nlohmann::json &j, std::uint64_t universe) {
    std::vector<ChannelId> channels;
    channels.reserve(j.size());
    for (const auto &entry : j) {
        if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() || !entry[1].is_number_unsigned())
            throw ContractError("mask channels must be [module_path, index] pairs");
        channels.push_back({entry[0].get<std::string>(), entry[1].get<std::uint64_t>()});
    }
    for (std::size_t i = 1; i < channels.size(); ++i)
        if (!(channels[i - 1] < channels[i])) throw ContractError("mask channels are not in canonical order");
    if (channels.size() > universe) throw ContractError("mask has more channels than its universe");
    return channels;
}

nlohmann::json read_json_file(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mask '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error &e) {
        throw ContractError("malformed mask '" + path.string() + "': " + e.what());
    }
}

void write_json_file(const std::filesystem::path &path, const nlohmann::json &j) {
    detail::write_file_atomic(path, [&](std::ostream &out) { out << j.dump() << '\n'; });
}

} // namespace

MaskView view_of(const AbilityMask &mask) {
    return {mask.channels, mask.total_channel_count, mask.ability_tag};
}

MaskView view_of(const UnifiedMask &mask) {
    std::string label = mask.source_model_id;
    if (!mask.constituent_tags.empty()) {
        label.clear();
        for (std::size_t i = 0; i < mask.constituent_tags.size(); ++i)
            label += (i ? "+" : "") + mask.constituent_tags[i];
    }
    return {mask.channels, mask.total_channel_count, label};
}

std::uint64_t mask_size(std::uint64_t n, double p) {
    if (!(p > 0.0)) return 0;
    const auto micro = static_cast<unsigned __int128>(std::llround(std::min(p, 100.0) * 1e6));
    const unsigned __int128 scale = 100'000'000; // 100 percent in micro-percent
    const auto k = static_cast<std::uint64_t>((n * micro + scale / 2) / scale);
    return std::min(k, n);
}

AbilityMask build_mask(const ChannelStatVector &stats, double p) {
    check_p(p);
    if (stats.values.empty()) throw ContractError("build_mask: empty statistics");
    stats.validate();
    const ChannelLayout layout(stats.module_table);
    const std::uint64_t n = stats.values.size();
    const std::uint64_t k = mask_size(n, p);

    struct Entry {
        double value;
        std::uint64_t key; // canonical order: module rank, then index
        std::uint64_t flat;
    };
    std::vector<Entry> entries;
    entries.reserve(n);
    const auto &rank = layout.canonical_rank();
    for (std::size_t m = 0; m < stats.module_table.size(); ++m) {
        const auto begin = layout.module_offset(m);
        const auto end = layout.module_offset(m + 1);
        for (auto i = begin; i < end; ++i)
            entries.push_back({stats.values[i], std::uint64_t{rank[m]} << 40 | (i - begin), i});
    }
    auto better = [](const Entry &a, const Entry &b) {
        if (a.value != b.value) return a.value > b.value;
        return a.key < b.key;
    };
    if (k < n) std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k), entries.end(), better);
    entries.resize(k);
    std::sort(entries.begin(), entries.end(), [](const Entry &a, const Entry &b) { return a.key < b.key; });

    AbilityMask mask;
    mask.ability_tag = stats.ability_tag;
    mask.p = p;
    mask.source_pair = {stats.pair_id.first, stats.pair_id.second};
    mask.total_channel_count = n;
    mask.channels.reserve(k);
    for (const auto &e : entries) mask.channels.push_back(layout.channel_at(e.flat));
    return mask;
}

UnifiedMask union_masks(std::span<const AbilityMask> masks) {
    if (masks.empty()) throw ContractError("union_masks: no masks given");
    UnifiedMask out;
    out.source_model_id = masks.front().source_pair.ability;
    out.total_channel_count = masks.front().total_channel_count;
    for (const auto &m : masks) {
        if (m.source_pair.ability != out.source_model_id)
            throw ContractError("union_masks: mixed source models (" + out.source_model_id + " vs " +
                                m.source_pair.ability + ")");
        if (m.total_channel_count != out.total_channel_count)
            throw ContractError("union_masks: universe mismatch (" + std::to_string(out.total_channel_count) + " vs " +
                                std::to_string(m.total_channel_count) + " channels)");
        std::vector<ChannelId> merged;
        merged.reserve(out.channels.size() + m.channels.size());
        std::set_union(out.channels.begin(), out.channels.end(), m.channels.begin(), m.channels.end(),
                       std::back_inserter(merged));
        out.channels = std::move(merged);
        out.constituent_tags.push_back(m.ability_tag);
    }
    return out;
}

UnifiedMask as_unified(const AbilityMask &mask) {
    return {mask.channels, mask.source_pair.ability, {mask.ability_tag}, mask.total_channel_count};
}

Overlap overlap(const MaskView &a, const MaskView &b) {
    if (a.universe != b.universe)
        throw ContractError("overlap: universe mismatch (" + std::to_string(a.universe) + " vs " +
                            std::to_string(b.universe) + " channels)");
    std::uint64_t count = 0;
    auto ia = a.channels.begin();
    auto ib = b.channels.begin();
    while (ia != a.channels.end() && ib != b.channels.end()) {
        if (*ia < *ib) ++ia;
        else if (*ib < *ia) ++ib;
        else {
            ++count;
            ++ia;
            ++ib;
        }
    }
    const double ratio = a.channels.empty() ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(a.channels.size());
    return {ratio, count};
}

double jaccard_percent(const MaskView &a, const MaskView &b) {
    const auto inter = overlap(a, b).count;
    const auto uni = a.channels.size() + b.channels.size() - inter;
    return uni == 0 ? 0.0 : 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::vector<Overlap>> overlap_matrix(std::span<const MaskView> masks) {
    if (masks.empty()) throw ContractError("overlap_matrix: no masks given");
    std::vector<std::vector<Overlap>> table(masks.size(), std::vector<Overlap>(masks.size()));
    for (std::size_t r = 0; r < masks.size(); ++r)
        for (std::size_t c = 0; c < masks.size(); ++c) table[r][c] = overlap(masks[r], masks[c]);
    return table;
}

double random_baseline(std::uint64_t universe, double p) {
    check_p(p);
    if (universe == 0) return p;
    // E|A ∩ B| = k^2 / N for independent uniform k-subsets, so E[ratio] = k / N.
    return 100.0 * static_cast<double>(mask_size(universe, p)) / static_cast<double>(universe);
}

std::string group_thousands(std::uint64_t value) {
    std::string digits = std::to_string(value);
    std::string out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i && (digits.size() - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

std::string format_overlap_cell(const Overlap &cell) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", cell.ratio_percent);
    return std::string(buf) + " (" + group_thousands(cell.count) + ")";
}

void write_overlap_csv(std::ostream &out, std::span<const MaskView> masks, const OverlapCsvOptions &options) {
    out << "base,other,ratio_percent,count" << (options.jaccard ? ",jaccard_percent" : "") << '\n';
    char buf[64];
    for (const auto &a : masks) {
        for (const auto &b : masks) {
            const auto cell = overlap(a, b);
            std::snprintf(buf, sizeof buf, "%.*f", options.decimals, cell.ratio_percent);
            out << a.label << ',' << b.label << ',' << buf << ',' << cell.count;
            if (options.jaccard) {
                std::snprintf(buf, sizeof buf, "%.*f", options.decimals, jaccard_percent(a, b));
                out << ',' << buf;
            }
            out << '\n';
        }
    }
}

void write_overlap_table(std::ostream &out, std::span<const MaskView> masks) {
    const auto table = overlap_matrix(masks);
    out << "base";
    for (const auto &m : masks) out << ',' << m.label;
    out << '\n';
    for (std::size_t r = 0; r < masks.size(); ++r) {
        out << masks[r].label;
        for (std::size_t c = 0; c < masks.size(); ++c) out << ",\"" << format_overlap_cell(table[r][c]) << '"';
        out << '\n';
    }
}

MaskCoverage mask_coverage(std::span<const ChannelId> channels, const CheckpointIndex &index) {
    MaskCoverage cov;
    cov.channels = channels.size();
    for (const auto &id : channels) cov.param_elements += channel_slice(index, id).element_count();
    const auto total_channels = index.total_channels();
    const auto total_elements = index.total_elements();
    cov.channel_fraction = total_channels ? static_cast<double>(cov.channels) / static_cast<double>(total_channels) : 0.0;
    cov.param_fraction =
        total_elements ? static_cast<double>(cov.param_elements) / static_cast<double>(total_elements) : 0.0;
    return cov;
}

nlohmann::json mask_to_json(const AbilityMask &mask) {
    return {{"version", kMaskVersion},
            {"ability_tag", mask.ability_tag},
            {"p", mask.p},
            {"source_pair", {mask.source_pair.ability, mask.source_pair.reference}},
            {"total_channel_count", mask.total_channel_count},
            {"channels", channels_to_json(mask.channels)}};
}

AbilityMask mask_from_json(const nlohmann::json &j) {
    AbilityMask mask;
    try {
        if (j.at("version").get<int>() != kMaskVersion) throw ContractError("unsupported mask version");
        mask.ability_tag = j.at("ability_tag").get<std::string>();
        mask.p = j.at("p").get<double>();
        check_p(mask.p);
        mask.source_pair = {j.at("source_pair").at(0).get<std::string>(), j.at("source_pair").at(1).get<std::string>()};
        mask.total_channel_count = j.at("total_channel_count").get<std::uint64_t>();
        mask.channels = channels_from_json(j.at("channels"), mask.total_channel_count);
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("malformed mask: ") + e.what());
    }
    return mask;
}

nlohmann::json unified_to_json(const UnifiedMask &mask) {
    return {{"version", kMaskVersion},
            {"source_model_id", mask.source_model_id},
            {"constituent_tags", mask.constituent_tags},
            {"total_channel_count", mask.total_channel_count},
            {"channels", channels_to_json(mask.channels)}};
}

UnifiedMask unified_from_json(const nlohmann::json &j) {
    UnifiedMask mask;
    try {
        if (j.at("version").get<int>() != kMaskVersion) throw ContractError("unsupported mask version");
        mask.source_model_id = j.at("source_model_id").get<std::string>();
        mask.constituent_tags = j.at("constituent_tags").get<std::vector<std::string>>();
        mask.total_channel_count = j.at("total_channel_count").get<std::uint64_t>();
        mask.channels = channels_from_json(j.at("channels"), mask.total_channel_count);
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("malformed unified mask: ") + e.what());
    }
    return mask;
}

void write_mask(const std::filesystem::path &path, const AbilityMask &mask) { write_json_file(path, mask_to_json(mask)); }

AbilityMask read_mask(const std::filesystem::path &path) { return mask_from_json(read_json_file(path)); }

void write_unified(const std::filesystem::path &path, const UnifiedMask &mask) {
    write_json_file(path, unified_to_json(mask));
}

UnifiedMask read_unified(const std::filesystem::path &path) { return unified_from_json(read_json_file(path)); }

UnifiedMask read_mask_as_unified(const std::filesystem::path &path) {
    const auto j = read_json_file(path);
    if (j.is_object() && j.contains("source_model_id")) return unified_from_json(j);
    return as_unified(mask_from_json(j));
}

} // namespace abltx
