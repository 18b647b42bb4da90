#include "abltx/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>

#include "abltx/error.hpp"
#include "abltx/parallel.hpp"
#include "envelope.hpp"

namespace abltx {

namespace {

constexpr std::string_view kStatsMagic = "ACTS";

std::optional<StatKind> parse_stat_kind(std::string_view name) {
    if (name == "ActivationDiff") return StatKind::ActivationDiff;
    if (name == "WeightL2Diff") return StatKind::WeightL2Diff;
    return std::nullopt;
}

} // namespace

std::string_view stat_kind_name(StatKind kind) {
    return kind == StatKind::ActivationDiff ? "ActivationDiff" : "WeightL2Diff";
}

double ChannelStatVector::at(const ChannelId &id) const {
    return values.at(ChannelLayout(module_table).flat_index(id));
}

void ChannelStatVector::validate() const {
    if (values.size() != total_channels(module_table))
        throw ContractError("stat vector: " + std::to_string(values.size()) + " values for " +
                            std::to_string(total_channels(module_table)) + " channels");
    for (std::size_t i = 0; i < values.size(); ++i)
        if (!(values[i] >= 0.0) || std::isinf(values[i]))
            throw ContractError("stat vector: value at flat index " + std::to_string(i) + " is not finite and >= 0");
    ChannelLayout layout(module_table);
}

ChannelStatVector activation_stats(const DiffDump &diff, std::string ability_tag) {
    ChannelStatVector stats;
    stats.kind = StatKind::ActivationDiff;
    stats.pair_id = {diff.model_a, diff.model_b};
    stats.ability_tag = std::move(ability_tag);
    stats.module_table = diff.module_table;
    stats.values.resize(diff.sum_abs_diff.size());
    for (std::size_t i = 0; i < diff.sum_abs_diff.size(); ++i) {
        if (diff.token_count[i] == 0) {
            const auto id = ChannelLayout(diff.module_table).channel_at(i);
            throw ContractError("zero token count at channel " + id.module_path + "[" + std::to_string(id.index) +
                                "]: empty role filter");
        }
        stats.values[i] = diff.sum_abs_diff[i] / static_cast<double>(diff.token_count[i]);
    }
    return stats;
}

ChannelStatVector weight_stats(const CheckpointReader &target, const CheckpointReader &ability, std::string ability_tag,
                               const WeightStatsOptions &options) {
    const auto &ti = target.index();
    const auto &ai = ability.index();
    const ModuleTable table = ti.module_table();
    if (table != ai.module_table()) throw ContractError("module mismatch between target and ability checkpoints");
    for (const auto &m : ti.modules()) {
        const auto *other = ai.find_module(m.path);
        if (other->weight != m.weight || other->bias != m.bias)
            throw ContractError("module mismatch: " + m.path + " has different tensors");
        for (const auto *name : {&m.weight, m.bias ? &*m.bias : nullptr}) {
            if (!name) continue;
            if (ti.tensor(*name).shape != ai.tensor(*name).shape)
                throw ContractError("shape mismatch for tensor " + *name);
        }
    }

    ChannelStatVector stats;
    stats.kind = StatKind::WeightL2Diff;
    stats.pair_id = {model_id_of(ability), model_id_of(target)};
    stats.ability_tag = std::move(ability_tag);
    stats.module_table = table;
    stats.values.assign(total_channels(table), 0.0);
    ChannelLayout layout(stats.module_table);

    parallel_for(ti.modules().size(), options.workers, [&](std::size_t mi) {
        const auto &module = ti.modules()[mi];
        std::vector<double> acc(module.n_channels, 0.0);
        std::vector<std::byte> raw_t, raw_a;
        std::vector<double> wt, wa;
        for (const auto *name : {&module.weight, module.bias ? &*module.bias : nullptr}) {
            if (!name) continue;
            const auto &tt = ti.tensor(*name);
            const auto &ta = ai.tensor(*name);
            const auto map = *element_channel_map(ti, *name);
            const std::uint64_t total = tt.element_count();
            const std::uint64_t step =
                std::min(chunk_elements(tt.dtype, options.chunk_bytes), chunk_elements(ta.dtype, options.chunk_bytes));
            for (std::uint64_t e0 = 0; e0 < total; e0 += step) {
                const std::uint64_t count = std::min(step, total - e0);
                raw_t.resize(count * dtype_size(tt.dtype));
                raw_a.resize(count * dtype_size(ta.dtype));
                target.read(tt, e0 * dtype_size(tt.dtype), raw_t);
                ability.read(ta, e0 * dtype_size(ta.dtype), raw_a);
                wt.resize(count);
                wa.resize(count);
                widen(tt.dtype, raw_t, wt);
                widen(ta.dtype, raw_a, wa);
                for (std::uint64_t k = 0; k < count; ++k) {
                    const double d = wa[k] - wt[k];
                    acc[map.channel_of(e0 + k)] += d * d;
                }
            }
        }
        const std::uint64_t base = layout.module_offset(mi);
        for (std::uint64_t c = 0; c < module.n_channels; ++c) stats.values[base + c] = std::sqrt(acc[c]);
    });
    return stats;
}

std::string_view grouping_name(Grouping g) {
    switch (g) {
    case Grouping::Global: return "global";
    case Grouping::PerLayer: return "layer";
    case Grouping::PerModuleType: return "module";
    }
    return "?";
}

std::optional<Grouping> parse_grouping(std::string_view name) {
    for (auto g : {Grouping::Global, Grouping::PerLayer, Grouping::PerModuleType})
        if (grouping_name(g) == name) return g;
    return std::nullopt;
}

std::optional<std::uint64_t> layer_of(std::string_view module_path) {
    static const std::regex pattern(R"((?:^|\.)(?:layers|layer|h|blocks|block)\.(\d+)(?:\.|$))");
    std::match_results<std::string_view::const_iterator> match;
    if (!std::regex_search(module_path.begin(), module_path.end(), match, pattern)) return std::nullopt;
    std::uint64_t layer = 0;
    const auto digits = match[1];
    std::from_chars(&*digits.first, &*digits.first + digits.length(), layer);
    return layer;
}

std::string module_type_of(std::string_view module_path, const ModuleRules &rules) {
    return rules.matching_suffix(module_path).value_or("other");
}

std::vector<double> auto_thresholds(const ChannelStatVector &stats, std::size_t points) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = 0.0;
    for (double v : stats.values) {
        if (v > 0.0) lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi == 0.0) return {0.0};
    if (points < 2 || lo == hi) return {lo};
    std::vector<double> grid(points);
    const double log_lo = std::log(lo);
    const double step = (std::log(hi) - log_lo) / static_cast<double>(points - 1);
    for (std::size_t k = 0; k < points; ++k) grid[k] = std::exp(log_lo + step * static_cast<double>(k));
    grid.front() = lo;
    grid.back() = hi;
    return grid;
}

std::vector<CcdfCurve> ccdf(const ChannelStatVector &stats, Grouping grouping, std::span<const double> thresholds,
                            const ModuleRules &rules) {
    if (stats.values.empty()) throw ContractError("ccdf: empty statistics");
    if (stats.values.size() != total_channels(stats.module_table))
        throw ContractError("ccdf: value count does not match module table");

    // Group keys in output order.
    struct Group {
        std::string key;
        std::vector<double> values;
    };
    std::vector<std::pair<std::string, std::optional<std::uint64_t>>> module_group(stats.module_table.size());
    for (std::size_t m = 0; m < stats.module_table.size(); ++m) {
        const auto &path = stats.module_table[m].path;
        switch (grouping) {
        case Grouping::Global: module_group[m] = {"all", std::nullopt}; break;
        case Grouping::PerLayer: {
            auto layer = layer_of(path);
            module_group[m] = {layer ? "layer." + std::to_string(*layer) : "unlayered", layer};
            break;
        }
        case Grouping::PerModuleType: module_group[m] = {module_type_of(path, rules), std::nullopt}; break;
        }
    }
    // Sort key: layered groups numerically, then "unlayered"; otherwise by name.
    auto order_key = [&](const std::pair<std::string, std::optional<std::uint64_t>> &g) {
        if (grouping == Grouping::PerLayer)
            return std::make_tuple(g.second ? 0 : 1, g.second.value_or(0), std::string());
        return std::make_tuple(0, std::uint64_t{0}, g.first);
    };
    std::map<std::tuple<int, std::uint64_t, std::string>, Group> groups;
    ChannelLayout layout(stats.module_table);
    for (std::size_t m = 0; m < stats.module_table.size(); ++m) {
        auto &group = groups[order_key(module_group[m])];
        group.key = module_group[m].first;
        const auto begin = layout.module_offset(m);
        const auto end = layout.module_offset(m + 1);
        group.values.insert(group.values.end(), stats.values.begin() + static_cast<std::ptrdiff_t>(begin),
                            stats.values.begin() + static_cast<std::ptrdiff_t>(end));
    }

    std::vector<CcdfCurve> curves;
    for (auto &[_, group] : groups) {
        if (group.values.empty()) throw ContractError("ccdf: group " + group.key + " has no channels");
        std::sort(group.values.begin(), group.values.end());
        CcdfCurve curve;
        curve.grouping = grouping;
        curve.group_key = group.key;
        curve.channel_count = group.values.size();
        const double n = static_cast<double>(group.values.size());
        for (double tau : thresholds) {
            const auto above = group.values.end() - std::upper_bound(group.values.begin(), group.values.end(), tau);
            curve.points.push_back({tau, static_cast<double>(above) / n});
        }
        curves.push_back(std::move(curve));
    }
    return curves;
}

void write_stats(const std::filesystem::path &path, const ChannelStatVector &stats) {
    stats.validate();
    nlohmann::json header = {{"stat_kind", stat_kind_name(stats.kind)},
                             {"pair_id", {stats.pair_id.first, stats.pair_id.second}},
                             {"ability_tag", stats.ability_tag},
                             {"module_table", detail::module_table_to_json(stats.module_table)}};
    detail::write_file_atomic(path, [&](std::ostream &out) {
        detail::write_envelope(out, kStatsMagic, header);
        out.write(reinterpret_cast<const char *>(stats.values.data()),
                  static_cast<std::streamsize>(stats.values.size() * sizeof(double)));
    });
}

ChannelStatVector read_stats(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open stats '" + path.string() + "'");
    const auto header = detail::read_envelope(in, kStatsMagic, path);
    ChannelStatVector stats;
    try {
        const auto kind = parse_stat_kind(header.at("stat_kind").get<std::string>());
        if (!kind) throw ContractError("stats header: unknown stat_kind");
        stats.kind = *kind;
        const auto &pair = header.at("pair_id");
        stats.pair_id = {pair.at(0).get<std::string>(), pair.at(1).get<std::string>()};
        stats.ability_tag = header.at("ability_tag").get<std::string>();
        stats.module_table = detail::module_table_from_json(header.at("module_table"));
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("stats header: ") + e.what());
    }
    stats.values.resize(total_channels(stats.module_table));
    if (!in.read(reinterpret_cast<char *>(stats.values.data()),
                 static_cast<std::streamsize>(stats.values.size() * sizeof(double))))
        throw ContractError("truncated stats '" + path.string() + "'");
    if (in.peek() != std::char_traits<char>::eof()) throw ContractError("trailing bytes in stats '" + path.string() + "'");
    stats.validate();
    return stats;
}

void write_ccdf_csv(std::ostream &out, const std::vector<CcdfCurve> &curves) {
    out << "group_key,threshold,fraction\n";
    char buf[64];
    for (const auto &curve : curves) {
        for (const auto &p : curve.points) {
            out << curve.group_key << ',';
            std::snprintf(buf, sizeof buf, "%.17g", p.threshold);
            out << buf << ',';
            std::snprintf(buf, sizeof buf, "%.17g", p.fraction);
            out << buf << '\n';
        }
    }
}

} // namespace abltx
