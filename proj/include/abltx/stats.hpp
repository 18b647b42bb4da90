#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abltx/channel.hpp"
#include "abltx/checkpoint.hpp"
#include "abltx/dump.hpp"

namespace abltx {

enum class StatKind { ActivationDiff, WeightL2Diff };

std::string_view stat_kind_name(StatKind kind);

// One non-negative f64 statistic per channel, stored flat in module_table
// order (see ChannelLayout).
struct ChannelStatVector {
    StatKind kind = StatKind::ActivationDiff;
    std::pair<std::string, std::string> pair_id; // (ability model, reference model)
    std::string ability_tag;
    ModuleTable module_table;
    std::vector<double> values;

    double at(const ChannelId &id) const;
    std::size_t size() const { return values.size(); }
    void validate() const;
    bool operator==(const ChannelStatVector &) const = default;
};

// entry[i] = sum_abs_diff[i] / token_count[i]. Zero token counts are an error
// (an empty role filter at capture time).
ChannelStatVector activation_stats(const DiffDump &diff, std::string ability_tag);

struct WeightStatsOptions {
    unsigned workers = 1;
    std::uint64_t chunk_bytes = 4ull << 20;
};

// L2 norm of (ability slice - target slice) per channel, widened to f64 before
// subtracting. Modules are distributed across workers; the accumulation
// order inside a channel is the file's element order.
ChannelStatVector weight_stats(const CheckpointReader &target, const CheckpointReader &ability, std::string ability_tag,
                               const WeightStatsOptions &options = {});

enum class Grouping { Global, PerLayer, PerModuleType };

std::string_view grouping_name(Grouping g);
std::optional<Grouping> parse_grouping(std::string_view name);

struct CcdfPoint {
    double threshold;
    double fraction; // share of the group's channels with value > threshold
};

struct CcdfCurve {
    Grouping grouping = Grouping::Global;
    std::string group_key;
    std::uint64_t channel_count = 0;
    std::vector<CcdfPoint> points;
};

// Log-spaced grid between the smallest positive value and the largest. An
// all-zero vector yields the single threshold 0.
std::vector<double> auto_thresholds(const ChannelStatVector &stats, std::size_t points = 64);

std::vector<CcdfCurve> ccdf(const ChannelStatVector &stats, Grouping grouping, std::span<const double> thresholds,
                            const ModuleRules &rules = ModuleRules::defaults());

// "model.layers.12.self_attn.q_proj" -> 12; nullopt for non-layered modules.
std::optional<std::uint64_t> layer_of(std::string_view module_path);
// Rule suffix matching the path ("q_proj", "lm_head", ...) or "other".
std::string module_type_of(std::string_view module_path, const ModuleRules &rules = ModuleRules::defaults());

// "ACTS": magic, u16 version, u32 header length, header JSON, f64 per channel.
void write_stats(const std::filesystem::path &path, const ChannelStatVector &stats);
ChannelStatVector read_stats(const std::filesystem::path &path);

// CSV with columns group_key,threshold,fraction.
void write_ccdf_csv(std::ostream &out, const std::vector<CcdfCurve> &curves);

} // namespace abltx
