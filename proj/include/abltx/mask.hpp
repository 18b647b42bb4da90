#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "abltx/channel.hpp"
#include "abltx/checkpoint.hpp"
#include "abltx/stats.hpp"

namespace abltx {

struct SourcePair {
    std::string ability;   // model whose channels the mask selects
    std::string reference; // model it was compared against

    bool operator==(const SourcePair &) const = default;
};

// Top-p% channels of one stat vector. Channels are kept in canonical
// (module_path, index) order.
struct AbilityMask {
    std::vector<ChannelId> channels;
    std::string ability_tag;
    double p = 1.0;
    SourcePair source_pair;
    std::uint64_t total_channel_count = 0;

    bool operator==(const AbilityMask &) const = default;
};

// Union of the ability masks drawn from one ability model.
struct UnifiedMask {
    std::vector<ChannelId> channels;
    std::string source_model_id;
    std::vector<std::string> constituent_tags;
    std::uint64_t total_channel_count = 0;

    bool operator==(const UnifiedMask &) const = default;
};

// Read-only view used by the overlap routines, so ability and unified
// masks can be compared with each other.
struct MaskView {
    std::span<const ChannelId> channels;
    std::uint64_t universe = 0;
    std::string label;
};

MaskView view_of(const AbilityMask &mask);
MaskView view_of(const UnifiedMask &mask);

// round_half_up(n * p / 100), capped at n. p is taken at a resolution of
// 1e-6 percent and the product is evaluated exactly in integers, so decimal
// inputs such as 0.15 round the way they read.
std::uint64_t mask_size(std::uint64_t n, double p);

// Global ranking irrespective of layer or module; ties at the selection
// boundary go to the canonically smaller ChannelId.
AbilityMask build_mask(const ChannelStatVector &stats, double p);

UnifiedMask union_masks(std::span<const AbilityMask> masks);
UnifiedMask as_unified(const AbilityMask &mask);

struct Overlap {
    double ratio_percent = 0.0; // |a ∩ b| / |a| * 100, normalized by the row mask
    std::uint64_t count = 0;

    bool operator==(const Overlap &) const = default;
};

Overlap overlap(const MaskView &a, const MaskView &b);
// Symmetric |a ∩ b| / |a ∪ b| * 100. Reported alongside, never used for
// row-normalized tables.
double jaccard_percent(const MaskView &a, const MaskView &b);
std::vector<std::vector<Overlap>> overlap_matrix(std::span<const MaskView> masks);

// Expected overlap (percent) of two independent uniformly drawn top-p% masks.
double random_baseline(std::uint64_t universe, double p);

// "25.3% (4,434)"
std::string format_overlap_cell(const Overlap &cell);
std::string group_thousands(std::uint64_t value);

struct OverlapCsvOptions {
    int decimals = 1;
    bool jaccard = false;
};

// Long format, one row per (base, other) pair:
// base,other,ratio_percent,count[,jaccard_percent]
void write_overlap_csv(std::ostream &out, std::span<const MaskView> masks, const OverlapCsvOptions &options = {});
// Grid layout: first column is the base
// (row) mask, cells read "25.3% (4,434)".
void write_overlap_table(std::ostream &out, std::span<const MaskView> masks);

struct MaskCoverage {
    std::uint64_t channels = 0;
    double channel_fraction = 0.0;      // of all channel-mapped channels
    std::uint64_t param_elements = 0;   // weight rows/columns plus bias elements
    double param_fraction = 0.0;        // of every element in the checkpoint
};

MaskCoverage mask_coverage(std::span<const ChannelId> channels, const CheckpointIndex &index);

void write_mask(const std::filesystem::path &path, const AbilityMask &mask);
AbilityMask read_mask(const std::filesystem::path &path);
void write_unified(const std::filesystem::path &path, const UnifiedMask &mask);
UnifiedMask read_unified(const std::filesystem::path &path);
// Accepts either file kind; an ability mask becomes a one-constituent union.
UnifiedMask read_mask_as_unified(const std::filesystem::path &path);

nlohmann::json mask_to_json(const AbilityMask &mask);
AbilityMask mask_from_json(const nlohmann::json &j);
nlohmann::json unified_to_json(const UnifiedMask &mask);
UnifiedMask unified_from_json(const nlohmann::json &j);

} // namespace abltx
