#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

namespace abltx {

// One output channel of a trainable module. The (module_path, index) order
// is the canonical tie-breaker for every ranking in the toolkit.
struct ChannelId {
    std::string module_path;
    std::uint64_t index = 0;

    auto operator<=>(const ChannelId &) const = default;
    bool operator==(const ChannelId &) const = default;
};

struct ModuleEntry {
    std::string path;
    std::uint64_t n_channels = 0;

    bool operator==(const ModuleEntry &) const = default;
};

// Ordered module list; the order fixes flat channel layout in dumps and
// stat vectors (module 0's channels first, and so on).
using ModuleTable = std::vector<ModuleEntry>;

std::uint64_t total_channels(const ModuleTable &table);

// Flat position <-> ChannelId translation over a module table.
class ChannelLayout {
public:
    explicit ChannelLayout(const ModuleTable &table);

    std::uint64_t size() const { return total_; }
    std::uint64_t flat_index(const ChannelId &id) const; // throws ContractError
    ChannelId channel_at(std::uint64_t flat) const;
    // Rank of each module in lexicographic path order.
    const std::vector<std::uint32_t> &canonical_rank() const { return rank_; }
    std::uint64_t module_offset(std::size_t module) const { return offsets_[module]; }
    std::size_t module_of_flat(std::uint64_t flat) const;
    const ModuleTable &table() const { return *table_; }

private:
    const ModuleTable *table_;
    std::vector<std::uint64_t> offsets_;
    std::vector<std::uint32_t> rank_;
    std::vector<std::size_t> by_path_; // module indices sorted by path
    std::uint64_t total_ = 0;
};

} // namespace abltx
