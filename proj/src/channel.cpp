#include "abltx/channel.hpp"

#include <algorithm>
#include <numeric>

#include "abltx/error.hpp"

namespace abltx {

std::uint64_t total_channels(const ModuleTable &table) {
    std::uint64_t n = 0;
    for (const auto &m : table) n += m.n_channels;
    return n;
}

ChannelLayout::ChannelLayout(const ModuleTable &table) : table_(&table) {
    offsets_.reserve(table.size() + 1);
    for (const auto &m : table) {
        offsets_.push_back(total_);
        total_ += m.n_channels;
    }
    offsets_.push_back(total_);

    by_path_.resize(table.size());
    std::iota(by_path_.begin(), by_path_.end(), std::size_t{0});
    std::sort(by_path_.begin(), by_path_.end(),
              [&](std::size_t a, std::size_t b) { return table[a].path < table[b].path; });
    for (std::size_t i = 1; i < by_path_.size(); ++i) {
        if (table[by_path_[i]].path == table[by_path_[i - 1]].path)
            throw ContractError("duplicate module in module table: " + table[by_path_[i]].path);
    }
    rank_.resize(table.size());
    for (std::size_t r = 0; r < by_path_.size(); ++r) rank_[by_path_[r]] = static_cast<std::uint32_t>(r);
}

std::uint64_t ChannelLayout::flat_index(const ChannelId &id) const {
    const auto &table = *table_;
    auto it = std::lower_bound(by_path_.begin(), by_path_.end(), id.module_path,
                               [&](std::size_t m, const std::string &p) { return table[m].path < p; });
    if (it == by_path_.end() || table[*it].path != id.module_path)
        throw ContractError("unknown module: " + id.module_path);
    if (id.index >= table[*it].n_channels)
        throw ContractError("channel index out of range: " + id.module_path + "[" +
                            std::to_string(id.index) + "]");
    return offsets_[*it] + id.index;
}

std::size_t ChannelLayout::module_of_flat(std::uint64_t flat) const {
    auto it = std::upper_bound(offsets_.begin(), offsets_.end() - 1, flat);
    return static_cast<std::size_t>(it - offsets_.begin()) - 1;
}

ChannelId ChannelLayout::channel_at(std::uint64_t flat) const {
    if (flat >= total_) throw ContractError("flat channel index out of range");
    const std::size_t m = module_of_flat(flat);
    return {(*table_)[m].path, flat - offsets_[m]};
}

} // namespace abltx
