#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "abltx/checkpoint.hpp"
#include "abltx/mask.hpp"

namespace abltx {

enum class MergeMethod { ACT, TaskArithmetic, TIES, DARE };

// "act", "ta", "ties", "dare"
std::string_view merge_method_name(MergeMethod method);
std::optional<MergeMethod> parse_merge_method(std::string_view name);

struct MergeSource {
    std::filesystem::path checkpoint;
    std::optional<UnifiedMask> mask; // nullopt: the whole task vector
    double lambda = 0.4;
    std::string mask_origin = "full"; // echoed into the manifest
};

struct MergePlan {
    std::filesystem::path target;
    std::vector<MergeSource> sources;
    MergeMethod method = MergeMethod::ACT;
    double ties_trim_fraction = 0.2;
    double dare_drop_prob = 0.9;
    std::uint64_t seed = 0;
};

struct MergeOptions {
    unsigned workers = 1;
    // Budget for one f64 working buffer; raw buffers are smaller.
    std::uint64_t chunk_bytes = 4ull << 20;
    ModuleRules rules = ModuleRules::defaults();
};

struct SourceReport {
    std::filesystem::path checkpoint;
    std::string mask_origin;
    double lambda = 0.0;
    std::uint64_t channels = 0;
    double channel_fraction = 0.0;
    std::uint64_t param_elements = 0;
    double param_fraction = 0.0;
};

struct MergeResult {
    std::filesystem::path output;
    std::string sha256;
    std::vector<SourceReport> sources;
    nlohmann::ordered_json manifest;
};

// delta = ability - target, element-wise on widened values.
void task_vector(std::span<const double> target, std::span<const double> ability, std::span<double> delta);

// 1 / (1 - p), the factor DARE applies to kept delta elements.
double dare_rescale(double drop_prob);

// Streams the target and every source tensor by tensor and writes the merged
// checkpoint to `output`. Elements that receive no contribution keep the
// target's bytes; everything else is accumulated in f64 and narrowed once.
// A source mask only selects channel-mapped tensors; a "full" source covers
// every tensor.
MergeResult merge(const MergePlan &plan, const std::filesystem::path &output, const MergeOptions &options = {});

// `<output>.manifest.json`
std::filesystem::path default_manifest_path(const std::filesystem::path &output);
void write_manifest(const std::filesystem::path &path, const MergeResult &result);

// Search grids: lambda in {0.1, ..., 0.9}; ratio 1..10 by 1 then 15..100 by 5.
std::vector<double> lambda_grid();
std::vector<double> ratio_grid();

} // namespace abltx
