#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "abltx/channel.hpp"
#include "abltx/checkpoint.hpp"
#include "abltx/dump.hpp"

namespace abltx {

// Miniature decoder: embedding, n_layers blocks of
//   rmsnorm -> q,k,v -> mix -> o -> residual,
//   rmsnorm -> gate,up -> silu(gate)*up -> down -> residual,
// then a final rmsnorm and the head. Tensor names follow the Llama layout
// so the default module rules apply.
struct SynthSpec {
    std::uint64_t n_layers = 2;
    std::uint64_t hidden_dim = 16;
    std::uint64_t intermediate_dim = 32;
    std::uint64_t vocab_size = 64;
    std::uint64_t seed = 0;
    // Off: each token is mixed with itself only, a = v * 2*sigmoid(q*k).
    // On: causal single-head softmax attention across tokens.
    bool token_mixing = false;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json &j);
    bool operator==(const SynthSpec &) const = default;
};

inline constexpr const char *kSynthSpecKey = "abltx.synth_spec";

std::vector<TensorSpec> synth_layout(const SynthSpec &spec);
// {"model_id": ..., "abltx.synth_spec": "<json>"}
nlohmann::ordered_json synth_metadata(const SynthSpec &spec, const std::string &model_id);
std::string default_model_id(const SynthSpec &spec);

// Seeded F32 weights: embedding U(-8, 8), projections U(+-sqrt(3/fan_in)),
// norm scales 1 + 0.1*U(-1, 1). Same spec, same bytes.
void synth_checkpoint(const SynthSpec &spec, const std::filesystem::path &path, std::string model_id = {});

struct PerturbationPlan {
    std::vector<ChannelId> planted_channels;
    double delta_scale = 1.0;
    std::uint64_t seed = 0;
};

// k distinct channels drawn uniformly from the checkpoint's universe,
// canonical order.
std::vector<ChannelId> random_channels(const CheckpointIndex &index, std::uint64_t k, std::uint64_t seed);

// Adds +-delta_scale/sqrt(row length) to every weight element of a planted
// row channel and +-delta_scale to planted column, norm and bias elements.
// Signs come from a counter stream keyed by (seed, tensor, element). Every
// other byte is copied from `base`.
void perturb_checkpoint(const std::filesystem::path &base, const PerturbationPlan &plan,
                        const std::filesystem::path &out, std::string model_id = {},
                        std::uint64_t chunk_bytes = 4ull << 20);

// Holds a small synthetic model in memory (f64) and evaluates it.
class MiniForward {
public:
    explicit MiniForward(const CheckpointReader &checkpoint);

    const SynthSpec &spec() const { return spec_; }
    const ModuleTable &module_table() const { return table_; }
    std::uint64_t frame_size() const { return total_channels(table_); }

    // One frame per token (row-major tokens x frame_size): every module's
    // output channels in module_table order, computed in f64 and rounded
    // to f32. The gate projection is recorded before the nonlinearity.
    std::vector<float> run(std::span<const std::uint32_t> tokens) const;

private:
    const std::vector<double> &weight(const std::string &name) const;

    SynthSpec spec_;
    ModuleTable table_;
    std::unordered_map<std::string, std::vector<double>> weights_;
};

struct ForwardOptions {
    ValueDType value_dtype = ValueDType::F32;
    std::string model_id; // empty: checkpoint metadata model_id, else file stem
};

// Runs the model over `tokens` and writes an ACTD dump.
DumpHeader forward_record(const std::filesystem::path &checkpoint, std::span<const std::uint32_t> tokens,
                          std::span<const TokenRole> roles, const std::filesystem::path &out,
                          const ForwardOptions &options = {});

std::vector<std::uint32_t> random_tokens(std::uint64_t count, std::uint64_t vocab_size, std::uint64_t seed);
// Prompt for positions < answer_from, Answer after.
std::vector<TokenRole> split_roles(std::uint64_t count, std::uint64_t answer_from);

} // namespace abltx
