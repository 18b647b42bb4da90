#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "abltx/channel.hpp"
#include "abltx/dtype.hpp"
#include "abltx/io.hpp"

namespace abltx {

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    std::uint64_t byte_offset = 0; // relative to the start of the data section
    std::uint64_t byte_length = 0;

    std::uint64_t element_count() const;
    bool operator==(const TensorMeta &) const = default;
};

// A tensor as described before it has a location in a file.
struct TensorSpec {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
};

enum class ModuleKind { LinearOut, Embedding, Norm, LmHead };

std::string_view module_kind_name(ModuleKind kind);
std::optional<ModuleKind> parse_module_kind(std::string_view name);

// Channel-mapped module. LinearOut/LmHead channels are rows of the 2-D
// weight, Embedding channels are its columns, Norm channels are elements of
// the scale vector. A bias, when present, contributes element i to channel i.
struct ModuleInfo {
    std::string path;
    ModuleKind kind = ModuleKind::LinearOut;
    int channel_axis = 0;
    std::uint64_t n_channels = 0;
    std::string weight;
    std::optional<std::string> bias;
};

struct ModuleRule {
    std::string suffix; // last dotted component(s) of the module path
    ModuleKind kind;
};

// Suffix -> ModuleKind table used to recognise module paths.
class ModuleRules {
public:
    ModuleRules() = default;
    explicit ModuleRules(std::vector<ModuleRule> rules) : rules_(std::move(rules)) {}

    // Common decoder naming schemes (Llama/Qwen/Mistral, GPT-NeoX, Llama
    // reference checkpoints).
    static const ModuleRules &defaults();
    // {"rules": [{"suffix": "...", "kind": "LinearOut"}, ...]}
    static ModuleRules from_json(const nlohmann::json &j);
    static ModuleRules load(const std::filesystem::path &path);

    // Longest matching suffix wins.
    std::optional<ModuleKind> classify(std::string_view module_path) const;
    // Label of the matching rule, used for module-type grouping.
    std::optional<std::string> matching_suffix(std::string_view module_path) const;
    const std::vector<ModuleRule> &rules() const { return rules_; }

private:
    std::vector<ModuleRule> rules_;
};

// Strips a trailing ".weight" / ".bias".
std::string module_path_of(std::string_view tensor_name);

class CheckpointIndex {
public:
    CheckpointIndex() = default;
    // Builds the module table from `tensors` (already laid out).
    CheckpointIndex(std::vector<TensorMeta> tensors, nlohmann::ordered_json metadata,
                    const ModuleRules &rules);

    const std::vector<TensorMeta> &tensors() const { return tensors_; }
    const TensorMeta *find(std::string_view name) const;
    const TensorMeta &tensor(std::string_view name) const;

    const std::vector<ModuleInfo> &modules() const { return modules_; }
    const ModuleInfo *find_module(std::string_view path) const;
    // Module a tensor belongs to (weight or bias), or nullptr when unmapped.
    const ModuleInfo *module_of_tensor(std::string_view tensor_name) const;
    ModuleTable module_table() const;

    const nlohmann::ordered_json &metadata() const { return metadata_; }
    std::uint64_t data_bytes() const;
    std::uint64_t total_elements() const;
    std::uint64_t total_channels() const;

    bool operator==(const CheckpointIndex &other) const {
        return tensors_ == other.tensors_ && metadata_ == other.metadata_;
    }

private:
    std::vector<TensorMeta> tensors_;
    std::unordered_map<std::string, std::size_t> by_name_;
    nlohmann::ordered_json metadata_;
    std::vector<ModuleInfo> modules_;
    std::unordered_map<std::string, std::size_t> module_by_path_;
    std::unordered_map<std::string, std::size_t> module_by_tensor_;
};

// Channel owner of each element of one tensor, in row-major element order.
struct ElementChannelMap {
    int axis = 0;             // 0: rows (or 1-D elements), 1: columns
    std::uint64_t row_len = 1; // product of trailing dims

    std::uint64_t channel_of(std::uint64_t element) const {
        return axis == 0 ? element / row_len : element % row_len;
    }
};

std::optional<ElementChannelMap> element_channel_map(const CheckpointIndex &index,
                                                     std::string_view tensor_name);

struct SlicePart {
    std::string tensor;
    int axis = 0;
    std::uint64_t index = 0;
    std::uint64_t elements = 0;
};

struct ChannelSlice {
    std::string module_path;
    std::uint64_t channel = 0;
    std::vector<SlicePart> parts; // weight first, then bias

    std::uint64_t element_count() const;
};

ChannelSlice channel_slice(const CheckpointIndex &index, const ChannelId &id);

// Reads the header only; no payload is touched.
CheckpointIndex open_checkpoint(const std::filesystem::path &path,
                                const ModuleRules &rules = ModuleRules::defaults());

// Thread-safe positional reader. Every read is a bounded copy into a caller
// buffer; the largest single request is tracked so tests can assert the
// streaming bound.
class CheckpointReader {
public:
    explicit CheckpointReader(const std::filesystem::path &path,
                              const ModuleRules &rules = ModuleRules::defaults());

    const CheckpointIndex &index() const { return index_; }
    const std::filesystem::path &path() const { return file_.path(); }

    // Reads bytes [byte_begin, byte_begin + out.size()) of one tensor.
    void read(const TensorMeta &tensor, std::uint64_t byte_begin, std::span<std::byte> out) const;
    std::vector<std::byte> read_tensor(std::string_view name) const;
    std::vector<double> read_widened(std::string_view name) const;

    std::uint64_t peak_read_bytes() const { return peak_read_.load(); }
    void reset_peak() { peak_read_ = 0; }

private:
    File file_;
    CheckpointIndex index_;
    std::uint64_t data_start_ = 0;
    mutable std::atomic<std::uint64_t> peak_read_{0};
};

// __metadata__.model_id when present, else the file stem.
std::string model_id_of(const CheckpointReader &reader);

// Elements per chunk for a tensor of `dtype` under a byte budget (>= 1).
std::uint64_t chunk_elements(DType dtype, std::uint64_t chunk_bytes);

// Streaming writer. The layout (and so the header) is fixed up front; tensor
// payloads are then written positionally, in any order, from any thread, as
// long as regions do not overlap. finish() checks every tensor was fully
// written exactly once, then atomically renames the file into place.
class CheckpointWriter {
public:
    CheckpointWriter(const std::filesystem::path &path, const std::vector<TensorSpec> &layout,
                     nlohmann::ordered_json metadata = nlohmann::ordered_json::object(),
                     const ModuleRules &rules = ModuleRules::defaults());

    const CheckpointIndex &index() const { return index_; }
    void write(const TensorMeta &tensor, std::uint64_t byte_begin, std::span<const std::byte> bytes);
    void write(std::string_view tensor, std::uint64_t byte_begin, std::span<const std::byte> bytes);
    void finish();

private:
    AtomicOutput out_;
    CheckpointIndex index_;
    std::uint64_t data_start_ = 0;
    std::vector<std::atomic<std::uint64_t>> written_;
};

std::vector<TensorSpec> layout_of(const CheckpointIndex &index);

// Serialized safetensors header (without the 8-byte length prefix), padded
// with spaces to an 8-byte boundary.
std::string encode_header(const std::vector<TensorMeta> &tensors, const nlohmann::ordered_json &metadata);

// Sequential payload producer: called once per tensor in layout order and
// must emit exactly byte_length bytes through `emit`.
using PayloadSource =
    std::function<void(const TensorMeta &, const std::function<void(std::span<const std::byte>)> &emit)>;

std::filesystem::path write_checkpoint(const std::filesystem::path &path, const std::vector<TensorSpec> &layout,
                                       const nlohmann::ordered_json &metadata, const PayloadSource &source);

// Streams every tensor of `reader` into `path` in chunks of at most
// chunk_bytes.
std::filesystem::path copy_checkpoint(const CheckpointReader &reader, const std::filesystem::path &path,
                                      std::uint64_t chunk_bytes);

} // namespace abltx
