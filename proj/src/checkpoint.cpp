#include "abltx/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "abltx/error.hpp"

namespace abltx {

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

bool ends_with_component(std::string_view path, std::string_view suffix) {
    if (path == suffix) return true;
    return path.size() > suffix.size() && path.ends_with(suffix) &&
           path[path.size() - suffix.size() - 1] == '.';
}

std::uint64_t product(const std::vector<std::uint64_t> &shape) {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const std::vector<std::uint64_t> &shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

struct ParsedHeader {
    std::vector<TensorMeta> tensors;
    ordered_json metadata = ordered_json::object();
    std::uint64_t data_start = 0;
};

ParsedHeader parse_header(const File &file) {
    const std::uint64_t file_size = file.size();
    if (file_size < 8) throw ContractError("malformed header: file shorter than 8 bytes");
    std::byte len_bytes[8];
    file.read_exact(0, len_bytes);
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, len_bytes, 8);
    if (header_len > kMaxHeaderBytes || header_len > file_size - 8)
        throw ContractError("malformed header: header length " + std::to_string(header_len) +
                            " exceeds file size");

    std::string text(header_len, '\0');
    file.read_exact(8, std::as_writable_bytes(std::span(text)));

    // nlohmann silently keeps the last of duplicated keys; catch them here.
    std::set<std::string> seen;
    std::string duplicate;
    ordered_json root;
    try {
        root = ordered_json::parse(text, [&](int depth, ordered_json::parse_event_t event, ordered_json &parsed) {
            if (depth == 1 && event == ordered_json::parse_event_t::key) {
                auto key = parsed.get<std::string>();
                if (!seen.insert(key).second && duplicate.empty()) duplicate = std::move(key);
            }
            return true;
        });
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("malformed header: ") + e.what());
    }
    if (!duplicate.empty()) throw ContractError("duplicate name in checkpoint header: " + duplicate);
    if (!root.is_object()) throw ContractError("malformed header: top level is not an object");

    ParsedHeader out;
    out.data_start = 8 + header_len;
    const std::uint64_t data_size = file_size - out.data_start;
    for (auto it = root.begin(); it != root.end(); ++it) {
        const std::string &name = it.key();
        const auto &entry = it.value();
        if (name == "__metadata__") {
            out.metadata = entry;
            continue;
        }
        try {
            TensorMeta meta;
            meta.name = name;
            const auto dtype_str = entry.at("dtype").get<std::string>();
            auto dtype = parse_dtype(dtype_str);
            if (!dtype) throw ContractError("unsupported dtype " + dtype_str + " for tensor " + name);
            meta.dtype = *dtype;
            for (const auto &d : entry.at("shape")) {
                if (!d.is_number_integer() || d.get<std::int64_t>() < 0)
                    throw ContractError("malformed header: bad shape for tensor " + name);
                meta.shape.push_back(d.get<std::uint64_t>());
            }
            const auto &offsets = entry.at("data_offsets");
            if (!offsets.is_array() || offsets.size() != 2)
                throw ContractError("malformed header: bad data_offsets for tensor " + name);
            const auto begin = offsets[0].get<std::uint64_t>();
            const auto end = offsets[1].get<std::uint64_t>();
            if (end < begin) throw ContractError("malformed header: data_offsets reversed for tensor " + name);
            meta.byte_offset = begin;
            meta.byte_length = end - begin;
            if (meta.byte_length != product(meta.shape) * dtype_size(meta.dtype))
                throw ContractError("malformed header: byte length of tensor " + name +
                                    " does not match shape " + shape_string(meta.shape));
            if (end > data_size) throw ContractError("truncated payload: tensor " + name + " extends past end of file");
            out.tensors.push_back(std::move(meta));
        } catch (const nlohmann::json::exception &e) {
            throw ContractError("malformed header entry for tensor " + name + ": " + e.what());
        }
    }
    std::stable_sort(out.tensors.begin(), out.tensors.end(),
                     [](const TensorMeta &a, const TensorMeta &b) { return a.byte_offset < b.byte_offset; });
    for (std::size_t i = 1; i < out.tensors.size(); ++i) {
        const auto &prev = out.tensors[i - 1];
        if (prev.byte_offset + prev.byte_length > out.tensors[i].byte_offset)
            throw ContractError("malformed header: tensor data of " + prev.name + " and " + out.tensors[i].name +
                                " overlap");
    }
    return out;
}

} // namespace

std::uint64_t TensorMeta::element_count() const { return product(shape); }

std::string_view module_kind_name(ModuleKind kind) {
    switch (kind) {
    case ModuleKind::LinearOut: return "LinearOut";
    case ModuleKind::Embedding: return "Embedding";
    case ModuleKind::Norm: return "Norm";
    case ModuleKind::LmHead: return "LmHead";
    }
    return "?";
}

std::optional<ModuleKind> parse_module_kind(std::string_view name) {
    for (auto k : {ModuleKind::LinearOut, ModuleKind::Embedding, ModuleKind::Norm, ModuleKind::LmHead})
        if (module_kind_name(k) == name) return k;
    return std::nullopt;
}

const ModuleRules &ModuleRules::defaults() {
    static const ModuleRules rules = [] {
        std::vector<ModuleRule> r;
        for (const char *s : {"q_proj", "k_proj", "v_proj", "o_proj", "qkv_proj", "gate_proj", "up_proj", "down_proj",
                              "gate_up_proj", "query_key_value", "dense", "dense_h_to_4h", "dense_4h_to_h", "wq", "wk",
                              "wv", "wo", "w1", "w2", "w3"})
            r.push_back({s, ModuleKind::LinearOut});
        for (const char *s : {"embed_tokens", "embed_in", "tok_embeddings", "wte", "word_embeddings"})
            r.push_back({s, ModuleKind::Embedding});
        for (const char *s : {"input_layernorm", "post_attention_layernorm", "pre_feedforward_layernorm",
                              "post_feedforward_layernorm", "attention_norm", "ffn_norm", "q_norm", "k_norm", "norm",
                              "ln_f", "final_layernorm"})
            r.push_back({s, ModuleKind::Norm});
        for (const char *s : {"lm_head", "embed_out", "output"}) r.push_back({s, ModuleKind::LmHead});
        return ModuleRules(std::move(r));
    }();
    return rules;
}

ModuleRules ModuleRules::from_json(const nlohmann::json &j) {
    std::vector<ModuleRule> rules;
    try {
        for (const auto &item : j.at("rules")) {
            const auto kind_name = item.at("kind").get<std::string>();
            auto kind = parse_module_kind(kind_name);
            if (!kind) throw ContractError("unknown module kind in rule table: " + kind_name);
            rules.push_back({item.at("suffix").get<std::string>(), *kind});
        }
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("malformed rule table: ") + e.what());
    }
    return ModuleRules(std::move(rules));
}

ModuleRules ModuleRules::load(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open rule table '" + path.string() + "'");
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error &e) {
        throw ContractError(std::string("malformed rule table: ") + e.what());
    }
}

std::optional<std::string> ModuleRules::matching_suffix(std::string_view module_path) const {
    const ModuleRule *best = nullptr;
    for (const auto &rule : rules_) {
        if (ends_with_component(module_path, rule.suffix) && (!best || rule.suffix.size() > best->suffix.size()))
            best = &rule;
    }
    if (!best) return std::nullopt;
    return best->suffix;
}

std::optional<ModuleKind> ModuleRules::classify(std::string_view module_path) const {
    const ModuleRule *best = nullptr;
    for (const auto &rule : rules_) {
        if (ends_with_component(module_path, rule.suffix) && (!best || rule.suffix.size() > best->suffix.size()))
            best = &rule;
    }
    if (!best) return std::nullopt;
    return best->kind;
}

std::string module_path_of(std::string_view tensor_name) {
    for (std::string_view suffix : {".weight", ".bias"})
        if (tensor_name.ends_with(suffix)) return std::string(tensor_name.substr(0, tensor_name.size() - suffix.size()));
    return std::string(tensor_name);
}

CheckpointIndex::CheckpointIndex(std::vector<TensorMeta> tensors, ordered_json metadata, const ModuleRules &rules)
    : tensors_(std::move(tensors)), metadata_(std::move(metadata)) {
    if (metadata_.is_null()) metadata_ = ordered_json::object();
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (!by_name_.emplace(tensors_[i].name, i).second)
            throw ContractError("duplicate name in checkpoint: " + tensors_[i].name);
    }

    for (const auto &t : tensors_) {
        const bool is_weight = t.name.ends_with(".weight");
        const bool is_bias = t.name.ends_with(".bias");
        if (!is_weight && !is_bias) continue;
        const std::string path = module_path_of(t.name);
        const auto kind = rules.classify(path);
        if (!kind) continue;
        auto [it, inserted] = module_by_path_.emplace(path, modules_.size());
        if (inserted) {
            ModuleInfo info;
            info.path = path;
            info.kind = *kind;
            info.channel_axis = *kind == ModuleKind::Embedding ? 1 : 0;
            modules_.push_back(std::move(info));
        }
        auto &m = modules_[it->second];
        (is_weight ? m.weight : m.bias.emplace()) = t.name;
    }

    for (auto &m : modules_) {
        if (m.weight.empty()) throw ContractError("module " + m.path + " has a bias but no weight");
        const auto &w = tensor(m.weight);
        const bool want_vector = m.kind == ModuleKind::Norm;
        if (want_vector ? w.shape.size() != 1 : w.shape.size() != 2)
            throw ContractError("tensor " + w.name + " has shape " + shape_string(w.shape) +
                                " incompatible with module kind " + std::string(module_kind_name(m.kind)));
        m.n_channels = w.shape[static_cast<std::size_t>(m.channel_axis)];
        if (m.bias) {
            const auto &b = tensor(*m.bias);
            if (b.shape.size() != 1 || b.shape[0] != m.n_channels)
                throw ContractError("bias " + b.name + " has shape " + shape_string(b.shape) + ", expected [" +
                                    std::to_string(m.n_channels) + "]");
        }
        module_by_tensor_[m.weight] = module_by_path_[m.path];
        if (m.bias) module_by_tensor_[*m.bias] = module_by_path_[m.path];
    }
}

const TensorMeta *CheckpointIndex::find(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    return it == by_name_.end() ? nullptr : &tensors_[it->second];
}

const TensorMeta &CheckpointIndex::tensor(std::string_view name) const {
    if (const auto *t = find(name)) return *t;
    throw ContractError("unknown tensor: " + std::string(name));
}

const ModuleInfo *CheckpointIndex::find_module(std::string_view path) const {
    auto it = module_by_path_.find(std::string(path));
    return it == module_by_path_.end() ? nullptr : &modules_[it->second];
}

const ModuleInfo *CheckpointIndex::module_of_tensor(std::string_view tensor_name) const {
    auto it = module_by_tensor_.find(std::string(tensor_name));
    return it == module_by_tensor_.end() ? nullptr : &modules_[it->second];
}

ModuleTable CheckpointIndex::module_table() const {
    ModuleTable table;
    table.reserve(modules_.size());
    for (const auto &m : modules_) table.push_back({m.path, m.n_channels});
    return table;
}

std::uint64_t CheckpointIndex::data_bytes() const {
    std::uint64_t end = 0;
    for (const auto &t : tensors_) end = std::max(end, t.byte_offset + t.byte_length);
    return end;
}

std::uint64_t CheckpointIndex::total_elements() const {
    std::uint64_t n = 0;
    for (const auto &t : tensors_) n += t.element_count();
    return n;
}

std::uint64_t CheckpointIndex::total_channels() const {
    std::uint64_t n = 0;
    for (const auto &m : modules_) n += m.n_channels;
    return n;
}

std::optional<ElementChannelMap> element_channel_map(const CheckpointIndex &index, std::string_view tensor_name) {
    const auto *module = index.module_of_tensor(tensor_name);
    if (!module) return std::nullopt;
    const auto &t = index.tensor(tensor_name);
    ElementChannelMap map;
    if (t.shape.size() == 1) return map; // norm scale or bias: element i -> channel i
    map.axis = module->channel_axis;
    map.row_len = t.shape[1];
    return map;
}

std::uint64_t ChannelSlice::element_count() const {
    std::uint64_t n = 0;
    for (const auto &p : parts) n += p.elements;
    return n;
}

ChannelSlice channel_slice(const CheckpointIndex &index, const ChannelId &id) {
    const auto *module = index.find_module(id.module_path);
    if (!module) throw ContractError("unknown module: " + id.module_path);
    if (id.index >= module->n_channels)
        throw ContractError("channel index out of range: " + id.module_path + "[" + std::to_string(id.index) + "] >= " +
                            std::to_string(module->n_channels));
    ChannelSlice slice{module->path, id.index, {}};
    const auto &w = index.tensor(module->weight);
    std::uint64_t elements = 1;
    if (w.shape.size() == 2) elements = w.shape[module->channel_axis == 0 ? 1 : 0];
    slice.parts.push_back({w.name, module->channel_axis, id.index, elements});
    if (module->bias) slice.parts.push_back({*module->bias, 0, id.index, 1});
    return slice;
}

CheckpointIndex open_checkpoint(const std::filesystem::path &path, const ModuleRules &rules) {
    File file(path, File::Mode::Read);
    auto parsed = parse_header(file);
    return CheckpointIndex(std::move(parsed.tensors), std::move(parsed.metadata), rules);
}

CheckpointReader::CheckpointReader(const std::filesystem::path &path, const ModuleRules &rules)
    : file_(path, File::Mode::Read) {
    auto parsed = parse_header(file_);
    data_start_ = parsed.data_start;
    index_ = CheckpointIndex(std::move(parsed.tensors), std::move(parsed.metadata), rules);
}

void CheckpointReader::read(const TensorMeta &tensor, std::uint64_t byte_begin, std::span<std::byte> out) const {
    if (byte_begin + out.size() > tensor.byte_length)
        throw ContractError("read past end of tensor " + tensor.name);
    std::uint64_t prev = peak_read_.load();
    while (out.size() > prev && !peak_read_.compare_exchange_weak(prev, out.size())) {
    }
    file_.read_exact(data_start_ + tensor.byte_offset + byte_begin, out);
}

std::vector<std::byte> CheckpointReader::read_tensor(std::string_view name) const {
    const auto &t = index_.tensor(name);
    std::vector<std::byte> buf(t.byte_length);
    read(t, 0, buf);
    return buf;
}

std::vector<double> CheckpointReader::read_widened(std::string_view name) const {
    const auto &t = index_.tensor(name);
    const auto raw = read_tensor(name);
    std::vector<double> out(t.element_count());
    widen(t.dtype, raw, out);
    return out;
}

std::string model_id_of(const CheckpointReader &reader) {
    const auto &meta = reader.index().metadata();
    if (meta.is_object() && meta.contains("model_id") && meta["model_id"].is_string())
        return meta["model_id"].get<std::string>();
    return reader.path().stem().string();
}

std::uint64_t chunk_elements(DType dtype, std::uint64_t chunk_bytes) {
    return std::max<std::uint64_t>(1, chunk_bytes / dtype_size(dtype));
}

std::string encode_header(const std::vector<TensorMeta> &tensors, const ordered_json &metadata) {
    ordered_json root = ordered_json::object();
    if (metadata.is_object() && !metadata.empty()) root["__metadata__"] = metadata;
    for (const auto &t : tensors) {
        ordered_json entry = ordered_json::object();
        entry["dtype"] = dtype_name(t.dtype);
        entry["shape"] = t.shape;
        entry["data_offsets"] = {t.byte_offset, t.byte_offset + t.byte_length};
        root[t.name] = std::move(entry);
    }
    std::string text = root.dump();
    text.append((8 - text.size() % 8) % 8, ' ');
    return text;
}

namespace {

std::vector<TensorMeta> lay_out(const std::vector<TensorSpec> &layout) {
    std::vector<TensorMeta> metas;
    metas.reserve(layout.size());
    std::uint64_t offset = 0;
    for (const auto &spec : layout) {
        TensorMeta m{spec.name, spec.dtype, spec.shape, offset, product(spec.shape) * dtype_size(spec.dtype)};
        offset += m.byte_length;
        metas.push_back(std::move(m));
    }
    return metas;
}

} // namespace

CheckpointWriter::CheckpointWriter(const std::filesystem::path &path, const std::vector<TensorSpec> &layout,
                                   ordered_json metadata, const ModuleRules &rules)
    : out_(path), index_(lay_out(layout), std::move(metadata), rules), written_(layout.size()) {
    const std::string header = encode_header(index_.tensors(), index_.metadata());
    const std::uint64_t header_len = header.size();
    std::byte len_bytes[8];
    std::memcpy(len_bytes, &header_len, 8);
    out_.file().write_at(0, len_bytes);
    out_.file().write_at(8, std::as_bytes(std::span(header)));
    data_start_ = 8 + header_len;
    out_.file().truncate(data_start_ + index_.data_bytes());
}

void CheckpointWriter::write(const TensorMeta &tensor, std::uint64_t byte_begin, std::span<const std::byte> bytes) {
    const auto *planned = index_.find(tensor.name);
    if (!planned) throw ContractError("tensor not in output layout: " + tensor.name);
    if (byte_begin + bytes.size() > planned->byte_length)
        throw ContractError("payload-shape mismatch: write past end of tensor " + tensor.name);
    const auto slot = static_cast<std::size_t>(planned - index_.tensors().data());
    if (written_[slot].fetch_add(bytes.size()) + bytes.size() > planned->byte_length)
        throw ContractError("payload-shape mismatch: tensor " + tensor.name + " written more than once");
    out_.file().write_at(data_start_ + planned->byte_offset + byte_begin, bytes);
}

void CheckpointWriter::write(std::string_view tensor, std::uint64_t byte_begin, std::span<const std::byte> bytes) {
    write(index_.tensor(tensor), byte_begin, bytes);
}

void CheckpointWriter::finish() {
    const auto &tensors = index_.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (written_[i].load() != tensors[i].byte_length)
            throw ContractError("payload-shape mismatch: tensor " + tensors[i].name + " received " +
                                std::to_string(written_[i].load()) + " of " +
                                std::to_string(tensors[i].byte_length) + " bytes");
    }
    out_.commit();
}

std::vector<TensorSpec> layout_of(const CheckpointIndex &index) {
    std::vector<TensorSpec> layout;
    layout.reserve(index.tensors().size());
    for (const auto &t : index.tensors()) layout.push_back({t.name, t.dtype, t.shape});
    return layout;
}

std::filesystem::path write_checkpoint(const std::filesystem::path &path, const std::vector<TensorSpec> &layout,
                                       const ordered_json &metadata, const PayloadSource &source) {
    CheckpointWriter writer(path, layout, metadata, ModuleRules());
    for (const auto &t : writer.index().tensors()) {
        std::uint64_t offset = 0;
        source(t, [&](std::span<const std::byte> bytes) {
            writer.write(t, offset, bytes);
            offset += bytes.size();
        });
        if (offset != t.byte_length)
            throw ContractError("payload-shape mismatch: tensor " + t.name + " produced " + std::to_string(offset) +
                                " of " + std::to_string(t.byte_length) + " bytes");
    }
    writer.finish();
    return path;
}

std::filesystem::path copy_checkpoint(const CheckpointReader &reader, const std::filesystem::path &path,
                                      std::uint64_t chunk_bytes) {
    std::vector<std::byte> buf;
    return write_checkpoint(path, layout_of(reader.index()), reader.index().metadata(),
                            [&](const TensorMeta &t, const auto &emit) {
                                const auto &src = reader.index().tensor(t.name);
                                const std::uint64_t step = chunk_elements(t.dtype, chunk_bytes) * dtype_size(t.dtype);
                                for (std::uint64_t b = 0; b < src.byte_length; b += step) {
                                    buf.resize(std::min(step, src.byte_length - b));
                                    reader.read(src, b, buf);
                                    emit(buf);
                                }
                            });
}

} // namespace abltx
