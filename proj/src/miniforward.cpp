#include "abltx/miniforward.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "abltx/error.hpp"
#include "abltx/rng.hpp"

namespace abltx {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kEmbedScale = 8.0;

std::string layer_prefix(std::uint64_t l) { return "model.layers." + std::to_string(l) + "."; }

double init_value(const SynthSpec &spec, const TensorMeta &t, std::uint64_t element) {
    const CounterRng rng(spec.seed, fnv1a32(t.name));
    const double u = rng.symmetric(element);
    if (t.name == "model.embed_tokens.weight") return kEmbedScale * u;
    if (t.shape.size() == 1) return 1.0 + 0.1 * u;
    return std::sqrt(3.0 / static_cast<double>(t.shape[1])) * u;
}

SynthSpec infer_spec(const CheckpointIndex &index) {
    SynthSpec spec;
    const auto &meta = index.metadata();
    if (meta.is_object() && meta.contains(kSynthSpecKey) && meta[kSynthSpecKey].is_string()) {
        try {
            spec = SynthSpec::from_json(nlohmann::json::parse(meta[kSynthSpecKey].get<std::string>()));
        } catch (const nlohmann::json::exception &e) {
            throw ContractError(std::string("malformed synth spec metadata: ") + e.what());
        }
    } else {
        const auto *embed = index.find("model.embed_tokens.weight");
        const auto *gate = index.find("model.layers.0.mlp.gate_proj.weight");
        if (!embed || !gate || embed->shape.size() != 2 || gate->shape.size() != 2)
            throw ContractError("checkpoint is not a miniforward model");
        spec.vocab_size = embed->shape[0];
        spec.hidden_dim = embed->shape[1];
        spec.intermediate_dim = gate->shape[0];
        spec.n_layers = 0;
        while (index.find(layer_prefix(spec.n_layers) + "mlp.gate_proj.weight")) ++spec.n_layers;
    }
    spec.validate();
    for (const auto &t : synth_layout(spec)) {
        const auto *found = index.find(t.name);
        if (!found || found->shape != t.shape)
            throw ContractError("checkpoint does not match its synth spec at tensor " + t.name);
    }
    return spec;
}

void rmsnorm(const double *x, const std::vector<double> &g, std::uint64_t d, double *y) {
    double ss = 0.0;
    for (std::uint64_t j = 0; j < d; ++j) ss += x[j] * x[j];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps);
    for (std::uint64_t j = 0; j < d; ++j) y[j] = x[j] * r * g[j];
}

void matvec(const std::vector<double> &w, std::uint64_t rows, std::uint64_t cols, const double *x, double *y) {
    for (std::uint64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        const double *row = w.data() + r * cols;
        for (std::uint64_t c = 0; c < cols; ++c) s += row[c] * x[c];
        y[r] = s;
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

void SynthSpec::validate() const {
    if (n_layers < 1 || hidden_dim < 1 || intermediate_dim < 1 || vocab_size < 1)
        throw ContractError("synth spec dimensions must all be >= 1");
    if (vocab_size > (std::uint64_t{1} << 32)) throw ContractError("synth spec vocab_size exceeds u32 token ids");
}

nlohmann::json SynthSpec::to_json() const {
    return {{"n_layers", n_layers},       {"hidden_dim", hidden_dim}, {"intermediate_dim", intermediate_dim},
            {"vocab_size", vocab_size},   {"seed", seed},             {"nonlinearity", "silu"},
            {"token_mixing", token_mixing}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json &j) {
    SynthSpec s;
    try {
        s.n_layers = j.at("n_layers").get<std::uint64_t>();
        s.hidden_dim = j.at("hidden_dim").get<std::uint64_t>();
        s.intermediate_dim = j.at("intermediate_dim").get<std::uint64_t>();
        s.vocab_size = j.at("vocab_size").get<std::uint64_t>();
        s.seed = j.value("seed", std::uint64_t{0});
        s.token_mixing = j.value("token_mixing", false);
        if (j.value("nonlinearity", std::string("silu")) != "silu")
            throw ContractError("unsupported nonlinearity (only silu)");
    } catch (const nlohmann::json::exception &e) {
        throw ContractError(std::string("malformed synth spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::vector<TensorSpec> synth_layout(const SynthSpec &spec) {
    spec.validate();
    const auto d = spec.hidden_dim, i = spec.intermediate_dim;
    std::vector<TensorSpec> out;
    out.push_back({"model.embed_tokens.weight", DType::F32, {spec.vocab_size, d}});
    for (std::uint64_t l = 0; l < spec.n_layers; ++l) {
        const auto p = layer_prefix(l);
        out.push_back({p + "input_layernorm.weight", DType::F32, {d}});
        for (const char *proj : {"q_proj", "k_proj", "v_proj", "o_proj"})
            out.push_back({p + "self_attn." + proj + ".weight", DType::F32, {d, d}});
        out.push_back({p + "post_attention_layernorm.weight", DType::F32, {d}});
        out.push_back({p + "mlp.gate_proj.weight", DType::F32, {i, d}});
        out.push_back({p + "mlp.up_proj.weight", DType::F32, {i, d}});
        out.push_back({p + "mlp.down_proj.weight", DType::F32, {d, i}});
    }
    out.push_back({"model.norm.weight", DType::F32, {d}});
    out.push_back({"lm_head.weight", DType::F32, {spec.vocab_size, d}});
    return out;
}

std::string default_model_id(const SynthSpec &spec) { return "synth-s" + std::to_string(spec.seed); }

nlohmann::ordered_json synth_metadata(const SynthSpec &spec, const std::string &model_id) {
    nlohmann::ordered_json meta;
    meta["model_id"] = model_id.empty() ? default_model_id(spec) : model_id;
    meta[kSynthSpecKey] = spec.to_json().dump();
    return meta;
}

void synth_checkpoint(const SynthSpec &spec, const std::filesystem::path &path, std::string model_id) {
    std::vector<float> buf;
    write_checkpoint(path, synth_layout(spec), synth_metadata(spec, model_id),
                     [&](const TensorMeta &t, const auto &emit) {
                         const auto n = t.element_count();
                         constexpr std::uint64_t kStep = 1 << 16;
                         for (std::uint64_t e0 = 0; e0 < n; e0 += kStep) {
                             const auto len = std::min(kStep, n - e0);
                             buf.resize(len);
                             for (std::uint64_t k = 0; k < len; ++k)
                                 buf[k] = static_cast<float>(init_value(spec, t, e0 + k));
                             emit(std::as_bytes(std::span<const float>(buf)));
                         }
                     });
}

std::vector<ChannelId> random_channels(const CheckpointIndex &index, std::uint64_t k, std::uint64_t seed) {
    const auto table = index.module_table();
    const ChannelLayout layout(table);
    const auto n = layout.size();
    if (k > n) throw ContractError("cannot draw " + std::to_string(k) + " channels from " + std::to_string(n));
    // Floyd's sampling: k draws, each position equally likely.
    const CounterRng rng(seed, fnv1a32("random_channels"));
    std::set<std::uint64_t> picked;
    for (std::uint64_t j = n - k; j < n; ++j) {
        const auto t = rng.bits64(j) % (j + 1);
        if (!picked.insert(t).second) picked.insert(j);
    }
    std::vector<ChannelId> out;
    out.reserve(k);
    for (auto flat : picked) out.push_back(layout.channel_at(flat));
    std::sort(out.begin(), out.end());
    return out;
}

void perturb_checkpoint(const std::filesystem::path &base, const PerturbationPlan &plan,
                        const std::filesystem::path &out, std::string model_id, std::uint64_t chunk_bytes) {
    if (!std::isfinite(plan.delta_scale)) throw ContractError("delta_scale must be finite");
    const CheckpointReader reader(base);
    const auto &index = reader.index();

    std::unordered_map<std::string, std::vector<char>> planted;
    for (const auto &c : plan.planted_channels) {
        const auto *module = index.find_module(c.module_path);
        if (!module || c.index >= module->n_channels)
            throw ContractError("unknown channel " + c.module_path + "[" + std::to_string(c.index) + "]");
        auto &bits = planted[c.module_path];
        if (bits.empty()) bits.assign(module->n_channels, 0);
        bits[c.index] = 1;
    }

    auto metadata = index.metadata();
    if (!model_id.empty()) metadata["model_id"] = model_id;
    CheckpointWriter writer(out, layout_of(index), metadata);
    std::vector<std::byte> raw;
    for (const auto &t : index.tensors()) {
        const auto size = dtype_size(t.dtype);
        const auto step = chunk_elements(t.dtype, chunk_bytes);
        const auto *module = index.module_of_tensor(t.name);
        const auto map = element_channel_map(index, t.name);
        const std::vector<char> *bits = nullptr;
        double magnitude = plan.delta_scale;
        if (module && map) {
            auto it = planted.find(module->path);
            if (it != planted.end()) bits = &it->second;
            const bool row_weight = t.name == module->weight &&
                                    (module->kind == ModuleKind::LinearOut || module->kind == ModuleKind::LmHead);
            if (row_weight) magnitude /= std::sqrt(static_cast<double>(map->row_len));
        }
        const CounterRng rng(plan.seed, fnv1a32(t.name));
        const auto n = t.element_count();
        for (std::uint64_t e0 = 0; e0 < n; e0 += step) {
            const auto len = std::min(step, n - e0);
            raw.resize(len * size);
            reader.read(t, e0 * size, raw);
            if (bits) {
                for (std::uint64_t k = 0; k < len; ++k) {
                    const auto e = e0 + k;
                    if (!(*bits)[map->channel_of(e)]) continue;
                    const double sign = (rng.bits64(e) & 1) ? 1.0 : -1.0;
                    std::byte *p = raw.data() + k * size;
                    store_narrowed(t.dtype, load_widened(t.dtype, p) + sign * magnitude, p);
                }
            }
            writer.write(t.name, e0 * size, raw);
        }
    }
    writer.finish();
}

MiniForward::MiniForward(const CheckpointReader &checkpoint)
    : spec_(infer_spec(checkpoint.index())), table_(checkpoint.index().module_table()) {
    for (const auto &t : synth_layout(spec_)) weights_[t.name] = checkpoint.read_widened(t.name);
}

const std::vector<double> &MiniForward::weight(const std::string &name) const { return weights_.at(name); }

std::vector<float> MiniForward::run(std::span<const std::uint32_t> tokens) const {
    const auto T = tokens.size();
    const auto d = spec_.hidden_dim, I = spec_.intermediate_dim, V = spec_.vocab_size;
    for (auto tok : tokens)
        if (tok >= V)
            throw ContractError("token id " + std::to_string(tok) + " out of range (vocab " + std::to_string(V) +
                                ")");

    std::unordered_map<std::string, std::vector<double>> outputs;
    auto output = [&](const std::string &module, std::uint64_t width) -> std::vector<double> & {
        auto &v = outputs[module];
        v.assign(T * width, 0.0);
        return v;
    };

    std::vector<double> x(T * d);
    {
        const auto &emb = weight("model.embed_tokens.weight");
        auto &rec = output("model.embed_tokens", d);
        for (std::size_t t = 0; t < T; ++t)
            for (std::uint64_t j = 0; j < d; ++j) x[t * d + j] = rec[t * d + j] = emb[tokens[t] * d + j];
    }

    std::vector<double> mixed(T * d), m(I);
    for (std::uint64_t l = 0; l < spec_.n_layers; ++l) {
        const auto p = layer_prefix(l);
        auto &h = output(p + "input_layernorm", d);
        for (std::size_t t = 0; t < T; ++t) rmsnorm(&x[t * d], weight(p + "input_layernorm.weight"), d, &h[t * d]);
        auto &q = output(p + "self_attn.q_proj", d);
        auto &k = output(p + "self_attn.k_proj", d);
        auto &v = output(p + "self_attn.v_proj", d);
        for (std::size_t t = 0; t < T; ++t) {
            matvec(weight(p + "self_attn.q_proj.weight"), d, d, &h[t * d], &q[t * d]);
            matvec(weight(p + "self_attn.k_proj.weight"), d, d, &h[t * d], &k[t * d]);
            matvec(weight(p + "self_attn.v_proj.weight"), d, d, &h[t * d], &v[t * d]);
        }
        if (!spec_.token_mixing) {
            for (std::size_t e = 0; e < T * d; ++e) mixed[e] = v[e] * 2.0 * sigmoid(q[e] * k[e]);
        } else {
            const double scale = 1.0 / std::sqrt(static_cast<double>(d));
            std::vector<double> score(T);
            for (std::size_t t = 0; t < T; ++t) {
                double peak = -INFINITY;
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::uint64_t j = 0; j < d; ++j) dot += q[t * d + j] * k[s * d + j];
                    score[s] = dot * scale;
                    peak = std::max(peak, score[s]);
                }
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) z += score[s] = std::exp(score[s] - peak);
                for (std::uint64_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) acc += score[s] * v[s * d + j];
                    mixed[t * d + j] = acc / z;
                }
            }
        }
        auto &o = output(p + "self_attn.o_proj", d);
        for (std::size_t t = 0; t < T; ++t) {
            matvec(weight(p + "self_attn.o_proj.weight"), d, d, &mixed[t * d], &o[t * d]);
            for (std::uint64_t j = 0; j < d; ++j) x[t * d + j] += o[t * d + j];
        }
        auto &h2 = output(p + "post_attention_layernorm", d);
        auto &g = output(p + "mlp.gate_proj", I);
        auto &u = output(p + "mlp.up_proj", I);
        auto &down = output(p + "mlp.down_proj", d);
        for (std::size_t t = 0; t < T; ++t) {
            rmsnorm(&x[t * d], weight(p + "post_attention_layernorm.weight"), d, &h2[t * d]);
            matvec(weight(p + "mlp.gate_proj.weight"), I, d, &h2[t * d], &g[t * I]);
            matvec(weight(p + "mlp.up_proj.weight"), I, d, &h2[t * d], &u[t * I]);
            for (std::uint64_t c = 0; c < I; ++c) m[c] = g[t * I + c] * sigmoid(g[t * I + c]) * u[t * I + c];
            matvec(weight(p + "mlp.down_proj.weight"), d, I, m.data(), &down[t * d]);
            for (std::uint64_t j = 0; j < d; ++j) x[t * d + j] += down[t * d + j];
        }
    }
    auto &fin = output("model.norm", d);
    auto &logits = output("lm_head", V);
    for (std::size_t t = 0; t < T; ++t) {
        rmsnorm(&x[t * d], weight("model.norm.weight"), d, &fin[t * d]);
        matvec(weight("lm_head.weight"), V, d, &fin[t * d], &logits[t * V]);
    }

    const auto frame = frame_size();
    std::vector<float> frames(T * frame);
    std::uint64_t offset = 0;
    for (const auto &entry : table_) {
        const auto &rec = outputs.at(entry.path);
        for (std::size_t t = 0; t < T; ++t)
            for (std::uint64_t c = 0; c < entry.n_channels; ++c)
                frames[t * frame + offset + c] = static_cast<float>(rec[t * entry.n_channels + c]);
        offset += entry.n_channels;
    }
    return frames;
}

DumpHeader forward_record(const std::filesystem::path &checkpoint, std::span<const std::uint32_t> tokens,
                          std::span<const TokenRole> roles, const std::filesystem::path &out,
                          const ForwardOptions &options) {
    if (roles.size() != tokens.size())
        throw ContractError("token_roles length " + std::to_string(roles.size()) + " does not match " +
                            std::to_string(tokens.size()) + " tokens");
    const CheckpointReader reader(checkpoint);
    const MiniForward model(reader);
    const auto frames = model.run(tokens);

    DumpHeader header;
    header.model_id = options.model_id.empty() ? model_id_of(reader) : options.model_id;
    header.input_set_hash = hash_tokens(tokens);
    header.module_table = model.module_table();
    header.token_count = tokens.size();
    header.token_roles.assign(roles.begin(), roles.end());
    header.value_dtype = options.value_dtype;

    DumpWriter writer(out, header);
    const auto frame = model.frame_size();
    for (std::size_t t = 0; t < tokens.size(); ++t)
        writer.write_frame(std::span<const float>(frames).subspan(t * frame, frame));
    writer.finish();
    return header;
}

std::vector<std::uint32_t> random_tokens(std::uint64_t count, std::uint64_t vocab_size, std::uint64_t seed) {
    if (vocab_size == 0) throw ContractError("vocab_size must be >= 1");
    const CounterRng rng(seed, fnv1a32("random_tokens"));
    std::vector<std::uint32_t> out(count);
    for (std::uint64_t i = 0; i < count; ++i) out[i] = static_cast<std::uint32_t>(rng.bits64(i) % vocab_size);
    return out;
}

std::vector<TokenRole> split_roles(std::uint64_t count, std::uint64_t answer_from) {
    std::vector<TokenRole> out(count, TokenRole::Prompt);
    for (std::uint64_t i = answer_from; i < count; ++i) out[i] = TokenRole::Answer;
    return out;
}

} // namespace abltx
