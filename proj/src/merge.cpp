#include "abltx/merge.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <memory>
#include <unordered_map>

#include "abltx/digest.hpp"
#include "abltx/error.hpp"
#include "abltx/parallel.hpp"
#include "abltx/rng.hpp"
#include "envelope.hpp"

namespace abltx {

namespace {

struct SourceCtx {
    std::unique_ptr<CheckpointReader> reader;
    double lambda = 0.0;
    bool full = true;
    std::unordered_map<std::string, std::vector<char>> selected; // module path -> channel bitmap
};

// Per-tensor view of one contributing source.
struct Active {
    std::size_t source = 0;
    const SourceCtx *ctx = nullptr;
    const TensorMeta *meta = nullptr;
    const std::vector<char> *bitmap = nullptr; // nullptr: every element
    // TIES trim rule: keep |delta| bits above `threshold`, plus the first
    // `keep_equal` elements sitting exactly on it.
    bool keep_none = false;
    std::uint64_t threshold = 0;
    std::uint64_t keep_equal = 0;
    std::uint64_t equal_seen = 0;
};

class TensorMerger {
public:
    TensorMerger(const MergePlan &plan, const MergeOptions &options, const CheckpointReader &target,
                 const std::vector<SourceCtx> &sources, CheckpointWriter &writer)
        : plan_(plan), target_(target), sources_(sources), writer_(writer),
          step_(std::max<std::uint64_t>(1, options.chunk_bytes / sizeof(double))) {}

    void run(const TensorMeta &t) {
        const auto n = t.element_count();
        map_ = element_channel_map(target_.index(), t.name);
        const ModuleInfo *module = target_.index().module_of_tensor(t.name);

        std::vector<Active> active;
        for (std::size_t m = 0; m < sources_.size(); ++m) {
            const auto &src = sources_[m];
            Active a{m, &src, &src.reader->index().tensor(t.name)};
            if (!src.full) {
                if (!module || !map_) continue;
                auto it = src.selected.find(module->path);
                if (it == src.selected.end()) continue;
                a.bitmap = &it->second;
            }
            active.push_back(a);
        }

        const auto tsize = dtype_size(t.dtype);
        if (active.empty()) {
            for (std::uint64_t e0 = 0; e0 < n; e0 += step_) {
                const auto len = std::min(step_, n - e0);
                raw_t_.resize(len * tsize);
                target_.read(t, e0 * tsize, raw_t_);
                writer_.write(t.name, e0 * tsize, raw_t_);
            }
            return;
        }

        if (plan_.method == MergeMethod::TIES)
            for (auto &a : active) select_trim(t, a);

        const double dare_scale = plan_.method == MergeMethod::DARE ? dare_rescale(plan_.dare_drop_prob) : 1.0;
        const std::uint32_t lane = fnv1a32(t.name);
        std::vector<double> ties_terms(active.size());

        for (std::uint64_t e0 = 0; e0 < n; e0 += step_) {
            const auto len = std::min(step_, n - e0);
            load(target_, t, e0, len, raw_t_, tgt_);
            acc_.assign(tgt_.begin(), tgt_.end());
            touched_.assign(len, 0);
            src_.resize(active.size());
            for (std::size_t a = 0; a < active.size(); ++a)
                load(*active[a].ctx->reader, *active[a].meta, e0, len, raw_s_, src_[a]);

            if (plan_.method == MergeMethod::TIES) {
                for (std::uint64_t i = 0; i < len; ++i) {
                    const auto g = e0 + i;
                    double sum = 0.0;
                    for (std::size_t a = 0; a < active.size(); ++a) {
                        ties_terms[a] = 0.0;
                        auto &act = active[a];
                        if (!selected(act, g)) continue;
                        const double d = src_[a][i] - tgt_[i];
                        if (!kept(act, std::abs(d))) continue;
                        ties_terms[a] = act.ctx->lambda * d;
                        sum += ties_terms[a];
                    }
                    if (sum == 0.0) continue;
                    double agree = 0.0;
                    std::uint64_t count = 0;
                    for (double term : ties_terms) {
                        if (term != 0.0 && std::signbit(term) == std::signbit(sum)) {
                            agree += term;
                            ++count;
                        }
                    }
                    acc_[i] += agree / static_cast<double>(count);
                    touched_[i] = 1;
                }
            } else {
                for (std::size_t a = 0; a < active.size(); ++a) {
                    const auto &act = active[a];
                    const CounterRng rng(plan_.seed, static_cast<std::uint32_t>(act.source));
                    for (std::uint64_t i = 0; i < len; ++i) {
                        const auto g = e0 + i;
                        if (!selected(act, g)) continue;
                        double d = src_[a][i] - tgt_[i];
                        if (plan_.method == MergeMethod::DARE) {
                            if (rng.uniform(g, lane) < plan_.dare_drop_prob) continue;
                            d *= dare_scale;
                        }
                        const double c = act.ctx->lambda * d;
                        if (c == 0.0) continue;
                        acc_[i] += c;
                        touched_[i] = 1;
                    }
                }
            }

            for (std::uint64_t i = 0; i < len; ++i)
                if (touched_[i]) store_narrowed(t.dtype, acc_[i], raw_t_.data() + i * tsize);
            writer_.write(t.name, e0 * tsize, raw_t_);
        }
    }

private:
    bool selected(const Active &a, std::uint64_t element) const {
        return !a.bitmap || (*a.bitmap)[map_->channel_of(element)];
    }

    static bool kept(Active &a, double magnitude) {
        if (a.keep_none) return false;
        const auto bits = std::bit_cast<std::uint64_t>(magnitude);
        if (bits > a.threshold) return true;
        if (bits == a.threshold) return a.equal_seen++ < a.keep_equal;
        return false;
    }

    static void load(const CheckpointReader &reader, const TensorMeta &meta, std::uint64_t e0, std::uint64_t len,
                     std::vector<std::byte> &raw, std::vector<double> &out) {
        const auto size = dtype_size(meta.dtype);
        raw.resize(len * size);
        out.resize(len);
        reader.read(meta, e0 * size, raw);
        widen(meta.dtype, raw, out);
    }

    // Exact k-th largest |delta| among the source's selected elements, by a
    // four-pass 16-bit radix select over the bit patterns of non-negative
    // doubles (monotone in value). Memory stays at one histogram.
    void select_trim(const TensorMeta &t, Active &a) {
        const auto n = t.element_count();
        std::vector<std::uint64_t> hist(1u << 16);
        std::uint64_t prefix = 0;
        std::uint64_t rank = 0; // 1-based rank from the top still to locate
        for (int pass = 0; pass < 4; ++pass) {
            const int shift = 48 - 16 * pass;
            std::fill(hist.begin(), hist.end(), 0);
            for (std::uint64_t e0 = 0; e0 < n; e0 += step_) {
                const auto len = std::min(step_, n - e0);
                load(target_, t, e0, len, raw_t_, tgt_);
                load(*a.ctx->reader, *a.meta, e0, len, raw_s_, scratch_);
                for (std::uint64_t i = 0; i < len; ++i) {
                    if (!selected(a, e0 + i)) continue;
                    const auto bits = std::bit_cast<std::uint64_t>(std::abs(scratch_[i] - tgt_[i]));
                    if (pass > 0 && (bits >> (shift + 16)) != (prefix >> (shift + 16))) continue;
                    ++hist[(bits >> shift) & 0xffff];
                }
            }
            if (pass == 0) {
                std::uint64_t candidates = 0;
                for (auto h : hist) candidates += h;
                rank = mask_size(candidates, plan_.ties_trim_fraction * 100.0);
                if (rank == 0) {
                    a.keep_none = true;
                    return;
                }
            }
            std::uint64_t above = 0;
            for (std::size_t b = hist.size(); b-- > 0;) {
                if (above + hist[b] >= rank) {
                    prefix |= std::uint64_t{b} << shift;
                    rank -= above;
                    break;
                }
                above += hist[b];
            }
        }
        a.threshold = prefix;
        a.keep_equal = rank;
    }

    const MergePlan &plan_;
    const CheckpointReader &target_;
    const std::vector<SourceCtx> &sources_;
    CheckpointWriter &writer_;
    std::uint64_t step_;
    std::optional<ElementChannelMap> map_;
    std::vector<std::byte> raw_t_, raw_s_;
    std::vector<double> tgt_, acc_, scratch_;
    std::vector<std::vector<double>> src_;
    std::vector<char> touched_;
};

void validate_plan(const MergePlan &plan) {
    if (plan.sources.empty()) throw ContractError("merge plan has no sources");
    for (const auto &s : plan.sources)
        if (!std::isfinite(s.lambda)) throw ContractError("lambda must be finite for " + s.checkpoint.string());
    for (std::size_t i = 0; i < plan.sources.size(); ++i)
        for (std::size_t j = i + 1; j < plan.sources.size(); ++j)
            if (std::filesystem::weakly_canonical(plan.sources[i].checkpoint) ==
                std::filesystem::weakly_canonical(plan.sources[j].checkpoint))
                throw ContractError("source model listed twice: " + plan.sources[i].checkpoint.string() +
                                    " (union its masks first)");
    if (plan.method == MergeMethod::TIES && !(plan.ties_trim_fraction > 0.0 && plan.ties_trim_fraction <= 1.0))
        throw ContractError("ties_trim_fraction must be in (0, 1]");
    if (plan.method == MergeMethod::DARE && !(plan.dare_drop_prob >= 0.0 && plan.dare_drop_prob < 1.0))
        throw ContractError("dare_drop_prob must be in [0, 1)");
}

void check_compatible(const CheckpointIndex &target, const CheckpointIndex &source, const std::string &label) {
    if (target.tensors().size() != source.tensors().size())
        throw ContractError("shape mismatch: " + label + " has " + std::to_string(source.tensors().size()) +
                            " tensors, target has " + std::to_string(target.tensors().size()));
    for (const auto &t : target.tensors()) {
        const auto *s = source.find(t.name);
        if (!s) throw ContractError("shape mismatch: " + label + " lacks tensor " + t.name);
        if (s->shape != t.shape) throw ContractError("shape mismatch: tensor " + t.name + " in " + label);
    }
}

std::unordered_map<std::string, std::vector<char>> mask_bitmaps(const UnifiedMask &mask, const CheckpointIndex &index,
                                                                const std::string &label) {
    if (mask.total_channel_count != index.total_channels())
        throw ContractError("universe mismatch: mask for " + label + " spans " +
                            std::to_string(mask.total_channel_count) + " channels, checkpoint has " +
                            std::to_string(index.total_channels()));
    std::unordered_map<std::string, std::vector<char>> out;
    for (const auto &c : mask.channels) {
        const auto *module = index.find_module(c.module_path);
        if (!module || c.index >= module->n_channels)
            throw ContractError("universe mismatch: mask channel " + c.module_path + "[" + std::to_string(c.index) +
                                "] is not in the checkpoint");
        auto &bits = out[c.module_path];
        if (bits.empty()) bits.assign(module->n_channels, 0);
        bits[c.index] = 1;
    }
    return out;
}

nlohmann::ordered_json method_notes(const MergePlan &plan) {
    auto notes = nlohmann::ordered_json::array();
    notes.push_back("accumulation in f64, one round-to-nearest-even cast to the target dtype; elements without a "
                    "contribution keep the target bytes");
    notes.push_back("a mask selects rows/columns/elements of channel-mapped tensors; a full source covers every tensor");
    switch (plan.method) {
    case MergeMethod::ACT:
    case MergeMethod::TaskArithmetic:
        notes.push_back("overlapping sources sum their lambda-scaled deltas");
        break;
    case MergeMethod::TIES:
        notes.push_back("trim per tensor and source: keep the round_half_up(n*f) largest |delta| among mask-selected "
                        "elements, ties at the threshold kept in element order");
        notes.push_back("sign elected from the sum of lambda-scaled trimmed deltas; a zero sum leaves the element "
                        "unchanged; agreeing lambda-scaled deltas are averaged");
        break;
    case MergeMethod::DARE:
        notes.push_back("element kept iff philox4x32-10 uniform(key=seed, counter=(element, lane=fnv1a32(tensor "
                        "name), stream=source position)) >= p_drop");
        notes.push_back("kept deltas rescaled by 1/(1-p_drop) before lambda scaling");
        break;
    }
    return notes;
}

} // namespace

std::string_view merge_method_name(MergeMethod method) {
    switch (method) {
    case MergeMethod::ACT: return "act";
    case MergeMethod::TaskArithmetic: return "ta";
    case MergeMethod::TIES: return "ties";
    case MergeMethod::DARE: return "dare";
    }
    return "?";
}

std::optional<MergeMethod> parse_merge_method(std::string_view name) {
    if (name == "act") return MergeMethod::ACT;
    if (name == "ta" || name == "task-arithmetic") return MergeMethod::TaskArithmetic;
    if (name == "ties") return MergeMethod::TIES;
    if (name == "dare") return MergeMethod::DARE;
    return std::nullopt;
}

void task_vector(std::span<const double> target, std::span<const double> ability, std::span<double> delta) {
    if (target.size() != ability.size() || delta.size() != target.size())
        throw ContractError("task_vector: shape mismatch");
    for (std::size_t i = 0; i < target.size(); ++i) delta[i] = ability[i] - target[i];
}

double dare_rescale(double drop_prob) {
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw ContractError("dare_drop_prob must be in [0, 1)");
    return 1.0 / (1.0 - drop_prob);
}

MergeResult merge(const MergePlan &plan, const std::filesystem::path &output, const MergeOptions &options) {
    validate_plan(plan);
    const CheckpointReader target(plan.target, options.rules);

    std::vector<SourceCtx> sources;
    std::vector<SourceReport> reports;
    for (const auto &s : plan.sources) {
        SourceCtx ctx;
        ctx.reader = std::make_unique<CheckpointReader>(s.checkpoint, options.rules);
        ctx.lambda = s.lambda;
        check_compatible(target.index(), ctx.reader->index(), s.checkpoint.string());
        SourceReport report{s.checkpoint, s.mask_origin, s.lambda};
        if (s.mask) {
            ctx.full = false;
            ctx.selected = mask_bitmaps(*s.mask, target.index(), s.checkpoint.string());
            const auto cov = mask_coverage(s.mask->channels, target.index());
            report.channels = cov.channels;
            report.channel_fraction = cov.channel_fraction;
            report.param_elements = cov.param_elements;
            report.param_fraction = cov.param_fraction;
        } else {
            report.channels = target.index().total_channels();
            report.channel_fraction = 1.0;
            report.param_elements = target.index().total_elements();
            report.param_fraction = 1.0;
        }
        sources.push_back(std::move(ctx));
        reports.push_back(std::move(report));
    }

    CheckpointWriter writer(output, layout_of(target.index()), target.index().metadata(), options.rules);
    const auto &tensors = target.index().tensors();
    // Largest tensors first so the tail of the schedule stays short.
    std::vector<std::size_t> order(tensors.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return tensors[a].element_count() > tensors[b].element_count();
    });
    parallel_for(order.size(), options.workers, [&](std::size_t i) {
        TensorMerger merger(plan, options, target, sources, writer);
        merger.run(tensors[order[i]]);
    });
    writer.finish();

    MergeResult result;
    result.output = output;
    result.sha256 = to_hex(sha256_file(output));
    result.sources = reports;

    auto &m = result.manifest;
    m["version"] = 1;
    m["method"] = merge_method_name(plan.method);
    m["target"] = plan.target.string();
    m["output"] = output.string();
    m["output_sha256"] = result.sha256;
    m["seed"] = plan.seed;
    if (plan.method == MergeMethod::TIES) m["ties_trim_fraction"] = plan.ties_trim_fraction;
    if (plan.method == MergeMethod::DARE) m["dare_drop_prob"] = plan.dare_drop_prob;
    auto src = nlohmann::ordered_json::array();
    for (const auto &r : reports) {
        nlohmann::ordered_json j;
        j["checkpoint"] = r.checkpoint.string();
        j["mask"] = r.mask_origin;
        j["lambda"] = r.lambda;
        j["transferred_channels"] = r.channels;
        j["channel_fraction"] = r.channel_fraction;
        j["param_elements"] = r.param_elements;
        j["param_fraction"] = r.param_fraction;
        src.push_back(std::move(j));
    }
    m["sources"] = std::move(src);
    m["notes"] = method_notes(plan);
    return result;
}

std::filesystem::path default_manifest_path(const std::filesystem::path &output) {
    return output.string() + ".manifest.json";
}

void write_manifest(const std::filesystem::path &path, const MergeResult &result) {
    detail::write_file_atomic(path, [&](std::ostream &out) { out << result.manifest.dump(2) << '\n'; });
}

std::vector<double> lambda_grid() {
    std::vector<double> grid;
    for (int i = 1; i <= 9; ++i) grid.push_back(i / 10.0);
    return grid;
}

std::vector<double> ratio_grid() {
    std::vector<double> grid;
    for (int p = 1; p <= 10; ++p) grid.push_back(p);
    for (int p = 15; p <= 100; p += 5) grid.push_back(p);
    return grid;
}

} // namespace abltx
