#include "cli.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "abltx/checkpoint.hpp"
#include "abltx/digest.hpp"
#include "abltx/dump.hpp"
#include "abltx/error.hpp"
#include "abltx/mask.hpp"
#include "abltx/merge.hpp"
#include "abltx/miniforward.hpp"
#include "abltx/stats.hpp"

namespace abltx::cli {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum class Level { Debug, Info, Warn, Error };

std::optional<Level> parse_level(std::string_view s) {
    if (s == "debug") return Level::Debug;
    if (s == "info") return Level::Info;
    if (s == "warn") return Level::Warn;
    if (s == "error") return Level::Error;
    return std::nullopt;
}

std::string_view level_name(Level l) {
    switch (l) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warn: return "warn";
    case Level::Error: return "error";
    }
    return "?";
}

// Line-delimited JSON on stderr.
class Logger {
public:
    void set_level(Level level) { level_ = level; }
    void set_command(std::string cmd) { cmd_ = std::move(cmd); }

    void log(Level level, std::string_view event, json fields = json::object()) const {
        if (level < level_) return;
        json line;
        line["level"] = level_name(level);
        if (!cmd_.empty()) line["cmd"] = cmd_;
        line["event"] = event;
        line["elapsed_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - start_)
                                 .count();
        for (auto &[k, v] : fields.items()) line[k] = v;
        std::cerr << line.dump() << '\n';
    }

private:
    Level level_ = Level::Info;
    std::string cmd_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct Globals {
    unsigned workers = std::max(1u, std::thread::hardware_concurrency());
    std::uint64_t chunk_bytes = 4ull << 20;
    std::string log_level = "info";
    std::string config;
    std::string rules;
};

struct Context {
    Globals globals;
    Logger log;
    ModuleRules rules = ModuleRules::defaults();
};

// Option resolution: command line, then ABLTX_<FLAG>, then the JSON config
// (a per-subcommand section wins over top-level keys).
class Resolver {
public:
    Resolver(const json &config, std::string section) : config_(config), section_(std::move(section)) {}

    json apply(CLI::App &app) const {
        json echo = json::object();
        for (CLI::Option *opt : app.get_options()) {
            if (opt->get_lnames().empty()) continue;
            const std::string name = opt->get_lnames().front();
            if (name == "help" || name == "help-all") continue;
            std::string source = "cli";
            if (opt->count() == 0) {
                source = "default";
                if (auto env = from_env(name)) {
                    opt->add_result(*env);
                    source = "env";
                } else if (auto values = from_config(name)) {
                    for (const auto &v : *values) opt->add_result(v);
                    source = "config";
                }
                if (source != "default") opt->run_callback();
            }
            json value;
            if (opt->count() > 0 || source != "default") {
                const auto &results = opt->results();
                value = results.size() == 1 && opt->get_expected_max() <= 1 ? json(results.front()) : json(results);
            } else {
                value = opt->get_default_str();
            }
            echo[name] = {{"value", value}, {"source", source}};
        }
        return echo;
    }

private:
    static std::optional<std::string> from_env(const std::string &name) {
        std::string var = "ABLTX_";
        for (char c : name) var.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
        const char *v = std::getenv(var.c_str());
        if (!v) return std::nullopt;
        return std::string(v);
    }

    std::optional<std::vector<std::string>> from_config(const std::string &name) const {
        if (!config_.is_object()) return std::nullopt;
        if (!section_.empty() && config_.contains(section_) && config_[section_].is_object())
            if (auto v = lookup(config_[section_], name)) return v;
        return lookup(config_, name);
    }

    static std::optional<std::vector<std::string>> lookup(const json &obj, const std::string &name) {
        std::string underscored = name;
        std::replace(underscored.begin(), underscored.end(), '-', '_');
        for (const auto &key : {name, underscored}) {
            if (!obj.contains(key)) continue;
            const auto &v = obj[key];
            if (v.is_object()) continue;
            std::vector<std::string> out;
            if (v.is_array())
                for (const auto &item : v) out.push_back(scalar(item));
            else
                out.push_back(scalar(v));
            return out;
        }
        return std::nullopt;
    }

    static std::string scalar(const json &v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number() || v.is_null()) return v.dump();
        throw ContractError("config values must be scalars or arrays of scalars");
    }

    const json &config_;
    std::string section_;
};

void require(const std::string &value, const std::string &flag) {
    if (value.empty()) throw ContractError("missing required option " + flag);
}

std::vector<std::string> split_commas(const std::string &text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::optional<double> parse_double(std::string_view text) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
    return v;
}

json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error &e) {
        throw ContractError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

void write_text(const fs::path &path, const std::string &text) {
    const fs::path partial = path.string() + ".partial";
    {
        std::ofstream out(partial, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create '" + partial.string() + "'");
        out << text;
        out.flush();
        if (!out) throw IoError("write failed for '" + partial.string() + "'");
    }
    std::error_code ec;
    fs::rename(partial, path, ec);
    if (ec) throw IoError("cannot rename '" + partial.string() + "': " + ec.message());
}

// Reads back a text output and checks it has the expected line count.
void check_text_output(const fs::path &path, std::size_t lines) {
    std::ifstream in(path);
    if (!in) throw IoError("output '" + path.string() + "' vanished");
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    if (n != lines) throw IoError("output '" + path.string() + "' is incomplete");
}

std::vector<ChannelId> channels_from(const json &j) {
    const json &list = j.is_object() ? j.at("planted_channels") : j;
    std::vector<ChannelId> out;
    for (const auto &c : list) {
        if (!c.is_array() || c.size() != 2) throw ContractError("channel entries must be [module_path, index]");
        out.push_back({c[0].get<std::string>(), c[1].get<std::uint64_t>()});
    }
    return out;
}

json channels_json(const std::vector<ChannelId> &channels) {
    json arr = json::array();
    for (const auto &c : channels) arr.push_back({c.module_path, c.index});
    return arr;
}

MergeSource parse_source(const std::string &text, double default_lambda) {
    MergeSource src;
    std::string rest = text;
    src.lambda = default_lambda;
    auto colon = rest.rfind(':');
    if (colon != std::string::npos) {
        if (auto lambda = parse_double(std::string_view(rest).substr(colon + 1))) {
            src.lambda = *lambda;
            rest.resize(colon);
            colon = rest.rfind(':');
        }
    }
    if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size())
        throw ContractError("malformed --source '" + text + "' (expected <ckpt>:<mask|full>:<lambda>)");
    src.checkpoint = rest.substr(0, colon);
    src.mask_origin = rest.substr(colon + 1);
    if (src.mask_origin != "full") src.mask = read_mask_as_unified(src.mask_origin);
    return src;
}

// ---- subcommands -----------------------------------------------------------

struct DiffArgs {
    std::string dump_a, dump_b, roles = "answer", out;
};

int cmd_diff(Context &ctx, const DiffArgs &a) {
    require(a.dump_a, "--dump-a");
    require(a.dump_b, "--dump-b");
    require(a.out, "--out");
    const auto filter = parse_role_filter(a.roles);
    if (!filter) throw ContractError("unknown --roles '" + a.roles + "' (all|answer|prompt)");
    const auto diff = reduce_pair(a.dump_a, a.dump_b, *filter, ctx.globals.workers);
    if (!diff.token_count.empty() && diff.token_count.front() == 0)
        throw ContractError("empty role filter: no '" + a.roles + "' tokens in the dump pair");
    write_diff(a.out, diff);
    if (!(read_diff(a.out) == diff)) throw IoError("diff output did not read back identically");
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"channels", diff.sum_abs_diff.size()},
                                       {"tokens", diff.token_count.empty() ? 0 : diff.token_count.front()}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct StatsArgs {
    std::string diff, ability_tag, out;
};

int cmd_stats(Context &ctx, const StatsArgs &a) {
    require(a.diff, "--diff");
    require(a.out, "--out");
    const auto diff = read_diff(a.diff);
    const auto tag = a.ability_tag.empty() ? diff.model_a : a.ability_tag;
    const auto stats = activation_stats(diff, tag);
    write_stats(a.out, stats);
    if (!(read_stats(a.out) == stats)) throw IoError("stats output did not read back identically");
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"channels", stats.size()}, {"ability_tag", tag}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct WeightDiffArgs {
    std::string target, ability, ability_tag, out;
};

int cmd_weightdiff(Context &ctx, const WeightDiffArgs &a) {
    require(a.target, "--target");
    require(a.ability, "--ability");
    require(a.out, "--out");
    const CheckpointReader target(a.target, ctx.rules);
    const CheckpointReader ability(a.ability, ctx.rules);
    const auto tag = a.ability_tag.empty() ? model_id_of(ability) : a.ability_tag;
    const auto stats = weight_stats(target, ability, tag, {ctx.globals.workers, ctx.globals.chunk_bytes});
    write_stats(a.out, stats);
    if (!(read_stats(a.out) == stats)) throw IoError("stats output did not read back identically");
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"channels", stats.size()}, {"ability_tag", tag}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct CcdfArgs {
    std::string stats, group = "global", thresholds, out;
    std::size_t points = 64;
};

int cmd_ccdf(Context &ctx, const CcdfArgs &a) {
    require(a.stats, "--stats");
    require(a.out, "--out");
    const auto grouping = parse_grouping(a.group);
    if (!grouping) throw ContractError("unknown --group '" + a.group + "' (global|layer|module)");
    const auto stats = read_stats(a.stats);
    std::vector<double> thresholds;
    if (a.thresholds.empty()) {
        thresholds = auto_thresholds(stats, a.points);
    } else {
        for (const auto &item : split_commas(a.thresholds)) {
            auto v = parse_double(item);
            if (!v) throw ContractError("malformed threshold '" + item + "'");
            thresholds.push_back(*v);
        }
    }
    const auto curves = ccdf(stats, *grouping, thresholds, ctx.rules);
    std::ostringstream csv;
    write_ccdf_csv(csv, curves);
    write_text(a.out, csv.str());
    std::size_t rows = 1;
    for (const auto &c : curves) rows += c.points.size();
    check_text_output(a.out, rows);
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"groups", curves.size()}, {"thresholds", thresholds.size()}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct MaskArgs {
    std::string stats, out;
    double p = 1.0;
};

int cmd_mask(Context &ctx, const MaskArgs &a) {
    require(a.stats, "--stats");
    require(a.out, "--out");
    const auto mask = build_mask(read_stats(a.stats), a.p);
    write_mask(a.out, mask);
    if (!(read_mask(a.out) == mask)) throw IoError("mask output did not read back identically");
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"p", a.p}, {"channels", mask.channels.size()},
                                       {"universe", mask.total_channel_count}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct UnionArgs {
    std::vector<std::string> masks;
    std::string out, checkpoint;
};

int cmd_union(Context &ctx, const UnionArgs &a) {
    if (a.masks.empty()) throw ContractError("missing required option --mask");
    require(a.out, "--out");
    std::vector<AbilityMask> masks;
    for (const auto &m : a.masks) masks.push_back(read_mask(m));
    const auto unified = union_masks(masks);
    write_unified(a.out, unified);
    if (!(read_unified(a.out) == unified)) throw IoError("unified mask did not read back identically");
    json fields = {{"path", a.out}, {"channels", unified.channels.size()}, {"constituents", unified.constituent_tags}};
    if (!a.checkpoint.empty()) {
        const auto cov = mask_coverage(unified.channels, open_checkpoint(a.checkpoint, ctx.rules));
        json report = {{"mask", a.out},
                       {"channels", cov.channels},
                       {"channel_fraction", cov.channel_fraction},
                       {"param_elements", cov.param_elements},
                       {"param_fraction", cov.param_fraction}};
        std::cout << report.dump() << '\n';
        fields["param_fraction"] = cov.param_fraction;
    } else {
        std::cout << a.out << '\n';
    }
    ctx.log.log(Level::Info, "wrote", fields);
    return kExitOk;
}

struct OverlapArgs {
    std::vector<std::string> masks;
    std::string format = "csv", out;
    bool jaccard = false;
    int decimals = 1;
};

int cmd_overlap(Context &ctx, const OverlapArgs &a) {
    if (a.masks.empty()) throw ContractError("missing required option --mask");
    std::vector<UnifiedMask> masks;
    for (const auto &m : a.masks) masks.push_back(read_mask_as_unified(m));
    std::vector<MaskView> views;
    for (const auto &m : masks) views.push_back(view_of(m));
    std::ostringstream text;
    std::size_t rows = 0;
    if (a.format == "csv") {
        if (a.decimals < 0 || a.decimals > 17) throw ContractError("--decimals must be in [0, 17]");
        write_overlap_csv(text, views, {a.decimals, a.jaccard});
        rows = 1 + views.size() * views.size();
    } else if (a.format == "table") {
        write_overlap_table(text, views);
        rows = 1 + views.size();
    } else {
        throw ContractError("unknown --format '" + a.format + "' (csv|table)");
    }
    if (a.out.empty() || a.out == "-") {
        std::cout << text.str();
    } else {
        write_text(a.out, text.str());
        check_text_output(a.out, rows);
        std::cout << a.out << '\n';
    }
    json baseline = json::array();
    for (const auto &m : masks)
        baseline.push_back(m.total_channel_count ? 100.0 * static_cast<double>(m.channels.size()) /
                                                       static_cast<double>(m.total_channel_count)
                                                 : 0.0);
    ctx.log.log(Level::Info, "overlap", {{"masks", views.size()}, {"random_baseline_percent", baseline}});
    return kExitOk;
}

struct MergeArgs {
    std::string target, method = "act", out, manifest;
    std::vector<std::string> sources;
    double lambda = 0.4;
    std::optional<double> lambda_all;
    double ties_trim = 0.2, dare_drop = 0.9;
    std::uint64_t seed = 0;
};

int cmd_merge(Context &ctx, const MergeArgs &a) {
    require(a.target, "--target");
    require(a.out, "--out");
    if (a.sources.empty()) throw ContractError("missing required option --source");
    const auto method = parse_merge_method(a.method);
    if (!method) throw ContractError("unknown --method '" + a.method + "' (act|ta|ties|dare)");
    MergePlan plan;
    plan.target = a.target;
    plan.method = *method;
    plan.ties_trim_fraction = a.ties_trim;
    plan.dare_drop_prob = a.dare_drop;
    plan.seed = a.seed;
    for (const auto &s : a.sources) {
        plan.sources.push_back(parse_source(s, a.lambda));
        if (a.lambda_all) plan.sources.back().lambda = *a.lambda_all;
    }
    MergeOptions options;
    options.workers = ctx.globals.workers;
    options.chunk_bytes = ctx.globals.chunk_bytes;
    options.rules = ctx.rules;
    const auto result = merge(plan, a.out, options);
    const fs::path manifest = a.manifest.empty() ? default_manifest_path(a.out) : fs::path(a.manifest);
    write_manifest(manifest, result);

    open_checkpoint(a.out, ctx.rules);
    if (read_json(manifest).at("output_sha256") != result.sha256)
        throw IoError("manifest does not match the written checkpoint");
    json lambdas = json::array();
    for (const auto &s : plan.sources) lambdas.push_back(s.lambda);
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"manifest", manifest.string()}, {"method", a.method},
                                       {"lambda", lambdas}, {"sha256", result.sha256}});
    std::cout << manifest.string() << '\n';
    return kExitOk;
}

struct SynthArgs {
    SynthSpec spec;
    std::string spec_file, model_id, out;
};

int cmd_synth(Context &ctx, SynthArgs a) {
    require(a.out, "--out");
    if (!a.spec_file.empty()) a.spec = SynthSpec::from_json(read_json(a.spec_file));
    a.spec.validate();
    synth_checkpoint(a.spec, a.out, a.model_id);
    const auto index = open_checkpoint(a.out, ctx.rules);
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"channels", index.total_channels()},
                                       {"elements", index.total_elements()}, {"spec", a.spec.to_json()}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct PerturbArgs {
    std::string base, channels, model_id, out, planted_out;
    std::uint64_t random_k = 0, seed = 0;
    double delta = 1.0;
};

int cmd_perturb(Context &ctx, const PerturbArgs &a) {
    require(a.base, "--base");
    require(a.out, "--out");
    if (!a.channels.empty() && a.random_k > 0)
        throw ContractError("--channels and --random-k are mutually exclusive");
    PerturbationPlan plan;
    plan.delta_scale = a.delta;
    plan.seed = a.seed;
    if (!a.channels.empty()) plan.planted_channels = channels_from(read_json(a.channels));
    else if (a.random_k > 0) plan.planted_channels = random_channels(open_checkpoint(a.base), a.random_k, a.seed);
    std::sort(plan.planted_channels.begin(), plan.planted_channels.end());
    perturb_checkpoint(a.base, plan, a.out, a.model_id, ctx.globals.chunk_bytes);
    open_checkpoint(a.out, ctx.rules);
    if (!a.planted_out.empty()) {
        json j = {{"planted_channels", channels_json(plan.planted_channels)},
                  {"delta_scale", plan.delta_scale},
                  {"seed", plan.seed}};
        write_text(a.planted_out, j.dump() + "\n");
        channels_from(read_json(a.planted_out));
    }
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"planted", plan.planted_channels.size()}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct ForwardArgs {
    std::string checkpoint, tokens, dtype = "f32", model_id, out;
    std::uint64_t random_tokens = 0, token_seed = 0, answer_from = 0;
};

int cmd_forward(Context &ctx, const ForwardArgs &a) {
    require(a.checkpoint, "--checkpoint");
    require(a.out, "--out");
    std::vector<std::uint32_t> tokens;
    std::vector<TokenRole> roles;
    if (!a.tokens.empty()) {
        const auto j = read_json(a.tokens);
        try {
            const json &ids = j.is_object() ? j.at("tokens") : j;
            tokens = ids.get<std::vector<std::uint32_t>>();
            if (j.is_object() && j.contains("roles")) roles = decode_roles(j["roles"].get<std::string>());
            else roles = split_roles(tokens.size(), a.answer_from);
        } catch (const json::exception &e) {
            throw ContractError("malformed token file: " + std::string(e.what()));
        }
    } else if (a.random_tokens > 0) {
        const auto index = open_checkpoint(a.checkpoint, ctx.rules);
        const auto *embed = index.find("model.embed_tokens.weight");
        if (!embed) throw ContractError("checkpoint is not a miniforward model");
        tokens = random_tokens(a.random_tokens, embed->shape.at(0), a.token_seed);
        roles = split_roles(tokens.size(), a.answer_from);
    } else {
        throw ContractError("give --tokens or --random-tokens");
    }
    ForwardOptions options;
    options.model_id = a.model_id;
    if (a.dtype == "f32") options.value_dtype = ValueDType::F32;
    else if (a.dtype == "f16") options.value_dtype = ValueDType::F16;
    else throw ContractError("unknown --dtype '" + a.dtype + "' (f32|f16)");
    const auto header = forward_record(a.checkpoint, tokens, roles, a.out, options);

    DumpReader check(a.out);
    while (check.next()) {
    }
    if (check.frames_read() != header.token_count) throw IoError("dump did not read back completely");
    ctx.log.log(Level::Info, "wrote", {{"path", a.out}, {"tokens", header.token_count},
                                       {"frame_size", header.frame_size()},
                                       {"input_set_hash", to_hex(header.input_set_hash)}});
    std::cout << a.out << '\n';
    return kExitOk;
}

struct RecallArgs {
    std::string mask, planted, stats;
};

int cmd_recall(Context &ctx, const RecallArgs &a) {
    require(a.mask, "--mask");
    require(a.planted, "--planted");
    const auto mask = read_mask_as_unified(a.mask);
    const std::set<ChannelId> selected(mask.channels.begin(), mask.channels.end());
    const auto planted = channels_from(read_json(a.planted));
    std::optional<ChannelStatVector> stats;
    if (!a.stats.empty()) stats = read_stats(a.stats);
    std::uint64_t effective = 0, recovered = 0;
    json missed = json::array();
    for (const auto &c : planted) {
        if (stats && !(stats->at(c) > 0.0)) continue;
        ++effective;
        if (selected.count(c)) ++recovered;
        else missed.push_back({c.module_path, c.index});
    }
    json report = {{"planted", planted.size()},
                   {"effective", effective},
                   {"recovered", recovered},
                   {"recall", effective ? static_cast<double>(recovered) / static_cast<double>(effective) : 1.0},
                   {"mask_channels", mask.channels.size()},
                   {"missed", missed}};
    std::cout << report.dump() << '\n';
    ctx.log.log(Level::Info, "recall", {{"recovered", recovered}, {"effective", effective}});
    return kExitOk;
}

} // namespace

int run(int argc, const char *const *argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run(args);
}

int run(const std::vector<std::string> &args) {
    Context ctx;
    CLI::App app{"Activation-guided channel-wise ability transfer toolkit", "abltx"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_help_all_flag("--help-all", "Help for every subcommand");
    auto &g = ctx.globals;
    app.add_option("--workers", g.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--chunk-bytes", g.chunk_bytes, "Streaming buffer budget in bytes")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--log-level", g.log_level, "debug|info|warn|error")->capture_default_str();
    app.add_option("--config", g.config, "JSON config file mirroring flag names");
    app.add_option("--rules", g.rules, "JSON module rule table ({\"rules\":[{\"suffix\",\"kind\"}]})");

    DiffArgs diff;
    auto *s_diff = app.add_subcommand("diff", "Reduce a dump pair to per-channel |a-b| sums (ACTR)");
    s_diff->add_option("--dump-a", diff.dump_a, "Ability-model dump");
    s_diff->add_option("--dump-b", diff.dump_b, "Reference-model dump");
    s_diff->add_option("--roles", diff.roles, "Token filter: all|answer|prompt")->capture_default_str();
    s_diff->add_option("--out", diff.out, "Output ACTR file");

    StatsArgs stats;
    auto *s_stats = app.add_subcommand("stats", "Token-averaged activation difference per channel (ACTS)");
    s_stats->add_option("--diff", stats.diff, "ACTR file");
    s_stats->add_option("--ability-tag", stats.ability_tag, "Label, e.g. lang-domain (default: dump-a model id)");
    s_stats->add_option("--out", stats.out, "Output ACTS file");

    WeightDiffArgs wd;
    auto *s_wd = app.add_subcommand("weightdiff", "Per-channel L2 weight difference (ACTS)");
    s_wd->add_option("--target", wd.target, "Target checkpoint");
    s_wd->add_option("--ability", wd.ability, "Ability checkpoint");
    s_wd->add_option("--ability-tag", wd.ability_tag, "Label (default: ability model id)");
    s_wd->add_option("--out", wd.out, "Output ACTS file");

    CcdfArgs cc;
    auto *s_ccdf = app.add_subcommand("ccdf", "Complementary CDF of a stat vector as CSV");
    s_ccdf->add_option("--stats", cc.stats, "ACTS file");
    s_ccdf->add_option("--group", cc.group, "global|layer|module")->capture_default_str();
    s_ccdf->add_option("--thresholds", cc.thresholds, "Comma-separated thresholds (default: log-spaced)");
    s_ccdf->add_option("--points", cc.points, "Number of automatic thresholds")->capture_default_str();
    s_ccdf->add_option("--out", cc.out, "Output CSV");

    MaskArgs mk;
    auto *s_mask = app.add_subcommand("mask", "Global top-p% ability mask");
    s_mask->add_option("--stats", mk.stats, "ACTS file");
    s_mask->add_option("--p", mk.p, "Selection ratio in percent")->capture_default_str();
    s_mask->add_option("--out", mk.out, "Output mask JSON");

    UnionArgs un;
    auto *s_union = app.add_subcommand("union", "Union ability masks from one ability model");
    s_union->add_option("--mask", un.masks, "Ability mask (repeatable)");
    s_union->add_option("--out", un.out, "Output unified mask JSON");
    s_union->add_option("--checkpoint", un.checkpoint, "Report channel and parameter coverage against it");

    OverlapArgs ov;
    auto *s_overlap = app.add_subcommand("overlap", "Row-normalized pairwise mask overlap");
    s_overlap->add_option("--mask", ov.masks, "Mask (repeatable)");
    s_overlap->add_option("--format", ov.format, "csv|table")->capture_default_str();
    s_overlap->add_flag("--jaccard", ov.jaccard, "Add a symmetric Jaccard column (csv)");
    s_overlap->add_option("--decimals", ov.decimals, "Decimals of ratio columns (csv)")->capture_default_str();
    s_overlap->add_option("--out", ov.out, "Output file (default stdout)");

    MergeArgs mg;
    auto *s_merge = app.add_subcommand("merge", "Masked task-vector transfer and merge baselines");
    s_merge->add_option("--target", mg.target, "Target checkpoint");
    s_merge->add_option("--source", mg.sources, "<ckpt>:<mask|full>[:<lambda>] (repeatable)");
    s_merge->add_option("--lambda", mg.lambda, "Lambda for sources that omit one")->capture_default_str();
    s_merge->add_option("--lambda-all", mg.lambda_all, "Same lambda for every source");
    s_merge->add_option("--method", mg.method, "act|ta|ties|dare")->capture_default_str();
    s_merge->add_option("--ties-trim", mg.ties_trim, "TIES kept fraction per tensor")->capture_default_str();
    s_merge->add_option("--dare-drop", mg.dare_drop, "DARE drop probability")->capture_default_str();
    s_merge->add_option("--seed", mg.seed, "Seed for stochastic methods")->capture_default_str();
    s_merge->add_option("--out", mg.out, "Output checkpoint");
    s_merge->add_option("--manifest", mg.manifest, "Manifest path (default <out>.manifest.json)");

    SynthArgs sy;
    auto *s_synth = app.add_subcommand("synth", "Write a seeded miniature decoder checkpoint");
    s_synth->add_option("--layers", sy.spec.n_layers, "Blocks")->capture_default_str();
    s_synth->add_option("--hidden", sy.spec.hidden_dim, "Hidden size")->capture_default_str();
    s_synth->add_option("--intermediate", sy.spec.intermediate_dim, "MLP size")->capture_default_str();
    s_synth->add_option("--vocab", sy.spec.vocab_size, "Vocabulary size")->capture_default_str();
    s_synth->add_option("--seed", sy.spec.seed, "Weight seed")->capture_default_str();
    s_synth->add_flag("--token-mixing", sy.spec.token_mixing, "Causal attention instead of per-token mixing");
    s_synth->add_option("--spec", sy.spec_file, "SynthSpec JSON (overrides the dimension flags)");
    s_synth->add_option("--model-id", sy.model_id, "Model id stored in the metadata");
    s_synth->add_option("--out", sy.out, "Output checkpoint");

    PerturbArgs pt;
    auto *s_perturb = app.add_subcommand("perturb", "Plant noise on chosen channels");
    s_perturb->add_option("--base", pt.base, "Base checkpoint");
    s_perturb->add_option("--channels", pt.channels, "JSON list of [module_path, index]");
    s_perturb->add_option("--random-k", pt.random_k, "Plant k uniformly drawn channels");
    s_perturb->add_option("--delta", pt.delta, "Noise scale")->capture_default_str();
    s_perturb->add_option("--seed", pt.seed, "Noise and draw seed")->capture_default_str();
    s_perturb->add_option("--model-id", pt.model_id, "Model id of the perturbed checkpoint");
    s_perturb->add_option("--planted-out", pt.planted_out, "Write the planted channel list here");
    s_perturb->add_option("--out", pt.out, "Output checkpoint");

    ForwardArgs fw;
    auto *s_forward = app.add_subcommand("forward", "Record module outputs of a synthetic model (ACTD)");
    s_forward->add_option("--checkpoint", fw.checkpoint, "Synthetic checkpoint");
    s_forward->add_option("--tokens", fw.tokens, "JSON file: token ids, or {\"tokens\": [...], \"roles\": \"PPAA\"}");
    s_forward->add_option("--random-tokens", fw.random_tokens, "Draw this many token ids");
    s_forward->add_option("--token-seed", fw.token_seed, "Seed for --random-tokens")->capture_default_str();
    s_forward->add_option("--answer-from", fw.answer_from, "First answer position")->capture_default_str();
    s_forward->add_option("--dtype", fw.dtype, "f32|f16")->capture_default_str();
    s_forward->add_option("--model-id", fw.model_id, "Model id in the dump header");
    s_forward->add_option("--out", fw.out, "Output ACTD file");

    RecallArgs rc;
    auto *s_recall = app.add_subcommand("recall", "Planted-channel recovery report");
    s_recall->add_option("--mask", rc.mask, "Ability or unified mask");
    s_recall->add_option("--planted", rc.planted, "Planted channel list");
    s_recall->add_option("--stats", rc.stats, "Only count planted channels with nonzero stat");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
        app.parse(rev);

        CLI::App *sub = app.get_subcommands().front();
        ctx.log.set_command(sub->get_name());

        std::string config_path = g.config;
        if (config_path.empty())
            if (const char *env = std::getenv("ABLTX_CONFIG")) config_path = env;
        json config = json::object();
        if (!config_path.empty()) config = read_json(config_path);
        const Resolver resolver(config, sub->get_name());
        json echo = resolver.apply(app);
        echo.update(resolver.apply(*sub));

        const auto level = parse_level(g.log_level);
        if (!level) throw ContractError("unknown --log-level '" + g.log_level + "'");
        ctx.log.set_level(*level);
        if (!g.rules.empty()) ctx.rules = ModuleRules::load(g.rules);
        ctx.log.log(Level::Info, "config", {{"resolved", echo}});

        if (sub == s_diff) return cmd_diff(ctx, diff);
        if (sub == s_stats) return cmd_stats(ctx, stats);
        if (sub == s_wd) return cmd_weightdiff(ctx, wd);
        if (sub == s_ccdf) return cmd_ccdf(ctx, cc);
        if (sub == s_mask) return cmd_mask(ctx, mk);
        if (sub == s_union) return cmd_union(ctx, un);
        if (sub == s_overlap) return cmd_overlap(ctx, ov);
        if (sub == s_merge) return cmd_merge(ctx, mg);
        if (sub == s_synth) return cmd_synth(ctx, sy);
        if (sub == s_perturb) return cmd_perturb(ctx, pt);
        if (sub == s_forward) return cmd_forward(ctx, fw);
        if (sub == s_recall) return cmd_recall(ctx, rc);
        throw ContractError("unhandled subcommand");
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        ctx.log.log(Level::Error, "usage", {{"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return kExitContract;
    } catch (const ContractError &e) {
        ctx.log.log(Level::Error, "contract", {{"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return kExitContract;
    } catch (const IoError &e) {
        ctx.log.log(Level::Error, "io", {{"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error &e) {
        ctx.log.log(Level::Error, "io", {{"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception &e) {
        ctx.log.log(Level::Error, "contract", {{"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return kExitContract;
    }
}

} // namespace abltx::cli
