#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "abltx/error.hpp"
#include "abltx/merge.hpp"
#include "abltx/miniforward.hpp"
#include "abltx/stats.hpp"
#include "support.hpp"

using namespace abltx;
using test::TempDir;

namespace {

using Vec = std::vector<double>;

// Straight-line reference written against tensor names only.
std::map<std::string, std::vector<Vec>> reference(const CheckpointReader &r, const SynthSpec &s,
                                                  const std::vector<std::uint32_t> &tokens) {
    const auto d = s.hidden_dim, I = s.intermediate_dim;
    auto W = [&](const std::string &n) { return r.read_widened(n); };
    auto lin = [](const Vec &w, const Vec &x, std::size_t rows) {
        Vec y(rows, 0.0);
        const auto cols = x.size();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) y[i] += w[i * cols + j] * x[j];
        return y;
    };
    auto norm = [](const Vec &x, const Vec &g) {
        double ms = 0;
        for (double v : x) ms += v * v;
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + 1e-6);
        Vec y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * g[i];
        return y;
    };
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };

    std::map<std::string, std::vector<Vec>> rec;
    std::vector<Vec> xs;
    const auto emb = W("model.embed_tokens.weight");
    for (auto tok : tokens) xs.emplace_back(emb.begin() + tok * d, emb.begin() + (tok + 1) * d);
    rec["model.embed_tokens"] = xs;
    for (std::uint64_t l = 0; l < s.n_layers; ++l) {
        const std::string p = "model.layers." + std::to_string(l) + ".";
        std::vector<Vec> qs, ks, vs;
        for (auto &x : xs) {
            const auto h = norm(x, W(p + "input_layernorm.weight"));
            rec[p + "input_layernorm"].push_back(h);
            qs.push_back(lin(W(p + "self_attn.q_proj.weight"), h, d));
            ks.push_back(lin(W(p + "self_attn.k_proj.weight"), h, d));
            vs.push_back(lin(W(p + "self_attn.v_proj.weight"), h, d));
        }
        rec[p + "self_attn.q_proj"] = qs;
        rec[p + "self_attn.k_proj"] = ks;
        rec[p + "self_attn.v_proj"] = vs;
        for (std::size_t t = 0; t < xs.size(); ++t) {
            Vec a(d, 0.0);
            if (!s.token_mixing) {
                for (std::size_t j = 0; j < d; ++j) a[j] = vs[t][j] * 2.0 * sig(qs[t][j] * ks[t][j]);
            } else {
                Vec w(t + 1);
                double z = 0;
                for (std::size_t u = 0; u <= t; ++u) {
                    double dot = 0;
                    for (std::size_t j = 0; j < d; ++j) dot += qs[t][j] * ks[u][j];
                    z += w[u] = std::exp(dot / std::sqrt(static_cast<double>(d)));
                }
                for (std::size_t u = 0; u <= t; ++u)
                    for (std::size_t j = 0; j < d; ++j) a[j] += w[u] / z * vs[u][j];
            }
            const auto o = lin(W(p + "self_attn.o_proj.weight"), a, d);
            rec[p + "self_attn.o_proj"].push_back(o);
            for (std::size_t j = 0; j < d; ++j) xs[t][j] += o[j];
        }
        for (auto &x : xs) {
            const auto h = norm(x, W(p + "post_attention_layernorm.weight"));
            rec[p + "post_attention_layernorm"].push_back(h);
            const auto g = lin(W(p + "mlp.gate_proj.weight"), h, I);
            const auto u = lin(W(p + "mlp.up_proj.weight"), h, I);
            rec[p + "mlp.gate_proj"].push_back(g);
            rec[p + "mlp.up_proj"].push_back(u);
            Vec m(I);
            for (std::size_t c = 0; c < I; ++c) m[c] = g[c] * sig(g[c]) * u[c];
            const auto down = lin(W(p + "mlp.down_proj.weight"), m, d);
            rec[p + "mlp.down_proj"].push_back(down);
            for (std::size_t j = 0; j < d; ++j) x[j] += down[j];
        }
    }
    for (auto &x : xs) {
        const auto f = norm(x, W("model.norm.weight"));
        rec["model.norm"].push_back(f);
        rec["lm_head"].push_back(lin(W("lm_head.weight"), f, s.vocab_size));
    }
    return rec;
}

void check_against_reference(const SynthSpec &spec) {
    TempDir dir;
    synth_checkpoint(spec, dir / "m.st");
    const CheckpointReader r(dir / "m.st");
    const MiniForward mf(r);
    CHECK(mf.spec() == spec);
    const std::vector<std::uint32_t> tokens = {3, 11, 3};
    const auto frames = mf.run(tokens);
    const auto ref = reference(r, spec, tokens);
    const auto n = mf.frame_size();
    std::uint64_t offset = 0;
    std::size_t compared = 0;
    for (const auto &m : mf.module_table()) {
        REQUIRE(ref.count(m.path));
        const auto &rows = ref.at(m.path);
        for (std::size_t t = 0; t < tokens.size(); ++t)
            for (std::uint64_t c = 0; c < m.n_channels; ++c, ++compared) {
                const double want = rows[t][c];
                const double got = frames[t * n + offset + c];
                CHECK(std::abs(got - want) <= 1e-6 * std::max(1.0, std::abs(want)));
            }
        offset += m.n_channels;
    }
    CHECK(compared == frames.size());
    CHECK(offset == n);
}

std::set<ChannelId> nonzero_channels(const ChannelStatVector &s) {
    std::set<ChannelId> out;
    const ChannelLayout layout(s.module_table);
    for (std::uint64_t i = 0; i < s.values.size(); ++i)
        if (s.values[i] != 0.0) out.insert(layout.channel_at(i));
    return out;
}

} // namespace

TEST_CASE("synthetic checkpoints are deterministic per seed") {
    TempDir dir;
    SynthSpec spec;
    synth_checkpoint(spec, dir / "a.st");
    synth_checkpoint(spec, dir / "b.st");
    CHECK(test::read_file(dir / "a.st") == test::read_file(dir / "b.st"));
    spec.seed = 1;
    synth_checkpoint(spec, dir / "c.st");
    CHECK(test::read_file(dir / "a.st") != test::read_file(dir / "c.st"));

    const CheckpointReader r(dir / "c.st");
    CHECK(model_id_of(r) == "synth-s1");
    CHECK(SynthSpec::from_json(nlohmann::json::parse(r.index().metadata()[kSynthSpecKey].get<std::string>())) == spec);
}

TEST_CASE("module table of a two-layer model") {
    TempDir dir;
    SynthSpec spec; // 2 layers, d=16, i=32, vocab=64
    synth_checkpoint(spec, dir / "m.st");
    const auto index = open_checkpoint(dir / "m.st");
    const auto table = index.module_table();
    // embed + 2*(2 norms + 4 attn + 3 mlp) + final norm + head
    CHECK(table.size() == 1 + 2 * 9 + 2);
    // 16 embed, per layer 16*6 + 32*2 + 16, final norm 16, head 64
    CHECK(index.total_channels() == 16 + 2 * (16 * 6 + 32 * 2 + 16) + 16 + 64);
    const SynthSpec empty{0, 16, 32, 64};
    CHECK_THROWS_AS(empty.validate(), ContractError);
}

TEST_CASE("forward matches a scalar reference") {
    check_against_reference({1, 4, 6, 16, 7, false});
    check_against_reference({2, 4, 6, 16, 8, true});
}

TEST_CASE("zero weights give zero linear outputs") {
    TempDir dir;
    SynthSpec spec{1, 4, 6, 8, 0, false};
    std::vector<test::TensorData> tensors;
    for (const auto &t : synth_layout(spec)) {
        std::uint64_t n = 1;
        for (auto s : t.shape) n *= s;
        const bool is_embed = t.name == "model.embed_tokens.weight";
        tensors.push_back({t.name, t.dtype, t.shape, std::vector<double>(n, is_embed ? 1.0 : 0.0)});
    }
    test::write_tensors(dir / "z.st", tensors);
    const CheckpointReader r(dir / "z.st");
    const MiniForward mf(r);
    CHECK(mf.spec() == spec);
    const std::vector<std::uint32_t> tokens = {0, 1};
    const auto frames = mf.run(tokens);
    std::uint64_t offset = 0;
    for (const auto &m : mf.module_table()) {
        const bool linear = m.path.find("_proj") != std::string::npos || m.path == "lm_head";
        if (linear)
            for (std::size_t t = 0; t < tokens.size(); ++t)
                for (std::uint64_t c = 0; c < m.n_channels; ++c) CHECK(frames[t * mf.frame_size() + offset + c] == 0.0f);
        offset += m.n_channels;
    }
}

TEST_CASE("perturbation touches exactly the planted channels") {
    TempDir dir;
    SynthSpec spec;
    synth_checkpoint(spec, dir / "base.st");
    perturb_checkpoint(dir / "base.st", {}, dir / "same.st");
    CHECK(test::read_file(dir / "same.st") == test::read_file(dir / "base.st"));

    const PerturbationPlan one{{{"model.layers.1.mlp.up_proj", 5}}, 1.0, 3};
    perturb_checkpoint(dir / "base.st", one, dir / "one.st", "one");
    const CheckpointReader base(dir / "base.st"), pert(dir / "one.st");
    for (const auto &t : base.index().tensors()) {
        const auto a = base.read_widened(t.name), b = pert.read_widened(t.name);
        std::set<std::uint64_t> rows;
        for (std::size_t e = 0; e < a.size(); ++e)
            if (a[e] != b[e]) {
                rows.insert(e / t.shape.back());
                CHECK(std::abs(std::abs(b[e] - a[e]) - 1.0 / 4.0) < 1e-6); // 1/sqrt(16)
            }
        if (t.name == "model.layers.1.mlp.up_proj.weight")
            CHECK(rows == std::set<std::uint64_t>{5});
        else
            CHECK(rows.empty());
    }
    CHECK(model_id_of(pert) == "one");

    const auto index = open_checkpoint(dir / "base.st");
    const auto planted = random_channels(index, 12, 4);
    CHECK(planted.size() == 12);
    CHECK(std::is_sorted(planted.begin(), planted.end()));
    perturb_checkpoint(dir / "base.st", {planted, 1.0, 4}, dir / "many.st");
    const CheckpointReader many(dir / "many.st");
    const auto ws = weight_stats(base, many, "synthetic");
    CHECK(nonzero_channels(ws) == std::set<ChannelId>(planted.begin(), planted.end()));

    CHECK_THROWS_WITH_AS(perturb_checkpoint(dir / "base.st", {{{"lm_head", 64}}, 1.0, 0}, dir / "bad.st"),
                         doctest::Contains("unknown channel"), ContractError);
}

TEST_CASE("merging the planted mask at lambda 1 transfers the perturbation") {
    TempDir dir;
    SynthSpec spec{2, 8, 12, 32, 2, true};
    synth_checkpoint(spec, dir / "base.st");
    const auto index = open_checkpoint(dir / "base.st");
    const auto planted = random_channels(index, 9, 6);
    perturb_checkpoint(dir / "base.st", {planted, 1.0, 6}, dir / "pert.st");

    MergePlan plan;
    plan.target = dir / "base.st";
    plan.sources = {{dir / "pert.st", UnifiedMask{planted, "m", {"t"}, index.total_channels()}, 1.0}};
    merge(plan, dir / "merged.st");

    const CheckpointReader pert(dir / "pert.st"), merged(dir / "merged.st");
    for (const auto &t : index.tensors()) CHECK(pert.read_tensor(t.name) == merged.read_tensor(t.name));
    const auto tokens = random_tokens(10, spec.vocab_size, 1);
    CHECK(MiniForward(pert).run(tokens) == MiniForward(merged).run(tokens));
}

TEST_CASE("forward_record writes a dump that replays the run") {
    TempDir dir;
    SynthSpec spec;
    synth_checkpoint(spec, dir / "m.st");
    const auto tokens = random_tokens(6, spec.vocab_size, 2);
    const auto roles = split_roles(6, 4);
    CHECK(encode_roles(roles) == "PPPPAA");
    const auto header = forward_record(dir / "m.st", tokens, roles, dir / "m.actd");
    CHECK(header.model_id == "synth-s0");
    CHECK(header.input_set_hash == hash_tokens(tokens));

    const CheckpointReader r(dir / "m.st");
    const auto frames = MiniForward(r).run(tokens);
    DumpReader dump(dir / "m.actd");
    std::vector<float> got;
    while (auto f = dump.next()) got.insert(got.end(), f->begin(), f->end());
    CHECK(got == frames);

    const std::vector<std::uint32_t> bad = {1, 64};
    const auto two = split_roles(2, 0);
    CHECK_THROWS_WITH_AS(forward_record(dir / "m.st", bad, two, dir / "x.actd"),
                         doctest::Contains("token id 64 out of range (vocab 64)"), ContractError);
    CHECK_FALSE(std::filesystem::exists(dir / "x.actd"));
    CHECK_THROWS_AS(forward_record(dir / "m.st", tokens, two, dir / "x.actd"), ContractError);
    for (auto t : random_tokens(100, 7, 3)) CHECK(t < 7u);
}
