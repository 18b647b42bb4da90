#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "abltx/error.hpp"
#include "abltx/mask.hpp"
#include "support.hpp"

using namespace abltx;
using test::TempDir;

namespace {

ChannelStatVector stats_of(ModuleTable table, std::vector<double> values, std::string ability = "abl",
                           std::string tag = "t") {
    ChannelStatVector s;
    s.module_table = std::move(table);
    s.values = std::move(values);
    s.pair_id = {std::move(ability), "ref"};
    s.ability_tag = std::move(tag);
    return s;
}

ChannelStatVector random_stats(std::mt19937_64 &rng, int distinct_values = 0) {
    const auto table = test::small_table(rng, 1 + rng() % 9, 30);
    std::vector<double> v(total_channels(table));
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (auto &x : v) x = distinct_values ? static_cast<double>(rng() % distinct_values) : u(rng);
    return stats_of(table, v);
}

// Full sort by (value desc, channel asc), keep k.
std::vector<ChannelId> sort_oracle(const ChannelStatVector &s, std::uint64_t k) {
    const ChannelLayout layout(s.module_table);
    std::vector<std::pair<double, ChannelId>> all;
    for (std::uint64_t i = 0; i < s.size(); ++i) all.push_back({s.values[i], layout.channel_at(i)});
    std::sort(all.begin(), all.end(), [](const auto &a, const auto &b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<ChannelId> out;
    for (std::uint64_t i = 0; i < k; ++i) out.push_back(all[i].second);
    std::sort(out.begin(), out.end());
    return out;
}

AbilityMask mask_of(std::vector<ChannelId> channels, std::uint64_t universe, std::string tag = "t",
                    std::string ability = "abl") {
    AbilityMask m;
    m.channels = std::move(channels);
    std::sort(m.channels.begin(), m.channels.end());
    m.total_channel_count = universe;
    m.ability_tag = std::move(tag);
    m.source_pair = {std::move(ability), "ref"};
    return m;
}

} // namespace

TEST_CASE("mask size rounds half up") {
    CHECK(mask_size(1'750'500, 1.0) == 17'505);
    CHECK(mask_size(150, 1.0) == 2);  // 1.5
    CHECK(mask_size(149, 1.0) == 1);  // 1.49
    CHECK(mask_size(250, 0.2) == 1);  // 0.5, a product that is inexact in binary
    CHECK(mask_size(1000, 0.15) == 2); // 1.5
    CHECK(mask_size(7, 100.0) == 7);
    CHECK(mask_size(0, 5.0) == 0);

    std::mt19937_64 rng(21);
    for (int i = 0; i < 1000; ++i) {
        const std::uint64_t n = 1 + rng() % 5'000'000;
        const std::uint64_t p_milli = 1 + rng() % 100'000; // p in thousandths of a percent
        const double p = static_cast<double>(p_milli) / 1000.0;
        // round_half_up(n * p_milli / 100000) in exact integer arithmetic
        const std::uint64_t expect = (n * p_milli * 2 + 100'000) / 200'000;
        CHECK(mask_size(n, p) == expect);
    }
}

TEST_CASE("build_mask keeps the global top-k with canonical tie-breaks") {
    std::mt19937_64 rng(22);
    for (int i = 0; i < 200; ++i) {
        const auto s = random_stats(rng, i % 2 ? 4 : 0);
        const double p = 0.5 + static_cast<double>(rng() % 1000) / 10.0;
        const auto m = build_mask(s, std::min(p, 100.0));
        const auto k = mask_size(s.size(), std::min(p, 100.0));
        CHECK(m.channels == sort_oracle(s, k));
        CHECK(m.total_channel_count == s.size());
    }
    const auto tie = build_mask(stats_of({{"b.q_proj", 2}, {"a.q_proj", 2}}, {1.0, 1.0, 1.0, 1.0}), 50.0);
    CHECK(tie.channels == std::vector<ChannelId>{{"a.q_proj", 0}, {"a.q_proj", 1}});
    CHECK_THROWS_AS(build_mask(stats_of({{"a", 1}}, {1.0}), 0.0), ContractError);
    CHECK_THROWS_AS(build_mask(stats_of({{"a", 1}}, {1.0}), 100.5), ContractError);
}

TEST_CASE("masks nest as p grows and ignore monotone rescaling") {
    std::mt19937_64 rng(23);
    for (int i = 0; i < 100; ++i) {
        const auto s = random_stats(rng, i % 3 ? 0 : 5);
        auto t = s;
        for (auto &v : t.values) v = std::exp(0.5 * v) + 3.0;
        std::vector<ChannelId> prev;
        for (double p : {1.0, 5.0, 20.0, 60.0, 100.0}) {
            const auto m = build_mask(s, p);
            CHECK(std::includes(m.channels.begin(), m.channels.end(), prev.begin(), prev.end()));
            CHECK(build_mask(t, p).channels == m.channels);
            prev = m.channels;
        }
    }
}

TEST_CASE("union is idempotent, commutative and associative") {
    std::mt19937_64 rng(24);
    const std::uint64_t n = 500;
    auto draw = [&](const std::string &tag) {
        std::set<ChannelId> s;
        for (int i = 0; i < 40; ++i) s.insert({"m" + std::to_string(rng() % 5), rng() % 100});
        return mask_of({s.begin(), s.end()}, n, tag);
    };
    for (int i = 0; i < 50; ++i) {
        const auto a = draw("a"), b = draw("b"), c = draw("c");
        CHECK(union_masks(std::vector{a, a}).channels == a.channels);
        CHECK(union_masks(std::vector{a, b}).channels == union_masks(std::vector{b, a}).channels);
        const auto ab = union_masks(std::vector{a, b});
        AbilityMask ab_as{ab.channels, "ab", 1.0, {"abl", "ref"}, n};
        CHECK(union_masks(std::vector{ab_as, c}).channels == union_masks(std::vector{a, b, c}).channels);
        const auto bc = union_masks(std::vector{b, c});
        AbilityMask bc_as{bc.channels, "bc", 1.0, {"abl", "ref"}, n};
        CHECK(union_masks(std::vector{a, bc_as}).channels == union_masks(std::vector{a, b, c}).channels);
    }
    const auto u = union_masks(std::vector{draw("x"), draw("y")});
    CHECK(u.constituent_tags == std::vector<std::string>{"x", "y"});
    CHECK(u.source_model_id == "abl");
    CHECK_THROWS_WITH_AS(union_masks(std::vector{draw("x"), mask_of({}, n, "z", "other")}),
                         doctest::Contains("mixed source models"), ContractError);
    CHECK_THROWS_AS(union_masks(std::vector{draw("x"), mask_of({}, n + 1)}), ContractError);
}

TEST_CASE("overlap is row-normalized on hand-enumerated fixtures") {
    const std::uint64_t n = 20;
    const auto a = mask_of({{"m", 0}, {"m", 1}, {"m", 2}, {"m", 3}}, n, "a");
    const auto b = mask_of({{"m", 2}, {"m", 3}, {"m", 4}, {"m", 5}, {"m", 6}, {"m", 7}, {"m", 8}, {"m", 9}}, n, "b");
    const auto va = view_of(a), vb = view_of(b);
    CHECK(overlap(va, va) == Overlap{100.0, 4});
    CHECK(overlap(va, vb) == Overlap{50.0, 2});
    CHECK(overlap(vb, va) == Overlap{25.0, 2});
    CHECK(jaccard_percent(va, vb) == doctest::Approx(20.0));
    const auto empty = mask_of({}, n, "e");
    CHECK(overlap(view_of(empty), va) == Overlap{0.0, 0});
    CHECK_THROWS_AS(overlap(va, view_of(mask_of({}, n + 1))), ContractError);

    std::mt19937_64 rng(25);
    for (int i = 0; i < 100; ++i) {
        std::set<ChannelId> x, y;
        for (int k = 0; k < 30; ++k) x.insert({"m", rng() % 60});
        for (int k = 0; k < 30; ++k) y.insert({"m", rng() % 60});
        const auto mx = mask_of({x.begin(), x.end()}, 60), my = mask_of({y.begin(), y.end()}, 60);
        std::uint64_t both = 0;
        for (const auto &c : x) both += y.count(c);
        CHECK(overlap(view_of(mx), view_of(my)).count == both);
        CHECK(overlap(view_of(my), view_of(mx)).count == both);
        CHECK(overlap(view_of(mx), view_of(my)).ratio_percent == 100.0 * both / x.size());
    }
}

TEST_CASE("overlap cell, csv and table formats") {
    CHECK(format_overlap_cell({100.0 * 4434 / 17505, 4434}) == "25.3% (4,434)");
    CHECK(format_overlap_cell({100.0, 17505}) == "100.0% (17,505)");
    CHECK(group_thousands(1234567) == "1,234,567");
    CHECK(group_thousands(999) == "999");

    const auto a = mask_of({{"m", 0}, {"m", 1}}, 10, "zh-math");
    const auto b = mask_of({{"m", 1}, {"m", 2}, {"m", 3}}, 10, "ja-sci");
    const std::vector<MaskView> views = {view_of(a), view_of(b)};
    std::ostringstream csv;
    write_overlap_csv(csv, views, {1, true});
    CHECK(csv.str() == "base,other,ratio_percent,count,jaccard_percent\n"
                       "zh-math,zh-math,100.0,2,100.0\n"
                       "zh-math,ja-sci,50.0,1,25.0\n"
                       "ja-sci,zh-math,33.3,1,25.0\n"
                       "ja-sci,ja-sci,100.0,3,100.0\n");
    std::ostringstream table;
    write_overlap_table(table, views);
    CHECK(table.str() == "base,zh-math,ja-sci\n"
                         "zh-math,\"100.0% (2)\",\"50.0% (1)\"\n"
                         "ja-sci,\"33.3% (1)\",\"100.0% (3)\"\n");
}

TEST_CASE("random baseline equals the expected overlap ratio") {
    CHECK(random_baseline(1'750'500, 1.0) == doctest::Approx(1.0));
    CHECK(random_baseline(10'000, 5.0) == doctest::Approx(5.0));
    CHECK(random_baseline(150, 1.0) == doctest::Approx(100.0 * 2 / 150));
}

TEST_CASE("mask files round trip and are validated") {
    TempDir dir;
    std::mt19937_64 rng(26);
    const auto m = build_mask(random_stats(rng), 10.0);
    write_mask(dir / "m.json", m);
    CHECK(read_mask(dir / "m.json") == m);
    CHECK(read_mask_as_unified(dir / "m.json") == as_unified(m));
    const auto u = union_masks(std::vector{m});
    write_unified(dir / "u.json", u);
    CHECK(read_unified(dir / "u.json") == u);
    CHECK(read_mask_as_unified(dir / "u.json") == u);

    auto j = mask_to_json(m);
    std::swap(j["channels"][0], j["channels"][1]);
    CHECK_THROWS_WITH_AS(mask_from_json(j), doctest::Contains("canonical order"), ContractError);
    j = mask_to_json(m);
    j["p"] = 0;
    CHECK_THROWS_AS(mask_from_json(j), ContractError);
    test::write_file(dir / "bad.json", "{not json");
    CHECK_THROWS_AS(read_mask(dir / "bad.json"), ContractError);
}

TEST_CASE("coverage counts slices including bias elements") {
    TempDir dir;
    test::write_tensors(dir / "c.st", {{"x.q_proj.weight", DType::F32, {3, 4}, std::vector<double>(12)},
                                       {"x.q_proj.bias", DType::F32, {3}, std::vector<double>(3)},
                                       {"x.norm.weight", DType::F32, {4}, std::vector<double>(4)},
                                       {"x.rotary", DType::F32, {5}, std::vector<double>(5)}});
    const auto index = open_checkpoint(dir / "c.st");
    const std::vector<ChannelId> ch = {{"x.norm", 1}, {"x.q_proj", 0}, {"x.q_proj", 2}};
    const auto cov = mask_coverage(ch, index);
    CHECK(cov.channels == 3);
    CHECK(cov.channel_fraction == doctest::Approx(3.0 / 7.0));
    CHECK(cov.param_elements == 1 + 5 + 5);
    CHECK(cov.param_fraction == doctest::Approx(11.0 / 24.0));
}
