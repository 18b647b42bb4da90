#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "abltx/dump.hpp"
#include "abltx/error.hpp"
#include "support.hpp"

using namespace abltx;
using test::TempDir;

namespace {

struct Pair {
    DumpHeader a, b;
    std::vector<float> fa, fb;
};

Pair random_pair(std::mt19937_64 &rng, std::uint64_t tokens) {
    const auto table = test::small_table(rng, 5, 9);
    std::vector<std::uint32_t> ids(tokens);
    std::vector<TokenRole> roles(tokens);
    std::bernoulli_distribution coin(0.6);
    for (std::uint64_t t = 0; t < tokens; ++t) {
        ids[t] = static_cast<std::uint32_t>(rng() % 1000);
        roles[t] = coin(rng) ? TokenRole::Answer : TokenRole::Prompt;
    }
    Pair p{test::dump_header("A", table, ids, roles), test::dump_header("B", table, ids, roles), {}, {}};
    std::normal_distribution<float> nd(0.0f, 3.0f);
    const auto n = p.a.frame_size() * tokens;
    for (std::uint64_t i = 0; i < n; ++i) {
        p.fa.push_back(nd(rng));
        p.fb.push_back(nd(rng));
    }
    return p;
}

std::string mismatch_of(const std::filesystem::path &a, const std::filesystem::path &b) {
    try {
        reduce_pair(a, b, RoleFilter::All);
    } catch (const ContractError &e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("roles and filters") {
    const std::vector<TokenRole> roles = {TokenRole::Prompt, TokenRole::Answer, TokenRole::Answer};
    CHECK(encode_roles(roles) == "PAA");
    CHECK(decode_roles("PAA") == roles);
    CHECK_THROWS_AS(decode_roles("PX"), ContractError);
    CHECK(parse_role_filter("answer") == RoleFilter::AnswerOnly);
    CHECK(parse_role_filter("all") == RoleFilter::All);
    CHECK(role_filter_name(RoleFilter::PromptOnly) == "prompt");
    CHECK(role_selected(RoleFilter::AnswerOnly, TokenRole::Answer));
    CHECK_FALSE(role_selected(RoleFilter::AnswerOnly, TokenRole::Prompt));
}

TEST_CASE("token hash is over little-endian u32 ids") {
    const std::vector<std::uint32_t> ids = {1, 2, 0x01020304};
    Sha256 h;
    const unsigned char bytes[] = {1, 0, 0, 0, 2, 0, 0, 0, 4, 3, 2, 1};
    h.update(std::as_bytes(std::span(bytes)));
    CHECK(hash_tokens(ids) == h.finish());
}

TEST_CASE("dump round trip in f32 and f16") {
    TempDir dir;
    std::mt19937_64 rng(1);
    auto p = random_pair(rng, 7);
    for (ValueDType dt : {ValueDType::F32, ValueDType::F16}) {
        p.a.value_dtype = dt;
        const auto path = dir / "a.actd";
        test::write_dump(path, p.a, p.fa);
        DumpReader r(path);
        CHECK(r.header().model_id == "A");
        CHECK(r.header().module_table == p.a.module_table);
        CHECK(r.header().token_roles == p.a.token_roles);
        const auto n = p.a.frame_size();
        std::uint64_t t = 0;
        while (auto frame = r.next()) {
            for (std::uint64_t c = 0; c < n; ++c) {
                const float want = dt == ValueDType::F32 ? p.fa[t * n + c] : half_to_float(float_to_half(p.fa[t * n + c]));
                CHECK(frame->data()[c] == want);
            }
            ++t;
        }
        CHECK(t == 7);
        CHECK(r.buffer_bytes() <= n * (sizeof(float) + sizeof(std::uint16_t)));
    }
}

TEST_CASE("writer contract errors") {
    TempDir dir;
    std::mt19937_64 rng(2);
    auto p = random_pair(rng, 3);
    const auto path = dir / "a.actd";
    {
        DumpWriter w(path, p.a);
        std::vector<float> short_frame(p.a.frame_size() - 1);
        CHECK_THROWS_WITH_AS(w.write_frame(short_frame), doctest::Contains("frame length mismatch"), ContractError);
        std::vector<float> frame(p.a.frame_size());
        w.write_frame(frame);
        CHECK_THROWS_WITH_AS(w.finish(), doctest::Contains("premature stream end"), ContractError);
    }
    CHECK_FALSE(std::filesystem::exists(path));
    auto bad = p.a;
    bad.token_roles.pop_back();
    CHECK_THROWS_AS(DumpWriter(path, bad), ContractError);
}

TEST_CASE("reader rejects truncation, bad magic and bad version") {
    TempDir dir;
    std::mt19937_64 rng(3);
    auto p = random_pair(rng, 4);
    const auto path = dir / "a.actd";
    test::write_dump(path, p.a, p.fa);
    auto bytes = test::read_file(path);

    const auto cut = dir / "cut.actd";
    test::write_file(cut, std::string(reinterpret_cast<const char *>(bytes.data()), bytes.size() - 3));
    DumpReader r(cut);
    CHECK(r.next().has_value());
    CHECK(r.next().has_value());
    CHECK(r.next().has_value());
    CHECK_THROWS_WITH_AS(r.next(), doctest::Contains("frame 3"), ContractError);

    auto magic = bytes;
    magic[0] = std::byte{'X'};
    const auto m = dir / "magic.actd";
    test::write_file(m, std::string(reinterpret_cast<const char *>(magic.data()), magic.size()));
    CHECK_THROWS_WITH_AS(DumpReader{m}, doctest::Contains("corrupt magic"), ContractError);

    auto version = bytes;
    version[4] = std::byte{9};
    const auto v = dir / "version.actd";
    test::write_file(v, std::string(reinterpret_cast<const char *>(version.data()), version.size()));
    CHECK_THROWS_WITH_AS(DumpReader{v}, doctest::Contains("unsupported version"), ContractError);
}

TEST_CASE("reduce_pair matches a scalar loop") {
    TempDir dir;
    std::mt19937_64 rng(4);
    for (int round = 0; round < 10; ++round) {
        auto p = random_pair(rng, 1 + rng() % 20);
        test::write_dump(dir / "a.actd", p.a, p.fa);
        test::write_dump(dir / "b.actd", p.b, p.fb);
        for (RoleFilter f : {RoleFilter::All, RoleFilter::AnswerOnly, RoleFilter::PromptOnly}) {
            const auto diff = reduce_pair(dir / "a.actd", dir / "b.actd", f, 1 + round % 3);
            const auto n = p.a.frame_size();
            for (std::uint64_t c = 0; c < n; ++c) {
                double sum = 0.0;
                std::uint64_t count = 0;
                for (std::uint64_t t = 0; t < p.a.token_count; ++t) {
                    if (!role_selected(f, p.a.token_roles[t])) continue;
                    sum += std::abs(static_cast<double>(p.fa[t * n + c]) - static_cast<double>(p.fb[t * n + c]));
                    ++count;
                }
                CHECK(diff.sum_abs_diff[c] == sum);
                CHECK(diff.token_count[c] == count);
            }
            CHECK(diff.model_a == "A");
            CHECK(diff.model_b == "B");
            CHECK(diff.role_filter == f);
        }
    }
}

TEST_CASE("self pair reduces to zero and answer sums never exceed all-token sums") {
    TempDir dir;
    std::mt19937_64 rng(5);
    auto p = random_pair(rng, 12);
    test::write_dump(dir / "a.actd", p.a, p.fa);
    test::write_dump(dir / "b.actd", p.b, p.fb);
    const auto self = reduce_pair(dir / "a.actd", dir / "a.actd", RoleFilter::All);
    for (double s : self.sum_abs_diff) CHECK(s == 0.0);
    const auto all = reduce_pair(dir / "a.actd", dir / "b.actd", RoleFilter::All);
    const auto ans = reduce_pair(dir / "a.actd", dir / "b.actd", RoleFilter::AnswerOnly);
    for (std::size_t i = 0; i < all.sum_abs_diff.size(); ++i) CHECK(ans.sum_abs_diff[i] <= all.sum_abs_diff[i]);
}

TEST_CASE("header mismatches name the field") {
    TempDir dir;
    std::mt19937_64 rng(6);
    auto p = random_pair(rng, 5);
    test::write_dump(dir / "a.actd", p.a, p.fa);

    auto other = p.b;
    other.input_set_hash[0] ^= 1;
    test::write_dump(dir / "b.actd", other, p.fb);
    CHECK(mismatch_of(dir / "a.actd", dir / "b.actd") == "header mismatch: input_set_hash");

    other = p.b;
    other.token_roles[0] = other.token_roles[0] == TokenRole::Answer ? TokenRole::Prompt : TokenRole::Answer;
    test::write_dump(dir / "b.actd", other, p.fb);
    CHECK(mismatch_of(dir / "a.actd", dir / "b.actd") == "header mismatch: token_roles");

    other = p.b;
    other.module_table[0].path += "x";
    test::write_dump(dir / "b.actd", other, p.fb);
    CHECK(mismatch_of(dir / "a.actd", dir / "b.actd") == "header mismatch: module_table");

    other = p.b;
    other.token_count -= 1;
    other.token_roles.pop_back();
    test::write_dump(dir / "b.actd", other, std::vector<float>(p.fb.begin(), p.fb.end() - p.b.frame_size()));
    CHECK(mismatch_of(dir / "a.actd", dir / "b.actd") == "header mismatch: token_count");
}

TEST_CASE("results do not depend on the worker count") {
    TempDir dir;
    std::mt19937_64 rng(7);
    auto p = random_pair(rng, 40);
    test::write_dump(dir / "a.actd", p.a, p.fa);
    test::write_dump(dir / "b.actd", p.b, p.fb);
    const auto one = reduce_pair(dir / "a.actd", dir / "b.actd", RoleFilter::All, 1);
    for (unsigned w : {2u, 4u, 8u}) CHECK(reduce_pair(dir / "a.actd", dir / "b.actd", RoleFilter::All, w) == one);
}

TEST_CASE("diff file round trip and validation") {
    TempDir dir;
    std::mt19937_64 rng(8);
    auto p = random_pair(rng, 6);
    test::write_dump(dir / "a.actd", p.a, p.fa);
    test::write_dump(dir / "b.actd", p.b, p.fb);
    const auto diff = reduce_pair(dir / "a.actd", dir / "b.actd", RoleFilter::AnswerOnly);
    write_diff(dir / "d.actr", diff);
    CHECK(read_diff(dir / "d.actr") == diff);

    auto bytes = test::read_file(dir / "d.actr");
    test::write_file(dir / "cut.actr", std::string(reinterpret_cast<const char *>(bytes.data()), bytes.size() - 1));
    CHECK_THROWS_WITH_AS(read_diff(dir / "cut.actr"), doctest::Contains("truncated"), ContractError);
    CHECK_THROWS_AS(read_diff(dir / "a.actd"), ContractError);
}
