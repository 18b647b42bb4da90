#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "abltx/digest.hpp"
#include "abltx/dtype.hpp"
#include "abltx/error.hpp"
#include "abltx/io.hpp"
#include "abltx/parallel.hpp"
#include "abltx/rng.hpp"
#include "support.hpp"

using namespace abltx;

namespace {

// Nearest representable value by search over every finite bit pattern of a
// 16-bit format, ties to the even pattern. Distances in long double are
// exact for neighbours of a double.
struct Nearest16 {
    std::vector<std::pair<long double, std::uint16_t>> table;

    template <typename Widen>
    explicit Nearest16(Widen widen) {
        for (std::uint32_t h = 0; h < 0x10000; ++h) {
            const double v = widen(static_cast<std::uint16_t>(h));
            if (std::isfinite(v) && !(v == 0.0 && std::signbit(v))) table.push_back({v, static_cast<std::uint16_t>(h)});
        }
        std::sort(table.begin(), table.end());
    }

    std::uint16_t operator()(double d) const {
        auto hi = std::lower_bound(table.begin(), table.end(), std::make_pair(static_cast<long double>(d), std::uint16_t{0}));
        if (hi == table.end()) return table.back().second;
        if (hi->first == d || hi == table.begin()) return hi->second;
        auto lo = hi - 1;
        const long double dl = static_cast<long double>(d) - lo->first;
        const long double dh = hi->first - static_cast<long double>(d);
        if (dl < dh) return lo->second;
        if (dh < dl) return hi->second;
        return (lo->second & 1) ? hi->second : lo->second;
    }
};

} // namespace

TEST_CASE("half widening of landmark patterns") {
    CHECK(half_to_float(0x3c00) == 1.0f);
    CHECK(half_to_float(0xc000) == -2.0f);
    CHECK(half_to_float(0x7bff) == 65504.0f);
    CHECK(half_to_float(0x0001) == std::ldexp(1.0f, -24));
    CHECK(half_to_float(0x0400) == std::ldexp(1.0f, -14));
    CHECK(std::isinf(half_to_float(0x7c00)));
    CHECK(std::isnan(half_to_float(0x7e00)));
    CHECK(std::signbit(half_to_float(0x8000)));
}

TEST_CASE("bf16 widening keeps the top half of the f32 pattern") {
    CHECK(bf16_to_float(0x3f80) == 1.0f);
    CHECK(bf16_to_float(0xc040) == -3.0f);
    CHECK(bf16_to_float(0x7f7f) == std::bit_cast<float>(0x7f7f0000u));
}

TEST_CASE("f16 narrowing rounds to nearest even") {
    CHECK(float_to_half(1.0f) == 0x3c00);
    CHECK(float_to_half(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);     // tie, even stays
    CHECK(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)) == 0x3c02); // tie, odd rounds up
    CHECK(float_to_half(65504.0f) == 0x7bff);
    CHECK(float_to_half(65520.0f) == 0x7c00); // rounds past the largest finite
    CHECK(float_to_half(std::ldexp(1.0f, -25)) == 0x0000);
    CHECK(float_to_half(std::ldexp(3.0f, -26)) == 0x0001);
    CHECK(float_to_half(-0.0f) == 0x8000);
}

TEST_CASE("f64 narrowing avoids double rounding") {
    // 1 + 2^-11 + 2^-40 lies just above the f16 midpoint; a naive f64->f32->f16
    // path lands exactly on the tie and rounds down.
    const double d = 1.0 + std::ldexp(1.0, -11) + std::ldexp(1.0, -40);
    CHECK(float_to_half(static_cast<float>(d)) == 0x3c00);
    CHECK(double_to_half(d) == 0x3c01);
    const double b = 1.0 + std::ldexp(1.0, -8) + std::ldexp(1.0, -40);
    CHECK(double_to_bf16(b) == 0x3f81);
}

TEST_CASE("f64 narrowing matches an exhaustive nearest-value search") {
    const Nearest16 half([](std::uint16_t h) { return static_cast<double>(half_to_float(h)); });
    const Nearest16 bf16([](std::uint16_t h) { return static_cast<double>(bf16_to_float(h)); });
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> mant(-1.0, 1.0);
    std::uniform_int_distribution<int> ex(-26, 15);
    for (int i = 0; i < 4000; ++i) {
        const double d = std::ldexp(mant(rng), ex(rng));
        if (std::abs(d) < 65504.0) CHECK(double_to_half(d) == (d < 0 ? half(-d) | 0x8000 : half(d)));
        CHECK(double_to_bf16(d) == (d < 0 ? bf16(-d) | 0x8000 : bf16(d)));
    }
}

TEST_CASE("bulk widen/narrow round-trips every dtype") {
    for (DType dt : {DType::F32, DType::F16, DType::BF16}) {
        std::vector<double> v = {0.0, 1.5, -2.25, 3.0, 0.125};
        std::vector<std::byte> raw(v.size() * dtype_size(dt));
        narrow(dt, v, raw);
        std::vector<double> back(v.size());
        widen(dt, raw, back);
        CHECK(back == v);
        CHECK(parse_dtype(dtype_name(dt)) == dt);
    }
    CHECK_FALSE(parse_dtype("I8").has_value());
}

TEST_CASE("philox4x32-10 known-answer vectors") {
    using A4 = std::array<std::uint32_t, 4>;
    CHECK(philox4x32({0, 0, 0, 0}, {0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
    CHECK(philox4x32({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
          A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
    CHECK(philox4x32({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
          A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("counter rng is addressable and in range") {
    const CounterRng a(7, 1), b(7, 1), c(7, 2);
    double sum = 0.0;
    for (std::uint64_t i = 0; i < 20000; ++i) {
        const double u = a.uniform(i);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.01));
    CHECK(a.uniform(123, 4) == b.uniform(123, 4));
    CHECK(a.uniform(123, 4) != c.uniform(123, 4));
    CHECK(fnv1a32("") == 0x811c9dc5u);
    CHECK(fnv1a32("a") == 0xe40c292cu);
}

TEST_CASE("sha-256 of a known message") {
    Sha256 h;
    h.update(std::string_view("abc"));
    CHECK(to_hex(h.finish()) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const auto d = digest_from_hex("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(d[0] == 0xba);
    CHECK_THROWS_AS(digest_from_hex("abc"), ContractError);
    CHECK_THROWS_AS(digest_from_hex(std::string(64, 'g')), ContractError);
}

TEST_CASE("atomic output only appears on commit") {
    test::TempDir dir;
    const auto path = dir / "out.bin";
    {
        AtomicOutput out(path);
        const std::byte b[3] = {std::byte{1}, std::byte{2}, std::byte{3}};
        out.file().write_at(0, b);
        CHECK_FALSE(std::filesystem::exists(path));
    }
    CHECK_FALSE(std::filesystem::exists(path));
    CHECK_FALSE(std::filesystem::exists(path.string() + ".partial"));
    {
        AtomicOutput out(path);
        const std::byte b[2] = {std::byte{9}, std::byte{8}};
        out.file().write_at(0, b);
        out.commit();
    }
    CHECK(test::read_file(path).size() == 2);
    const File f(path, File::Mode::Read);
    std::byte buf[4];
    CHECK(f.read_at(0, buf) == 2);
    CHECK_THROWS_AS(f.read_exact(0, buf), ContractError);
    CHECK_THROWS_AS(File(dir / "missing", File::Mode::Read), IoError);
}

TEST_CASE("parallel_for covers every item and propagates errors") {
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](const auto &h) { return h.load() == 1; }));
    CHECK_THROWS_AS(parallel_for(100, 3,
                                 [](std::size_t i) {
                                     if (i == 50) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
}
