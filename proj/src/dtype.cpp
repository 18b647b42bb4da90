#include "abltx/dtype.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace abltx {

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
    }
    throw std::logic_error("bad dtype");
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    throw std::logic_error("bad dtype");
}

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    return std::nullopt;
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = std::uint32_t{h & 0x8000u} << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else if (exp != 0) {
        bits = sign | ((exp + 112) << 23) | (mant << 13);
    } else if (mant == 0) {
        bits = sign;
    } else {
        // subnormal: renormalize
        int e = -1;
        do {
            ++e;
            mant <<= 1;
        } while ((mant & 0x400u) == 0);
        bits = sign | static_cast<std::uint32_t>(112 - e) << 23 | ((mant & 0x3FFu) << 13);
    }
    return std::bit_cast<float>(bits);
}

float bf16_to_float(std::uint16_t b) {
    return std::bit_cast<float>(std::uint32_t{b} << 16);
}

std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t ax = x & 0x7FFFFFFFu;
    if (ax >= 0x7F800000u) {
        if (ax == 0x7F800000u) return sign | 0x7C00u;
        return sign | 0x7E00u | static_cast<std::uint16_t>((ax >> 13) & 0x3FFu);
    }
    if (ax >= 0x477FF000u) return sign | 0x7C00u; // >= 65520 overflows
    if (ax < 0x38800000u) {
        // half subnormal range (< 2^-14)
        if (ax <= 0x33000000u) return sign; // <= 2^-25 rounds to zero (ties to even)
        const std::uint32_t mant = (ax & 0x7FFFFFu) | 0x800000u;
        const int shift = 126 - static_cast<int>(ax >> 23);
        std::uint32_t r = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t half = 1u << (shift - 1);
        if (rem > half || (rem == half && (r & 1u))) ++r;
        return sign | static_cast<std::uint16_t>(r);
    }
    std::uint32_t r = ax - 0x38000000u;
    const std::uint32_t rem = r & 0x1FFFu;
    r >>= 13;
    if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) ++r;
    return sign | static_cast<std::uint16_t>(r);
}

std::uint16_t float_to_bf16(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7FFFFFFFu) > 0x7F800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    const std::uint32_t rounding = 0x7FFFu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>((x + rounding) >> 16);
}

namespace {

float round_to_odd_float(double d) {
    float f = static_cast<float>(d);
    if (std::isnan(d) || static_cast<double>(f) == d) return f;
    if (std::fabs(static_cast<double>(f)) > std::fabs(d)) f = std::nextafter(f, 0.0f);
    return std::bit_cast<float>(std::bit_cast<std::uint32_t>(f) | 1u);
}

} // namespace

float double_to_float(double d) { return static_cast<float>(d); }

std::uint16_t double_to_half(double d) { return float_to_half(round_to_odd_float(d)); }

std::uint16_t double_to_bf16(double d) { return float_to_bf16(round_to_odd_float(d)); }

double load_widened(DType dtype, const std::byte *p) {
    switch (dtype) {
    case DType::F32: {
        float f;
        std::memcpy(&f, p, 4);
        return f;
    }
    case DType::F16: {
        std::uint16_t h;
        std::memcpy(&h, p, 2);
        return half_to_float(h);
    }
    case DType::BF16: {
        std::uint16_t b;
        std::memcpy(&b, p, 2);
        return bf16_to_float(b);
    }
    }
    throw std::logic_error("bad dtype");
}

void store_narrowed(DType dtype, double value, std::byte *p) {
    switch (dtype) {
    case DType::F32: {
        const float f = double_to_float(value);
        std::memcpy(p, &f, 4);
        return;
    }
    case DType::F16: {
        const std::uint16_t h = double_to_half(value);
        std::memcpy(p, &h, 2);
        return;
    }
    case DType::BF16: {
        const std::uint16_t b = double_to_bf16(value);
        std::memcpy(p, &b, 2);
        return;
    }
    }
    throw std::logic_error("bad dtype");
}

void widen(DType dtype, std::span<const std::byte> raw, std::span<double> out) {
    const std::size_t width = dtype_size(dtype);
    if (raw.size() != out.size() * width) throw std::logic_error("widen: size mismatch");
    if (dtype == DType::F32) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            float f;
            std::memcpy(&f, raw.data() + 4 * i, 4);
            out[i] = f;
        }
        return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = load_widened(dtype, raw.data() + width * i);
}

void widen(DType dtype, std::span<const std::byte> raw, std::span<float> out) {
    const std::size_t width = dtype_size(dtype);
    if (raw.size() != out.size() * width) throw std::logic_error("widen: size mismatch");
    if (dtype == DType::F32) {
        std::memcpy(out.data(), raw.data(), raw.size());
        return;
    }
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(load_widened(dtype, raw.data() + width * i));
}

void narrow(DType dtype, std::span<const double> values, std::span<std::byte> raw) {
    const std::size_t width = dtype_size(dtype);
    if (raw.size() != values.size() * width) throw std::logic_error("narrow: size mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) store_narrowed(dtype, values[i], raw.data() + width * i);
}

} // namespace abltx
