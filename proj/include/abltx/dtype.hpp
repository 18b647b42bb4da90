#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace abltx {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are little-endian; big-endian hosts are not supported");

enum class DType : std::uint8_t { F32, F16, BF16 };

std::size_t dtype_size(DType dtype);
std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);

float half_to_float(std::uint16_t h);
float bf16_to_float(std::uint16_t b);

// Round-to-nearest-even narrowing.
std::uint16_t float_to_half(float f);
std::uint16_t float_to_bf16(float f);

// Single correctly rounded (nearest-even) conversion from f64. Goes through
// an f32 intermediate rounded to odd, so there is no double-rounding error.
float double_to_float(double d);
std::uint16_t double_to_half(double d);
std::uint16_t double_to_bf16(double d);

double load_widened(DType dtype, const std::byte *p);
void store_narrowed(DType dtype, double value, std::byte *p);

// Bulk variants. `raw` must hold exactly out.size() elements of `dtype`.
void widen(DType dtype, std::span<const std::byte> raw, std::span<double> out);
void widen(DType dtype, std::span<const std::byte> raw, std::span<float> out);
void narrow(DType dtype, std::span<const double> values, std::span<std::byte> raw);

} // namespace abltx
