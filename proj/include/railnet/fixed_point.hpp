#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace railnet {

// Rounding is one global constant so every conversion in the model agrees.
enum class Rounding { HalfAwayFromZero };
inline constexpr Rounding kRoundingMode = Rounding::HalfAwayFromZero;

// Two's-complement fixed-point format. value = raw * 2^(-frac_bits).
// Widths of 12 (weights/activations) and 22 (biases) are the ones the
// accelerator model uses; anything in [2, 32] is accepted.
struct QFormat {
  int total_bits = 12;
  int frac_bits = 0;

  bool valid() const {
    return total_bits >= 2 && total_bits <= 32 && frac_bits >= 0 &&
           frac_bits <= total_bits - 1;
  }
  void check_valid() const {
    if (!valid())
      throw std::invalid_argument("invalid QFormat " + to_string());
  }

  int64_t raw_min() const { return -(int64_t{1} << (total_bits - 1)); }
  int64_t raw_max() const { return (int64_t{1} << (total_bits - 1)) - 1; }
  bool in_range(int64_t raw) const { return raw >= raw_min() && raw <= raw_max(); }

  double value_min() const { return std::ldexp(double(raw_min()), -frac_bits); }
  double value_max() const { return std::ldexp(double(raw_max()), -frac_bits); }
  // Size of one quantization step.
  double ulp() const { return std::ldexp(1.0, -frac_bits); }

  std::string to_string() const {
    return "Q" + std::to_string(total_bits) + "." + std::to_string(frac_bits);
  }

  friend bool operator==(const QFormat&, const QFormat&) = default;
};

// v / 2^shift, rounding half away from zero. shift >= 0, v > INT64_MIN.
inline int64_t round_shift_right(int64_t v, int shift) {
  if (shift <= 0) return v;
  if (shift >= 64) return 0;  // |v| < 2^63, so |v| / 2^shift < 1/2
  // Unsigned magnitude arithmetic: |v| <= 2^63 - 1 and half <= 2^62, so the
  // add cannot wrap (a signed v + half would, for |v| near the type limit).
  const uint64_t mag = v < 0 ? 0ull - uint64_t(v) : uint64_t(v);
  const uint64_t q = (mag + (uint64_t{1} << (shift - 1))) >> shift;
  return v < 0 ? -int64_t(q) : int64_t(q);
}

// quantize: real -> raw. Saturates at the format bounds; NaN is an error.
// If `saturated` is given it is set when the clamp actually engaged.
inline int32_t quantize(double x, const QFormat& q, bool* saturated = nullptr) {
  q.check_valid();
  if (std::isnan(x)) throw std::invalid_argument("quantize: NaN input");
  const double scaled = std::ldexp(x, q.frac_bits);
  // Exact for |r| < 2^53; raw bounds are < 2^31 so the comparisons are safe.
  const double r = std::round(scaled);  // rounds half away from zero
  if (r > double(q.raw_max())) {
    if (saturated) *saturated = true;
    return int32_t(q.raw_max());
  }
  if (r < double(q.raw_min())) {
    if (saturated) *saturated = true;
    return int32_t(q.raw_min());
  }
  return int32_t(r);
}

// dequantize: raw -> real, exact (raw and 2^-frac are both representable).
inline double dequantize(int64_t raw, const QFormat& q) {
  q.check_valid();
  if (!q.in_range(raw))
    throw std::out_of_range("dequantize: raw " + std::to_string(raw) +
                            " out of range for " + q.to_string());
  return std::ldexp(double(raw), -q.frac_bits);
}

// Shift-round-saturate a raw value carried at `from_frac` fraction bits into
// format `to`. This is the core of requantize and of the accumulator ->
// activation step; `from_frac` alone decides the shift, no source width needed.
inline int32_t rescale_raw(int64_t raw, int from_frac, const QFormat& to,
                           bool* saturated = nullptr) {
  to.check_valid();
  const int d = from_frac - to.frac_bits;
  __int128 scaled;
  if (d >= 0) {
    scaled = round_shift_right(raw, d);
  } else {
    scaled = __int128(raw) << (-d);
  }
  if (scaled > __int128(to.raw_max())) {
    if (saturated) *saturated = true;
    return int32_t(to.raw_max());
  }
  if (scaled < __int128(to.raw_min())) {
    if (saturated) *saturated = true;
    return int32_t(to.raw_min());
  }
  return int32_t(scaled);
}

// requantize between two declared formats (shift-round-saturate).
inline int32_t requantize(int64_t raw, const QFormat& from, const QFormat& to,
                          bool* saturated = nullptr) {
  from.check_valid();
  if (!from.in_range(raw))
    throw std::out_of_range("requantize: raw " + std::to_string(raw) +
                            " out of range for " + from.to_string());
  return rescale_raw(raw, from.frac_bits, to, saturated);
}

// Exact 64-bit product/sum accumulator. frac_bits of a product is the sum of
// the factors' frac_bits; sums of up to 2^18 in-range 32-bit products fit.
struct WideAcc {
  int64_t raw = 0;
  int frac_bits = 0;
};

// acc += a * b, exactly. 64-bit overflow is a hard error; it cannot occur
// for the layer sizes this model supports.
inline void mac(int32_t a_raw, const QFormat& a_q, int32_t b_raw,
                const QFormat& b_q, WideAcc& acc) {
  a_q.check_valid();
  b_q.check_valid();
  if (acc.frac_bits != a_q.frac_bits + b_q.frac_bits)
    throw std::invalid_argument("mac: accumulator frac_bits " +
                                std::to_string(acc.frac_bits) + " != " +
                                std::to_string(a_q.frac_bits) + " + " +
                                std::to_string(b_q.frac_bits));
  if (!a_q.in_range(a_raw) || !b_q.in_range(b_raw))
    throw std::out_of_range("mac: operand out of range");
  int64_t prod;
  if (__builtin_mul_overflow(int64_t(a_raw), int64_t(b_raw), &prod) ||
      __builtin_add_overflow(acc.raw, prod, &acc.raw))
    throw std::overflow_error("mac: 64-bit accumulator overflow");
}

}  // namespace railnet
