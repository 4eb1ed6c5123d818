#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "railnet/fixed_point.hpp"
#include "support/oracles.hpp"

using namespace railnet;

TEST_CASE("QFormat ranges and validity") {
  QFormat q{12, 8};
  CHECK(q.valid());
  CHECK(q.raw_min() == -2048);
  CHECK(q.raw_max() == 2047);
  CHECK(q.value_min() == doctest::Approx(-8.0));
  CHECK(q.value_max() == doctest::Approx(2047.0 / 256.0));
  CHECK(q.ulp() == doctest::Approx(1.0 / 256.0));
  CHECK(q.to_string() == "Q12.8");

  CHECK_FALSE(QFormat{1, 0}.valid());
  CHECK_FALSE(QFormat{33, 0}.valid());
  CHECK_FALSE(QFormat{12, 12}.valid());
  CHECK_FALSE(QFormat{12, -1}.valid());
  CHECK(QFormat{2, 1}.valid());
  CHECK(QFormat{32, 31}.valid());
  CHECK_THROWS_AS(quantize(0.0, QFormat{12, 12}), std::invalid_argument);
}

TEST_CASE("quantize pinned values at Q12.8") {
  QFormat q{12, 8};
  CHECK(quantize(0.5, q) == 128);
  CHECK(quantize(1e6, q) == 2047);
  CHECK(quantize(0.3, q) == 77);
  CHECK(quantize(-1e6, q) == -2048);
  CHECK(quantize(0.0, q) == 0);

  bool sat = false;
  quantize(1e6, q, &sat);
  CHECK(sat);
  sat = false;
  quantize(0.5, q, &sat);
  CHECK_FALSE(sat);

  CHECK_THROWS_AS(quantize(std::numeric_limits<double>::quiet_NaN(), q),
                  std::invalid_argument);
}

TEST_CASE("dequantize pinned values and range check") {
  QFormat q{12, 8};
  CHECK(dequantize(128, q) == 0.5);
  CHECK(dequantize(-2048, q) == -8.0);
  CHECK(dequantize(77, q) == 0.30078125);
  CHECK_THROWS_AS(dequantize(2048, q), std::out_of_range);
  CHECK_THROWS_AS(dequantize(-2049, q), std::out_of_range);
}

TEST_CASE("rounding is half away from zero") {
  QFormat q{12, 1};  // steps of 0.5
  CHECK(quantize(0.25, q) == 1);    // tie rounds away
  CHECK(quantize(-0.25, q) == -1);  // tie rounds away, negative side
  CHECK(quantize(0.24, q) == 0);
  CHECK(quantize(-0.24, q) == 0);

  CHECK(round_shift_right(3, 1) == 2);     // 1.5 -> 2
  CHECK(round_shift_right(-3, 1) == -2);   // -1.5 -> -2
  CHECK(round_shift_right(5, 2) == 1);     // 1.25 -> 1
  CHECK(round_shift_right(-5, 2) == -1);
  CHECK(round_shift_right(7, 0) == 7);
  CHECK(round_shift_right(1, 63) == 0);
  CHECK(round_shift_right(1, 100) == 0);
  CHECK(round_shift_right(std::numeric_limits<int64_t>::max(), 63) == 1);
  CHECK(round_shift_right(-std::numeric_limits<int64_t>::max(), 63) == -1);
}

TEST_CASE("requantize pinned values") {
  CHECK(requantize(1000, QFormat{22, 16}, QFormat{12, 8}) == 4);
  CHECK(requantize(2047, QFormat{12, 8}, QFormat{22, 8}) == 2047);

  // identity on in-range raws
  QFormat q{12, 5};
  for (int64_t raw = q.raw_min(); raw <= q.raw_max(); ++raw)
    CHECK(requantize(raw, q, q) == raw);

  CHECK_THROWS_AS(requantize(4096, QFormat{12, 8}, QFormat{12, 8}),
                  std::out_of_range);

  // widening shift then saturation
  CHECK(requantize(2047, QFormat{12, 0}, QFormat{12, 4}) == 2047);
  bool sat = false;
  requantize(2047, QFormat{12, 0}, QFormat{12, 4}, &sat);
  CHECK(sat);
}

TEST_CASE("mac pinned values") {
  WideAcc acc{0, 16};
  QFormat q{12, 8};
  mac(128, q, 128, q, acc);
  CHECK(acc.raw == 16384);  // 0.5 * 0.5 = 0.25 at frac 16

  mac(0, q, 1234 % 2048, q, acc);
  CHECK(acc.raw == 16384);

  WideAcc acc2{0, 16};
  mac(77, q, 77, q, acc2);
  CHECK(acc2.raw == 5929);

  WideAcc bad{0, 15};
  CHECK_THROWS_AS(mac(1, q, 1, q, bad), std::invalid_argument);
  WideAcc acc3{0, 16};
  CHECK_THROWS_AS(mac(int32_t(4096), q, 1, q, acc3), std::out_of_range);
}

TEST_CASE("mac overflow is a hard error") {
  QFormat q{32, 0};
  WideAcc acc{std::numeric_limits<int64_t>::max(), 0};
  CHECK_THROWS_AS(mac(1, q, 1, q, acc), std::overflow_error);
}

TEST_CASE("roundtrip error is at most half an ulp") {
  std::mt19937_64 rng(7);
  const QFormat formats[] = {{12, 0}, {12, 5}, {12, 11}, {22, 13}, {8, 4}, {32, 20}};
  for (const QFormat& q : formats) {
    std::uniform_real_distribution<double> dist(q.value_min(), q.value_max());
    for (int i = 0; i < 2000; ++i) {
      double x = dist(rng);
      double back = dequantize(quantize(x, q), q);
      CHECK(std::abs(back - x) <= 0.5 * q.ulp() * (1 + 1e-12));
    }
  }
}

TEST_CASE("quantize is monotone and clamps exactly at the rails") {
  std::mt19937_64 rng(11);
  QFormat q{12, 6};
  std::uniform_real_distribution<double> dist(-100.0, 100.0);
  for (int i = 0; i < 5000; ++i) {
    double a = dist(rng), b = dist(rng);
    if (a > b) std::swap(a, b);
    CHECK(quantize(a, q) <= quantize(b, q));
  }
  CHECK(quantize(q.value_max(), q) == q.raw_max());
  CHECK(quantize(q.value_max() + 1.0, q) == q.raw_max());
  CHECK(quantize(q.value_min(), q) == q.raw_min());
  CHECK(quantize(q.value_min() - 1.0, q) == q.raw_min());
}

TEST_CASE("quantize agrees with the exact rational oracle") {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> total(2, 32);
  std::uniform_real_distribution<double> mag(-20.0, 20.0);
  for (int i = 0; i < 20000; ++i) {
    int t = total(rng);
    std::uniform_int_distribution<int> frac(0, t - 1);
    QFormat q{t, frac(rng)};
    double x = std::ldexp(mag(rng), int(rng() % 24) - 12);
    CAPTURE(x);
    CAPTURE(q.total_bits);
    CAPTURE(q.frac_bits);
    CHECK(int64_t(quantize(x, q)) == oracle::quantize(x, q));
  }
}

TEST_CASE("round_shift_right agrees with the big-integer oracle") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 20000; ++i) {
    int64_t v = int64_t(rng());
    if (v == std::numeric_limits<int64_t>::min()) continue;
    int shift = int(rng() % 66);
    CAPTURE(v);
    CAPTURE(shift);
    CHECK(round_shift_right(v, shift) == oracle::round_shift(v, shift));
  }
}

TEST_CASE("rescale_raw agrees with the rational oracle") {
  std::mt19937_64 rng(19);
  for (int i = 0; i < 20000; ++i) {
    int from_frac = int(rng() % 40);
    int t = 2 + int(rng() % 31);
    QFormat to{t, int(rng() % t)};
    int64_t raw = int64_t(rng() % (1ull << 44)) - (1ll << 43);
    CAPTURE(raw);
    CAPTURE(from_frac);
    CHECK(int64_t(rescale_raw(raw, from_frac, to)) ==
          oracle::rescale(oracle::BigInt(raw), from_frac, to));
  }
}

TEST_CASE("mac chains match arbitrary-precision accumulation") {
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 300; ++rep) {
    int ta = 2 + int(rng() % 11), tb = 2 + int(rng() % 11);
    QFormat a_q{ta, int(rng() % ta)}, b_q{tb, int(rng() % tb)};
    WideAcc acc{0, a_q.frac_bits + b_q.frac_bits};
    oracle::BigInt expect = 0;
    int len = 1 + int(rng() % 64);
    for (int i = 0; i < len; ++i) {
      auto draw = [&](const QFormat& q) {
        return int32_t(int64_t(rng() % uint64_t(q.raw_max() - q.raw_min() + 1)) +
                       q.raw_min());
      };
      int32_t a = draw(a_q), b = draw(b_q);
      mac(a, a_q, b, b_q, acc);
      expect += oracle::BigInt(a) * b;
    }
    CHECK(oracle::BigInt(acc.raw) == expect);
  }
}
