#include "railnet/tensor.hpp"

#include <stdexcept>

#include "railnet/errors.hpp"

namespace railnet {

void Shape4::check_positive() const {
  if (n < 1 || h < 1 || w < 1 || c < 1)
    throw std::invalid_argument("shape dims must be >= 1, got " + to_string());
}

std::string Shape4::to_string() const {
  return "[" + std::to_string(n) + "," + std::to_string(h) + "," +
         std::to_string(w) + "," + std::to_string(c) + "]";
}

Tensor::Tensor(Shape4 s, float fill) : shape(s) {
  s.check_positive();
  data.assign(size_t(s.elems()), fill);
}

FxTensor::FxTensor(Shape4 s, QFormat fmt, int32_t fill) : shape(s), q(fmt) {
  s.check_positive();
  q.check_valid();
  raw.assign(size_t(s.elems()), fill);
}

void FxTensor::check_raws_in_range() const {
  for (int32_t r : raw)
    if (!q.in_range(r))
      throw std::out_of_range("FxTensor raw " + std::to_string(r) +
                              " out of range for " + q.to_string());
}

FxTensor extract_tile(const FxTensor& t, std::array<int, 3> origin,
                      std::array<int, 3> size, bool zero_pad) {
  const auto [h0, w0, c0] = origin;
  const auto [th, tw, tc] = size;
  if (th < 1 || tw < 1 || tc < 1)
    throw std::invalid_argument("extract_tile: tile dims must be >= 1");

  FxTensor out(Shape4{t.shape.n, th, tw, tc}, t.q, 0);
  for (int n = 0; n < t.shape.n; ++n) {
    for (int i = 0; i < th; ++i) {
      const int sh = h0 + i;
      for (int j = 0; j < tw; ++j) {
        const int sw = w0 + j;
        for (int k = 0; k < tc; ++k) {
          const int sc = c0 + k;
          const bool inside = sh >= 0 && sh < t.shape.h && sw >= 0 &&
                              sw < t.shape.w && sc >= 0 && sc < t.shape.c;
          if (inside) {
            out.at(n, i, j, k) = t.at(n, sh, sw, sc);
          } else if (!zero_pad) {
            throw std::out_of_range("extract_tile: (" + std::to_string(sh) +
                                    "," + std::to_string(sw) + "," +
                                    std::to_string(sc) +
                                    ") outside tensor " + t.shape.to_string());
          }
          // zero_pad leaves the prefilled raw 0 (real 0.0 in every format)
        }
      }
    }
  }
  return out;
}

}  // namespace railnet
