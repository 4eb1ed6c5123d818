#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "railnet/fixed_point.hpp"

namespace railnet {

// Dense 4-D shape, row-major with the last axis fastest. For activations the
// axes mean NHWC; for convolution weights the same container is used with
// axes (kh, kw, in_ch, out_ch).
struct Shape4 {
  int n = 1, h = 1, w = 1, c = 1;

  long long elems() const { return 1ll * n * h * w * c; }
  void check_positive() const;
  std::string to_string() const;

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

struct Tensor {
  Shape4 shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape4 s, float fill = 0.0f);
  static Tensor filled(Shape4 s, float value) { return Tensor(s, value); }

  size_t index(int i0, int i1, int i2, int i3) const {
    return ((size_t(i0) * shape.h + i1) * shape.w + i2) * shape.c + i3;
  }
  float at(int i0, int i1, int i2, int i3) const { return data[index(i0, i1, i2, i3)]; }
  float& at(int i0, int i1, int i2, int i3) { return data[index(i0, i1, i2, i3)]; }
};

// Integer-raw tensor carrying one Q-format for the whole tensor (the
// "layered" granularity: one format per layer, not per channel).
struct FxTensor {
  Shape4 shape;
  std::vector<int32_t> raw;
  QFormat q;

  FxTensor() = default;
  FxTensor(Shape4 s, QFormat fmt, int32_t fill = 0);

  size_t index(int i0, int i1, int i2, int i3) const {
    return ((size_t(i0) * shape.h + i1) * shape.w + i2) * shape.c + i3;
  }
  int32_t at(int i0, int i1, int i2, int i3) const { return raw[index(i0, i1, i2, i3)]; }
  int32_t& at(int i0, int i1, int i2, int i3) { return raw[index(i0, i1, i2, i3)]; }

  void check_raws_in_range() const;
};

// Copy a (h,w,c) block out of `t`, batch axis preserved. `origin` may lie
// outside the tensor (negative included); with zero_pad the out-of-bounds
// positions read as raw 0, otherwise they are an error. This is the data
// movement primitive of the tiled executor, so raws are copied untouched and
// the Q-format is preserved.
FxTensor extract_tile(const FxTensor& t, std::array<int, 3> origin,
                      std::array<int, 3> size, bool zero_pad);

}  // namespace railnet
