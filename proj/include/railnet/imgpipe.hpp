#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "railnet/tensor.hpp"

namespace railnet {

// Inspection camera frame: fixed 128x128 RGB, one byte per channel.
struct ImageU8 {
  static constexpr int kH = 128;
  static constexpr int kW = 128;
  static constexpr int kC = 3;

  std::vector<uint8_t> px;  // row-major, channel fastest

  ImageU8() : px(size_t(kH) * kW * kC, 0) {}

  uint8_t at(int y, int x, int c) const {
    return px[(size_t(y) * kW + x) * kC + c];
  }
  uint8_t& at(int y, int x, int c) {
    return px[(size_t(y) * kW + x) * kC + c];
  }
};

// ---------------------------------------------------------------------------
// Raster primitives on h*w*3 byte buffers (channel fastest). Kept generic so
// the index mappings are checkable on tiny patches.
// ---------------------------------------------------------------------------

// 3x3 binomial blur ([1,2,1] x [1,2,1] / 16), edges clamped. Constants are
// preserved exactly; rounding is (sum + 8) / 16.
std::vector<uint8_t> blur3_u8(const std::vector<uint8_t>& px, int h, int w);

// Seeded Gaussian noise, rounded to integers and clamped to [0,255].
std::vector<uint8_t> add_gaussian_noise_u8(const std::vector<uint8_t>& px,
                                           double sigma, uint64_t seed);

std::vector<uint8_t> flip_h_u8(const std::vector<uint8_t>& px, int h, int w);
std::vector<uint8_t> flip_v_u8(const std::vector<uint8_t>& px, int h, int w);

// k quarter-turns clockwise (k taken mod 4). Output dims swap for odd k:
// *out_h/*out_w receive the rotated size.
std::vector<uint8_t> rotate_quarter_u8(const std::vector<uint8_t>& px, int h,
                                       int w, int k, int* out_h, int* out_w);

// Nearest-neighbor resize; source pixel = floor((i + 0.5) * src / dst).
std::vector<uint8_t> resize_nearest_u8(const std::vector<uint8_t>& px, int h,
                                       int w, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentSpec {
  bool blur = false;
  bool noise = false;
  double noise_sigma = 8.0;  // pixel units
  enum class Flip { None, Horizontal, Vertical };
  Flip flip = Flip::None;
  int rotate_k = 0;  // quarter turns clockwise, 0..3
  uint64_t seed = 0;
};

// Ops applied in fixed order: blur, noise, flip, rotate. Deterministic for a
// given spec. Throws std::invalid_argument on sigma < 0 or rotate_k outside
// 0..3.
ImageU8 augment(const ImageU8& img, const AugmentSpec& spec);

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

// Decode a PNG or binary PPM (P6, maxval 255), picked apart by magic bytes,
// and nearest-neighbor resize to 128x128. Throws DataError on unreadable or
// undecodable input.
ImageU8 load_image(const std::string& path);

void save_png(const ImageU8& img, const std::string& path);

// Decode + resize + scale to [0,1]: tensor value = byte / 255.
Tensor load_normalize(const std::string& path);

// The same scaling for an in-memory image.
Tensor to_tensor(const ImageU8& img);

// ---------------------------------------------------------------------------
// Dataset split
// ---------------------------------------------------------------------------

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> val;
};

// Sort paths lexicographically, shuffle with a seeded Fisher-Yates, then cut
// round(0.88n) train / round(0.06n) test / remainder val. Disjoint and
// covering by construction. Throws DataError when fewer than 3 paths.
DatasetSplit split_dataset(const std::vector<std::string>& paths, uint64_t seed);

// Seeded synthetic inspection-style frame (smooth low-frequency structure
// plus a few sharp streaks); used for desk-scale calibration and demos where
// no camera data exists.
ImageU8 synthetic_image(uint64_t seed);

}  // namespace railnet
