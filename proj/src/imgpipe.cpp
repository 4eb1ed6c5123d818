#include "railnet/imgpipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include <png.h>

#include "railnet/errors.hpp"

namespace railnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct FileCloser {
  FILE* f = nullptr;
  ~FileCloser() {
    if (f) fclose(f);
  }
};

std::vector<uint8_t> decode_png(const std::string& path, int* out_h, int* out_w) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot open image: " + path);
  FileCloser closer{fp};

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8))
    throw DataError("not a PNG file: " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("libpng: read struct allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng: info struct allocation failed");
  }

  // Buffers live outside the setjmp region so a longjmp cannot leak them.
  std::vector<uint8_t> pixels;
  std::vector<png_bytep> rows;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("PNG decode failed: " + path);
  }

  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr,
               nullptr, nullptr);
  if (width == 0 || height == 0) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("zero-size image: " + path);
  }

  // Normalize every variant to 8-bit RGB.
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  if (png_get_rowbytes(png, info) != size_t(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("PNG decode produced an unexpected pixel layout: " + path);
  }

  pixels.resize(size_t(height) * width * 3);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y)
    rows[y] = pixels.data() + size_t(y) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  *out_h = int(height);
  *out_w = int(width);
  return pixels;
}

std::vector<uint8_t> decode_ppm(const std::string& path, int* out_h, int* out_w) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image: " + path);
  std::string body((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());

  size_t pos = 0;
  auto skip_space = [&] {
    while (pos < body.size()) {
      if (std::isspace(static_cast<unsigned char>(body[pos]))) {
        ++pos;
      } else if (body[pos] == '#') {
        while (pos < body.size() && body[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    size_t start = pos;
    while (pos < body.size() && std::isdigit(static_cast<unsigned char>(body[pos])))
      ++pos;
    if (pos == start) throw DataError("malformed PPM header: " + path);
    return std::stol(body.substr(start, pos - start));
  };

  if (body.size() < 2 || body[0] != 'P' || body[1] != '6')
    throw DataError("not a P6 PPM file: " + path);
  pos = 2;
  const long w = read_int();
  const long h = read_int();
  const long maxval = read_int();
  if (w <= 0 || h <= 0) throw DataError("zero-size image: " + path);
  if (maxval != 255)
    throw DataError("unsupported PPM maxval " + std::to_string(maxval) + ": " + path);
  if (pos >= body.size() || !std::isspace(static_cast<unsigned char>(body[pos])))
    throw DataError("malformed PPM header: " + path);
  ++pos;  // single whitespace separates header from raster

  const size_t need = size_t(w) * size_t(h) * 3;
  if (body.size() - pos < need)
    throw DataError("truncated PPM raster: " + path);
  std::vector<uint8_t> pixels(need);
  std::memcpy(pixels.data(), body.data() + pos, need);
  *out_h = int(h);
  *out_w = int(w);
  return pixels;
}

uint8_t clamp_byte(long v) {
  return uint8_t(std::clamp(v, 0l, 255l));
}

}  // namespace

// ---------------------------------------------------------------------------
// Raster primitives
// ---------------------------------------------------------------------------

std::vector<uint8_t> blur3_u8(const std::vector<uint8_t>& px, int h, int w) {
  if (h < 1 || w < 1 || px.size() != size_t(h) * w * 3)
    throw std::invalid_argument("blur3_u8: bad raster dimensions");
  static constexpr int kWeight[3] = {1, 2, 1};
  std::vector<uint8_t> out(px.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        long sum = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int sy = std::clamp(y + dy, 0, h - 1);
            const int sx = std::clamp(x + dx, 0, w - 1);
            sum += long(kWeight[dy + 1]) * kWeight[dx + 1] *
                   px[(size_t(sy) * w + sx) * 3 + c];
          }
        out[(size_t(y) * w + x) * 3 + c] = uint8_t((sum + 8) / 16);
      }
  return out;
}

std::vector<uint8_t> add_gaussian_noise_u8(const std::vector<uint8_t>& px,
                                           double sigma, uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("noise sigma must be >= 0");
  std::vector<uint8_t> out(px.size());
  // Box-Muller on the raw engine keeps the byte stream identical across
  // library implementations.
  std::mt19937_64 rng(seed);
  auto unit = [&rng] {
    return (double(rng() >> 11) + 0.5) * 0x1p-53;  // (0,1)
  };
  double spare = 0.0;
  bool have_spare = false;
  for (size_t i = 0; i < px.size(); ++i) {
    double z;
    if (have_spare) {
      z = spare;
      have_spare = false;
    } else {
      const double u1 = unit(), u2 = unit();
      const double r = std::sqrt(-2.0 * std::log(u1));
      z = r * std::cos(2.0 * kPi * u2);
      spare = r * std::sin(2.0 * kPi * u2);
      have_spare = true;
    }
    out[i] = clamp_byte(long(px[i]) + std::lround(z * sigma));
  }
  return out;
}

std::vector<uint8_t> flip_h_u8(const std::vector<uint8_t>& px, int h, int w) {
  std::vector<uint8_t> out(px.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[(size_t(y) * w + x) * 3 + c] = px[(size_t(y) * w + (w - 1 - x)) * 3 + c];
  return out;
}

std::vector<uint8_t> flip_v_u8(const std::vector<uint8_t>& px, int h, int w) {
  std::vector<uint8_t> out(px.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[(size_t(y) * w + x) * 3 + c] = px[(size_t(h - 1 - y) * w + x) * 3 + c];
  return out;
}

std::vector<uint8_t> rotate_quarter_u8(const std::vector<uint8_t>& px, int h,
                                       int w, int k, int* out_h, int* out_w) {
  k = ((k % 4) + 4) % 4;
  const int oh = (k % 2 == 0) ? h : w;
  const int ow = (k % 2 == 0) ? w : h;
  std::vector<uint8_t> out(px.size());
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      int sy = y, sx = x;
      switch (k) {
        case 1:  // 90 degrees clockwise
          sy = h - 1 - x;
          sx = y;
          break;
        case 2:
          sy = h - 1 - y;
          sx = w - 1 - x;
          break;
        case 3:  // 90 degrees counter-clockwise
          sy = x;
          sx = w - 1 - y;
          break;
        default:
          break;
      }
      for (int c = 0; c < 3; ++c)
        out[(size_t(y) * ow + x) * 3 + c] = px[(size_t(sy) * w + sx) * 3 + c];
    }
  *out_h = oh;
  *out_w = ow;
  return out;
}

std::vector<uint8_t> resize_nearest_u8(const std::vector<uint8_t>& px, int h,
                                       int w, int out_h, int out_w) {
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1)
    throw std::invalid_argument("resize_nearest_u8: bad dimensions");
  std::vector<uint8_t> out(size_t(out_h) * out_w * 3);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, int((y + 0.5) * h / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(w - 1, int((x + 0.5) * w / out_w));
      for (int c = 0; c < 3; ++c)
        out[(size_t(y) * out_w + x) * 3 + c] = px[(size_t(sy) * w + sx) * 3 + c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

ImageU8 augment(const ImageU8& img, const AugmentSpec& spec) {
  if (spec.noise_sigma < 0.0)
    throw std::invalid_argument("augment: noise sigma must be >= 0");
  if (spec.rotate_k < 0 || spec.rotate_k > 3)
    throw std::invalid_argument("augment: rotate_k must be in 0..3");

  std::vector<uint8_t> px = img.px;
  int h = ImageU8::kH, w = ImageU8::kW;
  if (spec.blur) px = blur3_u8(px, h, w);
  if (spec.noise) px = add_gaussian_noise_u8(px, spec.noise_sigma, spec.seed);
  if (spec.flip == AugmentSpec::Flip::Horizontal) px = flip_h_u8(px, h, w);
  if (spec.flip == AugmentSpec::Flip::Vertical) px = flip_v_u8(px, h, w);
  if (spec.rotate_k != 0) px = rotate_quarter_u8(px, h, w, spec.rotate_k, &h, &w);

  ImageU8 out;
  out.px = std::move(px);
  return out;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

ImageU8 load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open image: " + path);
  char magic[2] = {0, 0};
  probe.read(magic, 2);
  probe.close();

  int h = 0, w = 0;
  std::vector<uint8_t> px;
  if (magic[0] == char(0x89) && magic[1] == 'P') {
    px = decode_png(path, &h, &w);
  } else if (magic[0] == 'P' && magic[1] == '6') {
    px = decode_ppm(path, &h, &w);
  } else {
    throw DataError("unsupported image format (expected PNG or P6 PPM): " + path);
  }

  if (h != ImageU8::kH || w != ImageU8::kW)
    px = resize_nearest_u8(px, h, w, ImageU8::kH, ImageU8::kW);

  ImageU8 img;
  img.px = std::move(px);
  return img;
}

void save_png(const ImageU8& img, const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write image: " + path);
  FileCloser closer{fp};

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("libpng: write struct allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng: info struct allocation failed");
  }

  std::vector<png_bytep> rows(ImageU8::kH);
  for (int y = 0; y < ImageU8::kH; ++y)
    rows[size_t(y)] =
        const_cast<png_bytep>(img.px.data() + size_t(y) * ImageU8::kW * 3);

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encode failed: " + path);
  }

  png_init_io(png, fp);
  png_set_IHDR(png, info, ImageU8::kW, ImageU8::kH, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor to_tensor(const ImageU8& img) {
  Tensor t(Shape4{1, ImageU8::kH, ImageU8::kW, ImageU8::kC});
  for (size_t i = 0; i < img.px.size(); ++i)
    t.data[i] = float(img.px[i]) / 255.0f;
  return t;
}

Tensor load_normalize(const std::string& path) {
  return to_tensor(load_image(path));
}

// ---------------------------------------------------------------------------
// Dataset split
// ---------------------------------------------------------------------------

DatasetSplit split_dataset(const std::vector<std::string>& paths, uint64_t seed) {
  if (paths.size() < 3)
    throw DataError("split_dataset: need at least 3 paths, got " +
                    std::to_string(paths.size()));

  std::vector<std::string> sorted = paths;
  std::sort(sorted.begin(), sorted.end());

  // Fisher-Yates with the raw engine; std::shuffle's ordering is not pinned
  // by the standard, and the split must be reproducible.
  std::mt19937_64 rng(seed);
  for (size_t i = sorted.size() - 1; i > 0; --i) {
    const size_t j = size_t(rng() % (i + 1));
    std::swap(sorted[i], sorted[j]);
  }

  const long n = long(sorted.size());
  const long n_train = std::lround(0.88 * double(n));
  const long n_test = std::lround(0.06 * double(n));

  DatasetSplit split;
  split.train.assign(sorted.begin(), sorted.begin() + n_train);
  split.test.assign(sorted.begin() + n_train, sorted.begin() + n_train + n_test);
  split.val.assign(sorted.begin() + n_train + n_test, sorted.end());
  return split;
}

ImageU8 synthetic_image(uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uni = [&rng](double lo, double hi) {
    return lo + (hi - lo) * (double(rng() >> 11) * 0x1p-53);
  };

  // Smooth plate-like background from a few low-frequency waves.
  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3];
  for (Wave& v : waves) {
    v.fx = uni(0.5, 3.0) / ImageU8::kW;
    v.fy = uni(0.5, 3.0) / ImageU8::kH;
    v.phase = uni(0.0, 2.0 * kPi);
    v.amp = uni(20.0, 45.0);
  }
  const double tint[3] = {uni(-20.0, 20.0), uni(-20.0, 20.0), uni(-20.0, 20.0)};

  // A few sharp vertical streaks (rail-edge / crack look-alikes).
  const int n_streaks = 2 + int(rng() % 3);
  struct Streak {
    int x0, width;
    double delta;
  };
  std::vector<Streak> streaks(static_cast<size_t>(n_streaks));
  for (Streak& s : streaks) {
    s.x0 = int(rng() % ImageU8::kW);
    s.width = 1 + int(rng() % 4);
    s.delta = uni(-90.0, 90.0);
  }

  ImageU8 img;
  for (int y = 0; y < ImageU8::kH; ++y)
    for (int x = 0; x < ImageU8::kW; ++x) {
      double base = 128.0;
      for (const Wave& v : waves)
        base += v.amp * std::sin(2.0 * kPi * (v.fx * x + v.fy * y) + v.phase);
      for (const Streak& s : streaks)
        if (x >= s.x0 && x < s.x0 + s.width) base += s.delta;
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = clamp_byte(std::lround(base + tint[c]));
    }
  return img;
}

}  // namespace railnet
