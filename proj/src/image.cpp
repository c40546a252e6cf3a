#include "meshrecon/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// round half to even, then clamp to the byte range
unsigned char quantize(double v) {
  double scaled = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0));
}

}  // namespace

Tensor read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("read_png", "cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("read_png", "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail("read_png", "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("read_png", "failed to decode " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 width = png_get_image_width(png, info);
  png_uint_32 height = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("read_png", path + ": unsupported channel count " + std::to_string(channels));
  }

  std::vector<unsigned char> raw(static_cast<std::size_t>(width) * height * channels);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 r = 0; r < height; ++r)
    rows[r] = raw.data() + static_cast<std::size_t>(r) * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::size_t H = height, W = width;
  if (channels == 1) {
    Tensor out({H, W});
    for (std::size_t i = 0; i < H * W; ++i) out[i] = raw[i] / 255.0;
    return out;
  }
  Tensor out({3, H, W});
  for (std::size_t p = 0; p < H * W; ++p)
    for (int ch = 0; ch < 3; ++ch) out[ch * H * W + p] = raw[p * 3 + ch] / 255.0;
  return out;
}

void write_png(const Tensor& img, const std::string& path) {
  bool gray;
  std::size_t H, W;
  if (img.ndim() == 2) {
    gray = true;
    H = img.dim(0);
    W = img.dim(1);
  } else if (img.ndim() == 3 && img.dim(0) == 3) {
    gray = false;
    H = img.dim(1);
    W = img.dim(2);
  } else {
    fail("write_png", "expected [H,W] or [3,H,W], got " + shape_str(img.shape()));
  }
  if (H == 0 || W == 0) fail("write_png", "empty image");

  std::vector<unsigned char> raw(H * W * (gray ? 1 : 3));
  if (gray) {
    for (std::size_t i = 0; i < H * W; ++i) raw[i] = quantize(img[i]);
  } else {
    for (std::size_t p = 0; p < H * W; ++p)
      for (int ch = 0; ch < 3; ++ch) raw[p * 3 + ch] = quantize(img[ch * H * W + p]);
  }

  // write to a sibling temp file and rename, so failures leave no partial file
  std::string tmp = path + ".tmp";
  {
    FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    if (!fp) fail("write_png", "cannot open " + tmp + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail("write_png", "libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
      png_destroy_write_struct(&png, nullptr);
      fail("write_png", "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      std::remove(tmp.c_str());
      fail("write_png", "failed to encode " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 gray ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(H);
    for (std::size_t r = 0; r < H; ++r) rows[r] = raw.data() + r * W * (gray ? 1 : 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    fail("write_png", "cannot move " + tmp + " into place");
}

Tensor resize_bilinear(const Tensor& img, std::size_t side) {
  if (img.ndim() != 3) fail("resize_bilinear", "expected [c,H,W], got " + shape_str(img.shape()));
  std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (side == 0 || H == 0 || W == 0) fail("resize_bilinear", "empty image");
  Tensor out({C, side, side});
  for (std::size_t r = 0; r < side; ++r) {
    double sy = (r + 0.5) * static_cast<double>(H) / side - 0.5;
    long y0 = static_cast<long>(std::floor(sy));
    double fy = sy - y0;
    long y0c = std::clamp(y0, 0L, static_cast<long>(H) - 1);
    long y1c = std::clamp(y0 + 1, 0L, static_cast<long>(H) - 1);
    for (std::size_t c = 0; c < side; ++c) {
      double sx = (c + 0.5) * static_cast<double>(W) / side - 0.5;
      long x0 = static_cast<long>(std::floor(sx));
      double fx = sx - x0;
      long x0c = std::clamp(x0, 0L, static_cast<long>(W) - 1);
      long x1c = std::clamp(x0 + 1, 0L, static_cast<long>(W) - 1);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double* p = img.data() + ch * H * W;
        double v = (1 - fx) * (1 - fy) * p[y0c * W + x0c] + fx * (1 - fy) * p[y0c * W + x1c] +
                   (1 - fx) * fy * p[y1c * W + x0c] + fx * fy * p[y1c * W + x1c];
        out[ch * side * side + r * side + c] = v;
      }
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& img) {
  if (img.ndim() == 2) {
    std::size_t H = img.dim(0), W = img.dim(1);
    Tensor out({H, W});
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) out[r * W + c] = img[r * W + (W - 1 - c)];
    return out;
  }
  if (img.ndim() == 3) {
    std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor out({C, H, W});
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c)
          out[ch * H * W + r * W + c] = img[ch * H * W + r * W + (W - 1 - c)];
    return out;
  }
  fail("flip_horizontal", "expected [H,W] or [c,H,W], got " + shape_str(img.shape()));
}

Tensor apply_mask(const Tensor& rgb, const Tensor& mask) {
  if (rgb.ndim() != 3 || mask.ndim() != 2 || rgb.dim(1) != mask.dim(0) || rgb.dim(2) != mask.dim(1))
    fail("apply_mask", "shape mismatch: " + shape_str(rgb.shape()) + " vs " + shape_str(mask.shape()));
  std::size_t C = rgb.dim(0), HW = mask.numel();
  Tensor out(rgb.shape());
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t i = 0; i < HW; ++i) out[ch * HW + i] = rgb[ch * HW + i] * mask[i];
  return out;
}

}  // namespace meshrecon
