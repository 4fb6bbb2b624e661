// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "geoseg/error.hpp"
#include "geoseg/raster.hpp"

namespace geoseg::png {

// Decoded samples after the transformations requested by the caller. For
// bit_depth 16 the samples are native-endian uint16 packed into `bytes`.
struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  bool palette = false;
  std::vector<std::uint8_t> bytes;
};

namespace detail {

struct ReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void read_from_memory(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->size) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->data + cur->pos, n);
  cur->pos += n;
}

inline void append_to_vector(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

inline void flush_noop(png_structp) {}

struct ErrorSlot {
  char message[256] = {};
};

inline void on_error(png_structp png, png_const_charp msg) {
  auto* slot = static_cast<ErrorSlot*>(png_get_error_ptr(png));
  std::snprintf(slot->message, sizeof slot->message, "%s", msg);
  png_longjmp(png, 1);
}

inline void on_warning(png_structp, png_const_charp) {}

// Decodes into `out`. Returns false and fills `err` on libpng failure. Every
// object modified after setjmp lives in caller storage so that longjmp cannot
// leave a local in an indeterminate state.
inline bool decode_into(const std::vector<std::uint8_t>& file, bool keep_palette, bool keep_16,
                        Decoded& out, ErrorSlot& err, std::vector<png_bytep>& rows) {
  ReadCursor cursor{file.data(), file.size(), 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_error, on_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    return false;
  }
  png_set_read_fn(png, &cursor, read_from_memory);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  out.palette = color == PNG_COLOR_TYPE_PALETTE;
  if (out.palette && !keep_palette) png_set_palette_to_rgb(png);
  if (depth < 8) png_set_packing(png);
  if (!out.palette && png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) {
    if (keep_16)
      png_set_swap(png);
    else
      png_set_strip_16(png);
  }
  if (color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.bytes.assign(stride * out.height, 0);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!keep_palette) out.palette = false;
  return true;
}

// bit_depth 16 expects native-endian uint16 samples.
inline bool encode_into(int width, int height, int channels, int bit_depth, const std::uint8_t* samples,
                        std::vector<std::uint8_t>& out, ErrorSlot& err,
                        std::vector<png_bytep>& rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_error, on_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    return false;
  }
  png_set_write_fn(png, &out, append_to_vector, flush_noop);
  const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY
                    : channels == 3 ? PNG_COLOR_TYPE_RGB
                                    : PNG_COLOR_TYPE_RGB_ALPHA;
  png_set_IHDR(png, info, width, height, bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep encoded bytes stable across runs.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  const std::size_t stride = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  rows.resize(height);
  for (int y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(samples + y * stride);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "short write to " + path);
}

}  // namespace detail

inline Decoded decode(const std::vector<std::uint8_t>& file, bool keep_palette, bool keep_16,
                      const std::string& what = "PNG") {
  Decoded out;
  detail::ErrorSlot err;
  std::vector<png_bytep> rows;
  if (!detail::decode_into(file, keep_palette, keep_16, out, err, rows))
    throw Error(ErrorCode::kIo, what + ": " + (err.message[0] ? err.message : "libpng failure"));
  return out;
}

inline std::vector<std::uint8_t> encode(const RasterImage& image) {
  std::vector<std::uint8_t> out;
  detail::ErrorSlot err;
  std::vector<png_bytep> rows;
  if (!detail::encode_into(image.width, image.height, image.channels, 8, image.data.data(), out, err,
                           rows))
    throw Error(ErrorCode::kIo, std::string("PNG encode: ") + err.message);
  return out;
}

// Masks are stored as single-channel 16-bit grayscale.
inline std::vector<std::uint8_t> encode(const CategoricalMask& mask) {
  std::vector<std::uint8_t> out;
  detail::ErrorSlot err;
  std::vector<png_bytep> rows;
  if (!detail::encode_into(mask.width, mask.height, 1, 16,
                           reinterpret_cast<const std::uint8_t*>(mask.labels.data()), out, err, rows))
    throw Error(ErrorCode::kIo, std::string("PNG encode: ") + err.message);
  return out;
}

inline RasterImage load_image(const std::string& path, const std::string& source_id) {
  Decoded d = decode(detail::read_file(path), false, false, path);
  return RasterImage(d.width, d.height, d.channels, std::move(d.bytes), source_id);
}

// Gray (8 or 16 bit) -> index codes, palette -> palette indices, RGB(A) ->
// packed colors with alpha dropped.
inline RawMask load_raw_mask(const std::string& path) {
  Decoded d = decode(detail::read_file(path), true, true, path);
  const std::size_t n = static_cast<std::size_t>(d.width) * d.height;
  std::vector<std::uint32_t> codes(n);
  if (d.channels == 1) {
    if (d.bit_depth == 16) {
      const auto* s = reinterpret_cast<const std::uint16_t*>(d.bytes.data());
      for (std::size_t i = 0; i < n; ++i) codes[i] = s[i];
    } else {
      for (std::size_t i = 0; i < n; ++i) codes[i] = d.bytes[i];
    }
    return RawMask::from_index(d.width, d.height, std::move(codes),
                               d.palette ? RawMask::Encoding::kPalette : RawMask::Encoding::kIndex);
  }
  require(d.bit_depth == 8, ErrorCode::kIo, path + ": 16-bit color masks are not supported");
  std::vector<std::uint8_t> rgb(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) rgb[3 * i + c] = d.bytes[i * d.channels + c];
  return RawMask::from_rgb(d.width, d.height, rgb);
}

inline void save_image(const std::string& path, const RasterImage& image) {
  detail::write_file(path, encode(image));
}

inline void save_mask(const std::string& path, const CategoricalMask& mask) {
  detail::write_file(path, encode(mask));
}

}  // namespace geoseg::png
