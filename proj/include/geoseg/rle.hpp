// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "geoseg/error.hpp"
#include "geoseg/metrics.hpp"

namespace geoseg::rle {

// Column-major run lengths, alternating background/foreground and always
// starting with a (possibly zero) background run. Space separated.
inline std::string encode(const BinaryMask& mask) {
  std::string out;
  bool current = false;
  std::int64_t run = 0;
  auto flush = [&] {
    if (!out.empty()) out.push_back(' ');
    out += std::to_string(run);
  };
  for (int x = 0; x < mask.width; ++x) {
    for (int y = 0; y < mask.height; ++y) {
      const bool v = mask.at(x, y);
      if (v != current) {
        flush();
        current = v;
        run = 0;
      }
      ++run;
    }
  }
  flush();
  return out;
}

inline BinaryMask decode(std::string_view text, int width, int height) {
  BinaryMask mask = BinaryMask::empty(width, height);
  const std::int64_t total = static_cast<std::int64_t>(width) * height;
  std::int64_t pos = 0;
  bool value = false;
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    if (*p == ' ') {
      ++p;
      continue;
    }
    std::int64_t run = 0;
    auto [next, ec] = std::from_chars(p, end, run);
    require(ec == std::errc() && run >= 0, ErrorCode::kInvalidArgument,
            "rle: malformed run near offset " + std::to_string(p - text.data()));
    require(pos + run <= total, ErrorCode::kInvalidArgument,
            "rle: runs exceed " + std::to_string(total) + " pixels");
    if (value) {
      for (std::int64_t i = pos; i < pos + run; ++i)
        mask.set(static_cast<int>(i / height), static_cast<int>(i % height));
    }
    pos += run;
    value = !value;
    p = next;
  }
  require(pos == total, ErrorCode::kInvalidArgument,
          "rle: runs sum to " + std::to_string(pos) + " but mask has " + std::to_string(total) + " pixels");
  return mask;
}

}  // namespace geoseg::rle
