// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "geoseg/error.hpp"

namespace geoseg {

using CategoryId = std::uint16_t;
inline constexpr CategoryId kBackground = 0;

struct Pixel {
  int x = 0;
  int y = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

// Axis-aligned box, half-open on the max edges: a single pixel (x, y) has
// box (x, y, x+1, y+1).
template <typename T>
struct Box {
  using AreaType = std::conditional_t<std::is_integral_v<T>, std::int64_t, T>;
  T x_min{};
  T y_min{};
  T x_max{};
  T y_max{};
  AreaType area() const {
    return static_cast<AreaType>(x_max - x_min) * static_cast<AreaType>(y_max - y_min);
  }
  bool well_formed() const { return x_min < x_max && y_min < y_max; }
  friend bool operator==(const Box&, const Box&) = default;
};

using PixelBox = Box<int>;
using NormBox = Box<double>;

struct RasterImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;  // row-major, interleaved channels
  std::string source_id;
  std::optional<double> gsd;  // meters per pixel

  RasterImage() = default;
  RasterImage(int w, int h, int c, std::vector<std::uint8_t> bytes, std::string source = {})
      : width(w), height(h), channels(c), data(std::move(bytes)), source_id(std::move(source)) {
    require(w > 0 && h > 0, ErrorCode::kInvalidArgument, "image dimensions must be positive");
    require(c == 1 || c == 3 || c == 4, ErrorCode::kInvalidArgument,
            "image must have 1, 3 or 4 channels");
    require(data.size() == static_cast<std::size_t>(w) * h * c, ErrorCode::kInvalidArgument,
            "image data length does not match width*height*channels");
  }

  static RasterImage filled(int w, int h, int c, std::uint8_t value, std::string source = {}) {
    return RasterImage(w, h, c, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * c, value),
                       std::move(source));
  }

  std::uint8_t* pixel(int x, int y) {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const std::uint8_t* pixel(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
};

struct CategoricalMask {
  int width = 0;
  int height = 0;
  std::vector<CategoryId> labels;  // row-major
  std::string taxonomy_id;

  CategoricalMask() = default;
  CategoricalMask(int w, int h, std::vector<CategoryId> l, std::string taxonomy = {})
      : width(w), height(h), labels(std::move(l)), taxonomy_id(std::move(taxonomy)) {
    require(w > 0 && h > 0, ErrorCode::kInvalidArgument, "mask dimensions must be positive");
    require(labels.size() == static_cast<std::size_t>(w) * h, ErrorCode::kInvalidArgument,
            "mask label count does not match width*height");
  }

  static CategoricalMask filled(int w, int h, CategoryId value = kBackground) {
    return CategoricalMask(w, h, std::vector<CategoryId>(static_cast<std::size_t>(w) * h, value));
  }

  CategoryId at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  CategoryId& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }

  // Distinct non-background categories, ascending.
  std::vector<CategoryId> categories() const {
    std::vector<bool> seen(65536, false);
    for (CategoryId l : labels) seen[l] = true;
    std::vector<CategoryId> out;
    for (std::size_t i = 1; i < seen.size(); ++i)
      if (seen[i]) out.push_back(static_cast<CategoryId>(i));
    return out;
  }
};

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Unified category set plus the (dataset, source label) synonym table that
// maps heterogeneous source taxonomies onto it. Dataset "*" matches any source.
class CategoryTaxonomy {
 public:
  CategoryTaxonomy() = default;
  explicit CategoryTaxonomy(std::string id) : id_(std::move(id)) {}

  const std::string& id() const { return id_; }
  const std::map<CategoryId, std::string>& entries() const { return entries_; }

  void add_category(CategoryId id, const std::string& name) {
    require(id != kBackground, ErrorCode::kInvalidArgument, "category id 0 is reserved for background");
    require(!entries_.count(id), ErrorCode::kInvalidArgument,
            "duplicate category id " + std::to_string(id));
    const std::string key = ascii_lower(trim(name));
    require(!key.empty(), ErrorCode::kInvalidArgument, "empty category name");
    require(!by_name_.count(key), ErrorCode::kInvalidArgument,
            "duplicate category name '" + name + "'");
    entries_[id] = trim(name);
    by_name_[key] = id;
  }

  void add_synonym(const std::string& dataset, const std::string& label, CategoryId target) {
    require(entries_.count(target), ErrorCode::kInvalidArgument,
            "synonym target " + std::to_string(target) + " is not a taxonomy entry");
    synonyms_[{ascii_lower(trim(dataset)), ascii_lower(trim(label))}] = target;
  }

  bool contains(CategoryId id) const { return entries_.count(id) != 0; }

  const std::string& name(CategoryId id) const {
    auto it = entries_.find(id);
    require(it != entries_.end(), ErrorCode::kInvalidCategory,
            "category " + std::to_string(id) + " is not in taxonomy");
    return it->second;
  }

  // Synonym for the exact dataset first, then the "*" wildcard, then the
  // canonical name itself. All comparisons are case-insensitive.
  std::optional<CategoryId> resolve(const std::string& dataset, const std::string& label) const {
    const std::string d = ascii_lower(trim(dataset));
    const std::string l = ascii_lower(trim(label));
    if (auto it = synonyms_.find({d, l}); it != synonyms_.end()) return it->second;
    if (auto it = synonyms_.find({"*", l}); it != synonyms_.end()) return it->second;
    if (auto it = by_name_.find(l); it != by_name_.end()) return it->second;
    return std::nullopt;
  }

  // Text format, one mapping per line, '#' starts a comment:
  //   taxonomy = <id>
  //   <category-id> = <canonical name>
  //   <dataset>:<source label> = <category-id>
  static CategoryTaxonomy parse(std::istream& in) {
    CategoryTaxonomy tax;
    std::vector<std::tuple<std::string, std::string, CategoryId, int>> pending;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string stripped = trim(line);
      if (stripped.empty()) continue;
      const auto eq = stripped.find('=');
      require(eq != std::string::npos, ErrorCode::kInvalidArgument,
              "taxonomy line " + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = trim(std::string_view(stripped).substr(0, eq));
      const std::string value = trim(std::string_view(stripped).substr(eq + 1));
      if (key == "taxonomy") {
        tax.id_ = value;
      } else if (auto colon = key.find(':'); colon != std::string::npos) {
        pending.emplace_back(key.substr(0, colon), key.substr(colon + 1),
                             parse_id(value, lineno), lineno);
      } else {
        tax.add_category(parse_id(key, lineno), value);
      }
    }
    for (const auto& [dataset, label, target, at] : pending) {
      require(tax.contains(target), ErrorCode::kInvalidArgument,
              "taxonomy line " + std::to_string(at) + ": synonym target " +
                  std::to_string(target) + " is not a taxonomy entry");
      tax.add_synonym(dataset, label, target);
    }
    return tax;
  }

  static CategoryTaxonomy load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::kIo, "cannot open taxonomy file " + path);
    return parse(in);
  }

 private:
  static CategoryId parse_id(const std::string& text, int lineno) {
    try {
      std::size_t used = 0;
      const long v = std::stol(text, &used);
      if (used == text.size() && v > 0 && v < 65536) return static_cast<CategoryId>(v);
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::kInvalidArgument,
                "taxonomy line " + std::to_string(lineno) + ": bad category id '" + text + "'");
  }

  std::string id_;
  std::map<CategoryId, std::string> entries_;
  std::map<std::string, CategoryId> by_name_;
  std::map<std::pair<std::string, std::string>, CategoryId> synonyms_;
};

struct LabelMerge {
  std::map<std::pair<std::string, std::string>, CategoryId> mapping;
  std::vector<std::pair<std::string, std::string>> rejected;
};

inline LabelMerge merge_labels(const std::vector<std::pair<std::string, std::string>>& source_labels,
                               const CategoryTaxonomy& taxonomy) {
  LabelMerge out;
  for (const auto& entry : source_labels) {
    if (auto id = taxonomy.resolve(entry.first, entry.second))
      out.mapping[entry] = *id;
    else
      out.rejected.push_back(entry);
  }
  return out;
}

// Raw annotation before standardization. Index and palette masks carry one
// code per pixel; RGB masks pack each color as 0xRRGGBB.
struct RawMask {
  enum class Encoding { kIndex, kPalette, kRgb };
  int width = 0;
  int height = 0;
  Encoding encoding = Encoding::kIndex;
  std::vector<std::uint32_t> codes;

  static RawMask from_index(int w, int h, std::vector<std::uint32_t> codes,
                            Encoding enc = Encoding::kIndex) {
    require(codes.size() == static_cast<std::size_t>(w) * h, ErrorCode::kInvalidArgument,
            "raw mask code count does not match width*height");
    return RawMask{w, h, enc, std::move(codes)};
  }

  static RawMask from_rgb(int w, int h, const std::vector<std::uint8_t>& rgb) {
    require(rgb.size() == static_cast<std::size_t>(w) * h * 3, ErrorCode::kInvalidArgument,
            "RGB mask byte count does not match width*height*3");
    std::vector<std::uint32_t> codes(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < codes.size(); ++i)
      codes[i] = (std::uint32_t{rgb[3 * i]} << 16) | (std::uint32_t{rgb[3 * i + 1]} << 8) | rgb[3 * i + 2];
    return RawMask{w, h, Encoding::kRgb, std::move(codes)};
  }

  std::string describe_code(std::uint32_t code) const {
    if (encoding != Encoding::kRgb) return std::to_string(code);
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%06X", static_cast<unsigned>(code & 0xFFFFFF));
    return buf;
  }
};

using DecodeTable = std::unordered_map<std::uint32_t, CategoryId>;

inline CategoricalMask normalize_mask(const RawMask& raw, const DecodeTable& table,
                                      const CategoryTaxonomy* taxonomy = nullptr) {
  if (taxonomy) {
    for (const auto& [code, id] : table)
      require(id == kBackground || taxonomy->contains(id), ErrorCode::kInvalidCategory,
              "decode table maps " + raw.describe_code(code) + " to unknown category " +
                  std::to_string(id));
  }
  std::vector<CategoryId> labels(raw.codes.size());
  // Masks are dominated by long runs of one code; cache the last lookup.
  std::optional<std::uint32_t> last_code;
  CategoryId last_id = kBackground;
  for (std::size_t i = 0; i < raw.codes.size(); ++i) {
    const std::uint32_t code = raw.codes[i];
    if (code != last_code) {
      auto it = table.find(code);
      if (it == table.end()) {
        const int x = static_cast<int>(i % raw.width);
        const int y = static_cast<int>(i / raw.width);
        throw Error(ErrorCode::kUnknownRawCode, "unmapped mask code " + raw.describe_code(code) +
                                                    " first seen at pixel (" + std::to_string(x) +
                                                    ", " + std::to_string(y) + ")");
      }
      last_code = code;
      last_id = it->second;
    }
    labels[i] = last_id;
  }
  return CategoricalMask(raw.width, raw.height, std::move(labels), taxonomy ? taxonomy->id() : "");
}

// Decode table that maps every taxonomy id (and background) to itself.
inline DecodeTable identity_decode_table(const CategoryTaxonomy& taxonomy) {
  DecodeTable table{{0, kBackground}};
  for (const auto& [id, name] : taxonomy.entries()) table[id] = id;
  return table;
}

struct Patch {
  RasterImage image;
  CategoricalMask mask;
  Pixel origin;
  std::string source_id;
  std::string patch_id;
};

inline std::string make_patch_id(const std::string& source_id, Pixel origin) {
  return source_id + "_x" + std::to_string(origin.x) + "_y" + std::to_string(origin.y);
}

// Grid starts {0, stride, 2*stride, ...} plus one border-flush start when the
// grid does not land exactly on dim - tile.
inline std::vector<int> window_starts(int dim, int tile, int stride) {
  require(stride >= 1, ErrorCode::kInvalidArgument, "stride must be >= 1");
  require(tile >= 1 && tile <= dim, ErrorCode::kInvalidArgument,
          "tile " + std::to_string(tile) + " exceeds source dimension " + std::to_string(dim));
  std::vector<int> starts;
  int s = 0;
  for (; s + tile <= dim; s += stride) starts.push_back(s);
  if (starts.back() != dim - tile) starts.push_back(dim - tile);
  return starts;
}

inline Patch crop_patch(const RasterImage& image, const CategoricalMask& mask, Pixel origin, int tile) {
  Patch p;
  p.origin = origin;
  p.source_id = image.source_id;
  p.patch_id = make_patch_id(image.source_id, origin);

  const std::size_t row_bytes = static_cast<std::size_t>(tile) * image.channels;
  std::vector<std::uint8_t> bytes(row_bytes * tile);
  std::vector<CategoryId> labels(static_cast<std::size_t>(tile) * tile);
  for (int row = 0; row < tile; ++row) {
    const std::uint8_t* src = image.pixel(origin.x, origin.y + row);
    std::copy(src, src + row_bytes, bytes.data() + row * row_bytes);
    const CategoryId* msrc = mask.labels.data() + static_cast<std::size_t>(origin.y + row) * mask.width + origin.x;
    std::copy(msrc, msrc + tile, labels.data() + static_cast<std::size_t>(row) * tile);
  }
  p.image = RasterImage(tile, tile, image.channels, std::move(bytes), image.source_id);
  p.image.gsd = image.gsd;
  p.mask = CategoricalMask(tile, tile, std::move(labels), mask.taxonomy_id);
  return p;
}

// Sliding-window tiling; patches come out row-major by origin.
inline std::vector<Patch> tile(const RasterImage& image, const CategoricalMask& mask, int tile_size,
                               int stride) {
  require(image.width == mask.width && image.height == mask.height, ErrorCode::kDimensionMismatch,
          "image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
              " but mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height));
  const auto xs = window_starts(image.width, tile_size, stride);
  const auto ys = window_starts(image.height, tile_size, stride);
  std::vector<Patch> patches;
  patches.reserve(xs.size() * ys.size());
  for (int y : ys)
    for (int x : xs) patches.push_back(crop_patch(image, mask, {x, y}, tile_size));
  return patches;
}

}  // namespace geoseg
