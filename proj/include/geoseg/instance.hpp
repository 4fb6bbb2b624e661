// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "geoseg/error.hpp"
#include "geoseg/raster.hpp"

namespace geoseg {

struct RegionStats {
  std::int64_t area = 0;
  PixelBox bbox;
  double centroid_x = 0.0;
  double centroid_y = 0.0;
};

inline RegionStats region_stats(std::span<const Pixel> pixels) {
  require(!pixels.empty(), ErrorCode::kInvalidArgument, "region_stats of an empty pixel set");
  RegionStats s;
  s.bbox = {pixels[0].x, pixels[0].y, pixels[0].x + 1, pixels[0].y + 1};
  double sx = 0.0, sy = 0.0;
  for (const Pixel& p : pixels) {
    s.bbox.x_min = std::min(s.bbox.x_min, p.x);
    s.bbox.y_min = std::min(s.bbox.y_min, p.y);
    s.bbox.x_max = std::max(s.bbox.x_max, p.x + 1);
    s.bbox.y_max = std::max(s.bbox.y_max, p.y + 1);
    sx += p.x;
    sy += p.y;
  }
  s.area = static_cast<std::int64_t>(pixels.size());
  s.centroid_x = sx / static_cast<double>(s.area);
  s.centroid_y = sy / static_cast<double>(s.area);
  return s;
}

// One 8-connected component of a single category. Pixels are kept in
// row-major order.
struct InstanceRegion {
  CategoryId category = kBackground;
  std::vector<Pixel> pixels;
  std::int64_t area = 0;
  PixelBox bbox;
  double centroid_x = 0.0;
  double centroid_y = 0.0;
  std::string region_id;

  static InstanceRegion from_pixels(CategoryId category, std::vector<Pixel> pixels, std::string id) {
    InstanceRegion r;
    const RegionStats s = region_stats(pixels);
    r.category = category;
    r.pixels = std::move(pixels);
    r.area = s.area;
    r.bbox = s.bbox;
    r.centroid_x = s.centroid_x;
    r.centroid_y = s.centroid_y;
    r.region_id = std::move(id);
    return r;
  }

  // Membership bitmap over the bbox, row-major.
  std::vector<std::uint8_t> local_bitmap() const {
    const int w = bbox.x_max - bbox.x_min;
    const int h = bbox.y_max - bbox.y_min;
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(w) * h, 0);
    for (const Pixel& p : pixels)
      bits[static_cast<std::size_t>(p.y - bbox.y_min) * w + (p.x - bbox.x_min)] = 1;
    return bits;
  }
};

namespace detail {

class DisjointSet {
 public:
  std::int32_t make() {
    parent_.push_back(static_cast<std::int32_t>(parent_.size()));
    return parent_.back();
  }
  std::int32_t find(std::int32_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b)
      parent_[b] = a;
    else
      parent_[a] = b;
  }
  std::size_t size() const { return parent_.size(); }

 private:
  std::vector<std::int32_t> parent_;
};

// Two-pass labeling. `wanted(label)` selects the foreground; neighbors only
// merge when their labels are equal, so running over all categories at once
// yields per-category components.
template <typename Wanted>
std::vector<InstanceRegion> label_components(const CategoricalMask& mask, Wanted wanted,
                                             const std::string& id_prefix) {
  const int w = mask.width;
  const int h = mask.height;
  std::vector<std::int32_t> prov(static_cast<std::size_t>(w) * h, -1);
  DisjointSet sets;

  for (int y = 0; y < h; ++y) {
    const std::size_t row = static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const CategoryId l = mask.labels[row + x];
      if (!wanted(l)) continue;
      std::int32_t label = -1;
      auto visit = [&](int nx, int ny) {
        if (nx < 0 || nx >= w || ny < 0) return;
        const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
        if (prov[ni] < 0 || mask.labels[ni] != l) return;
        if (label < 0)
          label = prov[ni];
        else
          sets.unite(label, prov[ni]);
      };
      visit(x - 1, y);
      visit(x - 1, y - 1);
      visit(x, y - 1);
      visit(x + 1, y - 1);
      prov[row + x] = label >= 0 ? label : sets.make();
    }
  }

  // Roots in raster order of first appearance.
  std::vector<std::int32_t> slot(sets.size(), -1);
  std::vector<std::vector<Pixel>> groups;
  std::vector<CategoryId> group_category;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (prov[i] < 0) continue;
      const std::int32_t root = sets.find(prov[i]);
      if (slot[root] < 0) {
        slot[root] = static_cast<std::int32_t>(groups.size());
        groups.emplace_back();
        group_category.push_back(mask.labels[i]);
      }
      groups[slot[root]].push_back({x, y});
    }
  }

  std::vector<InstanceRegion> regions;
  regions.reserve(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g)
    regions.push_back(InstanceRegion::from_pixels(group_category[g], std::move(groups[g]), {}));

  // Category, then bbox (y_min, x_min); the first raster pixel breaks ties.
  std::stable_sort(regions.begin(), regions.end(), [](const InstanceRegion& a, const InstanceRegion& b) {
    if (a.category != b.category) return a.category < b.category;
    if (a.bbox.y_min != b.bbox.y_min) return a.bbox.y_min < b.bbox.y_min;
    if (a.bbox.x_min != b.bbox.x_min) return a.bbox.x_min < b.bbox.x_min;
    return a.pixels.front().x < b.pixels.front().x;
  });

  CategoryId current = kBackground;
  int index = 0;
  for (auto& r : regions) {
    if (r.category != current) {
      current = r.category;
      index = 0;
    }
    r.region_id = id_prefix + "c" + std::to_string(r.category) + "_" + std::to_string(index++);
  }
  return regions;
}

}  // namespace detail

// Components of one category; `id_prefix` is prepended to region ids (the
// pipeline passes "<patch_id>_").
inline std::vector<InstanceRegion> connected_components(const CategoricalMask& mask, CategoryId category,
                                                        const std::string& id_prefix = {}) {
  require(category != kBackground, ErrorCode::kInvalidCategory,
          "connected_components: background is not a valid category");
  return detail::label_components(mask, [category](CategoryId l) { return l == category; }, id_prefix);
}

// Components of every non-background category, grouped by ascending category.
inline std::vector<InstanceRegion> extract_instances(const CategoricalMask& mask,
                                                     const std::string& id_prefix = {}) {
  return detail::label_components(mask, [](CategoryId l) { return l != kBackground; }, id_prefix);
}

// Pixels with at least one 4-neighbor outside the region. The closest pair
// between two disjoint pixel sets always lies on these.
inline std::vector<Pixel> boundary_pixels(const InstanceRegion& region) {
  const int w = region.bbox.x_max - region.bbox.x_min;
  const int h = region.bbox.y_max - region.bbox.y_min;
  const auto bits = region.local_bitmap();
  auto inside = [&](int lx, int ly) {
    return lx >= 0 && ly >= 0 && lx < w && ly < h && bits[static_cast<std::size_t>(ly) * w + lx];
  };
  std::vector<Pixel> out;
  for (const Pixel& p : region.pixels) {
    const int lx = p.x - region.bbox.x_min;
    const int ly = p.y - region.bbox.y_min;
    if (!inside(lx - 1, ly) || !inside(lx + 1, ly) || !inside(lx, ly - 1) || !inside(lx, ly + 1))
      out.push_back(p);
  }
  return out;
}

namespace detail {

inline std::int64_t squared(std::int64_t v) { return v * v; }

inline std::int64_t bbox_gap_sq(const PixelBox& a, const PixelBox& b) {
  const std::int64_t dx = std::max({0, b.x_min - (a.x_max - 1), a.x_min - (b.x_max - 1)});
  const std::int64_t dy = std::max({0, b.y_min - (a.y_max - 1), a.y_min - (b.y_max - 1)});
  return dx * dx + dy * dy;
}

// Minimum squared distance between two pixel lists; stops early once the
// running minimum is <= stop_at.
inline std::int64_t min_distance_sq(std::span<const Pixel> a, std::span<const Pixel> b,
                                    std::int64_t stop_at = 0) {
  std::int64_t best = std::numeric_limits<std::int64_t>::max();
  for (const Pixel& p : a) {
    for (const Pixel& q : b) {
      const std::int64_t d = squared(p.x - q.x) + squared(p.y - q.y);
      if (d < best) {
        best = d;
        if (best <= stop_at) return best;
      }
    }
  }
  return best;
}

}  // namespace detail

// Exact minimum Euclidean distance over all pixel pairs.
inline double min_separation(const InstanceRegion& a, const InstanceRegion& b) {
  const auto ba = boundary_pixels(a);
  const auto bb = boundary_pixels(b);
  return std::sqrt(static_cast<double>(detail::min_distance_sq(ba, bb)));
}

// Geometry cache for repeated proximity queries between regions of one patch.
struct RegionOutline {
  PixelBox bbox;
  std::vector<Pixel> boundary;

  explicit RegionOutline(const InstanceRegion& r) : bbox(r.bbox), boundary(boundary_pixels(r)) {}
};

// True iff min_separation(a, b) <= radius. The bbox gap is a lower bound on
// the pixel distance, so most far-apart pairs never touch the pixel lists.
inline bool within_distance(const RegionOutline& a, const RegionOutline& b, double radius) {
  if (radius < 0) return false;
  // Largest integer k with sqrt(k) <= radius; radius*radius alone can round
  // below an exact squared distance.
  auto limit = static_cast<std::int64_t>(std::floor(radius * radius));
  while (std::sqrt(static_cast<double>(limit + 1)) <= radius) ++limit;
  while (limit > 0 && std::sqrt(static_cast<double>(limit)) > radius) --limit;
  if (detail::bbox_gap_sq(a.bbox, b.bbox) > limit) return false;
  return detail::min_distance_sq(a.boundary, b.boundary, limit) <= limit;
}

}  // namespace geoseg
