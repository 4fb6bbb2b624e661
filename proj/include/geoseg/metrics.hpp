// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "geoseg/error.hpp"
#include "geoseg/raster.hpp"

namespace geoseg {

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0 or 1

  BinaryMask() = default;
  BinaryMask(int w, int h, std::vector<std::uint8_t> b) : width(w), height(h), bits(std::move(b)) {
    require(w > 0 && h > 0, ErrorCode::kInvalidArgument, "mask dimensions must be positive");
    require(bits.size() == static_cast<std::size_t>(w) * h, ErrorCode::kInvalidArgument,
            "binary mask length does not match width*height");
  }
  static BinaryMask empty(int w, int h) {
    return BinaryMask(w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0));
  }

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v = true) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }

  std::int64_t count() const {
    return std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Integer overlap counts; all reductions sum these before dividing so that
// pooling order cannot change a result.
struct Overlap {
  std::int64_t intersection = 0;
  std::int64_t union_ = 0;
};

inline Overlap mask_overlap(const BinaryMask& pred, const BinaryMask& gt) {
  require(pred.width == gt.width && pred.height == gt.height, ErrorCode::kDimensionMismatch,
          "prediction and ground-truth masks differ in size");
  Overlap o;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0;
    const bool g = gt.bits[i] != 0;
    o.intersection += p && g;
    o.union_ += p || g;
  }
  return o;
}

// An empty prediction of an empty target counts as a perfect match.
inline double ratio(const Overlap& o) {
  if (o.union_ == 0) return 1.0;
  return static_cast<double>(o.intersection) / static_cast<double>(o.union_);
}

inline double iou(const BinaryMask& pred, const BinaryMask& gt) { return ratio(mask_overlap(pred, gt)); }

template <typename T>
typename Box<T>::AreaType box_intersection(const Box<T>& a, const Box<T>& b) {
  using A = typename Box<T>::AreaType;
  const T w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const T h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (!(w > T{}) || !(h > T{})) return A{};
  return static_cast<A>(w) * static_cast<A>(h);
}

template <typename T>
double box_iou(const Box<T>& a, const Box<T>& b) {
  require(a.well_formed() && b.well_formed(), ErrorCode::kInvalidArgument,
          "box_iou: degenerate box (min must be < max on both axes)");
  const auto inter = box_intersection(a, b);
  const auto uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline PixelBox mask_pixel_box(const BinaryMask& mask) {
  PixelBox box{mask.width, mask.height, 0, 0};
  bool any = false;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      any = true;
      box.x_min = std::min(box.x_min, x);
      box.y_min = std::min(box.y_min, y);
      box.x_max = std::max(box.x_max, x + 1);
      box.y_max = std::max(box.y_max, y + 1);
    }
  }
  require(any, ErrorCode::kInvalidArgument, "mask_to_box: mask is empty");
  return box;
}

inline NormBox normalize_box(const PixelBox& b, int width, int height) {
  const double w = width, h = height;
  return {b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h};
}

// Tightest enclosing rectangle, normalized by the mask dimensions.
inline NormBox mask_to_box(const BinaryMask& mask) {
  return normalize_box(mask_pixel_box(mask), mask.width, mask.height);
}

// One evaluation sample. Masks and boxes are never mixed within a pair.
template <typename BoxT = NormBox>
struct EvalPair {
  std::variant<BinaryMask, BoxT> pred;
  std::variant<BinaryMask, BoxT> gt;
  std::string sample_id;

  bool is_mask() const { return std::holds_alternative<BinaryMask>(gt); }
};

namespace detail {

template <typename BoxT>
void check_pair(const EvalPair<BoxT>& p) {
  require(p.pred.index() == p.gt.index(), ErrorCode::kInvalidArgument,
          "eval pair '" + p.sample_id + "' mixes a mask with a box");
}

template <typename BoxT>
void require_nonempty(std::span<const EvalPair<BoxT>> pairs, const char* what) {
  require(!pairs.empty(), ErrorCode::kInvalidArgument, std::string(what) + ": no evaluation pairs");
}

}  // namespace detail

template <typename BoxT>
double pair_iou(const EvalPair<BoxT>& p) {
  detail::check_pair(p);
  if (p.is_mask()) return iou(std::get<BinaryMask>(p.pred), std::get<BinaryMask>(p.gt));
  return box_iou(std::get<BoxT>(p.pred), std::get<BoxT>(p.gt));
}

// Mean of per-sample IoU.
template <typename BoxT>
double giou(std::span<const EvalPair<BoxT>> pairs) {
  detail::require_nonempty(pairs, "giou");
  double sum = 0.0;
  for (const auto& p : pairs) sum += pair_iou(p);
  return sum / static_cast<double>(pairs.size());
}

// Pooled intersection over pooled union. Mask pairs pool pixel counts; box
// pairs pool rectangle areas.
template <typename BoxT>
double ciou(std::span<const EvalPair<BoxT>> pairs) {
  detail::require_nonempty(pairs, "ciou");
  using A = typename BoxT::AreaType;
  Overlap pixels;
  A inter{}, uni{};
  for (const auto& p : pairs) {
    detail::check_pair(p);
    if (p.is_mask()) {
      const Overlap o = mask_overlap(std::get<BinaryMask>(p.pred), std::get<BinaryMask>(p.gt));
      pixels.intersection += o.intersection;
      pixels.union_ += o.union_;
    } else {
      const auto& a = std::get<BoxT>(p.pred);
      const auto& b = std::get<BoxT>(p.gt);
      require(a.well_formed() && b.well_formed(), ErrorCode::kInvalidArgument, "ciou: degenerate box");
      const A i = box_intersection(a, b);
      inter += i;
      uni += a.area() + b.area() - i;
    }
  }
  if (pairs.front().is_mask()) return ratio(pixels);
  if (uni == A{}) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Fraction of pairs whose box IoU reaches the threshold.
template <typename BoxT>
double pr_at(std::span<const EvalPair<BoxT>> pairs, double threshold) {
  detail::require_nonempty(pairs, "pr_at");
  require(threshold > 0.0 && threshold < 1.0, ErrorCode::kInvalidArgument,
          "pr_at: threshold must lie in (0, 1)");
  std::size_t hits = 0;
  for (const auto& p : pairs) hits += pair_iou(p) >= threshold;
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

// Convenience overloads for vectors.
template <typename BoxT>
double giou(const std::vector<EvalPair<BoxT>>& pairs) { return giou(std::span<const EvalPair<BoxT>>(pairs)); }
template <typename BoxT>
double ciou(const std::vector<EvalPair<BoxT>>& pairs) { return ciou(std::span<const EvalPair<BoxT>>(pairs)); }
template <typename BoxT>
double pr_at(const std::vector<EvalPair<BoxT>>& pairs, double threshold) {
  return pr_at(std::span<const EvalPair<BoxT>>(pairs), threshold);
}

}  // namespace geoseg
