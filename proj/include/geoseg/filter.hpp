// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "geoseg/error.hpp"
#include "geoseg/gateway.hpp"
#include "geoseg/instance.hpp"
#include "geoseg/png_io.hpp"
#include "geoseg/prompts.hpp"
#include "geoseg/raster.hpp"
#include "geoseg/rng.hpp"

namespace geoseg {

enum class FilterStage { kRule, kCap, kModelGate };
enum class RejectReason { kTooSmall, kTooLarge, kTooManySiblings, kTooClose, kCapSampledOut, kGateReject, kGateUnparsable };

inline std::string_view to_string(FilterStage s) {
  switch (s) {
    case FilterStage::kRule: return "Rule";
    case FilterStage::kCap: return "Cap";
    case FilterStage::kModelGate: return "ModelGate";
  }
  return "?";
}

inline std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kTooSmall: return "TooSmall";
    case RejectReason::kTooLarge: return "TooLarge";
    case RejectReason::kTooManySiblings: return "TooManySiblings";
    case RejectReason::kTooClose: return "TooClose";
    case RejectReason::kCapSampledOut: return "CapSampledOut";
    case RejectReason::kGateReject: return "GateReject";
    case RejectReason::kGateUnparsable: return "GateUnparsable";
  }
  return "?";
}

struct FilterVerdict {
  std::string region_id;
  bool kept = true;
  FilterStage stage = FilterStage::kRule;
  std::optional<RejectReason> reason;
  std::optional<std::string> gate_rationale;

  static FilterVerdict keep(std::string id, FilterStage stage) { return {std::move(id), true, stage, {}, {}}; }
  static FilterVerdict reject(std::string id, FilterStage stage, RejectReason why) {
    return {std::move(id), false, stage, why, {}};
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"region_id", region_id}, {"kept", kept}, {"stage", to_string(stage)}};
    j["reason"] = reason ? nlohmann::json(to_string(*reason)) : nlohmann::json(nullptr);
    if (gate_rationale) j["gate_rationale"] = *gate_rationale;
    return j;
  }
};

struct FilterThresholds {
  double area_min = 0.005;  // fraction of the patch, inclusive
  double area_max = 0.70;   // inclusive
  int max_siblings = 6;
  double proximity_px = 15.0;  // reject when min separation <= this
  int cap_per_category = 2;
};

// Size bounds are inclusive; the slack absorbs representation error in the
// decimal thresholds (0.005 * 1e6 is not exactly 5000 in binary).
inline bool area_fraction_ok(std::int64_t area, std::int64_t patch_area, const FilterThresholds& cfg,
                             RejectReason* why = nullptr) {
  constexpr double kSlack = 1e-12;
  const double fraction = static_cast<double>(area) / static_cast<double>(patch_area);
  if (fraction < cfg.area_min - kSlack) {
    if (why) *why = RejectReason::kTooSmall;
    return false;
  }
  if (fraction > cfg.area_max + kSlack) {
    if (why) *why = RejectReason::kTooLarge;
    return false;
  }
  return true;
}

inline bool too_close(double separation_px, const FilterThresholds& cfg) { return separation_px <= cfg.proximity_px; }

// Geometric rules, applied in order: size, sibling count, proximity. Sibling
// count covers every input region of the category; proximity only compares
// regions that passed the size rule, so a TooClose rejection is always mutual.
inline std::vector<FilterVerdict> rule_filter(std::span<const InstanceRegion> regions, std::int64_t patch_area,
                                              const FilterThresholds& cfg = {}) {
  require(patch_area > 0, ErrorCode::kInvalidArgument, "rule_filter: patch_area must be positive");
  std::map<CategoryId, int> siblings;
  for (const auto& r : regions) ++siblings[r.category];

  std::vector<FilterVerdict> verdicts(regions.size());
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& r = regions[i];
    RejectReason why{};
    if (!area_fraction_ok(r.area, patch_area, cfg, &why)) {
      verdicts[i] = FilterVerdict::reject(r.region_id, FilterStage::kRule, why);
    } else if (siblings[r.category] > cfg.max_siblings) {
      verdicts[i] = FilterVerdict::reject(r.region_id, FilterStage::kRule, RejectReason::kTooManySiblings);
    } else {
      verdicts[i] = FilterVerdict::keep(r.region_id, FilterStage::kRule);
      candidates.push_back(i);
    }
  }

  std::vector<std::unique_ptr<RegionOutline>> outlines(regions.size());
  auto outline = [&](std::size_t i) -> const RegionOutline& {
    if (!outlines[i]) outlines[i] = std::make_unique<RegionOutline>(regions[i]);
    return *outlines[i];
  };
  std::vector<bool> close(regions.size(), false);
  for (std::size_t a = 0; a < candidates.size(); ++a) {
    for (std::size_t b = a + 1; b < candidates.size(); ++b) {
      const std::size_t i = candidates[a], j = candidates[b];
      if (regions[i].category != regions[j].category) continue;
      if (close[i] && close[j]) continue;
      if (within_distance(outline(i), outline(j), cfg.proximity_px)) close[i] = close[j] = true;
    }
  }
  for (std::size_t i : candidates)
    if (close[i]) verdicts[i] = FilterVerdict::reject(regions[i].region_id, FilterStage::kRule, RejectReason::kTooClose);
  return verdicts;
}

// Keeps at most `cap` regions per category, chosen uniformly without
// replacement. Categories are visited in ascending order so the generator is
// consumed deterministically.
inline std::vector<FilterVerdict> cap_per_category(std::span<const InstanceRegion> kept, Rng& rng, int cap = 2) {
  require(cap >= 1, ErrorCode::kInvalidArgument, "cap_per_category: cap must be >= 1");
  std::map<CategoryId, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < kept.size(); ++i) groups[kept[i].category].push_back(i);

  std::vector<FilterVerdict> verdicts(kept.size());
  for (auto& [category, members] : groups) {
    std::vector<bool> survive(members.size(), members.size() <= static_cast<std::size_t>(cap));
    if (members.size() > static_cast<std::size_t>(cap)) {
      std::vector<std::size_t> order(members.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (int k = 0; k < cap; ++k) {
        const std::size_t pick = k + rng.uniform_below(order.size() - k);
        std::swap(order[k], order[pick]);
        survive[order[k]] = true;
      }
    }
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto& id = kept[members[m]].region_id;
      verdicts[members[m]] = survive[m] ? FilterVerdict::keep(id, FilterStage::kCap)
                                        : FilterVerdict::reject(id, FilterStage::kCap, RejectReason::kCapSampledOut);
    }
  }
  return verdicts;
}

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline constexpr Rgb kContourRed{255, 0, 0};

// Distinct outline colors for same-category regions, assigned in region order.
inline constexpr Rgb kContextPalette[] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}};
inline constexpr std::string_view kContextPaletteNames[] = {"red", "green", "blue"};

inline void paint(RasterImage& image, int x, int y, Rgb color) {
  std::uint8_t* p = image.pixel(x, y);
  if (image.channels == 1) {
    p[0] = color.r;
    return;
  }
  p[0] = color.r;
  p[1] = color.g;
  p[2] = color.b;
  if (image.channels == 4) p[3] = 255;
}

// Region pixels within Chebyshev distance `thickness` of a non-region pixel
// (the image exterior counts as non-region). Thickness 1 gives the pixels that
// have a non-region 8-neighbor.
inline std::vector<Pixel> contour_pixels(const InstanceRegion& region, int image_width, int image_height,
                                         int thickness) {
  require(thickness >= 1, ErrorCode::kInvalidArgument, "contour thickness must be >= 1");
  const int w = region.bbox.x_max - region.bbox.x_min;
  const int h = region.bbox.y_max - region.bbox.y_min;
  const auto bits = region.local_bitmap();
  auto member = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= image_width || y >= image_height) return false;
    const int lx = x - region.bbox.x_min, ly = y - region.bbox.y_min;
    return lx >= 0 && ly >= 0 && lx < w && ly < h && bits[static_cast<std::size_t>(ly) * w + lx];
  };
  std::vector<Pixel> out;
  for (const Pixel& p : region.pixels) {
    bool edge = false;
    for (int dy = -thickness; dy <= thickness && !edge; ++dy)
      for (int dx = -thickness; dx <= thickness && !edge; ++dx)
        if (!member(p.x + dx, p.y + dy)) edge = true;
    if (edge) out.push_back(p);
  }
  return out;
}

inline RasterImage render_outline(const RasterImage& image, const InstanceRegion& region, int thickness = 3,
                                  Rgb color = kContourRed) {
  require(region.bbox.x_min >= 0 && region.bbox.y_min >= 0 && region.bbox.x_max <= image.width &&
              region.bbox.y_max <= image.height,
          ErrorCode::kInvalidArgument, "render_outline: region " + region.region_id + " lies outside the image");
  RasterImage out = image;
  for (const Pixel& p : contour_pixels(region, image.width, image.height, thickness)) paint(out, p.x, p.y, color);
  return out;
}

inline ImagePayload png_payload(const RasterImage& image) { return {"image/png", base64_encode(png::encode(image))}; }

struct GateOptions {
  std::string model = "internvl3-78b";
  double temperature = 0.2;
  int max_tokens = 256;
};

inline ChatRequest mask_filter_request(const RasterImage& rendered, const std::string& category_name,
                                       const std::string& request_id, const GateOptions& opts) {
  ChatRequest req;
  req.model_name = opts.model;
  req.temperature = opts.temperature;
  req.max_tokens = opts.max_tokens;
  req.request_id = request_id;
  req.prompt_name = "mask_filter";
  req.messages.push_back(
      {"user", prompts::render(prompt_assets::mask_filter, {{"category", category_name}}), {png_payload(rendered)}});
  return req;
}

// Asks the judge model whether an outlined region is a usable target.
// Transport failures propagate; an answer without a decision token is
// rejected as GateUnparsable.
inline FilterVerdict model_gate(const std::string& region_id, const RasterImage& rendered,
                                const std::string& category_name, Gateway& gateway, const GateOptions& opts = {}) {
  const std::string response =
      gateway.chat(mask_filter_request(rendered, category_name, region_id + "/gate", opts));
  FilterVerdict v;
  const auto decision = prompts::parse_decision(response);
  if (!decision)
    v = FilterVerdict::reject(region_id, FilterStage::kModelGate, RejectReason::kGateUnparsable);
  else if (*decision == prompts::Decision::kKeep)
    v = FilterVerdict::keep(region_id, FilterStage::kModelGate);
  else
    v = FilterVerdict::reject(region_id, FilterStage::kModelGate, RejectReason::kGateReject);
  v.gate_rationale = trim(response);
  return v;
}

}  // namespace geoseg
