// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "geoseg/error.hpp"
#include "geoseg/filter.hpp"
#include "geoseg/gateway.hpp"
#include "geoseg/instance.hpp"
#include "geoseg/prompts.hpp"
#include "geoseg/pts.hpp"
#include "geoseg/raster.hpp"
#include "geoseg/rng.hpp"

namespace geoseg {

enum class Subtype { kPoint, kBox, kAttribute, kContextual };

inline std::string_view to_string(Subtype s) {
  switch (s) {
    case Subtype::kPoint: return "point";
    case Subtype::kBox: return "box";
    case Subtype::kAttribute: return "attribute";
    case Subtype::kContextual: return "contextual";
  }
  return "?";
}

inline Subtype subtype_from_string(std::string_view s) {
  if (s == "point") return Subtype::kPoint;
  if (s == "box") return Subtype::kBox;
  if (s == "attribute") return Subtype::kAttribute;
  if (s == "contextual") return Subtype::kContextual;
  throw Error(ErrorCode::kInvalidArgument, "unknown subtype '" + std::string(s) + "'");
}

struct NormPoint {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const NormPoint&, const NormPoint&) = default;
};

inline double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

inline std::string format3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", round3(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Interactive prompts

struct PointRule {
  std::int64_t small_area = 200;  // regions below this always get one point
  std::array<double, 3> distribution = {0.6, 0.2, 0.2};  // P(k = 1, 2, 3)
};

inline int draw_point_count(std::int64_t area, Rng& rng, const PointRule& rule = {}) {
  if (area < rule.small_area) return 1;
  const double u = rng.uniform01();
  if (u < rule.distribution[0]) return 1;
  if (u < rule.distribution[0] + rule.distribution[1]) return 2;
  return 3;
}

// Pixel-center normalization, (p + 0.5) / dim.
inline NormPoint normalize_pixel(const Pixel& p, int width, int height) {
  return {(p.x + 0.5) / width, (p.y + 0.5) / height};
}

// k distinct region pixels, normalized and rounded to three decimals.
inline std::vector<NormPoint> sample_points(const InstanceRegion& region, int width, int height, Rng& rng,
                                            const PointRule& rule = {}) {
  require(!region.pixels.empty(), ErrorCode::kInvalidArgument, "sample_points: empty region");
  const int k = draw_point_count(region.area, rng, rule);
  require(static_cast<std::size_t>(k) <= region.pixels.size(), ErrorCode::kInvalidArgument,
          "sample_points: more points than pixels");
  std::vector<std::size_t> picked;
  while (picked.size() < static_cast<std::size_t>(k)) {
    const std::size_t i = rng.uniform_below(region.pixels.size());
    if (std::find(picked.begin(), picked.end(), i) == picked.end()) picked.push_back(i);
  }
  std::vector<NormPoint> points;
  for (std::size_t i : picked) {
    const NormPoint raw = normalize_pixel(region.pixels[i], width, height);
    points.push_back({round3(raw.x), round3(raw.y)});
  }
  return points;
}

inline std::string point_instruction(std::span<const NormPoint> points) {
  require(!points.empty() && points.size() <= 3, ErrorCode::kInvalidArgument,
          "point_instruction: expected 1 to 3 points, got " + std::to_string(points.size()));
  std::string text = "Please segment the region/target corresponding to the points {";
  for (std::size_t i = 0; i < points.size(); ++i) {
    require(points[i].x >= 0.0 && points[i].x <= 1.0 && points[i].y >= 0.0 && points[i].y <= 1.0,
            ErrorCode::kInvalidArgument, "point_instruction: coordinates must be normalized");
    if (i) text += ", ";
    text += "(" + format3(points[i].x) + ", " + format3(points[i].y) + ")";
  }
  return text + "}.";
}

inline std::string box_instruction(const PixelBox& box, int width, int height) {
  require(box.x_min >= 0 && box.y_min >= 0 && box.x_max <= width && box.y_max <= height && box.well_formed(),
          ErrorCode::kInvalidArgument, "box_instruction: box outside the patch");
  const double w = width, h = height;
  return "Please segment the region/target corresponding to the box x0,y0=[" + format3(box.x_min / w) + "," +
         format3(box.y_min / h) + "], x1,y1=[" + format3(box.x_max / w) + "," + format3(box.y_max / h) + "].";
}

inline std::string box_instruction(const InstanceRegion& region, int width, int height) {
  return box_instruction(region.bbox, width, height);
}

// ---------------------------------------------------------------------------
// Reasoning eligibility

// Keeps the images in the top `quantile` by distinct-category count. The cut
// value is the count at rank ceil(quantile * n) in descending order and every
// image tied with it is kept.
inline std::set<std::string> diversity_filter(const std::map<std::string, int>& category_counts, double quantile) {
  require(!category_counts.empty(), ErrorCode::kInvalidArgument, "diversity_filter: empty corpus");
  require(quantile > 0.0 && quantile <= 1.0, ErrorCode::kInvalidArgument, "diversity_filter: quantile must be in (0, 1]");
  std::vector<int> counts;
  for (const auto& [image, c] : category_counts) counts.push_back(c);
  std::sort(counts.begin(), counts.end(), std::greater<>());
  const double wanted = quantile * static_cast<double>(counts.size());
  const auto take = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(wanted - 1e-9)), 1, counts.size());
  const int cut = counts[take - 1];
  std::set<std::string> out;
  for (const auto& [image, c] : category_counts)
    if (c >= cut) out.insert(image);
  return out;
}

enum class ReasoningKind { kAttribute, kContextual, kIneligible };

inline std::string_view to_string(ReasoningKind k) {
  switch (k) {
    case ReasoningKind::kAttribute: return "Attribute";
    case ReasoningKind::kContextual: return "Contextual";
    case ReasoningKind::kIneligible: return "Ineligible";
  }
  return "?";
}

struct ReasoningAssignment {
  CategoryId category = kBackground;
  int same_category_count = 0;
  ReasoningKind kind = ReasoningKind::kIneligible;
};

inline ReasoningKind reasoning_kind_for_count(int count) {
  if (count == 1) return ReasoningKind::kAttribute;
  if (count == 2 || count == 3) return ReasoningKind::kContextual;
  return ReasoningKind::kIneligible;
}

// `survivors` are the post-filter regions of one patch.
inline ReasoningAssignment assign_reasoning_type(std::span<const InstanceRegion> survivors, CategoryId category) {
  const int count = static_cast<int>(
      std::count_if(survivors.begin(), survivors.end(), [&](const InstanceRegion& r) { return r.category == category; }));
  require(count > 0, ErrorCode::kInvalidCategory,
          "assign_reasoning_type: category " + std::to_string(category) + " has no surviving region");
  return {category, count, reasoning_kind_for_count(count)};
}

// ---------------------------------------------------------------------------
// Model-backed generation

// Format failure in a generation step. Stage 1 or 2 for the two-step
// contextual flow, 1 otherwise.
class GenerationError : public Error {
 public:
  GenerationError(int stage, const std::string& message)
      : Error(ErrorCode::kGenerationFormat, message), stage_(stage) {}
  int stage() const noexcept { return stage_; }

 private:
  int stage_;
};

struct GenerationOptions {
  std::string model = "gpt-4o";
  double temperature = 0.7;
  int max_tokens = 512;
  int contour_thickness = 3;
};

namespace detail {

inline ChatRequest single_image_request(std::string prompt_name, std::string text, const RasterImage& image,
                                        std::string request_id, const GenerationOptions& opts) {
  ChatRequest req;
  req.model_name = opts.model;
  req.temperature = opts.temperature;
  req.max_tokens = opts.max_tokens;
  req.request_id = std::move(request_id);
  req.prompt_name = std::move(prompt_name);
  req.messages.push_back({"user", std::move(text), {png_payload(image)}});
  return req;
}

inline std::string require_question(const std::string& response, int stage, const std::string& what) {
  auto q = prompts::extract_section(response, "Question:");
  if (!q || q->empty()) throw GenerationError(stage, what + ": response has no 'Question:' section");
  return *q;
}

inline std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

}  // namespace detail

inline ChatRequest referring_request(const RasterImage& image, const InstanceRegion& region,
                                     const std::string& category_name, const GenerationOptions& opts = {}) {
  return detail::single_image_request(
      "referring", prompts::render(prompt_assets::referring, {{"category", category_name}}),
      render_outline(image, region, opts.contour_thickness), region.region_id + "/referring", opts);
}

inline std::string gen_referring(const RasterImage& image, const InstanceRegion& region,
                                 const std::string& category_name, Gateway& gateway, const GenerationOptions& opts = {}) {
  return detail::require_question(gateway.chat(referring_request(image, region, category_name, opts)), 1,
                                  "referring " + region.region_id);
}

inline ChatRequest attribute_request(const RasterImage& image, const InstanceRegion& region,
                                     const std::vector<std::string>& patch_categories,
                                     const GenerationOptions& opts = {}) {
  return detail::single_image_request(
      "attribute", prompts::render(prompt_assets::attribute, {{"categories", detail::join(patch_categories, ", ")}}),
      render_outline(image, region, opts.contour_thickness), region.region_id + "/attribute", opts);
}

inline std::string gen_attribute_question(const RasterImage& image, const InstanceRegion& region,
                                          const std::vector<std::string>& patch_categories, Gateway& gateway,
                                          const GenerationOptions& opts = {}) {
  return detail::require_question(gateway.chat(attribute_request(image, region, patch_categories, opts)), 1,
                                  "attribute " + region.region_id);
}

struct ContextQuestion {
  std::vector<std::string> cues;
  std::string question;
  std::string explanation;
};

// Outlines each region in its palette color, in the order given.
inline RasterImage render_palette(const RasterImage& image, std::span<const InstanceRegion> regions, int thickness) {
  require(regions.size() <= std::size(kContextPalette), ErrorCode::kInvalidArgument,
          "render_palette: at most 3 regions");
  RasterImage out = image;
  for (std::size_t i = 0; i < regions.size(); ++i)
    for (const Pixel& p : contour_pixels(regions[i], image.width, image.height, thickness))
      paint(out, p.x, p.y, kContextPalette[i]);
  return out;
}

inline std::string context_group_id(std::span<const InstanceRegion> regions) {
  return regions.front().region_id + "+" + std::to_string(regions.size() - 1);
}

// Two steps: cues from the palette rendering, then question and explanation
// from the cues plus the untouched image. The first region is the target.
inline ContextQuestion gen_context_question(const RasterImage& image, std::span<const InstanceRegion> regions,
                                            const std::string& category_name, Gateway& gateway,
                                            const GenerationOptions& opts = {}) {
  require(regions.size() == 2 || regions.size() == 3, ErrorCode::kInvalidArgument,
          "gen_context_question: expected 2 or 3 regions");
  for (const auto& r : regions)
    require(r.category == regions.front().category, ErrorCode::kInvalidArgument,
            "gen_context_question: regions must share one category");
  const std::string group = context_group_id(regions);

  std::vector<std::string> colors;
  for (std::size_t i = 0; i < regions.size(); ++i) colors.emplace_back(kContextPaletteNames[i]);
  const std::string step1 = gateway.chat(detail::single_image_request(
      "context_step1",
      prompts::render(prompt_assets::context_step1, {{"count", std::to_string(regions.size())},
                                                     {"category", category_name},
                                                     {"colors", detail::join(colors, ", ")}}),
      render_palette(image, regions, opts.contour_thickness), group + "/context1", opts));
  ContextQuestion out;
  out.cues = prompts::parse_cues(step1);
  if (out.cues.size() < 2 || out.cues.size() > 3)
    throw GenerationError(1, "context " + group + ": expected 2 or 3 cues, got " + std::to_string(out.cues.size()));

  std::string cue_list;
  for (const auto& c : out.cues) cue_list += "- " + c + "\n";
  cue_list.pop_back();
  const std::string step2 = gateway.chat(detail::single_image_request(
      "context_step2",
      prompts::render(prompt_assets::context_step2, {{"category", category_name},
                                                     {"target_color", std::string(kContextPaletteNames[0])},
                                                     {"cues", cue_list}}),
      image, group + "/context2", opts));
  auto question = prompts::extract_section(step2, "Question:");
  auto explanation = prompts::extract_section(step2, "Explanation:");
  if (!question || question->empty() || !explanation || explanation->empty())
    throw GenerationError(2, "context " + group + ": step 2 needs 'Question:' and 'Explanation:' sections");
  out.question = *question;
  out.explanation = *explanation;
  return out;
}

// ---------------------------------------------------------------------------
// Records and scoring

struct InstructionRecord {
  std::string record_id;
  std::string patch_id;
  std::string source_id;
  Pixel origin;
  int width = 0;  // patch size
  int height = 0;
  CategoryId category = kBackground;
  std::vector<std::string> region_ids;
  Task task = Task::kInteractive;
  std::optional<Subtype> subtype;
  std::string text;
  std::optional<std::string> answer_explanation;
  std::optional<std::vector<NormPoint>> prompt_points;
  std::optional<NormBox> prompt_box;
  // evaluator model -> dimension -> score
  std::optional<std::map<std::string, std::map<std::string, int>>> scores;
  bool accepted = false;
  std::optional<std::string> flag;  // e.g. GateUnparsable
  std::string mask_rle;             // target mask, column-major RLE over the patch

  // Throws when a structural invariant is broken.
  void validate() const {
    const std::string who = "record " + record_id + ": ";
    if (task == Task::kInteractive)
      require(prompt_points.has_value() != prompt_box.has_value(), ErrorCode::kManifest,
              who + "interactive records carry exactly one of points or box");
    if (task == Task::kReasoning && subtype == Subtype::kContextual)
      require(region_ids.size() == 2 || region_ids.size() == 3, ErrorCode::kManifest,
              who + "contextual records reference 2 or 3 regions");
    else
      require(region_ids.size() == 1, ErrorCode::kManifest, who + "expected exactly one region");
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (prompt_points)
      for (const auto& p : *prompt_points)
        require(in_unit(p.x) && in_unit(p.y), ErrorCode::kManifest, who + "point outside [0,1]");
    if (prompt_box)
      require(in_unit(prompt_box->x_min) && in_unit(prompt_box->y_min) && in_unit(prompt_box->x_max) &&
                  in_unit(prompt_box->y_max),
              ErrorCode::kManifest, who + "box outside [0,1]");
  }
};

inline nlohmann::json to_json(const InstructionRecord& r) {
  using nlohmann::json;
  json j;
  j["record_id"] = r.record_id;
  j["patch_id"] = r.patch_id;
  j["source_id"] = r.source_id;
  j["origin"] = {r.origin.x, r.origin.y};
  j["category"] = r.category;
  j["region_ids"] = r.region_ids;
  j["task"] = to_string(r.task);
  j["subtype"] = r.subtype ? json(to_string(*r.subtype)) : json(nullptr);
  j["text"] = r.text;
  if (r.answer_explanation) j["answer_explanation"] = *r.answer_explanation;
  if (r.prompt_points) {
    json pts = json::array();
    for (const auto& p : *r.prompt_points) pts.push_back({round3(p.x), round3(p.y)});
    j["prompt_points"] = pts;
  }
  if (r.prompt_box)
    j["prompt_box"] = {round3(r.prompt_box->x_min), round3(r.prompt_box->y_min), round3(r.prompt_box->x_max),
                       round3(r.prompt_box->y_max)};
  if (r.scores) j["scores"] = *r.scores;
  j["accepted"] = r.accepted;
  if (r.flag) j["flag"] = *r.flag;
  j["mask"] = {{"size", {r.height, r.width}}, {"counts", r.mask_rle}};
  return j;
}

inline InstructionRecord record_from_json(const nlohmann::json& j) {
  InstructionRecord r;
  try {
    r.record_id = j.at("record_id").get<std::string>();
    r.patch_id = j.at("patch_id").get<std::string>();
    r.source_id = j.at("source_id").get<std::string>();
    r.origin = {j.at("origin").at(0).get<int>(), j.at("origin").at(1).get<int>()};
    r.category = j.at("category").get<CategoryId>();
    r.region_ids = j.at("region_ids").get<std::vector<std::string>>();
    r.task = task_from_string(j.at("task").get<std::string>());
    if (!j.at("subtype").is_null()) r.subtype = subtype_from_string(j["subtype"].get<std::string>());
    r.text = j.at("text").get<std::string>();
    if (j.contains("answer_explanation")) r.answer_explanation = j["answer_explanation"].get<std::string>();
    if (j.contains("prompt_points")) {
      std::vector<NormPoint> pts;
      for (const auto& p : j["prompt_points"]) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      r.prompt_points = pts;
    }
    if (j.contains("prompt_box")) {
      const auto& b = j["prompt_box"];
      r.prompt_box = NormBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
    }
    if (j.contains("scores")) r.scores = j["scores"].get<std::map<std::string, std::map<std::string, int>>>();
    r.accepted = j.at("accepted").get<bool>();
    if (j.contains("flag")) r.flag = j["flag"].get<std::string>();
    r.height = j.at("mask").at("size").at(0).get<int>();
    r.width = j.at("mask").at("size").at(1).get<int>();
    r.mask_rle = j.at("mask").at("counts").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kManifest, std::string("malformed record: ") + e.what());
  }
  r.validate();
  return r;
}

struct EvaluatorHandle {
  Gateway* gateway = nullptr;
  std::string model;
  double temperature = 0.2;
  int max_tokens = 256;
};

using ScoreThresholds = std::map<std::string, int>;

inline ScoreThresholds default_thresholds(Task task, int value = 7) {
  ScoreThresholds t;
  for (const auto& d : task == Task::kReasoning ? prompts::reasoning_dimensions() : prompts::referring_dimensions())
    t[d] = value;
  return t;
}

// Every score from every evaluator must reach its dimension's threshold.
inline bool meets_thresholds(const std::map<std::string, std::map<std::string, int>>& scores,
                             const ScoreThresholds& thresholds) {
  for (const auto& [evaluator, dims] : scores)
    for (const auto& [dim, value] : dims) {
      auto it = thresholds.find(dim);
      if (it != thresholds.end() && value < it->second) return false;
    }
  return true;
}

inline ChatRequest scoring_request(const InstructionRecord& record, const RasterImage& rendered,
                                   const std::string& category_name, const EvaluatorHandle& evaluator) {
  const bool reasoning = record.task == Task::kReasoning;
  std::map<std::string, std::string> vars = {{"category", category_name}, {"instruction", record.text}};
  if (reasoning) vars["explanation"] = record.answer_explanation.value_or("");
  ChatRequest req;
  req.model_name = evaluator.model;
  req.temperature = evaluator.temperature;
  req.max_tokens = evaluator.max_tokens;
  req.request_id = record.record_id + "/score/" + evaluator.model;
  req.prompt_name = reasoning ? "reasoning_score" : "referring_score";
  req.messages.push_back(
      {"user", prompts::render(reasoning ? prompt_assets::reasoning_score : prompt_assets::referring_score, vars),
       {png_payload(rendered)}});
  return req;
}

// Cross-evaluation by two distinct models. An unparsable score block rejects
// the record and flags it for audit.
inline InstructionRecord score_triplet(InstructionRecord record, const RasterImage& rendered,
                                       const std::string& category_name,
                                       const std::array<EvaluatorHandle, 2>& evaluators,
                                       const ScoreThresholds& thresholds) {
  require(!record.text.empty(), ErrorCode::kInvalidArgument, "score_triplet: record has no text");
  require(record.task != Task::kInteractive, ErrorCode::kInvalidArgument,
          "score_triplet: interactive records are not model-scored");
  require(evaluators[0].model != evaluators[1].model, ErrorCode::kInvalidArgument,
          "score_triplet: evaluators must be distinct models");
  const auto& dims =
      record.task == Task::kReasoning ? prompts::reasoning_dimensions() : prompts::referring_dimensions();
  std::map<std::string, std::map<std::string, int>> scores;
  for (const auto& ev : evaluators) {
    require(ev.gateway != nullptr, ErrorCode::kInvalidArgument, "score_triplet: evaluator without gateway");
    const std::string response = ev.gateway->chat(scoring_request(record, rendered, category_name, ev));
    auto parsed = prompts::parse_scores(response, dims);
    if (!parsed) {
      record.accepted = false;
      record.flag = std::string(to_string(RejectReason::kGateUnparsable));
      if (!scores.empty()) record.scores = scores;
      return record;
    }
    scores[ev.model] = *parsed;
  }
  record.accepted = meets_thresholds(scores, thresholds);
  record.scores = std::move(scores);
  return record;
}

}  // namespace geoseg
