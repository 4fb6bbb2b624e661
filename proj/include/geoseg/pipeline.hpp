// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "geoseg/error.hpp"
#include "geoseg/filter.hpp"
#include "geoseg/gateway.hpp"
#include "geoseg/instance.hpp"
#include "geoseg/instruct.hpp"
#include "geoseg/manifest.hpp"
#include "geoseg/metrics.hpp"
#include "geoseg/png_io.hpp"
#include "geoseg/pts.hpp"
#include "geoseg/raster.hpp"
#include "geoseg/rle.hpp"
#include "geoseg/rng.hpp"

namespace geoseg {

namespace fs = std::filesystem;
using nlohmann::json;

struct SourceSpec {
  std::string source_id;
  fs::path image;
  fs::path mask;
  std::string dataset;  // used to resolve label names in the decode table
};

// Shares proportional to the per-task sample counts the generation pipeline
// produced at full scale.
inline SamplingSchedule default_schedule() {
  SamplingSchedule s;
  const double interactive = 480949, referring = 336311, reasoning = 104989;
  const double total = interactive + referring + reasoning;
  s.base_shares = {{Task::kInteractive, interactive / total},
                   {Task::kReferring, referring / total},
                   {Task::kReasoning, reasoning / total}};
  s.total_steps = 1000;
  return s;
}

struct PipelineConfig {
  std::vector<SourceSpec> sources;
  std::optional<fs::path> input_dir;  // images/<id>.png with masks/<id>.png
  fs::path taxonomy_path;
  json decode_table = json::object();  // raw code -> id or label name; empty means identity
  int tile = 512;
  int stride = 256;
  FilterThresholds filter;
  PointRule point_rule;
  ScoreThresholds referring_thresholds = default_thresholds(Task::kReferring);
  ScoreThresholds reasoning_thresholds = default_thresholds(Task::kReasoning);
  double diversity_quantile = 0.1;
  SamplingSchedule schedule = default_schedule();
  std::uint64_t seed = 0;
  int contour_thickness = 3;
  GateOptions gate;
  GenerationOptions generation;
  std::array<std::string, 2> evaluator_models = {"internvl3-78b", "qwen2-vl-72b"};
  double evaluator_temperature = 0.2;
  GatewayConfig gateway;
  std::optional<fs::path> mock_fixtures;
  int workers = 1;
  fs::path output_dir = "geoseg_out";
  std::optional<int> abort_after_patches;  // testing aid for resume
  json raw = json::object();

  void validate() const {
    require(tile >= 1 && stride >= 1, ErrorCode::kInvalidArgument, "config: tile and stride must be >= 1");
    require(filter.area_min > 0.0 && filter.area_min < filter.area_max && filter.area_max <= 1.0,
            ErrorCode::kInvalidArgument, "config: area bounds must satisfy 0 < min < max <= 1");
    require(filter.max_siblings >= 1 && filter.cap_per_category >= 1 && filter.proximity_px >= 0.0,
            ErrorCode::kInvalidArgument, "config: sibling, cap and proximity limits out of range");
    require(point_rule.small_area >= 1, ErrorCode::kInvalidArgument, "config: small_area must be >= 1");
    double sum = 0.0;
    for (double p : point_rule.distribution) {
      require(p >= 0.0, ErrorCode::kInvalidArgument, "config: point distribution must be non-negative");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::kInvalidArgument, "config: point distribution must sum to 1");
    for (const auto* t : {&referring_thresholds, &reasoning_thresholds})
      for (const auto& [dim, v] : *t)
        require(v >= 1 && v <= 10, ErrorCode::kInvalidArgument, "config: score threshold for " + dim + " outside 1..10");
    require(diversity_quantile > 0.0 && diversity_quantile <= 1.0, ErrorCode::kInvalidArgument,
            "config: diversity_quantile must be in (0, 1]");
    require(contour_thickness >= 1, ErrorCode::kInvalidArgument, "config: contour_thickness must be >= 1");
    require(evaluator_models[0] != evaluator_models[1], ErrorCode::kInvalidArgument,
            "config: the two evaluators must be different models");
    require(workers >= 1, ErrorCode::kInvalidArgument, "config: workers must be >= 1");
    require(!abort_after_patches || *abort_after_patches >= 1, ErrorCode::kInvalidArgument,
            "config: abort_after_patches must be >= 1");
    schedule.validate();
  }

  // Hash of everything that can change output bytes.
  std::string hash() const {
    json key = raw;
    for (const char* runtime : {"workers", "output_dir", "abort_after_patches", "gateway", "mock_fixtures"})
      key.erase(runtime);
    key["seed"] = seed;
    return sha256_hex(key.dump());
  }

  static PipelineConfig from_json(const json& j, const fs::path& base_dir = {}) {
    PipelineConfig c;
    c.raw = j;
    auto path = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
    try {
      if (j.contains("sources")) {
        for (const auto& s : j["sources"])
          c.sources.push_back({s.at("id").get<std::string>(), path(s.at("image").get<std::string>()),
                               path(s.at("mask").get<std::string>()), s.value("dataset", "")});
      }
      if (j.contains("input_dir")) c.input_dir = path(j["input_dir"].get<std::string>());
      c.taxonomy_path = path(j.at("taxonomy").get<std::string>());
      if (j.contains("decode_table")) c.decode_table = j["decode_table"];
      c.tile = j.value("tile", c.tile);
      c.stride = j.value("stride", c.stride);
      if (j.contains("filter")) {
        const auto& f = j["filter"];
        c.filter.area_min = f.value("area_min", c.filter.area_min);
        c.filter.area_max = f.value("area_max", c.filter.area_max);
        c.filter.max_siblings = f.value("max_siblings", c.filter.max_siblings);
        c.filter.proximity_px = f.value("proximity_px", c.filter.proximity_px);
        c.filter.cap_per_category = f.value("cap", c.filter.cap_per_category);
      }
      if (j.contains("point_rule")) {
        const auto& p = j["point_rule"];
        c.point_rule.small_area = p.value("small_area", c.point_rule.small_area);
        if (p.contains("distribution")) c.point_rule.distribution = p["distribution"].get<std::array<double, 3>>();
      }
      if (j.contains("score_thresholds")) {
        const auto& s = j["score_thresholds"];
        auto apply = [](ScoreThresholds& t, const json& spec) {
          if (spec.is_number_integer()) {
            for (auto& [dim, v] : t) v = spec.get<int>();
          } else {
            for (const auto& [dim, v] : spec.items()) {
              require(t.count(dim), ErrorCode::kInvalidArgument, "config: unknown score dimension " + dim);
              t[dim] = v.get<int>();
            }
          }
        };
        if (s.contains("referring")) apply(c.referring_thresholds, s["referring"]);
        if (s.contains("reasoning")) apply(c.reasoning_thresholds, s["reasoning"]);
      }
      c.diversity_quantile = j.value("diversity_quantile", c.diversity_quantile);
      if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        if (s.contains("base_shares")) {
          TaskWeights shares;
          double total = 0.0;
          for (const auto& [task, v] : s["base_shares"].items()) {
            shares[task_from_string(task)] = v.get<double>();
            total += v.get<double>();
          }
          // Raw sample counts are accepted and normalized.
          if (s.value("normalize", false))
            for (auto& [t, v] : shares) v /= total;
          c.schedule.base_shares = shares;
        }
        c.schedule.interactive_final_multiplier =
            s.value("interactive_final_multiplier", c.schedule.interactive_final_multiplier);
        c.schedule.total_steps = s.value("total_steps", c.schedule.total_steps);
      }
      c.seed = j.at("seed").get<std::uint64_t>();
      c.contour_thickness = j.value("contour_thickness", c.contour_thickness);
      if (j.contains("models")) {
        const auto& m = j["models"];
        c.gate.model = m.value("gate", c.gate.model);
        c.generation.model = m.value("generator", c.generation.model);
        if (m.contains("evaluators")) c.evaluator_models = m["evaluators"].get<std::array<std::string, 2>>();
        c.gate.temperature = m.value("gate_temperature", c.gate.temperature);
        c.generation.temperature = m.value("generator_temperature", c.generation.temperature);
        c.evaluator_temperature = m.value("evaluator_temperature", c.evaluator_temperature);
      }
      c.generation.contour_thickness = c.contour_thickness;
      if (j.contains("gateway")) {
        const auto& g = j["gateway"];
        c.gateway.endpoint_url = g.value("endpoint_url", c.gateway.endpoint_url);
        c.gateway.api_key_source = g.value("api_key_source", c.gateway.api_key_source);
        c.gateway.max_in_flight = g.value("max_in_flight", c.gateway.max_in_flight);
        c.gateway.timeout_ms = g.value("timeout_ms", c.gateway.timeout_ms);
        c.gateway.mock_mode = g.value("mock_mode", c.gateway.mock_mode);
        if (g.contains("transcript_dir")) c.gateway.transcript_dir = path(g["transcript_dir"].get<std::string>()).string();
        if (g.contains("retry")) {
          const auto& r = g["retry"];
          c.gateway.retry.max_attempts = r.value("max_attempts", c.gateway.retry.max_attempts);
          c.gateway.retry.base_backoff_ms = r.value("base_backoff_ms", c.gateway.retry.base_backoff_ms);
          c.gateway.retry.multiplier = r.value("multiplier", c.gateway.retry.multiplier);
        }
      }
      if (j.contains("mock_fixtures")) c.mock_fixtures = path(j["mock_fixtures"].get<std::string>());
      c.workers = j.value("workers", c.workers);
      if (j.contains("output_dir")) c.output_dir = path(j["output_dir"].get<std::string>());
      if (j.contains("abort_after_patches")) c.abort_after_patches = j["abort_after_patches"].get<int>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, std::string("config: ") + e.what());
    }
    c.gateway = GatewayConfig::from_env(c.gateway);
    c.validate();
    return c;
  }

  static PipelineConfig load(const fs::path& file) {
    json j;
    try {
      j = json::parse(read_text(file));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kInvalidArgument, "config " + file.string() + ": " + e.what());
    }
    return from_json(j, file.parent_path());
  }

  std::vector<SourceSpec> resolve_sources() const {
    std::vector<SourceSpec> out = sources;
    if (input_dir) {
      require(fs::is_directory(*input_dir), ErrorCode::kIo, "input_dir " + input_dir->string() + " is not a directory");
      const fs::path images = *input_dir / "images";
      if (fs::is_directory(images)) {
        for (const auto& entry : fs::directory_iterator(images)) {
          if (entry.path().extension() != ".png") continue;
          const std::string id = entry.path().stem().string();
          const fs::path mask = *input_dir / "masks" / (id + ".png");
          require(fs::exists(mask), ErrorCode::kIo, "no mask for image " + entry.path().string());
          out.push_back({id, entry.path(), mask, ""});
        }
      }
    }
    std::sort(out.begin(), out.end(), [](const SourceSpec& a, const SourceSpec& b) { return a.source_id < b.source_id; });
    for (std::size_t i = 1; i < out.size(); ++i)
      require(out[i - 1].source_id != out[i].source_id, ErrorCode::kInvalidArgument,
              "duplicate source id " + out[i].source_id);
    return out;
  }
};

// "#RRGGBB" or a decimal code.
inline std::uint32_t parse_raw_code(const std::string& key) {
  try {
    if (!key.empty() && key[0] == '#') {
      require(key.size() == 7, ErrorCode::kInvalidArgument, "bad color code " + key);
      return static_cast<std::uint32_t>(std::stoul(key.substr(1), nullptr, 16));
    }
    std::size_t used = 0;
    const unsigned long v = std::stoul(key, &used, 10);
    require(used == key.size(), ErrorCode::kInvalidArgument, "bad raw code " + key);
    return static_cast<std::uint32_t>(v);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kInvalidArgument, "bad raw code '" + key + "'");
  }
}

// Label names go through the taxonomy's synonym table; unmapped names are
// reported together.
inline DecodeTable build_decode_table(const json& spec, const CategoryTaxonomy& taxonomy, const std::string& dataset) {
  if (spec.empty()) return identity_decode_table(taxonomy);
  DecodeTable table;
  std::vector<std::pair<std::string, std::string>> named;
  std::map<std::string, std::uint32_t> code_of;
  for (const auto& [key, value] : spec.items()) {
    const std::uint32_t code = parse_raw_code(key);
    if (value.is_number_integer()) {
      table[code] = value.get<CategoryId>();
    } else {
      named.emplace_back(dataset, value.get<std::string>());
      code_of[value.get<std::string>()] = code;
    }
  }
  if (!named.empty()) {
    const LabelMerge merge = merge_labels(named, taxonomy);
    if (!merge.rejected.empty()) {
      std::string names;
      for (const auto& [ds, label] : merge.rejected) names += (names.empty() ? "" : ", ") + label;
      throw Error(ErrorCode::kInvalidCategory, "decode table: unmapped labels: " + names);
    }
    for (const auto& [key, id] : merge.mapping) table[code_of.at(key.second)] = id;
  }
  return table;
}

struct LoadedSource {
  RasterImage image;
  CategoricalMask mask;
};

inline LoadedSource load_source(const SourceSpec& s, const CategoryTaxonomy& taxonomy, const json& decode_spec) {
  RasterImage image = png::load_image(s.image.string(), s.source_id);
  const RawMask raw = png::load_raw_mask(s.mask.string());
  CategoricalMask mask = normalize_mask(raw, build_decode_table(decode_spec, taxonomy, s.dataset), &taxonomy);
  return {std::move(image), std::move(mask)};
}

// Region restored from a record's target mask.
inline InstanceRegion region_from_record(const InstructionRecord& r) {
  const BinaryMask m = rle::decode(r.mask_rle, r.width, r.height);
  std::vector<Pixel> pixels;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) pixels.push_back({x, y});
  return InstanceRegion::from_pixels(r.category, std::move(pixels), r.region_ids.front());
}

inline BinaryMask region_mask(const InstanceRegion& r, int width, int height) {
  BinaryMask m = BinaryMask::empty(width, height);
  for (const Pixel& p : r.pixels) m.set(p.x, p.y);
  return m;
}

// Evaluator view: the target outlined on the patch.
inline RasterImage render_for_scoring(const RasterImage& patch_image, const InstructionRecord& r, int thickness) {
  return render_outline(patch_image, region_from_record(r), thickness);
}

// Models and endpoints shared by every patch worker.
struct PipelineServices {
  std::shared_ptr<Gateway> gateway;
  std::array<EvaluatorHandle, 2> evaluators;

  static PipelineServices create(const PipelineConfig& cfg) {
    PipelineServices s;
    if (cfg.gateway.mock_mode) {
      require(cfg.mock_fixtures.has_value(), ErrorCode::kInvalidArgument,
              "mock mode needs 'mock_fixtures' in the config");
      s.gateway = Gateway::mock(cfg.gateway, MockFixtures::load(cfg.mock_fixtures->string()));
    } else {
      s.gateway = Gateway::http(cfg.gateway);
    }
    for (std::size_t i = 0; i < 2; ++i)
      s.evaluators[i] = {s.gateway.get(), cfg.evaluator_models[i], cfg.evaluator_temperature, 256};
    return s;
  }
};

struct FilterOutcome {
  std::vector<InstanceRegion> survivors;  // region order
  std::vector<json> audit;
};

inline json audit_line(const std::string& patch_id, const FilterVerdict& v) {
  json j = v.to_json();
  j["patch_id"] = patch_id;
  j["kind"] = "verdict";
  return j;
}

// Rules, cap and model gate for one patch. Consumes rng for the cap draw.
inline FilterOutcome filter_patch(const Patch& patch, const std::vector<InstanceRegion>& regions,
                                  const PipelineConfig& cfg, const CategoryTaxonomy& taxonomy, Gateway* gateway,
                                  Rng& rng) {
  FilterOutcome out;
  const std::int64_t area = static_cast<std::int64_t>(patch.mask.width) * patch.mask.height;
  const auto rules = rule_filter(regions, area, cfg.filter);
  std::vector<InstanceRegion> passed;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    out.audit.push_back(audit_line(patch.patch_id, rules[i]));
    if (rules[i].kept) passed.push_back(regions[i]);
  }
  const auto capped = cap_per_category(passed, rng, cfg.filter.cap_per_category);
  std::vector<InstanceRegion> candidates;
  for (std::size_t i = 0; i < passed.size(); ++i) {
    out.audit.push_back(audit_line(patch.patch_id, capped[i]));
    if (capped[i].kept) candidates.push_back(passed[i]);
  }
  for (auto& region : candidates) {
    if (!gateway) {
      out.survivors.push_back(std::move(region));
      continue;
    }
    const RasterImage rendered = render_outline(patch.image, region, cfg.contour_thickness);
    const FilterVerdict v = model_gate(region.region_id, rendered, taxonomy.name(region.category), *gateway, cfg.gate);
    out.audit.push_back(audit_line(patch.patch_id, v));
    if (v.kept) out.survivors.push_back(std::move(region));
  }
  return out;
}

struct PatchOutcome {
  std::size_t index = 0;
  std::string patch_id;
  std::vector<InstructionRecord> records;  // accepted only
  std::vector<json> audit;

  json to_json(const std::string& config_hash) const {
    json recs = json::array();
    for (const auto& r : records) recs.push_back(geoseg::to_json(r));
    return {{"patch_index", index}, {"patch_id", patch_id}, {"config_hash", config_hash},
            {"records", recs},      {"audit", audit}};
  }

  static PatchOutcome from_json(const json& j) {
    PatchOutcome o;
    o.index = j.at("patch_index").get<std::size_t>();
    o.patch_id = j.at("patch_id").get<std::string>();
    for (const auto& r : j.at("records")) o.records.push_back(record_from_json(r));
    for (const auto& a : j.at("audit")) o.audit.push_back(a);
    return o;
  }
};

namespace detail {

inline InstructionRecord base_record(const Patch& patch, const InstanceRegion& target) {
  InstructionRecord r;
  r.patch_id = patch.patch_id;
  r.source_id = patch.source_id;
  r.origin = patch.origin;
  r.width = patch.mask.width;
  r.height = patch.mask.height;
  r.category = target.category;
  r.region_ids = {target.region_id};
  r.mask_rle = rle::encode(region_mask(target, r.width, r.height));
  return r;
}

inline json rejection(const std::string& patch_id, const std::string& record_id, std::string reason,
                      std::optional<int> stage, const std::string& message, const InstructionRecord* record) {
  json j = {{"kind", "record_rejected"}, {"patch_id", patch_id}, {"record_id", record_id}, {"reason", std::move(reason)}};
  if (stage) j["stage"] = *stage;
  if (!message.empty()) j["message"] = message;
  if (record) j["record"] = to_json(*record);
  return j;
}

}  // namespace detail

struct PatchJob {
  std::size_t index = 0;
  const Patch* patch = nullptr;
  bool reasoning_eligible = false;
};

// Full per-patch work: extraction, filtering, every generator and the
// quality gate. Deterministic given (patch, index, config, mock fixtures).
inline PatchOutcome process_patch(const PatchJob& job, const PipelineConfig& cfg, const CategoryTaxonomy& taxonomy,
                                  const PipelineServices& services) {
  const Patch& patch = *job.patch;
  Rng rng(mix_seed(cfg.seed, job.index));
  PatchOutcome out;
  out.index = job.index;
  out.patch_id = patch.patch_id;

  const auto regions = extract_instances(patch.mask, patch.patch_id + "/");
  FilterOutcome filtered = filter_patch(patch, regions, cfg, taxonomy, services.gateway.get(), rng);
  out.audit = std::move(filtered.audit);
  const auto& survivors = filtered.survivors;
  const int w = patch.mask.width, h = patch.mask.height;
  Gateway& gw = *services.gateway;

  auto score_and_keep = [&](InstructionRecord rec, const ScoreThresholds& thresholds) {
    const RasterImage rendered = render_for_scoring(patch.image, rec, cfg.contour_thickness);
    const std::string name = taxonomy.name(rec.category);
    InstructionRecord scored = score_triplet(std::move(rec), rendered, name, services.evaluators, thresholds);
    if (scored.accepted) {
      out.records.push_back(std::move(scored));
    } else {
      out.audit.push_back(detail::rejection(patch.patch_id, scored.record_id,
                                            scored.flag.value_or("BelowThreshold"), std::nullopt, "", &scored));
    }
  };

  for (const auto& region : survivors) {
    const std::string name = taxonomy.name(region.category);
    InstructionRecord point = detail::base_record(patch, region);
    point.record_id = region.region_id + "/interactive-point";
    point.task = Task::kInteractive;
    point.subtype = Subtype::kPoint;
    point.prompt_points = sample_points(region, w, h, rng, cfg.point_rule);
    point.text = point_instruction(*point.prompt_points);
    point.accepted = true;
    out.records.push_back(std::move(point));

    InstructionRecord box = detail::base_record(patch, region);
    box.record_id = region.region_id + "/interactive-box";
    box.task = Task::kInteractive;
    box.subtype = Subtype::kBox;
    const NormBox nb = normalize_box(region.bbox, w, h);
    box.prompt_box = NormBox{round3(nb.x_min), round3(nb.y_min), round3(nb.x_max), round3(nb.y_max)};
    box.text = box_instruction(region, w, h);
    box.accepted = true;
    out.records.push_back(std::move(box));

    InstructionRecord ref = detail::base_record(patch, region);
    ref.record_id = region.region_id + "/referring";
    ref.task = Task::kReferring;
    try {
      ref.text = gen_referring(patch.image, region, name, gw, cfg.generation);
    } catch (const GenerationError& e) {
      out.audit.push_back(detail::rejection(patch.patch_id, ref.record_id, "GenerationFormat", e.stage(), e.what(), nullptr));
      continue;
    }
    score_and_keep(std::move(ref), cfg.referring_thresholds);
  }

  if (job.reasoning_eligible && !survivors.empty()) {
    std::vector<std::string> patch_categories;
    for (CategoryId c : patch.mask.categories())
      if (c != kBackground) patch_categories.push_back(taxonomy.name(c));
    std::set<CategoryId> seen;
    for (const auto& region : survivors) seen.insert(region.category);
    for (CategoryId category : seen) {
      const ReasoningAssignment a = assign_reasoning_type(survivors, category);
      if (a.kind == ReasoningKind::kIneligible) continue;
      std::vector<InstanceRegion> group;
      for (const auto& r : survivors)
        if (r.category == category) group.push_back(r);
      InstructionRecord rec = detail::base_record(patch, group.front());
      rec.task = Task::kReasoning;
      try {
        if (a.kind == ReasoningKind::kAttribute) {
          rec.record_id = group.front().region_id + "/reasoning-attribute";
          rec.subtype = Subtype::kAttribute;
          rec.text = gen_attribute_question(patch.image, group.front(), patch_categories, gw, cfg.generation);
        } else {
          rec.record_id = group.front().region_id + "/reasoning-contextual";
          rec.subtype = Subtype::kContextual;
          const ContextQuestion q = gen_context_question(patch.image, group, taxonomy.name(category), gw, cfg.generation);
          rec.region_ids.clear();
          for (const auto& r : group) rec.region_ids.push_back(r.region_id);
          rec.text = q.question;
          rec.answer_explanation = q.explanation;
        }
      } catch (const GenerationError& e) {
        out.audit.push_back(
            detail::rejection(patch.patch_id, rec.record_id, "GenerationFormat", e.stage(), e.what(), nullptr));
        continue;
      }
      score_and_keep(std::move(rec), cfg.reasoning_thresholds);
    }
  }
  return out;
}

struct PipelineResult {
  Manifest manifest;
  std::vector<json> audit;
  std::size_t patches = 0;
  std::size_t resumed = 0;  // patches restored from checkpoints
};

inline fs::path checkpoint_path(const PipelineConfig& cfg, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof name, "%08zu.json", index);
  return cfg.output_dir / "checkpoints" / name;
}

inline std::optional<PatchOutcome> load_checkpoint(const fs::path& path, const std::string& patch_id,
                                                   const std::string& config_hash) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    const json j = json::parse(read_text(path));
    if (j.value("config_hash", "") != config_hash || j.value("patch_id", "") != patch_id) return std::nullopt;
    return PatchOutcome::from_json(j);
  } catch (const std::exception&) {
    return std::nullopt;  // torn or stale checkpoint; recompute
  }
}

// Every tile of every source, in (source_id, row-major origin) order.
inline std::vector<Patch> load_patches(const PipelineConfig& cfg, const CategoryTaxonomy& taxonomy) {
  std::vector<Patch> patches;
  for (const auto& s : cfg.resolve_sources()) {
    const LoadedSource src = load_source(s, taxonomy, cfg.decode_table);
    for (auto& p : tile(src.image, src.mask, cfg.tile, cfg.stride)) patches.push_back(std::move(p));
  }
  return patches;
}

inline std::set<std::string> reasoning_eligible_patches(const std::vector<Patch>& patches, double quantile) {
  if (patches.empty()) return {};
  std::map<std::string, int> counts;
  for (const auto& p : patches) {
    int n = 0;
    for (CategoryId c : p.mask.categories()) n += c != kBackground;
    counts[p.patch_id] = n;
  }
  return diversity_filter(counts, quantile);
}

inline std::string audit_text(const std::vector<json>& audit) {
  std::string text;
  for (const auto& a : audit) text += a.dump() + "\n";
  return text;
}

// tile -> extract -> filter -> generate -> score -> manifest, one checkpoint
// per patch. Writes manifest.jsonl and audit.jsonl under cfg.output_dir.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineServices& services) {
  cfg.validate();
  const CategoryTaxonomy taxonomy = CategoryTaxonomy::load(cfg.taxonomy_path.string());
  const std::vector<Patch> patches = load_patches(cfg, taxonomy);
  const std::set<std::string> eligible = reasoning_eligible_patches(patches, cfg.diversity_quantile);
  const std::string config_hash = cfg.hash();
  fs::create_directories(cfg.output_dir / "checkpoints");

  std::vector<std::optional<PatchOutcome>> outcomes(patches.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> fresh{0};
  std::atomic<std::size_t> resumed{0};
  std::atomic<bool> stop{false};
  std::exception_ptr failure;
  std::mutex failure_mu;

  auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= patches.size()) return;
      try {
        const fs::path cp = checkpoint_path(cfg, i);
        if (auto restored = load_checkpoint(cp, patches[i].patch_id, config_hash)) {
          outcomes[i] = std::move(*restored);
          ++resumed;
          continue;
        }
        const PatchJob job{i, &patches[i], eligible.count(patches[i].patch_id) > 0};
        PatchOutcome o = process_patch(job, cfg, taxonomy, services);
        write_text_atomic(cp, o.to_json(config_hash).dump());
        outcomes[i] = std::move(o);
        if (cfg.abort_after_patches && ++fresh >= *cfg.abort_after_patches) stop = true;
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        stop = true;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int n = std::min<int>(cfg.workers, std::max<std::size_t>(patches.size(), 1));
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  const auto done = std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.has_value(); });
  if (static_cast<std::size_t>(done) < patches.size())
    throw Error(ErrorCode::kAborted, "aborted after " + std::to_string(done) + " of " + std::to_string(patches.size()) +
                                         " patches; rerun with the same config to resume from " +
                                         (cfg.output_dir / "checkpoints").string());

  PipelineResult result;
  std::vector<InstructionRecord> records;
  for (auto& o : outcomes) {
    for (auto& r : o->records) records.push_back(std::move(r));
    for (auto& a : o->audit) result.audit.push_back(std::move(a));
  }
  result.manifest = Manifest::build(std::move(records), config_hash, cfg.seed);
  result.patches = patches.size();
  result.resumed = resumed.load();
  result.manifest.save(cfg.output_dir / "manifest.jsonl");
  write_text_atomic(cfg.output_dir / "audit.jsonl", audit_text(result.audit));
  return result;
}

// Re-runs the two-evaluator gate over the model-generated records of a
// manifest. Interactive records pass through untouched.
inline Manifest score_manifest(const Manifest& input, const PipelineConfig& cfg, const PipelineServices& services,
                               std::vector<json>* audit = nullptr) {
  const CategoryTaxonomy taxonomy = CategoryTaxonomy::load(cfg.taxonomy_path.string());
  std::map<std::string, SourceSpec> by_id;
  for (const auto& s : cfg.resolve_sources()) by_id[s.source_id] = s;
  std::map<std::string, RasterImage> images;
  std::vector<InstructionRecord> kept;
  for (const auto& rec : input.records) {
    if (rec.task == Task::kInteractive) {
      kept.push_back(rec);
      continue;
    }
    auto it = images.find(rec.source_id);
    if (it == images.end()) {
      auto src = by_id.find(rec.source_id);
      require(src != by_id.end(), ErrorCode::kInvalidArgument, "score: unknown source " + rec.source_id);
      it = images.emplace(rec.source_id, png::load_image(src->second.image.string(), rec.source_id)).first;
    }
    const CategoricalMask blank = CategoricalMask::filled(it->second.width, it->second.height);
    const Patch patch = crop_patch(it->second, blank, rec.origin, rec.width);
    const ScoreThresholds& t = rec.task == Task::kReasoning ? cfg.reasoning_thresholds : cfg.referring_thresholds;
    InstructionRecord scored = score_triplet(rec, render_for_scoring(patch.image, rec, cfg.contour_thickness),
                                             taxonomy.name(rec.category), services.evaluators, t);
    if (scored.accepted)
      kept.push_back(std::move(scored));
    else if (audit)
      audit->push_back(detail::rejection(rec.patch_id, rec.record_id, scored.flag.value_or("BelowThreshold"),
                                         std::nullopt, "", &scored));
  }
  return Manifest::build(std::move(kept), input.header.config_hash, input.header.seed);
}

// ---------------------------------------------------------------------------
// Evaluation against a prediction file

struct Prediction {
  std::string record_id;
  std::variant<BinaryMask, NormBox> value;
};

inline std::map<std::string, Prediction> load_predictions(const fs::path& path) {
  std::map<std::string, Prediction> out;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Prediction p;
      p.record_id = j.at("record_id").get<std::string>();
      if (j.contains("mask")) {
        const auto& m = j["mask"];
        p.value = rle::decode(m.at("counts").get<std::string>(), m.at("size").at(1).get<int>(),
                              m.at("size").at(0).get<int>());
      } else {
        const auto& b = j.at("box");
        p.value = NormBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      }
      require(out.emplace(p.record_id, p).second, ErrorCode::kInvalidArgument,
              "predictions: duplicate record_id " + p.record_id);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument,
                  "predictions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// Per task gIoU and cIoU; box predictions are compared with the tight box of
// the ground-truth mask and also report PR@{0.3,0.5,0.7}.
inline json eval_run(const Manifest& manifest, const std::map<std::string, Prediction>& predictions) {
  std::vector<std::string> missing, extra;
  std::set<std::string> known;
  for (const auto& r : manifest.records) {
    known.insert(r.record_id);
    if (!predictions.count(r.record_id)) missing.push_back(r.record_id);
  }
  for (const auto& [id, p] : predictions)
    if (!known.count(id)) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "eval: predictions do not match the manifest";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string("; ") + what + ":";
      for (const auto& id : ids) msg += " " + id;
    };
    list("missing", missing);
    list("extra", extra);
    throw Error(ErrorCode::kInvalidArgument, msg);
  }

  std::map<std::string, std::vector<EvalPair<NormBox>>> groups;
  for (const auto& r : manifest.records) {
    const Prediction& p = predictions.at(r.record_id);
    const BinaryMask gt = rle::decode(r.mask_rle, r.width, r.height);
    std::string key(to_string(r.task));
    if (const auto* m = std::get_if<BinaryMask>(&p.value)) {
      require(m->width == gt.width && m->height == gt.height, ErrorCode::kDimensionMismatch,
              "eval: prediction " + r.record_id + " has the wrong mask size");
      groups[key].push_back({*m, gt, r.record_id});
    } else {
      groups[key + "/box"].push_back({std::get<NormBox>(p.value), mask_to_box(gt), r.record_id});
    }
  }
  json report = json::object();
  for (const auto& [key, pairs] : groups) {
    for (const auto& p : pairs)
      require(p.is_mask() == pairs.front().is_mask(), ErrorCode::kInvalidArgument, "eval: mixed kinds in " + key);
    json entry = {{"n", pairs.size()}, {"giou", giou(pairs)}, {"ciou", ciou(pairs)}};
    if (!pairs.front().is_mask())
      for (const auto& [label, k] : {std::pair<const char*, double>{"pr@0.3", 0.3}, {"pr@0.5", 0.5}, {"pr@0.7", 0.7}})
        entry[label] = pr_at(pairs, k);
    report[key] = entry;
  }
  return report;
}

// Data-proportional base shares from a manifest's task counts.
inline TaskWeights shares_from_manifest(const Manifest& m) {
  TaskWeights w;
  const double total = static_cast<double>(m.header.record_count);
  require(total > 0, ErrorCode::kInvalidArgument, "schedule: manifest has no records");
  for (const auto& [task, n] : m.header.task_counts)
    if (n > 0) w[task_from_string(task)] = static_cast<double>(n) / total;
  return w;
}

}  // namespace geoseg
