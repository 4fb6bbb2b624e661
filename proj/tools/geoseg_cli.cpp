// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "geoseg/kernels.hpp"
#include "geoseg/pipeline.hpp"
#include "geoseg/stats.hpp"

namespace {

using geoseg::Error;
using geoseg::ErrorCode;
using nlohmann::json;
namespace fs = std::filesystem;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool mock = false;
  std::optional<int> workers;
};

geoseg::PipelineConfig load_config(const GlobalOptions& g) {
  geoseg::require(!g.config.empty(), ErrorCode::kInvalidArgument, "--config is required for this command");
  json j;
  try {
    j = json::parse(geoseg::read_text(g.config));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kInvalidArgument, "config " + g.config + ": " + e.what());
  }
  if (g.seed) j["seed"] = *g.seed;
  if (g.workers) j["workers"] = *g.workers;
  if (g.mock) j["gateway"]["mock_mode"] = true;
  return geoseg::PipelineConfig::from_json(j, fs::path(g.config).parent_path());
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_tile(const GlobalOptions& g, const std::string& out_dir) {
  const auto cfg = load_config(g);
  const auto taxonomy = geoseg::CategoryTaxonomy::load(cfg.taxonomy_path.string());
  fs::create_directories(out_dir);
  std::string listing;
  std::size_t n = 0;
  for (const auto& p : geoseg::load_patches(cfg, taxonomy)) {
    const fs::path base = fs::path(out_dir) / p.patch_id;
    geoseg::png::save_image(base.string() + ".png", p.image);
    geoseg::png::save_mask(base.string() + "_mask.png", p.mask);
    listing += json{{"patch_id", p.patch_id}, {"source_id", p.source_id}, {"origin", {p.origin.x, p.origin.y}}}.dump() + "\n";
    ++n;
  }
  geoseg::write_text_atomic(fs::path(out_dir) / "patches.jsonl", listing);
  print_json({{"patches", n}, {"out", out_dir}});
  return 0;
}

int cmd_extract(const GlobalOptions& g, const std::string& out) {
  const auto cfg = load_config(g);
  const auto taxonomy = geoseg::CategoryTaxonomy::load(cfg.taxonomy_path.string());
  std::string text;
  std::size_t n = 0;
  for (const auto& p : geoseg::load_patches(cfg, taxonomy)) {
    for (const auto& r : geoseg::extract_instances(p.mask, p.patch_id + "/")) {
      text += json{{"patch_id", p.patch_id},
                   {"region_id", r.region_id},
                   {"category", r.category},
                   {"area", r.area},
                   {"bbox", {r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max}},
                   {"centroid", {r.centroid_x, r.centroid_y}},
                   {"mask", {{"size", {p.mask.height, p.mask.width}},
                             {"counts", geoseg::rle::encode(geoseg::region_mask(r, p.mask.width, p.mask.height))}}}}
                  .dump() +
              "\n";
      ++n;
    }
  }
  if (out.empty()) {
    std::cout << text;
  } else {
    geoseg::write_text_atomic(out, text);
    print_json({{"regions", n}, {"out", out}});
  }
  return 0;
}

int cmd_filter(const GlobalOptions& g, bool no_gate) {
  const auto cfg = load_config(g);
  const auto taxonomy = geoseg::CategoryTaxonomy::load(cfg.taxonomy_path.string());
  std::optional<geoseg::PipelineServices> services;
  if (!no_gate) services = geoseg::PipelineServices::create(cfg);
  const auto patches = geoseg::load_patches(cfg, taxonomy);
  std::vector<json> audit;
  std::map<std::string, std::int64_t> reasons;
  std::int64_t kept = 0;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    geoseg::Rng rng(geoseg::mix_seed(cfg.seed, i));
    const auto regions = geoseg::extract_instances(patches[i].mask, patches[i].patch_id + "/");
    auto out = geoseg::filter_patch(patches[i], regions, cfg, taxonomy, services ? services->gateway.get() : nullptr, rng);
    kept += static_cast<std::int64_t>(out.survivors.size());
    for (auto& a : out.audit) {
      if (!a["reason"].is_null()) ++reasons[a["reason"].get<std::string>()];
      audit.push_back(std::move(a));
    }
  }
  const fs::path path = cfg.output_dir / "filter_audit.jsonl";
  geoseg::write_text_atomic(path, geoseg::audit_text(audit));
  print_json({{"patches", patches.size()}, {"survivors", kept}, {"rejections", reasons}, {"audit", path.string()}});
  return 0;
}

int cmd_gen(const GlobalOptions& g) {
  const auto cfg = load_config(g);
  const auto services = geoseg::PipelineServices::create(cfg);
  const auto result = geoseg::run_pipeline(cfg, services);
  print_json({{"patches", result.patches},
              {"resumed_patches", result.resumed},
              {"records", result.manifest.header.record_count},
              {"task_counts", result.manifest.header.task_counts},
              {"manifest", (cfg.output_dir / "manifest.jsonl").string()}});
  return 0;
}

int cmd_score(const GlobalOptions& g, const std::string& manifest_path, const std::string& out) {
  const auto cfg = load_config(g);
  const auto services = geoseg::PipelineServices::create(cfg);
  const auto input = geoseg::Manifest::load(manifest_path);
  std::vector<json> audit;
  const auto scored = geoseg::score_manifest(input, cfg, services, &audit);
  scored.save(out);
  geoseg::write_text_atomic(out + ".rejected.jsonl", geoseg::audit_text(audit));
  print_json({{"input_records", input.records.size()}, {"kept", scored.records.size()}, {"out", out}});
  return 0;
}

int cmd_stats(const std::string& manifest_path, bool as_json) {
  const auto stats = geoseg::stats_report(geoseg::Manifest::load(manifest_path));
  if (as_json) {
    print_json(stats.to_json());
    return 0;
  }
  std::cout << "samples           " << stats.total << "\n";
  for (const auto& [t, n] : stats.task_counts) std::cout << "  " << geoseg::to_string(t) << "  " << n << "\n";
  std::cout << "avg text length   " << stats.text_length_line() << "   overall (ref/int/res)\n";
  std::cout << "categories        " << stats.category_histogram.size() << "\n";
  std::cout << "point / box       " << stats.points << " / " << stats.boxes << "\n";
  std::cout << "attribute / ctx   " << stats.attribute << " / " << stats.contextual << "\n";
  std::cout << "avg mask size     " << (stats.avg_mask_area ? geoseg::fixed2(*stats.avg_mask_area) : "n/a") << "\n";
  return 0;
}

int cmd_eval(const std::string& manifest_path, const std::string& predictions) {
  print_json(geoseg::eval_run(geoseg::Manifest::load(manifest_path), geoseg::load_predictions(predictions)));
  return 0;
}

int cmd_schedule(const GlobalOptions& g, const std::string& manifest_path, std::optional<std::int64_t> steps, int rows,
                 std::optional<double> final_multiplier) {
  geoseg::SamplingSchedule s = g.config.empty() ? geoseg::default_schedule() : load_config(g).schedule;
  if (!manifest_path.empty()) s.base_shares = geoseg::shares_from_manifest(geoseg::Manifest::load(manifest_path));
  if (steps) s.total_steps = *steps;
  if (final_multiplier) s.interactive_final_multiplier = *final_multiplier;
  s.validate();
  geoseg::require(rows >= 2, ErrorCode::kInvalidArgument, "--rows must be >= 2");
  std::printf("step,multiplier,interactive,referring,reasoning\n");
  for (int i = 0; i < rows; ++i) {
    const std::int64_t step = s.total_steps * i / (rows - 1);
    const auto w = geoseg::weights_at(s, step);
    std::printf("%lld,%.6f,%.6f,%.6f,%.6f\n", static_cast<long long>(step), s.multiplier_at(step),
                w.at(geoseg::Task::kInteractive), w.at(geoseg::Task::kReferring), w.at(geoseg::Task::kReasoning));
  }
  return 0;
}

int cmd_kernels(std::uint64_t seed) {
  const auto results = geoseg::kernels::run_kernel_checks(seed);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-28s %s  %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

void report_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GeoSeg data-construction and evaluation tools"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  std::uint64_t seed_value = 0;
  int workers_value = 1;
  app.add_option("--config", g.config, "Pipeline config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed_value, "Override the config seed");
  app.add_flag("--mock", g.mock, "Answer model calls from the configured mock fixtures");
  auto* workers_opt = app.add_option("--workers", workers_value, "Patch worker threads");

  std::string out, manifest, predictions;
  bool no_gate = false, as_json = false;
  int rows = 11;
  std::int64_t steps_value = 0;
  double final_value = 0.7;

  auto* tile = app.add_subcommand("tile", "Tile configured sources into PNG patches");
  tile->add_option("--out", out, "Output directory")->required();
  auto* extract = app.add_subcommand("extract", "List connected regions of every patch as JSONL");
  extract->add_option("--out", out, "Output file (stdout when omitted)");
  auto* filter = app.add_subcommand("filter", "Run rules, cap and model gate; write the verdict audit");
  filter->add_flag("--no-gate", no_gate, "Skip the model gate");
  app.add_subcommand("gen", "Run the full pipeline and write the manifest");
  auto* score = app.add_subcommand("score", "Re-score the model-generated records of a manifest");
  score->add_option("--manifest", manifest)->required();
  score->add_option("--out", out)->required();
  auto* stats = app.add_subcommand("stats", "Dataset statistics of a manifest");
  stats->add_option("--manifest", manifest)->required();
  stats->add_flag("--json", as_json);
  auto* eval = app.add_subcommand("eval", "Score predictions against a manifest");
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--predictions", predictions)->required();
  auto* sched = app.add_subcommand("schedule-preview", "Print task sampling weights over training");
  sched->add_option("--manifest", manifest, "Derive base shares from a manifest");
  auto* steps_opt = sched->add_option("--steps", steps_value, "Total optimizer steps");
  sched->add_option("--rows", rows, "Table rows");
  auto* final_opt = sched->add_option("--final-multiplier", final_value);
  auto* kernels = app.add_subcommand("kernels-check", "Run the kernel invariant and gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    report_error("usage", e.what());
    return 64;
  }
  if (*seed_opt) g.seed = seed_value;
  if (*workers_opt) g.workers = workers_value;

  try {
    if (*tile) return cmd_tile(g, out);
    if (*extract) return cmd_extract(g, out);
    if (*filter) return cmd_filter(g, no_gate);
    if (app.got_subcommand("gen")) return cmd_gen(g);
    if (*score) return cmd_score(g, manifest, out);
    if (*stats) return cmd_stats(manifest, as_json);
    if (*eval) return cmd_eval(manifest, predictions);
    if (*sched)
      return cmd_schedule(g, manifest, *steps_opt ? std::optional<std::int64_t>(steps_value) : std::nullopt, rows,
                          *final_opt ? std::optional<double>(final_value) : std::nullopt);
    if (*kernels) return cmd_kernels(g.seed.value_or(7));
  } catch (const Error& e) {
    report_error(std::string(geoseg::to_string(e.code())), e.what());
    return 2;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 3;
  }
  return 0;
}
