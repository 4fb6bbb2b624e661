// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner. Prints one PASS/FAIL line per criterion; with
// --criterion N only that one runs and the exit status reflects it.

#include <chrono>
#include <cstdio>
#include <functional>
#include <thread>

#include "CLI11.hpp"

#include "geoseg/kernels.hpp"
#include "geoseg/pipeline.hpp"
#include "oracles.hpp"

using namespace geoseg;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("geoseg_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

InstanceRegion dot(CategoryId c, int x, int y, std::string id) { return InstanceRegion::from_pixels(c, {{x, y}}, id); }

InstanceRegion sized(CategoryId c, std::int64_t area, std::string id) {
  auto r = dot(c, 0, 0, std::move(id));
  r.area = area;
  return r;
}

// --------------------------------------------------------------------- 1

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng rng(1001);
  for (int fixture = 0; fixture < 1000 && o.pass; ++fixture) {
    const int w = 1 + static_cast<int>(rng.uniform_below(64)), h = 1 + static_cast<int>(rng.uniform_below(64));
    const int n = 1 + static_cast<int>(rng.uniform_below(4));
    std::vector<EvalPair<PixelBox>> mask_pairs, box_pairs;
    std::int64_t inter = 0, uni = 0;
    double mean = 0;
    std::vector<double> box_ious;
    for (int i = 0; i < n; ++i) {
      auto a = oracle::random_mask(w, h, rng.uniform01(), rng);
      auto b = oracle::random_mask(w, h, rng.uniform01(), rng);
      const auto c = oracle::pixel_counts(a, b);
      const auto got = mask_overlap(a, b);
      o.check(got.intersection == c.inter && got.union_ == c.uni, "mask counts differ");
      inter += c.inter;
      uni += c.uni;
      mean += c.uni ? double(c.inter) / double(c.uni) : 1.0;
      mask_pairs.push_back({std::move(a), std::move(b), "m"});

      const auto ba = oracle::random_box(64, rng), bb = oracle::random_box(64, rng);
      const auto bc = oracle::box_counts(ba, bb);
      box_ious.push_back(double(bc.inter) / double(bc.uni));
      o.check(box_iou(ba, bb) == box_ious.back(), "box_iou differs");
      box_pairs.push_back({ba, bb, "b"});
    }
    mean /= n;
    o.check(std::abs(giou(mask_pairs) - mean) <= 1e-12, "giou differs");
    o.check(ciou(mask_pairs) == (uni ? double(inter) / double(uni) : 1.0), "ciou differs");
    for (double k : {0.3, 0.5, 0.7}) {
      double hits = 0;
      for (double v : box_ious) hits += v >= k;
      o.check(pr_at(box_pairs, k) == hits / n, "pr_at differs");
    }
  }
  auto rows = [](std::initializer_list<const char*> r) {
    auto m = BinaryMask::empty(4, 4);
    int y = 0;
    for (const char* s : r) {
      for (int x = 0; x < 4; ++x) m.set(x, y, s[x] == '#');
      ++y;
    }
    return m;
  };
  const auto left = rows({"##..", "##..", "##..", "##.."}), top = rows({"####", "####", "....", "...."});
  const auto full = rows({"####", "####", "####", "####"});
  const std::vector<EvalPair<NormBox>> demo{{left, top, "a"}, {full, full, "b"}};
  const double c = ciou(demo), g = giou(demo);
  o.check(std::abs(c - 0.7143) <= 1e-4 && std::abs(g - 0.6667) <= 1e-4, "cIoU/gIoU fixture");
  const double t = seconds_since(t0);
  o.check(t < 10.0, "too slow");
  if (o.pass) o.detail = "1000 fixtures exact; cIoU " + fmt("%.4f", c) + " vs gIoU " + fmt("%.4f", g) + ", " + fmt("%.2fs", t);
  return o;
}

// --------------------------------------------------------------------- 2

Outcome filter_rules() {
  const auto t0 = Clock::now();
  Outcome o;
  const auto v = rule_filter(std::vector<InstanceRegion>{sized(1, 4999, "a"), sized(2, 5000, "b"), sized(3, 700000, "c")},
                             1000000);
  o.check(!v[0].kept && v[0].reason == RejectReason::kTooSmall, "0.004999 not rejected");
  o.check(v[1].kept, "0.005 not accepted");
  o.check(v[2].kept, "0.70 not accepted");

  std::vector<InstanceRegion> seven;
  for (int i = 0; i < 7; ++i) seven.push_back(dot(5, 40 * i, 0, "s" + std::to_string(i)));
  for (const auto& s : rule_filter(seven, 100))
    o.check(s.reason == RejectReason::kTooManySiblings, "7 siblings not rejected");
  std::vector<InstanceRegion> six(seven.begin(), seven.begin() + 6);
  for (const auto& s : rule_filter(six, 100)) o.check(s.kept, "6 siblings rejected");

  for (const auto& s : rule_filter(std::vector<InstanceRegion>{dot(7, 0, 0, "a"), dot(7, 15, 0, "b")}, 100))
    o.check(s.reason == RejectReason::kTooClose, "distance 15.0 not rejected");
  FilterThresholds cfg;
  o.check(too_close(15.0, cfg) && !too_close(15.01, cfg), "proximity boundary");

  const std::vector<InstanceRegion> three{dot(1, 0, 0, "a"), dot(1, 50, 50, "b"), dot(1, 90, 90, "c")};
  std::array<int, 3> survived{};
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    Rng rng(mix_seed(77, t));
    const auto c = cap_per_category(three, rng);
    int kept = 0;
    for (int i = 0; i < 3; ++i) {
      kept += c[i].kept;
      survived[i] += c[i].kept;
    }
    o.check(kept == 2, "cap did not keep exactly 2");
  }
  std::string freqs;
  for (int s : survived) {
    const double f = s / double(trials);
    o.check(std::abs(f - 2.0 / 3.0) <= 0.02, "survival frequency " + fmt("%.4f", f));
    freqs += (freqs.empty() ? "" : "/") + fmt("%.3f", f);
  }
  const double t = seconds_since(t0);
  o.check(t < 30.0, "too slow");
  if (o.pass) o.detail = "size/sibling/proximity constants hold; survival " + freqs + ", " + fmt("%.2fs", t);
  return o;
}

// --------------------------------------------------------------------- 3

Outcome point_distribution() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng rng(3003);
  std::array<int, 3> n{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++n[draw_point_count(5000, rng) - 1];
  const std::array<double, 3> p{0.6, 0.2, 0.2};
  double chi2 = 0;
  std::string freqs;
  for (int k = 0; k < 3; ++k) {
    const double f = n[k] / double(draws);
    o.check(std::abs(f - p[k]) <= 0.01, "P" + std::to_string(k + 1) + " = " + fmt("%.4f", f));
    chi2 += (n[k] - p[k] * draws) * (n[k] - p[k] * draws) / (p[k] * draws);
    freqs += (freqs.empty() ? "" : "/") + fmt("%.4f", f);
  }
  const double pval = oracle::chi2_sf_df2(chi2);
  o.check(pval > 0.001, "chi-square p = " + fmt("%.2g", pval));
  for (std::int64_t area = 1; area < 200; ++area)
    for (int i = 0; i < 50; ++i) o.check(draw_point_count(area, rng) == 1, "small area got more than one point");
  const double t = seconds_since(t0);
  o.check(t < 10.0, "too slow");
  if (o.pass) o.detail = "P(k) " + freqs + ", chi2 p " + fmt("%.3f", pval) + ", " + fmt("%.2fs", t);
  return o;
}

// --------------------------------------------------------------------- 4

Outcome template_goldens() {
  Outcome o;
  const std::string pre = "Please segment the region/target corresponding to the ";
  const std::vector<std::pair<std::string, std::string>> cases{
      {point_instruction(std::vector<NormPoint>{{0.5, 0.5}}), pre + "points {(0.500, 0.500)}."},
      {point_instruction(std::vector<NormPoint>{{0.007, 0.011}, {0.9994, 0.0005}}),
       pre + "points {(0.007, 0.011), (0.999, 0.001)}."},
      {point_instruction(std::vector<NormPoint>{{0.1, 0.2}, {0.3, 0.4}, {1.0, 0.0}}),
       pre + "points {(0.100, 0.200), (0.300, 0.400), (1.000, 0.000)}."},
      {box_instruction(PixelBox{0, 0, 256, 256}, 512, 512), pre + "box x0,y0=[0.000,0.000], x1,y1=[0.500,0.500]."},
      {box_instruction(PixelBox{3, 5, 4, 6}, 512, 512), pre + "box x0,y0=[0.006,0.010], x1,y1=[0.008,0.012]."}};
  int i = 0;
  for (const auto& [got, want] : cases) o.check(got == want, "fixture " + std::to_string(++i) + ": " + got);
  if (o.pass) o.detail = "5/5 byte-identical";
  return o;
}

// --------------------------------------------------------------------- 5

Outcome tiling_formula() {
  Outcome o;
  std::vector<int> counts(1537, 0);
  for (int d = 512; d <= 1536; ++d) {
    counts[d] = static_cast<int>(window_starts(d, 512, 256).size());
    o.check(counts[d] == oracle::window_count(d, 512, 256), "dim " + std::to_string(d));
  }
  const auto patches = tile(RasterImage::filled(800, 800, 3, 0, "s"), CategoricalMask::filled(800, 800), 512, 256);
  o.check(patches.size() == 9 && patches.back().origin == Pixel{288, 288}, "800x800 clamp case");
  const auto rect = tile(RasterImage::filled(1300, 700, 3, 0, "s"), CategoricalMask::filled(1300, 700), 512, 256);
  o.check(static_cast<int>(rect.size()) == oracle::window_count(1300, 512, 256) * oracle::window_count(700, 512, 256),
          "1300x700 patch count");
  if (o.pass) o.detail = "dims 512..1536 match enumeration; 800x800 -> 9";
  return o;
}

// --------------------------------------------------------------------- 6

Outcome ccl_equivalence() {
  Outcome o;
  Rng rng(6006);
  auto as_sets = [](const std::vector<InstanceRegion>& regions) {
    std::vector<oracle::PixelSet> out;
    for (const auto& r : regions) {
      oracle::PixelSet s;
      for (const auto& p : r.pixels) s.emplace_back(p.y, p.x);
      std::sort(s.begin(), s.end());
      out.push_back(std::move(s));
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  for (int trial = 0; trial < 500 && o.pass; ++trial) {
    const int w = 1 + static_cast<int>(rng.uniform_below(64)), h = 1 + static_cast<int>(rng.uniform_below(64));
    const auto m = oracle::random_labels(w, h, 1 + static_cast<int>(rng.uniform_below(3)), rng.uniform01(), rng);
    for (CategoryId c = 1; c <= 3; ++c)
      o.check(as_sets(connected_components(m, c)) == oracle::flood_fill(m, c), "mask " + std::to_string(trial));
  }
  auto diag = CategoricalMask::filled(3, 3);
  diag.at(0, 0) = diag.at(1, 1) = diag.at(2, 2) = 4;
  o.check(connected_components(diag, 4).size() == 1, "diagonal merge");
  if (o.pass) o.detail = "500 masks match flood fill; diagonal merge ok";
  return o;
}

// --------------------------------------------------------------------- 7

Outcome kernel_suite() {
  const auto t0 = Clock::now();
  Outcome o;
  std::string names;
  for (const auto& r : kernels::run_kernel_checks(7, 1e-4, 1e-5, 8)) {
    o.check(r.passed, r.name + ": " + r.detail);
    names += (names.empty() ? "" : ", ") + r.name;
  }
  const double t = seconds_since(t0);
  o.check(t < 60.0, "too slow");
  if (o.pass) o.detail = names + "; " + fmt("%.2fs", t);
  return o;
}

// --------------------------------------------------------------------- 8

Outcome pts_endpoints() {
  Outcome o;
  SamplingSchedule s = default_schedule();
  s.total_steps = 10000;
  o.check(weights_at(s, 0) == s.base_shares, "m(0) != 1");
  o.check(s.multiplier_at(0) == 1.0 && s.multiplier_at(s.total_steps) == 0.7, "multiplier endpoints");
  const double i0 = s.base_shares.at(Task::kInteractive);
  o.check(weights_at(s, s.total_steps).at(Task::kInteractive) == i0 * 0.7, "final interactive weight");
  Rng rng(8008);
  double worst = 0;
  std::vector<std::int64_t> steps;
  for (int i = 0; i < 1000; ++i) steps.push_back(static_cast<std::int64_t>(rng.uniform_below(s.total_steps + 1)));
  std::sort(steps.begin(), steps.end());
  double prev = 1.0;
  for (auto step : steps) {
    const auto w = weights_at(s, step);
    double sum = 0;
    for (const auto& [t, v] : w) sum += v;
    worst = std::max(worst, std::abs(sum - 1.0));
    o.check(w.at(Task::kInteractive) <= prev, "interactive weight increased");
    prev = w.at(Task::kInteractive);
  }
  o.check(worst <= 1e-9, "weights do not sum to 1");
  const auto w = weights_at(s, s.total_steps / 2);
  std::map<Task, int> n;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++n[draw_task(w, rng)];
  for (const auto& [t, p] : w)
    o.check(std::abs(n[t] / double(draws) - p) <= 0.01, "draw frequency for " + std::string(to_string(t)));
  if (o.pass) o.detail = "m(0)=1, m(T)=0.7, max |sum-1| " + fmt("%.1e", worst) + ", draws within 0.01";
  return o;
}

// --------------------------------------------------------------------- 9

const std::vector<std::string> kDemoRecords = {
    "toyA_x0_y0/c25_0/interactive-box",      "toyA_x0_y0/c25_0/interactive-point",
    "toyA_x0_y0/c25_0/reasoning-attribute",  "toyA_x0_y0/c25_0/referring",
    "toyA_x0_y0/c63_0/interactive-box",      "toyA_x0_y0/c63_0/interactive-point",
    "toyA_x0_y0/c63_0/reasoning-contextual", "toyA_x0_y0/c63_0/referring",
    "toyA_x0_y0/c63_1/interactive-box",      "toyA_x0_y0/c63_1/interactive-point",
    "toyA_x0_y0/c63_1/referring",            "toyB_x0_y0/c69_0/interactive-box",
    "toyB_x0_y0/c69_0/interactive-point",    "toyB_x0_y0/c69_0/reasoning-attribute"};

PipelineConfig demo_config(const fs::path& out) {
  auto cfg = PipelineConfig::load(GEOSEG_DATA_DIR "/demo/config.json");
  cfg.output_dir = out;
  return cfg;
}

Outcome end_to_end() {
  Outcome o;
  auto run = [](const PipelineConfig& cfg) {
    run_pipeline(cfg, PipelineServices::create(cfg));
    return read_text(cfg.output_dir / "manifest.jsonl");
  };
  const std::string first = run(demo_config(scratch("e2e_a")));
  const std::string second = run(demo_config(scratch("e2e_b")));
  o.check(first == second, "two runs differ");

  auto aborted = demo_config(scratch("e2e_resume"));
  aborted.abort_after_patches = 1;
  bool threw = false;
  try {
    run_pipeline(aborted, PipelineServices::create(aborted));
  } catch (const Error& e) {
    threw = e.code() == ErrorCode::kAborted;
  }
  o.check(threw, "abort_after_patches did not abort");
  aborted.abort_after_patches.reset();
  const auto resumed = run_pipeline(aborted, PipelineServices::create(aborted));
  o.check(resumed.resumed == 1, "resume restored " + std::to_string(resumed.resumed) + " patches");
  o.check(read_text(aborted.output_dir / "manifest.jsonl") == first, "resumed manifest differs");

  std::istringstream in(first);
  const Manifest m = Manifest::parse(in);
  std::vector<std::string> ids;
  for (const auto& r : m.records) ids.push_back(r.record_id);
  o.check(ids == kDemoRecords, "record set differs from the enumeration");
  if (o.pass) o.detail = std::to_string(ids.size()) + " records; repeat and resume byte-identical";
  return o;
}

// -------------------------------------------------------------------- 10

Outcome rle_and_manifest() {
  Outcome o;
  Rng rng(1010);
  for (int i = 0; i < 1000 && o.pass; ++i) {
    const int w = 1 + static_cast<int>(rng.uniform_below(64)), h = 1 + static_cast<int>(rng.uniform_below(64));
    const auto m = oracle::random_mask(w, h, rng.uniform01(), rng);
    o.check(rle::decode(rle::encode(m), w, h) == m, "round trip " + std::to_string(i));
  }
  try {
    const auto cfg = demo_config(scratch("rle_manifest"));
    run_pipeline(cfg, PipelineServices::create(cfg));
    std::istringstream good(read_text(cfg.output_dir / "manifest.jsonl"));
    const Manifest m = Manifest::parse(good);
    o.check(m.header.record_count == static_cast<std::int64_t>(m.records.size()), "record count");
    auto text = m.serialize();
    const auto pos = text.find("\"record_count\":");
    text.replace(pos, 15, "\"record_count\":9");
    std::istringstream bad(text);
    bool rejected = false;
    try {
      Manifest::parse(bad);
    } catch (const Error& e) {
      rejected = e.code() == ErrorCode::kManifest;
    }
    o.check(rejected, "tampered header accepted");
  } catch (const Error& e) {
    o.check(false, e.what());
  }
  if (o.pass) o.detail = "1000 masks round-trip; header mismatch rejected";
  return o;
}

// -------------------------------------------------------------------- 11

// 1536x1536 synthetic source with rectangles of a few categories.
std::pair<RasterImage, CategoricalMask> synthetic_source(Rng& rng) {
  const int dim = 1536;
  auto mask = CategoricalMask::filled(dim, dim);
  for (int i = 0; i < 400; ++i) {
    const int x = static_cast<int>(rng.uniform_below(dim - 60)), y = static_cast<int>(rng.uniform_below(dim - 60));
    const int w = 8 + static_cast<int>(rng.uniform_below(50)), h = 8 + static_cast<int>(rng.uniform_below(50));
    const auto c = static_cast<CategoryId>(1 + rng.uniform_below(6));
    for (int yy = y; yy < y + h; ++yy)
      for (int xx = x; xx < x + w; ++xx) mask.at(xx, yy) = c;
  }
  return {RasterImage::filled(dim, dim, 3, 90, "synthetic"), std::move(mask)};
}

// Copies the demo corpus under several source ids so the pipeline has work
// for every worker.
fs::path replicated_corpus(int copies) {
  const auto dir = scratch("corpus");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (int i = 0; i < copies; ++i)
    for (const char* id : {"toyA", "toyB"}) {
      const std::string name = std::string(id) + "_" + std::to_string(i) + ".png";
      fs::copy_file(fs::path(GEOSEG_DATA_DIR) / "demo/images" / (std::string(id) + ".png"), dir / "images" / name);
      fs::copy_file(fs::path(GEOSEG_DATA_DIR) / "demo/masks" / (std::string(id) + ".png"), dir / "masks" / name);
    }
  return dir;
}

Outcome throughput() {
  Outcome o;
  Rng rng(1111);
  const auto [image, mask] = synthetic_source(rng);
  const auto t0 = Clock::now();
  std::size_t patches = 0;
  while (seconds_since(t0) < 2.0) {
    for (const auto& p : tile(image, mask, 512, 256)) {
      const auto regions = extract_instances(p.mask, p.patch_id + "/");
      const auto verdicts = rule_filter(regions, static_cast<std::int64_t>(p.mask.width) * p.mask.height);
      patches += !verdicts.empty() || regions.empty();
    }
  }
  const double rate = patches / seconds_since(t0);
  o.check(rate >= 50.0, "single-threaded " + fmt("%.1f", rate) + " patches/s");

  const auto corpus = replicated_corpus(3);
  auto j = demo_config(scratch("unused")).raw;
  j["input_dir"] = corpus.string();
  j["taxonomy"] = GEOSEG_DATA_DIR "/taxonomy/geoseg117.txt";
  j["mock_fixtures"] = GEOSEG_DATA_DIR "/demo/mock_fixtures.json";
  auto timed = [&](int workers, const std::string& name) {
    auto cfg = PipelineConfig::from_json(j, corpus);
    cfg.workers = workers;
    cfg.output_dir = scratch(name);
    const auto start = Clock::now();
    run_pipeline(cfg, PipelineServices::create(cfg));
    return std::make_pair(seconds_since(start), read_text(cfg.output_dir / "manifest.jsonl"));
  };
  const auto [t1, bytes1] = timed(1, "w1");
  const auto [t4, bytes4] = timed(4, "w4");
  o.check(bytes1 == bytes4, "4-worker manifest differs from 1-worker manifest");
  const double speedup = t1 / t4;
  o.check(speedup >= 3.0, "4-worker speedup " + fmt("%.2f", speedup) + "x on " +
                              std::to_string(std::thread::hardware_concurrency()) + " hardware thread(s)");
  const std::string summary = fmt("%.0f", rate) + " patches/s single-threaded; 4 workers " + fmt("%.2f", speedup) +
                              "x, identical bytes";
  if (o.pass)
    o.detail = summary;
  else
    o.detail += " (" + summary + ")";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geoseg acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric oracle equivalence", metric_oracle},
      {"filter rule constants", filter_rules},
      {"point count distribution", point_distribution},
      {"instruction template goldens", template_goldens},
      {"tiling window count", tiling_formula},
      {"connected components vs flood fill", ccl_equivalence},
      {"kernel invariants and gradients", kernel_suite},
      {"task schedule endpoints", pts_endpoints},
      {"end-to-end determinism", end_to_end},
      {"rle round trip and manifest reconciliation", rle_and_manifest},
      {"throughput and worker scaling", throughput}};

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<int>(i + 1) != only) continue;
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    std::printf("AC%zu %s %s: %s\n", i + 1, out.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), out.detail.c_str());
    std::fflush(stdout);
    all = all && out.pass;
  }
  return all ? 0 : 1;
}
