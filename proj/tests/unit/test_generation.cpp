// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

#include "httplib.h"

#include "geoseg/filter.hpp"
#include "geoseg/gateway.hpp"
#include "geoseg/instruct.hpp"
#include "geoseg/prompts.hpp"
#include "oracles.hpp"

using namespace geoseg;
namespace fs = std::filesystem;

namespace {

InstanceRegion block(CategoryId c, int x0, int y0, int w, int h, std::string id) {
  std::vector<Pixel> px;
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) px.push_back({x, y});
  return InstanceRegion::from_pixels(c, std::move(px), std::move(id));
}

InstanceRegion dot(CategoryId c, int x, int y, std::string id) { return block(c, x, y, 1, 1, std::move(id)); }

// Region with a forced area, for size-rule boundaries that would need huge
// pixel lists otherwise.
InstanceRegion sized(CategoryId c, std::int64_t area, std::string id) {
  auto r = dot(c, 0, 0, std::move(id));
  r.area = area;
  return r;
}

std::shared_ptr<Gateway> mock_with(std::vector<MockRule> rules, std::optional<std::string> fallback = {}) {
  MockFixtures f;
  f.rules = std::move(rules);
  f.fallback = std::move(fallback);
  return Gateway::mock(GatewayConfig{}, std::move(f));
}

RasterImage canvas(int w = 32, int h = 32) { return RasterImage::filled(w, h, 3, 40, "img"); }

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("geoseg_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

// ------------------------------------------------------------ rule filter

TEST(RuleFilter, AreaBoundsAreInclusive) {
  const std::int64_t patch = 1000000;
  std::vector<InstanceRegion> regions{sized(1, 4999, "a"), sized(2, 5000, "b"), sized(3, 700000, "c"),
                                      sized(4, 700001, "d")};
  const auto v = rule_filter(regions, patch);
  EXPECT_FALSE(v[0].kept);
  EXPECT_EQ(v[0].reason, RejectReason::kTooSmall);
  EXPECT_TRUE(v[1].kept);
  EXPECT_TRUE(v[2].kept);
  EXPECT_EQ(v[3].reason, RejectReason::kTooLarge);
}

TEST(RuleFilter, SmallRegionInFullPatch) {
  std::vector<InstanceRegion> r{sized(1, 1000, "a"), sized(2, 262144 / 2, "b")};
  const auto v = rule_filter(r, 262144);
  EXPECT_EQ(v[0].reason, RejectReason::kTooSmall);
  EXPECT_TRUE(v[1].kept);
}

TEST(RuleFilter, SevenSiblingsAllRejectedSixKept) {
  std::vector<InstanceRegion> seven, six;
  for (int i = 0; i < 7; ++i) seven.push_back(dot(5, 40 * i, 0, "s" + std::to_string(i)));
  six.assign(seven.begin(), seven.begin() + 6);
  for (const auto& v : rule_filter(seven, 100)) EXPECT_EQ(v.reason, RejectReason::kTooManySiblings);
  for (const auto& v : rule_filter(six, 100)) EXPECT_TRUE(v.kept);
}

TEST(RuleFilter, ProximityBoundary) {
  FilterThresholds cfg;
  EXPECT_TRUE(too_close(15.0, cfg));
  EXPECT_FALSE(too_close(15.01, cfg));
  std::vector<InstanceRegion> at15{dot(7, 0, 0, "a"), dot(7, 15, 0, "b")};
  for (const auto& v : rule_filter(at15, 100)) EXPECT_EQ(v.reason, RejectReason::kTooClose);
  std::vector<InstanceRegion> beyond{dot(7, 0, 0, "a"), dot(7, 15, 1, "b")};  // sqrt(226)
  for (const auto& v : rule_filter(beyond, 100)) EXPECT_TRUE(v.kept);
  cfg.proximity_px = 15.04;
  for (const auto& v : rule_filter(beyond, 100, cfg)) EXPECT_FALSE(v.kept);
}

TEST(RuleFilter, ProximityIgnoresOtherCategoriesAndInvalidRegions) {
  std::vector<InstanceRegion> r{dot(7, 0, 0, "a"), dot(8, 3, 0, "b"), sized(7, 0, "c")};
  r[2].pixels = {{2, 0}};
  const auto v = rule_filter(r, 100);
  EXPECT_TRUE(v[0].kept);
  EXPECT_TRUE(v[1].kept);
  EXPECT_EQ(v[2].reason, RejectReason::kTooSmall);
}

TEST(RuleFilter, OrderSizeBeforeSiblings) {
  std::vector<InstanceRegion> r;
  for (int i = 0; i < 7; ++i) r.push_back(dot(5, 40 * i, 0, "s" + std::to_string(i)));
  r[0].area = 0;
  const auto v = rule_filter(r, 100);
  EXPECT_EQ(v[0].reason, RejectReason::kTooSmall);
  EXPECT_EQ(v[1].reason, RejectReason::kTooManySiblings);
}

// -------------------------------------------------------------------- cap

TEST(Cap, UnderAndAtCap) {
  Rng rng(1);
  std::vector<InstanceRegion> one{dot(1, 0, 0, "a")}, two{dot(1, 0, 0, "a"), dot(1, 5, 5, "b")};
  EXPECT_TRUE(cap_per_category(one, rng)[0].kept);
  for (const auto& v : cap_per_category(two, rng)) EXPECT_TRUE(v.kept);
}

TEST(Cap, ThreeRegionsSurviveTwoThirds) {
  std::vector<InstanceRegion> three{dot(1, 0, 0, "a"), dot(1, 5, 5, "b"), dot(1, 9, 9, "c")};
  std::array<int, 3> survived{};
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    Rng rng(mix_seed(2026, t));
    const auto v = cap_per_category(three, rng);
    int kept = 0;
    for (int i = 0; i < 3; ++i) {
      kept += v[i].kept;
      survived[i] += v[i].kept;
      if (!v[i].kept) ASSERT_EQ(v[i].reason, RejectReason::kCapSampledOut);
    }
    ASSERT_EQ(kept, 2);
  }
  for (int s : survived) EXPECT_NEAR(s / double(trials), 2.0 / 3.0, 0.02);
}

// ---------------------------------------------------------------- contour

TEST(Contour, Examples) {
  EXPECT_EQ(contour_pixels(dot(1, 4, 4, "p"), 16, 16, 1).size(), 1u);
  EXPECT_EQ(contour_pixels(block(1, 3, 3, 10, 10, "sq"), 32, 32, 1).size(), 36u);
  const auto full = block(1, 0, 0, 8, 8, "full");
  const auto ring = contour_pixels(full, 8, 8, 1);
  EXPECT_EQ(ring.size(), 28u);
  for (const auto& p : ring) EXPECT_TRUE(p.x == 0 || p.y == 0 || p.x == 7 || p.y == 7);
  EXPECT_EQ(contour_pixels(block(1, 3, 3, 10, 10, "sq"), 32, 32, 3).size(), 100u - 16u);
}

TEST(Contour, RenderPaintsOnlyContour) {
  const auto img = canvas();
  const auto out = render_outline(img, block(1, 3, 3, 10, 10, "sq"), 1);
  int red = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) red += out.pixel(x, y)[0] == 255 && out.pixel(x, y)[1] == 0;
  EXPECT_EQ(red, 36);
  EXPECT_EQ(out.pixel(7, 7)[0], 40);
}

// ---------------------------------------------------------------- gate

TEST(Gate, Decisions) {
  const auto region = block(1, 3, 3, 10, 10, "r");
  const auto img = render_outline(canvas(), region);
  EXPECT_TRUE(model_gate("r", img, "Car", *mock_with({}, "looks fine. KEEP")).kept);
  const auto no = model_gate("r", img, "Car", *mock_with({}, "mixed region\nDISCARD"));
  EXPECT_EQ(no.reason, RejectReason::kGateReject);
  const auto prose = model_gate("r", img, "Car", *mock_with({}, "I think it is keepable, maybe."));
  EXPECT_EQ(prose.reason, RejectReason::kGateUnparsable);
}

TEST(Gate, PromptNamesCategory) {
  const auto req = mask_filter_request(canvas(), "Ship", "id", GateOptions{});
  EXPECT_EQ(req.prompt_name, "mask_filter");
  EXPECT_NE(req.messages[0].text.find("\"Ship\""), std::string::npos);
  ASSERT_EQ(req.messages[0].images.size(), 1u);
}

// ------------------------------------------------------- interactive text

TEST(Points, SmallAreasGetOnePoint) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(draw_point_count(150, rng), 1);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(draw_point_count(199, rng), 1);
}

TEST(Points, Distribution) {
  Rng rng(4);
  std::array<int, 3> n{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++n[draw_point_count(5000, rng) - 1];
  const std::array<double, 3> p{0.6, 0.2, 0.2};
  double chi2 = 0;
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(n[k] / double(draws), p[k], 0.01);
    const double e = p[k] * draws;
    chi2 += (n[k] - e) * (n[k] - e) / e;
  }
  EXPECT_GT(oracle::chi2_sf_df2(chi2), 0.001);
}

TEST(Points, SingletonPixel) {
  Rng rng(5);
  const auto pts = sample_points(dot(1, 3, 5, "p"), 512, 512, rng);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts[0], (NormPoint{0.007, 0.011}));
}

TEST(Points, DistinctAndInsideRegion) {
  Rng rng(6);
  const auto r = block(1, 10, 20, 20, 20, "b");
  for (int i = 0; i < 200; ++i) {
    const auto pts = sample_points(r, 512, 512, rng);
    for (std::size_t a = 0; a < pts.size(); ++a) {
      EXPECT_GE(pts[a].x, 10 / 512.0 - 1e-3);
      EXPECT_LE(pts[a].x, 30 / 512.0 + 1e-3);
      for (std::size_t b = a + 1; b < pts.size(); ++b) EXPECT_NE(pts[a], pts[b]);
    }
  }
}

TEST(Templates, PointGolden) {
  const std::vector<NormPoint> one{{0.5, 0.5}};
  EXPECT_EQ(point_instruction(one), "Please segment the region/target corresponding to the points {(0.500, 0.500)}.");
  const std::vector<NormPoint> two{{0.25, 0.75}, {0.1, 0.2}};
  EXPECT_EQ(point_instruction(two),
            "Please segment the region/target corresponding to the points {(0.250, 0.750), (0.100, 0.200)}.");
  const std::vector<NormPoint> four(4, NormPoint{0.1, 0.1});
  EXPECT_THROW(point_instruction(four), Error);
  EXPECT_THROW(point_instruction(std::vector<NormPoint>{}), Error);
}

TEST(Templates, BoxGolden) {
  EXPECT_EQ(box_instruction(PixelBox{0, 0, 512, 512}, 512, 512),
            "Please segment the region/target corresponding to the box x0,y0=[0.000,0.000], x1,y1=[1.000,1.000].");
  EXPECT_EQ(box_instruction(PixelBox{0, 0, 256, 256}, 512, 512),
            "Please segment the region/target corresponding to the box x0,y0=[0.000,0.000], x1,y1=[0.500,0.500].");
  EXPECT_EQ(box_instruction(dot(1, 3, 5, "p"), 512, 512),
            "Please segment the region/target corresponding to the box x0,y0=[0.006,0.010], x1,y1=[0.008,0.012].");
  EXPECT_THROW(box_instruction(PixelBox{0, 0, 513, 10}, 512, 512), Error);
}

// ------------------------------------------------------------- reasoning

TEST(Diversity, Examples) {
  std::map<std::string, int> ten;
  for (int i = 1; i <= 10; ++i) ten["img" + std::to_string(i)] = i;
  EXPECT_EQ(diversity_filter(ten, 0.1), (std::set<std::string>{"img10"}));
  std::map<std::string, int> flat{{"a", 3}, {"b", 3}, {"c", 3}};
  EXPECT_EQ(diversity_filter(flat, 0.1).size(), 3u);
  std::map<std::string, int> pairs;
  const int counts[] = {1, 1, 2, 2, 3, 3, 4, 4, 5, 5};
  for (int i = 0; i < 10; ++i) pairs["p" + std::to_string(i)] = counts[i];
  EXPECT_EQ(diversity_filter(pairs, 0.2), (std::set<std::string>{"p8", "p9"}));
}

TEST(Reasoning, KindByCount) {
  EXPECT_EQ(reasoning_kind_for_count(1), ReasoningKind::kAttribute);
  EXPECT_EQ(reasoning_kind_for_count(2), ReasoningKind::kContextual);
  EXPECT_EQ(reasoning_kind_for_count(3), ReasoningKind::kContextual);
  EXPECT_EQ(reasoning_kind_for_count(4), ReasoningKind::kIneligible);
}

TEST(Reasoning, AssignmentNeedsCategoryPresent) {
  std::vector<InstanceRegion> r{dot(3, 0, 0, "a"), dot(4, 9, 9, "b"), dot(4, 20, 20, "c")};
  EXPECT_EQ(assign_reasoning_type(r, 3).kind, ReasoningKind::kAttribute);
  EXPECT_EQ(assign_reasoning_type(r, 4).kind, ReasoningKind::kContextual);
  EXPECT_THROW(assign_reasoning_type(r, 5), Error);
}

// --------------------------------------------------------------- prompts

TEST(Prompts, SectionExtraction) {
  EXPECT_EQ(prompts::extract_section("Question: the pond left of the road", "Question:"), "the pond left of the road");
  EXPECT_EQ(prompts::extract_section("no marker here", "Question:"), std::nullopt);
  EXPECT_EQ(prompts::extract_section("Question: first\nQuestion: second", "Question:"), "first");
  EXPECT_EQ(prompts::extract_section("Question: multi\nline\nExplanation: x", "Question:"), "multi\nline");
}

TEST(Prompts, ScoresNeedEveryDimension) {
  const auto& dims = prompts::referring_dimensions();
  EXPECT_TRUE(prompts::parse_scores("SCORES:\nclarity: 9\ngrounding: 8\nconsistency: 7\nuniqueness: 10", dims));
  EXPECT_FALSE(prompts::parse_scores("SCORES:\nclarity: 9\ngrounding: 8\nconsistency: 7", dims));
  EXPECT_FALSE(prompts::parse_scores("SCORES:\nclarity: 11\ngrounding: 8\nconsistency: 7\nuniqueness: 1", dims));
  EXPECT_FALSE(prompts::parse_scores("clarity: 9", dims));
}

TEST(Prompts, RenderRejectsUnknownPlaceholders) {
  EXPECT_EQ(prompts::render("a {x} b", {{"x", "1"}}), "a 1 b");
  EXPECT_THROW(prompts::render("a {y}", {{"x", "1"}}), Error);
}

// ------------------------------------------------------------ generation

TEST(Generate, ReferringExtractsQuestion) {
  const auto region = block(63, 3, 3, 10, 10, "r");
  auto gw = mock_with({{std::string("referring"), {}, {}, "Question: the car near the corner"}});
  EXPECT_EQ(gen_referring(canvas(), region, "Car", *gw), "the car near the corner");
  auto bad = mock_with({}, "a car");
  try {
    gen_referring(canvas(), region, "Car", *bad);
    FAIL();
  } catch (const GenerationError& e) {
    EXPECT_EQ(e.stage(), 1);
    EXPECT_EQ(e.code(), ErrorCode::kGenerationFormat);
  }
}

TEST(Generate, AttributeListsCategories) {
  const auto req = attribute_request(canvas(), block(25, 3, 3, 10, 10, "r"), {"Building", "Car"});
  EXPECT_NE(req.messages[0].text.find("Building, Car"), std::string::npos);
}

TEST(Generate, PaletteByRegionOrder) {
  const std::vector<InstanceRegion> regions{block(5, 2, 2, 4, 4, "a"), block(5, 20, 20, 4, 4, "b")};
  const auto out = render_palette(canvas(), regions, 1);
  EXPECT_EQ(out.pixel(2, 2)[0], 255);
  EXPECT_EQ(out.pixel(2, 2)[1], 0);
  EXPECT_EQ(out.pixel(20, 20)[1], 255);
  EXPECT_EQ(out.pixel(20, 20)[0], 0);
  EXPECT_EQ(out.pixel(16, 16)[2], 40);
}

TEST(Generate, ContextTwoSteps) {
  const std::vector<InstanceRegion> regions{block(5, 2, 2, 4, 4, "a"), block(5, 20, 20, 4, 4, "b")};
  auto gw = mock_with({{std::string("context_step1"), {}, {}, "Cues:\n- red one is top-left\n- green one is lower"},
                       {std::string("context_step2"), {}, {}, "Question: Which pond is top-left?\nExplanation: Only one is."}});
  const auto q = gen_context_question(canvas(), regions, "Pond", *gw);
  EXPECT_EQ(q.cues, (std::vector<std::string>{"red one is top-left", "green one is lower"}));
  EXPECT_EQ(q.question, "Which pond is top-left?");
  EXPECT_EQ(q.explanation, "Only one is.");

  auto broken = mock_with({{std::string("context_step1"), {}, {}, "Cues:\n- a\n- b"},
                           {std::string("context_step2"), {}, {}, "Question: only a question"}});
  try {
    gen_context_question(canvas(), regions, "Pond", *broken);
    FAIL();
  } catch (const GenerationError& e) {
    EXPECT_EQ(e.stage(), 2);
  }
}

// --------------------------------------------------------------- scoring

namespace {

InstructionRecord referring_record() {
  InstructionRecord r;
  r.record_id = "p/c63_0/referring";
  r.patch_id = "p";
  r.width = r.height = 32;
  r.category = 63;
  r.region_ids = {"p/c63_0"};
  r.task = Task::kReferring;
  r.text = "the car";
  r.mask_rle = "1024";
  return r;
}

std::string score_block(int clarity, int grounding, int consistency, int uniqueness) {
  return "SCORES:\nclarity: " + std::to_string(clarity) + "\ngrounding: " + std::to_string(grounding) +
         "\nconsistency: " + std::to_string(consistency) + "\nuniqueness: " + std::to_string(uniqueness);
}

InstructionRecord score_with(const std::string& a, const std::string& b) {
  auto gw = mock_with({{{}, std::string("m1"), {}, a}, {{}, std::string("m2"), {}, b}});
  std::array<EvaluatorHandle, 2> ev{EvaluatorHandle{gw.get(), "m1"}, EvaluatorHandle{gw.get(), "m2"}};
  return score_triplet(referring_record(), canvas(), "Car", ev, default_thresholds(Task::kReferring));
}

}  // namespace

TEST(Score, Thresholds) {
  EXPECT_TRUE(score_with(score_block(10, 10, 10, 10), score_block(10, 10, 10, 10)).accepted);
  EXPECT_FALSE(score_with(score_block(10, 10, 10, 10), score_block(10, 6, 10, 10)).accepted);
  const auto at = score_with(score_block(7, 7, 7, 7), score_block(7, 7, 7, 7));
  EXPECT_TRUE(at.accepted);
  EXPECT_EQ(at.scores->size(), 2u);
}

TEST(Score, UnparsableIsFlagged) {
  const auto r = score_with(score_block(9, 9, 9, 9), "great caption");
  EXPECT_FALSE(r.accepted);
  EXPECT_EQ(r.flag, "GateUnparsable");
}

TEST(Score, EvaluatorsMustDiffer) {
  auto gw = mock_with({}, score_block(9, 9, 9, 9));
  std::array<EvaluatorHandle, 2> same{EvaluatorHandle{gw.get(), "m"}, EvaluatorHandle{gw.get(), "m"}};
  EXPECT_THROW(score_triplet(referring_record(), canvas(), "Car", same, default_thresholds(Task::kReferring)), Error);
}

TEST(Score, AcceptanceIsMonotone) {
  Rng rng(8);
  const auto th = default_thresholds(Task::kReasoning);
  const auto& dims = prompts::reasoning_dimensions();
  for (int trial = 0; trial < 2000; ++trial) {
    std::map<std::string, std::map<std::string, int>> s;
    for (const char* m : {"a", "b"})
      for (const auto& d : dims) s[m][d] = 1 + static_cast<int>(rng.uniform_below(10));
    if (!meets_thresholds(s, th)) continue;
    auto raised = s;
    auto& v = raised[rng.uniform_below(2) ? "a" : "b"][dims[rng.uniform_below(dims.size())]];
    v = std::min(10, v + 1 + static_cast<int>(rng.uniform_below(3)));
    ASSERT_TRUE(meets_thresholds(raised, th));
  }
}

TEST(Records, JsonRoundTrip) {
  auto r = referring_record();
  r.scores = std::map<std::string, std::map<std::string, int>>{{"m1", {{"clarity", 9}}}};
  r.accepted = true;
  auto p = r;
  p.record_id = "p/c63_0/interactive-point";
  p.task = Task::kInteractive;
  p.subtype = Subtype::kPoint;
  p.prompt_points = std::vector<NormPoint>{{0.123, 0.456}};
  for (const auto& rec : {r, p}) {
    const auto back = record_from_json(to_json(rec));
    EXPECT_EQ(to_json(back).dump(), to_json(rec).dump());
  }
  p.prompt_box = NormBox{0, 0, 1, 1};
  EXPECT_THROW(p.validate(), Error);
}

// --------------------------------------------------------------- gateway

namespace {
ChatRequest sample_request() {
  ChatRequest req;
  req.model_name = "m";
  req.messages.push_back({"user", "hello", {{"image/png", "AAAA"}}});
  req.temperature = 0.2;
  req.prompt_name = "referring";
  return req;
}
}  // namespace

TEST(Gateway, MockHashFixture) {
  const auto req = sample_request();
  MockFixtures f;
  f.strict = true;
  f.by_hash[content_hash(req)] = "exact text";
  auto gw = Gateway::mock(GatewayConfig{}, f);
  EXPECT_EQ(gw->chat(req), "exact text");
  EXPECT_EQ(gw->chat(req), "exact text");
  auto other = req;
  other.messages[0].text = "hello!";
  try {
    gw->chat(other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMockMiss);
  }
}

TEST(Gateway, HashCoversModelMessagesTemperature) {
  const auto base = sample_request();
  const std::string h = content_hash(base);
  EXPECT_EQ(content_hash(base), h);
  auto a = base;
  a.model_name = "n";
  auto b = base;
  b.temperature = 0.3;
  auto c = base;
  c.messages[0].images[0].base64 = "AAAB";
  auto d = base;
  d.messages[0].role = "system";
  for (const auto& changed : {a, b, c, d}) EXPECT_NE(content_hash(changed), h);
}

namespace {

class LocalServer {
 public:
  explicit LocalServer(std::vector<int> statuses) : statuses_(std::move(statuses)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request&, httplib::Response& res) {
      const int n = calls_++;
      const int status = statuses_[std::min<std::size_t>(n, statuses_.size() - 1)];
      res.status = status;
      res.set_content(status == 200 ? R"({"choices":[{"message":{"content":"Question: ok"}}]})" : "busy",
                      "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  int calls() const { return calls_; }

 private:
  std::vector<int> statuses_;
  std::atomic<int> calls_{0};
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

GatewayConfig http_config(const std::string& url, int attempts, const fs::path& transcript) {
  GatewayConfig c;
  c.endpoint_url = url;
  c.retry.max_attempts = attempts;
  c.timeout_ms = 5000;
  c.transcript_dir = transcript.string();
  return c;
}

}  // namespace

TEST(Gateway, RetriesThenSucceeds) {
  LocalServer server({500, 500, 200});
  const auto dir = temp_dir("retry_ok");
  auto gw = Gateway::http(http_config(server.url(), 3, dir));
  std::vector<long> sleeps;
  gw->set_sleeper([&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); });
  EXPECT_EQ(gw->chat(sample_request()), "Question: ok");
  EXPECT_EQ(server.calls(), 3);
  EXPECT_EQ(sleeps, (std::vector<long>{500, 1000}));
  std::ifstream in(dir / "transcript.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["attempts"].size(), 3u);
  EXPECT_EQ(j["response"], "Question: ok");
}

TEST(Gateway, PersistentFailure) {
  LocalServer server({500});
  auto gw = Gateway::http(http_config(server.url(), 2, temp_dir("retry_fail")));
  gw->set_sleeper([](std::chrono::milliseconds) {});
  try {
    gw->chat(sample_request());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTransport);
  }
  EXPECT_EQ(server.calls(), 2);
}

TEST(Gateway, ClientErrorIsNotRetried) {
  LocalServer server({400});
  auto gw = Gateway::http(http_config(server.url(), 3, temp_dir("retry_400")));
  gw->set_sleeper([](std::chrono::milliseconds) {});
  EXPECT_THROW(gw->chat(sample_request()), Error);
  EXPECT_EQ(server.calls(), 1);
}

namespace {
class SlowTransport final : public HttpTransport {
 public:
  HttpResponse post(const std::string&, const std::string&, const std::vector<std::pair<std::string, std::string>>&,
                    int) override {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    return {200, R"({"choices":[{"message":{"content":"x"}}]})"};
  }
};
}  // namespace

TEST(Gateway, InFlightNeverExceedsLimit) {
  GatewayConfig c;
  c.endpoint_url = "http://unused";
  c.max_in_flight = 2;
  Gateway gw(c, std::make_unique<SlowTransport>());
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < 6; ++t)
      pool.emplace_back([&] {
        for (int i = 0; i < 5; ++i) gw.chat(sample_request());
      });
  }
  EXPECT_GE(gw.peak_in_flight(), 1);
  EXPECT_LE(gw.peak_in_flight(), 2);
}

TEST(Gateway, TranscriptReplay) {
  const auto dir = temp_dir("replay");
  GatewayConfig c;
  c.transcript_dir = dir.string();
  MockFixtures f;
  f.fallback = "recorded";
  Gateway::mock(c, f)->chat(sample_request());
  auto replay = Gateway::mock(GatewayConfig{}, MockFixtures::from_transcript((dir / "transcript.jsonl").string()));
  EXPECT_EQ(replay->chat(sample_request()), "recorded");
}
