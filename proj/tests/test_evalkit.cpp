#include "deoe/evalkit.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "deoe/rng.hpp"

namespace {

using namespace deoe;

constexpr int kKnown = 0;    // rectangle
constexpr int kUnknown = 1;  // disc

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "deoe_test_evalkit";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

ClassSplit default_split() { return parse_class_split("rectangle:disc"); }

// Brute-force greedy matcher: literally walks detections in order and scans
// all GT for the best unmatched candidate.
std::vector<int> match_oracle(const std::vector<Detection>& dets,
                              const std::vector<Box>& gts, double tau) {
  std::vector<int> out(dets.size(), -1);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    int pick = -1;
    double best = tau - 1e-18;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v >= tau && v > best) {
        best = v;
        pick = static_cast<int>(g);
      }
    }
    if (pick >= 0) {
      out[d] = pick;
      used[pick] = true;
    }
  }
  return out;
}

TEST(ClassSplitParse, NamesAndNumbersBothWork) {
  auto s = parse_class_split("rectangle:disc,triangle");
  EXPECT_EQ(s.known, (std::vector<int>{0}));
  EXPECT_EQ(s.unknown, (std::vector<int>{1, 2}));
  EXPECT_TRUE(s.is_known(0));
  EXPECT_TRUE(s.is_unknown(2));

  auto n = parse_class_split("0,1:2");
  EXPECT_EQ(n.known, (std::vector<int>{0, 1}));
  EXPECT_EQ(n.unknown, (std::vector<int>{2}));

  auto empty_known = parse_class_split(":disc");
  EXPECT_TRUE(empty_known.known.empty());

  EXPECT_THROW(parse_class_split("rectangle"), std::runtime_error);
  EXPECT_THROW(parse_class_split("rectangle:rectangle"), std::runtime_error);
  EXPECT_THROW(parse_class_split("blob:disc"), std::runtime_error);
}

TEST(Match, SingleDetOnSingleGt) {
  const Box gt{0, 0, 10, 10};
  const auto m = match({{0.9, gt}}, {gt}, 0.5);
  EXPECT_EQ(m, (std::vector<int>{0}));
}

TEST(Match, OneToOneKeepsHigherScoredDet) {
  const Box gt{0, 0, 10, 10};
  std::vector<Detection> dets = {{0.9, gt}, {0.8, gt}};
  const auto m = match(dets, {gt}, 0.5);
  EXPECT_EQ(m, (std::vector<int>{0, -1}));
}

TEST(Match, BelowThresholdNeverMatches) {
  const Box gt{0, 0, 10, 10};
  const Box far_box{8, 8, 10, 10};
  ASSERT_LT(iou(gt, far_box), 0.5);
  const auto m = match({{0.9, far_box}}, {gt}, 0.5);
  EXPECT_EQ(m, (std::vector<int>{-1}));
}

TEST(Match, RandomInstancesEqualBruteForce) {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Detection> dets;
    std::vector<Box> gts;
    const int nd = 1 + static_cast<int>(rng.uniform_int(0, 14));
    const int ng = 1 + static_cast<int>(rng.uniform_int(0, 9));
    for (int i = 0; i < nd; ++i)
      dets.push_back({rng.uniform(0.0, 1.0),
                      Box{rng.uniform(0.0, 60.0), rng.uniform(0.0, 60.0),
                          rng.uniform(5.0, 30.0), rng.uniform(5.0, 30.0)}});
    std::sort(dets.begin(), dets.end(), detection_before);
    for (int g = 0; g < ng; ++g)
      gts.push_back(Box{rng.uniform(0.0, 60.0), rng.uniform(0.0, 60.0),
                        rng.uniform(5.0, 30.0), rng.uniform(5.0, 30.0)});
    const double tau = 0.3 + 0.05 * (trial % 10);
    EXPECT_EQ(match(dets, gts, tau), match_oracle(dets, gts, tau))
        << "trial " << trial;
  }
}

TEST(AverageRecall, NearPerfectDetScoresAcrossAllThresholds) {
  EvalFrame f;
  f.gts = {{Box{0, 0, 10, 10}, kUnknown}};
  // IoU 0.97 against the GT: passes every threshold up to 0.95.
  f.dets = {{0.9, Box{0, 0, 10, 9.7}}};
  ASSERT_GT(iou(f.dets[0].box, f.gts[0].box), 0.95);
  double ar = 0.0;
  ASSERT_TRUE(average_recall({f}, default_split(), true, 10, ar));
  EXPECT_DOUBLE_EQ(ar, 100.0);
}

TEST(AverageRecall, Iou06MatchesThreeOfTenThresholds) {
  EvalFrame f;
  f.gts = {{Box{0, 0, 10, 10}, kUnknown}};
  f.dets = {{0.9, Box{0, 0, 10, 6}}};  // IoU exactly 60/100
  ASSERT_DOUBLE_EQ(iou(f.dets[0].box, f.gts[0].box), 0.6);
  double ar = 0.0;
  ASSERT_TRUE(average_recall({f}, default_split(), true, 10, ar));
  // Matched at 0.50, 0.55, 0.60 only: 3 of 10 thresholds.
  EXPECT_NEAR(ar, 30.0, 1e-9);
}

TEST(AverageRecall, KnownMatchedDetsDoNotConsumeUnknownBudget) {
  EvalFrame f;
  f.gts = {{Box{0, 0, 10, 10}, kKnown}, {Box{50, 50, 10, 10}, kUnknown}};
  f.dets = {{0.9, Box{0, 0, 10, 10}},    // matches the known GT
            {0.8, Box{50, 50, 10, 10}}};  // matches the unknown GT
  double ar = 0.0;
  ASSERT_TRUE(average_recall({f}, default_split(), true, 1, ar));
  EXPECT_DOUBLE_EQ(ar, 100.0);
  // The all split has no exclusion: budget 1 keeps only the known-matched
  // det, so one of two GTs is found.
  ASSERT_TRUE(average_recall({f}, default_split(), false, 1, ar));
  EXPECT_DOUBLE_EQ(ar, 50.0);
}

TEST(AverageRecall, EmptySplitIsAbsentNotZero) {
  EvalFrame f;
  f.gts = {{Box{0, 0, 10, 10}, kKnown}};
  f.dets = {{0.9, Box{0, 0, 10, 10}}};
  double ar = -1.0;
  EXPECT_FALSE(average_recall({f}, default_split(), true, 10, ar));
  EXPECT_TRUE(average_recall({f}, default_split(), false, 10, ar));
}

TEST(AverageRecall, MonotoneInBudget) {
  Rng rng(102);
  std::vector<EvalFrame> frames(6);
  for (auto& f : frames) {
    const int ng = 2 + static_cast<int>(rng.uniform_int(0, 3));
    for (int g = 0; g < ng; ++g)
      f.gts.push_back({Box{rng.uniform(0.0, 80.0), rng.uniform(0.0, 80.0),
                           rng.uniform(8.0, 30.0), rng.uniform(8.0, 30.0)},
                       static_cast<int>(rng.uniform_int(0, 2))});
    for (int d = 0; d < 30; ++d)
      f.dets.push_back({rng.uniform(0.0, 1.0),
                        Box{rng.uniform(0.0, 80.0), rng.uniform(0.0, 80.0),
                            rng.uniform(8.0, 30.0), rng.uniform(8.0, 30.0)}});
    std::sort(f.dets.begin(), f.dets.end(), detection_before);
  }
  const auto split = parse_class_split("rectangle:disc,triangle");
  for (bool unknown : {true, false}) {
    double prev = -1.0;
    for (int k : eval_budgets()) {
      double ar = 0.0;
      ASSERT_TRUE(average_recall(frames, split, unknown, k, ar));
      EXPECT_GE(ar, prev - 1e-12);
      EXPECT_GE(ar, 0.0);
      EXPECT_LE(ar, 100.0);
      prev = ar;
    }
  }
}

TEST(AverageRecall, ScoreScaleInvariant) {
  Rng rng(103);
  EvalFrame f;
  f.gts = {{Box{5, 5, 20, 20}, kUnknown}, {Box{40, 40, 20, 20}, kUnknown}};
  for (int d = 0; d < 10; ++d)
    f.dets.push_back({rng.uniform(0.1, 0.9),
                      Box{rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0),
                          rng.uniform(10.0, 25.0), rng.uniform(10.0, 25.0)}});
  std::sort(f.dets.begin(), f.dets.end(), detection_before);
  EvalFrame scaled = f;
  for (auto& d : scaled.dets) d.obj *= 0.5;
  for (int k : {10, 30}) {
    double a = 0.0, b = 0.0;
    ASSERT_TRUE(average_recall({f}, default_split(), true, k, a));
    ASSERT_TRUE(average_recall({scaled}, default_split(), true, k, b));
    EXPECT_DOUBLE_EQ(a, b);
  }
}

TEST(AverageRecall, ExclusionRuleVanishesWithoutKnownGt) {
  // All GT unknown: the unknown split and the all split see the same GT and
  // the same effective budget, so their AR agree.
  Rng rng(104);
  std::vector<EvalFrame> frames(4);
  for (auto& f : frames) {
    for (int g = 0; g < 3; ++g)
      f.gts.push_back({Box{rng.uniform(0.0, 80.0), rng.uniform(0.0, 80.0),
                           rng.uniform(8.0, 25.0), rng.uniform(8.0, 25.0)},
                       kUnknown});
    for (int d = 0; d < 20; ++d)
      f.dets.push_back({rng.uniform(0.0, 1.0),
                        Box{rng.uniform(0.0, 80.0), rng.uniform(0.0, 80.0),
                            rng.uniform(8.0, 25.0), rng.uniform(8.0, 25.0)}});
    std::sort(f.dets.begin(), f.dets.end(), detection_before);
  }
  for (int k : eval_budgets()) {
    double unk = 0.0, all = 0.0;
    ASSERT_TRUE(average_recall(frames, default_split(), true, k, unk));
    ASSERT_TRUE(average_recall(frames, default_split(), false, k, all));
    EXPECT_DOUBLE_EQ(unk, all);
  }
}

TEST(Auc, FlatCurveReturnsItsValue) {
  EXPECT_NEAR(auc({42.0, 42.0, 42.0, 42.0, 42.0}, eval_budgets()), 42.0, 1e-12);
  EXPECT_DOUBLE_EQ(auc({0.0, 0.0, 0.0, 0.0, 0.0}, eval_budgets()), 0.0);
}

TEST(Auc, HandComputedTrapezoid) {
  // AR = (10,20,30,40,50) at k = (10,30,50,100,300), x = log10 k:
  // independent quadrature accumulated in long double.
  const std::vector<double> ar = {10, 20, 30, 40, 50};
  const auto& ks = eval_budgets();
  long double area = 0.0L;
  for (int i = 0; i < 4; ++i)
    area += 0.5L *
            (static_cast<long double>(ar[i]) + static_cast<long double>(ar[i + 1])) *
            (std::log10(static_cast<long double>(ks[i + 1])) -
             std::log10(static_cast<long double>(ks[i])));
  const long double want = area / (std::log10(300.0L) - std::log10(10.0L));
  EXPECT_NEAR(auc(ar, ks), static_cast<double>(want), 1e-12);
  EXPECT_GT(auc(ar, ks), 10.0);
  EXPECT_LT(auc(ar, ks), 50.0);
}

TEST(Auc, RejectsBadInputs) {
  EXPECT_THROW(auc({1.0}, {10}), std::runtime_error);
  EXPECT_THROW(auc({1.0, 2.0}, {10}), std::runtime_error);
  EXPECT_THROW(auc({1.0, 2.0}, {30, 10}), std::runtime_error);
}

TEST(AlignFrames, JoinsOnTimestampsAndSortsDets) {
  std::vector<DetectionSet> preds(2);
  preds[0].t = 20000;
  preds[1].t = 10000;
  preds[1].dets = {{0.2, Box{0, 0, 5, 5}}, {0.9, Box{10, 10, 5, 5}}};
  std::vector<AnnotationRecord> anns = {
      {10000, Box{0, 0, 10, 10}, kKnown, true},
      {20000, Box{0, 0, 10, 10}, kUnknown, false},
  };
  const auto frames = align_frames(preds, anns);
  ASSERT_EQ(frames.size(), 2u);
  // Frames come out in time order regardless of prediction file order.
  EXPECT_EQ(frames[0].gts[0].class_id, kKnown);
  EXPECT_EQ(frames[1].gts[0].class_id, kUnknown);
  // Detections are re-sorted by score.
  EXPECT_DOUBLE_EQ(frames[0].dets[0].obj, 0.9);
}

TEST(AlignFrames, EarlyAnnotationTicksAreExempt) {
  // Annotations at t=0 (before any prediction window closes) are not
  // orphans; they simply drop out of the evaluation.
  std::vector<DetectionSet> preds(1);
  preds[0].t = 10000;
  std::vector<AnnotationRecord> anns = {
      {0, Box{0, 0, 10, 10}, kUnknown, false},
      {10000, Box{0, 0, 10, 10}, kUnknown, false},
  };
  const auto frames = align_frames(preds, anns);
  EXPECT_EQ(frames.size(), 1u);
}

TEST(AlignFrames, OrphansAreErrors) {
  std::vector<DetectionSet> preds(1);
  preds[0].t = 10000;
  // Prediction with no annotations at its tick.
  EXPECT_THROW(align_frames(preds, {{20000, Box{0, 0, 1, 1}, 0, true}}),
               std::runtime_error);
  // Annotated tick after the first prediction with no matching prediction.
  std::vector<AnnotationRecord> anns = {
      {10000, Box{0, 0, 1, 1}, 0, true},
      {20000, Box{0, 0, 1, 1}, 0, true},
  };
  try {
    align_frames(preds, anns);
    FAIL() << "expected orphan error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("20000"), std::string::npos);
  }
  // Duplicate prediction frames.
  std::vector<DetectionSet> dup(2);
  dup[0].t = 10000;
  dup[1].t = 10000;
  EXPECT_THROW(align_frames(dup, anns), std::runtime_error);
  EXPECT_THROW(align_frames({}, anns), std::runtime_error);
}

TEST(EvaluateRun, PerfectDetectorScoresHundredEverywhere) {
  const std::string pred_path = temp_path("perfect_preds.jsonl");
  const std::string ann_path = temp_path("perfect_anns.jsonl");
  Rng rng(105);
  std::vector<AnnotationRecord> anns;
  std::vector<DetectionSet> preds;
  for (int t = 1; t <= 5; ++t) {
    DetectionSet ds;
    ds.t = t * 10000;
    for (int g = 0; g < 3; ++g) {
      const Box b{rng.uniform(0.0, 80.0), rng.uniform(0.0, 80.0),
                  rng.uniform(8.0, 30.0), rng.uniform(8.0, 30.0)};
      anns.push_back({ds.t, b, g % 2, g % 2 == 0});
      ds.dets.push_back({1.0, b});
    }
    std::sort(ds.dets.begin(), ds.dets.end(), detection_before);
    preds.push_back(std::move(ds));
  }
  save_predictions(pred_path, preds);
  save_annotations(anns, ann_path);

  const auto report = evaluate_run(pred_path, ann_path, default_split());
  EXPECT_EQ(report.frames, 5);
  ASSERT_TRUE(report.unknown.defined);
  ASSERT_TRUE(report.all.defined);
  for (double ar : report.unknown.ar) EXPECT_DOUBLE_EQ(ar, 100.0);
  for (double ar : report.all.ar) EXPECT_DOUBLE_EQ(ar, 100.0);
  EXPECT_DOUBLE_EQ(report.unknown.auc_value, 100.0);
  EXPECT_EQ(report.unknown.gt_count, 5);
  EXPECT_EQ(report.all.gt_count, 15);
}

TEST(EvaluateRun, EmptyPredictionsScoreZero) {
  const std::string pred_path = temp_path("empty_preds.jsonl");
  const std::string ann_path = temp_path("empty_anns.jsonl");
  std::vector<DetectionSet> preds(2);
  preds[0].t = 10000;
  preds[1].t = 20000;
  save_predictions(pred_path, preds);
  std::vector<AnnotationRecord> anns = {
      {10000, Box{0, 0, 10, 10}, kUnknown, false},
      {20000, Box{5, 5, 10, 10}, kUnknown, false},
  };
  save_annotations(anns, ann_path);
  const auto report = evaluate_run(pred_path, ann_path, default_split());
  ASSERT_TRUE(report.unknown.defined);
  for (double ar : report.unknown.ar) EXPECT_DOUBLE_EQ(ar, 0.0);
  EXPECT_DOUBLE_EQ(report.unknown.auc_value, 0.0);
}

TEST(Report, FormatsAbsentMetricsAsDashes) {
  EvalReport report;
  report.frames = 1;
  report.all.defined = true;
  report.all.ar = {10, 20, 30, 40, 50};
  report.all.auc_value = 25.0;
  const auto text = format_report(report);
  EXPECT_NE(text.find("AR_10"), std::string::npos);
  EXPECT_NE(text.find("AUC"), std::string::npos);
  EXPECT_NE(text.find("unknown"), std::string::npos);
  EXPECT_NE(text.find("-"), std::string::npos);
  EXPECT_NE(text.find("25.00"), std::string::npos);
}

TEST(Report, JsonLinesRoundTripThroughParser) {
  const std::string path = temp_path("report.jsonl");
  EvalReport report;
  report.frames = 3;
  report.unknown.defined = true;
  report.unknown.ar = {10, 20, 30, 40, 50};
  report.unknown.auc_value = 30.5;
  report.unknown.gt_count = 7;
  report.all.defined = false;
  save_report(path, report);

  std::ifstream in(path);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("split"), "unknown");
  EXPECT_EQ(j.at("frames"), 3);
  EXPECT_EQ(j.at("gt_count"), 7);
  EXPECT_DOUBLE_EQ(j.at("ar10").get<double>(), 10.0);
  EXPECT_DOUBLE_EQ(j.at("ar300").get<double>(), 50.0);
  EXPECT_DOUBLE_EQ(j.at("auc").get<double>(), 30.5);
  ASSERT_TRUE(std::getline(in, line));
  auto j2 = nlohmann::json::parse(line);
  EXPECT_EQ(j2.at("split"), "all");
  EXPECT_EQ(j2.at("defined"), false);
  EXPECT_FALSE(j2.contains("auc"));
}

}  // namespace
