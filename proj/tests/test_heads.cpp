#include "deoe/heads.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "deoe/rng.hpp"

namespace {

using namespace deoe;
using T = Tensor<double>;

Tensor<double> random_features(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(c) * h * w);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return T::leaf({c, h, w}, v, false);
}

DetectionHeads<double> make_heads(ParamStore<double>& store, int in_ch,
                                  int mid_ch, bool dual, bool disent,
                                  std::uint64_t seed) {
  HeadConfig cfg;
  cfg.in_channels = in_ch;
  cfg.mid_channels = mid_ch;
  cfg.dual_regressor = dual;
  cfg.disentangled = disent;
  Rng rng(seed);
  return DetectionHeads<double>::create(store, cfg, rng);
}

TEST(PriorGrid, SquarePriorsCenteredPerCell) {
  PriorGrid g{3, 4, 8};
  EXPECT_EQ(g.count(), 12);
  EXPECT_EQ(g.index(2, 3), 11);
  // Cell (i=1, j=2) -> center ((2+0.5)*8, (1+0.5)*8) = (20, 12).
  const int k = g.index(1, 2);
  EXPECT_DOUBLE_EQ(g.center_x(k), 20.0);
  EXPECT_DOUBLE_EQ(g.center_y(k), 12.0);
  const Box p = g.prior_box(k);
  EXPECT_DOUBLE_EQ(p.w, 8.0);
  EXPECT_DOUBLE_EQ(p.h, 8.0);
  EXPECT_DOUBLE_EQ(p.cx(), 20.0);
  EXPECT_DOUBLE_EQ(p.cy(), 12.0);
}

TEST(BoxCoding, EncodeDecodeRoundTrip) {
  // decode(encode(b)) must reproduce the box; exercised across random boxes
  // and prior cells.
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const double s = rng.uniform_int(0, 1) ? 8.0 : 16.0;
    const double cx = rng.uniform(0.0, 100.0);
    const double cy = rng.uniform(0.0, 100.0);
    const Box target = Box::from_center(rng.uniform(0.0, 128.0),
                                        rng.uniform(0.0, 128.0),
                                        rng.uniform(0.5, 60.0),
                                        rng.uniform(0.5, 60.0));
    double dx, dy, dw, dh;
    encode_box_offsets(target, cx, cy, s, dx, dy, dw, dh);
    const Box decoded = Box::from_center(cx + dx * s, cy + dy * s,
                                         s * std::exp(dw), s * std::exp(dh));
    EXPECT_NEAR(decoded.cx(), target.cx(), 1e-9);
    EXPECT_NEAR(decoded.cy(), target.cy(), 1e-9);
    EXPECT_NEAR(decoded.w, target.w, 1e-9);
    EXPECT_NEAR(decoded.h, target.h, 1e-9);
  }
}

TEST(BoxCoding, ZeroOffsetsDecodeToPrior) {
  PriorGrid g{2, 2, 16};
  for (int k = 0; k < g.count(); ++k) {
    double dx, dy, dw, dh;
    encode_box_offsets(g.prior_box(k), g.center_x(k), g.center_y(k), g.stride,
                       dx, dy, dw, dh);
    EXPECT_NEAR(dx, 0.0, 1e-12);
    EXPECT_NEAR(dy, 0.0, 1e-12);
    EXPECT_NEAR(dw, 0.0, 1e-12);
    EXPECT_NEAR(dh, 0.0, 1e-12);
  }
}

TEST(Heads, ForwardShapesAndDecodedCaches) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 41);
  PriorGrid grid{2, 3, 8};
  auto preds = heads.forward(random_features(6, 2, 3, 1), grid, false, 0);

  EXPECT_EQ(preds.raw_a.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(preds.raw_b.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(preds.prob_pn.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(preds.prob_po.shape(), (Shape{1, 2, 3}));
  ASSERT_EQ(static_cast<int>(preds.box_fused.size()), grid.count());

  const int n = grid.count();
  const auto& ra = preds.raw_a.values();
  for (int k = 0; k < n; ++k) {
    // Cached geometry must equal an explicit decode of the raw offsets.
    const double cx = grid.center_x(k) + ra[k] * grid.stride;
    const double w = grid.stride * std::exp(ra[2 * n + k]);
    EXPECT_NEAR(preds.box_a[k].cx(), cx, 1e-12);
    EXPECT_NEAR(preds.box_a[k].w, w, 1e-12);
    // Fusion averages the decoded parameters of the two branches.
    EXPECT_NEAR(preds.box_fused[k].cx(),
                0.5 * (preds.box_a[k].cx() + preds.box_b[k].cx()), 1e-12);
    EXPECT_NEAR(preds.box_fused[k].w,
                0.5 * (preds.box_a[k].w + preds.box_b[k].w), 1e-12);
    // Branch-overlap IoU matches the plain geometry helper and is bounded.
    EXPECT_NEAR(preds.iou_s[k], iou(preds.box_a[k], preds.box_b[k]), 1e-12);
    EXPECT_GE(preds.iou_s[k], 0.0);
    EXPECT_LE(preds.iou_s[k], 1.0);
    // Combined objectness is the product, never above either factor.
    EXPECT_NEAR(preds.obj[k], preds.o_pn[k] * preds.o_po[k], 1e-15);
    EXPECT_LE(preds.obj[k], std::min(preds.o_pn[k], preds.o_po[k]) + 1e-15);
  }
}

TEST(Heads, FreshInitObjectnessNearSigmoidOfMinusTwo) {
  // Projection biases start at -2, and the towers see roughly centered
  // inputs, so initial probabilities sit near sigmoid(-2) ~ 0.119.
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 42);
  PriorGrid grid{4, 4, 8};
  auto preds = heads.forward(random_features(6, 4, 4, 2), grid, false, 0);
  const double ref = 1.0 / (1.0 + std::exp(2.0));
  for (int k = 0; k < grid.count(); ++k) {
    EXPECT_NEAR(preds.o_pn[k], ref, 0.08);
    EXPECT_NEAR(preds.o_po[k], ref, 0.08);
  }
}

TEST(Heads, SingleBranchVariantFixesOverlapAtOne) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, false, false, 43);
  PriorGrid grid{2, 2, 8};
  auto preds = heads.forward(random_features(6, 2, 2, 3), grid, false, 0);
  for (int k = 0; k < grid.count(); ++k) {
    EXPECT_DOUBLE_EQ(preds.iou_s[k], 1.0);
    EXPECT_DOUBLE_EQ(preds.o_po[k], 1.0);
    EXPECT_DOUBLE_EQ(preds.obj[k], preds.o_pn[k]);
    EXPECT_DOUBLE_EQ(preds.box_fused[k].cx(), preds.box_a[k].cx());
  }
  // Disabled branches register no parameters.
  for (const auto& name : store.names) {
    EXPECT_EQ(name.find("reg_b"), std::string::npos);
    EXPECT_EQ(name.find("obj_po"), std::string::npos);
  }
}

TEST(Heads, EvalModeIsDeterministicAndDropoutFree) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 44);
  PriorGrid grid{2, 2, 8};
  auto f = random_features(6, 2, 2, 4);
  auto a = heads.forward(f, grid, false, 1);
  auto b = heads.forward(f, grid, false, 999);
  EXPECT_EQ(a.raw_a.values(), b.raw_a.values());
  EXPECT_EQ(a.o_pn, b.o_pn);
}

TEST(Heads, TrainingDropoutKeyedBySeed) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 45);
  PriorGrid grid{2, 2, 8};
  auto f = random_features(6, 2, 2, 5);
  auto a1 = heads.forward(f, grid, true, 7);
  auto a2 = heads.forward(f, grid, true, 7);
  auto b = heads.forward(f, grid, true, 8);
  EXPECT_EQ(a1.raw_a.values(), a2.raw_a.values());
  EXPECT_NE(a1.raw_a.values(), b.raw_a.values());
}

TEST(Heads, RejectsMismatchedFeatureMap) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 46);
  PriorGrid grid{2, 3, 8};
  EXPECT_THROW(heads.forward(random_features(5, 2, 3, 6), grid, false, 0),
               std::runtime_error);
  EXPECT_THROW(heads.forward(random_features(6, 3, 3, 6), grid, false, 0),
               std::runtime_error);
}

TEST(TemporalIou, FirstFrameFallsBackToBranchOverlap) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 47);
  PriorGrid grid{2, 2, 8};
  HeadTemporalBuffer buf;
  auto p1 = heads.forward(random_features(6, 2, 2, 7), grid, false, 0);
  temporal_iou(p1, buf);
  EXPECT_EQ(p1.iou_t, p1.iou_s);
  EXPECT_TRUE(buf.valid);
  EXPECT_EQ(buf.prev_fused.size(), p1.box_fused.size());
}

TEST(TemporalIou, SecondFrameComparesAgainstBufferedBoxes) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 48);
  PriorGrid grid{2, 2, 8};
  HeadTemporalBuffer buf;
  auto p1 = heads.forward(random_features(6, 2, 2, 8), grid, false, 0);
  temporal_iou(p1, buf);
  const auto prev = p1.box_fused;
  auto p2 = heads.forward(random_features(6, 2, 2, 9), grid, false, 0);
  temporal_iou(p2, buf);
  for (int k = 0; k < grid.count(); ++k)
    EXPECT_NEAR(p2.iou_t[k], iou(p2.box_fused[k], prev[k]), 1e-12);
  // Identical consecutive frames give iou_t = 1 in eval mode.
  HeadTemporalBuffer buf2;
  auto f = random_features(6, 2, 2, 10);
  auto q1 = heads.forward(f, grid, false, 0);
  temporal_iou(q1, buf2);
  auto q2 = heads.forward(f, grid, false, 0);
  temporal_iou(q2, buf2);
  for (int k = 0; k < grid.count(); ++k)
    EXPECT_NEAR(q2.iou_t[k], 1.0, 1e-12);
}

TEST(TemporalIou, ResetRestoresFirstFrameBehavior) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 49);
  PriorGrid grid{2, 2, 8};
  HeadTemporalBuffer buf;
  auto p1 = heads.forward(random_features(6, 2, 2, 11), grid, false, 0);
  temporal_iou(p1, buf);
  buf.reset();
  EXPECT_FALSE(buf.valid);
  auto p2 = heads.forward(random_features(6, 2, 2, 12), grid, false, 0);
  temporal_iou(p2, buf);
  EXPECT_EQ(p2.iou_t, p2.iou_s);
}

TEST(TemporalIou, RejectsBufferFromDifferentGrid) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 50);
  HeadTemporalBuffer buf;
  PriorGrid g1{2, 2, 8};
  auto p1 = heads.forward(random_features(6, 2, 2, 13), g1, false, 0);
  temporal_iou(p1, buf);
  PriorGrid g2{2, 3, 8};
  auto p2 = heads.forward(random_features(6, 2, 3, 13), g2, false, 0);
  EXPECT_THROW(temporal_iou(p2, buf), std::runtime_error);
}

TEST(DiffGeometry, DecodeCellsMatchesCachedBoxes) {
  ParamStore<double> store;
  auto heads = make_heads(store, 6, 8, true, true, 51);
  PriorGrid grid{2, 3, 8};
  auto preds = heads.forward(random_features(6, 2, 3, 14), grid, false, 0);
  const std::vector<int> cells = {0, 2, 5};
  auto da = decode_cells(preds.raw_a, grid, cells);
  auto db = decode_cells(preds.raw_b, grid, cells);
  auto fused = fuse_boxes(da, db);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int k = cells[i];
    EXPECT_NEAR(da.cx.values()[i], preds.box_a[k].cx(), 1e-12);
    EXPECT_NEAR(da.w.values()[i], preds.box_a[k].w, 1e-12);
    EXPECT_NEAR(fused.cx.values()[i], preds.box_fused[k].cx(), 1e-12);
    EXPECT_NEAR(fused.h.values()[i], preds.box_fused[k].h, 1e-12);
  }
  auto overlap = iou_pairs(da, db);
  for (std::size_t i = 0; i < cells.size(); ++i)
    EXPECT_NEAR(overlap.values()[i], preds.iou_s[cells[i]], 1e-12);
}

TEST(DiffGeometry, IouPairsMatchesPlainGeometry) {
  Rng rng(52);
  std::vector<Box> as, bs;
  for (int i = 0; i < 64; ++i) {
    as.push_back(Box::from_center(rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0),
                                  rng.uniform(1.0, 30.0), rng.uniform(1.0, 30.0)));
    bs.push_back(Box::from_center(rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0),
                                  rng.uniform(1.0, 30.0), rng.uniform(1.0, 30.0)));
  }
  auto da = DiffBoxes<double>::constants(as);
  auto db = DiffBoxes<double>::constants(bs);
  auto got = iou_pairs(da, db).values();
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(got[i], iou(as[i], bs[i]), 1e-12);
  // Symmetry and identity.
  auto rev = iou_pairs(db, da).values();
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(got[i], rev[i], 1e-12);
  auto self = iou_pairs(da, da).values();
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(self[i], 1.0, 1e-12);
}

}  // namespace
