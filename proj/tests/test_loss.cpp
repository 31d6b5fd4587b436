#include "deoe/loss.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "deoe/rng.hpp"

namespace {

using namespace deoe;
using T = Tensor<double>;

// Real model outputs on a small grid so the tape tensors and the cached
// geometry agree, exactly as the trainer produces them.
struct Fixture {
  ParamStore<double> store;
  DetectionHeads<double> heads;
  PriorGrid grid{2, 3, 8};
  CellPredictions<double> preds;

  explicit Fixture(std::uint64_t seed, bool dual = true, bool disent = true) {
    HeadConfig cfg;
    cfg.in_channels = 5;
    cfg.mid_channels = 6;
    cfg.dual_regressor = dual;
    cfg.disentangled = disent;
    Rng rng(seed);
    heads = DetectionHeads<double>::create(store, cfg, rng);
    Rng rngf(mix64(seed, 1));
    std::vector<double> f(5 * 2 * 3);
    for (auto& v : f) v = rngf.uniform(-1.0, 1.0);
    preds = heads.forward(T::leaf({5, 2, 3}, f, false), grid, false, 0);
    HeadTemporalBuffer buf;
    temporal_iou(preds, buf);
  }
};

SampleSelection selection_for(const Fixture& fx, const std::vector<Box>& gts,
                              VariantMode mode, int pot_count) {
  ScreeningConfig cfg;
  cfg.potential_count = pot_count;
  auto samples = variant_assign(mode, fx.preds, gts, nullptr, cfg);
  return build_selection(fx.preds, samples, gts);
}

TEST(BceValue, MatchesClosedForms) {
  EXPECT_NEAR(bce_value(0.5, 1.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_value(0.5, 0.0), std::log(2.0), 1e-12);
  // Soft target: -(0.7 log 0.7 + 0.3 log 0.3) = 0.6108643...
  EXPECT_NEAR(bce_value(0.7, 0.7), 0.610864, 1e-5);
  // Clamp region: p = 0 is treated as 1e-7.
  EXPECT_NEAR(bce_value(0.0, 1.0), -std::log(1e-7), 1e-9);
  EXPECT_NEAR(bce_value(1.0, 0.0), -std::log(1e-7), 1e-9);
  EXPECT_NEAR(bce_value(1.0, 1.0), 0.0, 1e-6);
}

TEST(Selection, PartitionsCellsAndExcludesPotentialsFromNegatives) {
  Fixture fx(71);
  const Box gt = fx.grid.prior_box(0);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  EXPECT_EQ(sel.pos_cells, (std::vector<int>{0}));
  EXPECT_EQ(sel.pos_pn_target, (std::vector<double>{1.0}));
  EXPECT_DOUBLE_EQ(sel.pos_iou_g[0], 1.0);
  EXPECT_EQ(sel.pot_cells.size(), 2u);
  // 6 cells total: 1 positive, 2 potentials, 3 plain negatives.
  EXPECT_EQ(sel.neg_cells.size(), 3u);
  for (int k : sel.pot_cells)
    EXPECT_EQ(std::find(sel.neg_cells.begin(), sel.neg_cells.end(), k),
              sel.neg_cells.end());
}

TEST(Selection, PotentialWeightsAreRenormalizedAgainstTheirBce) {
  Fixture fx(72);
  auto sel = selection_for(fx, {}, VariantMode::DEOE, 3);
  ASSERT_EQ(sel.pot_cells.size(), 3u);
  double sum_l = 0.0, sum_wl = 0.0;
  for (std::size_t i = 0; i < sel.pot_cells.size(); ++i) {
    const double l = bce_value(fx.preds.o_pn[sel.pot_cells[i]], 1.0);
    sum_l += l;
    sum_wl += sel.pot_weights[i] * l;
  }
  EXPECT_NEAR(sum_wl, sum_l, 1e-9);
}

TEST(Selection, OracleTargetUsesIouG) {
  Fixture fx(73);
  // Off-center GT: IoU below 1 so the soft target is visible.
  const Box gt = Box::from_center(5.0, 5.0, 8.0, 8.0);
  ScreeningConfig cfg;
  cfg.potential_count = 0;
  auto samples = variant_assign(VariantMode::CA_O, fx.preds, {gt}, nullptr, cfg);
  auto sel = build_selection(fx.preds, samples, {gt});
  ASSERT_EQ(sel.pos_cells.size(), 1u);
  EXPECT_GT(sel.pos_pn_target[0], 0.0);
  EXPECT_LT(sel.pos_pn_target[0], 1.0);
  EXPECT_DOUBLE_EQ(sel.pos_pn_target[0], sel.pos_iou_g[0]);
}

TEST(LossSpatial, NegLogOfBranchOverlap) {
  Fixture fx(74);
  const Box gt = fx.grid.prior_box(2);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 1);
  const auto val = loss_spatial(fx.preds, sel).item();
  double want = 0.0;
  std::vector<int> cells = sel.pos_cells;
  cells.insert(cells.end(), sel.pot_cells.begin(), sel.pot_cells.end());
  for (int k : cells) want += -std::log(fx.preds.iou_s[k] + 1e-16);
  want /= static_cast<double>(cells.size());
  EXPECT_NEAR(val, want, 1e-9);
}

TEST(LossSpatial, DisjointBranchesCostRoughly36Point8) {
  // iou_s = 0 -> -log(1e-16) = 36.8414 per cell.
  std::vector<double> losses = {-std::log(1e-16)};
  EXPECT_NEAR(losses[0], 36.8414, 1e-3);
}

TEST(LossSpatial, ZeroWhenSingleBranchOrNoSoftPositives) {
  Fixture single(75, false, false);
  const Box gt = single.grid.prior_box(0);
  auto sel = selection_for(single, {gt}, VariantMode::CA, 0);
  EXPECT_DOUBLE_EQ(loss_spatial(single.preds, sel).item(), 0.0);

  Fixture dual(76);
  auto sel2 = selection_for(dual, {}, VariantMode::CA, 0);
  EXPECT_DOUBLE_EQ(loss_spatial(dual.preds, sel2).item(), 0.0);
}

TEST(LossIou, OneMinusOverlapWithMatchedGt) {
  Fixture fx(77);
  const Box gt = fx.grid.prior_box(4);
  auto sel = selection_for(fx, {gt}, VariantMode::CA, 0);
  ASSERT_EQ(sel.pos_cells.size(), 1u);
  const double want = 1.0 - iou(fx.preds.box_fused[sel.pos_cells[0]], gt);
  EXPECT_NEAR(loss_iou(fx.preds, sel).item(), want, 1e-9);
}

TEST(LossIou, KnownGeometrySpotValue) {
  // Boxes (0,0,10,10) and (5,5,10,10): inter 25, union 175, loss 1 - 1/7.
  const Box a{0.0, 0.0, 10.0, 10.0};
  const Box b{5.0, 5.0, 10.0, 10.0};
  EXPECT_NEAR(1.0 - iou(a, b), 0.857143, 1e-6);
}

TEST(LossIou, ZeroWithoutPositives) {
  Fixture fx(78);
  auto sel = selection_for(fx, {}, VariantMode::CA, 0);
  EXPECT_DOUBLE_EQ(loss_iou(fx.preds, sel).item(), 0.0);
  EXPECT_EQ(sel.pos_cells.size(), 0u);
}

TEST(LossPn, SumOfThreeSubsetMeans) {
  Fixture fx(79);
  const Box gt = fx.grid.prior_box(1);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  ASSERT_FALSE(sel.pos_cells.empty());
  ASSERT_FALSE(sel.pot_cells.empty());
  ASSERT_FALSE(sel.neg_cells.empty());

  double pos = 0.0;
  for (std::size_t i = 0; i < sel.pos_cells.size(); ++i)
    pos += bce_value(fx.preds.o_pn[sel.pos_cells[i]], sel.pos_pn_target[i]);
  pos /= static_cast<double>(sel.pos_cells.size());
  double pot = 0.0;
  for (std::size_t i = 0; i < sel.pot_cells.size(); ++i)
    pot += sel.pot_weights[i] * bce_value(fx.preds.o_pn[sel.pot_cells[i]], 1.0);
  pot /= static_cast<double>(sel.pot_cells.size());
  double neg = 0.0;
  for (int k : sel.neg_cells) neg += bce_value(fx.preds.o_pn[k], 0.0);
  neg /= static_cast<double>(sel.neg_cells.size());

  EXPECT_NEAR(loss_pn(fx.preds, sel).item(), pos + pot + neg, 1e-9);
}

TEST(LossPn, PerfectPredictionsSpotValue) {
  // One positive predicted at 0.5 toward 1 plus one negative at 0.5 toward 0
  // gives ln 2 + ln 2.
  EXPECT_NEAR(bce_value(0.5, 1.0) + bce_value(0.5, 0.0), 2.0 * std::log(2.0),
              1e-12);
  // A potential at weight 0.25 predicted 0.5: 0.25 * ln 2 = 0.173287.
  EXPECT_NEAR(0.25 * bce_value(0.5, 1.0), 0.173287, 1e-6);
}

TEST(LossPo, SoftTargetsOnPositivesAndPotentialsOnly) {
  Fixture fx(80);
  const Box gt = Box::from_center(12.0, 12.0, 9.0, 9.0);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  ASSERT_FALSE(sel.pos_cells.empty());
  ASSERT_FALSE(sel.pot_cells.empty());

  double pos = 0.0;
  for (std::size_t i = 0; i < sel.pos_cells.size(); ++i)
    pos += bce_value(fx.preds.o_po[sel.pos_cells[i]], sel.pos_iou_g[i]);
  pos /= static_cast<double>(sel.pos_cells.size());
  double pot = 0.0;
  for (std::size_t i = 0; i < sel.pot_cells.size(); ++i)
    pot += bce_value(fx.preds.o_po[sel.pot_cells[i]], sel.pot_iou_s[i]);
  pot /= static_cast<double>(sel.pot_cells.size());

  EXPECT_NEAR(loss_po(fx.preds, sel).item(), pos + pot, 1e-9);
}

TEST(LossPo, ZeroWhenDisentangledHeadDisabled) {
  Fixture fx(81, true, false);
  const Box gt = fx.grid.prior_box(0);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  EXPECT_DOUBLE_EQ(loss_po(fx.preds, sel).item(), 0.0);
}

TEST(TotalLoss, SumsComponentsAndCounts) {
  Fixture fx(82);
  const Box gt = fx.grid.prior_box(3);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  auto lb = total_loss(fx.preds, sel);
  EXPECT_NEAR(lb.total.item(),
              lb.l_sp.item() + lb.l_iou.item() + lb.l_pn.item() + lb.l_po.item(),
              1e-9);
  EXPECT_EQ(lb.n_pos, 1);
  EXPECT_EQ(lb.n_pot, 2);
  EXPECT_EQ(lb.n_neg, 3);
  EXPECT_TRUE(std::isfinite(lb.total.item()));
  EXPECT_GT(lb.total.item(), 0.0);
}

TEST(TotalLoss, BackwardReachesRegressorAndObjectnessParams) {
  Fixture fx(83);
  const Box gt = fx.grid.prior_box(2);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  auto lb = total_loss(fx.preds, sel);
  fx.store.zero_grads();
  backward(lb.total);
  auto grad_mag = [&](const std::string& name) {
    double s = 0.0;
    for (double g : fx.store.get(name).grad()) s += std::abs(g);
    return s;
  };
  EXPECT_GT(grad_mag("head.reg_a.proj.w"), 0.0);
  EXPECT_GT(grad_mag("head.reg_b.proj.w"), 0.0);
  EXPECT_GT(grad_mag("head.obj_pn.proj.w"), 0.0);
  EXPECT_GT(grad_mag("head.obj_po.proj.w"), 0.0);
}

TEST(TotalLoss, EmptyFrameStillTrainsNegatives) {
  Fixture fx(84);
  auto sel = selection_for(fx, {}, VariantMode::CA, 0);
  auto lb = total_loss(fx.preds, sel);
  EXPECT_EQ(lb.n_pos, 0);
  EXPECT_EQ(lb.n_pot, 0);
  EXPECT_EQ(lb.n_neg, fx.grid.count());
  EXPECT_DOUBLE_EQ(lb.l_sp.item(), 0.0);
  EXPECT_DOUBLE_EQ(lb.l_iou.item(), 0.0);
  EXPECT_DOUBLE_EQ(lb.l_po.item(), 0.0);
  EXPECT_GT(lb.l_pn.item(), 0.0);
}

TEST(TotalLoss, FrozenSelectionIsReproducible) {
  // The same predictions and selection must give bit-identical losses; the
  // weights inside the selection act as constants.
  Fixture fx(85);
  const Box gt = fx.grid.prior_box(0);
  auto sel = selection_for(fx, {gt}, VariantMode::DEOE, 2);
  const double a = total_loss(fx.preds, sel).total.item();
  const double b = total_loss(fx.preds, sel).total.item();
  EXPECT_EQ(a, b);
}

}  // namespace
