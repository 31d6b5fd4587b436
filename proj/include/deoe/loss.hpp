#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "deoe/heads.hpp"
#include "deoe/sampling.hpp"
#include "deoe/tensor.hpp"

namespace deoe {

inline constexpr double kSpatialEps = 1e-16;

// Plain-value BCE with the same clamp as the tape op.
inline double bce_value(double p, double y) {
  const double pc = std::min(1.0 - kBceClamp, std::max(kBceClamp, p));
  return -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

// Everything the differentiable loss reads besides the prediction tensors.
// Frozen at selection time: index sets, targets, and the renormalized
// potential weights all act as constants, so re-running the forward pass
// against a fixed selection reproduces the exact function the tape
// differentiates.
struct SampleSelection {
  std::vector<int> pos_cells;
  std::vector<Box> pos_gt_boxes;
  std::vector<double> pos_iou_g;
  std::vector<double> pos_pn_target;
  std::vector<int> pot_cells;
  std::vector<double> pot_weights;  // renormalized
  std::vector<double> pot_iou_s;    // targets of the positive-only branch
  std::vector<int> neg_cells;
};

template <typename Real>
SampleSelection build_selection(const CellPredictions<Real>& preds,
                                const VariantSamples& samples,
                                const std::vector<Box>& gt_boxes) {
  SampleSelection sel;
  const Assignment& asg = samples.assignment;
  const int n = preds.grid.count();
  // Promoted potentials leave the negative set; a cell never carries both
  // the soft label 1 and the background label 0.
  std::vector<bool> is_potential(n, false);
  for (int k : samples.potentials.cells) is_potential[k] = true;
  for (int k = 0; k < n; ++k) {
    switch (asg.status[k]) {
      case CellStatus::positive: {
        const int g = asg.matched_gt[k];
        if (g < 0 || g >= static_cast<int>(gt_boxes.size()))
          throw std::runtime_error("selection: positive cell with bad GT index");
        sel.pos_cells.push_back(k);
        sel.pos_gt_boxes.push_back(gt_boxes[g]);
        sel.pos_iou_g.push_back(asg.iou_g[k]);
        sel.pos_pn_target.push_back(
            samples.pos_target_is_iou_g ? asg.iou_g[k] : 1.0);
        break;
      }
      case CellStatus::negative:
        if (!is_potential[k]) sel.neg_cells.push_back(k);
        break;
      case CellStatus::ignored:
        break;
    }
  }
  sel.pot_cells = samples.potentials.cells;
  sel.pot_iou_s = samples.potentials.iou_s;
  if (!sel.pot_cells.empty()) {
    std::vector<double> losses(sel.pot_cells.size());
    for (std::size_t i = 0; i < sel.pot_cells.size(); ++i)
      losses[i] = bce_value(preds.o_pn[sel.pot_cells[i]], 1.0);
    sel.pot_weights = renormalize_weights(losses, samples.potentials.weights);
  }
  return sel;
}

template <typename Real>
struct LossBreakdown {
  Tensor<Real> l_sp, l_iou, l_pn, l_po, total;
  int n_pos = 0;
  int n_pot = 0;
  int n_neg = 0;
};

namespace detail {

template <typename Real>
Tensor<Real> constant_vec(const std::vector<double>& v) {
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<Real>(v[i]);
  return Tensor<Real>::leaf({static_cast<int>(v.size())}, std::move(out));
}

template <typename Real>
std::vector<Real> target_vec(const std::vector<double>& v) {
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<Real>(v[i]);
  return out;
}

}  // namespace detail

// Mean over positives and potentials of -log(iou_s + eps); pulls the two
// regressor branches together on every soft-positive cell.
template <typename Real>
Tensor<Real> loss_spatial(const CellPredictions<Real>& preds,
                          const SampleSelection& sel) {
  if (!preds.dual) return Tensor<Real>::scalar(Real(0));
  std::vector<int> cells = sel.pos_cells;
  cells.insert(cells.end(), sel.pot_cells.begin(), sel.pot_cells.end());
  if (cells.empty()) return Tensor<Real>::scalar(Real(0));
  auto a = decode_cells(preds.raw_a, preds.grid, cells);
  auto b = decode_cells(preds.raw_b, preds.grid, cells);
  auto ious = iou_pairs(a, b);
  auto neg_log = mul_scalar(
      log_op(add_scalar(ious, static_cast<Real>(kSpatialEps))), Real(-1));
  return mean_all(neg_log);
}

// Mean over positives of 1 - IoU(fused box, matched GT).
template <typename Real>
Tensor<Real> loss_iou(const CellPredictions<Real>& preds,
                      const SampleSelection& sel) {
  if (sel.pos_cells.empty()) return Tensor<Real>::scalar(Real(0));
  auto a = decode_cells(preds.raw_a, preds.grid, sel.pos_cells);
  DiffBoxes<Real> fused = a;
  if (preds.dual) {
    auto b = decode_cells(preds.raw_b, preds.grid, sel.pos_cells);
    fused = fuse_boxes(a, b);
  }
  auto gt = DiffBoxes<Real>::constants(sel.pos_gt_boxes);
  auto ious = iou_pairs(fused, gt);
  return mean_all(add_scalar(mul_scalar(ious, Real(-1)), Real(1)));
}

// Per-subset means: positives toward their target, potentials toward 1
// scaled by the frozen weights, negatives toward 0.
template <typename Real>
Tensor<Real> loss_pn(const CellPredictions<Real>& preds,
                     const SampleSelection& sel) {
  auto total = Tensor<Real>::scalar(Real(0));
  if (!sel.pos_cells.empty()) {
    auto p = gather(preds.prob_pn, sel.pos_cells);
    total = add(total, mean_all(bce(p, detail::target_vec<Real>(sel.pos_pn_target))));
  }
  if (!sel.pot_cells.empty()) {
    auto p = gather(preds.prob_pn, sel.pot_cells);
    auto weighted = mul(bce(p, Real(1)), detail::constant_vec<Real>(sel.pot_weights));
    total = add(total, mean_all(weighted));
  }
  if (!sel.neg_cells.empty()) {
    auto p = gather(preds.prob_pn, sel.neg_cells);
    total = add(total, mean_all(bce(p, Real(0))));
  }
  return total;
}

// Positive-only branch: soft targets, no negatives anywhere.
template <typename Real>
Tensor<Real> loss_po(const CellPredictions<Real>& preds,
                     const SampleSelection& sel) {
  auto total = Tensor<Real>::scalar(Real(0));
  if (!preds.disent) return total;
  if (!sel.pos_cells.empty()) {
    auto p = gather(preds.prob_po, sel.pos_cells);
    total = add(total, mean_all(bce(p, detail::target_vec<Real>(sel.pos_iou_g))));
  }
  if (!sel.pot_cells.empty()) {
    auto p = gather(preds.prob_po, sel.pot_cells);
    total = add(total, mean_all(bce(p, detail::target_vec<Real>(sel.pot_iou_s))));
  }
  return total;
}

template <typename Real>
LossBreakdown<Real> total_loss(const CellPredictions<Real>& preds,
                               const SampleSelection& sel) {
  LossBreakdown<Real> out;
  out.l_sp = loss_spatial(preds, sel);
  out.l_iou = loss_iou(preds, sel);
  out.l_pn = loss_pn(preds, sel);
  out.l_po = loss_po(preds, sel);
  out.total = add(add(out.l_pn, out.l_po), add(out.l_sp, out.l_iou));
  out.n_pos = static_cast<int>(sel.pos_cells.size());
  out.n_pot = static_cast<int>(sel.pot_cells.size());
  out.n_neg = static_cast<int>(sel.neg_cells.size());
  return out;
}

}  // namespace deoe
