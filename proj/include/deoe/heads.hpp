#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/geometry.hpp"
#include "deoe/nn.hpp"
#include "deoe/rng.hpp"
#include "deoe/tensor.hpp"

namespace deoe {

// One prior per cell: an axis-aligned square of side s centered at
// ((j+0.5)s, (i+0.5)s) for cell (i,j).
struct PriorGrid {
  int cells_y = 0;
  int cells_x = 0;
  int stride = 0;

  int count() const { return cells_y * cells_x; }
  int index(int i, int j) const { return i * cells_x + j; }
  double center_x(int cell) const {
    return (cell % cells_x + 0.5) * stride;
  }
  double center_y(int cell) const {
    return (cell / cells_x + 0.5) * stride;
  }
  Box prior_box(int cell) const {
    return Box::from_center(center_x(cell), center_y(cell),
                            static_cast<double>(stride),
                            static_cast<double>(stride));
  }
};

// Offsets a target box into a cell's frame: inverse of the decode below.
inline void encode_box_offsets(const Box& target, double cx, double cy,
                               double s, double& dx, double& dy, double& dw,
                               double& dh) {
  dx = (target.cx() - cx) / s;
  dy = (target.cy() - cy) / s;
  dw = std::log(target.w / s);
  dh = std::log(target.h / s);
}

struct HeadConfig {
  int in_channels = 64;
  int mid_channels = 32;
  double dropout_rate = 0.1;
  bool dual_regressor = true;
  bool disentangled = true;
};

template <typename Real>
struct HeadBranch {
  ConvLayer<Real> c1, c2, proj;

  static HeadBranch create(ParamStore<Real>& store, const std::string& name,
                           int in_ch, int mid_ch, int out_ch, Rng& rng,
                           Real proj_bias = Real(0)) {
    HeadBranch b;
    b.c1 = ConvLayer<Real>::create(store, name + ".c1", mid_ch, in_ch, 3, 1, 1, rng);
    b.c2 = ConvLayer<Real>::create(store, name + ".c2", mid_ch, mid_ch, 3, 1, 1, rng);
    b.proj = ConvLayer<Real>::create(store, name + ".proj", out_ch, mid_ch, 1,
                                     1, 0, rng, proj_bias);
    return b;
  }

  Tensor<Real> apply(const Tensor<Real>& x, double drop_rate, bool training,
                     std::uint64_t seed) const {
    auto t = dropout_apply(x, drop_rate, training, seed);
    t = silu(c1.apply(t));
    t = silu(c2.apply(t));
    return proj.apply(t);
  }
};

// Everything the sampler and losses need for one frame: the tape-connected
// offset/probability tensors plus plain-value caches of the decoded
// geometry, used for (non-differentiated) selection and for inference.
template <typename Real>
struct CellPredictions {
  PriorGrid grid;
  bool dual = true;
  bool disent = true;

  Tensor<Real> raw_a, raw_b;      // (4,Hc,Wc) box offsets per branch
  Tensor<Real> prob_pn, prob_po;  // (1,Hc,Wc) sigmoided objectness

  std::vector<Box> box_a, box_b, box_fused;
  std::vector<double> iou_s;  // 1.0 everywhere when single-branch
  std::vector<double> o_pn, o_po, obj;
  std::vector<double> iou_t;  // filled by temporal_iou
};

// Previous frame's fused boxes; invalid until the first frame of a sequence
// has been seen.
struct HeadTemporalBuffer {
  std::vector<Box> prev_fused;
  bool valid = false;

  void reset() {
    prev_fused.clear();
    valid = false;
  }
};

// iou_t per cell against the buffered boxes; the first frame of a sequence
// falls back to iou_s so downstream geometric means stay well-defined.
template <typename Real>
void temporal_iou(CellPredictions<Real>& preds, HeadTemporalBuffer& buffer) {
  const int n = preds.grid.count();
  preds.iou_t.resize(n);
  if (buffer.valid) {
    if (static_cast<int>(buffer.prev_fused.size()) != n)
      throw std::runtime_error("temporal buffer size does not match grid");
    for (int k = 0; k < n; ++k)
      preds.iou_t[k] = iou(preds.box_fused[k], buffer.prev_fused[k]);
  } else {
    preds.iou_t = preds.iou_s;
  }
  buffer.prev_fused = preds.box_fused;
  buffer.valid = true;
}

template <typename Real>
struct DetectionHeads {
  HeadConfig config;
  HeadBranch<Real> reg_a, reg_b;
  HeadBranch<Real> obj_pn, obj_po;

  static DetectionHeads create(ParamStore<Real>& store, const HeadConfig& cfg,
                               Rng& rng) {
    if (cfg.in_channels < 1 || cfg.mid_channels < 1)
      throw std::runtime_error("heads: channel counts must be >= 1");
    DetectionHeads h;
    h.config = cfg;
    h.reg_a = HeadBranch<Real>::create(store, "head.reg_a", cfg.in_channels,
                                       cfg.mid_channels, 4, rng);
    if (cfg.dual_regressor)
      h.reg_b = HeadBranch<Real>::create(store, "head.reg_b", cfg.in_channels,
                                         cfg.mid_channels, 4, rng);
    h.obj_pn = HeadBranch<Real>::create(store, "head.obj_pn", cfg.in_channels,
                                        cfg.mid_channels, 1, rng, Real(-2));
    if (cfg.disentangled)
      h.obj_po = HeadBranch<Real>::create(store, "head.obj_po", cfg.in_channels,
                                          cfg.mid_channels, 1, rng, Real(-2));
    return h;
  }

  // `seed` keys the dropout masks; distinct sub-seeds per branch.
  CellPredictions<Real> forward(const Tensor<Real>& features,
                                const PriorGrid& grid, bool training,
                                std::uint64_t seed) const {
    if (features.shape().size() != 3 ||
        features.shape()[0] != config.in_channels ||
        features.shape()[1] != grid.cells_y ||
        features.shape()[2] != grid.cells_x)
      throw std::runtime_error("heads: feature map " +
                               shape_str(features.shape()) +
                               " does not match grid");
    CellPredictions<Real> out;
    out.grid = grid;
    out.dual = config.dual_regressor;
    out.disent = config.disentangled;

    const double rate = config.dropout_rate;
    out.raw_a = reg_a.apply(features, rate, training, mix64(seed, 1));
    if (config.dual_regressor)
      out.raw_b = reg_b.apply(features, rate, training, mix64(seed, 2));
    out.prob_pn =
        sigmoid(obj_pn.apply(features, rate, training, mix64(seed, 3)));
    if (config.disentangled)
      out.prob_po =
          sigmoid(obj_po.apply(features, rate, training, mix64(seed, 4)));

    const int n = grid.count();
    const double s = grid.stride;
    out.box_a.resize(n);
    out.box_b.resize(n);
    out.box_fused.resize(n);
    out.iou_s.resize(n);
    out.o_pn.resize(n);
    out.o_po.resize(n, 1.0);
    out.obj.resize(n);
    const auto& va = out.raw_a.values();
    const Real* vb = config.dual_regressor ? out.raw_b.values().data() : nullptr;
    auto decode = [&](const Real* raw, int k) {
      const double cx = grid.center_x(k) + static_cast<double>(raw[k]) * s;
      const double cy = grid.center_y(k) + static_cast<double>(raw[n + k]) * s;
      const double w = s * std::exp(static_cast<double>(raw[2 * n + k]));
      const double h = s * std::exp(static_cast<double>(raw[3 * n + k]));
      return Box::from_center(cx, cy, w, h);
    };
    for (int k = 0; k < n; ++k) {
      out.box_a[k] = decode(va.data(), k);
      if (config.dual_regressor) {
        out.box_b[k] = decode(vb, k);
        out.box_fused[k] = Box::from_center(
            0.5 * (out.box_a[k].cx() + out.box_b[k].cx()),
            0.5 * (out.box_a[k].cy() + out.box_b[k].cy()),
            0.5 * (out.box_a[k].w + out.box_b[k].w),
            0.5 * (out.box_a[k].h + out.box_b[k].h));
        out.iou_s[k] = iou(out.box_a[k], out.box_b[k]);
      } else {
        out.box_b[k] = out.box_a[k];
        out.box_fused[k] = out.box_a[k];
        out.iou_s[k] = 1.0;
      }
      out.o_pn[k] = static_cast<double>(out.prob_pn.values()[k]);
      if (config.disentangled)
        out.o_po[k] = static_cast<double>(out.prob_po.values()[k]);
      out.obj[k] = out.o_pn[k] * out.o_po[k];
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Differentiable per-cell geometry on gathered subsets. Components are flat
// vectors over the selected cells.
// ---------------------------------------------------------------------------

template <typename Real>
struct DiffBoxes {
  Tensor<Real> cx, cy, w, h;

  static DiffBoxes constants(const std::vector<Box>& boxes) {
    const int n = static_cast<int>(boxes.size());
    std::vector<Real> cx(n), cy(n), w(n), h(n);
    for (int i = 0; i < n; ++i) {
      cx[i] = static_cast<Real>(boxes[i].cx());
      cy[i] = static_cast<Real>(boxes[i].cy());
      w[i] = static_cast<Real>(boxes[i].w);
      h[i] = static_cast<Real>(boxes[i].h);
    }
    return {Tensor<Real>::leaf({n}, std::move(cx)),
            Tensor<Real>::leaf({n}, std::move(cy)),
            Tensor<Real>::leaf({n}, std::move(w)),
            Tensor<Real>::leaf({n}, std::move(h))};
  }
};

// Decodes a regressor branch at the given cells, staying on the tape.
template <typename Real>
DiffBoxes<Real> decode_cells(const Tensor<Real>& raw, const PriorGrid& grid,
                             const std::vector<int>& cells) {
  const int n = grid.count();
  const int m = static_cast<int>(cells.size());
  const Real s = static_cast<Real>(grid.stride);
  std::vector<int> ix(m), iy(m), iw(m), ih(m);
  std::vector<Real> ccx(m), ccy(m);
  for (int i = 0; i < m; ++i) {
    const int k = cells[i];
    ix[i] = k;
    iy[i] = n + k;
    iw[i] = 2 * n + k;
    ih[i] = 3 * n + k;
    ccx[i] = static_cast<Real>(grid.center_x(k));
    ccy[i] = static_cast<Real>(grid.center_y(k));
  }
  DiffBoxes<Real> out;
  out.cx = add(mul_scalar(gather(raw, ix), s), Tensor<Real>::leaf({m}, std::move(ccx)));
  out.cy = add(mul_scalar(gather(raw, iy), s), Tensor<Real>::leaf({m}, std::move(ccy)));
  out.w = mul_scalar(exp_op(gather(raw, iw)), s);
  out.h = mul_scalar(exp_op(gather(raw, ih)), s);
  return out;
}

template <typename Real>
DiffBoxes<Real> fuse_boxes(const DiffBoxes<Real>& a, const DiffBoxes<Real>& b) {
  return {mul_scalar(add(a.cx, b.cx), Real(0.5)),
          mul_scalar(add(a.cy, b.cy), Real(0.5)),
          mul_scalar(add(a.w, b.w), Real(0.5)),
          mul_scalar(add(a.h, b.h), Real(0.5))};
}

// Pairwise IoU of equally-sized box vectors. Decoded widths/heights are
// positive (exp), so the union never vanishes.
template <typename Real>
Tensor<Real> iou_pairs(const DiffBoxes<Real>& a, const DiffBoxes<Real>& b) {
  const Real half = Real(0.5);
  auto ax0 = sub(a.cx, mul_scalar(a.w, half));
  auto ax1 = add(a.cx, mul_scalar(a.w, half));
  auto ay0 = sub(a.cy, mul_scalar(a.h, half));
  auto ay1 = add(a.cy, mul_scalar(a.h, half));
  auto bx0 = sub(b.cx, mul_scalar(b.w, half));
  auto bx1 = add(b.cx, mul_scalar(b.w, half));
  auto by0 = sub(b.cy, mul_scalar(b.h, half));
  auto by1 = add(b.cy, mul_scalar(b.h, half));
  auto iw = relu(sub(minimum(ax1, bx1), maximum(ax0, bx0)));
  auto ih = relu(sub(minimum(ay1, by1), maximum(ay0, by0)));
  auto inter = mul(iw, ih);
  auto uni = sub(add(mul(a.w, a.h), mul(b.w, b.h)), inter);
  return divide(inter, uni);
}

}  // namespace deoe
