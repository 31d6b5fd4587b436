#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/geometry.hpp"
#include "deoe/heads.hpp"

namespace deoe {

enum class CellStatus { negative = 0, positive = 1, ignored = 2 };

// Positive/negative partition of the grid against known-class GT.
// Positives carry their matched GT index and iou_g, the overlap between the
// cell's prior box and that GT.
struct Assignment {
  std::vector<CellStatus> status;
  std::vector<int> matched_gt;  // -1 unless positive
  std::vector<double> iou_g;    // 0 unless positive

  int count(CellStatus s) const {
    int n = 0;
    for (auto st : status) n += st == s ? 1 : 0;
    return n;
  }
};

struct ScreeningConfig {
  int potential_count = 35;
  double pos_threshold = 0.5;
  double neg_threshold = 0.4;

  void validate(int cell_count) const {
    if (potential_count < 0 || potential_count > cell_count)
      throw std::runtime_error("screening: potential count must be in [0, cells]");
    if (!(pos_threshold > neg_threshold))
      throw std::runtime_error("screening: pos threshold must exceed neg threshold");
  }
};

// Cells with prior IoU >= pos go positive (argmax GT, ties to the lowest GT
// index), < neg go negative, the band between is ignored. Any GT left
// without a positive claims its highest-IoU cell among cells not already
// positive, in GT index order (ties to the lowest cell index).
inline Assignment assign(const PriorGrid& grid, const std::vector<Box>& gts,
                         double pos_threshold = 0.5,
                         double neg_threshold = 0.4) {
  const int n = grid.count();
  Assignment out;
  out.status.assign(n, CellStatus::negative);
  out.matched_gt.assign(n, -1);
  out.iou_g.assign(n, 0.0);
  if (gts.empty()) return out;

  std::vector<double> all_iou(static_cast<std::size_t>(n) * gts.size());
  for (int k = 0; k < n; ++k) {
    const Box prior = grid.prior_box(k);
    double best = -1.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(prior, gts[g]);
      all_iou[k * gts.size() + g] = v;
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best >= pos_threshold) {
      out.status[k] = CellStatus::positive;
      out.matched_gt[k] = best_g;
      out.iou_g[k] = best;
    } else if (best >= neg_threshold) {
      out.status[k] = CellStatus::ignored;
    }
  }

  for (std::size_t g = 0; g < gts.size(); ++g) {
    bool has_pos = false;
    for (int k = 0; k < n && !has_pos; ++k)
      has_pos = out.status[k] == CellStatus::positive &&
                out.matched_gt[k] == static_cast<int>(g);
    if (has_pos) continue;
    double best = -1.0;
    int best_k = -1;
    for (int k = 0; k < n; ++k) {
      if (out.status[k] == CellStatus::positive) continue;
      const double v = all_iou[k * gts.size() + g];
      if (v > best) {
        best = v;
        best_k = k;
      }
    }
    if (best_k >= 0) {
      out.status[best_k] = CellStatus::positive;
      out.matched_gt[best_k] = static_cast<int>(g);
      out.iou_g[best_k] = best;
    }
  }
  return out;
}

inline double score_potential(double obj, double iou_s, double iou_t) {
  return obj * std::sqrt(iou_s * iou_t);
}

inline double potential_weight(double obj, double iou_s) {
  return std::sqrt(obj * iou_s);
}

// Soft positives mined from the negatives: top-N by screening score.
struct PotentialSet {
  std::vector<int> cells;
  std::vector<double> scores;   // non-increasing
  std::vector<double> weights;  // sqrt(obj * iou_s), in [0,1]
  std::vector<double> iou_s;    // snapshot at selection time
};

template <typename Real>
PotentialSet screen_potentials(const CellPredictions<Real>& preds,
                               const Assignment& asg,
                               const ScreeningConfig& cfg) {
  const int n = preds.grid.count();
  cfg.validate(n);
  if (preds.iou_t.size() != static_cast<std::size_t>(n))
    throw std::runtime_error("screen_potentials: iou_t not computed");
  std::vector<std::pair<double, int>> scored;
  scored.reserve(n);
  for (int k = 0; k < n; ++k) {
    if (asg.status[k] != CellStatus::negative) continue;
    scored.emplace_back(score_potential(preds.obj[k], preds.iou_s[k],
                                        preds.iou_t[k]), k);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const int take = std::min<int>(cfg.potential_count,
                                 static_cast<int>(scored.size()));
  PotentialSet out;
  out.cells.reserve(take);
  for (int i = 0; i < take; ++i) {
    const int k = scored[i].second;
    out.cells.push_back(k);
    out.scores.push_back(scored[i].first);
    out.weights.push_back(potential_weight(preds.obj[k], preds.iou_s[k]));
    out.iou_s.push_back(preds.iou_s[k]);
  }
  return out;
}

// Rescales weights so the weighted loss sum equals the unweighted sum:
// w~_i = w_i * (sum l) / (sum w l). A zero weighted sum leaves the weights
// untouched.
inline std::vector<double> renormalize_weights(const std::vector<double>& losses,
                                               const std::vector<double>& weights) {
  if (losses.size() != weights.size())
    throw std::runtime_error("renormalize_weights: size mismatch");
  double sum_l = 0.0, sum_wl = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    sum_l += losses[i];
    sum_wl += weights[i] * losses[i];
  }
  if (sum_wl == 0.0) return weights;
  std::vector<double> out(weights.size());
  const double scale = sum_l / sum_wl;
  for (std::size_t i = 0; i < weights.size(); ++i) out[i] = weights[i] * scale;
  return out;
}

enum class VariantMode { DEOE, CA, CA_O, CA_P, ORACLE };

inline std::string to_string(VariantMode m) {
  switch (m) {
    case VariantMode::DEOE: return "deoe";
    case VariantMode::CA: return "ca";
    case VariantMode::CA_O: return "ca_o";
    case VariantMode::CA_P: return "ca_p";
    case VariantMode::ORACLE: return "oracle";
  }
  throw std::runtime_error("unknown variant");
}

inline VariantMode variant_from_string(const std::string& s) {
  if (s == "deoe") return VariantMode::DEOE;
  if (s == "ca") return VariantMode::CA;
  if (s == "ca_o") return VariantMode::CA_O;
  if (s == "ca_p") return VariantMode::CA_P;
  if (s == "oracle") return VariantMode::ORACLE;
  throw std::runtime_error("unknown variant: " + s +
                           " (expected deoe|ca|ca_o|ca_p|oracle)");
}

// Variant defaults for head structure; trainers may override the flags
// independently for head ablations.
inline bool variant_default_dual(VariantMode m) {
  return m == VariantMode::DEOE || m == VariantMode::ORACLE;
}
inline bool variant_default_disent(VariantMode m) {
  return m == VariantMode::DEOE || m == VariantMode::ORACLE;
}

// Effective training samples for one frame under a variant.
//   DEOE   -> screening potentials, positive label 1
//   CA     -> no potentials
//   CA_O   -> no potentials, positive label iou_g
//   CA_P   -> top-N negatives by objectness alone, label 1, weight 1
//   ORACLE -> assignment redone against ALL boxes (annotated or not),
//             potentials empty
struct VariantSamples {
  Assignment assignment;
  PotentialSet potentials;
  bool pos_target_is_iou_g = false;
};

template <typename Real>
VariantSamples variant_assign(VariantMode mode, const CellPredictions<Real>& preds,
                              const std::vector<Box>& annotated_gt,
                              const std::vector<Box>* full_gt,
                              const ScreeningConfig& cfg) {
  VariantSamples out;
  if (mode == VariantMode::ORACLE) {
    if (full_gt == nullptr)
      throw std::runtime_error("oracle variant requires full annotations");
    out.assignment = assign(preds.grid, *full_gt, cfg.pos_threshold,
                            cfg.neg_threshold);
    return out;
  }
  out.assignment = assign(preds.grid, annotated_gt, cfg.pos_threshold,
                          cfg.neg_threshold);
  switch (mode) {
    case VariantMode::DEOE:
      out.potentials = screen_potentials(preds, out.assignment, cfg);
      break;
    case VariantMode::CA:
      break;
    case VariantMode::CA_O:
      out.pos_target_is_iou_g = true;
      break;
    case VariantMode::CA_P: {
      const int n = preds.grid.count();
      cfg.validate(n);
      std::vector<std::pair<double, int>> scored;
      for (int k = 0; k < n; ++k)
        if (out.assignment.status[k] == CellStatus::negative)
          scored.emplace_back(preds.obj[k], k);
      std::sort(scored.begin(), scored.end(),
                [](const auto& a, const auto& b) {
                  if (a.first != b.first) return a.first > b.first;
                  return a.second < b.second;
                });
      const int take = std::min<int>(cfg.potential_count,
                                     static_cast<int>(scored.size()));
      for (int i = 0; i < take; ++i) {
        out.potentials.cells.push_back(scored[i].second);
        out.potentials.scores.push_back(scored[i].first);
        out.potentials.weights.push_back(1.0);
        out.potentials.iou_s.push_back(preds.iou_s[scored[i].second]);
      }
      break;
    }
    default:
      break;
  }
  return out;
}

}  // namespace deoe
