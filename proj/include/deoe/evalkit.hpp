#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deoe/events.hpp"
#include "deoe/geometry.hpp"
#include "deoe/infer.hpp"

namespace deoe {

struct ClassSplit {
  std::vector<int> known;
  std::vector<int> unknown;

  bool is_known(int cls) const {
    return std::find(known.begin(), known.end(), cls) != known.end();
  }
  bool is_unknown(int cls) const {
    return std::find(unknown.begin(), unknown.end(), cls) != unknown.end();
  }

  void validate() const {
    for (int k : known)
      if (is_unknown(k))
        throw std::runtime_error("class split: id " + std::to_string(k) +
                                 " is both known and unknown");
  }
};

// "known1,known2:unknown1,unknown2"; tokens are shape names or numeric ids.
inline ClassSplit parse_class_split(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos)
    throw std::runtime_error("split must be known:unknown lists, got " + text);
  const auto parse_list = [](const std::string& csv) {
    std::vector<int> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
      const auto comma = csv.find(',', start);
      const std::string tok =
          csv.substr(start, comma == std::string::npos ? csv.size() - start
                                                       : comma - start);
      if (!tok.empty()) {
        bool numeric = !tok.empty();
        for (char c : tok) numeric = numeric && c >= '0' && c <= '9';
        out.push_back(numeric ? std::stoi(tok)
                              : static_cast<int>(shape_kind_from_string(tok)));
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  };
  ClassSplit split;
  split.known = parse_list(text.substr(0, colon));
  split.unknown = parse_list(text.substr(colon + 1));
  split.validate();
  return split;
}

struct GtBox {
  Box box;
  int class_id = 0;
};

// One evaluated frame: detections already sorted by descending score.
struct EvalFrame {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

inline const std::vector<int>& eval_iou_thresholds() {
  static const std::vector<int> t = {50, 55, 60, 65, 70, 75, 80, 85, 90, 95};
  return t;
}

inline const std::vector<int>& eval_budgets() {
  static const std::vector<int> k = {10, 30, 50, 100, 300};
  return k;
}

// Greedy one-to-one matching: detections in order, each takes the
// highest-IoU unmatched GT at or above the threshold (ties to the lowest
// GT index). Returns the matched GT index per detection, -1 if none.
inline std::vector<int> match(const std::vector<Detection>& dets,
                              const std::vector<Box>& gts,
                              double iou_threshold) {
  std::vector<int> det_to_gt(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = -1.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      det_to_gt[d] = best_g;
      taken[best_g] = true;
    }
  }
  return det_to_gt;
}

namespace eval_detail {

inline std::vector<Box> boxes_of(const std::vector<GtBox>& gts,
                                 const ClassSplit& split, bool want_known) {
  std::vector<Box> out;
  for (const auto& g : gts) {
    const bool known = split.is_known(g.class_id);
    if (want_known == known) out.push_back(g.box);
  }
  return out;
}

// Budgeted detections for one frame. For the unknown split, detections
// greedily matched to known-class GT at IoU >= 0.5 are removed before the
// budget is applied.
inline std::vector<Detection> budgeted_dets(const EvalFrame& frame,
                                            const ClassSplit& split, int k,
                                            bool unknown_split) {
  std::vector<Detection> pool = frame.dets;
  if (unknown_split) {
    const auto known_boxes = boxes_of(frame.gts, split, true);
    const auto matched = match(pool, known_boxes, 0.5);
    std::vector<Detection> rest;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (matched[i] < 0) rest.push_back(pool[i]);
    pool = std::move(rest);
  }
  if (static_cast<int>(pool.size()) > k) pool.resize(k);
  return pool;
}

}  // namespace eval_detail

// AR_k for one split over a whole run: per IoU threshold, matched/total GT
// aggregated over frames, then averaged over the threshold ladder, x100.
// Returns false when the split has no GT anywhere in the run (AR absent).
inline bool average_recall(const std::vector<EvalFrame>& frames,
                           const ClassSplit& split, bool unknown_split, int k,
                           double& out_ar) {
  std::int64_t total = 0;
  for (const auto& f : frames) {
    for (const auto& g : f.gts) {
      const bool is_unk = !split.is_known(g.class_id);
      if (!unknown_split || is_unk) total += 1;
    }
  }
  if (total == 0) return false;

  double sum_recall = 0.0;
  for (int t100 : eval_iou_thresholds()) {
    const double tau = t100 / 100.0;
    std::int64_t matched_count = 0;
    for (const auto& f : frames) {
      std::vector<Box> gt_boxes;
      for (const auto& g : f.gts) {
        const bool is_unk = !split.is_known(g.class_id);
        if (!unknown_split || is_unk) gt_boxes.push_back(g.box);
      }
      if (gt_boxes.empty()) continue;
      const auto dets =
          eval_detail::budgeted_dets(f, split, k, unknown_split);
      const auto det_to_gt = match(dets, gt_boxes, tau);
      for (int g : det_to_gt) matched_count += g >= 0 ? 1 : 0;
    }
    sum_recall += static_cast<double>(matched_count) / static_cast<double>(total);
  }
  out_ar = 100.0 * sum_recall /
           static_cast<double>(eval_iou_thresholds().size());
  return true;
}

// Trapezoidal area under AR(log10 k), normalized to the budget span so a
// flat curve returns its constant value.
inline double auc(const std::vector<double>& ar, const std::vector<int>& ks) {
  if (ar.size() != ks.size() || ar.size() < 2)
    throw std::runtime_error("auc: need at least two aligned (k, AR) points");
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < ks.size(); ++i) {
    const double dx = std::log10(static_cast<double>(ks[i + 1])) -
                      std::log10(static_cast<double>(ks[i]));
    if (dx <= 0.0) throw std::runtime_error("auc: budgets must increase");
    area += 0.5 * (ar[i] + ar[i + 1]) * dx;
  }
  const double span = std::log10(static_cast<double>(ks.back())) -
                      std::log10(static_cast<double>(ks.front()));
  return area / span;
}

struct SplitMetrics {
  bool defined = false;
  std::vector<double> ar;  // aligned with eval_budgets()
  double auc_value = 0.0;
  std::int64_t gt_count = 0;
};

struct EvalReport {
  SplitMetrics unknown;
  SplitMetrics all;
  int frames = 0;
};

inline SplitMetrics split_metrics(const std::vector<EvalFrame>& frames,
                                  const ClassSplit& split, bool unknown_split) {
  SplitMetrics m;
  for (const auto& f : frames)
    for (const auto& g : f.gts)
      if (!unknown_split || !split.is_known(g.class_id)) m.gt_count += 1;
  for (int k : eval_budgets()) {
    double ar = 0.0;
    if (!average_recall(frames, split, unknown_split, k, ar)) return m;
    m.ar.push_back(ar);
  }
  m.defined = true;
  m.auc_value = auc(m.ar, eval_budgets());
  return m;
}

inline EvalReport evaluate_frames(const std::vector<EvalFrame>& frames,
                                  const ClassSplit& split) {
  EvalReport report;
  report.frames = static_cast<int>(frames.size());
  report.unknown = split_metrics(frames, split, true);
  report.all = split_metrics(frames, split, false);
  return report;
}

// Joins prediction and annotation files on frame timestamps. Every
// prediction frame must have annotations at its timestamp and every
// annotated tick from the first predicted frame onward must be predicted;
// anything unmatched is an orphan and a protocol error.
inline std::vector<EvalFrame> align_frames(
    const std::vector<DetectionSet>& preds,
    const std::vector<AnnotationRecord>& anns) {
  if (preds.empty()) throw std::runtime_error("no prediction frames");
  std::map<std::int64_t, std::vector<GtBox>> by_tick;
  for (const auto& a : anns)
    by_tick[a.t].push_back(GtBox{a.box, a.class_id});

  std::int64_t min_pred_t = preds.front().t;
  for (const auto& p : preds) min_pred_t = std::min(min_pred_t, p.t);

  std::set<std::int64_t> pred_ticks;
  std::vector<std::int64_t> orphans;
  for (const auto& p : preds) {
    if (!pred_ticks.insert(p.t).second)
      throw std::runtime_error("duplicate prediction frame at t=" +
                               std::to_string(p.t));
    if (by_tick.find(p.t) == by_tick.end()) orphans.push_back(p.t);
  }
  for (const auto& [t, boxes] : by_tick)
    if (t >= min_pred_t && pred_ticks.find(t) == pred_ticks.end())
      orphans.push_back(t);
  if (!orphans.empty()) {
    std::sort(orphans.begin(), orphans.end());
    std::string msg = "prediction/annotation timestamp mismatch; orphaned frames:";
    for (std::int64_t t : orphans) msg += " " + std::to_string(t);
    throw std::runtime_error(msg);
  }

  std::vector<EvalFrame> frames;
  std::vector<DetectionSet> ordered = preds;
  std::sort(ordered.begin(), ordered.end(),
            [](const DetectionSet& a, const DetectionSet& b) { return a.t < b.t; });
  for (const auto& p : ordered) {
    EvalFrame f;
    f.dets = p.dets;
    std::sort(f.dets.begin(), f.dets.end(), detection_before);
    f.gts = by_tick.at(p.t);
    frames.push_back(std::move(f));
  }
  return frames;
}

inline EvalReport evaluate_run(const std::string& prediction_path,
                               const std::string& annotation_path,
                               const ClassSplit& split) {
  const auto preds = load_predictions(prediction_path);
  const auto anns = load_annotations(annotation_path);
  return evaluate_frames(align_frames(preds, anns), split);
}

inline std::string format_report(const EvalReport& report) {
  std::string out = "split      AR_10   AR_30   AR_50   AR_100  AR_300  AUC\n";
  const auto row = [&out](const char* name, const SplitMetrics& m) {
    char buf[160];
    if (m.defined) {
      std::snprintf(buf, sizeof(buf),
                    "%-9s %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f\n", name,
                    m.ar[0], m.ar[1], m.ar[2], m.ar[3], m.ar[4], m.auc_value);
    } else {
      std::snprintf(buf, sizeof(buf),
                    "%-9s %7s %7s %7s %7s %7s %7s\n", name, "-", "-", "-",
                    "-", "-", "-");
    }
    out += buf;
  };
  row("unknown", report.unknown);
  row("all", report.all);
  return out;
}

inline void save_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  const auto rec = [&out, &report](const char* name, const SplitMetrics& m) {
    nlohmann::json j;
    j["split"] = name;
    j["frames"] = report.frames;
    j["gt_count"] = m.gt_count;
    j["defined"] = m.defined;
    if (m.defined) {
      const auto& ks = eval_budgets();
      for (std::size_t i = 0; i < ks.size(); ++i)
        j["ar" + std::to_string(ks[i])] = m.ar[i];
      j["auc"] = m.auc_value;
    }
    out << j.dump() << "\n";
  };
  rec("unknown", report.unknown);
  rec("all", report.all);
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace deoe
