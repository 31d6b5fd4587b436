#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deoe/encode.hpp"
#include "deoe/geometry.hpp"
#include "deoe/heads.hpp"
#include "deoe/model.hpp"

namespace deoe {

struct Detection {
  double obj = 0.0;
  Box box;
};

// Detections for one frame, sorted by obj descending (ties by coordinates).
struct DetectionSet {
  std::int64_t t = 0;
  std::vector<Detection> dets;
};

struct InferConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.65;
  int max_detections = 300;
};

inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.obj != b.obj) return a.obj > b.obj;
  if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
  if (a.box.y_min != b.box.y_min) return a.box.y_min < b.box.y_min;
  if (a.box.w != b.box.w) return a.box.w < b.box.w;
  return a.box.h < b.box.h;
}

// Greedy suppression: walk candidates by descending score, keep a box only
// if it overlaps every kept box below the threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets,
                                  double iou_threshold) {
  std::sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(d.box, k.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Eval-mode forward of one frame. Advances the recurrent state and the
// temporal buffer; nothing lands on the tape.
template <typename Real>
DetectionSet predict_frame(const Detector<Real>& model, const EventTensor& frame,
                           RecurrentState<Real>& state,
                           HeadTemporalBuffer& buffer,
                           const InferConfig& cfg = {}) {
  NoGradGuard guard;
  auto preds = model.forward(frame, state, false, 0);
  temporal_iou(preds, buffer);

  std::vector<Detection> candidates;
  const int n = model.grid.count();
  for (int k = 0; k < n; ++k) {
    const double obj = preds.obj[k];
    if (obj < cfg.score_threshold) continue;
    const Box clipped =
        preds.box_fused[k].clipped(model.config.width, model.config.height);
    if (clipped.w <= 0.0 || clipped.h <= 0.0) continue;
    candidates.push_back({obj, clipped});
  }
  DetectionSet out;
  out.t = frame.t_b;
  out.dets = nms(std::move(candidates), cfg.nms_iou);
  if (static_cast<int>(out.dets.size()) > cfg.max_detections)
    out.dets.resize(cfg.max_detections);
  return out;
}

// Runs a whole stream through the model at a fixed frame window, starting
// from reset state.
template <typename Real>
std::vector<DetectionSet> predict_stream(const Detector<Real>& model,
                                         const EventStream& stream,
                                         std::int64_t dt_us,
                                         std::int64_t duration_us,
                                         const InferConfig& cfg = {}) {
  if (stream.width != model.config.width || stream.height != model.config.height)
    throw std::runtime_error("predict_stream: stream resolution does not match model");
  if (dt_us < 1) throw std::runtime_error("predict_stream: dt must be >= 1");
  auto state = model.initial_state();
  HeadTemporalBuffer buffer;
  std::vector<DetectionSet> out;
  for (std::int64_t t_a = 0; t_a + dt_us <= duration_us; t_a += dt_us) {
    const std::int64_t t_b = t_a + dt_us;
    const auto frame = encode_window(window(stream, t_a, t_b), t_a, t_b,
                                     model.config.bins, stream.height,
                                     stream.width);
    out.push_back(predict_frame(model, frame, state, buffer, cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction files: newline-delimited JSON. Every frame contributes one
// marker record {"t","n_dets"} followed by exactly n_dets detection records
// {"t","obj","x","y","w","h"}, so frames with zero detections still count
// toward recall denominators downstream.
// ---------------------------------------------------------------------------

inline void save_predictions(const std::string& path,
                             const std::vector<DetectionSet>& frames) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write predictions: " + path);
  for (const auto& f : frames) {
    nlohmann::json marker;
    marker["t"] = f.t;
    marker["n_dets"] = f.dets.size();
    out << marker.dump() << "\n";
    for (const auto& d : f.dets) {
      nlohmann::json rec;
      rec["t"] = f.t;
      rec["obj"] = d.obj;
      rec["x"] = d.box.x_min;
      rec["y"] = d.box.y_min;
      rec["w"] = d.box.w;
      rec["h"] = d.box.h;
      out << rec.dump() << "\n";
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<DetectionSet> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions: " + path);
  std::vector<DetectionSet> out;
  std::string line;
  int lineno = 0;
  std::int64_t pending = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    if (rec.contains("n_dets")) {
      if (pending != 0)
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": marker while " + std::to_string(pending) +
                                 " detections still expected");
      DetectionSet f;
      f.t = rec.at("t").get<std::int64_t>();
      pending = rec.at("n_dets").get<std::int64_t>();
      out.push_back(std::move(f));
    } else {
      if (out.empty() || pending == 0)
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": detection record without a frame marker");
      Detection d;
      d.obj = rec.at("obj").get<double>();
      d.box = Box{rec.at("x").get<double>(), rec.at("y").get<double>(),
                  rec.at("w").get<double>(), rec.at("h").get<double>()};
      if (rec.at("t").get<std::int64_t>() != out.back().t)
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": detection timestamp differs from its marker");
      out.back().dets.push_back(d);
      --pending;
    }
  }
  if (pending != 0)
    throw std::runtime_error(path + ": truncated: " + std::to_string(pending) +
                             " detections missing after last marker");
  return out;
}

// ---------------------------------------------------------------------------
// Latency measurement, batch 1, tensor-in to detections-out.
// ---------------------------------------------------------------------------

struct BenchStats {
  int frames = 0;
  int height = 0;
  int width = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p99_ms = 0.0;
};

template <typename Real>
BenchStats bench_inference(const Detector<Real>& model,
                           const std::vector<EventTensor>& frames,
                           const InferConfig& cfg = {}, int warmup_frames = 5) {
  if (frames.empty()) throw std::runtime_error("bench: no frames");
  auto state = model.initial_state();
  HeadTemporalBuffer buffer;
  const int warm = std::min<int>(warmup_frames, static_cast<int>(frames.size()));
  for (int i = 0; i < warm; ++i)
    predict_frame(model, frames[i], state, buffer, cfg);

  state = model.initial_state();
  buffer.reset();
  std::vector<double> samples;
  samples.reserve(frames.size());
  for (const auto& f : frames) {
    const auto start = std::chrono::steady_clock::now();
    predict_frame(model, f, state, buffer, cfg);
    const auto stop = std::chrono::steady_clock::now();
    samples.push_back(
        std::chrono::duration<double, std::milli>(stop - start).count());
  }
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  BenchStats stats;
  stats.frames = static_cast<int>(frames.size());
  stats.height = model.config.height;
  stats.width = model.config.width;
  double sum = 0.0;
  for (double s : samples) sum += s;
  stats.mean_ms = sum / static_cast<double>(samples.size());
  const auto pick = [&sorted](double q) {
    const auto idx = static_cast<std::size_t>(
        q * static_cast<double>(sorted.size() - 1) + 0.5);
    return sorted[std::min(idx, sorted.size() - 1)];
  };
  stats.p50_ms = pick(0.50);
  stats.p99_ms = pick(0.99);
  return stats;
}

}  // namespace deoe
