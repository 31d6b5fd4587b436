#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/checkpoint.hpp"
#include "deoe/config.hpp"
#include "deoe/encode.hpp"
#include "deoe/events.hpp"
#include "deoe/loss.hpp"
#include "deoe/model.hpp"
#include "deoe/sampling.hpp"

namespace deoe {

struct TrainConfig {
  ModelConfig model;
  VariantMode variant = VariantMode::DEOE;
  ScreeningConfig screening;
  int sequence_length = 5;
  int batch_size = 4;
  std::int64_t iterations = 1000;
  double lr_max = 2e-4;
  double lr_min = 1e-5;
  double warmup_frac = 0.05;
  std::uint64_t seed = 1;
  std::int64_t frame_dt_us = 10000;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
  ShapePopulation shapes;
  std::vector<ShapeKind> known_kinds = {ShapeKind::rectangle};
  double noise_rate = 0.0;
  std::int64_t micro_step_us = 500;
  double event_threshold = 0.3;

  void validate() const {
    model.validate();
    if (sequence_length < 1)
      throw std::runtime_error("train: sequence_length must be >= 1");
    if (batch_size < 1) throw std::runtime_error("train: batch_size must be >= 1");
    if (iterations < 0) throw std::runtime_error("train: iterations must be >= 0");
    if (frame_dt_us < 1) throw std::runtime_error("train: frame_dt_us must be >= 1");
    const int cells = (model.height / model.backbone().total_stride()) *
                      (model.width / model.backbone().total_stride());
    screening.validate(cells);
  }
};

inline std::vector<ShapeKind> parse_kind_list(const std::string& csv) {
  std::vector<ShapeKind> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto comma = csv.find(',', start);
    const std::string part =
        csv.substr(start, comma == std::string::npos ? csv.size() - start
                                                     : comma - start);
    if (!part.empty()) out.push_back(shape_kind_from_string(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw std::runtime_error("empty shape kind list");
  return out;
}

// "kind:min:max[,kind:min:max]..."; empty string means no overrides.
inline std::vector<SizeRule> parse_size_rules(const std::string& csv) {
  std::vector<SizeRule> out;
  std::size_t start = 0;
  while (start < csv.size()) {
    const auto comma = csv.find(',', start);
    const std::string part =
        csv.substr(start, comma == std::string::npos ? csv.size() - start
                                                     : comma - start);
    if (!part.empty()) {
      const auto c1 = part.find(':');
      const auto c2 = c1 == std::string::npos ? std::string::npos
                                              : part.find(':', c1 + 1);
      if (c2 == std::string::npos)
        throw std::runtime_error("size rule must be kind:min:max, got: " + part);
      SizeRule rule;
      rule.kind = shape_kind_from_string(part.substr(0, c1));
      rule.size_min = std::stod(part.substr(c1 + 1, c2 - c1 - 1));
      rule.size_max = std::stod(part.substr(c2 + 1));
      out.push_back(rule);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// Model-architecture keys shared by every subcommand that rebuilds the
// network (train, infer, bench). The variant picks the head defaults;
// dual_head / disent_head keys override them independently.
inline ModelConfig parse_model_config(const KeyValueConfig& cfg) {
  ModelConfig mc;
  mc.bins = static_cast<int>(cfg.get_int("bins", 5));
  mc.height = static_cast<int>(cfg.get_int("height", 128));
  mc.width = static_cast<int>(cfg.get_int("width", 128));
  mc.channels = cfg.get_ints("channels", {16, 32, 64});
  mc.strides = cfg.get_ints("strides", {4, 2, 2});
  mc.head_mid_channels = static_cast<int>(cfg.get_int("head_mid", 32));
  mc.dropout_rate = cfg.get_double("dropout", 0.1);
  const VariantMode variant =
      variant_from_string(cfg.get_string("variant", "deoe"));
  mc.dual_head = cfg.get_bool("dual_head", variant_default_dual(variant));
  mc.disent_head = cfg.get_bool("disent_head", variant_default_disent(variant));
  mc.validate();
  return mc;
}

inline TrainConfig parse_train_config(const KeyValueConfig& cfg) {
  TrainConfig tc;
  tc.model = parse_model_config(cfg);
  tc.variant = variant_from_string(cfg.get_string("variant", "deoe"));
  tc.screening.potential_count =
      static_cast<int>(cfg.get_int("potential_count", 35));
  tc.screening.pos_threshold = cfg.get_double("pos_threshold", 0.5);
  tc.screening.neg_threshold = cfg.get_double("neg_threshold", 0.4);
  tc.sequence_length = static_cast<int>(cfg.get_int("sequence_length", 5));
  tc.batch_size = static_cast<int>(cfg.get_int("batch_size", 4));
  tc.iterations = cfg.get_int("iterations", 1000);
  tc.lr_max = cfg.get_double("lr_max", 2e-4);
  tc.lr_min = cfg.get_double("lr_min", 1e-5);
  tc.warmup_frac = cfg.get_double("warmup_frac", 0.05);
  tc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  tc.frame_dt_us = cfg.get_int("frame_dt_us", 10000);
  tc.checkpoint_every = cfg.get_int("checkpoint_every", 0);
  tc.shapes.kinds = parse_kind_list(
      cfg.get_string("shape_kinds", "rectangle,disc,triangle"));
  tc.shapes.count_min = static_cast<int>(cfg.get_int("shapes_min", 4));
  tc.shapes.count_max = static_cast<int>(cfg.get_int("shapes_max", 8));
  tc.shapes.size_min = cfg.get_double("size_min", 12.0);
  tc.shapes.size_max = cfg.get_double("size_max", 32.0);
  tc.shapes.size_rules = parse_size_rules(cfg.get_string("size_rules", ""));
  tc.shapes.speed_min = cfg.get_double("speed_min", 100.0);
  tc.shapes.speed_max = cfg.get_double("speed_max", 300.0);
  tc.known_kinds = parse_kind_list(cfg.get_string("known_kinds", "rectangle"));
  tc.noise_rate = cfg.get_double("noise_rate", 0.0);
  tc.micro_step_us = cfg.get_int("micro_step_us", 500);
  tc.event_threshold = cfg.get_double("event_threshold", 0.3);
  tc.validate();
  return tc;
}

// Scene recipe for one training sequence. Seeded purely by
// (run seed, iteration, batch member), so any step can be regenerated in
// isolation and resumed runs replay the identical stream.
inline SceneSpec training_scene_spec(const TrainConfig& cfg, std::int64_t iter,
                                     int member) {
  SceneSpec spec;
  spec.width = cfg.model.width;
  spec.height = cfg.model.height;
  spec.duration_us = cfg.frame_dt_us * cfg.sequence_length;
  spec.shapes = cfg.shapes;
  spec.known_kinds = cfg.known_kinds;
  spec.noise_rate = cfg.noise_rate;
  spec.annotation_period_us = cfg.frame_dt_us;
  spec.micro_step_us = cfg.micro_step_us;
  spec.event_threshold = cfg.event_threshold;
  spec.seed = mix64(cfg.seed, 0x5ce7eULL,
                    static_cast<std::uint64_t>(iter),
                    static_cast<std::uint64_t>(member));
  return spec;
}

// One L-frame sequence, pre-encoded, with per-frame GT. Frame t covers
// [t*dt, (t+1)*dt) and is labeled by the annotations at tick (t+1)*dt.
struct SequenceData {
  std::vector<EventTensor> frames;
  std::vector<std::vector<Box>> gt_annotated;
  std::vector<std::vector<Box>> gt_full;
};

inline SequenceData make_sequence(const SceneSpec& spec, int frames, int bins,
                                  std::int64_t dt_us) {
  const Scene scene = synth_scene(spec);
  SequenceData out;
  out.frames.reserve(frames);
  out.gt_annotated.resize(frames);
  out.gt_full.resize(frames);
  for (int t = 0; t < frames; ++t) {
    const std::int64_t t_a = static_cast<std::int64_t>(t) * dt_us;
    const std::int64_t t_b = t_a + dt_us;
    out.frames.push_back(encode_window(window(scene.stream, t_a, t_b), t_a, t_b,
                                       bins, spec.height, spec.width));
    for (const auto& ann : scene.annotations) {
      if (ann.t != t_b) continue;
      out.gt_full[t].push_back(ann.box);
      if (ann.annotated) out.gt_annotated[t].push_back(ann.box);
    }
  }
  return out;
}

using TrainBatch = std::vector<SequenceData>;

inline TrainBatch make_batch(const TrainConfig& cfg, std::int64_t iter) {
  TrainBatch batch;
  batch.reserve(cfg.batch_size);
  for (int m = 0; m < cfg.batch_size; ++m)
    batch.push_back(make_sequence(training_scene_spec(cfg, iter, m),
                                  cfg.sequence_length, cfg.model.bins,
                                  cfg.frame_dt_us));
  return batch;
}

// Linear warmup over the first 5% of iterations, then cosine decay to
// lr_min at the final iteration.
inline double learning_rate(const TrainConfig& cfg, std::int64_t iter) {
  const auto warmup = static_cast<std::int64_t>(
      cfg.warmup_frac * static_cast<double>(cfg.iterations));
  if (warmup > 0 && iter < warmup)
    return cfg.lr_max * static_cast<double>(iter + 1) /
           static_cast<double>(warmup);
  const std::int64_t decay = cfg.iterations - warmup;
  if (decay <= 1) return cfg.lr_max;
  const double p = static_cast<double>(iter - warmup) /
                   static_cast<double>(decay - 1);
  return cfg.lr_min +
         (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + std::cos(p * 3.14159265358979323846));
}

struct StepStats {
  double l_sp = 0, l_iou = 0, l_pn = 0, l_po = 0, total = 0;
  std::int64_t n_pos = 0, n_pot = 0;
};

// Forward one sequence, accumulating per-frame losses on one tape. States
// and temporal buffers live only inside the call, so no gradient can cross
// a sequence boundary.
template <typename Real>
LossBreakdown<Real> sequence_loss(const Detector<Real>& model,
                                  const SequenceData& seq, VariantMode variant,
                                  const ScreeningConfig& screening,
                                  bool training, std::uint64_t dropout_seed) {
  auto state = model.initial_state();
  HeadTemporalBuffer buffer;
  LossBreakdown<Real> acc;
  acc.l_sp = Tensor<Real>::scalar(Real(0));
  acc.l_iou = Tensor<Real>::scalar(Real(0));
  acc.l_pn = Tensor<Real>::scalar(Real(0));
  acc.l_po = Tensor<Real>::scalar(Real(0));
  acc.total = Tensor<Real>::scalar(Real(0));
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    auto preds = model.forward(seq.frames[t], state, training,
                               mix64(dropout_seed, static_cast<std::uint64_t>(t)));
    temporal_iou(preds, buffer);
    const auto samples =
        variant_assign(variant, preds, seq.gt_annotated[t],
                       &seq.gt_full[t], screening);
    const auto sel = build_selection(preds, samples,
                                     variant == VariantMode::ORACLE
                                         ? seq.gt_full[t]
                                         : seq.gt_annotated[t]);
    auto frame = total_loss(preds, sel);
    if (!std::isfinite(static_cast<double>(frame.total.item())))
      throw std::runtime_error("non-finite loss at frame " + std::to_string(t));
    acc.l_sp = add(acc.l_sp, frame.l_sp);
    acc.l_iou = add(acc.l_iou, frame.l_iou);
    acc.l_pn = add(acc.l_pn, frame.l_pn);
    acc.l_po = add(acc.l_po, frame.l_po);
    acc.total = add(acc.total, frame.total);
    acc.n_pos += frame.n_pos;
    acc.n_pot += frame.n_pot;
  }
  return acc;
}

// One optimizer step on one batch: per-sequence frame-summed losses,
// averaged over the batch, one backward, one Adam update.
template <typename Real>
StepStats train_step(Detector<Real>& model, AdamState<Real>& adam,
                     const TrainBatch& batch, const TrainConfig& cfg,
                     std::int64_t iter) {
  if (batch.empty()) throw std::runtime_error("train_step: empty batch");
  StepStats stats;
  Tensor<Real> batch_loss = Tensor<Real>::scalar(Real(0));
  for (std::size_t m = 0; m < batch.size(); ++m) {
    LossBreakdown<Real> seq;
    try {
      seq = sequence_loss(model, batch[m], cfg.variant, cfg.screening, true,
                          mix64(cfg.seed, 0xd801ULL,
                                static_cast<std::uint64_t>(iter),
                                static_cast<std::uint64_t>(m)));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("iteration " + std::to_string(iter) +
                               ", batch member " + std::to_string(m) + ": " +
                               e.what());
    }
    batch_loss = add(batch_loss, seq.total);
    stats.l_sp += static_cast<double>(seq.l_sp.item());
    stats.l_iou += static_cast<double>(seq.l_iou.item());
    stats.l_pn += static_cast<double>(seq.l_pn.item());
    stats.l_po += static_cast<double>(seq.l_po.item());
    stats.n_pos += seq.n_pos;
    stats.n_pot += seq.n_pot;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  batch_loss = mul_scalar(batch_loss, static_cast<Real>(inv_b));
  stats.l_sp *= inv_b;
  stats.l_iou *= inv_b;
  stats.l_pn *= inv_b;
  stats.l_po *= inv_b;
  stats.total = static_cast<double>(batch_loss.item());
  if (!std::isfinite(stats.total))
    throw std::runtime_error("iteration " + std::to_string(iter) +
                             ": non-finite batch loss");
  model.params.zero_grads();
  backward(batch_loss);
  adam_step(model.params, adam, learning_rate(cfg, iter));
  return stats;
}

template <typename Real>
struct TrainResult {
  Detector<Real> model;
  AdamState<Real> adam;
  std::int64_t iterations = 0;
  std::string checkpoint_path;
};

// Full training run. `out_dir` receives train_log.csv (one CSV row per
// step: step,l_pn,l_po,l_sp,l_iou,total,n_pos,n_pot) and checkpoint.dcp;
// empty out_dir skips all file output. `resume_from` continues a previous
// run bit-identically.
template <typename Real>
TrainResult<Real> run_training(const TrainConfig& cfg,
                               const std::string& out_dir,
                               const std::string& resume_from = "") {
  cfg.validate();
  TrainResult<Real> result;
  result.model = Detector<Real>::create(cfg.model, cfg.seed);
  result.adam.init(result.model.params);
  std::int64_t start_iter = 0;
  if (!resume_from.empty())
    start_iter = load_checkpoint(resume_from, result.model.params,
                                 &result.adam, cfg.model.hash());
  if (start_iter > cfg.iterations)
    throw std::runtime_error("resume checkpoint is past the configured iterations");

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto mode = resume_from.empty() ? std::ios::trunc : std::ios::app;
    log.open(out_dir + "/train_log.csv", mode);
    if (!log) throw std::runtime_error("cannot write log in " + out_dir);
  }

  for (std::int64_t iter = start_iter; iter < cfg.iterations; ++iter) {
    const TrainBatch batch = make_batch(cfg, iter);
    const StepStats stats = train_step(result.model, result.adam, batch, cfg, iter);
    if (log.is_open()) {
      char row[256];
      std::snprintf(row, sizeof(row), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%lld,%lld\n",
                    static_cast<long long>(iter + 1), stats.l_pn, stats.l_po,
                    stats.l_sp, stats.l_iou, stats.total,
                    static_cast<long long>(stats.n_pos),
                    static_cast<long long>(stats.n_pot));
      log << row;
      log.flush();
    }
    if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
        (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.iterations) {
      save_checkpoint(out_dir + "/checkpoint_" + std::to_string(iter + 1) + ".dcp",
                      result.model.params, &result.adam, iter + 1,
                      cfg.model.hash());
    }
  }
  result.iterations = cfg.iterations;
  if (!out_dir.empty()) {
    result.checkpoint_path = out_dir + "/checkpoint.dcp";
    save_checkpoint(result.checkpoint_path, result.model.params, &result.adam,
                    cfg.iterations, cfg.model.hash());
  }
  return result;
}

}  // namespace deoe
