// deoe: single entry point for the event-camera class-agnostic detection
// pipeline. Subcommands: synth, train, infer, eval, bench, gradcheck.
// Every subcommand writes <out>/manifest.json (resolved config, seed, input
// digests, planned outputs) before starting any long computation, so a run
// can be reproduced from the manifest alone.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deoe/encode.hpp"
#include "deoe/evalkit.hpp"
#include "deoe/events.hpp"
#include "deoe/gradcheck_suite.hpp"
#include "deoe/infer.hpp"
#include "deoe/manifest.hpp"
#include "deoe/overlay.hpp"
#include "deoe/threads.hpp"
#include "deoe/trainer.hpp"
#include "deoe/version.hpp"

namespace {

using namespace deoe;

// Applies `--set key=value` pairs, then canonical flag values (flags win).
void apply_overrides(KeyValueConfig& cfg, const std::vector<std::string>& sets,
                     const std::vector<std::pair<std::string, std::string>>& flags) {
  for (const auto& pair : sets) {
    const auto eq = pair.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::runtime_error("--set expects key=value, got: " + pair);
    cfg.set(pair.substr(0, eq), pair.substr(eq + 1));
  }
  for (const auto& [key, value] : flags) cfg.set(key, value);
}

SceneSpec parse_scene_spec(const KeyValueConfig& cfg) {
  SceneSpec spec;
  spec.width = static_cast<int>(cfg.get_int("width", spec.width));
  spec.height = static_cast<int>(cfg.get_int("height", spec.height));
  spec.duration_us = cfg.get_int("duration_us", spec.duration_us);
  spec.annotation_period_us =
      cfg.get_int("annotation_period_us", spec.annotation_period_us);
  spec.micro_step_us = cfg.get_int("micro_step_us", spec.micro_step_us);
  spec.event_threshold = cfg.get_double("event_threshold", spec.event_threshold);
  spec.noise_rate = cfg.get_double("noise_rate", spec.noise_rate);
  spec.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  spec.shapes.kinds = parse_kind_list(
      cfg.get_string("shape_kinds", "rectangle,disc,triangle"));
  spec.shapes.count_min = static_cast<int>(cfg.get_int("shapes_min", 1));
  spec.shapes.count_max = static_cast<int>(cfg.get_int("shapes_max", 4));
  spec.shapes.size_min = cfg.get_double("size_min", spec.shapes.size_min);
  spec.shapes.size_max = cfg.get_double("size_max", spec.shapes.size_max);
  spec.shapes.size_rules = parse_size_rules(cfg.get_string("size_rules", ""));
  spec.shapes.speed_min = cfg.get_double("speed_min", spec.shapes.speed_min);
  spec.shapes.speed_max = cfg.get_double("speed_max", spec.shapes.speed_max);
  spec.shapes.contrast = cfg.get_double("contrast", spec.shapes.contrast);
  spec.known_kinds = parse_kind_list(cfg.get_string("known_kinds", "rectangle"));
  return spec;
}

InferConfig parse_infer_config(const KeyValueConfig& cfg) {
  InferConfig ic;
  ic.score_threshold = cfg.get_double("score_threshold", ic.score_threshold);
  ic.nms_iou = cfg.get_double("nms_iou", ic.nms_iou);
  ic.max_detections =
      static_cast<int>(cfg.get_int("max_detections", ic.max_detections));
  return ic;
}

// Frame windows must cover every complete dt-interval of the stream; when
// the config does not pin a duration, derive it from the last event.
std::int64_t resolve_duration(const KeyValueConfig& cfg,
                              const EventStream& stream, std::int64_t dt_us) {
  if (cfg.has("duration_us")) return cfg.get_int("duration_us", 0);
  if (stream.events.empty()) return dt_us;
  // Smallest tick multiple covering the stream. Events exactly at the final
  // tick fall outside the half-open frame windows, matching how training
  // frames are cut.
  const std::int64_t t_last = stream.events.back().t;
  return (t_last + dt_us - 1) / dt_us * dt_us;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir,
              const std::vector<std::string>& sets,
              const std::vector<std::pair<std::string, std::string>>& flags) {
  KeyValueConfig cfg = KeyValueConfig::from_file(spec_path);
  apply_overrides(cfg, sets, flags);
  const SceneSpec spec = parse_scene_spec(cfg);
  const bool binary = cfg.get_string("events_format", "text") == "binary";
  cfg.reject_unknown_keys();

  std::filesystem::create_directories(out_dir);
  const std::string events_path =
      out_dir + (binary ? "/events.evb" : "/events.evt");
  const std::string ann_path = out_dir + "/annotations.jsonl";

  RunManifest manifest;
  manifest.command = "synth";
  manifest.config = cfg.entries();
  manifest.seed = spec.seed;
  manifest.add_input(spec_path);
  manifest.outputs = {events_path, ann_path};
  write_manifest(out_dir + "/manifest.json", manifest);

  const Scene scene = synth_scene(spec);
  save_events(scene.stream, events_path, binary);
  save_annotations(scene.annotations, ann_path);
  std::printf("synth: %zu events, %zu annotations -> %s\n",
              scene.stream.events.size(), scene.annotations.size(),
              out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume_from,
              const std::vector<std::string>& sets,
              const std::vector<std::pair<std::string, std::string>>& flags) {
  KeyValueConfig cfg = KeyValueConfig::from_file(config_path);
  apply_overrides(cfg, sets, flags);
  const TrainConfig tc = parse_train_config(cfg);
  cfg.reject_unknown_keys();

  std::filesystem::create_directories(out_dir);
  RunManifest manifest;
  manifest.command = "train";
  manifest.config = cfg.entries();
  manifest.seed = tc.seed;
  manifest.add_input(config_path);
  if (!resume_from.empty()) manifest.add_input(resume_from);
  manifest.outputs = {out_dir + "/checkpoint.dcp", out_dir + "/train_log.csv"};
  write_manifest(out_dir + "/manifest.json", manifest);

  const auto result = run_training<float>(tc, out_dir, resume_from);
  std::printf("train: %lld iterations -> %s\n",
              static_cast<long long>(result.iterations),
              result.checkpoint_path.c_str());
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& events_path,
              const std::string& config_path, const std::string& out_dir,
              const std::string& ann_path, bool overlay,
              const std::vector<std::string>& sets,
              const std::vector<std::pair<std::string, std::string>>& flags) {
  KeyValueConfig cfg = KeyValueConfig::from_file(config_path);
  apply_overrides(cfg, sets, flags);
  const ModelConfig mc = parse_model_config(cfg);
  const InferConfig ic = parse_infer_config(cfg);
  const std::int64_t dt_us = cfg.get_int("frame_dt_us", 10000);

  std::filesystem::create_directories(out_dir);
  const std::string pred_path = out_dir + "/predictions.jsonl";
  RunManifest manifest;
  manifest.command = "infer";
  manifest.config = cfg.entries();
  manifest.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  manifest.add_input(ckpt_path);
  manifest.add_input(events_path);
  manifest.add_input(config_path);
  if (!ann_path.empty()) manifest.add_input(ann_path);
  manifest.outputs = {pred_path};
  write_manifest(out_dir + "/manifest.json", manifest);

  auto model = Detector<float>::create(mc, 0);
  load_checkpoint<float>(ckpt_path, model.params, nullptr, mc.hash());
  const EventStream stream = load_events(events_path);
  const std::int64_t duration = resolve_duration(cfg, stream, dt_us);
  const auto frames = predict_stream(model, stream, dt_us, duration, ic);
  save_predictions(pred_path, frames);

  if (overlay) {
    std::vector<AnnotationRecord> anns;
    if (!ann_path.empty()) anns = load_annotations(ann_path);
    for (const auto& set : frames) {
      std::vector<Box> gt;
      for (const auto& a : anns)
        if (a.t == set.t) gt.push_back(a.box);
      const auto img =
          render_overlay(stream, set.t - dt_us, set.t, set.dets, gt);
      write_ppm(out_dir + "/overlay_" + std::to_string(set.t) + ".ppm", img);
    }
  }
  std::size_t total = 0;
  for (const auto& set : frames) total += set.dets.size();
  std::printf("infer: %zu frames, %zu detections -> %s\n", frames.size(),
              total, pred_path.c_str());
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& ann_path,
             const std::string& split_text, const std::string& out_dir) {
  const ClassSplit split = parse_class_split(split_text);

  std::filesystem::create_directories(out_dir);
  RunManifest manifest;
  manifest.command = "eval";
  manifest.config = {{"split", split_text}};
  manifest.add_input(pred_path);
  manifest.add_input(ann_path);
  manifest.outputs = {out_dir + "/report.txt", out_dir + "/report.jsonl"};
  write_manifest(out_dir + "/manifest.json", manifest);

  const EvalReport report = evaluate_run(pred_path, ann_path, split);
  const std::string table = format_report(report);
  std::fputs(table.c_str(), stdout);
  std::ofstream txt(out_dir + "/report.txt", std::ios::trunc);
  if (!txt) throw std::runtime_error("cannot write " + out_dir + "/report.txt");
  txt << table;
  save_report(out_dir + "/report.jsonl", report);
  return 0;
}

int cmd_bench(const std::string& ckpt_path, const std::string& events_path,
              const std::string& config_path, const std::string& out_dir,
              const std::vector<std::string>& sets,
              const std::vector<std::pair<std::string, std::string>>& flags) {
  KeyValueConfig cfg = KeyValueConfig::from_file(config_path);
  apply_overrides(cfg, sets, flags);
  const ModelConfig mc = parse_model_config(cfg);
  const InferConfig ic = parse_infer_config(cfg);
  const std::int64_t dt_us = cfg.get_int("frame_dt_us", 10000);

  std::filesystem::create_directories(out_dir);
  RunManifest manifest;
  manifest.command = "bench";
  manifest.config = cfg.entries();
  manifest.add_input(ckpt_path);
  manifest.add_input(events_path);
  manifest.add_input(config_path);
  manifest.outputs = {out_dir + "/bench.json"};
  write_manifest(out_dir + "/manifest.json", manifest);

  auto model = Detector<float>::create(mc, 0);
  load_checkpoint<float>(ckpt_path, model.params, nullptr, mc.hash());
  const EventStream stream = load_events(events_path);
  const std::int64_t duration = resolve_duration(cfg, stream, dt_us);

  // Encoding throughput, measured single-threaded over the full stream.
  std::vector<EventTensor> frames;
  std::size_t encoded_events = 0;
  const auto enc_start = std::chrono::steady_clock::now();
  {
    ThreadCapGuard serial(1);
    for (std::int64_t t_a = 0; t_a + dt_us <= duration; t_a += dt_us) {
      const auto view = window(stream, t_a, t_a + dt_us);
      encoded_events += view.size();
      frames.push_back(encode_window(view, t_a, t_a + dt_us, mc.bins,
                                     stream.height, stream.width));
    }
  }
  const double enc_s = std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - enc_start)
                           .count();
  const double events_per_s =
      enc_s > 0.0 ? static_cast<double>(encoded_events) / enc_s : 0.0;

  const BenchStats stats = bench_inference(model, frames, ic);
  std::printf("encode: %zu events in %.3f s (%.3g events/s)\n", encoded_events,
              enc_s, events_per_s);
  std::printf("infer:  %d frames at %dx%d, mean %.3f ms, p50 %.3f ms, p99 %.3f ms\n",
              stats.frames, stats.width, stats.height, stats.mean_ms,
              stats.p50_ms, stats.p99_ms);

  nlohmann::json j;
  j["encoded_events"] = encoded_events;
  j["encode_seconds"] = enc_s;
  j["encode_events_per_s"] = events_per_s;
  j["frames"] = stats.frames;
  j["height"] = stats.height;
  j["width"] = stats.width;
  j["mean_ms"] = stats.mean_ms;
  j["p50_ms"] = stats.p50_ms;
  j["p99_ms"] = stats.p99_ms;
  std::ofstream out(out_dir + "/bench.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + out_dir + "/bench.json");
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  RunManifest manifest;
  manifest.command = "gradcheck";
  manifest.outputs = {out_dir + "/gradcheck.txt"};
  write_manifest(out_dir + "/manifest.json", manifest);

  const auto cases = run_gradcheck_suite();
  std::ofstream log(out_dir + "/gradcheck.txt", std::ios::trunc);
  bool all_pass = true;
  for (const auto& c : cases) {
    char line[256];
    std::snprintf(line, sizeof(line), "%s %-16s max_rel_err=%.3g (tol %.3g)%s%s\n",
                  c.pass ? "PASS" : "FAIL", c.name.c_str(), c.max_rel_err,
                  c.tolerance, c.detail.empty() ? "" : " ",
                  c.detail.c_str());
    std::fputs(line, stdout);
    if (log) log << line;
    all_pass = all_pass && c.pass;
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-agnostic event-camera object detection pipeline"};
  app.set_version_flag("--version", std::string(deoe::kVersion));
  app.require_subcommand(1);

  // Canonical flags shared across subcommands; each maps onto a config key
  // and wins over both the config file and --set overrides.
  std::string out_dir;
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed_flag = 0;
  std::string variant_flag;
  std::int64_t potential_count_flag = 0;
  std::int64_t sequence_length_flag = 0;

  auto add_common = [&](CLI::App* sub, bool with_config) {
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--set", sets, "config override key=value (repeatable)");
    sub->add_option("--seed", seed_flag, "seed override");
    if (with_config)
      sub->add_option("--config", config_path, "config file")->required();
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic event scene");
  std::string synth_spec;
  synth->add_option("spec", synth_spec, "scene spec file")->required();
  add_common(synth, false);

  auto* train = app.add_subcommand("train", "train a detector on synthetic scenes");
  std::string resume_from;
  add_common(train, true);
  train->add_option("--variant", variant_flag,
                    "training variant (deoe|ca|ca_o|ca_p|oracle)");
  train->add_option("--potential-count", potential_count_flag,
                    "potential samples per frame");
  train->add_option("--sequence-length", sequence_length_flag,
                    "frames per training sequence");
  train->add_option("--resume", resume_from, "checkpoint to resume from");

  auto* infer = app.add_subcommand("infer", "run a checkpoint over an event file");
  std::string infer_ckpt, infer_events, infer_anns;
  bool overlay = false;
  infer->add_option("checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("events", infer_events, "event file")->required();
  add_common(infer, true);
  infer->add_option("--annotations", infer_anns,
                    "annotation file (overlay ground truth)");
  infer->add_flag("--overlay", overlay, "write per-frame PPM overlays");

  auto* eval = app.add_subcommand("eval", "score predictions against annotations");
  std::string eval_preds, eval_anns, split_text;
  eval->add_option("predictions", eval_preds, "prediction file")->required();
  eval->add_option("annotations", eval_anns, "annotation file")->required();
  eval->add_option("--split", split_text, "known:unknown class split")
      ->required();
  eval->add_option("--out", out_dir, "output directory")->required();

  auto* bench = app.add_subcommand("bench", "measure encode and inference latency");
  std::string bench_ckpt, bench_events;
  bench->add_option("checkpoint", bench_ckpt, "checkpoint file")->required();
  bench->add_option("events", bench_events, "event file")->required();
  add_common(bench, true);

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  std::vector<std::pair<std::string, std::string>> flags;
  auto flag_if = [&](const CLI::App* sub, const char* name,
                     const std::string& key, const std::string& value) {
    if (sub->count(name) > 0) flags.emplace_back(key, value);
  };

  try {
    if (synth->parsed()) {
      flag_if(synth, "--seed", "seed", std::to_string(seed_flag));
      return cmd_synth(synth_spec, out_dir, sets, flags);
    }
    if (train->parsed()) {
      flag_if(train, "--seed", "seed", std::to_string(seed_flag));
      flag_if(train, "--variant", "variant", variant_flag);
      flag_if(train, "--potential-count", "potential_count",
              std::to_string(potential_count_flag));
      flag_if(train, "--sequence-length", "sequence_length",
              std::to_string(sequence_length_flag));
      return cmd_train(config_path, out_dir, resume_from, sets, flags);
    }
    if (infer->parsed()) {
      flag_if(infer, "--seed", "seed", std::to_string(seed_flag));
      return cmd_infer(infer_ckpt, infer_events, config_path, out_dir,
                       infer_anns, overlay, sets, flags);
    }
    if (eval->parsed()) return cmd_eval(eval_preds, eval_anns, split_text, out_dir);
    if (bench->parsed()) {
      flag_if(bench, "--seed", "seed", std::to_string(seed_flag));
      return cmd_bench(bench_ckpt, bench_events, config_path, out_dir, sets,
                       flags);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(out_dir);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
