#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deoe/geometry.hpp"
#include "deoe/rng.hpp"

namespace deoe {

struct EventPoint {
  std::int64_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t p = 0;  // polarity: 1 = brightness up, 0 = down

  bool operator==(const EventPoint&) const = default;
};

struct EventStream {
  int width = 0;
  int height = 0;
  std::vector<EventPoint> events;  // sorted non-decreasing by t

  bool operator==(const EventStream&) const = default;
};

struct AnnotationRecord {
  std::int64_t t = 0;
  Box box;
  int class_id = 0;
  bool annotated = true;  // false = unknown class, hidden from training
};

enum class ShapeKind { rectangle = 0, disc = 1, triangle = 2 };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::disc: return "disc";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

inline ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "disc") return ShapeKind::disc;
  if (s == "triangle") return ShapeKind::triangle;
  throw std::runtime_error("unknown shape kind: " + s);
}

// Explicit shape placement. Velocities in px/s, positions in px at t=0.
struct ShapeInit {
  ShapeKind kind = ShapeKind::rectangle;
  double cx = 0.0, cy = 0.0;
  double w = 0.0, h = 0.0;
  double vx = 0.0, vy = 0.0;
  double contrast = 1.0;
};

// Per-kind override of the population size range.
struct SizeRule {
  ShapeKind kind = ShapeKind::rectangle;
  double size_min = 0.0;
  double size_max = 0.0;
};

struct ShapePopulation {
  std::vector<ShapeKind> kinds = {ShapeKind::rectangle, ShapeKind::disc,
                                  ShapeKind::triangle};
  int count_min = 1;
  int count_max = 4;
  double size_min = 12.0;  // px; side for rectangle/triangle, diameter for disc
  double size_max = 32.0;
  std::vector<SizeRule> size_rules;  // kinds without a rule use the range above
  double speed_min = 100.0;  // px/s
  double speed_max = 300.0;
  double contrast = 1.0;
};

struct SceneSpec {
  int width = 128;
  int height = 128;
  std::int64_t duration_us = 100000;
  ShapePopulation shapes;
  std::vector<ShapeKind> known_kinds = {ShapeKind::rectangle};
  double noise_rate = 0.0;  // events / pixel / second
  std::uint64_t seed = 0;
  std::int64_t annotation_period_us = 10000;  // 100 Hz
  std::int64_t micro_step_us = 500;
  double event_threshold = 0.3;
  // When non-empty these shapes are used verbatim instead of sampling from
  // the population (count and geometry included).
  std::vector<ShapeInit> fixed_shapes;
};

struct Scene {
  EventStream stream;
  std::vector<AnnotationRecord> annotations;
};

namespace detail {

inline Box shape_box(const ShapeInit& s, double t_sec) {
  const double cx = s.cx + s.vx * t_sec;
  const double cy = s.cy + s.vy * t_sec;
  return Box::from_center(cx, cy, s.w, s.h);
}

inline bool point_in_shape(const ShapeInit& s, double t_sec, double px,
                           double py) {
  const double cx = s.cx + s.vx * t_sec;
  const double cy = s.cy + s.vy * t_sec;
  const double dx = px - cx;
  const double dy = py - cy;
  switch (s.kind) {
    case ShapeKind::rectangle:
      return std::abs(dx) <= 0.5 * s.w && std::abs(dy) <= 0.5 * s.h;
    case ShapeKind::disc: {
      const double rx = 0.5 * s.w;
      const double ry = 0.5 * s.h;
      const double nx = dx / rx;
      const double ny = dy / ry;
      return nx * nx + ny * ny <= 1.0;
    }
    case ShapeKind::triangle: {
      // Isoceles, apex up: (cx, cy-h/2), (cx±w/2, cy+h/2).
      if (dy < -0.5 * s.h || dy > 0.5 * s.h) return false;
      const double frac = (dy + 0.5 * s.h) / s.h;  // 0 at apex, 1 at base
      return std::abs(dx) <= 0.5 * s.w * frac;
    }
  }
  return false;
}

inline void rasterize(const std::vector<ShapeInit>& shapes, double t_sec,
                      int width, int height, std::vector<float>& img) {
  std::fill(img.begin(), img.end(), 0.0f);
  for (const auto& s : shapes) {
    const Box b = shape_box(s, t_sec).clipped(width, height);
    const int x0 = static_cast<int>(std::floor(b.x_min));
    const int x1 = static_cast<int>(std::ceil(b.x_max()));
    const int y0 = static_cast<int>(std::floor(b.y_min));
    const int y1 = static_cast<int>(std::ceil(b.y_max()));
    for (int y = std::max(0, y0); y < std::min(height, y1); ++y) {
      for (int x = std::max(0, x0); x < std::min(width, x1); ++x) {
        if (point_in_shape(s, t_sec, x + 0.5, y + 0.5)) {
          float& cell = img[static_cast<std::size_t>(y) * width + x];
          cell = std::max(cell, static_cast<float>(s.contrast));
        }
      }
    }
  }
}

inline std::vector<ShapeInit> sample_shapes(const SceneSpec& spec, Rng& rng) {
  if (!spec.fixed_shapes.empty()) return spec.fixed_shapes;
  const ShapePopulation& pop = spec.shapes;
  const int count = static_cast<int>(
      rng.uniform_int(pop.count_min, std::max(pop.count_min, pop.count_max)));
  std::vector<ShapeInit> out;
  out.reserve(count);
  const double dur_sec = static_cast<double>(spec.duration_us) * 1e-6;
  for (int i = 0; i < count; ++i) {
    ShapeInit s;
    s.kind = pop.kinds[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(pop.kinds.size()) - 1))];
    double lo = pop.size_min;
    double hi = pop.size_max;
    for (const auto& rule : pop.size_rules) {
      if (rule.kind == s.kind) {
        lo = rule.size_min;
        hi = rule.size_max;
      }
    }
    s.w = rng.uniform(lo, hi);
    s.h = (s.kind == ShapeKind::disc) ? s.w : rng.uniform(lo, hi);
    const double speed = rng.uniform(pop.speed_min, pop.speed_max);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    s.vx = speed * std::cos(angle);
    s.vy = speed * std::sin(angle);
    s.contrast = pop.contrast;
    // Start position such that the shape stays fully inside the frame over
    // the whole duration (motion is linear, so endpoints suffice).
    const double dx = s.vx * dur_sec;
    const double dy = s.vy * dur_sec;
    const double cx_lo = 0.5 * s.w + std::max(0.0, -dx);
    const double cx_hi = spec.width - 0.5 * s.w - std::max(0.0, dx);
    const double cy_lo = 0.5 * s.h + std::max(0.0, -dy);
    const double cy_hi = spec.height - 0.5 * s.h - std::max(0.0, dy);
    if (cx_lo > cx_hi || cy_lo > cy_hi) {
      throw std::runtime_error(
          "synth_scene: shape cannot stay in frame for the scene duration "
          "(size/velocity too large for sensor)");
    }
    s.cx = rng.uniform(cx_lo, cx_hi);
    s.cy = rng.uniform(cy_lo, cy_hi);
    out.push_back(s);
  }
  return out;
}

}  // namespace detail

// Deterministic brightness-change scene generator. Shapes move linearly;
// an event fires wherever the per-pixel intensity change between consecutive
// micro-steps exceeds the threshold (p=1 rising, p=0 falling). Annotations
// are emitted for every shape at the annotation rate; only known kinds carry
// annotated=true.
inline Scene synth_scene(const SceneSpec& spec) {
  if (spec.duration_us <= 0)
    throw std::runtime_error("synth_scene: duration must be > 0");
  if (spec.width <= 0 || spec.height <= 0)
    throw std::runtime_error("synth_scene: sensor dims must be positive");
  if (spec.annotation_period_us <= 0 || spec.micro_step_us <= 0)
    throw std::runtime_error("synth_scene: periods must be positive");
  for (ShapeKind k : spec.known_kinds) {
    if (std::find(spec.shapes.kinds.begin(), spec.shapes.kinds.end(), k) ==
            spec.shapes.kinds.end() &&
        spec.fixed_shapes.empty()) {
      throw std::runtime_error("synth_scene: known_kinds must be a subset of "
                               "the population kinds");
    }
  }
  if (spec.shapes.size_min <= 0.0 || spec.shapes.size_max < spec.shapes.size_min)
    throw std::runtime_error("synth_scene: zero-area shapes rejected");
  for (const auto& rule : spec.shapes.size_rules) {
    if (rule.size_min <= 0.0 || rule.size_max < rule.size_min)
      throw std::runtime_error("synth_scene: zero-area shapes rejected");
  }

  Rng rng(mix64(spec.seed, 0x5ce11e5ULL));
  std::vector<ShapeInit> shapes = detail::sample_shapes(spec, rng);
  const double first_tick_sec =
      static_cast<double>(std::min(spec.annotation_period_us,
                                   spec.duration_us)) *
      1e-6;
  for (const auto& s : shapes) {
    if (s.w <= 0.0 || s.h <= 0.0)
      throw std::runtime_error("synth_scene: zero-area shapes rejected");
    const Box at_tick = detail::shape_box(s, first_tick_sec)
                            .clipped(spec.width, spec.height);
    if (at_tick.area() <= 0.0)
      throw std::runtime_error(
          "synth_scene: shape exits the frame before the first annotation");
  }

  Scene scene;
  scene.stream.width = spec.width;
  scene.stream.height = spec.height;

  const std::size_t npix =
      static_cast<std::size_t>(spec.width) * spec.height;
  std::vector<float> prev(npix), cur(npix);
  detail::rasterize(shapes, 0.0, spec.width, spec.height, prev);

  const double noise_per_step = spec.noise_rate * static_cast<double>(npix) *
                                static_cast<double>(spec.micro_step_us) * 1e-6;

  std::int64_t t = 0;
  while (t < spec.duration_us) {
    const std::int64_t t_next = std::min(t + spec.micro_step_us,
                                         spec.duration_us);
    // Noise events, timestamped inside the step.
    const int n_noise = rng.poisson(noise_per_step *
                                    static_cast<double>(t_next - t) /
                                    static_cast<double>(spec.micro_step_us));
    for (int i = 0; i < n_noise; ++i) {
      EventPoint e;
      e.t = rng.uniform_int(t, t_next - 1);
      e.x = static_cast<std::uint16_t>(rng.uniform_int(0, spec.width - 1));
      e.y = static_cast<std::uint16_t>(rng.uniform_int(0, spec.height - 1));
      e.p = rng.bernoulli(0.5) ? 1 : 0;
      scene.stream.events.push_back(e);
    }
    // Shape-motion events at the step boundary.
    if (!shapes.empty()) {
      detail::rasterize(shapes, static_cast<double>(t_next) * 1e-6, spec.width,
                        spec.height, cur);
      for (int y = 0; y < spec.height; ++y) {
        const std::size_t row = static_cast<std::size_t>(y) * spec.width;
        for (int x = 0; x < spec.width; ++x) {
          const float d = cur[row + x] - prev[row + x];
          if (d > spec.event_threshold || -d > spec.event_threshold) {
            EventPoint e;
            e.t = t_next;
            e.x = static_cast<std::uint16_t>(x);
            e.y = static_cast<std::uint16_t>(y);
            e.p = d > 0 ? 1 : 0;
            scene.stream.events.push_back(e);
          }
        }
      }
      std::swap(prev, cur);
    }
    t = t_next;
  }
  std::stable_sort(scene.stream.events.begin(), scene.stream.events.end(),
                   [](const EventPoint& a, const EventPoint& b) {
                     return a.t < b.t;
                   });

  for (std::int64_t tick = 0; tick <= spec.duration_us;
       tick += spec.annotation_period_us) {
    for (const auto& s : shapes) {
      AnnotationRecord rec;
      rec.t = tick;
      rec.box = detail::shape_box(s, static_cast<double>(tick) * 1e-6)
                    .clipped(spec.width, spec.height);
      rec.class_id = static_cast<int>(s.kind);
      rec.annotated = std::find(spec.known_kinds.begin(),
                                spec.known_kinds.end(),
                                s.kind) != spec.known_kinds.end();
      scene.annotations.push_back(rec);
    }
  }
  return scene;
}

// [t_a, t_b) slice of a stream, order preserved. Binary search on the sorted
// timestamps.
inline std::span<const EventPoint> window(const EventStream& stream,
                                          std::int64_t t_a, std::int64_t t_b) {
  if (t_a >= t_b) throw std::runtime_error("window: requires t_a < t_b");
  const auto lo = std::lower_bound(
      stream.events.begin(), stream.events.end(), t_a,
      [](const EventPoint& e, std::int64_t t) { return e.t < t; });
  const auto hi = std::lower_bound(
      lo, stream.events.end(), t_b,
      [](const EventPoint& e, std::int64_t t) { return e.t < t; });
  return {lo, hi};
}

// ---------------------------------------------------------------------------
// Stream files. Text: "EVT1 <w> <h>" header, then "t x y p" per line.
// Binary: "EVB1" + u16 width + u16 height, then 13-byte LE records
// (u64 t, u16 x, u16 y, u8 p).
// ---------------------------------------------------------------------------

namespace detail {

template <typename Int>
inline Int parse_int(const char* first, const char* last, int line_no,
                     const char* field) {
  Int value{};
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw std::runtime_error("event file: line " + std::to_string(line_no) +
                             ": bad " + field + " field");
  }
  return value;
}

}  // namespace detail

inline void save_events(const EventStream& stream, const std::string& path,
                        bool binary = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_events: cannot open " + path);
  if (binary) {
    out.write("EVB1", 4);
    const std::uint16_t w = static_cast<std::uint16_t>(stream.width);
    const std::uint16_t h = static_cast<std::uint16_t>(stream.height);
    out.write(reinterpret_cast<const char*>(&w), 2);
    out.write(reinterpret_cast<const char*>(&h), 2);
    for (const auto& e : stream.events) {
      const std::uint64_t t = static_cast<std::uint64_t>(e.t);
      out.write(reinterpret_cast<const char*>(&t), 8);
      out.write(reinterpret_cast<const char*>(&e.x), 2);
      out.write(reinterpret_cast<const char*>(&e.y), 2);
      out.write(reinterpret_cast<const char*>(&e.p), 1);
    }
  } else {
    out << "EVT1 " << stream.width << ' ' << stream.height << '\n';
    for (const auto& e : stream.events) {
      out << e.t << ' ' << e.x << ' ' << e.y << ' '
          << static_cast<int>(e.p) << '\n';
    }
  }
  if (!out) throw std::runtime_error("save_events: write failed: " + path);
}

inline EventStream load_events(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_events: cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4)
    throw std::runtime_error("load_events: " + path + ": truncated header");

  EventStream stream;
  if (std::memcmp(magic, "EVB1", 4) == 0) {
    std::uint16_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&w), 2);
    in.read(reinterpret_cast<char*>(&h), 2);
    if (!in) throw std::runtime_error("load_events: " + path +
                                      ": truncated header");
    stream.width = w;
    stream.height = h;
    std::int64_t offset = 8;
    char rec[13];
    while (in.read(rec, 13)) {
      EventPoint e;
      std::uint64_t t;
      std::memcpy(&t, rec, 8);
      std::memcpy(&e.x, rec + 8, 2);
      std::memcpy(&e.y, rec + 10, 2);
      e.p = static_cast<std::uint8_t>(rec[12]);
      e.t = static_cast<std::int64_t>(t);
      if (e.x >= stream.width || e.y >= stream.height || e.p > 1) {
        throw std::runtime_error("load_events: " + path + ": byte offset " +
                                 std::to_string(offset) +
                                 ": record out of sensor bounds");
      }
      if (!stream.events.empty() && e.t < stream.events.back().t) {
        throw std::runtime_error("load_events: " + path + ": byte offset " +
                                 std::to_string(offset) +
                                 ": timestamps not sorted");
      }
      stream.events.push_back(e);
      offset += 13;
    }
    if (in.gcount() != 0) {
      throw std::runtime_error("load_events: " + path + ": byte offset " +
                               std::to_string(offset) + ": truncated record");
    }
    return stream;
  }

  if (std::memcmp(magic, "EVT1", 4) != 0)
    throw std::runtime_error("load_events: " + path + ": bad magic");
  std::string rest;
  std::getline(in, rest);
  {
    std::istringstream hs(rest);
    if (!(hs >> stream.width >> stream.height) || stream.width <= 0 ||
        stream.height <= 0) {
      throw std::runtime_error("load_events: " + path + ": line 1: bad header");
    }
  }
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const char* s = line.data();
    const char* end = s + line.size();
    auto next_field = [&](const char* name) {
      while (s != end && *s == ' ') ++s;
      const char* f = s;
      while (s != end && *s != ' ') ++s;
      if (f == s)
        throw std::runtime_error("load_events: " + path + ": line " +
                                 std::to_string(line_no) + ": missing " +
                                 name);
      return std::pair<const char*, const char*>(f, s);
    };
    auto [t0, t1] = next_field("t");
    auto [x0, x1] = next_field("x");
    auto [y0, y1] = next_field("y");
    auto [p0, p1] = next_field("p");
    EventPoint e;
    try {
      e.t = detail::parse_int<std::int64_t>(t0, t1, line_no, "t");
      e.x = detail::parse_int<std::uint16_t>(x0, x1, line_no, "x");
      e.y = detail::parse_int<std::uint16_t>(y0, y1, line_no, "y");
      e.p = detail::parse_int<std::uint8_t>(p0, p1, line_no, "p");
    } catch (const std::runtime_error& err) {
      throw std::runtime_error("load_events: " + path + ": " + err.what());
    }
    if (e.t < 0 || e.x >= stream.width || e.y >= stream.height || e.p > 1) {
      throw std::runtime_error("load_events: " + path + ": line " +
                               std::to_string(line_no) +
                               ": record out of sensor bounds");
    }
    if (!stream.events.empty() && e.t < stream.events.back().t) {
      throw std::runtime_error("load_events: " + path + ": line " +
                               std::to_string(line_no) +
                               ": timestamps not sorted");
    }
    stream.events.push_back(e);
  }
  return stream;
}

// ---------------------------------------------------------------------------
// Annotation files: JSON Lines with fields t, x_min, y_min, w, h, class_id,
// annotated.
// ---------------------------------------------------------------------------

inline void save_annotations(const std::vector<AnnotationRecord>& anns,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_annotations: cannot open " + path);
  for (const auto& a : anns) {
    nlohmann::json j;
    j["t"] = a.t;
    j["x_min"] = a.box.x_min;
    j["y_min"] = a.box.y_min;
    j["w"] = a.box.w;
    j["h"] = a.box.h;
    j["class_id"] = a.class_id;
    j["annotated"] = a.annotated;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_annotations: write failed: " + path);
}

inline std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_annotations: cannot open " + path);
  std::vector<AnnotationRecord> anns;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      AnnotationRecord a;
      a.t = j.at("t").get<std::int64_t>();
      a.box.x_min = j.at("x_min").get<double>();
      a.box.y_min = j.at("y_min").get<double>();
      a.box.w = j.at("w").get<double>();
      a.box.h = j.at("h").get<double>();
      a.class_id = j.at("class_id").get<int>();
      a.annotated = j.at("annotated").get<bool>();
      anns.push_back(a);
    } catch (const nlohmann::json::exception& err) {
      throw std::runtime_error("load_annotations: " + path + ": line " +
                               std::to_string(line_no) + ": " + err.what());
    }
  }
  return anns;
}

}  // namespace deoe
