#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/events.hpp"

namespace deoe {

// Dense polarity/time histogram of an event window, flattened to (2T, H, W).
// Channel index = p*T + tau, row-major spatial layout. Entries are event
// counts, so the tensor is non-negative and sums to the window size.
struct EventTensor {
  int T = 0;
  int H = 0;
  int W = 0;
  std::int64_t t_a = 0;
  std::int64_t t_b = 0;
  std::vector<float> data;

  int channels() const { return 2 * T; }
  std::size_t size() const { return data.size(); }

  float& at(int p, int tau, int y, int x) {
    return data[((static_cast<std::size_t>(p) * T + tau) * H + y) * W + x];
  }
  float at(int p, int tau, int y, int x) const {
    return data[((static_cast<std::size_t>(p) * T + tau) * H + y) * W + x];
  }
};

// tau = floor((t_k - t_a) / (t_b - t_a) * T), computed in exact integer
// arithmetic; t_k == t_b lands in bin T (closed window boundary) and is
// clamped to T-1.
inline int bin_index(std::int64_t t_k, std::int64_t t_a, std::int64_t t_b,
                     int T) {
  if (t_a >= t_b) throw std::runtime_error("bin_index: requires t_a < t_b");
  if (T < 1) throw std::runtime_error("bin_index: requires T >= 1");
  if (t_k < t_a || t_k > t_b)
    throw std::runtime_error("bin_index: timestamp outside window");
  const std::int64_t tau = (t_k - t_a) * T / (t_b - t_a);
  return static_cast<int>(tau >= T ? T - 1 : tau);
}

inline EventTensor encode_window(std::span<const EventPoint> events,
                                 std::int64_t t_a, std::int64_t t_b, int T,
                                 int H, int W) {
  if (t_a >= t_b) throw std::runtime_error("encode_window: requires t_a < t_b");
  if (T < 1 || H < 1 || W < 1)
    throw std::runtime_error("encode_window: bad tensor dims");
  EventTensor out;
  out.T = T;
  out.H = H;
  out.W = W;
  out.t_a = t_a;
  out.t_b = t_b;
  out.data.assign(static_cast<std::size_t>(2) * T * H * W, 0.0f);
  const std::int64_t span = t_b - t_a;
  for (const EventPoint& e : events) {
    if (e.t < t_a || e.t > t_b)
      throw std::runtime_error("encode_window: event outside window");
    if (e.x >= W || e.y >= H || e.p > 1)
      throw std::runtime_error("encode_window: event outside sensor bounds");
    std::int64_t tau = (e.t - t_a) * T / span;
    if (tau >= T) tau = T - 1;
    out.data[((static_cast<std::size_t>(e.p) * T + tau) * H + e.y) * W + e.x] +=
        1.0f;
  }
  return out;
}

// Count-preserving 2x sum pooling.
inline EventTensor downsample2x(const EventTensor& t) {
  if (t.H % 2 != 0 || t.W % 2 != 0)
    throw std::runtime_error("downsample2x: H and W must be even");
  EventTensor out;
  out.T = t.T;
  out.H = t.H / 2;
  out.W = t.W / 2;
  out.t_a = t.t_a;
  out.t_b = t.t_b;
  out.data.assign(static_cast<std::size_t>(2) * t.T * out.H * out.W, 0.0f);
  const int C = t.channels();
  for (int c = 0; c < C; ++c) {
    const float* src = t.data.data() + static_cast<std::size_t>(c) * t.H * t.W;
    float* dst = out.data.data() + static_cast<std::size_t>(c) * out.H * out.W;
    for (int y = 0; y < out.H; ++y) {
      const float* r0 = src + static_cast<std::size_t>(2 * y) * t.W;
      const float* r1 = r0 + t.W;
      for (int x = 0; x < out.W; ++x) {
        dst[static_cast<std::size_t>(y) * out.W + x] =
            r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
      }
    }
  }
  return out;
}

// Debug dump: "DTN1" + u32 C,H,W (LE) + row-major f32 values (LE).
inline void save_tensor(const EventTensor& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_tensor: cannot open " + path);
  out.write("DTN1", 4);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(t.channels()),
                                 static_cast<std::uint32_t>(t.H),
                                 static_cast<std::uint32_t>(t.W)};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("save_tensor: write failed: " + path);
}

inline EventTensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_tensor: cannot open " + path);
  char magic[4];
  std::uint32_t dims[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in || std::memcmp(magic, "DTN1", 4) != 0)
    throw std::runtime_error("load_tensor: " + path + ": bad header");
  if (dims[0] % 2 != 0)
    throw std::runtime_error("load_tensor: " + path + ": odd channel count");
  EventTensor t;
  t.T = static_cast<int>(dims[0] / 2);
  t.H = static_cast<int>(dims[1]);
  t.W = static_cast<int>(dims[2]);
  t.data.resize(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!in) throw std::runtime_error("load_tensor: " + path + ": truncated");
  return t;
}

}  // namespace deoe
