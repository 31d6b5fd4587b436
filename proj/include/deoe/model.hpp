#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/backbone.hpp"
#include "deoe/digest.hpp"
#include "deoe/encode.hpp"
#include "deoe/heads.hpp"
#include "deoe/nn.hpp"
#include "deoe/rng.hpp"

namespace deoe {

struct ModelConfig {
  int bins = 5;  // tensor time bins T; frame tensors carry 2T channels
  int height = 128;
  int width = 128;
  std::vector<int> channels = {16, 32, 64};
  std::vector<int> strides = {4, 2, 2};
  int head_mid_channels = 32;
  double dropout_rate = 0.1;
  bool dual_head = true;
  bool disent_head = true;

  BackboneConfig backbone() const {
    BackboneConfig b;
    b.in_channels = 2 * bins;
    b.channels = channels;
    b.strides = strides;
    return b;
  }

  HeadConfig head() const {
    HeadConfig h;
    h.in_channels = channels.back();
    h.mid_channels = head_mid_channels;
    h.dropout_rate = dropout_rate;
    h.dual_regressor = dual_head;
    h.disentangled = disent_head;
    return h;
  }

  void validate() const {
    if (bins < 1) throw std::runtime_error("model: bins must be >= 1");
    if (height < 1 || width < 1)
      throw std::runtime_error("model: image size must be positive");
    backbone().validate();
    const int s = backbone().total_stride();
    if (height % s != 0 || width % s != 0)
      throw std::runtime_error("model: image size must be divisible by total stride " +
                               std::to_string(s));
  }

  // Canonical serialization; its hash ties checkpoints to the architecture
  // that produced them.
  std::string canonical_string() const {
    std::ostringstream out;
    out << "bins=" << bins << ";h=" << height << ";w=" << width << ";ch=";
    for (std::size_t i = 0; i < channels.size(); ++i)
      out << (i ? "," : "") << channels[i];
    out << ";st=";
    for (std::size_t i = 0; i < strides.size(); ++i)
      out << (i ? "," : "") << strides[i];
    out << ";mid=" << head_mid_channels << ";drop=" << dropout_rate
        << ";dual=" << (dual_head ? 1 : 0)
        << ";disent=" << (disent_head ? 1 : 0);
    return out.str();
  }

  std::uint64_t hash() const { return fnv1a64(canonical_string()); }
};

// Converts an encoded frame into a tape leaf of the requested precision.
template <typename Real>
Tensor<Real> frame_tensor(const EventTensor& frame) {
  std::vector<Real> v(frame.data.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<Real>(frame.data[i]);
  return Tensor<Real>::leaf({frame.channels(), frame.H, frame.W},
                            std::move(v));
}

template <typename Real>
struct Detector {
  ModelConfig config;
  ParamStore<Real> params;
  Backbone<Real> backbone;
  DetectionHeads<Real> heads;
  PriorGrid grid;

  static Detector create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Detector d;
    d.config = cfg;
    Rng rng(mix64(seed, 0x1057a91eULL));
    d.backbone = Backbone<Real>::create(d.params, cfg.backbone(), rng);
    d.heads = DetectionHeads<Real>::create(d.params, cfg.head(), rng);
    const int s = cfg.backbone().total_stride();
    d.grid = PriorGrid{cfg.height / s, cfg.width / s, s};
    return d;
  }

  RecurrentState<Real> initial_state() const {
    return backbone.initial_state(config.height, config.width);
  }

  CellPredictions<Real> forward(const EventTensor& frame,
                                RecurrentState<Real>& state, bool training,
                                std::uint64_t dropout_seed) const {
    if (frame.H != config.height || frame.W != config.width ||
        frame.channels() != 2 * config.bins)
      throw std::runtime_error("model: frame tensor does not match config");
    auto x = frame_tensor<Real>(frame);
    auto features = backbone.forward(x, state);
    return heads.forward(features, grid, training, dropout_seed);
  }
};

}  // namespace deoe
