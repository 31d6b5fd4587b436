#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/nn.hpp"
#include "deoe/tensor.hpp"

namespace deoe {

// Each stage downsamples with one strided conv then updates a recurrent
// state at the new resolution. Stride 4 uses a 5x5 kernel (pad 2), stride 2
// a 3x3 (pad 1), so output size is exactly input/stride.
struct BackboneConfig {
  int in_channels = 10;
  std::vector<int> channels = {16, 32, 64};
  std::vector<int> strides = {4, 2, 2};

  int total_stride() const {
    int s = 1;
    for (int st : strides) s *= st;
    return s;
  }

  void validate() const {
    if (channels.empty() || channels.size() != strides.size())
      throw std::runtime_error("backbone: channels/strides must be non-empty and equal length");
    if (in_channels < 1) throw std::runtime_error("backbone: in_channels must be >= 1");
    for (int c : channels)
      if (c < 1) throw std::runtime_error("backbone: channel counts must be >= 1");
    for (int s : strides)
      if (s != 2 && s != 4)
        throw std::runtime_error("backbone: supported strides are 2 and 4");
  }
};

// Hidden tensors for every stage, in stage order. Detached between
// sequences so graphs never span a truncation boundary.
template <typename Real>
struct RecurrentState {
  std::vector<Tensor<Real>> hidden;

  bool empty() const { return hidden.empty(); }

  RecurrentState detached() const {
    RecurrentState out;
    out.hidden.reserve(hidden.size());
    for (const auto& h : hidden) out.hidden.push_back(h.detach());
    return out;
  }
};

template <typename Real>
struct Backbone {
  BackboneConfig config;
  std::vector<ConvLayer<Real>> downs;
  std::vector<ConvGruCell<Real>> cells;

  static Backbone create(ParamStore<Real>& store, const BackboneConfig& cfg,
                         Rng& rng) {
    cfg.validate();
    Backbone bb;
    bb.config = cfg;
    int in_ch = cfg.in_channels;
    for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
      const int out_ch = cfg.channels[s];
      const int stride = cfg.strides[s];
      const int k = stride == 4 ? 5 : 3;
      const int pad = stride == 4 ? 2 : 1;
      const std::string base = "backbone.s" + std::to_string(s);
      bb.downs.push_back(ConvLayer<Real>::create(store, base + ".down", out_ch,
                                                 in_ch, k, stride, pad, rng));
      bb.cells.push_back(
          ConvGruCell<Real>::create(store, base + ".gru", out_ch, out_ch, rng));
      in_ch = out_ch;
    }
    return bb;
  }

  int out_channels() const { return config.channels.back(); }

  RecurrentState<Real> initial_state(int H, int W) const {
    if (H % config.total_stride() != 0 || W % config.total_stride() != 0)
      throw std::runtime_error("backbone: input size not divisible by total stride");
    RecurrentState<Real> state;
    int h = H, w = W;
    for (std::size_t s = 0; s < cells.size(); ++s) {
      h /= config.strides[s];
      w /= config.strides[s];
      state.hidden.push_back(cells[s].initial_state(h, w));
    }
    return state;
  }

  // Consumes one frame tensor, returns the top-stage feature map and the
  // updated state.
  Tensor<Real> forward(const Tensor<Real>& frame, RecurrentState<Real>& state) const {
    if (frame.shape().size() != 3 || frame.shape()[0] != config.in_channels)
      throw std::runtime_error("backbone: frame must be (" +
                               std::to_string(config.in_channels) + ",H,W), got " +
                               shape_str(frame.shape()));
    if (state.hidden.size() != cells.size())
      throw std::runtime_error("backbone: state stage count mismatch");
    Tensor<Real> x = frame;
    for (std::size_t s = 0; s < cells.size(); ++s) {
      x = silu(downs[s].apply(x));
      x = cells[s].step(x, state.hidden[s]);
      state.hidden[s] = x;
    }
    return x;
  }
};

}  // namespace deoe
