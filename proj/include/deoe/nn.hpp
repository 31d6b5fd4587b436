#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/rng.hpp"
#include "deoe/tensor.hpp"

namespace deoe {

// ---------------------------------------------------------------------------
// Parameter registry. Everything trainable lives in named slots so the
// optimizer, checkpoints and gradient checks can walk a flat list.
// ---------------------------------------------------------------------------

template <typename Real>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor<Real>> params;

  Tensor<Real> add(const std::string& name, Shape shape,
                   std::vector<Real> values) {
    for (const auto& n : names)
      if (n == name) throw std::runtime_error("duplicate parameter: " + name);
    auto t = Tensor<Real>::leaf(std::move(shape), std::move(values), true);
    names.push_back(name);
    params.push_back(t);
    return t;
  }

  Tensor<Real>& get(const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return params[i];
    throw std::runtime_error("unknown parameter: " + name);
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += static_cast<std::int64_t>(p.values().size());
    return n;
  }

  void zero_grads() {
    for (auto& p : params) p.zero_grad();
  }
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight init; biases start at
// zero unless a layer overrides them.
template <typename Real>
std::vector<Real> init_uniform(std::int64_t count, std::int64_t fan_in,
                               Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> v(static_cast<std::size_t>(count));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return v;
}

// ---------------------------------------------------------------------------
// Conv layer: kernel + bias, registered as "<name>.w" / "<name>.b".
// ---------------------------------------------------------------------------

template <typename Real>
struct ConvLayer {
  Tensor<Real> w;
  Tensor<Real> b;
  int stride = 1;
  int padding = 0;

  static ConvLayer create(ParamStore<Real>& store, const std::string& name,
                          int out_ch, int in_ch, int k, int stride,
                          int padding, Rng& rng, Real bias_init = Real(0)) {
    ConvLayer layer;
    const std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * k * k;
    layer.w = store.add(name + ".w", {out_ch, in_ch, k, k},
                        init_uniform<Real>(
                            static_cast<std::int64_t>(out_ch) * in_ch * k * k,
                            fan_in, rng));
    layer.b = store.add(name + ".b", {out_ch},
                        std::vector<Real>(out_ch, bias_init));
    layer.stride = stride;
    layer.padding = padding;
    return layer;
  }

  Tensor<Real> apply(const Tensor<Real>& x) const {
    return bias_add(conv2d(x, w, stride, padding), b);
  }
};

// ---------------------------------------------------------------------------
// Convolutional gated recurrent cell. Update and reset gates see [x,h];
// the candidate sees [x, r*h]. All three are 3x3 stride-1 pad-1 convs, so
// the hidden state keeps the input's spatial size.
//
//   z  = sigmoid(Wz * [x,h] + bz)
//   r  = sigmoid(Wr * [x,h] + br)
//   hc = tanh(Wh * [x, r.h] + bh)
//   h' = (1-z).h + z.hc
// ---------------------------------------------------------------------------

template <typename Real>
struct ConvGruCell {
  ConvLayer<Real> wz, wr, wh;
  int hidden_ch = 0;

  static ConvGruCell create(ParamStore<Real>& store, const std::string& name,
                            int in_ch, int hidden_ch, Rng& rng) {
    ConvGruCell cell;
    cell.hidden_ch = hidden_ch;
    const int cat = in_ch + hidden_ch;
    cell.wz = ConvLayer<Real>::create(store, name + ".z", hidden_ch, cat, 3, 1, 1, rng);
    cell.wr = ConvLayer<Real>::create(store, name + ".r", hidden_ch, cat, 3, 1, 1, rng);
    cell.wh = ConvLayer<Real>::create(store, name + ".h", hidden_ch, cat, 3, 1, 1, rng);
    return cell;
  }

  Tensor<Real> step(const Tensor<Real>& x, const Tensor<Real>& h) const {
    if (h.shape().size() != 3 || h.shape()[0] != hidden_ch ||
        h.shape()[1] != x.shape()[1] || h.shape()[2] != x.shape()[2])
      throw std::runtime_error("recurrent step: state shape mismatch");
    auto xh = concat_channels(x, h);
    auto z = sigmoid(wz.apply(xh));
    auto r = sigmoid(wr.apply(xh));
    auto hc = tanh_op(wh.apply(concat_channels(x, mul(r, h))));
    auto one_minus_z = add_scalar(mul_scalar(z, Real(-1)), Real(1));
    return add(mul(one_minus_z, h), mul(z, hc));
  }

  Tensor<Real> initial_state(int H, int W) const {
    return Tensor<Real>::zeros({hidden_ch, H, W});
  }
};

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

template <typename Real>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;

  void init(const ParamStore<Real>& store) {
    m.clear();
    v.clear();
    for (const auto& p : store.params) {
      m.emplace_back(p.values().size(), Real(0));
      v.emplace_back(p.values().size(), Real(0));
    }
    step_count = 0;
  }
};

template <typename Real>
void adam_step(ParamStore<Real>& store, AdamState<Real>& state, double lr) {
  if (state.m.size() != store.params.size())
    throw std::runtime_error("adam_step: state not initialized for this store");
  state.step_count += 1;
  const double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t k = 0; k < store.params.size(); ++k) {
    auto& p = store.params[k].values();
    auto& g = store.params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double mhat = mi / b1t;
      const double vhat = vi / b2t;
      p[i] = static_cast<Real>(static_cast<double>(p[i]) -
                               lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Central-difference gradient check. The loss function must be pure: calling
// it twice with the same parameter values must produce the same scalar.
// Relative error uses max(|analytic|, |numeric|, 1) in the denominator so
// near-zero gradients compare absolutely.
// ---------------------------------------------------------------------------

template <typename Real>
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::int64_t checked = 0;
};

template <typename Real>
GradCheckResult<Real> grad_check(ParamStore<Real>& store,
                                 const std::function<Tensor<Real>()>& loss_fn,
                                 double step = 1e-5) {
  static_assert(sizeof(Real) >= 8, "grad_check requires 64-bit reals");
  store.zero_grads();
  auto loss = loss_fn();
  backward(loss);

  std::vector<std::vector<Real>> analytic;
  analytic.reserve(store.params.size());
  for (auto& p : store.params) analytic.push_back(p.grad());

  GradCheckResult<Real> result;
  NoGradGuard guard;
  for (std::size_t k = 0; k < store.params.size(); ++k) {
    auto& vals = store.params[k].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const Real saved = vals[i];
      vals[i] = saved + static_cast<Real>(step);
      const double up = static_cast<double>(loss_fn().item());
      vals[i] = saved - static_cast<Real>(step);
      const double down = static_cast<double>(loss_fn().item());
      vals[i] = saved;
      const double fd = (up - down) / (2.0 * step);
      const double an = static_cast<double>(analytic[k][i]);
      const double denom = std::max({std::abs(an), std::abs(fd), 1.0});
      const double rel = std::abs(fd - an) / denom;
      result.checked += 1;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = store.names[k];
        result.worst_index = static_cast<std::int64_t>(i);
        result.analytic = an;
        result.numeric = fd;
      }
    }
  }
  return result;
}

}  // namespace deoe
