#pragma once

#include <atomic>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/rng.hpp"

namespace deoe {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Runtime toggle for the NaN/Inf check after each forward op. On by default
// in debug builds.
inline std::atomic<bool>& finite_checks_flag() {
#ifdef NDEBUG
  static std::atomic<bool> flag{false};
#else
  static std::atomic<bool> flag{true};
#endif
  return flag;
}
inline void set_finite_checks(bool on) { finite_checks_flag().store(on); }

// Taping can be suspended (inference, detached rollouts); ops then produce
// value-only nodes with no parent links, so recurrent state does not chain
// graphs across frames.
inline bool& tape_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(tape_enabled()) { tape_enabled() = false; }
  ~NoGradGuard() { tape_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// One tape node. The tape is the DAG itself: parent links plus a global
// creation sequence number. Reverse topological order = decreasing seq.
template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

inline std::uint64_t next_node_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<Real>> node) : node_(std::move(node)) {}

  static Tensor leaf(Shape shape, std::vector<Real> values,
                     bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw std::runtime_error("tensor: value count != product of shape");
    auto node = std::make_shared<Node<Real>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad && tape_enabled();
    node->seq = next_node_seq();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)), Real(0));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, Real fill) {
    std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)), fill);
    return leaf(std::move(shape), std::move(v), false);
  }

  static Tensor scalar(Real v) { return leaf({1}, {v}, false); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const {
    return static_cast<std::int64_t>(node_->value.size());
  }
  std::vector<Real>& values() { return node_->value; }
  const std::vector<Real>& values() const { return node_->value; }
  std::vector<Real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }

  Real item() const {
    if (node_->value.size() != 1)
      throw std::runtime_error("item(): tensor is not scalar");
    return node_->value[0];
  }

  // Copies values into a fresh leaf with no parent links.
  Tensor detach() const {
    return leaf(node_->shape, node_->value, false);
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), Real(0)); }

  std::shared_ptr<Node<Real>> node_;
};

namespace detail {

template <typename Real>
inline void check_finite(const std::vector<Real>& v, const char* op) {
  if (!finite_checks_flag().load(std::memory_order_relaxed)) return;
  for (Real x : v) {
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("non-finite value after op ") + op);
  }
}

template <typename Real>
inline Tensor<Real> make_op(Shape shape, std::vector<Real> value,
                            std::vector<Tensor<Real>> inputs,
                            std::function<void(Node<Real>&)> backprop,
                            const char* name) {
  check_finite(value, name);
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = next_node_seq();
  if (tape_enabled()) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node_);
      node->backprop = std::move(backprop);
    }
  }
  return Tensor<Real>(std::move(node));
}

template <typename Real>
inline void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw std::runtime_error(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

// 8-lane strided accumulation; fixed combine order keeps reductions
// deterministic while letting the compiler vectorize.
template <typename Real>
inline Real dot_lanes(const Real* a, const Real* b, std::size_t n) {
  Real acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (; i < n; ++i) acc[i % 8] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename Real>
inline Real sum_lanes(const Real* a, std::size_t n) {
  Real acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l];
  }
  for (; i < n; ++i) acc[i % 8] += a[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_](Node<Real>& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] += self.grad[i];
        }
      },
      "add");
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_](Node<Real>& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] -= self.grad[i];
        }
      },
      "sub");
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_](Node<Real>& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] += self.grad[i] * pa->value[i];
        }
      },
      "mul");
}

template <typename Real>
Tensor<Real> divide(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "divide");
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] / b.values()[i];
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_](Node<Real>& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] / pb->value[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] -= self.grad[i] * pa->value[i] /
                           (pb->value[i] * pb->value[i]);
        }
      },
      "divide");
}

// Subgradient convention for ties: the first argument wins.
template <typename Real>
Tensor<Real> minimum(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "minimum");
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = std::min(a.values()[i], b.values()[i]);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_](Node<Real>& self) {
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (pa->value[i] <= pb->value[i]) {
            if (pa->requires_grad) pa->grad[i] += self.grad[i];
          } else if (pb->requires_grad) {
            pb->grad[i] += self.grad[i];
          }
        }
      },
      "minimum");
}

template <typename Real>
Tensor<Real> maximum(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "maximum");
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = std::max(a.values()[i], b.values()[i]);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_](Node<Real>& self) {
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (pa->value[i] >= pb->value[i]) {
            if (pa->requires_grad) pa->grad[i] += self.grad[i];
          } else if (pb->requires_grad) {
            pb->grad[i] += self.grad[i];
          }
        }
      },
      "maximum");
}

// ---------------------------------------------------------------------------
// Scalar and unary ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      },
      "add_scalar");
}

template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_, c](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * c;
      },
      "mul_scalar");
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = a.values()[i] > Real(0) ? a.values()[i] : Real(0);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (pa->value[i] > Real(0)) pa->grad[i] += self.grad[i];
      },
      "relu");
}

// x * sigmoid(x); the smooth ReLU-family nonlinearity used by the backbone.
template <typename Real>
Tensor<Real> silu(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Real s = Real(1) / (Real(1) + std::exp(-a.values()[i]));
    v[i] = a.values()[i] * s;
  }
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const Real x = pa->value[i];
          const Real s = Real(1) / (Real(1) + std::exp(-x));
          pa->grad[i] += self.grad[i] * (s + x * s * (Real(1) - s));
        }
      },
      "silu");
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = Real(1) / (Real(1) + std::exp(-a.values()[i]));
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const Real s = self.value[i];
          pa->grad[i] += self.grad[i] * s * (Real(1) - s);
        }
      },
      "sigmoid");
}

template <typename Real>
Tensor<Real> tanh_op(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.values()[i]);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const Real th = self.value[i];
          pa->grad[i] += self.grad[i] * (Real(1) - th * th);
        }
      },
      "tanh");
}

template <typename Real>
Tensor<Real> exp_op(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.values()[i]);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * self.value[i];
      },
      "exp");
}

template <typename Real>
Tensor<Real> log_op(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.values()[i]);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] / pa->value[i];
      },
      "log");
}

template <typename Real>
Tensor<Real> sqrt_op(const Tensor<Real>& a) {
  std::vector<Real> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.values()[i]);
  return detail::make_op<Real>(
      a.shape(), std::move(v), {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] / (Real(2) * self.value[i]);
      },
      "sqrt");
}

// ---------------------------------------------------------------------------
// Reductions, gather, concatenation
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
  const Real total = detail::sum_lanes(a.values().data(), a.values().size());
  return detail::make_op<Real>(
      {1}, {total}, {a},
      [pa = a.node_](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < pa->grad.size(); ++i)
          pa->grad[i] += self.grad[0];
      },
      "sum_all");
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
  if (a.values().empty()) throw std::runtime_error("mean_all: empty tensor");
  const Real n = static_cast<Real>(a.values().size());
  const Real total =
      detail::sum_lanes(a.values().data(), a.values().size()) / n;
  return detail::make_op<Real>(
      {1}, {total}, {a},
      [pa = a.node_, n](Node<Real>& self) {
        pa->ensure_grad();
        const Real g = self.grad[0] / n;
        for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
      },
      "mean_all");
}

// Flat-index gather; backward scatter-adds.
template <typename Real>
Tensor<Real> gather(const Tensor<Real>& a, const std::vector<int>& indices) {
  std::vector<Real> v(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= static_cast<int>(a.values().size()))
      throw std::runtime_error("gather: index out of range");
    v[i] = a.values()[idx];
  }
  return detail::make_op<Real>(
      {static_cast<int>(indices.size())}, std::move(v), {a},
      [pa = a.node_, indices](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < indices.size(); ++i)
          pa->grad[indices[i]] += self.grad[i];
      },
      "gather");
}

// (C1,H,W) ++ (C2,H,W) -> (C1+C2,H,W)
template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 ||
      a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2])
    throw std::runtime_error("concat_channels: incompatible shapes");
  Shape shape = {a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]};
  std::vector<Real> v;
  v.reserve(a.values().size() + b.values().size());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  const std::size_t na = a.values().size();
  return detail::make_op<Real>(
      std::move(shape), std::move(v), {a, b},
      [pa = a.node_, pb = b.node_, na](Node<Real>& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = na; i < self.grad.size(); ++i)
            pb->grad[i - na] += self.grad[i];
        }
      },
      "concat_channels");
}

// (C,H,W) -> (H,W) view of one channel.
template <typename Real>
Tensor<Real> slice_channel(const Tensor<Real>& a, int c) {
  if (a.shape().size() != 3 || c < 0 || c >= a.shape()[0])
    throw std::runtime_error("slice_channel: bad channel");
  const int H = a.shape()[1];
  const int W = a.shape()[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t off = static_cast<std::size_t>(c) * plane;
  std::vector<Real> v(a.values().begin() + off,
                      a.values().begin() + off + plane);
  return detail::make_op<Real>(
      {H, W}, std::move(v), {a},
      [pa = a.node_, off, plane](Node<Real>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < plane; ++i)
          pa->grad[off + i] += self.grad[i];
      },
      "slice_channel");
}

// ---------------------------------------------------------------------------
// Binary cross entropy. Predictions are clamped to [eps, 1-eps] before the
// log; targets are constants. Gradient is zero in the clamped region.
// ---------------------------------------------------------------------------

inline constexpr double kBceClamp = 1e-7;

template <typename Real>
Tensor<Real> bce(const Tensor<Real>& p, const std::vector<Real>& targets) {
  if (p.values().size() != targets.size())
    throw std::runtime_error("bce: prediction/target size mismatch");
  const Real eps = static_cast<Real>(kBceClamp);
  std::vector<Real> v(p.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Real pc =
        std::min(Real(1) - eps, std::max(eps, p.values()[i]));
    const Real y = targets[i];
    v[i] = -(y * std::log(pc) + (Real(1) - y) * std::log(Real(1) - pc));
  }
  return detail::make_op<Real>(
      p.shape(), std::move(v), {p},
      [pp = p.node_, targets, eps](Node<Real>& self) {
        pp->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const Real pv = pp->value[i];
          if (pv <= eps || pv >= Real(1) - eps) continue;
          pp->grad[i] += self.grad[i] * (pv - targets[i]) /
                         (pv * (Real(1) - pv));
        }
      },
      "bce");
}

template <typename Real>
Tensor<Real> bce(const Tensor<Real>& p, Real target) {
  return bce(p, std::vector<Real>(p.values().size(), target));
}

// ---------------------------------------------------------------------------
// Dropout. The mask is a pure function of the seed, so a forward pass is
// reproducible given (rate, seed) regardless of call order.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> dropout_apply(const Tensor<Real>& x, double rate, bool training,
                           std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::runtime_error("dropout_apply: rate must be in [0,1)");
  if (!training || rate == 0.0) {
    // Identity in eval mode; still a tape node so gradients flow.
    return mul_scalar(x, Real(1));
  }
  Rng rng(mix64(seed, 0xd80b0d1ULL));
  const Real scale = static_cast<Real>(1.0 / (1.0 - rate));
  std::vector<Real> mask(x.values().size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng.uniform() < rate ? Real(0) : scale;
  std::vector<Real> v(x.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] * mask[i];
  return detail::make_op<Real>(
      x.shape(), std::move(v), {x},
      [px = x.node_, mask](Node<Real>& self) {
        px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] * mask[i];
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// 2-D cross correlation. input (Ci,H,W), kernel (Co,Ci,kh,kw) ->
// (Co, (H+2p-kh)/s+1, (W+2p-kw)/s+1). Weight-stationary loops so the inner
// dimension stays contiguous for both forward and backward.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel,
                    int stride, int padding) {
  if (input.shape().size() != 3 || kernel.shape().size() != 4)
    throw std::runtime_error("conv2d: expects (C,H,W) input, (Co,Ci,kh,kw) kernel");
  if (stride < 1) throw std::runtime_error("conv2d: stride must be >= 1");
  const int Ci = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
  const int Co = kernel.shape()[0], Ck = kernel.shape()[1],
            kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (Ci != Ck)
    throw std::runtime_error("conv2d: channel mismatch: input " +
                             shape_str(input.shape()) + " kernel " +
                             shape_str(kernel.shape()));
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw std::runtime_error("conv2d: empty output");

  std::vector<Real> out(static_cast<std::size_t>(Co) * Ho * Wo, Real(0));
  const Real* in = input.values().data();
  const Real* wts = kernel.values().data();
  for (int co = 0; co < Co; ++co) {
    Real* oplane = out.data() + static_cast<std::size_t>(co) * Ho * Wo;
    for (int ci = 0; ci < Ci; ++ci) {
      const Real* iplane = in + static_cast<std::size_t>(ci) * H * W;
      const Real* wbase =
          wts + (static_cast<std::size_t>(co) * Ci + ci) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const Real w = wbase[ky * kw + kx];
          if (w == Real(0)) continue;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= H) continue;
            const Real* irow = iplane + static_cast<std::size_t>(iy) * W;
            Real* orow = oplane + static_cast<std::size_t>(oy) * Wo;
            int ox0 = 0, ox1 = Wo;
            // restrict to valid ix = ox*stride + kx - padding
            while (ox0 < Wo && ox0 * stride + kx - padding < 0) ++ox0;
            while (ox1 > ox0 && (ox1 - 1) * stride + kx - padding >= W) --ox1;
            const Real* ibase = irow + (ox0 * stride + kx - padding);
            if (stride == 1) {
              for (int ox = ox0; ox < ox1; ++ox)
                orow[ox] += w * ibase[ox - ox0];
            } else {
              for (int ox = ox0; ox < ox1; ++ox)
                orow[ox] += w * ibase[static_cast<std::size_t>(ox - ox0) * stride];
            }
          }
        }
      }
    }
  }

  return detail::make_op<Real>(
      {Co, Ho, Wo}, std::move(out), {input, kernel},
      [pin = input.node_, pk = kernel.node_, Ci, H, W, Co, kh, kw, Ho, Wo,
       stride, padding](Node<Real>& self) {
        const Real* gout = self.grad.data();
        if (pin->requires_grad) {
          pin->ensure_grad();
          Real* gin = pin->grad.data();
          const Real* wts = pk->value.data();
          for (int co = 0; co < Co; ++co) {
            const Real* gplane = gout + static_cast<std::size_t>(co) * Ho * Wo;
            for (int ci = 0; ci < Ci; ++ci) {
              Real* giplane = gin + static_cast<std::size_t>(ci) * H * W;
              const Real* wbase =
                  wts + (static_cast<std::size_t>(co) * Ci + ci) * kh * kw;
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                  const Real w = wbase[ky * kw + kx];
                  if (w == Real(0)) continue;
                  for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= H) continue;
                    Real* girow = giplane + static_cast<std::size_t>(iy) * W;
                    const Real* grow =
                        gplane + static_cast<std::size_t>(oy) * Wo;
                    int ox0 = 0, ox1 = Wo;
                    while (ox0 < Wo && ox0 * stride + kx - padding < 0) ++ox0;
                    while (ox1 > ox0 && (ox1 - 1) * stride + kx - padding >= W)
                      --ox1;
                    Real* gibase = girow + (ox0 * stride + kx - padding);
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox)
                        gibase[ox - ox0] += w * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox)
                        gibase[static_cast<std::size_t>(ox - ox0) * stride] +=
                            w * grow[ox];
                    }
                  }
                }
              }
            }
          }
        }
        if (pk->requires_grad) {
          pk->ensure_grad();
          Real* gw = pk->grad.data();
          const Real* in = pin->value.data();
          for (int co = 0; co < Co; ++co) {
            const Real* gplane = gout + static_cast<std::size_t>(co) * Ho * Wo;
            for (int ci = 0; ci < Ci; ++ci) {
              const Real* iplane = in + static_cast<std::size_t>(ci) * H * W;
              Real* gwbase =
                  gw + (static_cast<std::size_t>(co) * Ci + ci) * kh * kw;
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                  Real acc = Real(0);
                  for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= H) continue;
                    const Real* irow =
                        iplane + static_cast<std::size_t>(iy) * W;
                    const Real* grow =
                        gplane + static_cast<std::size_t>(oy) * Wo;
                    int ox0 = 0, ox1 = Wo;
                    while (ox0 < Wo && ox0 * stride + kx - padding < 0) ++ox0;
                    while (ox1 > ox0 && (ox1 - 1) * stride + kx - padding >= W)
                      --ox1;
                    if (ox1 <= ox0) continue;
                    if (stride == 1) {
                      acc += detail::dot_lanes(
                          grow + ox0, irow + (ox0 * stride + kx - padding),
                          static_cast<std::size_t>(ox1 - ox0));
                    } else {
                      const Real* ibase = irow + (ox0 * stride + kx - padding);
                      Real s = Real(0);
                      for (int ox = ox0; ox < ox1; ++ox)
                        s += grow[ox] *
                             ibase[static_cast<std::size_t>(ox - ox0) * stride];
                      acc += s;
                    }
                  }
                  gwbase[ky * kw + kx] += acc;
                }
              }
            }
          }
        }
      },
      "conv2d");
}

// Adds a per-channel bias to a (C,H,W) tensor.
template <typename Real>
Tensor<Real> bias_add(const Tensor<Real>& x, const Tensor<Real>& bias) {
  if (x.shape().size() != 3 || bias.shape().size() != 1 ||
      bias.shape()[0] != x.shape()[0])
    throw std::runtime_error("bias_add: bias must be (C) for (C,H,W) input");
  const int C = x.shape()[0];
  const std::size_t plane =
      static_cast<std::size_t>(x.shape()[1]) * x.shape()[2];
  std::vector<Real> v(x.values().size());
  for (int c = 0; c < C; ++c) {
    const Real b = bias.values()[c];
    const std::size_t off = static_cast<std::size_t>(c) * plane;
    for (std::size_t i = 0; i < plane; ++i) v[off + i] = x.values()[off + i] + b;
  }
  return detail::make_op<Real>(
      x.shape(), std::move(v), {x, bias},
      [px = x.node_, pb = bias.node_, C, plane](Node<Real>& self) {
        if (px->requires_grad) {
          px->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int c = 0; c < C; ++c) {
            pb->grad[c] += detail::sum_lanes(
                self.grad.data() + static_cast<std::size_t>(c) * plane, plane);
          }
        }
      },
      "bias_add");
}

template <typename Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) {
  return add(a, b);
}
template <typename Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) {
  return sub(a, b);
}
template <typename Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Reverse pass. Nodes reachable from the loss through grad-requiring parents
// are visited exactly once, in decreasing creation order (a valid reverse
// topological order since every op is created after its inputs).
// ---------------------------------------------------------------------------

template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.size() != 1)
    throw std::runtime_error("backward: loss must be scalar");
  if (!loss.requires_grad()) return;

  std::vector<Node<Real>*> order;
  std::vector<Node<Real>*> stack = {loss.node_.get()};
  // seq values are unique; use a sorted visited set keyed by pointer.
  std::vector<Node<Real>*> visited;
  auto was_visited = [&visited](Node<Real>* n) {
    const auto it = std::lower_bound(visited.begin(), visited.end(), n);
    return it != visited.end() && *it == n;
  };
  auto mark_visited = [&visited](Node<Real>* n) {
    visited.insert(std::lower_bound(visited.begin(), visited.end(), n), n);
  };
  while (!stack.empty()) {
    Node<Real>* n = stack.back();
    stack.pop_back();
    if (was_visited(n)) continue;
    mark_visited(n);
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && !was_visited(p.get())) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node<Real>* a, const Node<Real>* b) {
              return a->seq > b->seq;
            });

  loss.node_->ensure_grad();
  loss.node_->grad[0] = Real(1);
  for (Node<Real>* n : order) {
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

}  // namespace deoe
