#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "deoe/loss.hpp"
#include "deoe/model.hpp"
#include "deoe/nn.hpp"
#include "deoe/trainer.hpp"

namespace deoe {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

// Two-frame scenario on a 1x2-cell grid with one positive, one potential,
// dropout active, recurrence and the temporal buffer exercised. Selections
// are frozen up front; the loss closures replay the forward pass against
// them, matching the constants the tape treats as labels.
namespace gradcheck_detail {

struct Scenario {
  Detector<double> model;
  std::vector<EventTensor> frames;
  std::vector<SampleSelection> selections;
  std::uint64_t seed = 7;

  std::uint64_t frame_seed(std::size_t t) const {
    return mix64(seed, 0xfade, static_cast<std::uint64_t>(t));
  }
};

inline Scenario build_scenario() {
  Scenario sc;
  ModelConfig cfg;
  cfg.bins = 2;
  cfg.height = 8;
  cfg.width = 16;
  cfg.channels = {4, 6};
  cfg.strides = {4, 2};
  cfg.head_mid_channels = 6;
  cfg.dropout_rate = 0.1;
  sc.model = Detector<double>::create(cfg, 41);

  // Move every parameter to a generic point. At fresh initialization the two
  // regressor branches nearly coincide, so finite differences straddle the
  // min/max kinks inside the branch-overlap IoU; a moderate jitter separates
  // the branch boxes by whole pixels while activations stay bounded.
  Rng jitter(mix64(sc.seed, 0x9e11aULL));
  for (auto& p : sc.model.params.params)
    for (auto& v : p.values()) v += jitter.uniform(-0.3, 0.3);

  Rng rng(mix64(sc.seed, 0xf00d));
  for (int t = 0; t < 2; ++t) {
    EventTensor frame;
    frame.T = cfg.bins;
    frame.H = cfg.height;
    frame.W = cfg.width;
    frame.t_a = t * 1000;
    frame.t_b = (t + 1) * 1000;
    frame.data.resize(static_cast<std::size_t>(2 * cfg.bins) * cfg.height *
                      cfg.width);
    for (auto& v : frame.data)
      v = static_cast<float>(rng.uniform_int(0, 3));
    sc.frames.push_back(std::move(frame));
  }

  const std::vector<Box> gt = {Box::from_center(4.0, 4.0, 7.0, 9.0)};
  ScreeningConfig screening;
  screening.potential_count = 1;

  auto state = sc.model.initial_state();
  HeadTemporalBuffer buffer;
  for (std::size_t t = 0; t < sc.frames.size(); ++t) {
    auto preds =
        sc.model.forward(sc.frames[t], state, true, sc.frame_seed(t));
    temporal_iou(preds, buffer);
    const auto samples =
        variant_assign(VariantMode::DEOE, preds, gt, &gt, screening);
    sc.selections.push_back(build_selection(preds, samples, gt));
  }
  return sc;
}

// Replays both frames and sums the chosen component across them.
inline Tensor<double> replay(
    const Scenario& sc,
    const std::function<Tensor<double>(const LossBreakdown<double>&)>& pick) {
  auto state = sc.model.initial_state();
  auto total = Tensor<double>::scalar(0.0);
  for (std::size_t t = 0; t < sc.frames.size(); ++t) {
    auto preds =
        sc.model.forward(sc.frames[t], state, true, sc.frame_seed(t));
    const auto breakdown = total_loss(preds, sc.selections[t]);
    total = add(total, pick(breakdown));
  }
  return total;
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckCase> run_gradcheck_suite() {
  std::vector<GradCheckCase> cases;
  const auto add_case = [&cases](const std::string& name,
                                 const GradCheckResult<double>& r,
                                 double tolerance) {
    GradCheckCase c;
    c.name = name;
    c.max_rel_err = r.max_rel_err;
    c.tolerance = tolerance;
    c.pass = r.max_rel_err < tolerance && r.checked > 0;
    if (!c.pass)
      c.detail = "worst " + r.worst_param + "[" +
                 std::to_string(r.worst_index) + "] analytic " +
                 std::to_string(r.analytic) + " numeric " +
                 std::to_string(r.numeric);
    cases.push_back(c);
  };

  {
    // 0.5*||x||^2: gradient is x itself.
    ParamStore<double> store;
    Rng rng(123);
    std::vector<double> init(16);
    for (auto& v : init) v = rng.uniform(-2.0, 2.0);
    auto x = store.add("x", {16}, init);
    add_case("quadratic",
             grad_check<double>(store, [x]() {
               return mul_scalar(sum_all(mul(x, x)), 0.5);
             }),
             1e-8);
  }
  {
    // BCE through sigmoid at random logits and soft targets.
    ParamStore<double> store;
    Rng rng(321);
    std::vector<double> init(12);
    for (auto& v : init) v = rng.uniform(-3.0, 3.0);
    auto z = store.add("z", {12}, init);
    std::vector<double> targets(12);
    for (auto& t : targets) t = rng.uniform();
    add_case("bce_sigmoid",
             grad_check<double>(store, [z, targets]() {
               return mean_all(bce(sigmoid(z), targets));
             }),
             1e-6);
  }
  {
    // Strided padded conv + bias + nonlinearity.
    ParamStore<double> store;
    Rng rng(99);
    auto layer = ConvLayer<double>::create(store, "conv", 3, 2, 3, 2, 1, rng);
    std::vector<double> xv(2 * 6 * 8);
    for (auto& v : xv) v = rng.uniform(-1.0, 1.0);
    auto x = Tensor<double>::leaf({2, 6, 8}, xv);
    add_case("conv2d",
             grad_check<double>(store, [&layer, x]() {
               return mean_all(silu(layer.apply(x)));
             }),
             1e-6);
  }
  {
    // Two recurrent steps through the gated cell.
    ParamStore<double> store;
    Rng rng(77);
    auto cell = ConvGruCell<double>::create(store, "gru", 2, 3, rng);
    std::vector<double> x1(2 * 4 * 4), x2(2 * 4 * 4);
    for (auto& v : x1) v = rng.uniform(-1.0, 1.0);
    for (auto& v : x2) v = rng.uniform(-1.0, 1.0);
    auto t1 = Tensor<double>::leaf({2, 4, 4}, x1);
    auto t2 = Tensor<double>::leaf({2, 4, 4}, x2);
    add_case("recurrent_cell",
             grad_check<double>(store, [&cell, t1, t2]() {
               auto h = cell.initial_state(4, 4);
               h = cell.step(t1, h);
               h = cell.step(t2, h);
               return mean_all(h);
             }),
             1e-6);
  }

  auto sc = gradcheck_detail::build_scenario();
  using BD = LossBreakdown<double>;
  const auto loss_case = [&](const std::string& name,
                             Tensor<double> BD::*member) {
    add_case(name,
             grad_check<double>(sc.model.params,
                                [&sc, member]() {
                                  return gradcheck_detail::replay(
                                      sc, [member](const BD& b) {
                                        return b.*member;
                                      });
                                }),
             1e-4);
  };
  loss_case("loss_sp", &BD::l_sp);
  loss_case("loss_iou", &BD::l_iou);
  loss_case("loss_pn", &BD::l_pn);
  loss_case("loss_po", &BD::l_po);
  loss_case("loss_total", &BD::total);
  return cases;
}

}  // namespace deoe
