#pragma once

// Finite-difference battery: one small graph per layer kind, both losses, and
// a tiny U-Net end to end. Runs in long double so central differences are not
// swamped by loss rounding.

#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "colony/graph.hpp"
#include "colony/losses.hpp"
#include "colony/unet.hpp"

namespace colony {

struct GradCheckCase {
  std::string label;
  GradCheckReport report;
};

struct GradCheckSuite {
  std::vector<GradCheckCase> cases;
  double max_rel_error = 0;
  double tolerance = 0;
  bool pass = true;
};

namespace detail {

using GcReal = long double;

inline Tensor<GcReal> gc_random(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<GcReal> t(s);
  for (auto& v : t.storage()) v = static_cast<GcReal>(d(rng));
  return t;
}

inline std::vector<LabelMask> gc_labels(int n, int h, int w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 3);
  std::vector<LabelMask> out;
  for (int i = 0; i < n; ++i) {
    LabelMask m(h, w);
    for (auto& v : m.storage()) v = static_cast<std::uint8_t>(d(rng));
    out.push_back(std::move(m));
  }
  return out;
}

// L = sum r_i * y_i for a fixed random r drawn on first use.
struct ProjectionLoss {
  std::mt19937_64* rng;
  Tensor<GcReal> r;
  LossResult<GcReal> operator()(const Tensor<GcReal>& out) {
    if (r.empty()) r = gc_random(out.shape(), *rng);
    LossResult<GcReal> res{0, r};
    for (std::size_t i = 0; i < out.size(); ++i) res.loss += r[i] * out[i];
    return res;
  }
};

// Biases and shifts away from zero so no pre-activation sits on a relu kink.
inline void offset_biases(Graph<GcReal>& g, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& p : g.parameters()) {
    if (p.name.ends_with(".bias") || p.name.ends_with(".shift")) {
      for (auto& v : p.value.storage()) v = static_cast<GcReal>(d(rng));
    }
  }
}

}  // namespace detail

/// Runs every case on random 8x8 inputs. `epsilon` is the central-difference
/// step, `tolerance` the maximum allowed relative error.
inline GradCheckSuite run_gradcheck_suite(std::uint64_t seed = 1, double tolerance = 1e-3,
                                          double epsilon = 1e-6) {
  using namespace detail;
  GradCheckSuite suite;
  suite.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  auto record = [&](std::string label, GradCheckReport r) {
    suite.max_rel_error = std::max(suite.max_rel_error, r.max_rel_error);
    suite.pass = suite.pass && r.pass;
    suite.cases.push_back({std::move(label), std::move(r)});
  };

  for (LayerKind kind : {LayerKind::conv3x3, LayerKind::maxpool2, LayerKind::upsample2,
                         LayerKind::relu, LayerKind::batchnorm, LayerKind::concat,
                         LayerKind::softmax_channels}) {
    Graph<GcReal> g;
    const int in = g.add_input();
    std::vector<Tensor<GcReal>> inputs{gc_random({2, 3, 8, 8}, rng)};
    switch (kind) {
      case LayerKind::conv3x3: g.add_conv3x3(in, 3, 4, "conv"); break;
      case LayerKind::maxpool2: g.add_maxpool2(in, "pool"); break;
      case LayerKind::upsample2: g.add_upsample2(in, "up"); break;
      case LayerKind::relu: g.add_relu(in, "relu"); break;
      case LayerKind::batchnorm: g.add_batchnorm(in, 3, "bn"); break;
      case LayerKind::concat:
        g.add_concat(in, g.add_input("second"), "cat");
        inputs.push_back(gc_random({2, 2, 8, 8}, rng));
        break;
      case LayerKind::softmax_channels: g.add_softmax(in, "softmax"); break;
      case LayerKind::input: break;
    }
    init_he_uniform(g, rng);
    offset_biases(g, rng, -0.5, 0.5);
    record(to_string(kind), grad_check(g, inputs, ProjectionLoss{&rng, {}}, epsilon, tolerance));
  }

  // Losses: gradients are w.r.t. the logits feeding the softmax.
  {
    Graph<GcReal> g;
    const int logits = g.add_input("logits");
    g.add_softmax(logits, "softmax");
    const auto x = gc_random({2, 4, 8, 8}, rng, -2, 2);
    const auto labels = gc_labels(2, 8, 8, rng);
    auto wce = [&](const Tensor<GcReal>& p) {
      return weighted_ce(p, std::span<const LabelMask>(labels), ClassWeights{});
    };
    record("weighted_ce", grad_check(g, {x}, wce, epsilon, tolerance, Mode::train, logits));
    auto dice = [&](const Tensor<GcReal>& p) {
      return ce_soft_dice(p, std::span<const LabelMask>(labels), 0.5, 1.0);
    };
    record("ce_soft_dice", grad_check(g, {x}, dice, epsilon, tolerance, Mode::train, logits));
  }

  for (bool bn : {false, true}) {
    UNet<GcReal> net(UNetConfig{2, 4, bn}, rng());
    offset_biases(net.graph(), rng, 0.05, 0.2);
    const auto x = gc_random({1, 3, 8, 8}, rng, 0, 1);
    const auto labels = gc_labels(1, 8, 8, rng);
    auto loss = [&](const Tensor<GcReal>& p) {
      return weighted_ce(p, std::span<const LabelMask>(labels), ClassWeights{});
    };
    record(bn ? "unet_bn+weighted_ce" : "unet+weighted_ce",
           grad_check(net.graph(), {x}, loss, epsilon, tolerance, Mode::train, net.logits_node()));
  }
  return suite;
}

inline nlohmann::json to_json(const GradCheckSuite& s) {
  nlohmann::json j;
  j["pass"] = s.pass;
  j["max_rel_error"] = s.max_rel_error;
  j["tolerance"] = s.tolerance;
  auto& cases = j["cases"] = nlohmann::json::array();
  for (const auto& c : s.cases) {
    nlohmann::json e{{"case", c.label}, {"pass", c.report.pass},
                     {"max_rel_error", c.report.max_rel_error}};
    auto& ps = e["tensors"] = nlohmann::json::array();
    for (const auto& t : c.report.entries) {
      ps.push_back({{"name", t.name}, {"max_rel_error", t.max_rel_error}});
    }
    cases.push_back(std::move(e));
  }
  return j;
}

}  // namespace colony
