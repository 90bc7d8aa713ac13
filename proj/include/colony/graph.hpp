#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "colony/layers.hpp"

namespace colony {

enum class LayerKind {
  input,
  conv3x3,
  maxpool2,
  upsample2,
  relu,
  batchnorm,
  concat,
  softmax_channels,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::upsample2: return "upsample2";
    case LayerKind::relu: return "relu";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::concat: return "concat";
    case LayerKind::softmax_channels: return "softmax_channels";
  }
  return "?";
}

/// A named tensor owned by the graph together with its gradient slot.
/// Non-trainable parameters (batchnorm running statistics) are skipped by the
/// optimizer and the gradient checker but still persisted.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

template <typename T>
struct LayerNode {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<int> inputs;  // predecessor node ids, always < own id
  std::vector<int> params;  // indices into Graph::parameters()

  // Forward caches.
  Tensor<T> output;
  std::vector<std::size_t> argmax;
  BatchNormCache<T> bn;
};

/// A layer DAG evaluated in insertion order. Nodes may only reference
/// earlier nodes, so the graph is acyclic by construction; the last node added
/// is the output.
template <typename T>
class Graph {
 public:
  int add_input(std::string name = "input") {
    LayerNode<T> node;
    node.kind = LayerKind::input;
    node.name = std::move(name);
    inputs_.push_back(static_cast<int>(nodes_.size()));
    return push(std::move(node));
  }

  /// Weights are left zero; call an initializer afterwards.
  int add_conv3x3(int in, int in_channels, int out_channels, std::string name,
                  bool with_bias = true) {
    LayerNode<T> node = make(LayerKind::conv3x3, name, {in});
    node.params.push_back(add_param(name + ".weight",
                                    Shape{out_channels, in_channels, 3, 3}));
    if (with_bias) {
      node.params.push_back(add_param(name + ".bias", Shape{out_channels, 1, 1, 1}));
    }
    return push(std::move(node));
  }

  int add_batchnorm(int in, int channels, std::string name) {
    LayerNode<T> node = make(LayerKind::batchnorm, name, {in});
    const Shape s{channels, 1, 1, 1};
    node.params.push_back(add_param(name + ".scale", s, T(1)));
    node.params.push_back(add_param(name + ".shift", s));
    node.params.push_back(add_param(name + ".running_mean", s, T(0), false));
    node.params.push_back(add_param(name + ".running_var", s, T(1), false));
    return push(std::move(node));
  }

  int add_relu(int in, std::string name) {
    return push(make(LayerKind::relu, std::move(name), {in}));
  }
  int add_maxpool2(int in, std::string name) {
    return push(make(LayerKind::maxpool2, std::move(name), {in}));
  }
  int add_upsample2(int in, std::string name) {
    return push(make(LayerKind::upsample2, std::move(name), {in}));
  }
  int add_concat(int a, int b, std::string name) {
    return push(make(LayerKind::concat, std::move(name), {a, b}));
  }
  int add_softmax(int in, std::string name) {
    return push(make(LayerKind::softmax_channels, std::move(name), {in}));
  }

  const std::vector<LayerNode<T>>& nodes() const { return nodes_; }
  const LayerNode<T>& node(int id) const { return nodes_.at(id); }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  int output_node() const { return static_cast<int>(nodes_.size()) - 1; }
  std::size_t num_inputs() const { return inputs_.size(); }

  BatchNormOptions& batchnorm_options() { return bn_options_; }

  /// Evaluates every node and returns the output node's value.
  const Tensor<T>& forward(std::span<const Tensor<T>> inputs, Mode mode) {
    if (inputs.size() != inputs_.size()) {
      throw ShapeError("graph expects " + std::to_string(inputs_.size()) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
    if (nodes_.empty()) throw StateError("forward on an empty graph");
    std::size_t next_input = 0;
    for (auto& node : nodes_) {
      node.output = evaluate(node, inputs, next_input, mode);
    }
    forward_done_ = true;
    return nodes_.back().output;
  }
  const Tensor<T>& forward(const Tensor<T>& input, Mode mode) {
    return forward(std::span<const Tensor<T>>(&input, 1), mode);
  }

  const Tensor<T>& output() const { return nodes_.back().output; }
  const Tensor<T>& value(int id) const { return nodes_.at(id).output; }

  /// Reverse-mode pass. `upstream` is the gradient of the loss w.r.t. the
  /// value of `seed` (the output node by default). Parameter gradients are
  /// accumulated; input gradients are overwritten.
  void backward(const Tensor<T>& upstream, std::optional<int> seed = {}) {
    if (!forward_done_) throw StateError("backward called before forward");
    const int start = seed.value_or(output_node());
    require_same_shape(upstream.shape(), nodes_.at(start).output.shape(),
                       "backward upstream");
    std::vector<Tensor<T>> grads(nodes_.size());
    grads[start] = upstream;
    input_grads_.assign(inputs_.size(), Tensor<T>());
    std::size_t input_slot = inputs_.size();
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      auto& node = nodes_[id];
      if (node.kind == LayerKind::input) --input_slot;
      if (id > start || grads[id].empty()) continue;
      propagate(node, grads[id], grads, input_slot);
      if (node.kind != LayerKind::input) grads[id] = Tensor<T>();
    }
  }

  /// Gradient w.r.t. the i-th graph input from the last backward pass.
  const Tensor<T>& input_grad(std::size_t i) const { return input_grads_.at(i); }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

  /// Debug hook used by negative-control tests: flips the sign of conv input
  /// gradients.
  void set_corrupt_conv_backward(bool on) { corrupt_conv_ = on; }

 private:
  LayerNode<T> make(LayerKind kind, std::string name, std::vector<int> in) {
    for (int id : in) {
      if (id < 0 || id >= static_cast<int>(nodes_.size())) {
        throw StateError("node '" + name + "' references unknown node " +
                         std::to_string(id));
      }
    }
    LayerNode<T> node;
    node.kind = kind;
    node.name = std::move(name);
    node.inputs = std::move(in);
    return node;
  }

  int push(LayerNode<T> node) {
    nodes_.push_back(std::move(node));
    forward_done_ = false;
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_param(std::string name, Shape s, T fill = T(0), bool trainable = true) {
    params_.push_back(Parameter<T>{std::move(name), Tensor<T>(s, fill),
                                   Tensor<T>(s), trainable});
    return static_cast<int>(params_.size()) - 1;
  }

  std::span<T> pspan(int idx) { return params_[idx].value.span(); }
  std::span<T> gspan(int idx) { return params_[idx].grad.span(); }

  Tensor<T> evaluate(LayerNode<T>& node, std::span<const Tensor<T>> inputs,
                     std::size_t& next_input, Mode mode) {
    auto in = [&](int k) -> const Tensor<T>& {
      return nodes_[node.inputs[k]].output;
    };
    switch (node.kind) {
      case LayerKind::input:
        return inputs[next_input++];
      case LayerKind::conv3x3: {
        std::span<const T> bias;
        if (node.params.size() > 1) bias = pspan(node.params[1]);
        return conv3x3(in(0), params_[node.params[0]].value, bias);
      }
      case LayerKind::maxpool2: {
        auto r = maxpool2(in(0));
        node.argmax = std::move(r.argmax);
        return std::move(r.output);
      }
      case LayerKind::upsample2:
        return upsample2(in(0));
      case LayerKind::relu:
        return relu(in(0));
      case LayerKind::batchnorm:
        return batchnorm<T>(in(0), pspan(node.params[0]), pspan(node.params[1]),
                            pspan(node.params[2]), pspan(node.params[3]), mode,
                            node.bn, bn_options_);
      case LayerKind::concat:
        return concat(in(0), in(1));
      case LayerKind::softmax_channels:
        return softmax_channels(in(0));
    }
    throw StateError("unknown layer kind");
  }

  void accumulate(std::vector<Tensor<T>>& grads, int id, Tensor<T> g) {
    if (grads[id].empty()) {
      grads[id] = std::move(g);
    } else {
      auto& dst = grads[id];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
  }

  void propagate(LayerNode<T>& node, const Tensor<T>& g,
                 std::vector<Tensor<T>>& grads, std::size_t input_slot) {
    auto in = [&](int k) -> const Tensor<T>& {
      return nodes_[node.inputs[k]].output;
    };
    switch (node.kind) {
      case LayerKind::input:
        input_grads_[input_slot] = g;
        return;
      case LayerKind::conv3x3: {
        std::span<T> gbias;
        if (node.params.size() > 1) gbias = gspan(node.params[1]);
        Tensor<T> gin;
        conv3x3_backward(in(0), params_[node.params[0]].value, g, &gin,
                         params_[node.params[0]].grad, gbias);
        if (corrupt_conv_) {
          for (auto& v : gin.storage()) v = -v;
        }
        accumulate(grads, node.inputs[0], std::move(gin));
        return;
      }
      case LayerKind::maxpool2:
        accumulate(grads, node.inputs[0],
                   maxpool2_backward(g, node.argmax, in(0).shape()));
        return;
      case LayerKind::upsample2:
        accumulate(grads, node.inputs[0], upsample2_backward(g));
        return;
      case LayerKind::relu:
        accumulate(grads, node.inputs[0], relu_backward(in(0), g));
        return;
      case LayerKind::batchnorm:
        accumulate(grads, node.inputs[0],
                   batchnorm_backward<T>(g, pspan(node.params[0]), node.bn,
                                         gspan(node.params[0]),
                                         gspan(node.params[1])));
        return;
      case LayerKind::concat: {
        auto [ga, gb] = concat_backward(g, in(0).shape(), in(1).shape());
        accumulate(grads, node.inputs[0], std::move(ga));
        accumulate(grads, node.inputs[1], std::move(gb));
        return;
      }
      case LayerKind::softmax_channels:
        accumulate(grads, node.inputs[0],
                   softmax_channels_backward(node.output, g));
        return;
    }
  }

  std::vector<LayerNode<T>> nodes_;
  std::vector<Parameter<T>> params_;
  std::vector<int> inputs_;
  std::vector<Tensor<T>> input_grads_;
  BatchNormOptions bn_options_{};
  bool forward_done_ = false;
  bool corrupt_conv_ = false;
};

/// He-style fan-in scaled uniform initialization of conv weights; biases and
/// batchnorm shifts start at zero, batchnorm scales at one.
template <typename T, typename Rng>
void init_he_uniform(Graph<T>& graph, Rng& rng) {
  for (auto& p : graph.parameters()) {
    const Shape& s = p.value.shape();
    if (p.name.ends_with(".weight")) {
      const double fan_in = static_cast<double>(s.c) * s.h * s.w;
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : p.value.storage()) v = static_cast<T>(dist(rng));
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  // Values at the worst entry.
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  double tolerance = 0;
  bool pass = false;
};

template <typename T>
struct LossResult {
  accum_t<T> loss = 0;
  Tensor<T> grad;  // w.r.t. the seed node's value
};

inline double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients of every trainable parameter entry and every
/// graph input against central differences (L(p+eps) - L(p-eps)) / 2eps.
/// `loss_fn` maps the graph output to a loss and the gradient w.r.t. the
/// value of node `seed` (defaults to the output node).
template <typename T, typename LossFn>
GradCheckReport grad_check(Graph<T>& graph, std::vector<Tensor<T>> inputs,
                           LossFn&& loss_fn, double epsilon, double tolerance,
                           Mode mode = Mode::train,
                           std::optional<int> seed = {}) {
  if (!(epsilon > 0)) throw std::invalid_argument("grad_check: epsilon must be > 0");
  using A = accum_t<T>;
  auto eval = [&]() -> A {
    return static_cast<A>(
        loss_fn(graph.forward(std::span<const Tensor<T>>(inputs), mode)).loss);
  };

  graph.zero_grad();
  {
    LossResult<T> r = loss_fn(graph.forward(std::span<const Tensor<T>>(inputs), mode));
    graph.backward(r.grad, seed);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  auto check_entries = [&](const std::string& name, AlignedVector<T>& values,
                           const AlignedVector<T>& analytic) {
    GradCheckEntry e{name};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = static_cast<T>(saved + epsilon);
      const A plus = eval();
      values[i] = static_cast<T>(saved - epsilon);
      const A minus = eval();
      values[i] = saved;
      const double numeric = static_cast<double>((plus - minus) / (2 * static_cast<A>(epsilon)));
      const double err = relative_error(static_cast<double>(analytic[i]), numeric);
      if (err > e.max_rel_error || i == 0) {
        e.max_rel_error = err;
        e.worst_index = i;
        e.worst_analytic = static_cast<double>(analytic[i]);
        e.worst_numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  };

  for (auto& p : graph.parameters()) {
    if (!p.trainable) continue;
    const AlignedVector<T> analytic = p.grad.storage();
    check_entries(p.name, p.value.storage(), analytic);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const AlignedVector<T> analytic = graph.input_grad(i).storage();
    check_entries("input" + std::to_string(i), inputs[i].storage(), analytic);
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

}  // namespace colony
