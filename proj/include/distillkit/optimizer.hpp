#pragma once

#include <cmath>
#include <vector>

#include "distillkit/network.hpp"

namespace dk {

template <class S>
struct SgdConfig {
  S lr = S(0.01);
  S momentum = S(0.9);
  S weight_decay = S(0.0005);  // applied to weight matrices only, not biases
};

/// Per-parameter velocity buffers for Nesterov momentum.
template <class S>
struct OptimState {
  std::vector<std::vector<Tensor<S>>> velocity;

  static OptimState make(const Network<S>& net) {
    OptimState st;
    st.velocity.resize(std::size_t(net.layer_count()));
    for (int i = 0; i < net.layer_count(); ++i)
      for (const auto& ps : param_shapes(net.layer(i)))
        st.velocity[std::size_t(i)].emplace_back(ps);
    return st;
  }
};

/// One Nesterov step:
///   d = g + wd * theta        (wd on weights only)
///   v <- mu * v - lr * d
///   theta <- theta + mu * v - lr * d
template <class S>
void sgd_step(Network<S>& net, OptimState<S>& state, const Gradients<S>& grads,
              const SgdConfig<S>& cfg) {
  if (!(cfg.lr > S(0))) throw NumericError("learning rate must be positive");
  if (cfg.momentum < S(0) || cfg.momentum >= S(1))
    throw NumericError("momentum must lie in [0,1)");
  if (cfg.weight_decay < S(0)) throw NumericError("weight decay must be non-negative");
  if (grads.params.size() != std::size_t(net.layer_count()))
    throw ShapeError("gradient layout does not match network");

  for (int i = 0; i < net.layer_count(); ++i) {
    auto& tensors = net.params_mut(i);
    auto& vel = state.velocity[std::size_t(i)];
    const auto& g = grads.params[std::size_t(i)];
    if (g.size() != tensors.size()) throw ShapeError("gradient layout does not match network");
    for (std::size_t j = 0; j < tensors.size(); ++j) {
      if (!g[j].same_shape(tensors[j])) throw ShapeError("gradient shape mismatch");
      S wd = j == 0 ? cfg.weight_decay : S(0);
      auto theta = tensors[j].vec();
      auto v = vel[j].vec();
      ColVec<S> d = g[j].vec() + wd * theta;
      v = cfg.momentum * v - cfg.lr * d;
      theta += cfg.momentum * v - cfg.lr * d;
      require_finite(tensors[j], "parameters after update");
    }
  }
}

/// Step schedule: base rate divided by `factor` every `every` epochs.
inline double lr_schedule(double base, double factor, int every, int epoch) {
  if (!(base > 0) || !(factor > 0) || every < 1 || epoch < 0)
    throw NumericError("bad learning-rate schedule parameters");
  return base / std::pow(factor, double(epoch / every));
}

}  // namespace dk
