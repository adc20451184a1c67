#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "htsc/nn.hpp"

namespace htsc {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// true: AdamW (decay applied to the weights directly);
  /// false: Adam with L2 decay folded into the gradient.
  bool decoupled = true;
  /// Linear warmup over this many steps; 0 disables it.
  std::uint64_t warmup_steps = 0;
};

/// Moment buffers for one parameter.
struct MomentPair {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimState {
  std::vector<MomentPair> moments;
  std::uint64_t step = 0;
};

/// One Adam/AdamW update over parallel spans of parameters and gradients.
/// Increments `state.step` before applying bias correction.
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               OptimState& state, const AdamConfig& config);

/// Adam(W) over the parameters of a store, reading their accumulated grads.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig config);

  /// Parameters without a gradient buffer are treated as having zero grad.
  void step();
  const OptimState& state() const { return state_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig config_;
  OptimState state_;
};

}  // namespace htsc
