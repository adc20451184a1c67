#include "htsc/optim.hpp"

#include <algorithm>
#include <cmath>

#include "htsc/errors.hpp"

namespace htsc {

template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               OptimState& state, const AdamConfig& config) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.moments.empty()) {
    state.moments.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.moments[i].m.assign(params[i].size(), 0.0);
      state.moments[i].v.assign(params[i].size(), 0.0);
    }
  }
  if (state.moments.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  double lr = config.lr;
  if (config.warmup_steps > 0)
    lr *= std::min(1.0, t / static_cast<double>(config.warmup_steps));
  const double wd = config.weight_decay;

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p];
    auto grad = grads[p];
    auto& mp = state.moments[p];
    if (mp.m.size() != theta.size() || (!grad.empty() && grad.size() != theta.size()))
      throw ShapeError("adam_step: buffer shape mismatch for parameter " + std::to_string(p));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double w = static_cast<double>(theta[i]);
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      if (!config.decoupled) g += wd * w;
      mp.m[i] = config.beta1 * mp.m[i] + (1.0 - config.beta1) * g;
      mp.v[i] = config.beta2 * mp.v[i] + (1.0 - config.beta2) * g * g;
      const double mhat = mp.m[i] / bc1;
      const double vhat = mp.v[i] / bc2;
      double updated = w;
      if (config.decoupled) updated -= lr * wd * w;
      updated -= lr * mhat / (std::sqrt(vhat) + config.eps);
      theta[i] = static_cast<T>(updated);
    }
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {}

template <typename T>
void Adam<T>::step() {
  std::vector<std::span<T>> p;
  std::vector<std::span<const T>> g;
  p.reserve(params_.size());
  g.reserve(params_.size());
  for (auto& t : params_) {
    p.push_back(t.mutable_data());
    g.push_back(t.has_grad() ? t.grad() : std::span<const T>{});
  }
  adam_step<T>(p, g, state_, config_);
}

template void adam_step<float>(std::span<const std::span<float>>,
                               std::span<const std::span<const float>>, OptimState&,
                               const AdamConfig&);
template void adam_step<double>(std::span<const std::span<double>>,
                                std::span<const std::span<const double>>, OptimState&,
                                const AdamConfig&);
template class Adam<float>;
template class Adam<double>;

}  // namespace htsc
