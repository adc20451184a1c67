#pragma once

#include <map>
#include <string>
#include <vector>

#include "htsc/ops.hpp"
#include "htsc/rng.hpp"
#include "htsc/tensor.hpp"

namespace htsc {

enum class Init { Zeros, Ones, Normal, Xavier };

/// Named trainable parameters, ordered by name. Names are dotted paths whose
/// leading components identify the owning module (`enc.vis.*`, `dec.*`, ...).
template <typename T>
class ParamStore {
 public:
  /// Registers a new parameter; duplicate names are rejected.
  Tensor<T> create(const std::string& name, Shape shape, Init init, Rng& rng,
                   double normal_std = 0.02);

  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, Tensor<T>>& all() const { return params_; }
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  std::size_t total_size() const;

  void zero_grad();

 private:
  std::map<std::string, Tensor<T>> params_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         Rng& rng, bool zero_init = false);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t width, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

/// Linear -> GELU -> Linear.
template <typename T>
struct FeedForward {
  Linear<T> up;
  Linear<T> down;

  FeedForward() = default;
  FeedForward(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
              std::size_t out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return down(gelu(up(x))); }
};

/// Multi-head attention with input and output projections. Scaling is
/// 1/sqrt(width/heads).
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  /// `zero_output` zero-initializes the output projection so that the
  /// module contributes exactly nothing until trained.
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, std::size_t width,
                     std::size_t heads, Rng& rng, bool zero_output = false);

  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                       const AttnMask& mask = {}, std::vector<T>* probs = nullptr) const;
};

}  // namespace htsc
