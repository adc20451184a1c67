#include "htsc/nn.hpp"

#include <cmath>

#include "htsc/errors.hpp"

namespace htsc {

template <typename T>
Tensor<T> ParamStore<T>::create(const std::string& name, Shape shape, Init init, Rng& rng,
                                double normal_std) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto t = Tensor<T>::zeros(shape, true);
  auto data = t.mutable_data();
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      for (auto& v : data) v = T(1);
      break;
    case Init::Normal:
      for (auto& v : data) v = static_cast<T>(normal_std * rng.normal());
      break;
    case Init::Xavier: {
      if (shape.size() != 2) throw ShapeError("xavier init needs a matrix: " + name);
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
  }
  params_.emplace(name, t);
  return t;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw IndexError("unknown parameter: " + name);
  return it->second;
}

template <typename T>
std::vector<std::string> ParamStore<T>::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_)
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(name);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [_, t] : params_) {
    auto copy = t;
    copy.zero_grad();
  }
}

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                  Rng& rng, bool zero_init)
    : weight(store.create(name + ".w", {in, out}, zero_init ? Init::Zeros : Init::Xavier, rng)),
      bias(store.create(name + ".b", {out}, Init::Zeros, rng)) {}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t width, Rng& rng)
    : gamma(store.create(name + ".g", {width}, Init::Ones, rng)),
      beta(store.create(name + ".b", {width}, Init::Zeros, rng)) {}

template <typename T>
FeedForward<T>::FeedForward(ParamStore<T>& store, const std::string& name, std::size_t in,
                            std::size_t hidden, std::size_t out, Rng& rng)
    : up(store, name + ".up", in, hidden, rng), down(store, name + ".down", hidden, out, rng) {}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& store, const std::string& name,
                                          std::size_t width, std::size_t heads_, Rng& rng,
                                          bool zero_output)
    : wq(store, name + ".q", width, width, rng),
      wk(store, name + ".k", width, width, rng),
      wv(store, name + ".v", width, width, rng),
      wo(store, name + ".o", width, width, rng, zero_output),
      heads(heads_) {
  if (heads == 0 || width % heads != 0)
    throw ConfigError("attention width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads (" + name + ")");
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& query, const Tensor<T>& key,
                                            const Tensor<T>& value, const AttnMask& mask,
                                            std::vector<T>* probs) const {
  return wo(attention(wq(query), wk(key), wv(value), heads, mask, probs));
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct FeedForward<float>;
template struct FeedForward<double>;
template struct MultiHeadAttention<float>;
template struct MultiHeadAttention<double>;

}  // namespace htsc
