#pragma once

#include <cstddef>
#include <vector>

#include "htsc/rng.hpp"
#include "htsc/tensor.hpp"

namespace htsc {

enum class Reduction { Mean, Sum };

/// Attention visibility. `Causal` lets query i see keys j <= i; `Prefix`
/// additionally lets every query see keys j < prefix_len (prefix-LM).
struct AttnMask {
  enum class Kind { None, Causal, Prefix };
  Kind kind = Kind::None;
  std::size_t prefix_len = 0;

  static AttnMask none() { return {}; }
  static AttnMask causal() { return {Kind::Causal, 0}; }
  static AttnMask prefix(std::size_t n) { return {Kind::Prefix, n}; }
  bool visible(std::size_t query, std::size_t key) const {
    switch (kind) {
      case Kind::None: return true;
      case Kind::Causal: return key <= query;
      case Kind::Prefix: return key < prefix_len || key <= query;
    }
    return true;
  }
};

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);

/// x [m x n] + row [n], broadcast over rows.
template <typename T> Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a [m x k] times b^T where b is [n x k].
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

/// x [m x in] * w [in x out] + b [out]; `b` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// tanh approximation.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

/// Row-wise softmax of a 2-D tensor.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);

/// Mean (or sum) over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<std::size_t>& targets,
                                Reduction reduction = Reduction::Mean);

/// Row-wise normalization over the last axis with affine gamma/beta [n].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

/// Rows `ids` of `table` [V x d]; gradient scatters back into the used rows.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count);

template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Inverted dropout; identity when `training` is false or rate is 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng);

/// Non-overlapping 2x2 max pooling of x [H x W x C]. Gradient goes to the
/// first maximal cell in scan order.
template <typename T> Tensor<T> maxpool2d(const Tensor<T>& x);

/// Scaled dot-product attention core over already-projected inputs,
/// q [Lq x d], k/v [Lk x d], split into `heads` column groups. When `probs`
/// is non-null it receives the attention weights [heads x Lq x Lk].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, const AttnMask& mask = {},
                    std::vector<T>* probs = nullptr);

/// Mean squared error against a constant target of the same shape.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace htsc
