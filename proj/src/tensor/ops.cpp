#include "htsc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "htsc/errors.hpp"

namespace htsc {

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* __restrict arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* __restrict brow = b + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& xin = self.parents[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xin[i], self.data[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      auto& g = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  require_matrix(x, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (row.numel() != n) throw ShapeError("add_row: row length does not match columns");
  std::vector<T> out(x.numel());
  const auto xd = x.data(), rd = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] + rd[j];
  return make_result<T>("add_row", x.shape(), std::move(out), {x, row}, [m, n](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    if (wants_grad(self, 0))
      gemm_nt(self.grad.data(), self.parents[1]->data.data(),
              self.parents[0]->grad_buffer().data(), m, n, k);
    if (wants_grad(self, 1))
      gemm_tn(self.parents[0]->data.data(), self.grad.data(),
              self.parents[1]->grad_buffer().data(), m, k, n);
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  std::vector<T> out(m * n, T(0));
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    // dA = dC * B, dB = dC^T * A
    if (wants_grad(self, 0))
      gemm_nn(self.grad.data(), self.parents[1]->data.data(),
              self.parents[0]->grad_buffer().data(), m, n, k);
    if (wants_grad(self, 1))
      gemm_tn(self.grad.data(), self.parents[0]->data.data(),
              self.parents[1]->grad_buffer().data(), m, n, k);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result<T>("transpose", {n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k)
    throw ShapeError("linear: input width " + std::to_string(k) + " does not match weight " +
                     shape_str(w.shape()));
  if (b.defined() && b.numel() != n) throw ShapeError("linear: bias length mismatch");
  std::vector<T> out(m * n, T(0));
  if (b.defined()) {
    const auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bd.begin(), bd.end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  return make_result<T>("linear", {m, n}, std::move(out), {x, w, b}, [m, k, n](Node<T>& self) {
    if (wants_grad(self, 0))
      gemm_nt(self.grad.data(), self.parents[1]->data.data(),
              self.parents[0]->grad_buffer().data(), m, n, k);
    if (wants_grad(self, 1))
      gemm_tn(self.parents[0]->data.data(), self.grad.data(),
              self.parents[1]->grad_buffer().data(), m, k, n);
    if (wants_grad(self, 2)) {
      auto& g = self.parents[2]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(c * (v + a * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xd.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  return make_result<T>("softmax_rows", x.shape(), std::move(out), {x}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.data[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                                Reduction reduction) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) throw ShapeError("softmax_cross_entropy: one target per row required");
  std::vector<T> probs(m * n);
  const auto xd = logits.data();
  T total = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range for " + std::to_string(n) + " classes");
    const T* row = xd.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += (probs[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
    total += (mx + std::log(s)) - row[targets[i]];
  }
  const T factor = reduction == Reduction::Mean ? T(1) / T(m) : T(1);
  return make_result<T>(
      "softmax_cross_entropy", {1}, {total * factor}, {logits},
      [probs = std::move(probs), targets, factor, m, n](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const T up = self.grad[0] * factor;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += up * probs[i * n + j];
          g[i * n + targets[i]] -= up;
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) throw ShapeError("layer_norm: affine size mismatch");
  std::vector<T> out(m * n), xhat(m * n), rstd(m);
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xd.data() + i * n;
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(n);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), m, n](Node<T>& self) {
        const auto& gd = self.parents[1]->data;
        if (wants_grad(self, 1)) {
          auto& gg = self.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += self.grad[i * n + j] * xhat[i * n + j];
        }
        if (wants_grad(self, 2)) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
        }
        if (wants_grad(self, 0)) {
          auto& gx = self.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[i * n + j] * gd[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[i * n + j] * gd[j];
              gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  require_matrix(table, "embedding");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  std::vector<T> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows)
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " out of range for table of " +
                       std::to_string(rows) + " rows");
    std::copy_n(td.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  return make_result<T>("embedding", {ids.size(), d}, std::move(out), {table},
                        [ids, d](Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < ids.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j)
                              g[ids[i] * d + j] += self.grad[i * d + j];
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t d = x.dim(1);
  if (count == 0 || start + count > x.dim(0)) throw ShapeError("slice_rows: range out of bounds");
  std::vector<T> out(x.data().begin() + start * d, x.data().begin() + (start + count) * d);
  return make_result<T>("slice_rows", {count, d}, std::move(out), {x}, [start, d](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * d + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t d = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.dim(1) != d) throw ShapeError("concat_rows: column counts differ");
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>("concat_rows", {rows, d}, std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = self.parents[p]->data.size();
      if (wants_grad(self, p)) {
        auto& g = self.parents[p]->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<T> out(m * cols);
  std::size_t c0 = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pd = parts[p].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pd.begin() + i * widths[p], widths[p], out.begin() + i * cols + c0);
    c0 += widths[p];
  }
  return make_result<T>("concat_cols", {m, cols}, std::move(out), parts,
                        [widths, m, cols](Node<T>& self) {
                          std::size_t c0 = 0;
                          for (std::size_t p = 0; p < widths.size(); ++p) {
                            if (wants_grad(self, p)) {
                              auto& g = self.parents[p]->grad_buffer();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < widths[p]; ++j)
                                  g[i * widths[p] + j] += self.grad[i * cols + c0 + j];
                            }
                            c0 += widths[p];
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<T>("reshape", std::move(shape), x.to_vector(), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  return make_result<T>("sum", {1}, {s}, {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  const T inv = T(1) / T(x.numel());
  return make_result<T>("mean", {1}, {s * inv}, {x}, [inv](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < rate ? T(0) : keep_scale;
    out[i] = xd[i] * mask[i];
  }
  return make_result<T>("dropout", x.shape(), std::move(out), {x},
                        [mask = std::move(mask)](Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                        });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("maxpool2d: expected [H x W x C], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 || w % 2) throw ShapeError("maxpool2d: H and W must be even, got " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(oh * ow * c);
  std::vector<std::size_t> argmax(out.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * i) * w + 2 * j) * c + ch;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = ((2 * i + di) * w + (2 * j + dj)) * c + ch;
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t o = (i * ow + j) * c + ch;
        out[o] = xd[best];
        argmax[o] = best;
      }
  return make_result<T>("maxpool2d", {oh, ow, c}, std::move(out), {x},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                        });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const AttnMask& mask, std::vector<T>* probs_out) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != lk)
    throw ShapeError("attention: q/k/v widths or key counts differ");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  std::vector<T> probs(heads * lq * lk, T(0));
  std::vector<T> out(lq * d, T(0));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  std::vector<T> row(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.visible(i, j)) continue;
        T s = T(0);
        for (std::size_t c = 0; c < dh; ++c) s += qd[i * d + c0 + c] * kd[j * d + c0 + c];
        row[j] = s * sc;
        mx = std::max(mx, row[j]);
      }
      T* p = probs.data() + (h * lq + i) * lk;
      T z = T(0);
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.visible(i, j)) continue;
        p[j] = std::exp(row[j] - mx);
        z += p[j];
      }
      if (z == T(0)) continue;
      T* o = out.data() + i * d + c0;
      for (std::size_t j = 0; j < lk; ++j) {
        if (p[j] == T(0)) continue;
        p[j] /= z;
        const T pj = p[j];
        const T* vr = vd + j * d + c0;
        for (std::size_t c = 0; c < dh; ++c) o[c] += pj * vr[c];
      }
    }
  }
  if (probs_out) *probs_out = probs;
  return make_result<T>(
      "attention", {lq, d}, std::move(out), {q, k, v},
      [probs = std::move(probs), heads, lq, lk, d, dh, sc](Node<T>& self) {
        const T* qd = self.parents[0]->data.data();
        const T* kd = self.parents[1]->data.data();
        const T* vd = self.parents[2]->data.data();
        T* gq = wants_grad(self, 0) ? self.parents[0]->grad_buffer().data() : nullptr;
        T* gk = wants_grad(self, 1) ? self.parents[1]->grad_buffer().data() : nullptr;
        T* gv = wants_grad(self, 2) ? self.parents[2]->grad_buffer().data() : nullptr;
        const T* go = self.grad.data();
        std::vector<T> dp(lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < lq; ++i) {
            const T* p = probs.data() + (h * lq + i) * lk;
            const T* gorow = go + i * d + c0;
            T rowdot = T(0);
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == T(0)) {
                dp[j] = T(0);
                continue;
              }
              T s = T(0);
              const T* vr = vd + j * d + c0;
              for (std::size_t c = 0; c < dh; ++c) s += gorow[c] * vr[c];
              dp[j] = s;
              rowdot += p[j] * s;
              if (gv) {
                T* gvr = gv + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gvr[c] += p[j] * gorow[c];
              }
            }
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == T(0)) continue;
              const T ds = p[j] * (dp[j] - rowdot) * sc;
              if (gq) {
                const T* kr = kd + j * d + c0;
                T* gqr = gq + i * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gqr[c] += ds * kr[c];
              }
              if (gk) {
                const T* qr = qd + i * d + c0;
                T* gkr = gk + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gkr[c] += ds * qr[c];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.numel() != target.numel()) throw ShapeError("mse_loss: size mismatch");
  const auto pd = pred.data(), td = target.data();
  T s = T(0);
  for (std::size_t i = 0; i < pd.size(); ++i) s += (pd[i] - td[i]) * (pd[i] - td[i]);
  const T inv = T(1) / T(pd.size());
  std::vector<T> tgt(td.begin(), td.end());
  return make_result<T>("mse_loss", {1}, {s * inv}, {pred},
                        [tgt = std::move(tgt), inv](Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          const auto& p = self.parents[0]->data;
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += self.grad[0] * T(2) * (p[i] - tgt[i]) * inv;
                        });
}

#define HTSC_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                          \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const std::vector<std::size_t>&, \
                                           Reduction);                                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> embedding(const Tensor<T>&, const std::vector<std::size_t>&);            \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);                           \
  template Tensor<T> maxpool2d(const Tensor<T>&);                                             \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                               std::size_t, const AttnMask&, std::vector<T>*);                \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);

HTSC_INSTANTIATE_OPS(float)
HTSC_INSTANTIATE_OPS(double)
#undef HTSC_INSTANTIATE_OPS

}  // namespace htsc
