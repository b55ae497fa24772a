#pragma once

// Differentiable operations over evcmf::Tensor. Each op computes its forward
// value eagerly and registers a backward closure through Tensor::make_result.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "evcmf/tensor.hpp"

namespace evcmf {

namespace detail {

template <typename T>
std::span<T> parent_grad(Node<T>& self, std::size_t k) {
  return self.parents[k]->grad_buffer();
}

template <typename T>
bool parent_wants_grad(const Node<T>& self, std::size_t k) {
  return self.parents[k]->requires_grad;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Treats everything but the last axis as rows.
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  return {x.size() / cols, cols};
}

}  // namespace detail

/// Large negative logit used for blocked attention entries.
template <typename T>
constexpr T blocked_logit() {
  return T(-1e9);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::parent_wants_grad(self, k)) continue;
      auto g = detail::parent_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (detail::parent_wants_grad(self, 0)) {
      auto g = detail::parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::parent_wants_grad(self, 1)) {
      auto g = detail::parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (detail::parent_wants_grad(self, 0)) {
      auto g = detail::parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (detail::parent_wants_grad(self, 1)) {
      auto g = detail::parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

/// y[r, c] = x[r, c] * s[r]; s holds one value per row of x.
template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s) {
  const auto [rows, cols] = detail::rows_cols(x);
  detail::require(s.size() == rows, "row_scale: " + shape_str(s.shape()) +
                                        " does not provide one factor per row of " +
                                        shape_str(x.shape()));
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * s[r];
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, s}, [rows, cols](detail::Node<T>& self) {
        const auto& xv = self.parents[0]->data;
        const auto& sv = self.parents[1]->data;
        if (detail::parent_wants_grad(self, 0)) {
          auto g = detail::parent_grad(self, 0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * cols + c] * sv[r];
        }
        if (detail::parent_wants_grad(self, 1)) {
          auto g = detail::parent_grad(self, 1);
          for (std::size_t r = 0; r < rows; ++r) {
            T acc{0};
            for (std::size_t c = 0; c < cols; ++c) acc += self.grad[r * cols + c] * xv[r * cols + c];
            g[r] += acc;
          }
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    // Split by sign so exp never overflows.
    out[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * y * (T{1} - y);
    }
  });
}

/// Tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T{1} + std::tanh(k0 * (v + k1 * v * v * v)));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    const auto& xv = self.parents[0]->data;
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T u = k0 * (v + k1 * v * v * v);
      const T t = std::tanh(u);
      const T du = k0 * (T{1} + T{3} * k1 * v * v);
      const T d = T(0.5) * (T{1} + t) + T(0.5) * v * (T{1} - t * t) * du;
      g[i] += self.grad[i] * d;
    }
  });
}

/// Sum of all elements as a one-element tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (auto v : x.data()) acc += v;
  return Tensor<T>::make_result({1}, {acc}, {x}, [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

/// Elementwise arithmetic mean of same-shape tensors.
template <typename T>
Tensor<T> mean_of(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "mean_of: empty list");
  for (const auto& x : xs) {
    detail::require(x.shape() == xs.front().shape(),
                    "mean_of: shape mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(xs.front().shape()));
  }
  const T inv = T{1} / static_cast<T>(xs.size());
  std::vector<T> out(xs.front().size(), T{0});
  for (const auto& x : xs)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result(xs.front().shape(), std::move(out), xs, [inv](detail::Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!detail::parent_wants_grad(self, k)) continue;
      auto g = detail::parent_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(element_count(shape) == x.size(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return Tensor<T>::make_result(std::move(shape), x.values(), {x}, [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "transpose2d: expected rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor<T>::make_result({c, r}, std::move(out), {x}, [r, c](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

/// Concatenate along the last axis; leading extents must agree.
template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat_last: empty list");
  Shape lead(xs.front().shape().begin(), xs.front().shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape l(x.shape().begin(), x.shape().end() - 1);
    detail::require(l == lead, "concat_last: leading extents differ " + shape_str(x.shape()) +
                                   " vs " + shape_str(xs.front().shape()));
    widths.push_back(x.shape().back());
    total += x.shape().back();
  }
  const std::size_t rows = element_count(lead);
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto w = widths[k];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(xs[k].data().begin() + r * w, w, out.begin() + r * total + offset);
    offset += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), xs, [rows, total, widths](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const auto w = widths[k];
          if (detail::parent_wants_grad(self, k)) {
            auto g = detail::parent_grad(self, k);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
          }
          off += w;
        }
      });
}

/// Columns [start, start + count) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t count) {
  const auto [rows, cols] = detail::rows_cols(x);
  detail::require(count > 0 && start + count <= cols,
                  "slice_last: range out of bounds for " + shape_str(x.shape()));
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().begin() + r * cols + start, count, out.begin() + r * count);
  Shape shape = x.shape();
  shape.back() = count;
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), {x}, [rows, cols, start, count](detail::Node<T>& self) {
        auto g = detail::parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < count; ++c) g[r * cols + start + c] += self.grad[r * count + c];
      });
}

/// Rows [start, start + count) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require(x.rank() == 2 && count > 0 && start + count <= x.dim(0),
                  "slice_rows: range out of bounds for " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  std::vector<T> out(x.data().begin() + start * cols, x.data().begin() + (start + count) * cols);
  return Tensor<T>::make_result({count, cols}, std::move(out), {x},
                                [start, cols](detail::Node<T>& self) {
                                  auto g = detail::parent_grad(self, 0);
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    g[start * cols + i] += self.grad[i];
                                });
}

/// Stacks rank-2 tensors with equal widths along the first axis.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat_rows: empty list");
  const std::size_t cols = xs.front().shape().back();
  std::size_t rows = 0;
  std::vector<T> out;
  for (const auto& x : xs) {
    detail::require(x.rank() == 2 && x.dim(1) == cols,
                    "concat_rows: width mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(xs.front().shape()));
    rows += x.dim(0);
    out.insert(out.end(), x.data().begin(), x.data().end());
  }
  return Tensor<T>::make_result({rows, cols}, std::move(out), xs, [](detail::Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t n = self.parents[k]->data.size();
      if (detail::parent_wants_grad(self, k)) {
        auto g = detail::parent_grad(self, k);
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

/// Row gather: out[n] = table[ids[n]].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  detail::require(table.rank() == 2, "embedding: table must be rank 2, got " + shape_str(table.shape()));
  detail::require(!ids.empty(), "embedding: empty id list");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<T> out(ids.size() * cols);
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || static_cast<std::size_t>(ids[n]) >= rows) {
      throw InputError("embedding: id " + std::to_string(ids[n]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().begin() + ids[n] * cols, cols, out.begin() + n * cols);
  }
  return Tensor<T>::make_result({ids.size(), cols}, std::move(out), {table},
                                [ids, cols](detail::Node<T>& self) {
                                  auto g = detail::parent_grad(self, 0);
                                  for (std::size_t n = 0; n < ids.size(); ++n)
                                    for (std::size_t c = 0; c < cols; ++c)
                                      g[ids[n] * cols + c] += self.grad[n * cols + c];
                                });
}

// ---------------------------------------------------------------------------
// Products

/// Affine map over the last axis: x[..., in] * W[in, out] + b[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b = std::nullopt) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), out_w = w.dim(1);
  if (b && (b->size() != out_w)) {
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t rows = x.size() / in;
  std::vector<T> out(rows * out_w, T{0});
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = out.data() + r * out_w;
    if (b) std::copy_n(b->data().begin(), out_w, yr);
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = xd[r * in + i];
      const T* wi = wd + i * out_w;
      for (std::size_t o = 0; o < out_w; ++o) yr[o] += xi * wi[o];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_w;
  std::vector<Tensor<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), std::move(parents), [rows, in, out_w](detail::Node<T>& self) {
        const T* xd = self.parents[0]->data.data();
        const T* wd = self.parents[1]->data.data();
        const T* dy = self.grad.data();
        if (detail::parent_wants_grad(self, 0)) {
          T* dx = detail::parent_grad(self, 0).data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_w;
            for (std::size_t i = 0; i < in; ++i) {
              const T* wi = wd + i * out_w;
              T acc{0};
              for (std::size_t o = 0; o < out_w; ++o) acc += dyr[o] * wi[o];
              dx[r * in + i] += acc;
            }
          }
        }
        if (detail::parent_wants_grad(self, 1)) {
          T* dw = detail::parent_grad(self, 1).data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_w;
            for (std::size_t i = 0; i < in; ++i) {
              const T xi = xd[r * in + i];
              if (xi == T{0}) continue;
              T* dwi = dw + i * out_w;
              for (std::size_t o = 0; o < out_w; ++o) dwi[o] += xi * dyr[o];
            }
          }
        }
        if (self.parents.size() > 2 && detail::parent_wants_grad(self, 2)) {
          T* db = detail::parent_grad(self, 2).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_w; ++o) db[o] += dy[r * out_w + o];
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return linear(x, w, std::optional<Tensor<T>>(b));
}

/// Plain matrix product of rank-2 tensors.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return linear(a, b);
}

/// a[m, k] * b[n, k]^T -> [m, n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t c = 0; c < k; ++c) acc += ad[i * k + c] * bd[j * k + c];
      out[i * n + j] = acc;
    }
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    const T* ad = self.parents[0]->data.data();
    const T* bd = self.parents[1]->data.data();
    const T* dy = self.grad.data();
    if (detail::parent_wants_grad(self, 0)) {
      T* da = detail::parent_grad(self, 0).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dy[i * n + j];
          if (g == T{0}) continue;
          for (std::size_t c = 0; c < k; ++c) da[i * k + c] += g * bd[j * k + c];
        }
    }
    if (detail::parent_wants_grad(self, 1)) {
      T* db = detail::parent_grad(self, 1).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dy[i * n + j];
          if (g == T{0}) continue;
          for (std::size_t c = 0; c < k; ++c) db[j * k + c] += g * ad[i * k + c];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation and probabilities

/// Softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const auto [rows, cols] = detail::rows_cols(x);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * cols;
    T* yr = out.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [rows, cols](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * cols;
      const T* dy = self.grad.data() + r * cols;
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const auto [rows, cols] = detail::rows_cols(x);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * cols;
    T* yr = out.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(xr[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [rows, cols](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * cols;
      const T* dy = self.grad.data() + r * cols;
      T total{0};
      for (std::size_t c = 0; c < cols; ++c) total += dy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += dy[c] - std::exp(y[c]) * total;
    }
  });
}

/// Sum over listed rows of -log_probs[row, target].
template <typename T>
Tensor<T> nll_sum(const Tensor<T>& log_probs, const std::vector<std::size_t>& rows,
                  const std::vector<int>& targets) {
  detail::require(log_probs.rank() == 2, "nll_sum: expected rank 2, got " + shape_str(log_probs.shape()));
  detail::require(rows.size() == targets.size(), "nll_sum: rows/targets length mismatch");
  const std::size_t cols = log_probs.dim(1);
  T acc{0};
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= log_probs.dim(0) || targets[k] < 0 || static_cast<std::size_t>(targets[k]) >= cols) {
      throw InputError("nll_sum: position/target out of range");
    }
    acc -= log_probs[rows[k] * cols + targets[k]];
  }
  return Tensor<T>::make_result({1}, {acc}, {log_probs}, [rows, targets, cols](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t k = 0; k < rows.size(); ++k) g[rows[k] * cols + targets[k]] -= self.grad[0];
  });
}

/// Layer normalisation over the last axis with learned gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const auto [rows, cols] = detail::rows_cols(x);
  detail::require(gain.size() == cols && bias.size() == cols,
                  "layer_norm: gain/bias do not match width of " + shape_str(x.shape()));
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * cols;
    T mean{0};
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<T>(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(cols);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (xr[c] - mean) * inv_std[r];
      out[r * cols + c] = xhat[r * cols + c] * gain[c] + bias[c];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        const auto& gv = self.parents[1]->data;
        const T* dy = self.grad.data();
        if (detail::parent_wants_grad(self, 0)) {
          auto dx = detail::parent_grad(self, 0);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_g{0}, mean_gx{0};
            for (std::size_t c = 0; c < cols; ++c) {
              const T gh = dy[r * cols + c] * gv[c];
              mean_g += gh;
              mean_gx += gh * xhat[r * cols + c];
            }
            mean_g /= static_cast<T>(cols);
            mean_gx /= static_cast<T>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              const T gh = dy[r * cols + c] * gv[c];
              dx[r * cols + c] += inv_std[r] * (gh - mean_g - xhat[r * cols + c] * mean_gx);
            }
          }
        }
        if (detail::parent_wants_grad(self, 1)) {
          auto dg = detail::parent_grad(self, 1);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dg[c] += dy[r * cols + c] * xhat[r * cols + c];
        }
        if (detail::parent_wants_grad(self, 2)) {
          auto db = detail::parent_grad(self, 2);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) db[c] += dy[r * cols + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Video-grid operations on [t, h, w, c] tensors

/// Nearest-neighbour enlargement or block-average reduction to (out_h, out_w).
/// Each axis must scale by an integer factor in one direction.
template <typename T>
Tensor<T> resize_spatial(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.rank() == 4, "resize_spatial: expected [t,h,w,c], got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  auto factor = [](std::size_t from, std::size_t to, const char* axis) {
    // Returns (up, down) integer factors.
    if (to == 0) throw ShapeError(std::string("resize_spatial: zero target ") + axis);
    if (to >= from && to % from == 0) return std::pair<std::size_t, std::size_t>{to / from, 1};
    if (to < from && from % to == 0) return std::pair<std::size_t, std::size_t>{1, from / to};
    throw ShapeError(std::string("resize_spatial: non-integral scale on ") + axis + " (" +
                     std::to_string(from) + " -> " + std::to_string(to) + ")");
  };
  const auto [uh, dh] = factor(h, out_h, "height");
  const auto [uw, dw] = factor(w, out_w, "width");
  const T inv = T{1} / static_cast<T>(dh * dw);
  // Exactly one of up/down is active per axis, so each output cell reads a
  // single source window.
  auto src_rows = [&](std::size_t y) { return std::pair<std::size_t, std::size_t>{(y / uh) * dh, dh}; };
  auto src_cols = [&](std::size_t xx) { return std::pair<std::size_t, std::size_t>{(xx / uw) * dw, dw}; };
  std::vector<T> out(t * out_h * out_w * c, T{0});
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto [y0, ny] = src_rows(y);
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto [x0, nx] = src_cols(xx);
        T* o = out.data() + ((f * out_h + y) * out_w + xx) * c;
        // running mean, exact on constant blocks
        std::size_t n = 0;
        for (std::size_t a = 0; a < ny; ++a)
          for (std::size_t b = 0; b < nx; ++b) {
            const T* s = x.data().data() + ((f * h + y0 + a) * w + x0 + b) * c;
            const T count = static_cast<T>(++n);
            for (std::size_t k = 0; k < c; ++k) o[k] += (s[k] - o[k]) / count;
          }
      }
    }
  return Tensor<T>::make_result(
      {t, out_h, out_w, c}, std::move(out), {x},
      [t, h, w, c, out_h, out_w, uh, dh, uw, dw, inv](detail::Node<T>& self) {
        auto g = detail::parent_grad(self, 0);
        for (std::size_t f = 0; f < t; ++f)
          for (std::size_t y = 0; y < out_h; ++y) {
            const std::size_t y0 = (y / uh) * dh;
            for (std::size_t xx = 0; xx < out_w; ++xx) {
              const std::size_t x0 = (xx / uw) * dw;
              const T* dy = self.grad.data() + ((f * out_h + y) * out_w + xx) * c;
              for (std::size_t a = 0; a < dh; ++a)
                for (std::size_t b = 0; b < dw; ++b) {
                  T* s = g.data() + ((f * h + y0 + a) * w + x0 + b) * c;
                  for (std::size_t k = 0; k < c; ++k) s[k] += dy[k] * inv;
                }
            }
          }
      });
}

/// Mean over (kt, kh, kw) windows moved by (st, sh, sw), per channel.
template <typename T>
Tensor<T> avg_pool3d(const Tensor<T>& x, std::array<std::size_t, 3> kernel, std::array<std::size_t, 3> stride) {
  detail::require(x.rank() == 4, "avg_pool3d: expected [t,h,w,c], got " + shape_str(x.shape()));
  std::array<std::size_t, 3> in{x.dim(0), x.dim(1), x.dim(2)};
  std::array<std::size_t, 3> out_ext{};
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] == 0 || stride[a] == 0 || kernel[a] > in[a] || (in[a] - kernel[a]) % stride[a] != 0) {
      throw ShapeError("avg_pool3d: kernel/stride do not tile input " + shape_str(x.shape()));
    }
    out_ext[a] = (in[a] - kernel[a]) / stride[a] + 1;
  }
  const std::size_t c = x.dim(3);
  const T inv = T{1} / static_cast<T>(kernel[0] * kernel[1] * kernel[2]);
  auto idx = [&](std::size_t f, std::size_t y, std::size_t xx) { return ((f * in[1] + y) * in[2] + xx) * c; };
  std::vector<T> out(out_ext[0] * out_ext[1] * out_ext[2] * c, T{0});
  for (std::size_t f = 0; f < out_ext[0]; ++f)
    for (std::size_t y = 0; y < out_ext[1]; ++y)
      for (std::size_t xx = 0; xx < out_ext[2]; ++xx) {
        T* o = out.data() + ((f * out_ext[1] + y) * out_ext[2] + xx) * c;
        for (std::size_t a = 0; a < kernel[0]; ++a)
          for (std::size_t b = 0; b < kernel[1]; ++b)
            for (std::size_t d = 0; d < kernel[2]; ++d) {
              const T* s = x.data().data() + idx(f * stride[0] + a, y * stride[1] + b, xx * stride[2] + d);
              for (std::size_t k = 0; k < c; ++k) o[k] += s[k];
            }
        for (std::size_t k = 0; k < c; ++k) o[k] *= inv;
      }
  return Tensor<T>::make_result(
      {out_ext[0], out_ext[1], out_ext[2], c}, std::move(out), {x},
      [in, out_ext, kernel, stride, c, inv](detail::Node<T>& self) {
        auto g = detail::parent_grad(self, 0);
        for (std::size_t f = 0; f < out_ext[0]; ++f)
          for (std::size_t y = 0; y < out_ext[1]; ++y)
            for (std::size_t xx = 0; xx < out_ext[2]; ++xx) {
              const T* dy = self.grad.data() + ((f * out_ext[1] + y) * out_ext[2] + xx) * c;
              for (std::size_t a = 0; a < kernel[0]; ++a)
                for (std::size_t b = 0; b < kernel[1]; ++b)
                  for (std::size_t d = 0; d < kernel[2]; ++d) {
                    const std::size_t base =
                        (((f * stride[0] + a) * in[1] + y * stride[1] + b) * in[2] + xx * stride[2] + d) * c;
                    for (std::size_t k = 0; k < c; ++k) g[base + k] += dy[k] * inv;
                  }
            }
      });
}

/// Gathers each 2x2 spatial neighbourhood into the channel axis:
/// [t, h, w, c] -> [t, h/2, w/2, 4c], channel blocks ordered (0,0),(0,1),(1,0),(1,1).
template <typename T>
Tensor<T> space_to_depth2(const Tensor<T>& x) {
  detail::require(x.rank() == 4 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
                  "space_to_depth2: expected [t,h,w,c] with even h and w, got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(x.size());
  auto for_each = [=](auto&& fn) {
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          for (std::size_t q = 0; q < 4; ++q) {
            const std::size_t src = ((f * h + 2 * y + q / 2) * w + 2 * xx + q % 2) * c;
            const std::size_t dst = ((f * oh + y) * ow + xx) * 4 * c + q * c;
            fn(src, dst);
          }
  };
  for_each([&](std::size_t src, std::size_t dst) {
    std::copy_n(x.data().begin() + src, c, out.begin() + dst);
  });
  return Tensor<T>::make_result({t, oh, ow, 4 * c}, std::move(out), {x},
                                [for_each, c](detail::Node<T>& self) {
                                  auto g = detail::parent_grad(self, 0);
                                  for_each([&](std::size_t src, std::size_t dst) {
                                    for (std::size_t k = 0; k < c; ++k) g[src + k] += self.grad[dst + k];
                                  });
                                });
}

/// Zeroes every channel of the cells whose keep flag is false; other cells are
/// copied unchanged. keep holds one flag per (t, y, x) cell of [t, h, w, c].
template <typename T>
Tensor<T> zero_cells(const Tensor<T>& x, const std::vector<bool>& keep) {
  detail::require(x.rank() == 4, "zero_cells: expected [t,h,w,c], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(3);
  const std::size_t cells = x.size() / c;
  detail::require(keep.size() == cells, "zero_cells: keep mask has " + std::to_string(keep.size()) +
                                            " cells, tensor has " + std::to_string(cells));
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < cells; ++i)
    if (!keep[i]) std::fill_n(out.begin() + i * c, c, T{0});
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [keep, c](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i])
        for (std::size_t k = 0; k < c; ++k) g[i * c + k] += self.grad[i * c + k];
  });
}

/// Throws NumericError if any element is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& x, const std::string& what) {
  for (auto v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(what + ": non-finite value");
  }
}

}  // namespace evcmf
