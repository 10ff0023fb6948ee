#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vlmdet/core/kernels.hpp"
#include "vlmdet/core/tensor.hpp"

// Differentiable primitives. Every op treats its input as a matrix over the
// last axis (rows x cols) unless stated otherwise, and records a backward rule
// on the active tape when any input requires grad.
namespace vlmdet::ops {

namespace detail {

using vlmdet::detail::grad_sink;

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

template <class T>
void add_into(std::vector<T>* sink, std::span<const T> g) {
  if (sink == nullptr) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  kernels::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({m, n}, std::move(out), "matmul", {&a, &b},
                        [an, bn, m, k, n](const std::vector<T>& g) {
                          if (auto* da = detail::grad_sink(an))
                            kernels::gemm_nt_acc(g.data(), bn->data.data(), da->data(), m, n, k);
                          if (auto* db = detail::grad_sink(bn))
                            kernels::gemm_tn_acc(an->data.data(), g.data(), db->data(), m, k, n);
                        });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  kernels::transpose(a.data().data(), out.data(), r, c);
  auto an = a.node_ptr();
  return make_result<T>({c, r}, std::move(out), "transpose", {&a},
                        [an, r, c](const std::vector<T>& g) {
                          if (auto* da = detail::grad_sink(an)) {
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) (*da)[i * c + j] += g[j * r + i];
                          }
                        });
}

// x[n x in] * w[in x out] (+ bias[out] broadcast over rows).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  detail::require_matrix(w, "linear");
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (x.cols() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != out_dim) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  const std::size_t n = x.rows();
  std::vector<T> out(n * out_dim, T(0));
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * out_dim);
  }
  kernels::gemm_acc(x.data().data(), w.data().data(), out.data(), n, in, out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>(std::move(shape), std::move(out), "linear", {&x, &w, &bias},
                        [xn, wn, bn, n, in, out_dim](const std::vector<T>& g) {
                          if (auto* dx = detail::grad_sink(xn))
                            kernels::gemm_nt_acc(g.data(), wn->data.data(), dx->data(), n, out_dim, in);
                          if (auto* dw = detail::grad_sink(wn))
                            kernels::gemm_tn_acc(xn->data.data(), g.data(), dw->data(), n, in, out_dim);
                          if (auto* db = detail::grad_sink(bn)) {
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < out_dim; ++j) (*db)[j] += g[i * out_dim + j];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "add", {&a, &b},
                        [an, bn](const std::vector<T>& g) {
                          detail::add_into(detail::grad_sink(an), std::span<const T>(g));
                          detail::add_into(detail::grad_sink(bn), std::span<const T>(g));
                        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "sub", {&a, &b},
                        [an, bn](const std::vector<T>& g) {
                          detail::add_into(detail::grad_sink(an), std::span<const T>(g));
                          if (auto* db = detail::grad_sink(bn))
                            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
                        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                        [an, bn](const std::vector<T>& g) {
                          if (auto* da = detail::grad_sink(an))
                            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bn->data[i];
                          if (auto* db = detail::grad_sink(bn))
                            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * an->data[i];
                        });
}

// x[(k*r) x d] + t[r x d], with t repeated down the rows of x. A bias vector
// is the r == 1 case; positional embeddings over a batch are r == seq_len.
template <class T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& t) {
  const std::size_t d = x.cols();
  if (t.cols() != d || t.rows() == 0 || x.rows() % t.rows() != 0) {
    throw ShapeError("add_tiled: cannot tile " + shape_str(t.shape()) + " over " +
                     shape_str(x.shape()));
  }
  const std::size_t tn = t.numel();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + t[i % tn];
  auto xn = x.node_ptr(), tnode = t.node_ptr();
  return make_result<T>(x.shape(), std::move(out), "add_tiled", {&x, &t},
                        [xn, tnode, tn](const std::vector<T>& g) {
                          detail::add_into(detail::grad_sink(xn), std::span<const T>(g));
                          if (auto* dt = detail::grad_sink(tnode))
                            for (std::size_t i = 0; i < g.size(); ++i) (*dt)[i % tn] += g[i];
                        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "scale", {&a},
                        [an, s](const std::vector<T>& g) {
                          if (auto* da = detail::grad_sink(an))
                            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * s;
                        });
}

// a * s where s is a one-element tensor.
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: scale must have one element, got " + shape_str(s.shape()));
  const T sv = s[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  auto an = a.node_ptr(), sn = s.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "mul_scalar", {&a, &s},
                        [an, sn](const std::vector<T>& g) {
                          const T sv2 = sn->data[0];
                          if (auto* da = detail::grad_sink(an))
                            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * sv2;
                          if (auto* ds = detail::grad_sink(sn)) {
                            T acc = 0;
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * an->data[i];
                            (*ds)[0] += acc;
                          }
                        });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  auto an = a.node_ptr();
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>(a.shape(), std::move(out), "exp", {&a},
                        [an, saved](const std::vector<T>& g) {
                          if (auto* da = detail::grad_sink(an))
                            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * (*saved)[i];
                        });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "relu", {&a},
                        [an](const std::vector<T>& g) {
                          if (auto* da = detail::grad_sink(an))
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (an->data[i] > T(0)) (*da)[i] += g[i];
                        });
}

// GELU, tanh form:
//   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
template <class T>
T gelu_value(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T inner = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(inner));
}

template <class T>
T gelu_derivative(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  const T th = std::tanh(c * (x + k * x * x * x));
  return static_cast<T>(0.5) * (T(1) + th) +
         static_cast<T>(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  std::vector<T> out(a.numel());
  auto th = std::make_shared<std::vector<T>>(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a[i];
    const T t = std::tanh(c * (x + k * x * x * x));
    (*th)[i] = t;
    out[i] = static_cast<T>(0.5) * x * (T(1) + t);
  }
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), "gelu", {&a},
                        [an, th, c, k](const std::vector<T>& g) {
                          auto* da = detail::grad_sink(an);
                          if (!da) return;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T x = an->data[i], t = (*th)[i];
                            const T d = static_cast<T>(0.5) * (T(1) + t) +
                                        static_cast<T>(0.5) * x * (T(1) - t * t) * c *
                                            (T(1) + T(3) * k * x * x);
                            (*da)[i] += g[i] * d;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto an = a.node_ptr();
  return make_result<T>({}, {acc}, "sum", {&a}, [an](const std::vector<T>& g) {
    if (auto* da = detail::grad_sink(an))
      for (auto& v : *da) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  auto an = a.node_ptr();
  return make_result<T>({}, {acc * inv}, "mean", {&a}, [an, inv](const std::vector<T>& g) {
    if (auto* da = detail::grad_sink(an))
      for (auto& v : *da) v += g[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = x.cols();
  if (x.ndim() == 0 || n == 0) throw ShapeError("softmax over an empty axis");
  const std::size_t rows = x.rows();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  auto xn = x.node_ptr();
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), "softmax", {&x},
                        [xn, saved, rows, n](const std::vector<T>& g) {
                          auto* dx = detail::grad_sink(xn);
                          if (!dx) return;
                          const auto& y = *saved;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              (*dx)[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                          }
                        });
}

// Per-row standardization with biased variance, then gamma * xhat + beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(1e-5)) {
  const std::size_t d = x.cols();
  if (d == 0 || gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + ", gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  if (!(eps > T(0))) throw PreconditionError("layer_norm: eps must be positive");
  const std::size_t rows = x.rows();
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gamma[j] * h + beta[j];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return make_result<T>(x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
                        [xn, gn, bn, xhat, rstd, rows, d](const std::vector<T>& g) {
                          auto* dx = detail::grad_sink(xn);
                          auto* dg = detail::grad_sink(gn);
                          auto* db = detail::grad_sink(bn);
                          const auto& h = *xhat;
                          std::vector<T> dh(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gr = g.data() + r * d;
                            const T* hr = h.data() + r * d;
                            if (dg)
                              for (std::size_t j = 0; j < d; ++j) (*dg)[j] += gr[j] * hr[j];
                            if (db)
                              for (std::size_t j = 0; j < d; ++j) (*db)[j] += gr[j];
                            if (!dx) continue;
                            T mean_dh = 0, mean_dhh = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              dh[j] = gr[j] * gn->data[j];
                              mean_dh += dh[j];
                              mean_dhh += dh[j] * hr[j];
                            }
                            mean_dh /= static_cast<T>(d);
                            mean_dhh /= static_cast<T>(d);
                            const T rs = (*rstd)[r];
                            for (std::size_t j = 0; j < d; ++j)
                              (*dx)[r * d + j] += rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                          }
                        });
}

// Scales every row to unit Euclidean norm.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t d = x.cols(), rows = x.rows();
  std::vector<T> out(x.numel());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T nrm = std::max(std::sqrt(ss), static_cast<T>(1e-12));
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[j] / nrm;
  }
  auto xn = x.node_ptr();
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), "l2_normalize", {&x},
                        [xn, saved, norms, rows, d](const std::vector<T>& g) {
                          auto* dx = detail::grad_sink(xn);
                          if (!dx) return;
                          const auto& y = *saved;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T dot = 0;
                            for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                            const T inv = T(1) / (*norms)[r];
                            for (std::size_t j = 0; j < d; ++j)
                              (*dx)[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) * inv;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Row gather / assembly

// out[i] = x[indices[i]]; the backward pass scatter-adds, so this doubles as
// an embedding lookup.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  const std::size_t d = x.cols(), rows = x.rows();
  std::vector<T> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(x.data().begin() + indices[i] * d, d, out.begin() + i * d);
  }
  auto xn = x.node_ptr();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>({idx.size(), d}, std::move(out), "gather_rows", {&x},
                        [xn, idx, d](const std::vector<T>& g) {
                          auto* dx = detail::grad_sink(xn);
                          if (!dx) return;
                          for (std::size_t i = 0; i < idx.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j) (*dx)[idx[i] * d + j] += g[i * d + j];
                        });
}

// Stacks matrices with equal column counts on top of each other.
template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<vlmdet::detail::TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  // make_result takes a fixed input list; a part that requires grad (if any)
  // stands in for all of them.
  const Tensor<T>* rep = &parts[0];
  for (const auto& p : parts)
    if (p.requires_grad()) rep = &p;
  return make_result<T>({total, d}, std::move(out), "concat_rows", {rep},
                        [nodes](const std::vector<T>& g) {
                          std::size_t off = 0;
                          for (const auto& n : nodes) {
                            if (auto* dn = detail::grad_sink(n))
                              for (std::size_t i = 0; i < n->data.size(); ++i) (*dn)[i] += g[off + i];
                            off += n->data.size();
                          }
                        });
}

// Inserts `row` ([d]) in front of each of `groups` equal row blocks of x.
// Used to prepend a class token to every patch sequence of a batch.
template <class T>
Tensor<T> prepend_row(const Tensor<T>& x, const Tensor<T>& row, std::size_t groups) {
  const std::size_t d = x.cols();
  if (row.numel() != d || groups == 0 || x.rows() % groups != 0) {
    throw ShapeError("prepend_row: row " + shape_str(row.shape()) + " into " +
                     shape_str(x.shape()) + " over " + std::to_string(groups) + " groups");
  }
  const std::size_t per = x.rows() / groups;
  std::vector<T> out(groups * (per + 1) * d);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T* dst = out.data() + gi * (per + 1) * d;
    std::copy(row.data().begin(), row.data().end(), dst);
    std::copy_n(x.data().begin() + gi * per * d, per * d, dst + d);
  }
  auto xn = x.node_ptr(), rn = row.node_ptr();
  return make_result<T>({groups * (per + 1), d}, std::move(out), "prepend_row", {&x, &row},
                        [xn, rn, groups, per, d](const std::vector<T>& g) {
                          auto* dx = detail::grad_sink(xn);
                          auto* dr = detail::grad_sink(rn);
                          for (std::size_t gi = 0; gi < groups; ++gi) {
                            const T* src = g.data() + gi * (per + 1) * d;
                            if (dr)
                              for (std::size_t j = 0; j < d; ++j) (*dr)[j] += src[j];
                            if (dx)
                              for (std::size_t j = 0; j < per * d; ++j) (*dx)[gi * per * d + j] += src[d + j];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention over `batch` sequences of length
// `seq`. qkv is [batch*seq x 3*d] holding Q | K | V column blocks; each head
// owns d/heads adjacent columns of every block. With `causal`, position i
// attends to positions <= i only.
template <class T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                    bool causal) {
  if (qkv.ndim() != 2 || qkv.rows() != batch * seq || qkv.cols() % (3 * heads) != 0) {
    throw ShapeError("attention: qkv " + shape_str(qkv.shape()) + " for batch " +
                     std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                     std::to_string(heads));
  }
  const std::size_t d = qkv.cols() / 3, dh = d / heads, stride = 3 * d;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const T* src = qkv.data().data();
  std::vector<T> out(batch * seq * d, T(0));
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq * seq, T(0));
  std::vector<T> s(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* q = src + (b * seq + i) * stride + h * dh;
        const std::size_t limit = causal ? i + 1 : seq;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          const T* k = src + (b * seq + j) * stride + d + h * dh;
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[c] * k[c];
          s[j] = dot * inv_sqrt;
          mx = std::max(mx, s[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < limit; ++j) z += (s[j] = std::exp(s[j] - mx));
        T* o = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < limit; ++j) {
          const T pj = s[j] / z;
          p[i * seq + j] = pj;
          const T* v = src + (b * seq + j) * stride + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += pj * v[c];
        }
      }
    }
  }
  auto qn = qkv.node_ptr();
  return make_result<T>(
      {batch * seq, d}, std::move(out), "attention", {&qkv},
      [qn, probs, batch, seq, heads, d, dh, stride, inv_sqrt, causal](const std::vector<T>& g) {
        auto* dq = detail::grad_sink(qn);
        if (!dq) return;
        const T* src2 = qn->data.data();
        T* dst = dq->data();
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs->data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const std::size_t limit = causal ? i + 1 : seq;
              const T* go = g.data() + (b * seq + i) * d + h * dh;
              // dP = dO V^T and dV += P^T dO
              T rowdot = 0;
              for (std::size_t j = 0; j < limit; ++j) {
                const T* v = src2 + (b * seq + j) * stride + 2 * d + h * dh;
                T* dv = dst + (b * seq + j) * stride + 2 * d + h * dh;
                const T pij = p[i * seq + j];
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += go[c] * v[c];
                  dv[c] += pij * go[c];
                }
                dp[j] = acc;
                rowdot += acc * pij;
              }
              const T* q = src2 + (b * seq + i) * stride + h * dh;
              T* dqi = dst + (b * seq + i) * stride + h * dh;
              for (std::size_t j = 0; j < limit; ++j) {
                const T ds = p[i * seq + j] * (dp[j] - rowdot) * inv_sqrt;
                if (ds == T(0)) continue;
                const T* k = src2 + (b * seq + j) * stride + d + h * dh;
                T* dk = dst + (b * seq + j) * stride + d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqi[c] += ds * k[c];
                  dk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

// Mean over rows of -log softmax(logits)[target], with a fused log-sum-exp.
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  detail::require_matrix(logits, "cross_entropy_with_logits");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (targets.size() != b) {
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(b) + " rows");
  }
  if (b == 0 || c == 0) throw ShapeError("cross_entropy_with_logits on empty logits");
  auto probs = std::make_shared<std::vector<T>>(b * c);
  T total = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (targets[r] >= c) {
      throw IndexError("cross_entropy_with_logits: target " + std::to_string(targets[r]) +
                       " out of range for " + std::to_string(c) + " classes");
    }
    const T* z = logits.data().data() + r * c;
    const T mx = *std::max_element(z, z + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const T lse = mx + std::log(s);
    total += lse - z[targets[r]];
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(z[j] - lse);
  }
  const T inv_b = T(1) / static_cast<T>(b);
  auto ln = logits.node_ptr();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return make_result<T>({}, {total * inv_b}, "cross_entropy_with_logits", {&logits},
                        [ln, probs, tg, b, c, inv_b](const std::vector<T>& g) {
                          auto* dl = detail::grad_sink(ln);
                          if (!dl) return;
                          for (std::size_t r = 0; r < b; ++r)
                            for (std::size_t j = 0; j < c; ++j)
                              (*dl)[r * c + j] +=
                                  g[0] * inv_b * ((*probs)[r * c + j] - (j == tg[r] ? T(1) : T(0)));
                        });
}

// Cross-entropy against per-row target distributions (rows of `targets` sum
// to 1, or are all zero to skip the row). Averaged over non-skipped rows.
template <class T>
Tensor<T> soft_cross_entropy(const Tensor<T>& logits, std::span<const T> targets) {
  detail::require_matrix(logits, "soft_cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (targets.size() != b * c) throw ShapeError("soft_cross_entropy: target size mismatch");
  auto coef = std::make_shared<std::vector<T>>(b * c, T(0));  // d loss / d z, before / rows
  T total = 0;
  std::size_t used = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const T* p = targets.data() + r * c;
    T psum = 0;
    for (std::size_t j = 0; j < c; ++j) psum += p[j];
    if (psum == T(0)) continue;
    ++used;
    const T* z = logits.data().data() + r * c;
    const T mx = *std::max_element(z, z + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      total += p[j] * (lse - z[j]);
      (*coef)[r * c + j] = psum * std::exp(z[j] - lse) - p[j];
    }
  }
  if (used == 0) throw PreconditionError("soft_cross_entropy: every target row is empty");
  const T inv = T(1) / static_cast<T>(used);
  auto ln = logits.node_ptr();
  return make_result<T>({}, {total * inv}, "soft_cross_entropy", {&logits},
                        [ln, coef, inv](const std::vector<T>& g) {
                          auto* dl = detail::grad_sink(ln);
                          if (!dl) return;
                          for (std::size_t i = 0; i < coef->size(); ++i) (*dl)[i] += g[0] * inv * (*coef)[i];
                        });
}

template <class T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <class T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// Mean of -[y log s(z) + (1-y) log(1-s(z))] = mean(softplus(z) - y z).
template <class T>
Tensor<T> binary_cross_entropy_with_logit(const Tensor<T>& logit, std::span<const T> labels) {
  const std::size_t b = logit.numel();
  if (labels.size() != b) {
    throw ShapeError("binary_cross_entropy_with_logit: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(b) + " logits");
  }
  if (b == 0) throw ShapeError("binary_cross_entropy_with_logit on empty input");
  T total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] != T(0) && labels[i] != T(1)) {
      throw PreconditionError("binary_cross_entropy_with_logit: labels must be 0 or 1");
    }
    total += softplus(logit[i]) - labels[i] * logit[i];
  }
  const T inv_b = T(1) / static_cast<T>(b);
  auto ln = logit.node_ptr();
  std::vector<T> y(labels.begin(), labels.end());
  return make_result<T>({}, {total * inv_b}, "binary_cross_entropy_with_logit", {&logit},
                        [ln, y, inv_b](const std::vector<T>& g) {
                          auto* dl = detail::grad_sink(ln);
                          if (!dl) return;
                          for (std::size_t i = 0; i < y.size(); ++i)
                            (*dl)[i] += g[0] * inv_b * (sigmoid(ln->data[i]) - y[i]);
                        });
}

}  // namespace vlmdet::ops
