// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "triformer/kernels.hpp"

namespace triformer {

namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
Node<T>* node_of(const Tensor<T>& t) {
  return t.node().get();
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename T>
void check_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  Node<T>* xn = node_of(x);
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, dfdx](Node<T>& o) {
    if (!xn->requires_grad) return;
    T* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * dfdx(xn->data[i], o.data[i]);
  });
}

// Strides of a row-major shape.
std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("add", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t inner = bd.size();
  std::vector<T> out(ad.begin(), ad.end());
  for (std::size_t base = 0; base < out.size(); base += inner)
    for (std::size_t j = 0; j < inner; ++j) out[base + j] += bd[j];
  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn, inner](Node<T>& o) {
    if (an->requires_grad) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t base = 0; base < o.grad.size(); base += inner)
        for (std::size_t j = 0; j < inner; ++j) g[j] += o.grad[base + j];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("mul", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t inner = bd.size();
  std::vector<T> out(ad.size());
  for (std::size_t base = 0; base < out.size(); base += inner)
    for (std::size_t j = 0; j < inner; ++j) out[base + j] = ad[base + j] * bd[j];
  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn, inner](Node<T>& o) {
    if (an->requires_grad) {
      T* g = an->grad_buffer();
      for (std::size_t base = 0; base < o.grad.size(); base += inner)
        for (std::size_t j = 0; j < inner; ++j) g[base + j] += o.grad[base + j] * bn->data[j];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t base = 0; base < o.grad.size(); base += inner)
        for (std::size_t j = 0; j < inner; ++j) g[j] += o.grad[base + j] * an->data[base + j];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); },
               [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ValidationError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T factor = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? factor : T(0);
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  Node<T>* xn = node_of(x);
  return make_result<T>(Shape{1}, {total}, {&x}, [xn](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean_last(const Tensor<T>& x) {
  const std::size_t inner = x.shape().back();
  const std::size_t rows = x.numel() / inner;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  std::vector<T> out(rows, T(0));
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t j = 0; j < inner; ++j) s += xd[r * inner + j];
    out[r] = s / static_cast<T>(inner);
  }
  Node<T>* xn = node_of(x);
  return make_result<T>(std::move(shape), std::move(out), {&x}, [xn, rows, inner](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T v = o.grad[r] / static_cast<T>(inner);
      for (std::size_t j = 0; j < inner; ++j) g[r * inner + j] += v;
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  Node<T>* xn = node_of(x);
  return make_result<T>(std::move(shape), std::move(out), {&x}, [xn](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) throw DimensionError("permute: axis count mismatch for " + shape_str(in_shape));
  std::vector<bool> used(rank, false);
  for (auto a : axes) {
    if (a >= rank || used[a]) throw DimensionError("permute: invalid axis order");
    used[a] = true;
  }
  Shape out_shape(rank);
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    src_stride[i] = in_strides[axes[i]];
  }
  // Source offset for every destination element.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      offset += src_stride[d];
      if (counter[d] < out_shape[d]) break;
      offset -= src_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[src[i]];
  Node<T>* xn = node_of(x);
  return make_result<T>(std::move(out_shape), std::move(out), {&x},
                        [xn, src = std::move(src)](Node<T>& o) {
                          T* g = xn->grad_buffer();
                          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += o.grad[i];
                        });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis])
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                         " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t span_in = s[axis] * inner;
  const std::size_t span_out = length * inner;
  const auto xd = x.data();
  std::vector<T> out(outer * span_out);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xd.begin() + o * span_in + start * inner, span_out, out.begin() + o * span_out);
  Node<T>* xn = node_of(x);
  return make_result<T>(std::move(out_shape), std::move(out), {&x},
                        [xn, outer, span_in, span_out, start, inner](Node<T>& o) {
                          T* g = xn->grad_buffer();
                          for (std::size_t b = 0; b < outer; ++b) {
                            T* dst = g + b * span_in + start * inner;
                            const T* src = o.grad.data() + b * span_out;
                            for (std::size_t j = 0; j < span_out; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<T> out(outer * row);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.begin() + o * w, w, out.begin() + o * row + offset);
    widths.push_back(w);
    offset += w;
  }
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(node_of(p));
  return make_result<T>(std::move(out_shape), std::move(out), parts,
                        [nodes, widths, outer, row](Node<T>& o) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            const std::size_t w = widths[k];
                            if (nodes[k]->requires_grad) {
                              T* g = nodes[k]->grad_buffer();
                              for (std::size_t b = 0; b < outer; ++b) {
                                const T* src = o.grad.data() + b * row + off;
                                for (std::size_t j = 0; j < w; ++j) g[b * w + j] += src[j];
                              }
                            }
                            off += w;
                          }
                        });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DimensionError("index_select: empty index list");
  const std::size_t rows = x.shape()[0];
  const std::size_t inner = x.numel() / rows;
  for (auto i : indices)
    if (i >= rows)
      throw DimensionError("index_select: index " + std::to_string(i) + " out of range for " +
                           shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<T> out(indices.size() * inner);
  const auto xd = x.data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(xd.begin() + indices[r] * inner, inner, out.begin() + r * inner);
  Node<T>* xn = node_of(x);
  return make_result<T>(std::move(out_shape), std::move(out), {&x},
                        [xn, indices, inner](Node<T>& o) {
                          T* g = xn->grad_buffer();
                          for (std::size_t r = 0; r < indices.size(); ++r) {
                            T* dst = g + indices[r] * inner;
                            const T* src = o.grad.data() + r * inner;
                            for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2)
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(as) + " and " +
                         shape_str(bs));
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs.back();
  const bool shared_b = bs.size() == 2;
  bool lead_ok = shared_b || bs.size() == as.size();
  for (std::size_t i = 0; lead_ok && !shared_b && i + 2 < as.size(); ++i) lead_ok = as[i] == bs[i];
  if (k != bk || !lead_ok)
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs) +
                         (transpose_b ? " (b transposed)" : ""));
  const std::size_t batch = a.numel() / (m * k);
  const std::size_t b_stride = shared_b ? 0 : k * n;
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);

  std::vector<T> out(batch * m * n, T(0));
  std::vector<T> scratch;
  for (std::size_t i = 0; i < batch; ++i) {
    const T* ap = a.data().data() + i * m * k;
    const T* bp = b.data().data() + i * b_stride;
    T* cp = out.data() + i * m * n;
    if (transpose_b)
      kernels::gemm_nt(m, n, k, ap, bp, cp, scratch);
    else
      kernels::gemm_nn(m, n, k, ap, bp, cp);
  }

  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_result<T>(
      std::move(out_shape), std::move(out), {&a, &b},
      [an, bn, batch, m, n, k, b_stride, transpose_b](Node<T>& o) {
        std::vector<T> scratch;
        T* ga = an->requires_grad ? an->grad_buffer() : nullptr;
        T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          const T* ap = an->data.data() + i * m * k;
          const T* bp = bn->data.data() + i * b_stride;
          const T* gc = o.grad.data() + i * m * n;
          if (ga) {
            // dA = dC * B^T   (B stored k x n)   or   dC * B   (B stored n x k)
            if (transpose_b)
              kernels::gemm_nn(m, k, n, gc, bp, ga + i * m * k);
            else
              kernels::gemm_nt(m, k, n, gc, bp, ga + i * m * k, scratch);
          }
          if (gb) {
            // dB = A^T * dC   or, for B^T stored, dC^T * A
            if (transpose_b)
              kernels::gemm_tn(n, k, m, gc, ap, gb + i * b_stride);
            else
              kernels::gemm_tn(k, n, m, ap, gc, gb + i * b_stride);
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || xs.back() != ws[0])
    throw DimensionError("linear: input " + shape_str(xs) + " incompatible with weight " +
                         shape_str(ws));
  const std::size_t in = ws[0];
  const std::size_t out_dim = ws[1];
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(ws));
  const std::size_t rows = x.numel() / in;
  Shape out_shape = xs;
  out_shape.back() = out_dim;
  std::vector<T> out(rows * out_dim, T(0));
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * out_dim);
  }
  kernels::gemm_nn(rows, out_dim, in, x.data().data(), weight.data().data(), out.data());

  Node<T>* xn = node_of(x);
  Node<T>* wn = node_of(weight);
  Node<T>* bn = bias.defined() ? node_of(bias) : nullptr;
  return make_result<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias},
                        [xn, wn, bn, rows, in, out_dim](Node<T>& o) {
                          if (xn->requires_grad) {
                            std::vector<T> scratch;
                            kernels::gemm_nt(rows, in, out_dim, o.grad.data(), wn->data.data(),
                                             xn->grad_buffer(), scratch);
                          }
                          if (wn->requires_grad)
                            kernels::gemm_tn(in, out_dim, rows, xn->data.data(), o.grad.data(),
                                             wn->grad_buffer());
                          if (bn && bn->requires_grad) {
                            T* g = bn->grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < out_dim; ++j) g[j] += o.grad[r * out_dim + j];
                          }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  }
  Node<T>* xn = node_of(x);
  return make_result<T>(s, std::move(out), {&x}, [xn, outer, inner, len](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t b = 0; b < outer; ++b) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = b * len * inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width)
    throw DimensionError("layer_norm: affine parameters " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / width;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * width;
    T mu = T(0);
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<T>(width);
    T var = T(0);
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(width);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < width; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * width + j] = h;
      out[r * width + j] = h * gd[j] + bd[j];
    }
  }
  Node<T>* xn = node_of(x);
  Node<T>* gn = node_of(gain);
  Node<T>* bn = node_of(bias);
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [xn, gn, bn, rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
        if (gn->requires_grad) {
          T* g = gn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) g[j] += o.grad[r * width + j] * xhat[r * width + j];
        }
        if (bn->requires_grad) {
          T* g = bn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) g[j] += o.grad[r * width + j];
        }
        if (xn->requires_grad) {
          T* g = xn->grad_buffer();
          const T inv_w = T(1) / static_cast<T>(width);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = T(0), mean_dh = T(0);
            for (std::size_t j = 0; j < width; ++j) {
              const T d = o.grad[r * width + j] * gn->data[j];
              mean_d += d;
              mean_dh += d * xhat[r * width + j];
            }
            mean_d *= inv_w;
            mean_dh *= inv_w;
            for (std::size_t j = 0; j < width; ++j) {
              const T d = o.grad[r * width + j] * gn->data[j];
              g[r * width + j] += inv_std[r] * (d - mean_d - xhat[r * width + j] * mean_dh);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2)
    throw DimensionError("cross_entropy: logits must be [B, C], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw ValidationError("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                            std::to_string(classes) + ")");
  const auto ld = logits.data();
  std::vector<T> probs(ld.size());
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = ld.data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = T(0);
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const T log_z = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - log_z);
    loss += log_z - row[labels[b]];
  }
  loss /= static_cast<T>(batch);
  std::vector<int> lab(labels.begin(), labels.end());
  Node<T>* ln = node_of(logits);
  return make_result<T>(Shape{1}, {loss}, {&logits},
                        [ln, probs = std::move(probs), lab = std::move(lab), batch, classes](Node<T>& o) {
                          T* g = ln->grad_buffer();
                          const T s = o.grad[0] / static_cast<T>(batch);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t c = 0; c < classes; ++c) {
                              const T onehot = static_cast<int>(c) == lab[b] ? T(1) : T(0);
                              g[b * classes + c] += s * (probs[b * classes + c] - onehot);
                            }
                        });
}

namespace {

struct ConvGeometry {
  std::size_t cin, cout, k, stride, pad;
  std::size_t in[3];
  std::size_t out[3];
};

// Range of output positions o with 0 <= o*stride + tap - pad < extent.
inline void valid_range(std::size_t extent, std::size_t out_extent, std::size_t stride,
                        std::size_t tap, std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // o*stride >= pad - tap
  lo = tap >= pad ? 0 : (pad - tap + stride - 1) / stride;
  // o*stride + tap - pad <= extent - 1
  const std::ptrdiff_t lim = static_cast<std::ptrdiff_t>(extent) - 1 + static_cast<std::ptrdiff_t>(pad) -
                             static_cast<std::ptrdiff_t>(tap);
  if (lim < 0) {
    lo = hi = 0;
    return;
  }
  hi = std::min(out_extent, static_cast<std::size_t>(lim) / stride + 1);
  if (lo > hi) lo = hi;
}

// Visits every (output voxel, input voxel) pair of one (cout, cin, tap) combination
// as contiguous-ish runs along the last axis.
template <typename F>
void for_each_tap(const ConvGeometry& g, std::size_t a, std::size_t b, std::size_t c, F&& run) {
  std::size_t h_lo, h_hi, w_lo, w_hi, d_lo, d_hi;
  valid_range(g.in[0], g.out[0], g.stride, a, g.pad, h_lo, h_hi);
  valid_range(g.in[1], g.out[1], g.stride, b, g.pad, w_lo, w_hi);
  valid_range(g.in[2], g.out[2], g.stride, c, g.pad, d_lo, d_hi);
  if (d_lo >= d_hi) return;
  for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
    const std::size_t ih = oh * g.stride + a - g.pad;
    for (std::size_t ow = w_lo; ow < w_hi; ++ow) {
      const std::size_t iw = ow * g.stride + b - g.pad;
      const std::size_t out_row = (oh * g.out[1] + ow) * g.out[2];
      const std::size_t in_row = (ih * g.in[1] + iw) * g.in[2];
      run(out_row + d_lo, in_row + d_lo * g.stride + c - g.pad, d_hi - d_lo);
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 5 || ks[1] != xs[0] || ks[2] != ks[3] || ks[3] != ks[4])
    throw DimensionError("conv3d: input " + shape_str(xs) + " incompatible with kernel " +
                         shape_str(ks));
  if (stride == 0) throw DimensionError("conv3d: stride must be positive");
  ConvGeometry g{xs[0], ks[0], ks[2], stride, padding, {xs[1], xs[2], xs[3]}, {}};
  for (int i = 0; i < 3; ++i) {
    if (g.in[i] + 2 * padding < g.k)
      throw DimensionError("conv3d: kernel " + shape_str(ks) + " larger than padded input " +
                           shape_str(xs));
    g.out[i] = (g.in[i] + 2 * padding - g.k) / stride + 1;
  }
  if (bias.defined() && bias.numel() != g.cout)
    throw DimensionError("conv3d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.cout) +
                         " output channels");
  const std::size_t in_vol = g.in[0] * g.in[1] * g.in[2];
  const std::size_t out_vol = g.out[0] * g.out[1] * g.out[2];
  const std::size_t k3 = g.k * g.k * g.k;
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<T> out(g.cout * out_vol, T(0));
  for (std::size_t co = 0; co < g.cout; ++co) {
    T* op = out.data() + co * out_vol;
    if (bias.defined()) std::fill_n(op, out_vol, bias.data()[co]);
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      const T* ip = xd.data() + ci * in_vol;
      const T* wp = kd.data() + (co * g.cin + ci) * k3;
      for (std::size_t a = 0; a < g.k; ++a)
        for (std::size_t b = 0; b < g.k; ++b)
          for (std::size_t c = 0; c < g.k; ++c) {
            const T w = wp[(a * g.k + b) * g.k + c];
            const std::size_t s = g.stride;
            for_each_tap(g, a, b, c, [&](std::size_t o, std::size_t i, std::size_t len) {
              for (std::size_t t = 0; t < len; ++t) op[o + t] += w * ip[i + t * s];
            });
          }
    }
  }
  Shape out_shape{g.cout, g.out[0], g.out[1], g.out[2]};
  Node<T>* xn = node_of(x);
  Node<T>* kn = node_of(kernel);
  Node<T>* bn = bias.defined() ? node_of(bias) : nullptr;
  return make_result<T>(
      std::move(out_shape), std::move(out), {&x, &kernel, &bias},
      [xn, kn, bn, g, in_vol, out_vol, k3](Node<T>& o) {
        T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
        T* gk = kn->requires_grad ? kn->grad_buffer() : nullptr;
        if (bn && bn->requires_grad) {
          T* gb = bn->grad_buffer();
          for (std::size_t co = 0; co < g.cout; ++co) {
            T s = T(0);
            for (std::size_t v = 0; v < out_vol; ++v) s += o.grad[co * out_vol + v];
            gb[co] += s;
          }
        }
        if (!gx && !gk) return;
        const std::size_t s = g.stride;
        for (std::size_t co = 0; co < g.cout; ++co) {
          const T* dy = o.grad.data() + co * out_vol;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const T* ip = xn->data.data() + ci * in_vol;
            T* dx = gx ? gx + ci * in_vol : nullptr;
            const std::size_t wbase = (co * g.cin + ci) * k3;
            for (std::size_t a = 0; a < g.k; ++a)
              for (std::size_t b = 0; b < g.k; ++b)
                for (std::size_t c = 0; c < g.k; ++c) {
                  const std::size_t widx = wbase + (a * g.k + b) * g.k + c;
                  const T w = kn->data[widx];
                  T acc = T(0);
                  for_each_tap(g, a, b, c, [&](std::size_t oo, std::size_t i, std::size_t len) {
                    if (dx)
                      for (std::size_t t = 0; t < len; ++t) dx[i + t * s] += w * dy[oo + t];
                    if (gk)
                      for (std::size_t t = 0; t < len; ++t) acc += dy[oo + t] * ip[i + t * s];
                  });
                  if (gk) gk[widx] += acc;
                }
          }
        }
      });
}

template <typename T>
Tensor<T> avg_pool3d(const Tensor<T>& x, std::size_t factor) {
  const Shape& s = x.shape();
  if (s.size() != 4 || factor == 0 || s[1] < factor || s[2] < factor || s[3] < factor)
    throw DimensionError("avg_pool3d: window " + std::to_string(factor) + " on " + shape_str(s));
  const std::size_t ch = s[0];
  const std::size_t oh = s[1] / factor, ow = s[2] / factor, od = s[3] / factor;
  const T norm = T(1) / static_cast<T>(factor * factor * factor);
  std::vector<std::size_t> owner(x.numel(), SIZE_MAX);
  std::vector<T> out(ch * oh * ow * od, T(0));
  const auto xd = x.data();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t h = 0; h < oh * factor; ++h)
      for (std::size_t w = 0; w < ow * factor; ++w)
        for (std::size_t d = 0; d < od * factor; ++d) {
          const std::size_t src = ((c * s[1] + h) * s[2] + w) * s[3] + d;
          const std::size_t dst = ((c * oh + h / factor) * ow + w / factor) * od + d / factor;
          out[dst] += xd[src] * norm;
          owner[src] = dst;
        }
  Node<T>* xn = node_of(x);
  return make_result<T>(Shape{ch, oh, ow, od}, std::move(out), {&x},
                        [xn, owner = std::move(owner), norm](Node<T>& o) {
                          T* g = xn->grad_buffer();
                          for (std::size_t i = 0; i < owner.size(); ++i)
                            if (owner[i] != SIZE_MAX) g[i] += o.grad[owner[i]] * norm;
                        });
}

template <typename T>
std::vector<T> softmax_values(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(logits[i] - mx);
  for (auto& v : out) v /= total;
  return out;
}

#define TRIFORMER_INSTANTIATE(T)                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);                          \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mean_last(const Tensor<T>&);                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> narrow(const Tensor<T>&, std::size_t, std::size_t, std::size_t);              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                           \
  template Tensor<T> index_select(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                        \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                            std::size_t);                                                          \
  template Tensor<T> avg_pool3d(const Tensor<T>&, std::size_t);                                    \
  template std::vector<T> softmax_values(std::span<const T>);

TRIFORMER_INSTANTIATE(float)
TRIFORMER_INSTANTIATE(double)

#undef TRIFORMER_INSTANTIATE

}  // namespace triformer
