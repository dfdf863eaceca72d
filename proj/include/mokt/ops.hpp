#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "mokt/common.hpp"
#include "mokt/macs.hpp"
#include "mokt/parallel.hpp"
#include "mokt/rng.hpp"
#include "mokt/tensor.hpp"

namespace mokt {

template <typename S>
using MatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using MutMap =
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ============================================================================
// initializers
// ============================================================================

template <typename S>
Tensor<S> randn(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<S>(rng.normal(0.0, stddev));
  return t;
}

template <typename S>
Tensor<S> uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

// Truncated normal(0, stddev) clipped to +/- 2 stddev, the init used for all
// projection weights.
template <typename S>
Tensor<S> trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.mutable_values())
    v = static_cast<S>(rng.truncated_normal(stddev, -2.0 * stddev, 2.0 * stddev));
  return t;
}

// ============================================================================
// elementwise ops
// ============================================================================

// add(a, b): b's shape must equal a's shape or a trailing suffix of it
// (broadcast over a's leading axes, e.g. bias or positional terms).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check(sb.size() <= sa.size() &&
            std::equal(sb.begin(), sb.end(), sa.end() - sb.size()),
        "add: shape " + shape_str(sb) + " is not a trailing suffix of " +
            shape_str(sa));
  std::int64_t nb = b.size();
  auto compute = [a, b, nb]() {
    std::vector<S> out(a.values());
    const auto& vb = b.values();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.size()); ++i)
      out[i] += vb[nb == 0 ? 0 : i % nb];
    return out;
  };
  Tensor<S> out = Tensor<S>::from(sa, compute());
  return record<S>(
      "add", {a, b}, out,
      [a, b, nb](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        accumulate_grad(a, g);
        if (b.needs_grad()) {
          std::vector<S> gb(static_cast<std::size_t>(nb), S(0));
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i)
            gb[i % nb] += g[i];
          accumulate_grad(b, gb);
        }
      },
      compute);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "sub: shapes differ: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  auto compute = [a, b]() {
    std::vector<S> out(a.values());
    const auto& vb = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return out;
  };
  Tensor<S> out = Tensor<S>::from(a.shape(), compute());
  return record<S>(
      "sub", {a, b}, out,
      [a, b](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        accumulate_grad(a, g);
        if (b.needs_grad()) {
          std::vector<S> gb(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
          accumulate_grad(b, gb);
        }
      },
      compute);
}

// Elementwise product; same shape both sides (the gating use case).
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "mul: shapes differ: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  auto compute = [a, b]() {
    std::vector<S> out(a.values());
    const auto& vb = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return out;
  };
  Tensor<S> out = Tensor<S>::from(a.shape(), compute());
  return record<S>(
      "mul", {a, b}, out,
      [a, b](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        if (a.needs_grad()) {
          std::vector<S> ga(g.size());
          const auto& vb = b.values();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * vb[i];
          accumulate_grad(a, ga);
        }
        if (b.needs_grad()) {
          std::vector<S> gb(g.size());
          const auto& va = a.values();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * va[i];
          accumulate_grad(b, gb);
        }
      },
      compute);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  auto compute = [x, c]() {
    std::vector<S> out(x.values());
    for (auto& v : out) v *= c;
    return out;
  };
  Tensor<S> out = Tensor<S>::from(x.shape(), compute());
  return record<S>(
      "scale", {x}, out,
      [x, c](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        std::vector<S> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * c;
        accumulate_grad(x, gx);
      },
      compute);
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  auto compute = [x]() {
    std::vector<S> out(x.values());
    for (auto& v : out) v = std::exp(v);
    return out;
  };
  Tensor<S> out = Tensor<S>::from(x.shape(), compute());
  return record<S>(
      "exp", {x}, out,
      [x](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& y = o.values();
        std::vector<S> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i];
        accumulate_grad(x, gx);
      },
      compute);
}

// Numerically stable softplus: max(x, 0) + log1p(exp(-|x|)).
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  auto compute = [x]() {
    std::vector<S> out(x.values());
    for (auto& v : out)
      v = std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v)));
    return out;
  };
  Tensor<S> out = Tensor<S>::from(x.shape(), compute());
  return record<S>(
      "softplus", {x}, out,
      [x](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& v = x.values();
        std::vector<S> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          S s = S(1) / (S(1) + std::exp(-v[i]));  // sigmoid
          gx[i] = g[i] * s;
        }
        accumulate_grad(x, gx);
      },
      compute);
}

// Exact (erf) GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  auto compute = [x]() {
    std::vector<S> out(x.values());
    for (auto& v : out)
      v = S(0.5) * v * (S(1) + std::erf(v * S(0.7071067811865475244)));
    return out;
  };
  Tensor<S> out = Tensor<S>::from(x.shape(), compute());
  return record<S>(
      "gelu", {x}, out,
      [x](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& v = x.values();
        std::vector<S> gx(g.size());
        const S inv_sqrt2 = S(0.7071067811865475244);
        const S inv_sqrt2pi = S(0.3989422804014326779);
        for (std::size_t i = 0; i < g.size(); ++i) {
          S cdf = S(0.5) * (S(1) + std::erf(v[i] * inv_sqrt2));
          S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v[i] * v[i]);
          gx[i] = g[i] * (cdf + v[i] * pdf);
        }
        accumulate_grad(x, gx);
      },
      compute);
}

// ============================================================================
// structural ops
// ============================================================================

// Row-major relabel; shares the underlying buffer. One extent may be -1.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      check(infer < 0, "reshape: more than one -1 in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    check(known != 0 && x.size() % known == 0,
          "reshape: cannot infer extent for " + shape_str(shape) + " from " +
              std::to_string(x.size()) + " elements");
    shape[infer] = static_cast<int>(x.size() / known);
  }
  Tensor<S> out = x.aliased_as(shape);
  return record<S>(
      "reshape", {x}, out,
      [x](const Tensor<S>& o) { accumulate_grad(x, o.grad_ref()); },
      [x]() { return x.values(); });
}

// Axis permutation, materialized. perm[k] names the input axis that becomes
// output axis k.
template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
  int r = x.rank();
  check(static_cast<int>(perm.size()) == r,
        "permute: perm size " + std::to_string(perm.size()) +
            " does not match rank " + std::to_string(r));
  std::vector<char> seen(static_cast<std::size_t>(r), 0);
  Shape out_shape(static_cast<std::size_t>(r));
  for (int k = 0; k < r; ++k) {
    int a = resolve_axis(perm[static_cast<std::size_t>(k)], r);
    check(!seen[static_cast<std::size_t>(a)], "permute: duplicate axis in perm");
    seen[static_cast<std::size_t>(a)] = 1;
    out_shape[static_cast<std::size_t>(k)] = x.shape()[static_cast<std::size_t>(a)];
  }
  auto in_strides = strides_of(x.shape());
  auto out_strides = strides_of(out_shape);
  // For each output linear index, the matching input linear index.
  auto gather = [r, out_strides, in_strides, perm](std::int64_t o) {
    std::int64_t rem = o, idx = 0;
    for (int k = 0; k < r; ++k) {
      std::int64_t c = rem / out_strides[static_cast<std::size_t>(k)];
      rem %= out_strides[static_cast<std::size_t>(k)];
      idx += c * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])];
    }
    return idx;
  };
  auto compute = [x, out_shape, gather]() {
    std::vector<S> out(static_cast<std::size_t>(numel(out_shape)));
    const auto& v = x.values();
    for (std::int64_t o = 0; o < static_cast<std::int64_t>(out.size()); ++o)
      out[static_cast<std::size_t>(o)] = v[static_cast<std::size_t>(gather(o))];
    return out;
  };
  Tensor<S> out = Tensor<S>::from(out_shape, compute());
  return record<S>(
      "permute", {x}, out,
      [x, gather](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        std::vector<S> gx(x.values().size(), S(0));
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i)
          gx[static_cast<std::size_t>(gather(i))] += g[static_cast<std::size_t>(i)];
        accumulate_grad(x, gx);
      },
      compute);
}

// Swap the two trailing axes (batched matrix transpose).
template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  check(x.rank() >= 2, "transpose_last2: rank must be >= 2");
  std::vector<int> perm(static_cast<std::size_t>(x.rank()));
  for (int i = 0; i < x.rank(); ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(x.rank() - 2)],
            perm[static_cast<std::size_t>(x.rank() - 1)]);
  return permute(x, perm);
}

// Splits the last axis into parts of the given widths (in order).
template <typename S>
std::vector<Tensor<S>> split_last(const Tensor<S>& x, const std::vector<int>& sizes) {
  int last = x.shape().back();
  std::int64_t total = 0;
  for (int s : sizes) {
    check(s >= 0, "split_last: negative part width");
    total += s;
  }
  check(total == last, "split_last: widths sum to " + std::to_string(total) +
                           " but last extent is " + std::to_string(last));
  std::int64_t rows = x.size() / last;
  std::vector<Tensor<S>> parts;
  int offset = 0;
  for (int w : sizes) {
    const int off = offset;
    auto compute = [x, last, rows, off, w]() {
      std::vector<S> out(static_cast<std::size_t>(rows * w));
      const auto& v = x.values();
      for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(v.begin() + r * last + off, w, out.begin() + r * w);
      return out;
    };
    Shape part_shape = x.shape();
    part_shape.back() = w;
    Tensor<S> part = Tensor<S>::from(part_shape, compute());
    parts.push_back(record<S>(
        "split_last", {x}, part,
        [x, last, rows, off, w](const Tensor<S>& o) {
          const auto& g = o.grad_ref();
          std::vector<S> gx(x.values().size(), S(0));
          for (std::int64_t r = 0; r < rows; ++r)
            std::copy_n(g.begin() + r * w, w, gx.begin() + r * last + off);
          accumulate_grad(x, gx);
        },
        compute));
    offset += w;
  }
  return parts;
}

// Concatenates along the last axis; all other extents must agree.
template <typename S>
Tensor<S> concat_last(const std::vector<Tensor<S>>& parts) {
  check(!parts.empty(), "concat_last: no parts");
  Shape lead = parts[0].shape();
  lead.pop_back();
  int total = 0;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    int w = pl.back();
    pl.pop_back();
    check(pl == lead, "concat_last: leading shapes differ: " + shape_str(p.shape()) +
                          " vs " + shape_str(parts[0].shape()));
    total += w;
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = total;
  std::int64_t rows = numel(lead);
  auto compute = [parts, rows, total]() {
    std::vector<S> out(static_cast<std::size_t>(rows * total));
    int off = 0;
    for (const auto& p : parts) {
      int w = p.shape().back();
      const auto& v = p.values();
      for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(v.begin() + r * w, w, out.begin() + r * total + off);
      off += w;
    }
    return out;
  };
  Tensor<S> out = Tensor<S>::from(out_shape, compute());
  return record<S>(
      "concat_last", {parts.begin(), parts.end()}, out,
      [parts, rows, total](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        int off = 0;
        for (const auto& p : parts) {
          int w = p.shape().back();
          if (p.needs_grad()) {
            std::vector<S> gp(static_cast<std::size_t>(rows * w));
            for (std::int64_t r = 0; r < rows; ++r)
              std::copy_n(g.begin() + r * total + off, w, gp.begin() + r * w);
            accumulate_grad(p, gp);
          }
          off += w;
        }
      },
      compute);
}

// Mean over the given axes (removed from the shape). Used for global average
// pooling (axes {1,2} on NHWC) and scalar reductions.
template <typename S>
Tensor<S> mean(const Tensor<S>& x, const std::vector<int>& axes) {
  int r = x.rank();
  std::vector<char> reduce(static_cast<std::size_t>(r), 0);
  for (int a : axes) reduce[static_cast<std::size_t>(resolve_axis(a, r))] = 1;
  Shape out_shape;
  for (int k = 0; k < r; ++k)
    if (!reduce[static_cast<std::size_t>(k)])
      out_shape.push_back(x.shape()[static_cast<std::size_t>(k)]);
  std::int64_t count = x.size() / std::max<std::int64_t>(numel(out_shape), 1);
  auto in_strides = strides_of(x.shape());
  Shape xs = x.shape();
  // Output linear index for an input linear index.
  auto project = [r, xs, in_strides, reduce](std::int64_t i) {
    std::int64_t rem = i, o = 0;
    for (int k = 0; k < r; ++k) {
      std::int64_t c = rem / in_strides[static_cast<std::size_t>(k)];
      rem %= in_strides[static_cast<std::size_t>(k)];
      if (!reduce[static_cast<std::size_t>(k)])
        o = o * xs[static_cast<std::size_t>(k)] + c;
    }
    return o;
  };
  auto compute = [x, out_shape, project, count]() {
    std::vector<S> out(static_cast<std::size_t>(numel(out_shape)), S(0));
    const auto& v = x.values();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(v.size()); ++i)
      out[static_cast<std::size_t>(project(i))] += v[static_cast<std::size_t>(i)];
    for (auto& o : out) o /= static_cast<S>(count);
    return out;
  };
  Tensor<S> out = Tensor<S>::from(out_shape, compute());
  return record<S>(
      "mean", {x}, out,
      [x, project, count](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        std::vector<S> gx(x.values().size());
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(gx.size()); ++i)
          gx[static_cast<std::size_t>(i)] =
              g[static_cast<std::size_t>(project(i))] / static_cast<S>(count);
        accumulate_grad(x, gx);
      },
      compute);
}

// ============================================================================
// linear algebra
// ============================================================================

namespace detail {

// C[M,N] = A[M,K] * B[K,N], row-major, chunked over rows of A.
template <typename S>
void gemm(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
          std::int64_t n) {
  parallel_for(
      m,
      [&](std::int64_t r0, std::int64_t r1) {
        MutMap<S>(c + r0 * n, r1 - r0, n).noalias() =
            MatMap<S>(a + r0 * k, r1 - r0, k) * MatMap<S>(b, k, n);
      },
      256);
}

}  // namespace detail

// Batched matmul: a[..,M,K] x b[..,K,N] with identical leading dims, or b of
// rank 2 shared across the batch.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() >= 2 && b.rank() >= 2, "matmul: ranks must be >= 2, got " +
                                            shape_str(a.shape()) + " x " +
                                            shape_str(b.shape()));
  int ra = a.rank(), rb = b.rank();
  std::int64_t M = a.shape()[static_cast<std::size_t>(ra - 2)];
  std::int64_t K = a.shape()[static_cast<std::size_t>(ra - 1)];
  std::int64_t Kb = b.shape()[static_cast<std::size_t>(rb - 2)];
  std::int64_t N = b.shape()[static_cast<std::size_t>(rb - 1)];
  check(K == Kb, "matmul: inner dimensions differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  bool shared_b = rb == 2 && ra > 2;
  if (!shared_b)
    check(std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                     b.shape().end() - 2) &&
              ra == rb,
          "matmul: leading dimensions differ: " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  std::int64_t batch = a.size() / (M * K);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(static_cast<int>(N));
  auto compute = [a, b, batch, M, K, N, shared_b]() {
    std::vector<S> out(static_cast<std::size_t>(batch * M * N));
    const S* pa = a.values().data();
    const S* pb = b.values().data();
    parallel_for(
        batch,
        [&](std::int64_t b0, std::int64_t b1) {
          for (std::int64_t i = b0; i < b1; ++i)
            detail::gemm(pa + i * M * K, shared_b ? pb : pb + i * K * N,
                         out.data() + i * M * N, M, K, N);
        },
        1);
    macs::add(batch * M * K * N);
    return out;
  };
  Tensor<S> out = Tensor<S>::from(out_shape, compute());
  return record<S>(
      "matmul", {a, b}, out,
      [a, b, batch, M, K, N, shared_b](const Tensor<S>& o) {
        const S* g = o.grad_ref().data();
        const S* pa = a.values().data();
        const S* pb = b.values().data();
        if (a.needs_grad()) {
          std::vector<S> ga(a.values().size());
          for (std::int64_t i = 0; i < batch; ++i)
            MutMap<S>(ga.data() + i * M * K, M, K).noalias() =
                MatMap<S>(g + i * M * N, M, N) *
                MatMap<S>(shared_b ? pb : pb + i * K * N, K, N).transpose();
          accumulate_grad(a, ga);
        }
        if (b.needs_grad()) {
          std::vector<S> gb(b.values().size(), S(0));
          for (std::int64_t i = 0; i < batch; ++i) {
            MutMap<S> acc(gb.data() + (shared_b ? 0 : i * K * N), K, N);
            acc.noalias() += MatMap<S>(pa + i * M * K, M, K).transpose() *
                             MatMap<S>(g + i * M * N, M, N);
          }
          accumulate_grad(b, gb);
        }
      },
      compute);
}

// y[.., Dout] = x[.., Din] * w[Din, Dout] + bias. Pass a default-constructed
// tensor for no bias.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  check(x.rank() >= 1 && w.rank() == 2,
        "linear: expected x[..,Din] and w[Din,Dout], got " +
            shape_str(x.shape()) + " and " + shape_str(w.shape()));
  std::int64_t din = x.shape().back();
  std::int64_t dout = w.shape()[1];
  check(din == w.shape()[0], "linear: x last extent " + std::to_string(din) +
                                 " != w rows " + std::to_string(w.shape()[0]));
  if (bias.defined())
    check(bias.rank() == 1 && bias.shape()[0] == dout,
          "linear: bias shape " + shape_str(bias.shape()) + " != [" +
              std::to_string(dout) + "]");
  std::int64_t rows = x.size() / din;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(static_cast<int>(dout));
  auto compute = [x, w, bias, rows, din, dout]() {
    std::vector<S> out(static_cast<std::size_t>(rows * dout));
    detail::gemm(x.values().data(), w.values().data(), out.data(), rows, din, dout);
    if (bias.defined()) {
      const auto& bv = bias.values();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < dout; ++j)
          out[static_cast<std::size_t>(r * dout + j)] += bv[static_cast<std::size_t>(j)];
    }
    macs::add(rows * din * dout);
    return out;
  };
  Tensor<S> out = Tensor<S>::from(out_shape, compute());
  std::vector<Tensor<S>> inputs = {x, w};
  if (bias.defined()) inputs.push_back(bias);
  return record<S>(
      "linear", std::move(inputs), out,
      [x, w, bias, rows, din, dout](const Tensor<S>& o) {
        const S* g = o.grad_ref().data();
        if (x.needs_grad()) {
          std::vector<S> gx(x.values().size());
          MutMap<S>(gx.data(), rows, din).noalias() =
              MatMap<S>(g, rows, dout) * MatMap<S>(w.values().data(), din, dout).transpose();
          accumulate_grad(x, gx);
        }
        if (w.needs_grad()) {
          std::vector<S> gw(w.values().size());
          MutMap<S>(gw.data(), din, dout).noalias() =
              MatMap<S>(x.values().data(), rows, din).transpose() *
              MatMap<S>(g, rows, dout);
          accumulate_grad(w, gw);
        }
        if (bias.defined() && bias.needs_grad()) {
          std::vector<S> gb(static_cast<std::size_t>(dout), S(0));
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < dout; ++j)
              gb[static_cast<std::size_t>(j)] += g[r * dout + j];
          accumulate_grad(bias, gb);
        }
      },
      compute);
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  return linear(x, w, Tensor<S>());
}

// ============================================================================
// normalization and softmax
// ============================================================================

// Layer norm over the last axis with learnable gamma/beta.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-6)) {
  std::int64_t d = x.shape().back();
  check(gamma.rank() == 1 && gamma.shape()[0] == d && beta.rank() == 1 &&
            beta.shape()[0] == d,
        "layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
            shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  std::int64_t rows = x.size() / d;
  auto compute = [x, gamma, beta, rows, d, eps]() {
    std::vector<S> out(x.values().size());
    const auto& v = x.values();
    const auto& gm = gamma.values();
    const auto& bt = beta.values();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* row = v.data() + r * d;
      S m = S(0);
      for (std::int64_t j = 0; j < d; ++j) m += row[j];
      m /= static_cast<S>(d);
      S var = S(0);
      for (std::int64_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
      var /= static_cast<S>(d);
      S inv = S(1) / std::sqrt(var + eps);
      for (std::int64_t j = 0; j < d; ++j)
        out[static_cast<std::size_t>(r * d + j)] =
            (row[j] - m) * inv * gm[static_cast<std::size_t>(j)] +
            bt[static_cast<std::size_t>(j)];
    }
    return out;
  };
  Tensor<S> out = Tensor<S>::from(x.shape(), compute());
  return record<S>(
      "layer_norm", {x, gamma, beta}, out,
      [x, gamma, beta, rows, d, eps](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& v = x.values();
        const auto& gm = gamma.values();
        std::vector<S> gx(v.size(), S(0)), gg(static_cast<std::size_t>(d), S(0)),
            gb(static_cast<std::size_t>(d), S(0));
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* row = v.data() + r * d;
          const S* go = g.data() + r * d;
          S m = S(0);
          for (std::int64_t j = 0; j < d; ++j) m += row[j];
          m /= static_cast<S>(d);
          S var = S(0);
          for (std::int64_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
          var /= static_cast<S>(d);
          S inv = S(1) / std::sqrt(var + eps);
          // dxhat = dy * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          S mean_dxh = S(0), mean_dxh_xh = S(0);
          for (std::int64_t j = 0; j < d; ++j) {
            S xh = (row[j] - m) * inv;
            S dxh = go[j] * gm[static_cast<std::size_t>(j)];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh;
            gg[static_cast<std::size_t>(j)] += go[j] * xh;
            gb[static_cast<std::size_t>(j)] += go[j];
          }
          mean_dxh /= static_cast<S>(d);
          mean_dxh_xh /= static_cast<S>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            S xh = (row[j] - m) * inv;
            S dxh = go[j] * gm[static_cast<std::size_t>(j)];
            gx[static_cast<std::size_t>(r * d + j)] =
                inv * (dxh - mean_dxh - xh * mean_dxh_xh);
          }
        }
        accumulate_grad(x, gx);
        accumulate_grad(gamma, gg);
        accumulate_grad(beta, gb);
      },
      compute);
}

// Boolean visibility mask for softmax: keep[i] != 0 means the position
// participates. Broadcast against the trailing axes of the logits.
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  static BoolMask causal(int t) {
    BoolMask m;
    m.shape = {t, t};
    m.keep.assign(static_cast<std::size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j <= i; ++j)
        m.keep[static_cast<std::size_t>(i) * t + j] = 1;
    return m;
  }
};

// Softmax over the last axis. Masked-out entries are exactly zero in the
// output and receive zero gradient. A row with every entry masked is an error.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, const BoolMask* mask = nullptr) {
  std::int64_t d = x.shape().back();
  std::int64_t rows = x.size() / d;
  std::int64_t mask_n = 0;
  if (mask) {
    check(!mask->shape.empty() && mask->shape.back() == d,
          "softmax: mask last extent must be " + std::to_string(d) + ", got " +
              shape_str(mask->shape));
    mask_n = numel(mask->shape);
    check(mask_n > 0 && x.size() % mask_n == 0,
          "softmax: mask " + shape_str(mask->shape) +
              " does not broadcast over " + shape_str(x.shape()));
    check(static_cast<std::int64_t>(mask->keep.size()) == mask_n,
          "softmax: mask buffer size mismatch");
  }
  std::vector<std::uint8_t> keep = mask ? mask->keep : std::vector<std::uint8_t>();
  auto compute = [x, rows, d, keep, mask_n]() {
    std::vector<S> out(x.values().size());
    const auto& v = x.values();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* row = v.data() + r * d;
      const std::uint8_t* km =
          keep.empty() ? nullptr : keep.data() + (r * d) % mask_n;
      S m = S(0);
      bool any = false;
      for (std::int64_t j = 0; j < d; ++j) {
        if (km && !km[j]) continue;
        m = any ? std::max(m, row[j]) : row[j];
        any = true;
      }
      check(any, "softmax: fully masked row " + std::to_string(r));
      S z = S(0);
      for (std::int64_t j = 0; j < d; ++j) {
        S e = (km && !km[j]) ? S(0) : std::exp(row[j] - m);
        out[static_cast<std::size_t>(r * d + j)] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < d; ++j)
        out[static_cast<std::size_t>(r * d + j)] /= z;
    }
    return out;
  };
  Tensor<S> out = Tensor<S>::from(x.shape(), compute());
  return record<S>(
      "softmax", {x}, out,
      [x, rows, d](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& y = o.values();
        std::vector<S> gx(g.size());
        for (std::int64_t r = 0; r < rows; ++r) {
          S dot = S(0);
          for (std::int64_t j = 0; j < d; ++j)
            dot += g[static_cast<std::size_t>(r * d + j)] *
                   y[static_cast<std::size_t>(r * d + j)];
          for (std::int64_t j = 0; j < d; ++j) {
            std::size_t i = static_cast<std::size_t>(r * d + j);
            gx[i] = y[i] * (g[i] - dot);  // masked entries: y == 0 -> grad 0
          }
        }
        accumulate_grad(x, gx);
      },
      compute);
}

// ============================================================================
// convolutions (NHWC)
// ============================================================================

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int pad) {
  int span = in + 2 * pad - k;
  check(span >= 0, "conv: kernel " + std::to_string(k) + " exceeds padded input " +
                       std::to_string(in + 2 * pad));
  return span / stride + 1;
}

}  // namespace detail

// conv2d: x[B,H,W,Cin] * k[kh,kw,Cin,Cout] (+ bias[Cout]) with symmetric zero
// padding. Implemented as im2col + GEMM per image.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& k, const Tensor<S>& bias,
                 int stride = 1, int padding = 0) {
  check(x.rank() == 4 && k.rank() == 4,
        "conv2d: expected x[B,H,W,Cin] and k[kh,kw,Cin,Cout], got " +
            shape_str(x.shape()) + " and " + shape_str(k.shape()));
  int B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], Cin = x.shape()[3];
  int kh = k.shape()[0], kw = k.shape()[1], Cout = k.shape()[3];
  check(k.shape()[2] == Cin, "conv2d: kernel Cin " + std::to_string(k.shape()[2]) +
                                 " != input Cin " + std::to_string(Cin));
  check(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  if (bias.defined())
    check(bias.rank() == 1 && bias.shape()[0] == Cout, "conv2d: bias must be [Cout]");
  int Ho = detail::conv_out_extent(H, kh, stride, padding);
  int Wo = detail::conv_out_extent(W, kw, stride, padding);
  std::int64_t patch = static_cast<std::int64_t>(kh) * kw * Cin;
  std::int64_t opix = static_cast<std::int64_t>(Ho) * Wo;

  // Gathers the [opix, patch] im2col matrix for one image.
  auto make_col = [=](const S* img, S* col) {
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        S* dst = col + (static_cast<std::int64_t>(oy) * Wo + ox) * patch;
        for (int i = 0; i < kh; ++i) {
          int y = oy * stride - padding + i;
          for (int j = 0; j < kw; ++j) {
            int xph = ox * stride - padding + j;
            S* cell = dst + (static_cast<std::int64_t>(i) * kw + j) * Cin;
            if (y < 0 || y >= H || xph < 0 || xph >= W) {
              std::fill_n(cell, Cin, S(0));
            } else {
              const S* src = img + (static_cast<std::int64_t>(y) * W + xph) * Cin;
              std::copy_n(src, Cin, cell);
            }
          }
        }
      }
  };
  auto compute = [x, k, bias, B, H, W, Cin, Cout, Ho, Wo, patch, opix, make_col]() {
    std::vector<S> out(static_cast<std::size_t>(B) * opix * Cout);
    const S* kv = k.values().data();
    const S* xv = x.values().data();
    parallel_for(
        B,
        [&](std::int64_t b0, std::int64_t b1) {
          std::vector<S> col(static_cast<std::size_t>(opix * patch));
          for (std::int64_t b = b0; b < b1; ++b) {
            make_col(xv + b * H * W * Cin, col.data());
            MutMap<S>(out.data() + b * opix * Cout, opix, Cout).noalias() =
                MatMap<S>(col.data(), opix, patch) * MatMap<S>(kv, patch, Cout);
          }
        },
        1);
    if (bias.defined()) {
      const auto& bv = bias.values();
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * opix; ++p)
        for (int c = 0; c < Cout; ++c)
          out[static_cast<std::size_t>(p * Cout + c)] += bv[static_cast<std::size_t>(c)];
    }
    macs::add(static_cast<std::int64_t>(B) * opix * patch * Cout);
    return out;
  };
  Tensor<S> out = Tensor<S>::from({B, Ho, Wo, Cout}, compute());
  std::vector<Tensor<S>> inputs = {x, k};
  if (bias.defined()) inputs.push_back(bias);
  return record<S>(
      "conv2d", std::move(inputs), out,
      [x, k, bias, B, H, W, Cin, Cout, Ho, Wo, patch, opix, stride, padding,
       make_col](const Tensor<S>& o) {
        const S* g = o.grad_ref().data();
        const S* xv = x.values().data();
        const S* kv = k.values().data();
        std::vector<S> col(static_cast<std::size_t>(opix * patch));
        std::vector<S> gcol(static_cast<std::size_t>(opix * patch));
        std::vector<S> gk(k.values().size(), S(0));
        std::vector<S> gx(x.values().size(), S(0));
        for (int b = 0; b < B; ++b) {
          const S* gb = g + static_cast<std::int64_t>(b) * opix * Cout;
          if (k.needs_grad()) {
            make_col(xv + static_cast<std::int64_t>(b) * H * W * Cin, col.data());
            MutMap<S>(gk.data(), patch, Cout).noalias() +=
                MatMap<S>(col.data(), opix, patch).transpose() *
                MatMap<S>(gb, opix, Cout);
          }
          if (x.needs_grad()) {
            MutMap<S>(gcol.data(), opix, patch).noalias() =
                MatMap<S>(gb, opix, Cout) * MatMap<S>(kv, patch, Cout).transpose();
            // col2im scatter-add
            S* gimg = gx.data() + static_cast<std::int64_t>(b) * H * W * Cin;
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                const S* src =
                    gcol.data() + (static_cast<std::int64_t>(oy) * Wo + ox) * patch;
                for (int i = 0; i < static_cast<int>(patch / Cin); ++i) {
                  int ky = i / static_cast<int>(k.shape()[1]);
                  int kx = i % static_cast<int>(k.shape()[1]);
                  int y = oy * stride - padding + ky;
                  int xp = ox * stride - padding + kx;
                  if (y < 0 || y >= H || xp < 0 || xp >= W) continue;
                  S* dst = gimg + (static_cast<std::int64_t>(y) * W + xp) * Cin;
                  const S* cell = src + static_cast<std::int64_t>(i) * Cin;
                  for (int c = 0; c < Cin; ++c) dst[c] += cell[c];
                }
              }
          }
        }
        if (x.needs_grad()) accumulate_grad(x, gx);
        if (k.needs_grad()) accumulate_grad(k, gk);
        if (bias.defined() && bias.needs_grad()) {
          std::vector<S> gbias(static_cast<std::size_t>(Cout), S(0));
          for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * opix; ++p)
            for (int c = 0; c < Cout; ++c)
              gbias[static_cast<std::size_t>(c)] += g[p * Cout + c];
          accumulate_grad(bias, gbias);
        }
      },
      compute);
}

// Depthwise conv2d: x[B,H,W,C] * k[kh,kw,C] (+ bias[C]), one filter per
// channel, symmetric zero padding. Direct loops, vectorized over channels.
template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& k,
                           const Tensor<S>& bias, int stride = 1,
                           int padding = 0) {
  check(x.rank() == 4 && k.rank() == 3,
        "depthwise_conv2d: expected x[B,H,W,C] and k[kh,kw,C], got " +
            shape_str(x.shape()) + " and " + shape_str(k.shape()));
  int B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
  int kh = k.shape()[0], kw = k.shape()[1];
  check(k.shape()[2] == C, "depthwise_conv2d: kernel channels " +
                               std::to_string(k.shape()[2]) + " != input channels " +
                               std::to_string(C));
  check(stride >= 1 && padding >= 0, "depthwise_conv2d: bad stride/padding");
  if (bias.defined())
    check(bias.rank() == 1 && bias.shape()[0] == C, "depthwise_conv2d: bias must be [C]");
  int Ho = detail::conv_out_extent(H, kh, stride, padding);
  int Wo = detail::conv_out_extent(W, kw, stride, padding);
  auto compute = [x, k, bias, B, H, W, C, kh, kw, Ho, Wo, stride, padding]() {
    std::vector<S> out(static_cast<std::size_t>(B) * Ho * Wo * C, S(0));
    const S* xv = x.values().data();
    const S* kv = k.values().data();
    parallel_for(
        B,
        [&](std::int64_t b0, std::int64_t b1) {
          for (std::int64_t b = b0; b < b1; ++b)
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                S* dst = out.data() +
                         ((b * Ho + oy) * Wo + ox) * static_cast<std::int64_t>(C);
                for (int i = 0; i < kh; ++i) {
                  int y = oy * stride - padding + i;
                  if (y < 0 || y >= H) continue;
                  for (int j = 0; j < kw; ++j) {
                    int xp = ox * stride - padding + j;
                    if (xp < 0 || xp >= W) continue;
                    const S* src =
                        xv + ((b * H + y) * W + xp) * static_cast<std::int64_t>(C);
                    const S* kc = kv + (static_cast<std::int64_t>(i) * kw + j) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c] * kc[c];
                  }
                }
              }
        },
        1);
    if (bias.defined()) {
      const auto& bv = bias.values();
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * Ho * Wo; ++p)
        for (int c = 0; c < C; ++c)
          out[static_cast<std::size_t>(p * C + c)] += bv[static_cast<std::size_t>(c)];
    }
    macs::add(static_cast<std::int64_t>(B) * Ho * Wo * kh * kw * C);
    return out;
  };
  Tensor<S> out = Tensor<S>::from({B, Ho, Wo, C}, compute());
  std::vector<Tensor<S>> inputs = {x, k};
  if (bias.defined()) inputs.push_back(bias);
  return record<S>(
      "depthwise_conv2d", std::move(inputs), out,
      [x, k, bias, B, H, W, C, kh, kw, Ho, Wo, stride, padding](const Tensor<S>& o) {
        const S* g = o.grad_ref().data();
        const S* xv = x.values().data();
        const S* kv = k.values().data();
        std::vector<S> gx(x.values().size(), S(0));
        std::vector<S> gk(k.values().size(), S(0));
        for (int b = 0; b < B; ++b)
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const S* go = g + ((static_cast<std::int64_t>(b) * Ho + oy) * Wo + ox) * C;
              for (int i = 0; i < kh; ++i) {
                int y = oy * stride - padding + i;
                if (y < 0 || y >= H) continue;
                for (int j = 0; j < kw; ++j) {
                  int xp = ox * stride - padding + j;
                  if (xp < 0 || xp >= W) continue;
                  std::int64_t xoff = ((static_cast<std::int64_t>(b) * H + y) * W + xp) * C;
                  std::int64_t koff = (static_cast<std::int64_t>(i) * kw + j) * C;
                  for (int c = 0; c < C; ++c) {
                    gx[static_cast<std::size_t>(xoff + c)] += go[c] * kv[koff + c];
                    gk[static_cast<std::size_t>(koff + c)] += go[c] * xv[xoff + c];
                  }
                }
              }
            }
        if (x.needs_grad()) accumulate_grad(x, gx);
        if (k.needs_grad()) accumulate_grad(k, gk);
        if (bias.defined() && bias.needs_grad()) {
          std::vector<S> gbias(static_cast<std::size_t>(C), S(0));
          for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * Ho * Wo; ++p)
            for (int c = 0; c < C; ++c)
              gbias[static_cast<std::size_t>(c)] += g[p * C + c];
          accumulate_grad(bias, gbias);
        }
      },
      compute);
}

// ============================================================================
// loss
// ============================================================================

// Mean cross-entropy of logits[B,K] against integer labels with label
// smoothing: target q = (1-eps) * onehot + eps/K. Gradient is (p - q) / B.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels,
                        S smoothing = S(0)) {
  check(logits.rank() == 2, "cross_entropy: logits must be [B,K], got " +
                                shape_str(logits.shape()));
  int B = logits.shape()[0], K = logits.shape()[1];
  check(static_cast<int>(labels.size()) == B,
        "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
            std::to_string(B));
  check(smoothing >= S(0) && smoothing < S(1), "cross_entropy: smoothing outside [0,1)");
  for (int lb : labels)
    check(lb >= 0 && lb < K, "cross_entropy: label " + std::to_string(lb) +
                                 " outside [0," + std::to_string(K) + ")");
  auto compute = [logits, labels, B, K, smoothing]() {
    const auto& v = logits.values();
    S total = S(0);
    for (int b = 0; b < B; ++b) {
      const S* row = v.data() + static_cast<std::int64_t>(b) * K;
      S m = row[0];
      for (int j = 1; j < K; ++j) m = std::max(m, row[j]);
      S z = S(0), sum_x = S(0);
      for (int j = 0; j < K; ++j) {
        z += std::exp(row[j] - m);
        sum_x += row[j];
      }
      S lse = m + std::log(z);
      // loss = lse - sum_j q_j x_j with q = (1-eps) onehot + eps/K
      total += lse - (S(1) - smoothing) * row[labels[static_cast<std::size_t>(b)]] -
               smoothing / static_cast<S>(K) * sum_x;
    }
    return std::vector<S>{total / static_cast<S>(B)};
  };
  Tensor<S> out = Tensor<S>::from({}, compute());
  return record<S>(
      "cross_entropy", {logits}, out,
      [logits, labels, B, K, smoothing](const Tensor<S>& o) {
        S go = o.grad_ref()[0];
        const auto& v = logits.values();
        std::vector<S> gl(v.size());
        for (int b = 0; b < B; ++b) {
          const S* row = v.data() + static_cast<std::int64_t>(b) * K;
          S m = row[0];
          for (int j = 1; j < K; ++j) m = std::max(m, row[j]);
          S z = S(0);
          for (int j = 0; j < K; ++j) z += std::exp(row[j] - m);
          for (int j = 0; j < K; ++j) {
            S p = std::exp(row[j] - m) / z;
            S q = smoothing / static_cast<S>(K) +
                  (j == labels[static_cast<std::size_t>(b)] ? S(1) - smoothing : S(0));
            gl[static_cast<std::size_t>(b) * K + j] = go * (p - q) / static_cast<S>(B);
          }
        }
        accumulate_grad(logits, gl);
      },
      compute);
}

// Row-wise argmax of [B,K] (plain helper, no autograd).
template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& x) {
  check(x.rank() == 2, "argmax_rows: expected [B,K]");
  int B = x.shape()[0], K = x.shape()[1];
  std::vector<int> out(static_cast<std::size_t>(B));
  const auto& v = x.values();
  for (int b = 0; b < B; ++b) {
    const S* row = v.data() + static_cast<std::int64_t>(b) * K;
    int best = 0;
    for (int j = 1; j < K; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(b)] = best;
  }
  return out;
}

}  // namespace mokt
