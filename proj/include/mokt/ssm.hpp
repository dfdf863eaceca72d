#pragma once

#include <cmath>
#include <utility>

#include "mokt/ops.hpp"
#include "mokt/tensor.hpp"

namespace mokt {

// Selective state-space mixer. The recurrence per channel d with state size N:
//   h_t = A_bar_t (*) h_{t-1} + B_bar_t * x_t,   y_t = C_t . h_t
// with input-dependent discretization
//   A_bar = exp(delta (*) A),  B_bar = f(delta (*) A) * delta (*) B,
//   f(z) = (exp(z) - 1) / z.
// A is diagonal and strictly negative (parameterized as -exp(a_log)), delta is
// strictly positive (softplus of a projection), so |A_bar| < 1 and the scan is
// contractive for bounded inputs.

namespace detail {

// Series switch for f(z) = (e^z - 1)/z. Below the threshold the direct form
// loses all significant digits to cancellation; the two-term series is exact
// to ~1e-13 there.
template <typename S>
inline S phi(S z) {
  if (std::abs(z) < S(1e-6)) return S(1) + z / S(2);
  return std::expm1(z) / z;
}

// dphi/dz = (e^z (z - 1) + 1) / z^2, with its own cancellation-safe series.
template <typename S>
inline S dphi(S z) {
  if (std::abs(z) < S(1e-3)) return S(0.5) + z / S(3) + z * z / S(8);
  return (std::exp(z) * (z - S(1)) + S(1)) / (z * z);
}

}  // namespace detail

// Zero-order-hold discretization. delta[..,T,D] (positive), A[D,N]
// (non-positive), B[..,T,N] -> (A_bar, B_bar), both [..,T,D,N]:
//   A_bar[t,d,n] = exp(delta[t,d] A[d,n])
//   B_bar[t,d,n] = phi(delta[t,d] A[d,n]) * delta[t,d] * B[t,n]
template <typename S>
std::pair<Tensor<S>, Tensor<S>> ssm_discretize(const Tensor<S>& delta,
                                               const Tensor<S>& A,
                                               const Tensor<S>& B) {
  check(delta.rank() >= 2 && A.rank() == 2 && B.rank() == delta.rank(),
        "ssm_discretize: expected delta[..,T,D], A[D,N], B[..,T,N], got " +
            shape_str(delta.shape()) + ", " + shape_str(A.shape()) + ", " +
            shape_str(B.shape()));
  int D = delta.shape().back();
  int N = A.shape()[1];
  check(A.shape()[0] == D, "ssm_discretize: A rows " + std::to_string(A.shape()[0]) +
                               " != channels " + std::to_string(D));
  check(B.shape().back() == N, "ssm_discretize: B last extent " +
                                   std::to_string(B.shape().back()) +
                                   " != state size " + std::to_string(N));
  check(std::equal(delta.shape().begin(), delta.shape().end() - 1, B.shape().begin()),
        "ssm_discretize: delta " + shape_str(delta.shape()) + " and B " +
            shape_str(B.shape()) + " disagree on leading extents");
  for (const S v : delta.values())
    check(v > S(0), "ssm_discretize: delta must be strictly positive");
  for (const S v : A.values())
    check(v <= S(0), "ssm_discretize: A must be non-positive");

  std::int64_t steps = delta.size() / D;  // leading * T
  Shape out_shape(delta.shape());
  out_shape.push_back(N);

  auto compute_abar = [delta, A, steps, D, N]() {
    std::vector<S> out(static_cast<std::size_t>(steps) * D * N);
    const auto& dv = delta.values();
    const auto& av = A.values();
    for (std::int64_t s = 0; s < steps; ++s)
      for (int d = 0; d < D; ++d) {
        S dl = dv[static_cast<std::size_t>(s * D + d)];
        for (int n = 0; n < N; ++n)
          out[static_cast<std::size_t>((s * D + d) * N + n)] =
              std::exp(dl * av[static_cast<std::size_t>(d) * N + n]);
      }
    return out;
  };
  auto compute_bbar = [delta, A, B, steps, D, N]() {
    std::vector<S> out(static_cast<std::size_t>(steps) * D * N);
    const auto& dv = delta.values();
    const auto& av = A.values();
    const auto& bv = B.values();
    for (std::int64_t s = 0; s < steps; ++s)
      for (int d = 0; d < D; ++d) {
        S dl = dv[static_cast<std::size_t>(s * D + d)];
        for (int n = 0; n < N; ++n) {
          S z = dl * av[static_cast<std::size_t>(d) * N + n];
          out[static_cast<std::size_t>((s * D + d) * N + n)] =
              detail::phi(z) * dl * bv[static_cast<std::size_t>(s * N + n)];
        }
      }
    return out;
  };

  Tensor<S> a_bar = Tensor<S>::from(out_shape, compute_abar());
  Tensor<S> b_bar = Tensor<S>::from(out_shape, compute_bbar());

  a_bar = record<S>(
      "ssm_discretize_abar", {delta, A}, a_bar,
      [delta, A, steps, D, N](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& y = o.values();  // exp(z)
        const auto& dv = delta.values();
        const auto& av = A.values();
        std::vector<S> gd(dv.size(), S(0)), ga(av.size(), S(0));
        for (std::int64_t s = 0; s < steps; ++s)
          for (int d = 0; d < D; ++d) {
            S dl = dv[static_cast<std::size_t>(s * D + d)];
            for (int n = 0; n < N; ++n) {
              std::size_t i = static_cast<std::size_t>((s * D + d) * N + n);
              S ge = g[i] * y[i];  // dL/dz
              gd[static_cast<std::size_t>(s * D + d)] +=
                  ge * av[static_cast<std::size_t>(d) * N + n];
              ga[static_cast<std::size_t>(d) * N + n] += ge * dl;
            }
          }
        accumulate_grad(delta, gd);
        accumulate_grad(A, ga);
      },
      compute_abar);
  b_bar = record<S>(
      "ssm_discretize_bbar", {delta, A, B}, b_bar,
      [delta, A, B, steps, D, N](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& dv = delta.values();
        const auto& av = A.values();
        const auto& bv = B.values();
        std::vector<S> gd(dv.size(), S(0)), ga(av.size(), S(0)), gb(bv.size(), S(0));
        for (std::int64_t s = 0; s < steps; ++s)
          for (int d = 0; d < D; ++d) {
            S dl = dv[static_cast<std::size_t>(s * D + d)];
            for (int n = 0; n < N; ++n) {
              std::size_t i = static_cast<std::size_t>((s * D + d) * N + n);
              S a = av[static_cast<std::size_t>(d) * N + n];
              S b = bv[static_cast<std::size_t>(s * N + n)];
              S z = dl * a;
              S f = detail::phi(z);
              S fp = detail::dphi(z);
              // B_bar = f(dl a) dl b: product rule through both dl factors
              gd[static_cast<std::size_t>(s * D + d)] +=
                  g[i] * b * (fp * a * dl + f);
              ga[static_cast<std::size_t>(d) * N + n] += g[i] * b * fp * dl * dl;
              gb[static_cast<std::size_t>(s * N + n)] += g[i] * f * dl;
            }
          }
        accumulate_grad(delta, gd);
        accumulate_grad(A, ga);
        accumulate_grad(B, gb);
      },
      compute_bbar);
  return {a_bar, b_bar};
}

// state_scale: b[..,T,D,N] = B_bar[..,T,D,N] * x[..,T,D], x broadcast over N.
template <typename S>
Tensor<S> state_scale(const Tensor<S>& b_bar, const Tensor<S>& x) {
  check(b_bar.rank() == x.rank() + 1 &&
            std::equal(x.shape().begin(), x.shape().end(), b_bar.shape().begin()),
        "state_scale: " + shape_str(b_bar.shape()) + " does not extend " +
            shape_str(x.shape()));
  int N = b_bar.shape().back();
  auto compute = [b_bar, x, N]() {
    std::vector<S> out(b_bar.values());
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.size()); ++i)
      out[static_cast<std::size_t>(i)] *= xv[static_cast<std::size_t>(i / N)];
    return out;
  };
  Tensor<S> out = Tensor<S>::from(b_bar.shape(), compute());
  return record<S>(
      "state_scale", {b_bar, x}, out,
      [b_bar, x, N](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        if (b_bar.needs_grad()) {
          std::vector<S> gb(g.size());
          const auto& xv = x.values();
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i)
            gb[static_cast<std::size_t>(i)] =
                g[static_cast<std::size_t>(i)] * xv[static_cast<std::size_t>(i / N)];
          accumulate_grad(b_bar, gb);
        }
        if (x.needs_grad()) {
          std::vector<S> gx(x.values().size(), S(0));
          const auto& bv = b_bar.values();
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i)
            gx[static_cast<std::size_t>(i / N)] +=
                g[static_cast<std::size_t>(i)] * bv[static_cast<std::size_t>(i)];
          accumulate_grad(x, gx);
        }
      },
      compute);
}

// state_contract: y[..,T,D] = sum_n h[..,T,D,N] * C[..,T,N].
template <typename S>
Tensor<S> state_contract(const Tensor<S>& h, const Tensor<S>& C) {
  check(h.rank() >= 3 && C.rank() == h.rank() - 1,
        "state_contract: expected h[..,T,D,N] and C[..,T,N], got " +
            shape_str(h.shape()) + " and " + shape_str(C.shape()));
  int N = h.shape().back();
  int D = h.shape()[static_cast<std::size_t>(h.rank() - 2)];
  check(C.shape().back() == N &&
            std::equal(C.shape().begin(), C.shape().end() - 1, h.shape().begin()),
        "state_contract: C " + shape_str(C.shape()) + " does not match h " +
            shape_str(h.shape()));
  Shape out_shape(h.shape().begin(), h.shape().end() - 1);
  std::int64_t steps = numel(out_shape) / D;  // leading * T
  auto compute = [h, C, steps, D, N, out_shape]() {
    std::vector<S> out(static_cast<std::size_t>(numel(out_shape)), S(0));
    const auto& hv = h.values();
    const auto& cv = C.values();
    for (std::int64_t s = 0; s < steps; ++s)
      for (int d = 0; d < D; ++d) {
        S acc = S(0);
        for (int n = 0; n < N; ++n)
          acc += hv[static_cast<std::size_t>((s * D + d) * N + n)] *
                 cv[static_cast<std::size_t>(s * N + n)];
        out[static_cast<std::size_t>(s * D + d)] = acc;
      }
    return out;
  };
  Tensor<S> out = Tensor<S>::from(out_shape, compute());
  return record<S>(
      "state_contract", {h, C}, out,
      [h, C, steps, D, N](const Tensor<S>& o) {
        const auto& g = o.grad_ref();
        const auto& hv = h.values();
        const auto& cv = C.values();
        if (h.needs_grad()) {
          std::vector<S> gh(hv.size());
          for (std::int64_t s = 0; s < steps; ++s)
            for (int d = 0; d < D; ++d)
              for (int n = 0; n < N; ++n)
                gh[static_cast<std::size_t>((s * D + d) * N + n)] =
                    g[static_cast<std::size_t>(s * D + d)] *
                    cv[static_cast<std::size_t>(s * N + n)];
          accumulate_grad(h, gh);
        }
        if (C.needs_grad()) {
          std::vector<S> gc(cv.size(), S(0));
          for (std::int64_t s = 0; s < steps; ++s)
            for (int d = 0; d < D; ++d)
              for (int n = 0; n < N; ++n)
                gc[static_cast<std::size_t>(s * N + n)] +=
                    g[static_cast<std::size_t>(s * D + d)] *
                    hv[static_cast<std::size_t>((s * D + d) * N + n)];
          accumulate_grad(C, gc);
        }
      },
      compute);
}

namespace detail {

// Shared backward for both scan orders: with g_t = dL/dh_t flowing in,
//   G_t = g_t + a_{t+1} (*) G_{t+1}   (G_T = g_T)
//   dL/db_t = G_t,   dL/da_t = G_t (*) h_{t-1}   (h_0 = 0)
template <typename S>
void scan_backward(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& out) {
  const auto& g = out.grad_ref();
  const auto& hv = out.values();
  const auto& av = a.values();
  int r = a.rank();
  std::int64_t T = a.shape()[static_cast<std::size_t>(r - 2)];
  std::int64_t L = a.shape()[static_cast<std::size_t>(r - 1)];
  std::int64_t groups = a.size() / (T * L);
  std::vector<S> ga(av.size()), gb(av.size());
  std::vector<S> G(static_cast<std::size_t>(L));
  for (std::int64_t grp = 0; grp < groups; ++grp) {
    std::int64_t base = grp * T * L;
    std::fill(G.begin(), G.end(), S(0));
    for (std::int64_t t = T - 1; t >= 0; --t) {
      const S* gt = g.data() + base + t * L;
      const S* at_next = t + 1 < T ? av.data() + base + (t + 1) * L : nullptr;
      for (std::int64_t l = 0; l < L; ++l)
        G[static_cast<std::size_t>(l)] =
            gt[l] + (at_next ? at_next[l] * G[static_cast<std::size_t>(l)] : S(0));
      const S* h_prev = t > 0 ? hv.data() + base + (t - 1) * L : nullptr;
      S* gat = ga.data() + base + t * L;
      S* gbt = gb.data() + base + t * L;
      for (std::int64_t l = 0; l < L; ++l) {
        gbt[l] = G[static_cast<std::size_t>(l)];
        gat[l] = h_prev ? G[static_cast<std::size_t>(l)] * h_prev[l] : S(0);
      }
    }
  }
  accumulate_grad(a, ga);
  accumulate_grad(b, gb);
}

template <typename S>
void check_scan_args(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() >= 2, "scan: rank must be >= 2 ([..,T,lanes]), got " +
                           shape_str(a.shape()));
  check(a.shape() == b.shape(), "scan: shapes differ: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace detail

// First-order linear recurrence h_t = a_t (*) h_{t-1} + b_t with h_0 = 0,
// scanning axis -2; the last axis holds independent lanes. Reference order:
// strictly sequential in t.
template <typename S>
Tensor<S> linear_scan_sequential(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_scan_args(a, b);
  int r = a.rank();
  std::int64_t T = a.shape()[static_cast<std::size_t>(r - 2)];
  std::int64_t L = a.shape()[static_cast<std::size_t>(r - 1)];
  std::int64_t groups = a.size() / (T * L);
  auto compute = [a, b, T, L, groups]() {
    std::vector<S> h(a.values().size());
    const auto& av = a.values();
    const auto& bv = b.values();
    parallel_for(
        groups,
        [&](std::int64_t g0, std::int64_t g1) {
          for (std::int64_t grp = g0; grp < g1; ++grp) {
            std::int64_t base = grp * T * L;
            for (std::int64_t t = 0; t < T; ++t)
              for (std::int64_t l = 0; l < L; ++l) {
                std::size_t i = static_cast<std::size_t>(base + t * L + l);
                h[i] = bv[i] + (t > 0 ? av[i] * h[i - static_cast<std::size_t>(L)]
                                      : S(0));
              }
          }
        },
        1);
    return h;
  };
  Tensor<S> out = Tensor<S>::from(a.shape(), compute());
  return record<S>(
      "linear_scan_sequential", {a, b}, out,
      [a, b](const Tensor<S>& o) { detail::scan_backward(a, b, o); }, compute);
}

// Same recurrence evaluated with a Blelloch (work-efficient) parallel prefix
// scan under the associative combine
//   (a1, b1) . (a2, b2) = (a2 a1, a2 b1 + b2)
// with identity (1, 0). The tree topology is fixed by T alone, so results are
// bit-identical across runs and thread counts; they differ from the
// sequential order only by floating-point reassociation.
template <typename S>
Tensor<S> linear_scan_parallel(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_scan_args(a, b);
  int r = a.rank();
  std::int64_t T = a.shape()[static_cast<std::size_t>(r - 2)];
  std::int64_t L = a.shape()[static_cast<std::size_t>(r - 1)];
  std::int64_t groups = a.size() / (T * L);
  std::int64_t P = 1;
  while (P < T) P <<= 1;
  auto compute = [a, b, T, L, groups, P]() {
    std::vector<S> h(a.values().size());
    const auto& av = a.values();
    const auto& bv = b.values();
    parallel_for(
        groups,
        [&](std::int64_t g0, std::int64_t g1) {
          // (wa, wb) hold the running pair per padded position; padding is the
          // identity so it never affects real prefixes.
          std::vector<S> wa(static_cast<std::size_t>(P * L));
          std::vector<S> wb(static_cast<std::size_t>(P * L));
          for (std::int64_t grp = g0; grp < g1; ++grp) {
            std::int64_t base = grp * T * L;
            std::copy_n(av.data() + base, T * L, wa.data());
            std::copy_n(bv.data() + base, T * L, wb.data());
            std::fill(wa.begin() + static_cast<std::size_t>(T * L), wa.end(), S(1));
            std::fill(wb.begin() + static_cast<std::size_t>(T * L), wb.end(), S(0));
            // up-sweep: pairwise reduce into the right node
            for (std::int64_t stride = 2; stride <= P; stride <<= 1)
              for (std::int64_t i = stride - 1; i < P; i += stride) {
                std::int64_t left = i - stride / 2;
                S* ra = wa.data() + i * L;
                S* rb = wb.data() + i * L;
                const S* la = wa.data() + left * L;
                const S* lb = wb.data() + left * L;
                for (std::int64_t l = 0; l < L; ++l) {
                  rb[l] = ra[l] * lb[l] + rb[l];
                  ra[l] = ra[l] * la[l];
                }
              }
            // down-sweep: root gets the identity, then left child takes the
            // parent prefix and right child takes parent-then-left
            for (std::int64_t l = 0; l < L; ++l) {
              wa[static_cast<std::size_t>((P - 1) * L + l)] = S(1);
              wb[static_cast<std::size_t>((P - 1) * L + l)] = S(0);
            }
            for (std::int64_t stride = P; stride >= 2; stride >>= 1)
              for (std::int64_t i = stride - 1; i < P; i += stride) {
                std::int64_t left = i - stride / 2;
                S* ra = wa.data() + i * L;
                S* rb = wb.data() + i * L;
                S* la = wa.data() + left * L;
                S* lb = wb.data() + left * L;
                for (std::int64_t l = 0; l < L; ++l) {
                  S ta = la[l], tb = lb[l];
                  la[l] = ra[l];
                  lb[l] = rb[l];
                  rb[l] = ta * rb[l] + tb;  // parent . left-subtree-sum
                  ra[l] = ta * ra[l];
                }
              }
            // exclusive prefix -> inclusive: h_t = a_t excl_b + b_t
            for (std::int64_t t = 0; t < T; ++t)
              for (std::int64_t l = 0; l < L; ++l) {
                std::size_t i = static_cast<std::size_t>(base + t * L + l);
                h[i] = av[i] * wb[static_cast<std::size_t>(t * L + l)] + bv[i];
              }
          }
        },
        1);
    return h;
  };
  Tensor<S> out = Tensor<S>::from(a.shape(), compute());
  return record<S>(
      "linear_scan_parallel", {a, b}, out,
      [a, b](const Tensor<S>& o) { detail::scan_backward(a, b, o); }, compute);
}

// ============================================================================
// selective-SSM parameter bundle and end-to-end mixers
// ============================================================================

template <typename S>
struct SsmParams {
  Tensor<S> a_log;    // [D,N]; A = -exp(a_log)
  Tensor<S> delta_w;  // [D,D]
  Tensor<S> delta_b;  // [D]
  Tensor<S> b_w;      // [D,N]
  Tensor<S> b_b;      // [N]
  Tensor<S> c_w;      // [D,N]
  Tensor<S> c_b;      // [N]

  int channels() const { return a_log.shape()[0]; }
  int state_dim() const { return a_log.shape()[1]; }
};

// S4D-real style init: a_log[d,n] = log(n+1), projections truncated-normal,
// biases zero (softplus(0) then gives a usable default delta of ~0.69).
template <typename S>
SsmParams<S> make_ssm_params(int channels, int state_dim, Rng& rng) {
  check(channels > 0 && state_dim > 0, "make_ssm_params: sizes must be positive");
  SsmParams<S> p;
  p.a_log = Tensor<S>::zeros({channels, state_dim});
  auto& av = p.a_log.mutable_values();
  for (int d = 0; d < channels; ++d)
    for (int n = 0; n < state_dim; ++n)
      av[static_cast<std::size_t>(d) * state_dim + n] =
          std::log(static_cast<S>(n + 1));
  p.delta_w = trunc_normal<S>({channels, channels}, rng);
  p.delta_b = Tensor<S>::zeros({channels});
  p.b_w = trunc_normal<S>({channels, state_dim}, rng);
  p.b_b = Tensor<S>::zeros({state_dim});
  p.c_w = trunc_normal<S>({channels, state_dim}, rng);
  p.c_b = Tensor<S>::zeros({state_dim});
  return p;
}

namespace detail {

template <typename S>
Tensor<S> ssm_scan_impl(const Tensor<S>& x, const SsmParams<S>& p, bool parallel) {
  check(x.rank() >= 2, "ssm_scan: expected x[..,T,D], got " + shape_str(x.shape()));
  check(x.shape().back() == p.channels(),
        "ssm_scan: x channels " + std::to_string(x.shape().back()) +
            " != params channels " + std::to_string(p.channels()));
  int D = p.channels();
  int N = p.state_dim();
  auto delta = softplus(linear(x, p.delta_w, p.delta_b));  // [..,T,D] > 0
  auto A = scale(exp(p.a_log), S(-1));                     // [D,N] < 0
  auto Bm = linear(x, p.b_w, p.b_b);                       // [..,T,N]
  auto Cm = linear(x, p.c_w, p.c_b);                       // [..,T,N]
  auto [a_bar, b_bar] = ssm_discretize(delta, A, Bm);      // [..,T,D,N]
  auto b_in = state_scale(b_bar, x);
  // Merge (D,N) into one lane axis for the scan core.
  Shape lanes(x.shape().begin(), x.shape().end() - 1);
  lanes.push_back(D * N);
  auto h_flat = parallel ? linear_scan_parallel(reshape(a_bar, lanes),
                                                reshape(b_in, lanes))
                         : linear_scan_sequential(reshape(a_bar, lanes),
                                                  reshape(b_in, lanes));
  Shape full(x.shape().begin(), x.shape().end() - 1);
  full.push_back(D);
  full.push_back(N);
  return state_contract(reshape(h_flat, full), Cm);
}

}  // namespace detail

// Selective scan over tokens, one recurrence step per position along axis -2.
template <typename S>
Tensor<S> ssm_scan_sequential(const Tensor<S>& x, const SsmParams<S>& p) {
  return detail::ssm_scan_impl(x, p, false);
}

template <typename S>
Tensor<S> ssm_scan_parallel(const Tensor<S>& x, const SsmParams<S>& p) {
  return detail::ssm_scan_impl(x, p, true);
}

}  // namespace mokt
