// SSM discretization and scan checks: independent naive oracles, frozen
// closed-form values, causality/stability invariants, and gradient checks.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "grad_utils.hpp"
#include "mokt/ssm.hpp"

using mokt::Rng;
using mokt::Shape;
using mokt::Tensor;
using testutil::require_grad_matches;

namespace {

Tensor<double> project(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  auto r = mokt::randn<double>(y.shape(), rng);
  std::vector<int> axes(static_cast<std::size_t>(y.rank()));
  for (int i = 0; i < y.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
  return mokt::mean(mokt::mul(y, r), axes);
}

// Naive recurrence oracle on [G,T,L] buffers.
template <typename S>
std::vector<S> naive_scan(const std::vector<S>& a, const std::vector<S>& b,
                          std::int64_t G, std::int64_t T, std::int64_t L) {
  std::vector<S> h(a.size(), S(0));
  for (std::int64_t g = 0; g < G; ++g)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t l = 0; l < L; ++l) {
        std::size_t i = static_cast<std::size_t>((g * T + t) * L + l);
        h[i] = b[i] + (t > 0 ? a[i] * h[i - static_cast<std::size_t>(L)] : S(0));
      }
  return h;
}

template <typename S>
double max_abs_diff(const Tensor<S>& x, const Tensor<S>& y) {
  double worst = 0;
  for (std::int64_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(x[i]) -
                                     static_cast<double>(y[i])));
  return worst;
}

template <typename S>
double max_abs(const Tensor<S>& x) {
  double m = 0;
  for (std::int64_t i = 0; i < x.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(x[i])));
  return m;
}

}  // namespace

TEST_CASE("ssm_discretize matches an expm1-based oracle") {
  Rng rng(61);
  int T = 5, D = 3, N = 4;
  auto delta = mokt::uniform<double>({T, D}, rng, 0.05, 2.0);
  auto A = mokt::uniform<double>({D, N}, rng, -3.0, -0.01);
  auto B = mokt::randn<double>({T, N}, rng);
  auto [a_bar, b_bar] = mokt::ssm_discretize(delta, A, B);
  REQUIRE(a_bar.shape() == Shape{T, D, N});
  REQUIRE(b_bar.shape() == Shape{T, D, N});
  for (int t = 0; t < T; ++t)
    for (int d = 0; d < D; ++d)
      for (int n = 0; n < N; ++n) {
        double z = delta[t * D + d] * A[d * N + n];
        std::int64_t i = (t * D + d) * N + n;
        CHECK(a_bar[i] == doctest::Approx(std::exp(z)).epsilon(1e-13));
        CHECK(b_bar[i] == doctest::Approx(std::expm1(z) / z * delta[t * D + d] *
                                          B[t * N + n])
                              .epsilon(1e-12));
        CHECK(a_bar[i] < 1.0);  // contractive given delta > 0, A < 0
      }
}

TEST_CASE("ssm_discretize frozen values at delta=1, A=-1") {
  auto delta = Tensor<double>::full({1, 1}, 1.0);
  auto A = Tensor<double>::full({1, 1}, -1.0);
  auto B = Tensor<double>::full({1, 1}, 1.0);
  auto [a_bar, b_bar] = mokt::ssm_discretize(delta, A, B);
  CHECK(a_bar[0] == doctest::Approx(0.36787944117144233).epsilon(1e-15));
  CHECK(b_bar[0] == doctest::Approx(0.6321205588285577).epsilon(1e-15));
}

TEST_CASE("ssm_discretize series branch is continuous at the crossover") {
  // Straddle |z| = 1e-6 and require both branches to agree to high precision.
  for (double z : {-2e-6, -1.0000001e-6, -0.9999999e-6, -5e-7, -1e-9}) {
    auto delta = Tensor<double>::full({1, 1}, 1.0);
    auto A = Tensor<double>::full({1, 1}, z);
    auto B = Tensor<double>::full({1, 1}, 1.0);
    auto [a_bar, b_bar] = mokt::ssm_discretize(delta, A, B);
    CHECK(b_bar[0] == doctest::Approx(std::expm1(z) / z).epsilon(1e-12));
    CHECK(a_bar[0] == doctest::Approx(std::exp(z)).epsilon(1e-15));
  }
}

TEST_CASE("ssm_discretize rejects invalid delta and A") {
  auto delta = Tensor<double>::full({2, 2}, 0.5);
  auto A = Tensor<double>::full({2, 3}, -1.0);
  auto B = Tensor<double>::full({2, 3}, 1.0);
  auto bad_delta = Tensor<double>::from({2, 2}, {0.5, 0.0, 0.5, 0.5});
  CHECK_THROWS_AS(mokt::ssm_discretize(bad_delta, A, B), std::invalid_argument);
  auto bad_A = Tensor<double>::from({2, 3}, {-1, -1, 0.1, -1, -1, -1});
  CHECK_THROWS_AS(mokt::ssm_discretize(delta, bad_A, B), std::invalid_argument);
  CHECK_THROWS_AS(mokt::ssm_discretize(delta, A, Tensor<double>::zeros({2, 4})),
                  std::invalid_argument);
}

TEST_CASE("sequential scan matches the naive recurrence") {
  Rng rng(62);
  for (int T : {1, 2, 5, 13, 64}) {
    int G = 2, L = 6;
    auto a = mokt::uniform<double>({G, T, L}, rng, 0.01, 0.99);
    auto b = mokt::randn<double>({G, T, L}, rng);
    auto h = mokt::linear_scan_sequential(a, b);
    auto want = naive_scan(a.values(), b.values(), G, T, L);
    double worst = 0;
    for (std::int64_t i = 0; i < h.size(); ++i)
      worst = std::max(worst, std::abs(h[i] - want[static_cast<std::size_t>(i)]));
    CHECK(worst == 0.0);  // same order of operations, bit-identical
  }
}

TEST_CASE("parallel scan equals sequential scan at double precision") {
  Rng rng(63);
  for (int T : {1, 2, 3, 7, 16, 33, 100, 512}) {
    int L = 5;
    auto a = mokt::uniform<double>({T, L}, rng, 0.01, 0.999);
    auto b = mokt::randn<double>({T, L}, rng);
    auto hs = mokt::linear_scan_sequential(a, b);
    auto hp = mokt::linear_scan_parallel(a, b);
    double rel = max_abs_diff(hs, hp) / std::max(max_abs(hs), 1e-12);
    CAPTURE(T);
    CHECK(rel <= 1e-12);
  }
}

TEST_CASE("scan equivalence holds over random configurations in f32 and f64") {
  Rng rng(64);
  int trials = 24;
  for (int k = 0; k < trials; ++k) {
    int T = static_cast<int>(std::lround(std::exp(rng.uniform(0.0, std::log(512.0)))));
    T = std::max(1, std::min(512, T));
    int D = rng.uniform_int(1, 8);
    int N = rng.uniform_int(1, 8);
    int L = D * N;
    if (k % 2 == 0) {
      auto a = mokt::uniform<double>({T, L}, rng, 0.001, 0.999);
      auto b = mokt::randn<double>({T, L}, rng);
      auto hs = mokt::linear_scan_sequential(a, b);
      auto hp = mokt::linear_scan_parallel(a, b);
      double rel = max_abs_diff(hs, hp) / std::max(max_abs(hs), 1e-12);
      CAPTURE(T);
      CHECK(rel <= 1e-5);
    } else {
      auto a = mokt::uniform<float>({T, L}, rng, 0.001f, 0.999f);
      auto b = mokt::randn<float>({T, L}, rng);
      auto hs = mokt::linear_scan_sequential(a, b);
      auto hp = mokt::linear_scan_parallel(a, b);
      double rel = max_abs_diff(hs, hp) / std::max(max_abs(hs), 1e-12);
      CAPTURE(T);
      CHECK(rel <= 1e-5);
    }
  }
}

TEST_CASE("both scan orders are causal to the bit") {
  Rng rng(65);
  int T = 37, L = 4, cut = 20;
  auto a = mokt::uniform<double>({T, L}, rng, 0.01, 0.99);
  auto b = mokt::randn<double>({T, L}, rng);
  auto a2 = a.clone();
  auto b2 = b.clone();
  // Perturb everything after the cut.
  for (std::int64_t i = static_cast<std::int64_t>(cut) * L; i < a2.size(); ++i) {
    a2.mutable_values()[static_cast<std::size_t>(i)] *= 0.5;
    b2.mutable_values()[static_cast<std::size_t>(i)] += 3.0;
  }
  for (bool parallel : {false, true}) {
    auto h1 = parallel ? mokt::linear_scan_parallel(a, b)
                       : mokt::linear_scan_sequential(a, b);
    auto h2 = parallel ? mokt::linear_scan_parallel(a2, b2)
                       : mokt::linear_scan_sequential(a2, b2);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(cut) * L; ++i)
      CHECK(h1[i] == h2[i]);
  }
}

TEST_CASE("contractive scan stays bounded over T=4096") {
  Rng rng(66);
  int T = 4096, L = 16;
  auto delta = mokt::uniform<double>({T, 4}, rng, 0.01, 1.0);
  auto A = mokt::uniform<double>({4, 4}, rng, -2.0, -0.1);
  auto B = mokt::uniform<double>({T, 4}, rng, -1.0, 1.0);
  auto [a_bar, b_bar] = mokt::ssm_discretize(delta, A, B);
  auto a = mokt::reshape(a_bar, {T, L});
  auto b = mokt::reshape(b_bar, {T, L});
  auto h = mokt::linear_scan_parallel(a, b);
  double a_max = max_abs(a);
  REQUIRE(a_max < 1.0);
  double bound = max_abs(b) / (1.0 - a_max) + 1e-9;
  for (std::int64_t i = 0; i < h.size(); ++i) {
    REQUIRE(std::isfinite(h[i]));
    CHECK(std::abs(h[i]) <= bound);
  }
}

TEST_CASE("A -> 0 limit reduces the scan to a weighted cumulative sum") {
  // With constant delta, B, C and A -> 0-: h_t -> delta*B*cumsum(x), so
  // y[t,d] -> (sum_n C_n B_n) * delta_d * cumsum(x)[t,d].
  Rng rng(67);
  int T = 48, D = 3, N = 4;
  double dl = 0.37;
  auto delta = Tensor<double>::full({T, D}, dl);
  auto A = Tensor<double>::full({D, N}, -1e-9);
  auto x = mokt::randn<double>({T, D}, rng);
  Rng rng2(68);
  auto Brow = mokt::randn<double>({N}, rng2);
  auto Crow = mokt::randn<double>({N}, rng2);
  auto B = Tensor<double>::zeros({T, N});
  auto C = Tensor<double>::zeros({T, N});
  for (int t = 0; t < T; ++t)
    for (int n = 0; n < N; ++n) {
      B.mutable_values()[static_cast<std::size_t>(t) * N + n] = Brow[n];
      C.mutable_values()[static_cast<std::size_t>(t) * N + n] = Crow[n];
    }
  auto [a_bar, b_bar] = mokt::ssm_discretize(delta, A, B);
  auto h = mokt::linear_scan_sequential(mokt::reshape(a_bar, {T, D * N}),
                                        mokt::reshape(state_scale(b_bar, x), {T, D * N}));
  auto y = mokt::state_contract(mokt::reshape(h, {T, D, N}), C);
  double cb = 0;
  for (int n = 0; n < N; ++n) cb += Crow[n] * Brow[n];
  std::vector<double> cum(static_cast<std::size_t>(D), 0.0);
  for (int t = 0; t < T; ++t)
    for (int d = 0; d < D; ++d) {
      cum[static_cast<std::size_t>(d)] += x[t * D + d];
      double want = cb * dl * cum[static_cast<std::size_t>(d)];
      CHECK(std::abs(y[t * D + d] - want) <= 1e-8 * std::max(1.0, std::abs(want)));
    }
}

TEST_CASE("ssm composite output is causal and shape-preserving") {
  Rng rng(69);
  int T = 12, D = 6;
  auto p = mokt::make_ssm_params<double>(D, 4, rng);
  auto x = mokt::randn<double>({T, D}, rng);
  auto y = mokt::ssm_scan_sequential(x, p);
  REQUIRE(y.shape() == Shape{T, D});
  auto x2 = x.clone();
  for (int t = 8; t < T; ++t)
    for (int d = 0; d < D; ++d)
      x2.mutable_values()[static_cast<std::size_t>(t) * D + d] += 1.0;
  auto y2 = mokt::ssm_scan_sequential(x2, p);
  for (int t = 0; t < 8; ++t)
    for (int d = 0; d < D; ++d) CHECK(y[t * D + d] == y2[t * D + d]);
  CHECK_THROWS_AS(mokt::ssm_scan_sequential(mokt::randn<double>({T, D + 1}, rng), p),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

TEST_CASE("grad: ssm_discretize wrt delta, A and B") {
  Rng rng(71);
  int T = 7, D = 5, N = 4;
  auto delta0 = mokt::uniform<double>({T, D}, rng, 0.05, 1.5);   // 35
  auto A0 = mokt::uniform<double>({D, N}, rng, -2.0, -0.05);     // 20
  auto B0 = mokt::randn<double>({T, N}, rng);                    // 28
  auto loss = [&](const Tensor<double>& dl, const Tensor<double>& A,
                  const Tensor<double>& B) {
    auto [a_bar, b_bar] = mokt::ssm_discretize(dl, A, B);
    return mokt::mean(mokt::add(project(a_bar, 1), project(b_bar, 2)), {});
  };
  require_grad_matches(delta0, [&](const Tensor<double>& d) { return loss(d, A0, B0); });
  require_grad_matches(A0, [&](const Tensor<double>& A) { return loss(delta0, A, B0); });
  require_grad_matches(B0, [&](const Tensor<double>& B) { return loss(delta0, A0, B); });
}

TEST_CASE("grad: scan cores wrt a and b (both orders, >=100 coords)") {
  Rng rng(72);
  auto a0 = mokt::uniform<double>({2, 10, 6}, rng, 0.05, 0.95);  // 120
  auto b0 = mokt::randn<double>({2, 10, 6}, rng);                // 120
  for (bool parallel : {false, true}) {
    auto run = [parallel](const Tensor<double>& a, const Tensor<double>& b) {
      return parallel ? mokt::linear_scan_parallel(a, b)
                      : mokt::linear_scan_sequential(a, b);
    };
    require_grad_matches(
        a0, [&](const Tensor<double>& a) { return project(run(a, b0), 3); }, 1e-4,
        1e-5, 100);
    require_grad_matches(
        b0, [&](const Tensor<double>& b) { return project(run(a0, b), 4); }, 1e-4,
        1e-5, 100);
  }
}

TEST_CASE("grad: state_scale and state_contract") {
  Rng rng(73);
  auto bb0 = mokt::randn<double>({6, 4, 5}, rng);  // [T,D,N] 120
  auto x0 = mokt::randn<double>({6, 4}, rng);
  auto c0 = mokt::randn<double>({6, 5}, rng);
  require_grad_matches(
      bb0,
      [&](const Tensor<double>& bb) { return project(mokt::state_scale(bb, x0), 5); },
      1e-4, 1e-5, 100);
  require_grad_matches(x0, [&](const Tensor<double>& x) {
    return project(mokt::state_scale(bb0, x), 5);
  });
  require_grad_matches(
      bb0,
      [&](const Tensor<double>& h) { return project(mokt::state_contract(h, c0), 6); },
      1e-4, 1e-5, 100);
  require_grad_matches(c0, [&](const Tensor<double>& c) {
    return project(mokt::state_contract(bb0, c), 6);
  });
}

TEST_CASE("grad: full selective scan wrt input and parameters") {
  Rng rng(74);
  int T = 16, D = 8, N = 4;
  auto p = mokt::make_ssm_params<double>(D, N, rng);
  auto x0 = mokt::randn<double>({T, D}, rng);  // 128 coords
  for (bool parallel : {false, true}) {
    auto run = [&p, parallel](const Tensor<double>& x) {
      return parallel ? mokt::ssm_scan_parallel(x, p)
                      : mokt::ssm_scan_sequential(x, p);
    };
    require_grad_matches(
        x0, [&](const Tensor<double>& x) { return project(run(x), 7); }, 1e-4, 1e-5,
        100);
  }
  // Parameter gradients through the sequential path.
  auto run_loss = [&]() { return project(mokt::ssm_scan_sequential(x0, p), 8); };
  require_grad_matches(p.a_log, [&](const Tensor<double>&) { return run_loss(); });
  require_grad_matches(p.delta_w, [&](const Tensor<double>&) { return run_loss(); });
  require_grad_matches(p.delta_b, [&](const Tensor<double>&) { return run_loss(); });
  require_grad_matches(p.b_w, [&](const Tensor<double>&) { return run_loss(); });
  require_grad_matches(p.c_w, [&](const Tensor<double>&) { return run_loss(); });
  require_grad_matches(p.c_b, [&](const Tensor<double>&) { return run_loss(); });
}
