// Forward-op checks against independent naive-loop oracles and frozen
// hand-computed values.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "mokt/ops.hpp"

using mokt::BoolMask;
using mokt::Rng;
using mokt::Shape;
using mokt::Tensor;

namespace {

// Naive O(M*K*N) matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a,
                                 const std::vector<double>& b, int m, int k,
                                 int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p)
        c[static_cast<std::size_t>(i) * n + j] +=
            a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
  return c;
}

// Naive seven-loop conv oracle, NHWC x [kh,kw,Cin,Cout].
std::vector<double> naive_conv2d(const std::vector<double>& x,
                                 const std::vector<double>& k, int B, int H,
                                 int W, int Cin, int kh, int kw, int Cout,
                                 int stride, int pad, int Ho, int Wo) {
  std::vector<double> y(static_cast<std::size_t>(B) * Ho * Wo * Cout, 0.0);
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        for (int co = 0; co < Cout; ++co)
          for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j)
              for (int ci = 0; ci < Cin; ++ci) {
                int yy = oy * stride - pad + i;
                int xx = ox * stride - pad + j;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                y[((static_cast<std::size_t>(b) * Ho + oy) * Wo + ox) * Cout + co] +=
                    x[((static_cast<std::size_t>(b) * H + yy) * W + xx) * Cin + ci] *
                    k[((static_cast<std::size_t>(i) * kw + j) * Cin + ci) * Cout + co];
              }
  return y;
}

}  // namespace

TEST_CASE("matmul matches the naive triple loop") {
  Rng rng(11);
  int M = 7, K = 5, N = 6;
  auto a = mokt::randn<double>({M, K}, rng);
  auto b = mokt::randn<double>({K, N}, rng);
  auto c = mokt::matmul(a, b);
  auto want = naive_matmul(a.values(), b.values(), M, K, N);
  REQUIRE(c.shape() == Shape{M, N});
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(c[static_cast<std::int64_t>(i)] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("batched matmul with shared and per-batch right factors") {
  Rng rng(12);
  int B = 3, M = 4, K = 5, N = 2;
  auto a = mokt::randn<double>({B, M, K}, rng);
  auto b_shared = mokt::randn<double>({K, N}, rng);
  auto b_batched = mokt::randn<double>({B, K, N}, rng);

  auto c1 = mokt::matmul(a, b_shared);
  auto c2 = mokt::matmul(a, b_batched);
  REQUIRE(c1.shape() == Shape{B, M, N});
  REQUIRE(c2.shape() == Shape{B, M, N});
  for (int i = 0; i < B; ++i) {
    std::vector<double> ai(a.values().begin() + i * M * K,
                           a.values().begin() + (i + 1) * M * K);
    std::vector<double> bi(b_batched.values().begin() + i * K * N,
                           b_batched.values().begin() + (i + 1) * K * N);
    auto w1 = naive_matmul(ai, b_shared.values(), M, K, N);
    auto w2 = naive_matmul(ai, bi, M, K, N);
    for (int j = 0; j < M * N; ++j) {
      CHECK(c1[i * M * N + j] == doctest::Approx(w1[static_cast<std::size_t>(j)]));
      CHECK(c2[i * M * N + j] == doctest::Approx(w2[static_cast<std::size_t>(j)]));
    }
  }
}

TEST_CASE("matmul rejects mismatched inner and leading dimensions") {
  auto a = Tensor<double>::zeros({2, 3, 4});
  CHECK_THROWS_AS(mokt::matmul(a, Tensor<double>::zeros({5, 2})),
                  std::invalid_argument);
  CHECK_THROWS_AS(mokt::matmul(a, Tensor<double>::zeros({3, 4, 2})),
                  std::invalid_argument);
}

TEST_CASE("linear equals matmul plus bias broadcast") {
  Rng rng(13);
  auto x = mokt::randn<double>({4, 3, 5}, rng);
  auto w = mokt::randn<double>({5, 7}, rng);
  auto b = mokt::randn<double>({7}, rng);
  auto y = mokt::linear(x, w, b);
  REQUIRE(y.shape() == Shape{4, 3, 7});
  auto ref = naive_matmul(x.values(), w.values(), 12, 5, 7);
  for (int r = 0; r < 12; ++r)
    for (int j = 0; j < 7; ++j)
      CHECK(y[r * 7 + j] ==
            doctest::Approx(ref[static_cast<std::size_t>(r) * 7 + j] + b[j]));
}

TEST_CASE("conv2d matches the naive seven-loop oracle") {
  Rng rng(14);
  struct Case {
    int B, H, W, Cin, kh, kw, Cout, stride, pad;
  };
  for (Case cs : {Case{2, 6, 5, 3, 3, 3, 4, 1, 1}, Case{1, 8, 8, 2, 3, 3, 5, 2, 1},
                  Case{2, 7, 7, 1, 7, 7, 2, 1, 3}}) {
    auto x = mokt::randn<double>({cs.B, cs.H, cs.W, cs.Cin}, rng);
    auto k = mokt::randn<double>({cs.kh, cs.kw, cs.Cin, cs.Cout}, rng);
    auto y = mokt::conv2d(x, k, Tensor<double>(), cs.stride, cs.pad);
    int Ho = (cs.H + 2 * cs.pad - cs.kh) / cs.stride + 1;
    int Wo = (cs.W + 2 * cs.pad - cs.kw) / cs.stride + 1;
    REQUIRE(y.shape() == Shape{cs.B, Ho, Wo, cs.Cout});
    auto want = naive_conv2d(x.values(), k.values(), cs.B, cs.H, cs.W, cs.Cin,
                             cs.kh, cs.kw, cs.Cout, cs.stride, cs.pad, Ho, Wo);
    double worst = 0;
    for (std::size_t i = 0; i < want.size(); ++i)
      worst = std::max(worst, std::abs(y[static_cast<std::int64_t>(i)] - want[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("depthwise conv equals conv2d with a diagonal kernel") {
  Rng rng(15);
  int B = 2, H = 6, W = 6, C = 4, kh = 3, kw = 3;
  auto x = mokt::randn<double>({B, H, W, C}, rng);
  auto kd = mokt::randn<double>({kh, kw, C}, rng);
  // Embed the depthwise kernel into a full conv kernel with zeros off the
  // channel diagonal; the two ops must then agree exactly.
  auto kfull = Tensor<double>::zeros({kh, kw, C, C});
  auto& kv = kfull.mutable_values();
  for (int i = 0; i < kh; ++i)
    for (int j = 0; j < kw; ++j)
      for (int c = 0; c < C; ++c)
        kv[((static_cast<std::size_t>(i) * kw + j) * C + c) * C + c] =
            kd[(i * kw + j) * C + c];
  auto y1 = mokt::depthwise_conv2d(x, kd, Tensor<double>(), 1, 1);
  auto y2 = mokt::conv2d(x, kfull, Tensor<double>(), 1, 1);
  REQUIRE(y1.shape() == y2.shape());
  for (std::int64_t i = 0; i < y1.size(); ++i)
    CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-12));
}

TEST_CASE("depthwise conv with identity kernel is the identity") {
  Rng rng(16);
  auto x = mokt::randn<double>({1, 5, 5, 3}, rng);
  auto k = Tensor<double>::zeros({3, 3, 3});
  auto& kv = k.mutable_values();
  for (int c = 0; c < 3; ++c) kv[(1 * 3 + 1) * 3 + c] = 1.0;  // center tap
  auto y = mokt::depthwise_conv2d(x, k, Tensor<double>(), 1, 1);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("layer_norm zeroes mean and unit-scales variance per row") {
  Rng rng(17);
  int rows = 6, d = 16;
  auto x = mokt::randn<double>({rows, d}, rng, 3.0);
  auto gamma = Tensor<double>::full({d}, 1.0);
  auto beta = Tensor<double>::zeros({d});
  auto y = mokt::layer_norm(x, gamma, beta, 1e-6);
  for (int r = 0; r < rows; ++r) {
    double m = 0, v = 0;
    for (int j = 0; j < d; ++j) m += y[r * d + j];
    m /= d;
    for (int j = 0; j < d; ++j) v += (y[r * d + j] - m) * (y[r * d + j] - m);
    v /= d;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("layer_norm applies gamma and beta affinely") {
  Rng rng(18);
  int d = 8;
  auto x = mokt::randn<double>({3, d}, rng);
  auto gamma = mokt::randn<double>({d}, rng);
  auto beta = mokt::randn<double>({d}, rng);
  auto ones = Tensor<double>::full({d}, 1.0);
  auto zeros = Tensor<double>::zeros({d});
  auto plain = mokt::layer_norm(x, ones, zeros, 1e-6);
  auto affine = mokt::layer_norm(x, gamma, beta, 1e-6);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < d; ++j)
      CHECK(affine[r * d + j] ==
            doctest::Approx(plain[r * d + j] * gamma[j] + beta[j]).epsilon(1e-12));
}

TEST_CASE("gelu matches frozen scalar values") {
  auto x = Tensor<double>::from({3}, {0.0, 1.0, -1.0});
  auto y = mokt::gelu(x);
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(y[1] == doctest::Approx(0.8413447460685429));   // Phi(1)
  CHECK(y[2] == doctest::Approx(-0.15865525393145707)); // -Phi(-1)
}

TEST_CASE("softplus is stable at extreme inputs") {
  auto x = Tensor<double>::from({3}, {0.0, 500.0, -500.0});
  auto y = mokt::softplus(x);
  CHECK(y[0] == doctest::Approx(std::log(2.0)));
  CHECK(y[1] == doctest::Approx(500.0));
  CHECK(y[2] == doctest::Approx(0.0));
  CHECK(std::isfinite(y[1]));
}

TEST_CASE("softmax rows are stochastic and shift-invariant") {
  Rng rng(19);
  auto x = mokt::randn<double>({4, 9}, rng, 5.0);
  auto y = mokt::softmax(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int j = 0; j < 9; ++j) {
      CHECK(y[r * 9 + j] >= 0.0);
      s += y[r * 9 + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto shifted = mokt::softmax(mokt::add(x, Tensor<double>::scalar(123.0)));
  for (std::int64_t i = 0; i < y.size(); ++i)
    CHECK(shifted[i] == doctest::Approx(y[i]).epsilon(1e-12));
}

TEST_CASE("masked softmax zeroes dropped entries and renormalizes the rest") {
  Rng rng(20);
  int T = 5;
  auto x = mokt::randn<double>({T, T}, rng);
  auto mask = BoolMask::causal(T);
  auto y = mokt::softmax(x, &mask);
  for (int i = 0; i < T; ++i) {
    double s = 0;
    for (int j = 0; j < T; ++j) {
      if (j > i) CHECK(y[i * T + j] == 0.0);
      s += y[i * T + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Against a naive oracle on the kept prefix.
  for (int i = 0; i < T; ++i) {
    double m = x[i * T];
    for (int j = 1; j <= i; ++j) m = std::max(m, x[i * T + j]);
    double z = 0;
    for (int j = 0; j <= i; ++j) z += std::exp(x[i * T + j] - m);
    for (int j = 0; j <= i; ++j)
      CHECK(y[i * T + j] == doctest::Approx(std::exp(x[i * T + j] - m) / z));
  }
}

TEST_CASE("softmax mask broadcasts over leading axes and rejects empty rows") {
  Rng rng(21);
  auto scores = mokt::randn<double>({2, 3, 4, 4}, rng);  // [B,H,T,T]
  auto mask = BoolMask::causal(4);
  auto y = mokt::softmax(scores, &mask);
  for (int lead = 0; lead < 6; ++lead)
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) CHECK(y[(lead * 4 + i) * 4 + j] == 0.0);

  BoolMask dead;
  dead.shape = {1, 4};
  dead.keep = {0, 0, 0, 0};
  auto x = mokt::randn<double>({2, 4}, rng);
  CHECK_THROWS_AS(mokt::softmax(x, &dead), std::invalid_argument);
}

TEST_CASE("split then concat reproduces the input bitwise") {
  Rng rng(22);
  auto x = mokt::randn<double>({3, 2, 10}, rng);
  auto parts = mokt::split_last(x, {4, 1, 5});
  REQUIRE(parts.size() == 3);
  CHECK(parts[0].shape() == Shape{3, 2, 4});
  CHECK(parts[1].shape() == Shape{3, 2, 1});
  CHECK(parts[2].shape() == Shape{3, 2, 5});
  auto back = mokt::concat_last(parts);
  REQUIRE(back.shape() == x.shape());
  CHECK(back.values() == x.values());

  CHECK_THROWS_AS(mokt::split_last(x, {4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(mokt::split_last(x, {12, -2}), std::invalid_argument);
}

TEST_CASE("permute relocates elements and composes to identity") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = mokt::transpose_last2(x);
  REQUIRE(t.shape() == Shape{3, 2});
  CHECK(t[0] == 1);
  CHECK(t[1] == 4);
  CHECK(t[2] == 2);
  CHECK(t[5] == 6);
  auto back = mokt::transpose_last2(t);
  CHECK(back.values() == x.values());

  Rng rng(23);
  auto big = mokt::randn<double>({2, 3, 4, 5}, rng);
  auto p = mokt::permute(big, {2, 0, 3, 1});
  REQUIRE(p.shape() == Shape{4, 2, 5, 3});
  // Spot-check one coordinate: out[i2,i0,i3,i1] == in[i0,i1,i2,i3].
  auto st_in = mokt::strides_of(big.shape());
  auto st_out = mokt::strides_of(p.shape());
  CHECK(p[1 * st_out[0] + 1 * st_out[1] + 2 * st_out[2] + 2 * st_out[3]] ==
        big[1 * st_in[0] + 2 * st_in[1] + 1 * st_in[2] + 2 * st_in[3]]);
  CHECK_THROWS_AS(mokt::permute(big, {0, 1, 2, 2}), std::invalid_argument);
}

TEST_CASE("reshape relabels and infers one extent") {
  Rng rng(24);
  auto x = mokt::randn<double>({2, 3, 4}, rng);
  auto y = mokt::reshape(x, {6, -1});
  REQUIRE(y.shape() == Shape{6, 4});
  CHECK(y.values() == x.values());
  CHECK_THROWS_AS(mokt::reshape(x, {5, -1}), std::invalid_argument);
  CHECK_THROWS_AS(mokt::reshape(x, {-1, -1}), std::invalid_argument);
}

TEST_CASE("mean reduces the requested axes") {
  auto x = Tensor<double>::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto gap = mokt::mean(x, {1});
  REQUIRE(gap.shape() == Shape{2, 2});
  CHECK(gap[0] == doctest::Approx(2.0));  // (1+3)/2
  CHECK(gap[1] == doctest::Approx(3.0));  // (2+4)/2
  CHECK(gap[2] == doctest::Approx(6.0));
  CHECK(gap[3] == doctest::Approx(7.0));
  auto all = mokt::mean(x, {0, 1, 2});
  CHECK(all.item() == doctest::Approx(4.5));
}

TEST_CASE("add broadcasts a trailing suffix") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from({3}, {10, 20, 30});
  auto y = mokt::add(x, b);
  CHECK(y[0] == 11);
  CHECK(y[4] == 25);
  CHECK_THROWS_AS(mokt::add(x, Tensor<double>::from({2}, {1, 2})),
                  std::invalid_argument);
}

TEST_CASE("cross_entropy matches hand-computed values") {
  auto logits = Tensor<double>::from({1, 3}, {1.0, 2.0, 3.0});
  // lse = 3 + log(1 + e^-1 + e^-2)
  double lse = 3.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
  auto plain = mokt::cross_entropy(logits, {2}, 0.0);
  CHECK(plain.item() == doctest::Approx(lse - 3.0).epsilon(1e-12));
  auto smoothed = mokt::cross_entropy(logits, {2}, 0.1);
  CHECK(smoothed.item() ==
        doctest::Approx(lse - 0.9 * 3.0 - (0.1 / 3.0) * 6.0).epsilon(1e-12));
  CHECK_THROWS_AS(mokt::cross_entropy(logits, {3}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(mokt::cross_entropy(logits, {0, 1}, 0.0), std::invalid_argument);
}

TEST_CASE("argmax_rows picks the largest column") {
  auto x = Tensor<double>::from({2, 3}, {0.1, 0.9, 0.3, 2.0, -1.0, 1.5});
  auto idx = mokt::argmax_rows(x);
  CHECK(idx == std::vector<int>{1, 0});
}
