// Gated CNN / Mamba / transformer blocks: structural identities, stochastic
// depth behaviour, and gradient checks.

#include <cmath>
#include <cstdlib>
#include <vector>

#include "doctest.h"
#include "grad_utils.hpp"
#include "mokt/blocks.hpp"

using mokt::BlockWeights;
using mokt::MixerAblation;
using mokt::MixerKind;
using mokt::MixMode;
using mokt::Rng;
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

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

BlockWeights<double> demo_weights(MixerKind kind, std::uint64_t seed) {
  Rng rng(seed);
  return mokt::make_block_weights<double>(8, 12, 6, 3, kind, 4, rng);
}

}  // namespace

TEST_CASE("zeroing the output projection reduces every block kind to identity") {
  Rng rng(21);
  auto x = mokt::randn<double>({2, 4, 4, 8}, rng);
  for (MixerKind kind :
       {MixerKind::GatedConv, MixerKind::MambaSsm, MixerKind::Identity}) {
    auto w = demo_weights(kind, 22);
    for (auto& v : w.fc2_w.mutable_values()) v = 0.0;
    for (auto& v : w.fc2_b.mutable_values()) v = 0.0;
    auto y = mokt::gated_block_forward(x, w, kind, false, rng);
    CHECK(max_abs_diff(y, x) == 0.0);  // comfortably inside 1e-12
  }
}

TEST_CASE("ablated Mamba block reproduces the gated conv block bit for bit") {
  Rng rng(23);
  auto w = demo_weights(MixerKind::MambaSsm, 24);
  auto x = mokt::randn<double>({2, 5, 3, 8}, rng);
  auto ref = mokt::gated_block_forward(x, w, MixerKind::GatedConv, false, rng);
  auto ablated = mokt::gated_block_forward(
      x, w, MixerKind::MambaSsm, false, rng,
      MixerAblation{/*bypass_activation=*/true, /*bypass_ssm=*/true});
  CHECK(ablated.values() == ref.values());

  // The live Mamba path must actually differ from the conv block.
  auto live = mokt::gated_block_forward(x, w, MixerKind::MambaSsm, false, rng);
  CHECK(max_abs_diff(live, ref) > 1e-6);
}

TEST_CASE("identity mixer matches the spelled-out gate formula") {
  Rng rng(25);
  auto w = demo_weights(MixerKind::Identity, 26);
  auto x = mokt::randn<double>({1, 3, 4, 8}, rng);
  auto y = mokt::gated_block_forward(x, w, MixerKind::Identity, false, rng);

  auto n = mokt::layer_norm(x, w.norm_gamma, w.norm_beta, 1e-6);
  auto parts = mokt::split_last(mokt::linear(n, w.fc1_w, w.fc1_b), {12, 12});
  auto want = mokt::add(
      mokt::linear(mokt::mul(mokt::gelu(parts[0]), parts[1]), w.fc2_w, w.fc2_b), x);
  CHECK(y.values() == want.values());
}

TEST_CASE("gated block rejects attention kinds and malformed inputs") {
  Rng rng(27);
  auto w = demo_weights(MixerKind::GatedConv, 28);
  auto x = mokt::randn<double>({1, 4, 4, 8}, rng);
  CHECK_THROWS_AS(mokt::gated_block_forward(x, w, MixerKind::AttentionFV, false, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      mokt::gated_block_forward(x, w, MixerKind::AttentionCausal, false, rng),
      std::invalid_argument);
  CHECK_THROWS_AS(mokt::gated_block_forward(mokt::randn<double>({1, 4, 4, 7}, rng), w,
                                            MixerKind::GatedConv, false, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(mokt::gated_block_forward(mokt::randn<double>({4, 4, 8}, rng), w,
                                            MixerKind::GatedConv, false, rng),
                  std::invalid_argument);
  // GatedConv weights carry no SSM params, so the Mamba path must refuse them.
  CHECK_THROWS_AS(mokt::gated_block_forward(x, w, MixerKind::MambaSsm, false, rng),
                  std::invalid_argument);
}

// ----------------------------------------------------------------------------
// stochastic depth
// ----------------------------------------------------------------------------

TEST_CASE("drop_path is the identity at eval time and at rate zero") {
  Rng rng(31);
  auto x = mokt::randn<double>({6, 5}, rng);
  CHECK(mokt::drop_path(x, 0.4, false, rng).values() == x.values());
  CHECK(mokt::drop_path(x, 0.0, true, rng).values() == x.values());
  CHECK_THROWS_AS(mokt::drop_path(x, 1.0, true, rng), std::invalid_argument);
  CHECK_THROWS_AS(mokt::drop_path(x, -0.1, true, rng), std::invalid_argument);
}

TEST_CASE("drop_path zeroes whole samples and rescales the survivors") {
  Rng rng(32);
  int B = 400, C = 3;
  double rate = 0.25, gain = 1.0 / (1.0 - rate);
  auto x = mokt::randn<double>({B, C}, rng);
  auto y = mokt::drop_path(x, rate, true, rng);
  int dropped = 0;
  for (int b = 0; b < B; ++b) {
    bool zero = true;
    for (int c = 0; c < C; ++c) zero = zero && y[b * C + c] == 0.0;
    if (zero) {
      ++dropped;
    } else {
      for (int c = 0; c < C; ++c) CHECK(y[b * C + c] == x[b * C + c] * gain);
    }
  }
  double frac = static_cast<double>(dropped) / B;
  CHECK(frac > rate - 0.1);
  CHECK(frac < rate + 0.1);
}

TEST_CASE("grad: drop_path with a pinned mask (>=100 coords)") {
  Rng rng(33);
  auto x0 = mokt::randn<double>({40, 4}, rng);  // 160
  require_grad_matches(
      x0,
      [](const Tensor<double>& x) {
        Rng mask_rng(7);  // same mask on every evaluation
        return project(mokt::drop_path(x, 0.3, true, mask_rng), 1);
      },
      1e-4, 1e-5, 100);
}

// ----------------------------------------------------------------------------
// gradient checks through whole blocks
// ----------------------------------------------------------------------------

TEST_CASE("grad: gated conv block wrt input and weights (>=100 coords)") {
  Rng rng(34);
  auto w = demo_weights(MixerKind::GatedConv, 35);
  auto x0 = mokt::randn<double>({2, 4, 4, 8}, rng);  // 256
  auto loss = [&](const Tensor<double>& x) {
    Rng r(0);
    return project(mokt::gated_block_forward(x, w, MixerKind::GatedConv, false, r), 2);
  };
  require_grad_matches(x0, loss, 1e-4, 1e-5, 100);
  require_grad_matches(w.conv_kernel, [&](const Tensor<double>&) { return loss(x0); });
  require_grad_matches(w.fc1_w, [&](const Tensor<double>&) { return loss(x0); });
  require_grad_matches(w.norm_gamma, [&](const Tensor<double>&) { return loss(x0); });
}

TEST_CASE("grad: Mamba block wrt input and SSM params (>=100 coords)") {
  Rng rng(36);
  auto w = demo_weights(MixerKind::MambaSsm, 37);
  auto x0 = mokt::randn<double>({1, 4, 4, 8}, rng);  // 128
  auto loss = [&](const Tensor<double>& x) {
    Rng r(0);
    return project(mokt::gated_block_forward(x, w, MixerKind::MambaSsm, false, r), 3);
  };
  require_grad_matches(x0, loss, 1e-4, 1e-5, 100);
  require_grad_matches(w.ssm->a_log, [&](const Tensor<double>&) { return loss(x0); });
  require_grad_matches(w.ssm->delta_w, [&](const Tensor<double>&) { return loss(x0); });
  require_grad_matches(w.fc2_w, [&](const Tensor<double>&) { return loss(x0); });
}

TEST_CASE("grad: transformer block wrt input in both modes (>=100 coords)") {
  Rng rng(38);
  auto w = mokt::make_transformer_block_weights<double>(8, 2, rng);
  auto x0 = mokt::randn<double>({2, 8, 8}, rng);  // 128
  for (MixMode mode : {MixMode::FullyVisible, MixMode::Causal}) {
    require_grad_matches(
        x0,
        [&](const Tensor<double>& x) {
          Rng r(0);
          return project(mokt::transformer_block_forward(x, w, mode, false, r), 4);
        },
        1e-4, 1e-5, 100);
  }
}

TEST_CASE("grad: transformer block wrt MLP weights") {
  Rng rng(39);
  auto w = mokt::make_transformer_block_weights<double>(8, 2, rng);
  auto x = mokt::randn<double>({10, 8}, rng);
  auto loss = [&]() {
    Rng r(0);
    return project(mokt::transformer_block_forward(x, w, MixMode::Causal, false, r), 5);
  };
  require_grad_matches(w.mlp1_w, [&](const Tensor<double>&) { return loss(); });
  require_grad_matches(w.mlp2_w, [&](const Tensor<double>&) { return loss(); });
}

// ----------------------------------------------------------------------------
// visibility structure at block level
// ----------------------------------------------------------------------------

TEST_CASE("causal transformer block is prefix-stable; fully visible is not") {
  Rng rng(40);
  int T = 12, D = 8, cut = 7;
  auto w = mokt::make_transformer_block_weights<double>(D, 2, rng);
  auto x = mokt::randn<double>({T, D}, rng);
  auto x2 = x.clone();
  // Vary the shift per channel: a constant across channels would be erased
  // by the per-token layer norm and leave even fully-visible outputs intact.
  for (int t = cut; t < T; ++t)
    for (int d = 0; d < D; ++d)
      x2.mutable_values()[static_cast<std::size_t>(t) * D + d] += 0.5 * (d + 1);

  Rng r(0);
  auto c1 = mokt::transformer_block_forward(x, w, MixMode::Causal, false, r);
  auto c2 = mokt::transformer_block_forward(x2, w, MixMode::Causal, false, r);
  for (int t = 0; t < cut; ++t)
    for (int d = 0; d < D; ++d) CHECK(c1[t * D + d] == c2[t * D + d]);

  auto f1 = mokt::transformer_block_forward(x, w, MixMode::FullyVisible, false, r);
  auto f2 = mokt::transformer_block_forward(x2, w, MixMode::FullyVisible, false, r);
  double prefix_delta = 0;
  for (int t = 0; t < cut; ++t)
    for (int d = 0; d < D; ++d)
      prefix_delta = std::max(prefix_delta, std::abs(f1[t * D + d] - f2[t * D + d]));
  CHECK(prefix_delta > 1e-6);
}
