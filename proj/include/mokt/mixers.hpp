#pragma once

#include <cmath>
#include <utility>

#include "mokt/ops.hpp"
#include "mokt/ssm.hpp"

namespace mokt {

// Token-mixing visibility: fully-visible attends everywhere, causal only to
// positions <= t.
enum class MixMode { FullyVisible, Causal };

template <typename S>
struct AttnWeights {
  Tensor<S> wq, wk, wv, wo;  // each [D,D]
  int heads = 1;

  int dim() const { return wq.shape()[0]; }
  int head_dim() const { return dim() / heads; }
};

template <typename S>
AttnWeights<S> make_attn_weights(int dim, int heads, Rng& rng) {
  check(heads > 0 && dim % heads == 0,
        "attention: dim " + std::to_string(dim) + " not divisible by heads " +
            std::to_string(heads));
  AttnWeights<S> w;
  w.wq = trunc_normal<S>({dim, dim}, rng);
  w.wk = trunc_normal<S>({dim, dim}, rng);
  w.wv = trunc_normal<S>({dim, dim}, rng);
  w.wo = trunc_normal<S>({dim, dim}, rng);
  w.heads = heads;
  return w;
}

namespace detail {

// [..,T,D] -> [..,H,T,dh]
template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, int heads, int head_dim) {
  Shape s(x.shape().begin(), x.shape().end() - 1);
  s.push_back(heads);
  s.push_back(head_dim);
  Tensor<S> r = reshape(x, s);  // [..,T,H,dh]
  int rr = r.rank();
  std::vector<int> perm(static_cast<std::size_t>(rr));
  for (int i = 0; i < rr; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(rr - 3)], perm[static_cast<std::size_t>(rr - 2)]);
  return permute(r, perm);  // [..,H,T,dh]
}

// Scaled masked attention probabilities [..,H,T,T] for the given mode.
template <typename S>
Tensor<S> attention_scores(const Tensor<S>& x, const AttnWeights<S>& w,
                           MixMode mode) {
  check(x.rank() >= 2, "attention: expected x[..,T,D], got " + shape_str(x.shape()));
  int D = w.dim();
  check(x.shape().back() == D, "attention: x channels " +
                                   std::to_string(x.shape().back()) +
                                   " != weight dim " + std::to_string(D));
  int T = x.shape()[static_cast<std::size_t>(x.rank() - 2)];
  int dh = w.head_dim();
  auto q = split_heads(linear(x, w.wq), w.heads, dh);
  auto k = split_heads(linear(x, w.wk), w.heads, dh);
  auto scores = scale(matmul(q, transpose_last2(k)),
                      S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh))));
  if (mode == MixMode::Causal) {
    BoolMask mask = BoolMask::causal(T);
    return softmax(scores, &mask);
  }
  return softmax(scores);
}

}  // namespace detail

// Multi-head self-attention: softmax(Q K^T / sqrt(dh)) V per head, heads
// re-merged and mixed by wo. Causal mode zeroes attention to future tokens.
template <typename S>
Tensor<S> attention(const Tensor<S>& x, const AttnWeights<S>& w, MixMode mode) {
  auto probs = detail::attention_scores(x, w, mode);
  auto v = detail::split_heads(linear(x, w.wv), w.heads, w.head_dim());
  auto ctx = matmul(probs, v);  // [..,H,T,dh]
  int rr = ctx.rank();
  std::vector<int> perm(static_cast<std::size_t>(rr));
  for (int i = 0; i < rr; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(rr - 3)], perm[static_cast<std::size_t>(rr - 2)]);
  Shape merged(x.shape());
  return linear(reshape(permute(ctx, perm), merged), w.wo);
}

// The attention map itself (for diagnostics/tests): rows are stochastic, and
// in causal mode strictly lower-triangular-plus-diagonal.
template <typename S>
Tensor<S> attention_weights(const Tensor<S>& x, const AttnWeights<S>& w,
                            MixMode mode) {
  return detail::attention_scores(x, w, mode);
}

// ============================================================================
// partial-channel depthwise conv mixer
// ============================================================================

// Channel split of the fc1 output: gate | pass | conv, in that order.
struct SplitSpec {
  int gate;
  int pass;
  int conv;
};

// Splits u[B,H,W,gate+pass+conv], applies a same-padded depthwise conv to the
// last `conv` channels only, and returns (gate_half, concat(pass, conv_out)).
// The untouched `pass` channels make the token mixer partial-channel.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> conv_mixer(const Tensor<S>& u,
                                           const Tensor<S>& kernel,
                                           const Tensor<S>& bias, SplitSpec spec) {
  check(u.rank() == 4, "conv_mixer: expected u[B,H,W,C], got " + shape_str(u.shape()));
  check(spec.gate > 0 && spec.pass >= 0 && spec.conv >= 0,
        "conv_mixer: invalid split " + std::to_string(spec.gate) + "/" +
            std::to_string(spec.pass) + "/" + std::to_string(spec.conv));
  check(kernel.rank() == 3 && kernel.shape()[2] == spec.conv,
        "conv_mixer: kernel " + shape_str(kernel.shape()) + " does not cover " +
            std::to_string(spec.conv) + " conv channels");
  check(kernel.shape()[0] == kernel.shape()[1] && kernel.shape()[0] % 2 == 1,
        "conv_mixer: kernel must be square and odd for same padding");
  auto parts = split_last(u, {spec.gate, spec.pass, spec.conv});
  int pad = kernel.shape()[0] / 2;
  auto mixed_c = depthwise_conv2d(parts[2], kernel, bias, 1, pad);
  std::vector<Tensor<S>> halves = {parts[1], mixed_c};
  return {parts[0], concat_last(halves)};
}

}  // namespace mokt
