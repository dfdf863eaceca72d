#pragma once

#include <array>
#include <string>
#include <vector>

#include "mokt/blocks.hpp"

namespace mokt {

// ============================================================================
// configuration
// ============================================================================

// Four-stage hierarchical gated CNN. Channel counts double-ish per stage;
// the MLP expansion is the exact integer floor(8*dim/3).
struct ModelConfig {
  std::string name = "custom";
  std::array<int, 4> depths{3, 3, 9, 3};
  std::array<int, 4> dims{48, 96, 192, 288};
  MixerKind mixer = MixerKind::GatedConv;
  int in_channels = 3;
  int num_classes = 1000;
  int kernel_size = 7;
  int ssm_state_dim = 16;
  double conv_ratio = 1.0;
  double drop_path_rate = 0.0;

  int hidden(int stage) const { return 8 * dims[static_cast<std::size_t>(stage)] / 3; }
  int conv_channels(int stage) const {
    return static_cast<int>(conv_ratio * dims[static_cast<std::size_t>(stage)]);
  }
  int total_depth() const { return depths[0] + depths[1] + depths[2] + depths[3]; }
};

inline ModelConfig femto_config() {
  ModelConfig c;
  c.name = "femto";
  c.depths = {3, 3, 9, 3};
  c.dims = {48, 96, 192, 288};
  return c;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.name = "tiny";
  c.depths = {3, 3, 9, 3};
  c.dims = {96, 192, 384, 576};
  return c;
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.name = "small";
  c.depths = {3, 4, 27, 3};
  c.dims = {96, 192, 384, 576};
  return c;
}

inline ModelConfig base_config() {
  ModelConfig c;
  c.name = "base";
  c.depths = {3, 4, 27, 3};
  c.dims = {128, 256, 512, 768};
  return c;
}

// Desk-scale preset for the synthetic-data experiments.
inline ModelConfig micro_config(MixerKind mixer = MixerKind::GatedConv,
                                int num_classes = 8) {
  ModelConfig c;
  c.name = "micro";
  c.depths = {1, 1, 2, 1};
  c.dims = {16, 32, 64, 96};
  c.mixer = mixer;
  c.num_classes = num_classes;
  c.ssm_state_dim = 8;
  return c;
}

inline ModelConfig config_by_name(const std::string& name) {
  if (name == "femto") return femto_config();
  if (name == "tiny") return tiny_config();
  if (name == "small") return small_config();
  if (name == "base") return base_config();
  if (name == "micro") return micro_config();
  fail("unknown model '" + name + "' (expected femto|tiny|small|base|micro)");
  return {};
}

// ============================================================================
// hierarchical gated CNN model
// ============================================================================

template <typename S>
struct MambaOutModel {
  ModelConfig cfg;
  // Stem: two stride-2 3x3 convs with a norm + GELU in between, norm after.
  Tensor<S> stem1_w, stem1_b, stem1_ng, stem1_nb;
  Tensor<S> stem2_w, stem2_b, stem2_ng, stem2_nb;
  struct Downsample {
    Tensor<S> norm_g, norm_b;  // on the incoming width
    Tensor<S> conv_w, conv_b;  // 3x3 stride 2
  };
  std::vector<Downsample> downs;                  // between stages, 3 of them
  std::vector<std::vector<BlockWeights<S>>> stages;
  // Head: global average pool -> norm -> fc(4x) -> GELU -> fc(classes).
  Tensor<S> head_norm_g, head_norm_b;
  Tensor<S> head_fc1_w, head_fc1_b;
  Tensor<S> head_fc2_w, head_fc2_b;
};

template <typename S>
MambaOutModel<S> build_mambaout(const ModelConfig& cfg, Rng& rng) {
  check(cfg.dims[0] % 2 == 0, "model: first stage width must be even, got " +
                                  std::to_string(cfg.dims[0]));
  for (int d : cfg.depths) check(d >= 1, "model: every stage needs >= 1 block");
  check(cfg.mixer == MixerKind::GatedConv || cfg.mixer == MixerKind::MambaSsm ||
            cfg.mixer == MixerKind::Identity,
        std::string("model: unsupported mixer '") + mixer_kind_name(cfg.mixer) + "'");
  MambaOutModel<S> m;
  m.cfg = cfg;
  int half = cfg.dims[0] / 2;
  m.stem1_w = trunc_normal<S>({3, 3, cfg.in_channels, half}, rng);
  m.stem1_b = Tensor<S>::zeros({half});
  m.stem1_ng = Tensor<S>::full({half}, S(1));
  m.stem1_nb = Tensor<S>::zeros({half});
  m.stem2_w = trunc_normal<S>({3, 3, half, cfg.dims[0]}, rng);
  m.stem2_b = Tensor<S>::zeros({cfg.dims[0]});
  m.stem2_ng = Tensor<S>::full({cfg.dims[0]}, S(1));
  m.stem2_nb = Tensor<S>::zeros({cfg.dims[0]});

  // Stochastic depth ramps linearly over the block index.
  int total = cfg.total_depth(), index = 0;
  m.stages.resize(4);
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < cfg.depths[static_cast<std::size_t>(s)]; ++b, ++index) {
      auto w = make_block_weights<S>(cfg.dims[static_cast<std::size_t>(s)],
                                     cfg.hidden(s), cfg.conv_channels(s),
                                     cfg.kernel_size, cfg.mixer, cfg.ssm_state_dim, rng);
      w.drop_path_rate =
          total > 1 ? static_cast<S>(cfg.drop_path_rate * index / (total - 1)) : S(0);
      m.stages[static_cast<std::size_t>(s)].push_back(std::move(w));
    }
    if (s < 3) {
      int cin = cfg.dims[static_cast<std::size_t>(s)];
      int cout = cfg.dims[static_cast<std::size_t>(s) + 1];
      typename MambaOutModel<S>::Downsample d;
      d.norm_g = Tensor<S>::full({cin}, S(1));
      d.norm_b = Tensor<S>::zeros({cin});
      d.conv_w = trunc_normal<S>({3, 3, cin, cout}, rng);
      d.conv_b = Tensor<S>::zeros({cout});
      m.downs.push_back(std::move(d));
    }
  }

  int last = cfg.dims[3];
  m.head_norm_g = Tensor<S>::full({last}, S(1));
  m.head_norm_b = Tensor<S>::zeros({last});
  m.head_fc1_w = trunc_normal<S>({last, 4 * last}, rng);
  m.head_fc1_b = Tensor<S>::zeros({4 * last});
  m.head_fc2_w = trunc_normal<S>({4 * last, cfg.num_classes}, rng);
  m.head_fc2_b = Tensor<S>::zeros({cfg.num_classes});
  return m;
}

// Token feature map after the last stage, [B, H/32, W/32, dims[3]].
template <typename S>
Tensor<S> mambaout_features(const MambaOutModel<S>& m, const Tensor<S>& images,
                            bool training, Rng& rng) {
  check(images.rank() == 4 && images.shape()[3] == m.cfg.in_channels,
        "model: expected images [B,H,W," + std::to_string(m.cfg.in_channels) +
            "], got " + shape_str(images.shape()));
  auto x = conv2d(images, m.stem1_w, m.stem1_b, 2, 1);
  x = layer_norm(x, m.stem1_ng, m.stem1_nb, S(1e-6));
  x = gelu(x);
  x = conv2d(x, m.stem2_w, m.stem2_b, 2, 1);
  x = layer_norm(x, m.stem2_ng, m.stem2_nb, S(1e-6));
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) {
      const auto& d = m.downs[s - 1];
      x = layer_norm(x, d.norm_g, d.norm_b, S(1e-6));
      x = conv2d(x, d.conv_w, d.conv_b, 2, 1);
    }
    for (const auto& w : m.stages[s])
      x = gated_block_forward(x, w, m.cfg.mixer, training, rng);
  }
  return x;
}

template <typename S>
Tensor<S> mambaout_forward(const MambaOutModel<S>& m, const Tensor<S>& images,
                           bool training, Rng& rng) {
  auto tok = mambaout_features(m, images, training, rng);
  auto pooled = mean(tok, {1, 2});
  auto h = layer_norm(pooled, m.head_norm_g, m.head_norm_b, S(1e-6));
  h = gelu(linear(h, m.head_fc1_w, m.head_fc1_b));
  return linear(h, m.head_fc2_w, m.head_fc2_b);
}

// ============================================================================
// isotropic transformer on patches
// ============================================================================

struct TransformerConfig {
  std::string name = "vit-micro";
  int img = 32;
  int patch = 4;
  int in_channels = 3;
  int dim = 64;
  int depth = 4;
  int heads = 4;
  int num_classes = 8;
  double drop_path_rate = 0.0;

  int tokens_per_side() const { return img / patch; }
  int tokens() const { return tokens_per_side() * tokens_per_side(); }
};

template <typename S>
struct TransformerModel {
  TransformerConfig cfg;
  Tensor<S> embed_w, embed_b;  // [p,p,Cin,D], stride-p conv
  Tensor<S> pos;               // [T,D] learned positional table
  std::vector<TransformerBlockWeights<S>> blocks;
  Tensor<S> norm_g, norm_b;
  Tensor<S> head_w, head_b;
};

template <typename S>
TransformerModel<S> build_transformer(const TransformerConfig& cfg, Rng& rng) {
  check(cfg.img % cfg.patch == 0, "transformer: image size " + std::to_string(cfg.img) +
                                      " not divisible by patch " +
                                      std::to_string(cfg.patch));
  TransformerModel<S> m;
  m.cfg = cfg;
  m.embed_w = trunc_normal<S>({cfg.patch, cfg.patch, cfg.in_channels, cfg.dim}, rng);
  m.embed_b = Tensor<S>::zeros({cfg.dim});
  m.pos = trunc_normal<S>({cfg.tokens(), cfg.dim}, rng);
  int total = cfg.depth;
  for (int i = 0; i < cfg.depth; ++i) {
    auto w = make_transformer_block_weights<S>(cfg.dim, cfg.heads, rng);
    w.drop_path_rate =
        total > 1 ? static_cast<S>(cfg.drop_path_rate * i / (total - 1)) : S(0);
    m.blocks.push_back(std::move(w));
  }
  m.norm_g = Tensor<S>::full({cfg.dim}, S(1));
  m.norm_b = Tensor<S>::zeros({cfg.dim});
  m.head_w = trunc_normal<S>({cfg.dim, cfg.num_classes}, rng);
  m.head_b = Tensor<S>::zeros({cfg.num_classes});
  return m;
}

// Final per-token features [B,T,D] in raster order, after the closing norm.
template <typename S>
Tensor<S> transformer_tokens(const TransformerModel<S>& m, const Tensor<S>& images,
                             MixMode mode, bool training, Rng& rng) {
  check(images.rank() == 4 && images.shape()[1] == m.cfg.img &&
            images.shape()[2] == m.cfg.img && images.shape()[3] == m.cfg.in_channels,
        "transformer: expected images [B," + std::to_string(m.cfg.img) + "," +
            std::to_string(m.cfg.img) + "," + std::to_string(m.cfg.in_channels) +
            "], got " + shape_str(images.shape()));
  int B = images.shape()[0];
  auto x = conv2d(images, m.embed_w, m.embed_b, m.cfg.patch, 0);
  x = reshape(x, {B, m.cfg.tokens(), m.cfg.dim});
  x = add(x, m.pos);
  for (const auto& w : m.blocks)
    x = transformer_block_forward(x, w, mode, training, rng);
  return layer_norm(x, m.norm_g, m.norm_b, S(1e-6));
}

template <typename S>
Tensor<S> transformer_forward(const TransformerModel<S>& m, const Tensor<S>& images,
                              MixMode mode, bool training, Rng& rng) {
  auto tok = transformer_tokens(m, images, mode, training, rng);
  return linear(mean(tok, {1}), m.head_w, m.head_b);
}

// ============================================================================
// parameter registry
// ============================================================================

// Named handles into a model's weights. Tensors share storage with the model,
// so optimizer updates and checkpoint loads through the registry are visible
// to subsequent forwards.
template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

namespace detail {

template <typename S>
void push_block_params(std::vector<NamedParam<S>>& out, const std::string& prefix,
                       const BlockWeights<S>& w) {
  out.push_back({prefix + ".norm.g", w.norm_gamma});
  out.push_back({prefix + ".norm.b", w.norm_beta});
  out.push_back({prefix + ".fc1.w", w.fc1_w});
  out.push_back({prefix + ".fc1.b", w.fc1_b});
  out.push_back({prefix + ".fc2.w", w.fc2_w});
  out.push_back({prefix + ".fc2.b", w.fc2_b});
  if (w.conv_kernel.defined()) {
    out.push_back({prefix + ".conv.w", w.conv_kernel});
    out.push_back({prefix + ".conv.b", w.conv_bias});
  }
  if (w.ssm.has_value()) {
    out.push_back({prefix + ".ssm.a_log", w.ssm->a_log});
    out.push_back({prefix + ".ssm.delta.w", w.ssm->delta_w});
    out.push_back({prefix + ".ssm.delta.b", w.ssm->delta_b});
    out.push_back({prefix + ".ssm.b.w", w.ssm->b_w});
    out.push_back({prefix + ".ssm.b.b", w.ssm->b_b});
    out.push_back({prefix + ".ssm.c.w", w.ssm->c_w});
    out.push_back({prefix + ".ssm.c.b", w.ssm->c_b});
  }
}

}  // namespace detail

template <typename S>
std::vector<NamedParam<S>> named_params(const MambaOutModel<S>& m) {
  std::vector<NamedParam<S>> out;
  out.push_back({"stem.conv1.w", m.stem1_w});
  out.push_back({"stem.conv1.b", m.stem1_b});
  out.push_back({"stem.norm1.g", m.stem1_ng});
  out.push_back({"stem.norm1.b", m.stem1_nb});
  out.push_back({"stem.conv2.w", m.stem2_w});
  out.push_back({"stem.conv2.b", m.stem2_b});
  out.push_back({"stem.norm2.g", m.stem2_ng});
  out.push_back({"stem.norm2.b", m.stem2_nb});
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    if (s > 0) {
      std::string p = "down" + std::to_string(s - 1);
      out.push_back({p + ".norm.g", m.downs[s - 1].norm_g});
      out.push_back({p + ".norm.b", m.downs[s - 1].norm_b});
      out.push_back({p + ".conv.w", m.downs[s - 1].conv_w});
      out.push_back({p + ".conv.b", m.downs[s - 1].conv_b});
    }
    for (std::size_t b = 0; b < m.stages[s].size(); ++b)
      detail::push_block_params(out,
                                "stage" + std::to_string(s) + ".block" + std::to_string(b),
                                m.stages[s][b]);
  }
  out.push_back({"head.norm.g", m.head_norm_g});
  out.push_back({"head.norm.b", m.head_norm_b});
  out.push_back({"head.fc1.w", m.head_fc1_w});
  out.push_back({"head.fc1.b", m.head_fc1_b});
  out.push_back({"head.fc2.w", m.head_fc2_w});
  out.push_back({"head.fc2.b", m.head_fc2_b});
  return out;
}

template <typename S>
std::vector<NamedParam<S>> named_params(const TransformerModel<S>& m) {
  std::vector<NamedParam<S>> out;
  out.push_back({"embed.w", m.embed_w});
  out.push_back({"embed.b", m.embed_b});
  out.push_back({"pos", m.pos});
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& w = m.blocks[i];
    std::string p = "block" + std::to_string(i);
    out.push_back({p + ".norm1.g", w.norm1_gamma});
    out.push_back({p + ".norm1.b", w.norm1_beta});
    out.push_back({p + ".attn.wq", w.attn.wq});
    out.push_back({p + ".attn.wk", w.attn.wk});
    out.push_back({p + ".attn.wv", w.attn.wv});
    out.push_back({p + ".attn.wo", w.attn.wo});
    out.push_back({p + ".norm2.g", w.norm2_gamma});
    out.push_back({p + ".norm2.b", w.norm2_beta});
    out.push_back({p + ".mlp1.w", w.mlp1_w});
    out.push_back({p + ".mlp1.b", w.mlp1_b});
    out.push_back({p + ".mlp2.w", w.mlp2_w});
    out.push_back({p + ".mlp2.b", w.mlp2_b});
  }
  out.push_back({"norm.g", m.norm_g});
  out.push_back({"norm.b", m.norm_b});
  out.push_back({"head.w", m.head_w});
  out.push_back({"head.b", m.head_b});
  return out;
}

template <typename S>
std::int64_t count_params(const std::vector<NamedParam<S>>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

template <typename S>
void set_requires_grad_all(std::vector<NamedParam<S>>& params, bool flag) {
  for (auto& p : params) p.tensor.set_requires_grad(flag);
}

}  // namespace mokt
