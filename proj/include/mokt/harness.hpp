#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mokt/checkpoint.hpp"
#include "mokt/models.hpp"
#include "mokt/synthetic.hpp"

namespace mokt {

// ============================================================================
// optimizer
// ============================================================================

struct AdamwConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  std::vector<S> m, v;
};

// One decoupled-weight-decay Adam step. `step` is 1-based for the bias
// correction. Decay multiplies the parameter by (1 - lr*wd) independently of
// the gradient, so zero gradients with decay still shrink the parameter.
template <typename S>
void adamw_step(Tensor<S>& param, const std::vector<S>& grad, AdamState<S>& state,
                double lr, double weight_decay, std::int64_t step,
                const AdamwConfig& cfg = {}) {
  auto& p = param.mutable_values();
  check(grad.size() == p.size(), "adamw: gradient size " + std::to_string(grad.size()) +
                                     " != param size " + std::to_string(p.size()));
  check(step >= 1, "adamw: step must be 1-based");
  if (state.m.empty()) {
    state.m.assign(p.size(), S(0));
    state.v.assign(p.size(), S(0));
  }
  check(state.m.size() == p.size(), "adamw: state size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(static_cast<double>(grad[i])))
      fail("adamw: non-finite gradient at flat index " + std::to_string(i));

  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    double g = static_cast<double>(grad[i]);
    double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * g;
    double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<S>(m);
    state.v[i] = static_cast<S>(v);
    double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    double value = static_cast<double>(p[i]) * (1.0 - lr * weight_decay) - lr * upd;
    p[i] = static_cast<S>(value);
  }
}

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
// at the final step.
double lr_schedule(std::int64_t step, std::int64_t total_steps,
                   std::int64_t warmup_steps, double base_lr);

// ============================================================================
// training configuration and metrics
// ============================================================================

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  // Scaling rule: lr = batch_size/1024 * 1e-3, unless explicitly overridden.
  std::optional<double> base_lr;
  int warmup_epochs = 2;
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  double drop_path_peak = 0.0;
  std::uint64_t seed = 0;
  std::string dtype = "f32";

  double effective_lr() const {
    return base_lr ? *base_lr : static_cast<double>(batch_size) / 1024.0 * 1e-3;
  }
};

struct MetricRow {
  int epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
};

// Deterministic serialization; identical histories yield identical bytes.
std::string metrics_csv(const std::vector<MetricRow>& rows);

struct TrainResult {
  std::vector<MetricRow> history;
  double final_val_accuracy = 0;
  std::string csv;
};

// ============================================================================
// training engine
// ============================================================================

template <typename S>
using ForwardFn = std::function<Tensor<S>(const Tensor<S>&, bool, Rng&)>;

namespace detail {

template <typename S>
Tensor<S> gather_batch(const Dataset<S>& ds, const std::vector<int>& order, int begin,
                       int count, bool augment, Rng& rng, std::vector<int>& labels) {
  int H = ds.images.shape()[1], W = ds.images.shape()[2], C = ds.images.shape()[3];
  std::int64_t stride = static_cast<std::int64_t>(H) * W * C;
  Tensor<S> batch = Tensor<S>::zeros({count, H, W, C});
  auto& dst = batch.mutable_values();
  const auto& src = ds.images.values();
  labels.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    int idx = order[static_cast<std::size_t>(begin + i)];
    int label = ds.labels[static_cast<std::size_t>(idx)];
    bool flip = augment && rng.uniform() < 0.5;
    const S* in = src.data() + idx * stride;
    S* out = dst.data() + i * stride;
    if (!flip) {
      std::copy_n(in, stride, out);
    } else {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < C; ++c)
            out[(static_cast<std::int64_t>(y) * W + (W - 1 - x)) * C + c] =
                in[(static_cast<std::int64_t>(y) * W + x) * C + c];
      label = hflip_label(label);
    }
    labels[static_cast<std::size_t>(i)] = label;
  }
  return batch;
}

template <typename S>
std::vector<std::vector<S>> snapshot_params(const std::vector<NamedParam<S>>& params) {
  std::vector<std::vector<S>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor.values());
  return out;
}

template <typename S>
void restore_params(std::vector<NamedParam<S>>& params,
                    const std::vector<std::vector<S>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].tensor.mutable_values() = values[i];
}

void write_text_file(const std::string& path, const std::string& body);

}  // namespace detail

// Minibatch AdamW training over a parameter registry and a forward closure.
// Deterministic for a fixed (config, seed): shuffling, augmentation, and
// stochastic depth all derive from tc.seed, and parameters update in registry
// order. With out_dir set, writes <tag>metrics.csv and <tag>model.mokt; a
// non-finite loss restores the last completed epoch, writes
// <tag>last_good.mokt, and throws.
template <typename S>
TrainResult run_training(std::vector<NamedParam<S>>& params, const ForwardFn<S>& forward,
                         const Dataset<S>& train_ds, const Dataset<S>& val_ds,
                         const TrainConfig& tc, const std::string& out_dir = "",
                         const std::string& tag = "") {
  check(tc.epochs > 0 && tc.batch_size > 0, "train: epochs and batch_size must be > 0");
  check(tc.warmup_epochs >= 0 && tc.warmup_epochs <= tc.epochs,
        "train: warmup_epochs outside [0, epochs]");
  int n = train_ds.count();
  int steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * tc.epochs;
  std::int64_t warmup_steps =
      static_cast<std::int64_t>(steps_per_epoch) * tc.warmup_epochs;
  double base_lr = tc.effective_lr();

  for (auto& p : params) p.tensor.set_requires_grad(true);
  std::vector<AdamState<S>> states(params.size());
  Rng drop_rng(mix_seed(tc.seed, 0xd409));
  auto last_good = detail::snapshot_params(params);
  auto file = [&](const std::string& name) { return out_dir + "/" + tag + name; };

  auto evaluate = [&](const Dataset<S>& ds, double& loss_out, double& acc_out) {
    NoGradGuard guard;
    std::vector<int> order(static_cast<std::size_t>(ds.count()));
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0;
    std::int64_t correct = 0;
    Rng unused(0);
    std::vector<int> labels;
    for (int at = 0; at < ds.count(); at += tc.batch_size) {
      int bs = std::min(tc.batch_size, ds.count() - at);
      auto xb = detail::gather_batch(ds, order, at, bs, false, unused, labels);
      auto logits = forward(xb, false, unused);
      loss_sum +=
          static_cast<double>(cross_entropy(logits, labels, S(0))[0]) * bs;
      auto pred = argmax_rows(logits);
      for (int i = 0; i < bs; ++i)
        correct += pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
    }
    loss_out = loss_sum / ds.count();
    acc_out = static_cast<double>(correct) / ds.count();
  };

  TrainResult result;
  std::int64_t gstep = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng erng(mix_seed(mix_seed(tc.seed, 0xa6), static_cast<std::uint64_t>(epoch)));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(erng.uniform_int(0, i))]);

    double loss_sum = 0, last_lr = 0;
    std::int64_t correct = 0;
    std::vector<int> labels;
    for (int at = 0; at < n; at += tc.batch_size) {
      int bs = std::min(tc.batch_size, n - at);
      auto xb = detail::gather_batch(train_ds, order, at, bs, true, erng, labels);
      double lr = lr_schedule(gstep, total_steps, warmup_steps, base_lr);
      last_lr = lr;
      auto logits = forward(xb, true, drop_rng);
      auto loss = cross_entropy(logits, labels, static_cast<S>(tc.label_smoothing));
      double lval = static_cast<double>(loss[0]);
      if (!std::isfinite(lval)) {
        detail::restore_params(params, last_good);
        if (!out_dir.empty()) save_checkpoint(file("last_good.mokt"), params);
        fail("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
             std::to_string(gstep) + "; last good checkpoint restored" +
             (out_dir.empty() ? "" : " and written to " + file("last_good.mokt")));
      }
      backward(loss);
      loss_sum += lval * bs;
      auto pred = argmax_rows(logits);
      for (int i = 0; i < bs; ++i)
        correct += pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
      ++gstep;
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& t = params[i].tensor;
        if (!t.has_grad()) continue;  // unused parameter: leave untouched
        double wd = t.rank() >= 2 ? tc.weight_decay : 0.0;  // no decay on bias/norm
        adamw_step(t, t.grad_ref(), states[i], lr, wd, gstep);
        t.zero_grad();
      }
    }

    double val_loss = 0, val_acc = 0;
    evaluate(val_ds, val_loss, val_acc);
    result.history.push_back({epoch, "train", loss_sum / n,
                              static_cast<double>(correct) / n, last_lr});
    result.history.push_back({epoch, "val", val_loss, val_acc, last_lr});
    result.final_val_accuracy = val_acc;
    last_good = detail::snapshot_params(params);
  }

  result.csv = metrics_csv(result.history);
  if (!out_dir.empty()) {
    detail::write_text_file(file("metrics.csv"), result.csv);
    save_checkpoint(file("model.mokt"), params);
  }
  return result;
}

// Trains a hierarchical gated CNN on the arrangement task.
template <typename S>
TrainResult train_mambaout(const ModelConfig& model_cfg, const SyntheticTask& task,
                           const TrainConfig& tc, const std::string& out_dir = "",
                           const std::string& tag = "") {
  ModelConfig cfg = model_cfg;
  cfg.drop_path_rate = tc.drop_path_peak;
  cfg.num_classes = task.num_classes;
  Rng wrng(tc.seed);
  auto model = build_mambaout<S>(cfg, wrng);
  auto params = named_params(model);
  auto train_ds = make_split<S>(task, Split::Train);
  auto val_ds = make_split<S>(task, Split::Val);
  ForwardFn<S> fwd = [&model](const Tensor<S>& x, bool training, Rng& rng) {
    return mambaout_forward(model, x, training, rng);
  };
  return run_training<S>(params, fwd, train_ds, val_ds, tc, out_dir, tag);
}

// The regression preset exercised by the training-sanity checks. The learning
// rate is an explicit override: the batch-scaling rule tuned for ImageNet
// epochs is far too slow for a few hundred toy steps.
inline TrainConfig micro_train_config(std::uint64_t seed = 0) {
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 64;
  tc.base_lr = 1e-3;
  tc.warmup_epochs = 2;
  tc.seed = seed;
  return tc;
}

// ============================================================================
// fully-visible vs causal comparison
// ============================================================================

// Frozen comparison preset. Calibration note: at this scale both arms
// converge on every seed (fully visible ~0.98, causal ~0.90, gap ~ +0.085);
// larger/deeper settings leave the fully-visible arm seed-sensitive.
inline TransformerConfig compare_transformer_config() {
  TransformerConfig cfg;
  cfg.img = 32;
  cfg.patch = 4;
  cfg.dim = 32;
  cfg.depth = 2;
  cfg.heads = 4;
  return cfg;
}

inline SyntheticTask compare_task_config() {
  SyntheticTask task;
  task.train_samples = 768;
  task.val_samples = 256;
  return task;
}

inline TrainConfig compare_train_config(std::uint64_t seed = 0) {
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 32;
  tc.base_lr = 1e-3;
  tc.warmup_epochs = 2;
  tc.seed = seed;
  return tc;
}

struct MixerComparison {
  int seeds = 0;
  std::vector<double> fv_accuracy, causal_accuracy;
  double fv_mean = 0, fv_sd = 0;
  double causal_mean = 0, causal_sd = 0;
  double gap = 0;          // fv_mean - causal_mean
  double control_gap = 0;  // same-mode rerun difference; 0 when deterministic
  bool causal_prefix_stable = false;
};

namespace detail {

inline void mean_sd(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  sd = std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace detail

// Post-training causality spot check: logits pooled over the first `prefix`
// tokens must ignore any change confined to later raster positions.
template <typename S>
bool causal_prefix_logits_stable(const TransformerModel<S>& model,
                                 const Tensor<S>& images, int prefix) {
  check(prefix >= 1 && prefix < model.cfg.tokens(), "prefix outside [1, tokens)");
  NoGradGuard guard;
  Rng rng(0);
  auto perturbed = images.clone();
  // Repaint every pixel belonging to patches at raster index >= prefix.
  int side = model.cfg.tokens_per_side(), patch = model.cfg.patch;
  auto& v = perturbed.mutable_values();
  int B = images.shape()[0], H = images.shape()[1], W = images.shape()[2],
      C = images.shape()[3];
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int token = (y / patch) * side + (x / patch);
        if (token < prefix) continue;
        for (int c = 0; c < C; ++c)
          v[static_cast<std::size_t>(((b * H + y) * W + x) * C + c)] +=
              static_cast<S>(0.31 * (c + 1));
      }

  // Mean over the first `prefix` tokens only, then the classifier.
  auto pool_prefix = [&](const Tensor<S>& imgs) {
    auto tok = transformer_tokens(model, imgs, MixMode::Causal, false, rng);
    std::vector<S> pooled(static_cast<std::size_t>(B * model.cfg.dim), S(0));
    const auto& tv = tok.values();
    for (int b2 = 0; b2 < B; ++b2)
      for (int t = 0; t < prefix; ++t)
        for (int d = 0; d < model.cfg.dim; ++d)
          pooled[static_cast<std::size_t>(b2 * model.cfg.dim + d)] +=
              tv[static_cast<std::size_t>((b2 * model.cfg.tokens() + t) * model.cfg.dim +
                                          d)] /
              static_cast<S>(prefix);
    auto pt = Tensor<S>::from({B, model.cfg.dim}, pooled);
    return linear(pt, model.head_w, model.head_b);
  };
  auto a = pool_prefix(images);
  auto b = pool_prefix(perturbed);
  return a.values() == b.values();
}

// Trains the isotropic transformer once per (seed, mode) with identical
// initialization across modes, plus a same-mode control rerun.
template <typename S>
MixerComparison compare_mixers(const TransformerConfig& tcfg, const SyntheticTask& task,
                               const TrainConfig& tc, int num_seeds) {
  check(num_seeds >= 3, "compare: need >= 3 seeds");
  TransformerConfig cfg = tcfg;
  cfg.num_classes = task.num_classes;
  cfg.img = task.image_size;
  auto train_ds = make_split<S>(task, Split::Train);
  auto val_ds = make_split<S>(task, Split::Val);

  TransformerModel<S> last_causal;
  auto run_arm = [&](std::uint64_t wseed, MixMode mode, bool keep) {
    Rng wrng(wseed);
    auto model = build_transformer<S>(cfg, wrng);
    auto params = named_params(model);
    TrainConfig arm = tc;
    arm.seed = wseed;
    ForwardFn<S> fwd = [&model, mode](const Tensor<S>& x, bool training, Rng& rng) {
      return transformer_forward(model, x, mode, training, rng);
    };
    auto res = run_training<S>(params, fwd, train_ds, val_ds, arm);
    if (keep) last_causal = model;
    return res.final_val_accuracy;
  };

  MixerComparison out;
  out.seeds = num_seeds;
  for (int s = 0; s < num_seeds; ++s) {
    std::uint64_t wseed = mix_seed(tc.seed, static_cast<std::uint64_t>(s));
    out.fv_accuracy.push_back(run_arm(wseed, MixMode::FullyVisible, false));
    out.causal_accuracy.push_back(run_arm(wseed, MixMode::Causal, s == num_seeds - 1));
  }
  detail::mean_sd(out.fv_accuracy, out.fv_mean, out.fv_sd);
  detail::mean_sd(out.causal_accuracy, out.causal_mean, out.causal_sd);
  out.gap = out.fv_mean - out.causal_mean;

  // Control: identical mode and seed must reproduce the accuracy exactly.
  double rerun = run_arm(mix_seed(tc.seed, 0), MixMode::FullyVisible, false);
  out.control_gap = std::abs(rerun - out.fv_accuracy[0]);

  // Post-training causality spot check on a handful of validation images.
  int probe = std::min(4, val_ds.count());
  auto probe_imgs =
      Tensor<S>::from({probe, cfg.img, cfg.img, 3},
                      std::vector<S>(val_ds.images.values().begin(),
                                     val_ds.images.values().begin() +
                                         static_cast<std::int64_t>(probe) * cfg.img *
                                             cfg.img * 3));
  out.causal_prefix_stable =
      causal_prefix_logits_stable(last_causal, probe_imgs, cfg.tokens() / 2);
  return out;
}

// ============================================================================
// verification and benchmarking entry points
// ============================================================================

struct ScanCheckReport {
  int trials_per_dtype = 0;
  double max_rel_err_f32 = 0;
  double max_rel_err_f64 = 0;
  bool causality_exact = false;
};

// Randomized parallel-vs-sequential scan equivalence over T in [1, max_len],
// plus the exact sequential causality perturbation check.
ScanCheckReport scan_equivalence_check(int trials_per_dtype, int max_len,
                                       std::uint64_t seed);

struct GradCheckRow {
  std::string op;
  int coords = 0;
  double max_rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double worst = 0;
};

// Central-difference gradient audit in float64: every differentiable op plus
// the three block types, >= 100 random coordinates each.
GradCheckReport run_gradcheck(std::uint64_t seed);

struct ScanBenchRow {
  int tokens = 0;
  double seq_ms = 0, par_ms = 0;
  double seq_ns_per_token = 0, par_ns_per_token = 0;
  double max_rel_err = 0;
};

// Median wall times over `repeats` runs (>= 3), one warmup run discarded,
// on [T, channels*state_dim] float64 scans.
std::vector<ScanBenchRow> bench_scan(const std::vector<int>& token_counts, int channels,
                                     int state_dim, int repeats, std::uint64_t seed);

// ============================================================================
// flat key=value config echo
// ============================================================================

std::string config_echo(const ModelConfig& model, const SyntheticTask& task,
                        const TrainConfig& tc);
std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& body);

}  // namespace mokt
