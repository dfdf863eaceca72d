#include "mokt/harness.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "mokt/gradcheck.hpp"

namespace mokt {

// ============================================================================
// schedule and metrics
// ============================================================================

double lr_schedule(std::int64_t step, std::int64_t total_steps,
                   std::int64_t warmup_steps, double base_lr) {
  check(total_steps > 0 && step >= 0 && step < total_steps,
        "lr_schedule: step " + std::to_string(step) + " outside [0, " +
            std::to_string(total_steps) + ")");
  check(warmup_steps >= 0 && warmup_steps <= total_steps,
        "lr_schedule: warmup outside [0, total]");
  if (step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  std::int64_t span = std::max<std::int64_t>(total_steps - 1 - warmup_steps, 1);
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "epoch,split,loss,accuracy,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.8g,%.8g,%.8g\n", r.epoch, r.split.c_str(),
                  r.loss, r.accuracy, r.lr);
    out += buf;
  }
  return out;
}

namespace detail {

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::trunc);
  check(static_cast<bool>(f), "cannot open '" + path + "' for writing");
  f << body;
  check(static_cast<bool>(f), "write to '" + path + "' failed");
}

}  // namespace detail

// ============================================================================
// scan equivalence
// ============================================================================

namespace {

template <typename S>
double scan_trials(int trials, int max_len, std::uint64_t seed) {
  NoGradGuard guard;
  Rng rng(seed);
  double worst = 0;
  for (int trial = 0; trial < trials; ++trial) {
    int t = std::min(max_len,
                     static_cast<int>(std::exp(rng.uniform(0.0, std::log(max_len + 1.0)))));
    t = std::max(t, 1);
    int d = rng.uniform_int(1, 8), n = rng.uniform_int(1, 8);
    if (trial % 4 == 3) {
      // Full selective pipeline: projections, discretization, scan, readout.
      auto params = make_ssm_params<S>(d, n, rng);
      auto x = randn<S>({2, t, d}, rng);
      auto seq = ssm_scan_sequential(x, params);
      auto par = ssm_scan_parallel(x, params);
      worst = std::max(worst, static_cast<double>(max_rel_err(par, seq)));
    } else {
      // Scan core on raw coefficient/input pairs with |a| < 1.
      int lanes = d * n;
      auto a = Tensor<S>::zeros({t, lanes});
      for (auto& v : a.mutable_values()) v = static_cast<S>(rng.uniform(0.02, 0.98));
      auto b = randn<S>({t, lanes}, rng);
      auto seq = linear_scan_sequential(a, b);
      auto par = linear_scan_parallel(a, b);
      worst = std::max(worst, static_cast<double>(max_rel_err(par, seq)));
    }
  }
  return worst;
}

template <typename S>
bool scan_causality_exact(std::uint64_t seed) {
  NoGradGuard guard;
  Rng rng(seed);
  int t = 96, lanes = 12, cut = 57;
  auto a = Tensor<S>::zeros({t, lanes});
  for (auto& v : a.mutable_values()) v = static_cast<S>(rng.uniform(0.02, 0.98));
  auto b = randn<S>({t, lanes}, rng);
  auto b2 = b.clone();
  for (int i = cut * lanes; i < t * lanes; ++i)
    b2.mutable_values()[static_cast<std::size_t>(i)] += S(3);
  auto s1 = linear_scan_sequential(a, b), s2 = linear_scan_sequential(a, b2);
  auto p1 = linear_scan_parallel(a, b), p2 = linear_scan_parallel(a, b2);
  for (int i = 0; i < cut * lanes; ++i) {
    if (s1[i] != s2[i]) return false;
    if (p1[i] != p2[i]) return false;
  }
  return true;
}

}  // namespace

ScanCheckReport scan_equivalence_check(int trials_per_dtype, int max_len,
                                       std::uint64_t seed) {
  check(trials_per_dtype >= 1 && max_len >= 1, "scan check: bad arguments");
  ScanCheckReport rep;
  rep.trials_per_dtype = trials_per_dtype;
  rep.max_rel_err_f32 = scan_trials<float>(trials_per_dtype, max_len, mix_seed(seed, 1));
  rep.max_rel_err_f64 = scan_trials<double>(trials_per_dtype, max_len, mix_seed(seed, 2));
  rep.causality_exact =
      scan_causality_exact<double>(mix_seed(seed, 3)) &&
      scan_causality_exact<float>(mix_seed(seed, 4));
  return rep;
}

// ============================================================================
// gradient audit
// ============================================================================

namespace {

using DTensor = Tensor<double>;
using LossFn = std::function<DTensor(const DTensor&)>;

DTensor project_to_scalar(const DTensor& y, std::uint64_t seed) {
  Rng rng(seed);
  auto r = randn<double>(y.shape(), rng);
  std::vector<int> axes(static_cast<std::size_t>(y.rank()));
  for (int i = 0; i < y.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
  return mean(mul(y, r), axes);
}

GradCheckRow check_one(const std::string& op, DTensor x, const LossFn& f) {
  x.set_requires_grad();
  x.zero_grad();
  auto loss = f(x);
  backward(loss);
  check(x.has_grad(), "gradcheck: no gradient reached input for " + op);
  auto numeric = finite_diff_grad<double>(f, x, 1e-5);
  GradCheckRow row{op, static_cast<int>(x.size()),
                   static_cast<double>(max_rel_err(x.grad(), numeric))};
  x.zero_grad();
  x.set_requires_grad(false);
  return row;
}

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed) {
  GradCheckReport rep;
  Rng rng(seed);
  auto push = [&rep](GradCheckRow row) {
    rep.worst = std::max(rep.worst, row.max_rel_err);
    rep.rows.push_back(std::move(row));
  };

  // -- tensor core ops ------------------------------------------------------
  {
    auto b = randn<double>({32}, rng);
    push(check_one("add", randn<double>({4, 32}, rng),
                   [&](const DTensor& x) { return project_to_scalar(add(x, b), 1); }));
    auto b2 = randn<double>({4, 32}, rng);
    push(check_one("sub", randn<double>({4, 32}, rng),
                   [&](const DTensor& x) { return project_to_scalar(sub(x, b2), 2); }));
    auto m = randn<double>({4, 32}, rng);
    push(check_one("mul", randn<double>({4, 32}, rng),
                   [&](const DTensor& x) { return project_to_scalar(mul(x, m), 3); }));
    push(check_one("scale", randn<double>({128}, rng), [&](const DTensor& x) {
      return project_to_scalar(scale(x, 0.7), 4);
    }));
    push(check_one("exp", randn<double>({128}, rng),
                   [&](const DTensor& x) { return project_to_scalar(exp(x), 5); }));
    push(check_one("softplus", randn<double>({128}, rng), [&](const DTensor& x) {
      return project_to_scalar(softplus(x), 6);
    }));
    push(check_one("gelu", randn<double>({128}, rng),
                   [&](const DTensor& x) { return project_to_scalar(gelu(x), 7); }));
    push(check_one("reshape", randn<double>({8, 16}, rng), [&](const DTensor& x) {
      return project_to_scalar(reshape(x, {4, 32}), 8);
    }));
    push(check_one("permute", randn<double>({4, 8, 4}, rng), [&](const DTensor& x) {
      return project_to_scalar(permute(x, {2, 0, 1}), 9);
    }));
    push(check_one("transpose_last2", randn<double>({2, 8, 8}, rng),
                   [&](const DTensor& x) {
                     return project_to_scalar(transpose_last2(x), 10);
                   }));
    push(check_one("split_last", randn<double>({6, 20}, rng), [&](const DTensor& x) {
      auto parts = split_last(x, {8, 5, 7});
      return add(add(project_to_scalar(parts[0], 11), project_to_scalar(parts[1], 12)),
                 project_to_scalar(parts[2], 13));
    }));
    auto c1 = randn<double>({6, 9}, rng);
    auto c2 = randn<double>({6, 11}, rng);
    push(check_one("concat_last", randn<double>({6, 20}, rng), [&](const DTensor& x) {
      std::vector<DTensor> parts = {c1, x, c2};
      return project_to_scalar(concat_last(parts), 14);
    }));
    push(check_one("mean", randn<double>({4, 8, 4}, rng), [&](const DTensor& x) {
      return project_to_scalar(mean(x, {0, 2}), 15);
    }));
    auto mb = randn<double>({12, 9}, rng);
    push(check_one("matmul", randn<double>({10, 12}, rng), [&](const DTensor& x) {
      return project_to_scalar(matmul(x, mb), 16);
    }));
    auto lx = randn<double>({9, 12}, rng);
    auto lb = randn<double>({10}, rng);
    push(check_one("linear", randn<double>({12, 10}, rng), [&](const DTensor& w) {
      return project_to_scalar(linear(lx, w, lb), 17);
    }));
    auto gamma = randn<double>({12}, rng);
    auto beta = randn<double>({12}, rng);
    push(check_one("layer_norm", randn<double>({10, 12}, rng), [&](const DTensor& x) {
      return project_to_scalar(layer_norm(x, gamma, beta, 1e-6), 18);
    }));
    push(check_one("softmax", randn<double>({12, 10}, rng), [&](const DTensor& x) {
      return project_to_scalar(softmax(x), 19);
    }));
    auto mask = BoolMask::causal(12);
    push(check_one("softmax-causal", randn<double>({1, 12, 12}, rng),
                   [&](const DTensor& x) {
                     return project_to_scalar(softmax(x, &mask), 20);
                   }));
    auto ck = randn<double>({3, 3, 4, 5}, rng);
    auto cb = randn<double>({5}, rng);
    push(check_one("conv2d", randn<double>({1, 6, 6, 4}, rng), [&](const DTensor& x) {
      return project_to_scalar(conv2d(x, ck, cb, 1, 1), 21);
    }));
    auto dk = randn<double>({3, 3, 4}, rng);
    auto db = randn<double>({4}, rng);
    push(check_one("depthwise_conv2d", randn<double>({1, 6, 6, 4}, rng),
                   [&](const DTensor& x) {
                     return project_to_scalar(depthwise_conv2d(x, dk, db, 1, 1), 22);
                   }));
    std::vector<int> labels(16);
    for (int i = 0; i < 16; ++i) labels[static_cast<std::size_t>(i)] = i % 8;
    push(check_one("cross_entropy", randn<double>({16, 8}, rng),
                   [&](const DTensor& x) { return cross_entropy(x, labels, 0.1); }));
  }

  // -- selective SSM --------------------------------------------------------
  {
    auto a_log = randn<double>({4, 3}, rng);
    auto bmat = randn<double>({2, 13, 3}, rng);
    // Delta stays strictly positive under the +-h finite-difference probes.
    auto delta0 = Tensor<double>::zeros({2, 13, 4});
    {
      Rng drng(seed + 55);
      for (auto& v : delta0.mutable_values()) v = drng.uniform(0.05, 1.5);
    }
    push(check_one("ssm_discretize", delta0, [&](const DTensor& delta) {
      auto [ab, bb] = ssm_discretize(delta, scale(exp(a_log), -1.0), bmat);
      return add(project_to_scalar(ab, 23), project_to_scalar(bb, 24));
    }));

    auto coeff = Tensor<double>::zeros({2, 10, 6});
    {
      Rng crng(seed + 99);
      for (auto& v : coeff.mutable_values()) v = crng.uniform(0.05, 0.95);
    }
    push(check_one("scan-sequential-a", coeff.clone(), [&](const DTensor& a) {
      return project_to_scalar(linear_scan_sequential(a, coeff), 25);
    }));
    push(check_one("scan-sequential-b", randn<double>({2, 10, 6}, rng),
                   [&](const DTensor& b) {
                     return project_to_scalar(linear_scan_sequential(coeff, b), 26);
                   }));
    push(check_one("scan-parallel-a", coeff.clone(), [&](const DTensor& a) {
      return project_to_scalar(linear_scan_parallel(a, coeff), 27);
    }));
    push(check_one("scan-parallel-b", randn<double>({2, 10, 6}, rng),
                   [&](const DTensor& b) {
                     return project_to_scalar(linear_scan_parallel(coeff, b), 28);
                   }));
    auto bb4 = randn<double>({2, 9, 6, 2}, rng);
    push(check_one("state_scale", randn<double>({2, 9, 6}, rng), [&](const DTensor& x) {
      return project_to_scalar(state_scale(bb4, x), 29);
    }));
    auto cmat = randn<double>({2, 9, 2}, rng);
    push(check_one("state_contract", randn<double>({2, 9, 6, 2}, rng),
                   [&](const DTensor& hidden) {
                     return project_to_scalar(state_contract(hidden, cmat), 30);
                   }));
    Rng prng(seed + 7);
    auto sp = make_ssm_params<double>(8, 3, prng);
    push(check_one("ssm-scan-sequential", randn<double>({16, 8}, rng),
                   [&](const DTensor& x) {
                     return project_to_scalar(ssm_scan_sequential(x, sp), 31);
                   }));
    push(check_one("ssm-scan-parallel", randn<double>({16, 8}, rng),
                   [&](const DTensor& x) {
                     return project_to_scalar(ssm_scan_parallel(x, sp), 32);
                   }));
  }

  // -- mixers and blocks ----------------------------------------------------
  {
    Rng wrng(seed + 13);
    auto aw = make_attn_weights<double>(8, 2, wrng);
    push(check_one("attention-fv", randn<double>({13, 8}, rng), [&](const DTensor& x) {
      return project_to_scalar(attention(x, aw, MixMode::FullyVisible), 33);
    }));
    push(check_one("attention-causal", randn<double>({13, 8}, rng),
                   [&](const DTensor& x) {
                     return project_to_scalar(attention(x, aw, MixMode::Causal), 34);
                   }));
    auto kern = randn<double>({3, 3, 3}, wrng);
    auto kb = randn<double>({3}, wrng);
    push(check_one("conv_mixer", randn<double>({1, 5, 5, 8}, rng),
                   [&](const DTensor& u) {
                     auto [g, mixed] = conv_mixer(u, kern, kb, SplitSpec{3, 2, 3});
                     return add(project_to_scalar(g, 35), project_to_scalar(mixed, 36));
                   }));
    push(check_one("drop_path", randn<double>({40, 4}, rng), [&](const DTensor& x) {
      Rng mask_rng(11);
      return project_to_scalar(drop_path(x, 0.3, true, mask_rng), 37);
    }));
    auto conv_w = make_block_weights<double>(8, 12, 6, 3, MixerKind::GatedConv, 4, wrng);
    push(check_one("gated-conv-block", randn<double>({2, 4, 4, 8}, rng),
                   [&](const DTensor& x) {
                     Rng r(0);
                     return project_to_scalar(
                         gated_block_forward(x, conv_w, MixerKind::GatedConv, false, r),
                         38);
                   }));
    auto mamba_w = make_block_weights<double>(8, 12, 6, 3, MixerKind::MambaSsm, 4, wrng);
    push(check_one("mamba-block", randn<double>({1, 4, 4, 8}, rng),
                   [&](const DTensor& x) {
                     Rng r(0);
                     return project_to_scalar(
                         gated_block_forward(x, mamba_w, MixerKind::MambaSsm, false, r),
                         39);
                   }));
    auto tw = make_transformer_block_weights<double>(8, 2, wrng);
    push(check_one("transformer-block-fv", randn<double>({2, 8, 8}, rng),
                   [&](const DTensor& x) {
                     Rng r(0);
                     return project_to_scalar(
                         transformer_block_forward(x, tw, MixMode::FullyVisible, false, r),
                         40);
                   }));
    push(check_one("transformer-block-causal", randn<double>({2, 8, 8}, rng),
                   [&](const DTensor& x) {
                     Rng r(0);
                     return project_to_scalar(
                         transformer_block_forward(x, tw, MixMode::Causal, false, r), 41);
                   }));
  }
  return rep;
}

// ============================================================================
// scan benchmark
// ============================================================================

std::vector<ScanBenchRow> bench_scan(const std::vector<int>& token_counts, int channels,
                                     int state_dim, int repeats, std::uint64_t seed) {
  check(repeats >= 3, "bench: repeats must be >= 3");
  check(!token_counts.empty() && channels > 0 && state_dim > 0, "bench: bad arguments");
  NoGradGuard guard;
  std::vector<ScanBenchRow> rows;
  for (int t : token_counts) {
    check(t >= 1, "bench: token count must be >= 1");
    int lanes = channels * state_dim;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
    auto a = Tensor<double>::zeros({t, lanes});
    for (auto& v : a.mutable_values()) v = rng.uniform(0.05, 0.95);
    auto b = randn<double>({t, lanes}, rng);

    auto time_median = [&](auto&& fn) {
      fn();  // warmup, discarded
      std::vector<double> ms(static_cast<std::size_t>(repeats));
      for (int r = 0; r < repeats; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto t1 = std::chrono::steady_clock::now();
        ms[static_cast<std::size_t>(r)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
      }
      std::sort(ms.begin(), ms.end());
      return ms[ms.size() / 2];
    };

    ScanBenchRow row;
    row.tokens = t;
    row.seq_ms = time_median([&] { linear_scan_sequential(a, b); });
    row.par_ms = time_median([&] { linear_scan_parallel(a, b); });
    row.seq_ns_per_token = row.seq_ms * 1e6 / t;
    row.par_ns_per_token = row.par_ms * 1e6 / t;
    row.max_rel_err = static_cast<double>(
        max_rel_err(linear_scan_parallel(a, b), linear_scan_sequential(a, b)));
    rows.push_back(row);
  }
  return rows;
}

// ============================================================================
// config echo
// ============================================================================

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

std::string fmt_tuple(const std::array<int, 4>& a) {
  std::string out;
  for (int i = 0; i < 4; ++i) {
    if (i) out += ",";
    out += std::to_string(a[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace

std::string config_echo(const ModelConfig& model, const SyntheticTask& task,
                        const TrainConfig& tc) {
  std::string out;
  out += "model.name=" + model.name + "\n";
  out += "model.depths=" + fmt_tuple(model.depths) + "\n";
  out += "model.dims=" + fmt_tuple(model.dims) + "\n";
  out += std::string("model.mixer=") + mixer_kind_name(model.mixer) + "\n";
  out += "model.in_channels=" + std::to_string(model.in_channels) + "\n";
  out += "model.num_classes=" + std::to_string(model.num_classes) + "\n";
  out += "model.kernel_size=" + std::to_string(model.kernel_size) + "\n";
  out += "model.ssm_state_dim=" + std::to_string(model.ssm_state_dim) + "\n";
  out += "model.conv_ratio=" + fmt_double(model.conv_ratio) + "\n";
  out += "model.drop_path_rate=" + fmt_double(model.drop_path_rate) + "\n";
  out += "task.image_size=" + std::to_string(task.image_size) + "\n";
  out += "task.num_classes=" + std::to_string(task.num_classes) + "\n";
  out += "task.train_samples=" + std::to_string(task.train_samples) + "\n";
  out += "task.val_samples=" + std::to_string(task.val_samples) + "\n";
  out += "task.seed=" + std::to_string(task.seed) + "\n";
  out += "train.epochs=" + std::to_string(tc.epochs) + "\n";
  out += "train.batch_size=" + std::to_string(tc.batch_size) + "\n";
  out += "train.base_lr=" + fmt_double(tc.effective_lr()) +
         (tc.base_lr ? "\n" : "  # batch_size/1024 * 1e-3\n");
  out += "train.warmup_epochs=" + std::to_string(tc.warmup_epochs) + "\n";
  out += "train.weight_decay=" + fmt_double(tc.weight_decay) + "\n";
  out += "train.label_smoothing=" + fmt_double(tc.label_smoothing) + "\n";
  out += "train.drop_path_peak=" + fmt_double(tc.drop_path_peak) + "\n";
  out += "train.seed=" + std::to_string(tc.seed) + "\n";
  out += "train.dtype=" + tc.dtype + "\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& body) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t at = 0;
  while (at < body.size()) {
    std::size_t end = body.find('\n', at);
    if (end == std::string::npos) end = body.size();
    std::string line = body.substr(at, end - at);
    at = end + 1;
    if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t')) line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    std::size_t eq = line.find('=');
    check(eq != std::string::npos && eq > start,
          "config: malformed line '" + line + "' (expected key=value)");
    out.emplace_back(line.substr(start, eq - start), line.substr(eq + 1));
  }
  return out;
}

}  // namespace mokt
