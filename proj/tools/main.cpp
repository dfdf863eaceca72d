// Command-line front end: complexity auditing, numerical verification, and
// the synthetic-arrangement training harness.
//
// Exit codes: 0 success, 1 validation failure (bad arguments or a failed
// check), 2 internal error. MOKT_THREADS caps the scan worker pool; 0 or
// unset uses one thread per hardware core.

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mokt/audit.hpp"
#include "mokt/harness.hpp"

using json = nlohmann::ordered_json;

namespace {

// ============================================================================
// shared helpers
// ============================================================================

struct ExpectedBudget {
  double params_m;  // millions, +-3%
  double macs_g;    // billions at 224x224, +-5%
};

// Reference budgets for the published model family at 224x224.
const std::map<std::string, ExpectedBudget>& expected_budgets() {
  static const std::map<std::string, ExpectedBudget> table = {
      {"femto", {7.3, 1.2}},
      {"tiny", {26.5, 4.5}},
      {"small", {48.5, 9.0}},
      {"base", {84.8, 15.8}},
  };
  return table;
}

mokt::MixerKind parse_mixer(const std::string& name) {
  if (name == "conv") return mokt::MixerKind::GatedConv;
  if (name == "mamba") return mokt::MixerKind::MambaSsm;
  mokt::fail("unknown mixer '" + name + "' (expected conv|mamba)");
}

void emit(const std::string& body, const std::string& out_path) {
  std::fputs(body.c_str(), stdout);
  if (!out_path.empty()) mokt::detail::write_text_file(out_path, body);
}

// ============================================================================
// audit
// ============================================================================

int cmd_audit(const std::string& model, const std::string& mixer, int image_size,
              bool detail, const std::string& format, const std::string& out_path) {
  std::vector<std::string> names;
  if (model == "all")
    names = {"femto", "tiny", "small", "base"};
  else
    names = {model};

  bool all_ok = true;
  std::string body;
  json j;
  j["image_size"] = image_size;
  j["mixer"] = mixer;
  j["models"] = json::array();

  char line[256];
  if (format == "table") {
    std::snprintf(line, sizeof(line), "%-8s %12s %12s %14s %14s  %s\n", "model",
                  "params (M)", "MACs (G)", "expected (M)", "expected (G)", "verdict");
    body += line;
  }
  for (const auto& name : names) {
    auto cfg = mokt::config_by_name(name);
    cfg.mixer = parse_mixer(mixer);
    auto rep = mokt::audit_mambaout(cfg, image_size);
    double pm = static_cast<double>(rep.params) / 1e6;
    double mg = static_cast<double>(rep.macs) / 1e9;

    json jm;
    jm["name"] = name;
    jm["params"] = rep.params;
    jm["macs"] = rep.macs;
    jm["flops"] = 2 * rep.macs;

    auto it = expected_budgets().find(name);
    bool has_ref = it != expected_budgets().end() && image_size == 224 &&
                   mixer == std::string("conv");
    std::string verdict = "-";
    if (has_ref) {
      bool ok = std::abs(pm - it->second.params_m) <= 0.03 * it->second.params_m &&
                std::abs(mg - it->second.macs_g) <= 0.05 * it->second.macs_g;
      verdict = ok ? "PASS" : "FAIL";
      all_ok = all_ok && ok;
      jm["expected_params_m"] = it->second.params_m;
      jm["expected_macs_g"] = it->second.macs_g;
      jm["within_tolerance"] = ok;
    }
    if (format == "table") {
      std::snprintf(line, sizeof(line), "%-8s %12.3f %12.3f %14s %14s  %s\n",
                    name.c_str(), pm, mg,
                    has_ref ? std::to_string(it->second.params_m).substr(0, 5).c_str()
                            : "-",
                    has_ref ? std::to_string(it->second.macs_g).substr(0, 5).c_str()
                            : "-",
                    verdict.c_str());
      body += line;
      if (detail) {
        for (const auto& row : rep.rows) {
          std::snprintf(line, sizeof(line), "  %-20s %14lld params %16lld MACs\n",
                        row.name.c_str(), static_cast<long long>(row.params),
                        static_cast<long long>(row.macs));
          body += line;
        }
      }
    }
    json jrows = json::array();
    for (const auto& row : rep.rows)
      jrows.push_back({{"name", row.name}, {"params", row.params}, {"macs", row.macs}});
    jm["rows"] = jrows;
    j["models"].push_back(jm);
  }
  if (format == "json") body = j.dump(2) + "\n";
  emit(body, out_path);
  return all_ok ? 0 : 1;
}

// ============================================================================
// complexity
// ============================================================================

int cmd_complexity(std::int64_t dim, std::int64_t tokens, const std::string& format,
                   const std::string& out_path) {
  auto flops = mokt::transformer_block_flops(dim, tokens);
  auto ratio = mokt::quadratic_ratio(tokens, dim);
  auto threshold = mokt::long_sequence_threshold(dim);
  auto regime = mokt::classify_sequence_task(tokens, dim);

  std::string body;
  if (format == "json") {
    json j;
    j["dim"] = dim;
    j["tokens"] = tokens;
    j["block_flops"] = flops;
    j["quadratic_ratio"] = {{"num", ratio.num}, {"den", ratio.den},
                            {"value", ratio.value()}};
    j["long_sequence_threshold"] = threshold;
    j["regime"] = mokt::regime_name(regime);
    body = j.dump(2) + "\n";
  } else {
    char line[160];
    std::snprintf(line, sizeof(line), "dim                      %lld\n",
                  static_cast<long long>(dim));
    body += line;
    std::snprintf(line, sizeof(line), "tokens                   %lld\n",
                  static_cast<long long>(tokens));
    body += line;
    std::snprintf(line, sizeof(line), "block FLOPs              %lld\n",
                  static_cast<long long>(flops));
    body += line;
    std::snprintf(line, sizeof(line), "quadratic share r_L      %lld/%lld = %.6g\n",
                  static_cast<long long>(ratio.num), static_cast<long long>(ratio.den),
                  ratio.value());
    body += line;
    std::snprintf(line, sizeof(line), "long-sequence threshold  L > %lld\n",
                  static_cast<long long>(threshold));
    body += line;
    std::snprintf(line, sizeof(line), "regime                   %s\n",
                  mokt::regime_name(regime));
    body += line;
  }
  emit(body, out_path);
  return 0;
}

// ============================================================================
// verification commands
// ============================================================================

int cmd_scan_check(int trials, int max_len, std::uint64_t seed,
                   const std::string& format, const std::string& out_path) {
  auto rep = mokt::scan_equivalence_check(trials, max_len, seed);
  bool ok = rep.max_rel_err_f64 <= 1e-5 && rep.causality_exact;
  std::string body;
  if (format == "json") {
    json j;
    j["trials_per_dtype"] = rep.trials_per_dtype;
    j["max_rel_err_f32"] = rep.max_rel_err_f32;
    j["max_rel_err_f64"] = rep.max_rel_err_f64;
    j["causality_exact"] = rep.causality_exact;
    j["pass"] = ok;
    body = j.dump(2) + "\n";
  } else {
    char line[160];
    std::snprintf(line, sizeof(line),
                  "trials/dtype %d  max rel err f32 %.3g  f64 %.3g  causality %s  %s\n",
                  rep.trials_per_dtype, rep.max_rel_err_f32, rep.max_rel_err_f64,
                  rep.causality_exact ? "exact" : "BROKEN", ok ? "PASS" : "FAIL");
    body += line;
  }
  emit(body, out_path);
  return ok ? 0 : 1;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& format,
                  const std::string& out_path) {
  auto rep = mokt::run_gradcheck(seed);
  bool ok = rep.worst < 1e-4;
  std::string body;
  if (format == "json") {
    json j;
    j["rows"] = json::array();
    for (const auto& row : rep.rows)
      j["rows"].push_back({{"op", row.op},
                           {"coords", row.coords},
                           {"max_rel_err", row.max_rel_err}});
    j["worst"] = rep.worst;
    j["pass"] = ok;
    body = j.dump(2) + "\n";
  } else {
    char line[160];
    for (const auto& row : rep.rows) {
      std::snprintf(line, sizeof(line), "%-26s %5d coords   max rel err %.3g\n",
                    row.op.c_str(), row.coords, row.max_rel_err);
      body += line;
    }
    std::snprintf(line, sizeof(line), "worst %.3g  %s\n", rep.worst,
                  ok ? "PASS" : "FAIL");
    body += line;
  }
  emit(body, out_path);
  return ok ? 0 : 1;
}

int cmd_bench_scan(const std::string& tokens_csv, int channels, int state_dim,
                   int repeats, std::uint64_t seed, const std::string& format,
                   const std::string& out_path) {
  std::vector<int> tokens;
  std::size_t at = 0;
  while (at < tokens_csv.size()) {
    auto comma = tokens_csv.find(',', at);
    if (comma == std::string::npos) comma = tokens_csv.size();
    auto item = tokens_csv.substr(at, comma - at);
    std::size_t used = 0;
    int value = 0;
    try {
      value = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || value <= 0)
      mokt::fail("bench-scan: --tokens expects positive integers, got '" + item + "'");
    tokens.push_back(value);
    at = comma + 1;
  }
  auto rows = mokt::bench_scan(tokens, channels, state_dim, repeats, seed);
  std::string body;
  if (format == "json") {
    json j = json::array();
    for (const auto& r : rows)
      j.push_back({{"tokens", r.tokens},
                   {"seq_ms", r.seq_ms},
                   {"par_ms", r.par_ms},
                   {"seq_ns_per_token", r.seq_ns_per_token},
                   {"par_ns_per_token", r.par_ns_per_token},
                   {"max_rel_err", r.max_rel_err}});
    body = j.dump(2) + "\n";
  } else {
    char line[200];
    std::snprintf(line, sizeof(line), "%8s %12s %12s %14s %14s %12s\n", "tokens",
                  "seq (ms)", "par (ms)", "seq ns/tok", "par ns/tok", "rel err");
    body += line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof(line), "%8d %12.4f %12.4f %14.1f %14.1f %12.3g\n",
                    r.tokens, r.seq_ms, r.par_ms, r.seq_ns_per_token,
                    r.par_ns_per_token, r.max_rel_err);
      body += line;
    }
  }
  emit(body, out_path);
  return 0;
}

// ============================================================================
// training commands
// ============================================================================

int cmd_train(const std::string& preset, const std::string& mixer,
              const mokt::SyntheticTask& task, mokt::TrainConfig tc, bool lr_given,
              double lr, const std::string& out_dir, const std::string& format) {
  if (lr_given)
    tc.base_lr = lr;
  else if (preset == "micro")
    tc.base_lr = mokt::micro_train_config().base_lr;  // toy-scale override
  auto cfg = mokt::config_by_name(preset);
  cfg.mixer = parse_mixer(mixer);

  std::string echo = mokt::config_echo(cfg, task, tc);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    mokt::detail::write_text_file(out_dir + "/config.txt", echo);
  }
  std::fputs(echo.c_str(), stdout);

  mokt::TrainResult res;
  if (tc.dtype == "f64")
    res = mokt::train_mambaout<double>(cfg, task, tc, out_dir);
  else if (tc.dtype == "f32")
    res = mokt::train_mambaout<float>(cfg, task, tc, out_dir);
  else
    mokt::fail("unknown dtype '" + tc.dtype + "' (expected f32|f64)");

  if (format == "json") {
    json j;
    j["final_val_accuracy"] = res.final_val_accuracy;
    j["history"] = json::array();
    for (const auto& r : res.history)
      j["history"].push_back({{"epoch", r.epoch},
                              {"split", r.split},
                              {"loss", r.loss},
                              {"accuracy", r.accuracy},
                              {"lr", r.lr}});
    std::fputs((j.dump(2) + "\n").c_str(), stdout);
  } else {
    std::fputs(res.csv.c_str(), stdout);
    std::printf("final val accuracy %.4f\n", res.final_val_accuracy);
  }
  if (!out_dir.empty())
    std::printf("artifacts: %s/metrics.csv %s/model.mokt %s/config.txt\n",
                out_dir.c_str(), out_dir.c_str(), out_dir.c_str());
  return 0;
}

int cmd_compare(const mokt::TransformerConfig& tcfg, const mokt::SyntheticTask& task,
                const mokt::TrainConfig& tc, int seeds, const std::string& format,
                const std::string& out_path) {
  auto rep = mokt::compare_mixers<float>(tcfg, task, tc, seeds);
  bool ok = rep.control_gap == 0.0 && rep.causal_prefix_stable;
  std::string body;
  if (format == "json") {
    json j;
    j["seeds"] = rep.seeds;
    j["fv_accuracy"] = rep.fv_accuracy;
    j["causal_accuracy"] = rep.causal_accuracy;
    j["fv_mean"] = rep.fv_mean;
    j["fv_sd"] = rep.fv_sd;
    j["causal_mean"] = rep.causal_mean;
    j["causal_sd"] = rep.causal_sd;
    j["gap"] = rep.gap;
    j["control_gap"] = rep.control_gap;
    j["causal_prefix_stable"] = rep.causal_prefix_stable;
    body = j.dump(2) + "\n";
  } else {
    char line[200];
    for (int s = 0; s < rep.seeds; ++s) {
      std::snprintf(line, sizeof(line), "seed %d  fully-visible %.4f  causal %.4f\n", s,
                    rep.fv_accuracy[static_cast<std::size_t>(s)],
                    rep.causal_accuracy[static_cast<std::size_t>(s)]);
      body += line;
    }
    std::snprintf(line, sizeof(line),
                  "fully-visible %.4f +- %.4f   causal %.4f +- %.4f   gap %.4f\n",
                  rep.fv_mean, rep.fv_sd, rep.causal_mean, rep.causal_sd, rep.gap);
    body += line;
    std::snprintf(line, sizeof(line), "control gap %.6f   causal prefix %s\n",
                  rep.control_gap, rep.causal_prefix_stable ? "stable" : "UNSTABLE");
    body += line;
  }
  emit(body, out_path);
  return ok ? 0 : 1;
}

}  // namespace

// ============================================================================
// argument wiring
// ============================================================================

int main(int argc, char** argv) {
  CLI::App app{"gated CNN / selective SSM architecture kit"};
  app.require_subcommand(1);
  std::string format = "table";
  app.add_option("--format", format, "output format")
      ->check(CLI::IsMember({"table", "json"}))
      ->capture_default_str();

  // audit
  auto* audit = app.add_subcommand("audit", "parameter and MAC budgets per model");
  std::string audit_model = "all", audit_mixer = "conv", audit_out;
  int audit_img = 224;
  bool audit_detail = false;
  audit->add_option("--model", audit_model, "femto|tiny|small|base|micro|all")
      ->capture_default_str();
  audit->add_option("--mixer", audit_mixer, "token mixer: conv|mamba")
      ->check(CLI::IsMember({"conv", "mamba"}))
      ->capture_default_str();
  audit->add_option("--image-size", audit_img, "input resolution")
      ->capture_default_str();
  audit->add_flag("--detail", audit_detail, "include per-stage rows");
  audit->add_option("--out", audit_out, "also write the report to this file");

  // complexity
  auto* cx = app.add_subcommand("complexity", "transformer block cost model");
  std::int64_t cx_dim = 384, cx_tokens = 196;
  std::string cx_out;
  cx->add_option("--dim", cx_dim, "embedding dimension")->capture_default_str();
  cx->add_option("--tokens", cx_tokens, "sequence length")->capture_default_str();
  cx->add_option("--out", cx_out, "also write the report to this file");

  // scan-check
  auto* sc = app.add_subcommand("scan-check",
                                "parallel vs sequential scan equivalence");
  int sc_trials = 200, sc_max_len = 512;
  std::uint64_t sc_seed = 0;
  std::string sc_out;
  sc->add_option("--trials", sc_trials, "randomized trials per dtype")
      ->capture_default_str();
  sc->add_option("--max-len", sc_max_len, "largest sequence length")
      ->capture_default_str();
  sc->add_option("--seed", sc_seed, "rng seed")->capture_default_str();
  sc->add_option("--out", sc_out, "also write the report to this file");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference audit of every operation");
  std::uint64_t gc_seed = 0;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "rng seed")->capture_default_str();
  gc->add_option("--out", gc_out, "also write the report to this file");

  // bench-scan
  auto* bs = app.add_subcommand("bench-scan", "scan throughput benchmark");
  std::string bs_tokens = "64,256,1024,4096", bs_out;
  int bs_channels = 8, bs_state = 8, bs_repeats = 5;
  std::uint64_t bs_seed = 0;
  bs->add_option("--tokens", bs_tokens, "comma-separated sequence lengths")
      ->capture_default_str();
  bs->add_option("--channels", bs_channels, "channel count")->capture_default_str();
  bs->add_option("--state-dim", bs_state, "state dimension")->capture_default_str();
  bs->add_option("--repeats", bs_repeats, "timed repeats (median)")
      ->capture_default_str();
  bs->add_option("--seed", bs_seed, "rng seed")->capture_default_str();
  bs->add_option("--out", bs_out, "also write the report to this file");

  // train
  auto* tr = app.add_subcommand("train", "train on the arrangement task");
  std::string tr_preset = "micro", tr_mixer = "conv", tr_out = "train_out";
  std::string tr_dtype = "f32";
  mokt::SyntheticTask tr_task;
  mokt::TrainConfig tr_tc;
  double tr_lr = 0;
  tr->add_option("--preset", tr_preset, "femto|tiny|small|base|micro")
      ->capture_default_str();
  tr->add_option("--mixer", tr_mixer, "token mixer: conv|mamba")
      ->check(CLI::IsMember({"conv", "mamba"}))
      ->capture_default_str();
  tr->add_option("--epochs", tr_tc.epochs)->capture_default_str();
  tr->add_option("--batch-size", tr_tc.batch_size)->capture_default_str();
  auto* lr_opt = tr->add_option(
      "--lr", tr_lr,
      "base learning rate (default: 1e-3 for micro, else batch_size/1024 * 1e-3)");
  tr->add_option("--warmup-epochs", tr_tc.warmup_epochs)->capture_default_str();
  tr->add_option("--weight-decay", tr_tc.weight_decay)->capture_default_str();
  tr->add_option("--label-smoothing", tr_tc.label_smoothing)->capture_default_str();
  tr->add_option("--drop-path", tr_tc.drop_path_peak)->capture_default_str();
  tr->add_option("--seed", tr_tc.seed, "training seed")->capture_default_str();
  tr->add_option("--dtype", tr_dtype, "f32|f64")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  tr->add_option("--image-size", tr_task.image_size)->capture_default_str();
  tr->add_option("--train-samples", tr_task.train_samples)->capture_default_str();
  tr->add_option("--val-samples", tr_task.val_samples)->capture_default_str();
  tr->add_option("--task-seed", tr_task.seed, "synthetic data seed")
      ->capture_default_str();
  tr->add_option("--out", tr_out, "artifact directory")->capture_default_str();

  // compare-mixers
  auto* cm = app.add_subcommand(
      "compare-mixers", "fully-visible vs causal attention on the same task");
  auto cm_cfg = mokt::compare_transformer_config();
  auto cm_task = mokt::compare_task_config();
  auto cm_tc = mokt::compare_train_config();
  int cm_seeds = 3;
  std::string cm_out;
  cm->add_option("--seeds", cm_seeds, "independent weight seeds")
      ->capture_default_str();
  cm->add_option("--dim", cm_cfg.dim)->capture_default_str();
  cm->add_option("--depth", cm_cfg.depth)->capture_default_str();
  cm->add_option("--heads", cm_cfg.heads)->capture_default_str();
  cm->add_option("--patch", cm_cfg.patch)->capture_default_str();
  cm->add_option("--epochs", cm_tc.epochs)->capture_default_str();
  cm->add_option("--batch-size", cm_tc.batch_size)->capture_default_str();
  cm->add_option("--warmup-epochs", cm_tc.warmup_epochs)->capture_default_str();
  double cm_lr = *cm_tc.base_lr;
  cm->add_option("--lr", cm_lr)->capture_default_str();
  cm->add_option("--image-size", cm_task.image_size)->capture_default_str();
  cm->add_option("--train-samples", cm_task.train_samples)->capture_default_str();
  cm->add_option("--val-samples", cm_task.val_samples)->capture_default_str();
  cm->add_option("--seed", cm_tc.seed, "base seed")->capture_default_str();
  cm->add_option("--out", cm_out, "also write the report to this file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (audit->parsed())
      return cmd_audit(audit_model, audit_mixer, audit_img, audit_detail, format,
                       audit_out);
    if (cx->parsed()) return cmd_complexity(cx_dim, cx_tokens, format, cx_out);
    if (sc->parsed())
      return cmd_scan_check(sc_trials, sc_max_len, sc_seed, format, sc_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, format, gc_out);
    if (bs->parsed())
      return cmd_bench_scan(bs_tokens, bs_channels, bs_state, bs_repeats, bs_seed,
                            format, bs_out);
    if (tr->parsed()) {
      tr_tc.dtype = tr_dtype;
      return cmd_train(tr_preset, tr_mixer, tr_task, tr_tc,
                       lr_opt->count() > 0, tr_lr, tr_out, format);
    }
    if (cm->parsed()) {
      cm_tc.base_lr = cm_lr;
      return cmd_compare(cm_cfg, cm_task, cm_tc, cm_seeds, format, cm_out);
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
  return 0;
}
