#include "mokt/audit.hpp"

#include <numeric>

namespace mokt {

namespace {

using std::int64_t;

int64_t conv_out(int64_t n, int64_t k, int64_t stride, int64_t pad) {
  return (n + 2 * pad - k) / stride + 1;
}

// k x k conv, stride s, pad p: returns params/macs and advances the spatial
// extent in place.
AuditRow conv_row(const std::string& name, int64_t cin, int64_t cout, int64_t k,
                  int64_t stride, int64_t pad, int64_t& h, int64_t& w) {
  h = conv_out(h, k, stride, pad);
  w = conv_out(w, k, stride, pad);
  return {name, k * k * cin * cout + cout, k * k * cin * cout * h * w};
}

int64_t norm_params(int64_t dim) { return 2 * dim; }

}  // namespace

AuditReport audit_mambaout(const ModelConfig& cfg, int image_size) {
  check(image_size >= 32, "audit: image size must be >= 32");
  AuditReport rep;
  rep.model = cfg.name;
  rep.image_size = image_size;
  int64_t h = image_size, w = image_size;

  AuditRow stem{"stem", 0, 0};
  int64_t half = cfg.dims[0] / 2;
  auto c1 = conv_row("", cfg.in_channels, half, 3, 2, 1, h, w);
  auto c2 = conv_row("", half, cfg.dims[0], 3, 2, 1, h, w);
  stem.params = c1.params + norm_params(half) + c2.params + norm_params(cfg.dims[0]);
  stem.macs = c1.macs + c2.macs;
  rep.rows.push_back(stem);

  for (int s = 0; s < 4; ++s) {
    if (s > 0) {
      int64_t cin = cfg.dims[static_cast<std::size_t>(s - 1)];
      int64_t cout = cfg.dims[static_cast<std::size_t>(s)];
      auto d = conv_row("down" + std::to_string(s - 1), cin, cout, 3, 2, 1, h, w);
      d.params += norm_params(cin);
      rep.rows.push_back(d);
    }
    int64_t dim = cfg.dims[static_cast<std::size_t>(s)];
    int64_t hid = cfg.hidden(s);
    int64_t cc = cfg.conv_channels(s);
    int64_t k = cfg.kernel_size;
    int64_t tokens = h * w;
    int64_t params = norm_params(dim)                  // pre-norm
                     + dim * 2 * hid + 2 * hid         // fc1
                     + k * k * cc + cc                 // depthwise kernel
                     + hid * dim + dim;                // fc2
    int64_t macs = tokens * dim * 2 * hid              // fc1
                   + k * k * cc * tokens               // depthwise, same-pad
                   + tokens * hid * dim;               // fc2
    if (cfg.mixer == MixerKind::MambaSsm) {
      int64_t n = cfg.ssm_state_dim;
      params += hid * n + hid * hid + hid + 2 * (hid * n + n);  // a_log, delta, B, C
      macs += tokens * (hid * hid + 2 * hid * n);               // delta, B, C projections
    }
    AuditRow row{"stage" + std::to_string(s),
                 params * cfg.depths[static_cast<std::size_t>(s)],
                 macs * cfg.depths[static_cast<std::size_t>(s)]};
    rep.rows.push_back(row);
  }

  int64_t last = cfg.dims[3];
  AuditRow head{"head", 0, 0};
  head.params = norm_params(last)                              // post-pool norm
                + last * 4 * last + 4 * last                   // fc1
                + 4 * last * cfg.num_classes + cfg.num_classes;  // fc2
  head.macs = last * 4 * last + 4 * last * cfg.num_classes;  // one pooled vector
  rep.rows.push_back(head);

  for (const auto& r : rep.rows) {
    rep.params += r.params;
    rep.macs += r.macs;
  }
  return rep;
}

std::int64_t transformer_block_flops(std::int64_t dim, std::int64_t tokens) {
  check(dim > 0 && tokens > 0, "complexity: dim and tokens must be positive");
  return 24 * dim * dim * tokens + 4 * dim * tokens * tokens;
}

Ratio quadratic_ratio(std::int64_t tokens, std::int64_t dim) {
  check(dim > 0 && tokens > 0, "complexity: dim and tokens must be positive");
  std::int64_t num = tokens, den = 6 * dim;
  std::int64_t g = std::gcd(num, den);
  return Ratio{num / g, den / g};
}

std::int64_t long_sequence_threshold(std::int64_t dim) {
  check(dim > 0, "complexity: dim must be positive");
  return 6 * dim;
}

const char* regime_name(SequenceRegime r) {
  return r == SequenceRegime::Long ? "long-sequence" : "short-sequence";
}

SequenceRegime classify_sequence_task(std::int64_t tokens, std::int64_t dim) {
  return tokens > long_sequence_threshold(dim) ? SequenceRegime::Long
                                               : SequenceRegime::Short;
}

}  // namespace mokt
