#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mokt/models.hpp"

namespace mokt {

// ============================================================================
// static parameter / MAC audit
// ============================================================================

// Counting conventions, shared with the instrumented counters in the ops:
//   dense        in * out * positions
//   conv         k^2 * Cin * Cout * Ho * Wo
//   depthwise    k^2 * C * Ho * Wo
//   attention    QKVO projections plus both L^2 matmuls
// Norms, activations, biases, gating products, and the SSM recurrence itself
// are excluded; only projection-style multiply-accumulates are billed.
// FLOPs are reported as exactly 2 * MACs.

struct AuditRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct AuditReport {
  std::string model;
  int image_size = 0;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::vector<AuditRow> rows;
};

// Pure-arithmetic audit of a hierarchical gated CNN config; MACs are per
// image at the given resolution.
AuditReport audit_mambaout(const ModelConfig& cfg, int image_size);

// ============================================================================
// transformer complexity model
// ============================================================================

struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

// FLOPs of one pre-norm transformer block with MLP ratio 4 on [L, D] tokens:
// 24*D^2*L from the projections, 4*D*L^2 from the attention matrix.
std::int64_t transformer_block_flops(std::int64_t dim, std::int64_t tokens);

// Quadratic-over-linear cost share, reduced: 4DL^2 / 24D^2L = L / (6D).
Ratio quadratic_ratio(std::int64_t tokens, std::int64_t dim);

// Token count above which the quadratic term dominates.
std::int64_t long_sequence_threshold(std::int64_t dim);

enum class SequenceRegime { Short, Long };

const char* regime_name(SequenceRegime r);

// Long-sequence iff L strictly exceeds 6D.
SequenceRegime classify_sequence_task(std::int64_t tokens, std::int64_t dim);

}  // namespace mokt
