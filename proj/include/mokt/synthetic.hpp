#pragma once

#include <cstdint>
#include <vector>

#include "mokt/tensor.hpp"

namespace mokt {

// ============================================================================
// arrangement task
// ============================================================================

// Classification of the global spatial arrangement of three colored
// rectangles (red, green, blue), each confined to a distinct quadrant of a
// 2x2 grid. The label encodes (red row, green row, red column), so solving
// the task requires relating rectangles in distant image regions:
//   label = 2 * (2*row(red) + row(green)) + col(red),  8 classes.
// A horizontal flip swaps quadrant columns and leaves rows alone, so it maps
// a sample of class c to a valid sample of class c ^ 1. The blue rectangle
// and the free green column act as within-class distractors.
struct SyntheticTask {
  int image_size = 32;
  int num_classes = 8;  // fixed by the labeling scheme; validated
  int train_samples = 2048;
  int val_samples = 512;
  std::uint64_t seed = 0;
};

// Renders sample `index` into `pixels` ([H,W,3] row-major, values in [0,1])
// and returns its label. Deterministic in (task.seed, index) forever; train
// and val splits are disjoint index ranges of one global sequence.
int synthetic_sample(const SyntheticTask& task, std::int64_t index,
                     std::vector<float>& pixels);

enum class Split { Train, Val };

// ============================================================================
// materialized splits
// ============================================================================

template <typename S>
struct Dataset {
  Tensor<S> images;  // [N,H,W,3]
  std::vector<int> labels;

  int count() const { return static_cast<int>(labels.size()); }
};

template <typename S>
Dataset<S> make_split(const SyntheticTask& task, Split split) {
  int n = split == Split::Train ? task.train_samples : task.val_samples;
  std::int64_t base = split == Split::Train ? 0 : task.train_samples;
  check(n > 0, "synthetic: split size must be positive");
  int hw = task.image_size;
  Dataset<S> ds;
  ds.images = Tensor<S>::zeros({n, hw, hw, 3});
  ds.labels.resize(static_cast<std::size_t>(n));
  auto& out = ds.images.mutable_values();
  std::vector<float> pixels;
  std::int64_t stride = static_cast<std::int64_t>(hw) * hw * 3;
  for (int i = 0; i < n; ++i) {
    ds.labels[static_cast<std::size_t>(i)] = synthetic_sample(task, base + i, pixels);
    for (std::int64_t j = 0; j < stride; ++j)
      out[static_cast<std::size_t>(i * stride + j)] =
          static_cast<S>(pixels[static_cast<std::size_t>(j)]);
  }
  return ds;
}

// Mirrors [B,H,W,C] images along W. Plain value transform for augmentation;
// never part of a gradient graph.
template <typename S>
Tensor<S> hflip_images(const Tensor<S>& images) {
  check(images.rank() == 4, "hflip: expected [B,H,W,C]");
  int B = images.shape()[0], H = images.shape()[1], W = images.shape()[2],
      C = images.shape()[3];
  Tensor<S> out = Tensor<S>::zeros(images.shape());
  auto& dst = out.mutable_values();
  const auto& src = images.values();
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < C; ++c)
          dst[static_cast<std::size_t>(((b * H + y) * W + (W - 1 - x)) * C + c)] =
              src[static_cast<std::size_t>(((b * H + y) * W + x) * C + c)];
  return out;
}

// Label taken by a sample after a horizontal flip.
inline int hflip_label(int label) { return label ^ 1; }

}  // namespace mokt
