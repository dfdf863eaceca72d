#include "mokt/synthetic.hpp"

#include <array>

#include "mokt/rng.hpp"

namespace mokt {

namespace {

// Quadrants of the 2x2 grid, indexed row-major: 0=TL, 1=TR, 2=BL, 3=BR.
struct Arrangement {
  int red, green, blue;
};

int label_of(const Arrangement& a) {
  int row_r = a.red / 2, col_r = a.red % 2, row_g = a.green / 2;
  return 2 * (2 * row_r + row_g) + col_r;
}

// All 24 ordered placements of three rectangles in distinct quadrants,
// bucketed by label. Class sizes are 2/2/4/4/4/4/2/2; sampling class-first
// keeps the splits exactly balanced regardless.
const std::array<std::vector<Arrangement>, 8>& arrangements_by_label() {
  static const auto table = [] {
    std::array<std::vector<Arrangement>, 8> t;
    for (int r = 0; r < 4; ++r)
      for (int g = 0; g < 4; ++g)
        for (int b = 0; b < 4; ++b) {
          if (r == g || r == b || g == b) continue;
          Arrangement a{r, g, b};
          t[static_cast<std::size_t>(label_of(a))].push_back(a);
        }
    return t;
  }();
  return table;
}

// One axis-aligned rectangle with jittered size and position inside its
// quadrant; the rectangle paints one color channel, the rest keep noise.
void draw_rect(std::vector<float>& pixels, int img, int quadrant, int channel,
               Rng& rng) {
  int q = img / 2;
  int top = (quadrant / 2) * q, left = (quadrant % 2) * q;
  int min_side = std::max(2, (2 * q) / 5), max_side = (4 * q) / 5;
  int h = rng.uniform_int(min_side, max_side);
  int w = rng.uniform_int(min_side, max_side);
  int y0 = top + rng.uniform_int(0, q - h);
  int x0 = left + rng.uniform_int(0, q - w);
  float intensity = static_cast<float>(rng.uniform(0.7, 1.0));
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x)
      pixels[static_cast<std::size_t>((y * img + x) * 3 + channel)] = intensity;
}

}  // namespace

int synthetic_sample(const SyntheticTask& task, std::int64_t index,
                     std::vector<float>& pixels) {
  check(task.num_classes == 8,
        "synthetic: the arrangement labeling defines exactly 8 classes, got " +
            std::to_string(task.num_classes));
  check(task.image_size >= 16 && task.image_size % 2 == 0,
        "synthetic: image_size must be even and >= 16");
  check(index >= 0, "synthetic: negative sample index");

  int img = task.image_size;
  pixels.assign(static_cast<std::size_t>(img) * img * 3, 0.0f);
  Rng rng(mix_seed(task.seed, static_cast<std::uint64_t>(index)));

  // Low background noise so rectangles dominate but pixels are never exactly
  // reproducible from the label alone.
  for (auto& p : pixels) p = static_cast<float>(rng.uniform(0.0, 0.08));

  int label = static_cast<int>(index % 8);  // round-robin: balanced splits
  const auto& options = arrangements_by_label()[static_cast<std::size_t>(label)];
  const auto& a = options[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(options.size()) - 1))];
  draw_rect(pixels, img, a.red, 0, rng);
  draw_rect(pixels, img, a.green, 1, rng);
  draw_rect(pixels, img, a.blue, 2, rng);
  return label;
}

}  // namespace mokt
