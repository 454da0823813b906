#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vcr {

// Decomposing scale set: n area fractions {1/n, 2/n, ..., 1}. The first n-1 entries are
// local scales, the last one is the global scale.
struct ScaleSet {
  int n = 0;
  double alpha_min = 0.0;
  double alpha_max = 1.0;
  double gamma = 0.0;
  std::vector<double> scales;

  int local_count() const noexcept { return n - 1; }
  bool is_global(std::size_t i) const noexcept { return i + 1 == scales.size(); }
};

ScaleSet build_scale_set(int n);

struct CropRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  friend bool operator==(const CropRect&, const CropRect&) = default;
  friend auto operator<=>(const CropRect&, const CropRect&) = default;

  bool valid_for(int width, int height) const noexcept {
    return x >= 0 && y >= 0 && w >= 1 && h >= 1 && x + w <= width && y + h <= height;
  }
  bool covers(int width, int height) const noexcept {
    return x == 0 && y == 0 && w == width && h == height;
  }
};

struct ScaleViews {
  double scale = 0.0;
  std::vector<CropRect> crops;
};

struct ViewSet {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<ScaleViews> per_scale;
};

// Round-half-up of a non-negative value, clamped to [1, limit].
int crop_extent(int full, double scale);

// m crops of area fraction `scale` (aspect ratio preserved) at uniform random offsets.
// Draw order per crop: x offset then y offset, each with CounterRng::bounded.
std::vector<CropRect> sample_crops(int width, int height, double scale, int m, std::uint64_t seed);

// Stream key for the crops of scale position `scale_index` of one image.
std::uint64_t scale_stream_seed(std::uint64_t image_key, std::size_t scale_index);

// D(x): m crops per local scale from per-scale streams, plus the full-image view at scale 1.
ViewSet decompose(const std::string& image_id, int width, int height, const ScaleSet& scales, int m,
                  std::uint64_t global_seed);

}  // namespace vcr
