#include "vcr/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "vcr/rng.hpp"
#include "vcr/types.hpp"

namespace vcr {

ScaleSet build_scale_set(int n) {
  if (n < 1) throw InvalidArgument("build_scale_set: n must be >= 1, got " + std::to_string(n));
  ScaleSet set;
  set.n = n;
  set.gamma = (set.alpha_max - set.alpha_min) / n;
  set.scales.resize(n);
  for (int i = 0; i + 1 < n; ++i) set.scales[i] = set.alpha_min + static_cast<double>(i + 1) / n;
  set.scales[n - 1] = set.alpha_max;
  return set;
}

int crop_extent(int full, double scale) {
  const double exact = static_cast<double>(full) * std::sqrt(scale);
  const auto rounded = static_cast<int>(std::floor(exact + 0.5));
  return std::clamp(rounded, 1, full);
}

std::vector<CropRect> sample_crops(int width, int height, double scale, int m, std::uint64_t seed) {
  if (width < 2 || height < 2)
    throw InvalidArgument("sample_crops: image must be at least 2x2, got " + std::to_string(width) +
                          "x" + std::to_string(height));
  if (!(scale > 0.0) || scale > 1.0)
    throw InvalidArgument("sample_crops: scale must lie in (0, 1], got " + std::to_string(scale));
  if (m < 1) throw InvalidArgument("sample_crops: m must be >= 1");

  if (scale == 1.0) return std::vector<CropRect>(m, CropRect{0, 0, width, height});

  const int w = crop_extent(width, scale);
  const int h = crop_extent(height, scale);
  CounterRng rng(seed);
  std::vector<CropRect> crops;
  crops.reserve(m);
  for (int j = 0; j < m; ++j) {
    const auto x = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(width - w) + 1));
    const auto y = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(height - h) + 1));
    crops.push_back({x, y, w, h});
  }
  return crops;
}

std::uint64_t scale_stream_seed(std::uint64_t image_key, std::size_t scale_index) {
  return CounterRng::split(image_key, scale_index);
}

ViewSet decompose(const std::string& image_id, int width, int height, const ScaleSet& scales, int m,
                  std::uint64_t global_seed) {
  ViewSet views{image_id, width, height, {}};
  const std::uint64_t key = image_seed(image_id, global_seed);
  for (std::size_t i = 0; i < scales.scales.size(); ++i) {
    const double s = scales.scales[i];
    if (scales.is_global(i)) {
      views.per_scale.push_back({s, {CropRect{0, 0, width, height}}});
    } else {
      views.per_scale.push_back({s, sample_crops(width, height, s, m, scale_stream_seed(key, i))});
    }
  }
  return views;
}

}  // namespace vcr
