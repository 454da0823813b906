#pragma once

#include "vcr/eval.hpp"

namespace fixtures {

// A small planted-scene world plus the dataset manifest describing its images.
struct World {
  vcr::SyntheticWorld world;
  vcr::DatasetManifest dataset;
};

inline World small_world(int images, std::uint64_t seed, double noise = 0.1, int classes = 4) {
  vcr::SyntheticConfig c;
  c.classes = classes;
  c.images = images;
  c.dim = 16;
  c.scene.width = 96;
  c.scene.height = 80;
  World w{vcr::make_synthetic_world(c, seed, noise), {}};
  w.dataset.classes = w.world.classifier.class_names();
  for (const auto& s : w.world.scenes) w.dataset.items.push_back({s.image_id, s.object_class, s.width, s.height});
  return w;
}

inline std::vector<vcr::LabeledImage> all_items(const World& w) {
  std::vector<vcr::LabeledImage> out;
  for (const auto& it : w.dataset.items) out.push_back({it.id, it.label});
  return out;
}

}  // namespace fixtures
