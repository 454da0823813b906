#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vcr/embeddings.hpp"

namespace vcr {

// A planted-object world with no pixels. Each scene holds one object disc of a known class
// and distractor discs whose signature mixes two other classes equally, so a view dominated
// by a distractor has a near-zero prediction margin.

struct Disc {
  double cx = 0.0;
  double cy = 0.0;
  double r = 0.0;
};

struct Distractor {
  Disc disc;
  int class_u = 0;
  int class_v = 1;
};

struct SyntheticScene {
  std::string image_id;
  int width = 0;
  int height = 0;
  int object_class = 0;
  Disc object;
  std::vector<Distractor> distractors;
  std::uint64_t noise_seed = 0;
};

struct SceneConfig {
  int width = 224;
  int height = 224;
  // Radii as fractions of min(width, height).
  double object_radius_min = 0.20;
  double object_radius_max = 0.35;
  double distractor_radius_min = 0.12;
  double distractor_radius_max = 0.22;
  int distractors = 3;
};

// Exact area of disc ∩ [x0,x1]×[y0,y1], integrated piecewise over circular-segment pieces.
double disc_rect_overlap(const Disc& disc, double x0, double y0, double x1, double y1);
double disc_rect_overlap(const Disc& disc, const CropRect& rect);

// C orthonormal unit rows in `dim` dimensions (dim > C so a background direction remains).
FeatureMatrix make_prototypes(int classes, int dim, std::uint64_t seed);

// Fixed unit vector orthogonal to the span of the prototype rows.
FeatureVector background_vector(const FeatureMatrix& prototypes);

// Discs lie fully inside the image and do not overlap each other (a crowded scene keeps fewer
// distractors); distractor classes are two distinct classes different from the object's.
SyntheticScene generate_scene(std::string image_id, const SceneConfig& config, int num_classes,
                              std::uint64_t seed);

void validate_scene(const SyntheticScene& scene, Index num_classes);

// normalize(a_obj·P[class] + Σ a_j·(P[u_j]+P[v_j])/√2 + a_bg·b + noise_amp·η).
// η ~ N(0, I/d) is keyed by (scene.noise_seed, crop, flipped).
FeatureVector synthetic_encode(const SyntheticScene& scene, const CropRect& crop, const TextClassifier& prototypes,
                               double noise_amp, bool flipped = false);
FeatureVector synthetic_encode(const SyntheticScene& scene, const CropRect& crop, const TextClassifier& prototypes,
                               const FeatureVector& background, double noise_amp, bool flipped = false);

class SyntheticBackend final : public EncoderBackend {
 public:
  SyntheticBackend(TextClassifier prototypes, std::vector<SyntheticScene> scenes, double noise_amp);

  Index dim() const override { return prototypes_.dim(); }
  ImageInfo image_info(const std::string& image_id) const override;
  FeatureVector encode(const std::string& image_id, const ViewKey& view) const override;

  const SyntheticScene& scene(const std::string& image_id) const;
  const std::vector<SyntheticScene>& scenes() const noexcept { return scenes_; }
  const TextClassifier& prototypes() const noexcept { return prototypes_; }
  double noise_amp() const noexcept { return noise_amp_; }

 private:
  TextClassifier prototypes_;
  FeatureVector background_;
  std::vector<SyntheticScene> scenes_;
  std::map<std::string, std::size_t> index_;
  double noise_amp_;
};

}  // namespace vcr
