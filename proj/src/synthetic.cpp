#include "vcr/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "vcr/rng.hpp"

namespace vcr {

namespace {

// ∫ sqrt(r² - t²) dt
double segment_primitive(double t, double r) {
  t = std::clamp(t, -r, r);
  return 0.5 * (t * std::sqrt(std::max(0.0, r * r - t * t)) + r * r * std::asin(t / r));
}

constexpr std::uint64_t kBackgroundSeed = 0x6B61636B67726F75ULL;

}  // namespace

double disc_rect_overlap(const Disc& disc, double x0, double y0, double x1, double y1) {
  const double r = disc.r;
  if (r <= 0.0 || x1 <= x0 || y1 <= y0) return 0.0;
  const double lo = std::max(x0 - disc.cx, -r);
  const double hi = std::min(x1 - disc.cx, r);
  if (hi <= lo) return 0.0;
  const double bottom = y0 - disc.cy;
  const double top = y1 - disc.cy;

  // The vertical chord h(X) = sqrt(r² - X²) crosses a horizontal edge at X = ±sqrt(r² - y²);
  // between consecutive crossings each bound is either the edge or the circle.
  std::vector<double> cuts{lo, hi};
  for (double y : {bottom, top}) {
    if (std::abs(y) < r) {
      const double x = std::sqrt(r * r - y * y);
      for (double c : {-x, x})
        if (c > lo && c < hi) cuts.push_back(c);
    }
  }
  std::sort(cuts.begin(), cuts.end());

  double area = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double p = cuts[i];
    const double q = cuts[i + 1];
    if (q <= p) continue;
    const double mid = 0.5 * (p + q);
    const double h = std::sqrt(std::max(0.0, r * r - mid * mid));
    const bool upper_is_edge = top < h;
    const bool lower_is_edge = bottom > -h;
    const double upper_mid = upper_is_edge ? top : h;
    const double lower_mid = lower_is_edge ? bottom : -h;
    if (upper_mid <= lower_mid) continue;
    const double chord = segment_primitive(q, r) - segment_primitive(p, r);
    const double upper = upper_is_edge ? top * (q - p) : chord;
    const double lower = lower_is_edge ? bottom * (q - p) : -chord;
    area += upper - lower;
  }
  return std::max(0.0, area);
}

double disc_rect_overlap(const Disc& disc, const CropRect& rect) {
  return disc_rect_overlap(disc, rect.x, rect.y, rect.x + rect.w, rect.y + rect.h);
}

FeatureMatrix make_prototypes(int classes, int dim, std::uint64_t seed) {
  if (classes < 2) throw InvalidArgument("make_prototypes: need at least 2 classes");
  if (dim <= classes) throw InvalidArgument("make_prototypes: dim must exceed the class count");
  CounterRng rng(seed);
  RowMatrix<double> basis(classes, dim);
  for (int c = 0; c < classes; ++c) {
    Vector<double> v(dim);
    for (int i = 0; i < dim; ++i) v[i] = rng.normal();
    for (int k = 0; k < c; ++k) v -= basis.row(k).dot(v) * basis.row(k).transpose();
    basis.row(c) = v.normalized().transpose();
  }
  return basis.cast<float>();
}

FeatureVector background_vector(const FeatureMatrix& prototypes) {
  const Index dim = prototypes.cols();
  // Orthonormal basis of the prototype span, then a seeded direction orthogonal to it.
  std::vector<Vector<double>> span;
  for (Index c = 0; c < prototypes.rows(); ++c) {
    Vector<double> v = prototypes.row(c).transpose().cast<double>();
    for (const auto& q : span) v -= q.dot(v) * q;
    if (v.norm() > 1e-9) span.push_back(v.normalized());
  }
  CounterRng rng(kBackgroundSeed);
  for (int attempt = 0; attempt < 8; ++attempt) {
    Vector<double> b(dim);
    for (Index i = 0; i < dim; ++i) b[i] = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : span) b -= q.dot(b) * q;
    if (b.norm() > 1e-6) return b.normalized().cast<float>();
  }
  throw InvalidArgument("background_vector: prototypes span the whole embedding space");
}

SyntheticScene generate_scene(std::string image_id, const SceneConfig& config, int num_classes, std::uint64_t seed) {
  if (num_classes < 3 && config.distractors > 0)
    throw InvalidArgument("generate_scene: distractors need at least 3 classes");
  CounterRng rng(seed);
  SyntheticScene scene;
  scene.image_id = std::move(image_id);
  scene.width = config.width;
  scene.height = config.height;
  scene.noise_seed = CounterRng::split(seed, 0x6E6F697365ULL);
  scene.object_class = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(num_classes)));

  const double side = std::min(config.width, config.height);
  auto place = [&](double rmin, double rmax) {
    Disc d;
    d.r = side * (rmin + (rmax - rmin) * rng.uniform());
    const double u = rng.uniform();
    const double v = rng.uniform();
    // Discs wider than the image are centered on that axis.
    d.cx = 2.0 * d.r < config.width ? d.r + (config.width - 2.0 * d.r) * u : 0.5 * config.width;
    d.cy = 2.0 * d.r < config.height ? d.r + (config.height - 2.0 * d.r) * v : 0.5 * config.height;
    return d;
  };
  auto overlaps = [&](const Disc& d) {
    auto hit = [&](const Disc& o) { return std::hypot(d.cx - o.cx, d.cy - o.cy) < d.r + o.r; };
    if (hit(scene.object)) return true;
    return std::any_of(scene.distractors.begin(), scene.distractors.end(),
                       [&](const Distractor& o) { return hit(o.disc); });
  };

  scene.object = place(config.object_radius_min, config.object_radius_max);
  for (int j = 0; j < config.distractors; ++j) {
    Disc d = place(config.distractor_radius_min, config.distractor_radius_max);
    for (int attempt = 0; attempt < 200 && overlaps(d); ++attempt)
      d = place(config.distractor_radius_min, config.distractor_radius_max);
    if (overlaps(d)) continue;  // crowded scene: fewer distractors
    auto pick_other = [&](int a, int b) {
      int c;
      do c = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(num_classes)));
      while (c == a || c == b);
      return c;
    };
    const int u = pick_other(scene.object_class, -1);
    const int v = pick_other(scene.object_class, u);
    scene.distractors.push_back({d, u, v});
  }
  return scene;
}

void validate_scene(const SyntheticScene& scene, Index num_classes) {
  if (scene.width < 2 || scene.height < 2) throw InvalidArgument("scene '" + scene.image_id + "': bad dimensions");
  if (scene.object_class < 0 || scene.object_class >= num_classes)
    throw InvalidArgument("scene '" + scene.image_id + "': object class out of range");
  auto intersects = [&](const Disc& d) { return disc_rect_overlap(d, 0, 0, scene.width, scene.height) > 0.0; };
  if (!intersects(scene.object)) throw InvalidArgument("scene '" + scene.image_id + "': object outside image");
  for (const auto& d : scene.distractors) {
    if (!intersects(d.disc)) throw InvalidArgument("scene '" + scene.image_id + "': distractor outside image");
    if (d.class_u == d.class_v || d.class_u < 0 || d.class_v < 0 || d.class_u >= num_classes ||
        d.class_v >= num_classes)
      throw InvalidArgument("scene '" + scene.image_id + "': bad distractor classes");
  }
}

FeatureVector synthetic_encode(const SyntheticScene& scene, const CropRect& crop, const TextClassifier& prototypes,
                               double noise_amp, bool flipped) {
  return synthetic_encode(scene, crop, prototypes, background_vector(prototypes.weights()), noise_amp, flipped);
}

FeatureVector synthetic_encode(const SyntheticScene& scene, const CropRect& crop, const TextClassifier& prototypes,
                               const FeatureVector& background, double noise_amp, bool flipped) {
  if (!(noise_amp >= 0.0)) throw InvalidArgument("synthetic_encode: noise_amp must be >= 0");
  if (!crop.valid_for(scene.width, scene.height))
    throw InvalidArgument("synthetic_encode: crop outside scene '" + scene.image_id + "'");
  const auto& P = prototypes.weights();
  const Index dim = P.cols();
  const double area = static_cast<double>(crop.w) * crop.h;

  Vector<double> v = Vector<double>::Zero(dim);
  const double a_obj = disc_rect_overlap(scene.object, crop) / area;
  double covered = a_obj;
  v += a_obj * P.row(scene.object_class).transpose().cast<double>();
  for (const auto& d : scene.distractors) {
    const double a = disc_rect_overlap(d.disc, crop) / area;
    if (a == 0.0) continue;
    covered += a;
    v += a * (P.row(d.class_u) + P.row(d.class_v)).transpose().cast<double>() / std::sqrt(2.0);
  }
  const double a_bg = std::max(0.0, 1.0 - covered);
  v += a_bg * background.cast<double>();

  if (noise_amp > 0.0) {
    std::uint64_t key = scene.noise_seed;
    for (int field : {crop.x, crop.y, crop.w, crop.h, flipped ? 1 : 0})
      key = CounterRng::split(key, static_cast<std::uint64_t>(field));
    CounterRng rng(key);
    // η ~ N(0, I/d): noise_amp is the expected norm of the perturbation.
    const double amp = noise_amp / std::sqrt(static_cast<double>(dim));
    for (Index i = 0; i < dim; ++i) v[i] += amp * rng.normal();
  }
  return normalized(v).cast<float>();
}

SyntheticBackend::SyntheticBackend(TextClassifier prototypes, std::vector<SyntheticScene> scenes, double noise_amp)
    : prototypes_(std::move(prototypes)),
      background_(background_vector(prototypes_.weights())),
      scenes_(std::move(scenes)),
      noise_amp_(noise_amp) {
  if (!(noise_amp >= 0.0)) throw InvalidArgument("SyntheticBackend: noise_amp must be >= 0");
  for (std::size_t i = 0; i < scenes_.size(); ++i) {
    validate_scene(scenes_[i], prototypes_.num_classes());
    if (!index_.emplace(scenes_[i].image_id, i).second)
      throw InvalidArgument("SyntheticBackend: duplicate image id '" + scenes_[i].image_id + "'");
  }
}

const SyntheticScene& SyntheticBackend::scene(const std::string& image_id) const {
  const auto it = index_.find(image_id);
  if (it == index_.end()) throw NotFound("unknown image '" + image_id + "'");
  return scenes_[it->second];
}

ImageInfo SyntheticBackend::image_info(const std::string& image_id) const {
  const auto& s = scene(image_id);
  return {s.image_id, s.width, s.height};
}

FeatureVector SyntheticBackend::encode(const std::string& image_id, const ViewKey& view) const {
  const auto& s = scene(image_id);
  switch (view.kind) {
    case ViewKey::Kind::Global:
      return synthetic_encode(s, {0, 0, s.width, s.height}, prototypes_, background_, noise_amp_, view.flipped);
    case ViewKey::Kind::Crop:
      return synthetic_encode(s, view.rect, prototypes_, background_, noise_amp_, view.flipped);
    case ViewKey::Kind::Refined:
      break;
  }
  throw MissingEmbedding("synthetic backend has no refined view for '" + image_id + "'");
}

}  // namespace vcr
