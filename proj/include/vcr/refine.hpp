#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vcr/embeddings.hpp"
#include "vcr/geometry.hpp"

namespace vcr {

enum class Criterion { MaxMargin, MinMargin, MinEntropy, Random };
enum class Weighting { ScaleWeighted, Uniform, GlobalOnly };

std::string to_string(Criterion c);
std::string to_string(Weighting w);
// Accepts both "max_margin" and "max-margin" spellings; "scale"/"uniform"/"global" short forms.
Criterion parse_criterion(std::string_view s);
Weighting parse_weighting(std::string_view s);

// cos<feature, class row> / tau for every class.
Logits zero_shot_logits(const FeatureVector& feature, const TextClassifier& clf);
// One row of logits per feature row.
Eigen::MatrixXd zero_shot_logits(const FeatureMatrix& features, const TextClassifier& clf);

// top1 - top2 of the raw logits.
template <typename Derived>
double prediction_margin(const Eigen::MatrixBase<Derived>& logits) {
  if (logits.size() < 2) throw InvalidArgument("prediction_margin: need at least 2 classes");
  double top1 = -std::numeric_limits<double>::infinity();
  double top2 = top1;
  for (Index i = 0; i < logits.size(); ++i) {
    const double v = static_cast<double>(logits(i));
    if (v > top1) {
      top2 = top1;
      top1 = v;
    } else if (v > top2) {
      top2 = v;
    }
  }
  return top1 - top2;
}

// Shannon entropy (nats) of softmax(logits).
template <typename Derived>
double softmax_entropy(const Eigen::MatrixBase<Derived>& logits) {
  const Vector<double> z = logits.template cast<double>();
  const double zmax = z.maxCoeff();
  const Vector<double> e = (z.array() - zmax).exp().matrix();
  const double sum = e.sum();
  double h = 0.0;
  for (Index i = 0; i < z.size(); ++i) {
    const double p = e[i] / sum;
    if (p > 0.0) h -= p * ((z[i] - zmax) - std::log(sum));
  }
  return h;
}

template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

struct ViewChoice {
  Index index = 0;
  double score = 0.0;  // margin, or entropy for MinEntropy
};

// Deterministic criteria break ties by the lowest index; Random draws uniformly from tie_seed.
ViewChoice select_view(std::span<const Logits> view_logits, Criterion criterion, std::uint64_t tie_seed);

struct ScaleSelection {
  double scale = 0.0;
  Index k = 0;
  double margin = 0.0;
  CropRect crop;
};

struct SelectionResult {
  Criterion criterion = Criterion::MaxMargin;
  std::vector<ScaleSelection> per_scale;  // local scales only
};

struct RefinedFeature {
  FeatureVector vector;
  SelectionResult selection;
  Weighting weighting = Weighting::ScaleWeighted;
};

struct ScaledFeature {
  double scale = 1.0;
  FeatureVector feature;
};

// ScaleWeighted: Σ s_i f_i / Σ s_i; Uniform: mean; both then L2-normalized. GlobalOnly returns
// the scale-1 feature untouched, as does any single-entry input.
RefinedFeature merge_features(std::span<const ScaledFeature> selected, Weighting weighting);

// Encoded view pool D(x) of one image: features and logits of every local crop plus the
// global view.
struct EncodedScale {
  double scale = 0.0;
  std::vector<CropRect> crops;
  std::vector<FeatureVector> features;
  std::vector<Logits> logits;
};

struct EncodedViews {
  std::string image_id;
  std::uint64_t image_key = 0;
  std::vector<EncodedScale> local;
  FeatureVector global;
};

// Stream offsets under the per-image key. Scale streams use indices [0, n).
inline constexpr std::uint64_t kSelectionStream = 1ULL << 32;
inline constexpr std::uint64_t kMultiCropStream = 1ULL << 33;
inline constexpr std::uint64_t kPerScaleStream = 1ULL << 34;

std::uint64_t selection_key(std::uint64_t image_key, std::uint64_t repeat = 0);

EncodedViews encode_views(const EncoderBackend& backend, const TextClassifier& clf, const std::string& image_id,
                          const ScaleSet& scales, int m, std::uint64_t seed);

// Selection per local scale (tie seed = split(selection_key, scale index)) then merge.
RefinedFeature refine_views(const EncodedViews& views, Criterion criterion, Weighting weighting,
                            std::uint64_t selection_key);

// sample_crops -> encode_view -> zero_shot_logits -> select_view per local scale, plus the
// global view, -> merge_features.
RefinedFeature refine_image(const EncoderBackend& backend, const TextClassifier& clf, const std::string& image_id,
                            const ScaleSet& scales, int m, Criterion criterion, Weighting weighting,
                            std::uint64_t seed);

nlohmann::json selection_to_json(const RefinedFeature& refined);

}  // namespace vcr
