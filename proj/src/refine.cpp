#include "vcr/refine.hpp"

#include <algorithm>
#include <set>

#include "vcr/rng.hpp"

namespace vcr {

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::MaxMargin:
      return "max_margin";
    case Criterion::MinMargin:
      return "min_margin";
    case Criterion::MinEntropy:
      return "min_entropy";
    case Criterion::Random:
      return "random";
  }
  return "?";
}

std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::ScaleWeighted:
      return "scale_weighted";
    case Weighting::Uniform:
      return "uniform";
    case Weighting::GlobalOnly:
      return "global_only";
  }
  return "?";
}

namespace {

std::string underscored(std::string_view s) {
  std::string out(s);
  std::replace(out.begin(), out.end(), '-', '_');
  return out;
}

}  // namespace

Criterion parse_criterion(std::string_view s) {
  const auto k = underscored(s);
  if (k == "max_margin") return Criterion::MaxMargin;
  if (k == "min_margin") return Criterion::MinMargin;
  if (k == "min_entropy") return Criterion::MinEntropy;
  if (k == "random") return Criterion::Random;
  throw InvalidArgument("unknown selection criterion '" + std::string(s) + "'");
}

Weighting parse_weighting(std::string_view s) {
  const auto k = underscored(s);
  if (k == "scale" || k == "scale_weighted") return Weighting::ScaleWeighted;
  if (k == "uniform") return Weighting::Uniform;
  if (k == "global" || k == "global_only") return Weighting::GlobalOnly;
  throw InvalidArgument("unknown weighting '" + std::string(s) + "'");
}

Logits zero_shot_logits(const FeatureVector& feature, const TextClassifier& clf) {
  if (feature.size() != clf.dim())
    throw InvalidArgument("zero_shot_logits: feature dimension " + std::to_string(feature.size()) +
                          " does not match classifier dimension " + std::to_string(clf.dim()));
  return (clf.weights().cast<double>() * feature.cast<double>()) / clf.tau();
}

Eigen::MatrixXd zero_shot_logits(const FeatureMatrix& features, const TextClassifier& clf) {
  if (features.cols() != clf.dim()) throw InvalidArgument("zero_shot_logits: dimension mismatch");
  return (features.cast<double>() * clf.weights().cast<double>().transpose()) / clf.tau();
}

ViewChoice select_view(std::span<const Logits> view_logits, Criterion criterion, std::uint64_t tie_seed) {
  if (view_logits.empty()) throw InvalidArgument("select_view: no views");
  const Index classes = view_logits.front().size();
  if (classes < 2) throw InvalidArgument("select_view: need at least 2 classes");
  for (const auto& l : view_logits)
    if (l.size() != classes) throw InvalidArgument("select_view: views disagree on class count");

  const auto n = static_cast<Index>(view_logits.size());
  if (criterion == Criterion::Random) {
    CounterRng rng(tie_seed);
    const auto k = static_cast<Index>(rng.bounded(static_cast<std::uint64_t>(n)));
    return {k, prediction_margin(view_logits[k])};
  }

  ViewChoice best{0, 0.0};
  for (Index j = 0; j < n; ++j) {
    const double score = criterion == Criterion::MinEntropy ? softmax_entropy(view_logits[j])
                                                            : prediction_margin(view_logits[j]);
    const bool better = j == 0 || (criterion == Criterion::MaxMargin ? score > best.score : score < best.score);
    if (better) best = {j, score};
  }
  return best;
}

RefinedFeature merge_features(std::span<const ScaledFeature> selected, Weighting weighting) {
  if (selected.empty()) throw InvalidArgument("merge_features: nothing to merge");
  const Index dim = selected.front().feature.size();
  std::set<double> seen;
  for (const auto& s : selected) {
    if (s.feature.size() != dim) throw InvalidArgument("merge_features: mixed feature dimensions");
    if (!(s.scale > 0.0) || s.scale > 1.0) throw InvalidArgument("merge_features: scale outside (0, 1]");
    if (!seen.insert(s.scale).second) throw InvalidArgument("merge_features: duplicate scale");
  }

  RefinedFeature out;
  out.weighting = weighting;
  if (weighting == Weighting::GlobalOnly) {
    const auto it = std::find_if(selected.begin(), selected.end(), [](const ScaledFeature& s) { return s.scale == 1.0; });
    if (it == selected.end()) throw InvalidArgument("merge_features: global_only needs a scale-1 feature");
    out.vector = it->feature;
    return out;
  }
  if (selected.size() == 1) {
    out.vector = selected.front().feature;
    return out;
  }

  Vector<double> acc = Vector<double>::Zero(dim);
  double total = 0.0;
  for (const auto& s : selected) {
    const double w = weighting == Weighting::ScaleWeighted ? s.scale : 1.0;
    acc += w * s.feature.cast<double>();
    total += w;
  }
  out.vector = normalized(acc / total).cast<float>();
  return out;
}

std::uint64_t selection_key(std::uint64_t image_key, std::uint64_t repeat) {
  return CounterRng::split(image_key, kSelectionStream + repeat);
}

EncodedViews encode_views(const EncoderBackend& backend, const TextClassifier& clf, const std::string& image_id,
                          const ScaleSet& scales, int m, std::uint64_t seed) {
  const ImageInfo info = backend.image_info(image_id);
  const ViewSet views = decompose(image_id, info.width, info.height, scales, m, seed);

  EncodedViews out;
  out.image_id = image_id;
  out.image_key = image_seed(image_id, seed);
  for (std::size_t i = 0; i + 1 < views.per_scale.size(); ++i) {
    EncodedScale enc;
    enc.scale = views.per_scale[i].scale;
    enc.crops = views.per_scale[i].crops;
    for (const auto& crop : enc.crops) {
      enc.features.push_back(encode_view(backend, image_id, ViewKey::crop(crop).canonical(info.width, info.height)));
      enc.logits.push_back(zero_shot_logits(enc.features.back(), clf));
    }
    out.local.push_back(std::move(enc));
  }
  out.global = encode_view(backend, image_id, ViewKey::global());
  return out;
}

RefinedFeature refine_views(const EncodedViews& views, Criterion criterion, Weighting weighting,
                            std::uint64_t sel_key) {
  if (weighting == Weighting::GlobalOnly) {
    RefinedFeature out;
    out.vector = views.global;
    out.selection.criterion = criterion;
    out.weighting = weighting;
    return out;
  }

  std::vector<ScaledFeature> chosen;
  SelectionResult selection{criterion, {}};
  for (std::size_t i = 0; i < views.local.size(); ++i) {
    const auto& scale = views.local[i];
    const ViewChoice choice = select_view(scale.logits, criterion, CounterRng::split(sel_key, i));
    chosen.push_back({scale.scale, scale.features[choice.index]});
    selection.per_scale.push_back(
        {scale.scale, choice.index, prediction_margin(scale.logits[choice.index]), scale.crops[choice.index]});
  }
  chosen.push_back({1.0, views.global});

  RefinedFeature out = merge_features(chosen, weighting);
  out.selection = std::move(selection);
  return out;
}

RefinedFeature refine_image(const EncoderBackend& backend, const TextClassifier& clf, const std::string& image_id,
                            const ScaleSet& scales, int m, Criterion criterion, Weighting weighting,
                            std::uint64_t seed) {
  if (weighting == Weighting::GlobalOnly) {
    RefinedFeature out;
    out.vector = encode_view(backend, image_id, ViewKey::global());
    out.selection.criterion = criterion;
    out.weighting = weighting;
    return out;
  }
  const EncodedViews views = encode_views(backend, clf, image_id, scales, m, seed);
  return refine_views(views, criterion, weighting, selection_key(views.image_key));
}

nlohmann::json selection_to_json(const RefinedFeature& refined) {
  nlohmann::json per_scale = nlohmann::json::array();
  for (const auto& s : refined.selection.per_scale) {
    per_scale.push_back({{"scale", s.scale},
                         {"k", s.k},
                         {"margin", s.margin},
                         {"crop", {s.crop.x, s.crop.y, s.crop.w, s.crop.h}}});
  }
  return {{"criterion", to_string(refined.selection.criterion)},
          {"weighting", to_string(refined.weighting)},
          {"per_scale", std::move(per_scale)}};
}

}  // namespace vcr
