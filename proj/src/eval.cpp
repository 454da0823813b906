#include "vcr/eval.hpp"

#include <bit>
#include <chrono>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "vcr/parallel.hpp"
#include "vcr/rng.hpp"

namespace vcr {

using nlohmann::json;

// ---- datasets -----------------------------------------------------------------------------

void DatasetManifest::validate() const {
  if (classes.size() < 2) throw InvalidArgument("dataset: need at least 2 classes");
  std::set<std::string> ids;
  for (const auto& it : items) {
    if (it.label < 0 || it.label >= static_cast<int>(classes.size()))
      throw InvalidArgument("dataset: item '" + it.id + "' has label " + std::to_string(it.label) + " outside [0, " +
                            std::to_string(classes.size()) + ")");
    if (it.width < 2 || it.height < 2) throw InvalidArgument("dataset: item '" + it.id + "' has bad dimensions");
    if (!ids.insert(it.id).second) throw InvalidArgument("dataset: duplicate image id '" + it.id + "'");
  }
}

DatasetManifest dataset_from_json(const json& j) {
  DatasetManifest d;
  try {
    const json& items = j.is_array() ? j : j.at("items");
    for (const auto& it : items)
      d.items.push_back({it.at("id").get<std::string>(), it.at("label").get<int>(), it.at("width").get<int>(),
                         it.at("height").get<int>()});
    if (j.is_object() && j.contains("classes")) {
      d.classes = j.at("classes").get<std::vector<std::string>>();
    } else {
      int max_label = -1;
      for (const auto& it : d.items) max_label = std::max(max_label, it.label);
      for (int c = 0; c <= max_label; ++c) d.classes.push_back(std::to_string(c));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("dataset manifest: ") + e.what());
  }
  d.validate();
  return d;
}

json dataset_to_json(const DatasetManifest& d) {
  json items = json::array();
  for (const auto& it : d.items)
    items.push_back({{"id", it.id}, {"label", it.label}, {"width", it.width}, {"height", it.height}});
  return {{"classes", d.classes}, {"items", std::move(items)}};
}

DatasetManifest load_dataset_manifest(const std::filesystem::path& path) {
  try {
    return dataset_from_json(read_json_file(path));
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

Episode build_fewshot_episode(const DatasetManifest& dataset, int shots, std::uint64_t seed, int val_shots) {
  dataset.validate();
  if (shots < 0 || val_shots < 0) throw InvalidArgument("episode: shots must be >= 0");
  const std::size_t classes = dataset.classes.size();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < dataset.items.size(); ++i) by_class[dataset.items[i].label].push_back(i);

  std::vector<int> role(dataset.items.size(), 2);  // 0 train, 1 val, 2 test
  for (std::size_t c = 0; c < classes; ++c) {
    auto& members = by_class[c];
    const auto need = static_cast<std::size_t>(shots + val_shots);
    if (members.size() < need)
      throw InvalidArgument("episode: class '" + dataset.classes[c] + "' has " + std::to_string(members.size()) +
                            " instances, needs " + std::to_string(need));
    CounterRng rng(CounterRng::split(seed, c));
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.bounded(i)]);
    for (std::size_t j = 0; j < need; ++j) role[members[j]] = j < static_cast<std::size_t>(shots) ? 0 : 1;
  }

  Episode ep;
  ep.shots = shots;
  ep.seed = seed;
  // Train and val follow the per-class draw order; test keeps manifest order.
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < static_cast<std::size_t>(shots + val_shots); ++j) {
      const auto& it = dataset.items[by_class[c][j]];
      (role[by_class[c][j]] == 0 ? ep.train : ep.val).push_back({it.id, it.label});
    }
  for (std::size_t i = 0; i < dataset.items.size(); ++i)
    if (role[i] == 2) ep.test.push_back({dataset.items[i].id, dataset.items[i].label});
  return ep;
}

Episode test_only_episode(const DatasetManifest& dataset) {
  dataset.validate();
  Episode ep;
  for (const auto& it : dataset.items) ep.test.push_back({it.id, it.label});
  return ep;
}

// ---- accuracy -----------------------------------------------------------------------------

Accuracy evaluate(std::span<const int> predictions, std::span<const int> labels, Index num_classes) {
  if (predictions.empty()) throw InvalidArgument("evaluate: no predictions");
  if (predictions.size() != labels.size()) throw InvalidArgument("evaluate: predictions and labels differ in length");
  std::vector<std::size_t> hits(num_classes, 0), support(num_classes, 0);
  Accuracy acc;
  acc.total = predictions.size();
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw InvalidArgument("evaluate: label out of range");
    ++support[y];
    if (predictions[i] == y) {
      ++hits[y];
      ++acc.correct;
    }
  }
  acc.top1 = static_cast<double>(acc.correct) / static_cast<double>(acc.total);
  for (Index c = 0; c < num_classes; ++c)
    acc.per_class.push_back(support[c] == 0 ? std::nan("") : static_cast<double>(hits[c]) / support[c]);
  return acc;
}

// ---- modes --------------------------------------------------------------------------------

void EvalConfig::validate() const {
  if (n < 1) throw InvalidArgument("config: n must be >= 1");
  if (m < 1) throw InvalidArgument("config: m must be >= 1");
  if (repeats < 1) throw InvalidArgument("config: repeats must be >= 1");
  if (workers < 1) throw InvalidArgument("config: workers must be >= 1");
  if (train_epochs < 0) throw InvalidArgument("config: epochs must be >= 0");
  if (train_epochs > 0 && !(lr > 0.0)) throw InvalidArgument("config: lr must be > 0");
  adapter.validate();
}

ModeSpec parse_mode(const std::string& name, const EvalConfig& config) {
  ModeSpec spec;
  spec.name = name;
  spec.criterion = config.criterion;
  spec.weighting = config.weighting;
  spec.n = config.n;
  const auto colon = name.find(':');
  const std::string head = name.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : name.substr(colon + 1);
  auto no_arg = [&] {
    if (colon != std::string::npos) throw InvalidArgument("mode '" + name + "' takes no argument");
  };

  if (head == "global_baseline") {
    no_arg();
    spec.kind = ModeKind::GlobalBaseline;
    spec.weighting = Weighting::GlobalOnly;
  } else if (head == "ten_crop") {
    no_arg();
    spec.kind = ModeKind::TenCrop;
    spec.weighting = Weighting::Uniform;
  } else if (head == "multi_crop_avg") {
    no_arg();
    spec.kind = ModeKind::MultiCropAvg;
    spec.weighting = Weighting::Uniform;
    spec.criterion = Criterion::Random;
  } else if (head == "per_scale") {
    spec.kind = ModeKind::PerScale;
    spec.criterion = Criterion::Random;
    try {
      std::size_t used = 0;
      spec.scale = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
    } catch (const std::exception&) {
      throw InvalidArgument("mode '" + name + "': expected per_scale:<fraction>");
    }
    if (!(spec.scale > 0.0) || spec.scale > 1.0) throw InvalidArgument("mode '" + name + "': scale outside (0, 1]");
  } else if (head == "random_per_scale_avg") {
    no_arg();
    spec.kind = ModeKind::RandomPerScaleAvg;
    spec.criterion = Criterion::Random;
    spec.weighting = Weighting::Uniform;
  } else if (head == "selected_uniform_avg") {
    no_arg();
    spec.kind = ModeKind::SelectedUniformAvg;
    spec.weighting = Weighting::Uniform;
  } else if (head == "selected_scale_weighted") {
    no_arg();
    spec.kind = ModeKind::SelectedScaleWeighted;
    spec.weighting = Weighting::ScaleWeighted;
  } else if (head == "criterion") {
    spec.kind = ModeKind::CriterionVariant;
    spec.criterion = parse_criterion(arg);
  } else if (head == "n") {
    spec.kind = ModeKind::NVariant;
    try {
      std::size_t used = 0;
      spec.n = std::stoi(arg, &used);
      if (used != arg.size() || spec.n < 1) throw std::invalid_argument(arg);
    } catch (const std::exception&) {
      throw InvalidArgument("mode '" + name + "': expected n:<positive integer>");
    }
  } else if (head == "pipeline") {
    no_arg();
    spec.kind = ModeKind::Pipeline;
  } else if (head == "stored") {
    no_arg();
    spec.kind = ModeKind::Stored;
  } else {
    throw InvalidArgument("unknown mode '" + name + "'");
  }

  // Everything that selects views goes through the pool; global-only weighting bypasses it.
  const bool pooled = spec.kind == ModeKind::SelectedUniformAvg || spec.kind == ModeKind::SelectedScaleWeighted ||
                      spec.kind == ModeKind::CriterionVariant || spec.kind == ModeKind::NVariant ||
                      spec.kind == ModeKind::Pipeline || spec.kind == ModeKind::RandomPerScaleAvg;
  spec.randomized = spec.kind == ModeKind::MultiCropAvg || (spec.kind == ModeKind::PerScale && spec.scale < 1.0) ||
                    (pooled && spec.criterion == Criterion::Random && spec.weighting != Weighting::GlobalOnly);
  return spec;
}

std::vector<ViewKey> ten_crop_views(int width, int height) {
  const int w = std::clamp(static_cast<int>(std::floor(0.875 * width + 0.5)), 1, width);
  const int h = std::clamp(static_cast<int>(std::floor(0.875 * height + 0.5)), 1, height);
  const std::vector<CropRect> rects{
      {0, 0, w, h}, {width - w, 0, w, h}, {0, height - h, w, h}, {width - w, height - h, w, h},
      {(width - w) / 2, (height - h) / 2, w, h}};
  std::vector<ViewKey> views;
  for (bool flip : {false, true})
    for (const auto& r : rects) views.push_back(ViewKey::crop(r, flip).canonical(width, height));
  return views;
}

namespace {

bool uses_pool(const ModeSpec& spec) {
  switch (spec.kind) {
    case ModeKind::RandomPerScaleAvg:
      return true;
    case ModeKind::SelectedUniformAvg:
    case ModeKind::SelectedScaleWeighted:
    case ModeKind::CriterionVariant:
    case ModeKind::NVariant:
    case ModeKind::Pipeline:
      return spec.weighting != Weighting::GlobalOnly;
    default:
      return false;
  }
}

int repeats_for(const ModeSpec& spec, const EvalConfig& config) { return spec.randomized ? config.repeats : 1; }

std::vector<CropRect> multi_crop_rects(int width, int height, const ScaleSet& scales, int m, std::uint64_t image_key,
                                       int repeat) {
  CounterRng rng(CounterRng::split(image_key, kMultiCropStream + static_cast<std::uint64_t>(repeat)));
  std::vector<CropRect> rects;
  for (int j = 0; j < m; ++j) {
    const double s = scales.scales[rng.bounded(scales.scales.size())];
    rects.push_back(sample_crops(width, height, s, 1, rng.next()).front());
  }
  return rects;
}

// Crop pool of a single scale: the decomposition's own crops when s belongs to the scale set.
std::vector<CropRect> per_scale_rects(int width, int height, double s, const ScaleSet& scales, int m,
                                      std::uint64_t image_key, std::size_t* pool_index) {
  for (std::size_t i = 0; i + 1 < scales.scales.size(); ++i) {
    if (std::abs(scales.scales[i] - s) < 1e-9) {
      if (pool_index) *pool_index = i;
      return sample_crops(width, height, scales.scales[i], m, scale_stream_seed(image_key, i));
    }
  }
  if (pool_index) *pool_index = static_cast<std::size_t>(-1);
  return sample_crops(width, height, s, m, CounterRng::split(image_key, kPerScaleStream + std::bit_cast<std::uint64_t>(s)));
}

std::size_t per_scale_pick(std::uint64_t image_key, int repeat, int m) {
  CounterRng rng(CounterRng::split(selection_key(image_key, static_cast<std::uint64_t>(repeat)), kPerScaleStream));
  return rng.bounded(static_cast<std::uint64_t>(m));
}

FeatureVector mean_feature(const std::vector<FeatureVector>& features) {
  Vector<double> acc = Vector<double>::Zero(features.front().size());
  for (const auto& f : features) acc += f.cast<double>();
  return normalized(acc / static_cast<double>(features.size())).cast<float>();
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Lazily encoded views of one image, shared across modes and repeats.
class ImageContext {
 public:
  ImageContext(const EncoderBackend& backend, const TextClassifier& clf, const EvalConfig& config, std::string id)
      : backend_(backend), clf_(clf), config_(config), id_(std::move(id)) {
    info_ = backend_.image_info(id_);
    key_ = image_seed(id_, config_.seed);
  }

  const FeatureVector& global() {
    if (!global_) global_ = encode(ViewKey::global());
    return *global_;
  }

  FeatureVector encode(const ViewKey& view) {
    return encode_view(backend_, id_, view.canonical(info_.width, info_.height));
  }

  // Returns the pool and the seconds it took to build (charged to every mode that uses it).
  std::pair<const EncodedViews*, double> pool(int n) {
    auto it = pools_.find(n);
    if (it == pools_.end()) {
      const auto t0 = Clock::now();
      EncodedViews views = encode_views(backend_, clf_, id_, build_scale_set(n), config_.m, config_.seed);
      it = pools_.emplace(n, std::make_pair(std::move(views), seconds_since(t0))).first;
    }
    return {&it->second.first, it->second.second};
  }

  FeatureVector feature(const ModeSpec& spec, int repeat, double* pool_seconds) {
    *pool_seconds = 0.0;
    const int n = spec.kind == ModeKind::NVariant ? spec.n : config_.n;
    switch (spec.kind) {
      case ModeKind::GlobalBaseline:
        return global();
      case ModeKind::Stored:
        try {
          return backend_.encode(id_, ViewKey::refined());
        } catch (const MissingEmbedding&) {
          return global();
        }
      case ModeKind::TenCrop: {
        std::vector<FeatureVector> fs;
        for (const auto& v : ten_crop_views(info_.width, info_.height)) fs.push_back(encode(v));
        return mean_feature(fs);
      }
      case ModeKind::MultiCropAvg: {
        std::vector<FeatureVector> fs;
        for (const auto& r : multi_crop_rects(info_.width, info_.height, build_scale_set(n), config_.m, key_, repeat))
          fs.push_back(encode(ViewKey::crop(r)));
        return mean_feature(fs);
      }
      case ModeKind::PerScale: {
        if (spec.scale == 1.0) return global();
        std::size_t index = 0;
        const ScaleSet scales = build_scale_set(n);
        const auto k = per_scale_pick(key_, repeat, config_.m);
        const auto rects = per_scale_rects(info_.width, info_.height, spec.scale, scales, config_.m, key_, &index);
        if (index != static_cast<std::size_t>(-1)) {
          auto [views, secs] = pool(n);
          *pool_seconds = secs;
          return views->local[index].features[k];
        }
        return encode(ViewKey::crop(rects[k]));
      }
      default:
        break;
    }
    if (!uses_pool(spec)) return global();
    auto [views, secs] = pool(n);
    *pool_seconds = secs;
    return refine_views(*views, spec.criterion, spec.weighting, selection_key(key_, static_cast<std::uint64_t>(repeat)))
        .vector;
  }

 private:
  const EncoderBackend& backend_;
  const TextClassifier& clf_;
  const EvalConfig& config_;
  std::string id_;
  ImageInfo info_;
  std::uint64_t key_ = 0;
  std::optional<FeatureVector> global_;
  std::map<int, std::pair<EncodedViews, double>> pools_;
};

}  // namespace

std::vector<ViewKey> required_views(const std::string& image_id, int width, int height,
                                    std::span<const ModeSpec> modes, const EvalConfig& config) {
  std::vector<ViewKey> out;
  std::set<ViewKey> seen;
  auto add = [&](const ViewKey& v) {
    const ViewKey c = v.canonical(width, height);
    if (seen.insert(c).second) out.push_back(c);
  };
  const std::uint64_t key = image_seed(image_id, config.seed);
  add(ViewKey::global());
  for (const auto& spec : modes) {
    const int n = spec.kind == ModeKind::NVariant ? spec.n : config.n;
    if (uses_pool(spec)) {
      const ViewSet vs = decompose(image_id, width, height, build_scale_set(n), config.m, config.seed);
      for (const auto& ps : vs.per_scale)
        for (const auto& r : ps.crops) add(ViewKey::crop(r));
    }
    switch (spec.kind) {
      case ModeKind::TenCrop:
        for (const auto& v : ten_crop_views(width, height)) add(v);
        break;
      case ModeKind::MultiCropAvg:
        for (int r = 0; r < repeats_for(spec, config); ++r)
          for (const auto& rect : multi_crop_rects(width, height, build_scale_set(n), config.m, key, r))
            add(ViewKey::crop(rect));
        break;
      case ModeKind::PerScale:
        if (spec.scale < 1.0)
          for (const auto& r : per_scale_rects(width, height, spec.scale, build_scale_set(n), config.m, key, nullptr))
            add(ViewKey::crop(r));
        break;
      default:
        break;
    }
  }
  return out;
}

// ---- reports ------------------------------------------------------------------------------

namespace {

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  return json(v).dump();
}

}  // namespace

json report_to_json(const EvalReport& r, bool include_timing) {
  json per_class = json::array();
  for (double v : r.per_class_accuracy) per_class.push_back(number_or_null(v));
  json j = {{"mode",
             {{"name", r.mode},
              {"criterion", r.criterion},
              {"weighting", r.weighting},
              {"n", r.n},
              {"m", r.m},
              {"shots", r.shots},
              {"alpha", r.alpha},
              {"beta", r.beta},
              {"seed", r.seed},
              {"repeats", r.repeats},
              {"validation", r.validation}}},
            {"top1_accuracy", r.top1_accuracy},
            {"per_class_accuracy", std::move(per_class)},
            {"counts", {{"test", r.test_count}, {"mean_correct", r.mean_correct}}}};
  if (include_timing) j["wall_time"] = r.wall_time;
  return j;
}

std::string reports_to_csv(std::span<const EvalReport> reports, bool include_timing) {
  std::ostringstream os;
  os << "mode,criterion,weighting,n,m,shots,alpha,beta,seed,repeats,validation,top1_accuracy,test_count,mean_correct";
  if (include_timing) os << ",wall_time";
  os << "\n";
  for (const auto& r : reports) {
    os << r.mode << "," << r.criterion << "," << r.weighting << "," << r.n << "," << r.m << "," << r.shots << ","
       << csv_number(r.alpha) << "," << csv_number(r.beta) << "," << r.seed << "," << r.repeats << "," << r.validation
       << "," << csv_number(r.top1_accuracy) << "," << r.test_count << "," << csv_number(r.mean_correct);
    if (include_timing) os << "," << csv_number(r.wall_time);
    os << "\n";
  }
  return os.str();
}

// ---- runs ---------------------------------------------------------------------------------

int Predictor::predict(const FeatureVector& feature) const {
  if (!cache || alpha == 0.0) return static_cast<int>(argmax(zero_shot_logits(feature, *clf)));
  return static_cast<int>(argmax(adapter_predict(feature, *clf, *cache, alpha, beta)));
}

Predictor build_predictor(const Episode& episode, const EncoderBackend& backend, const TextClassifier& clf,
                          const EvalConfig& config, std::string* validation) {
  config.validate();
  Predictor p;
  p.clf = &clf;
  p.alpha = config.adapter.alpha;
  p.beta = config.adapter.beta;
  if (validation) *validation = "none";
  if (episode.train.empty() || (p.alpha == 0.0 && !config.adapter.grid)) {
    p.alpha = 0.0;
    return p;
  }

  auto features_of = [&](std::span<const LabeledImage> items, bool refined) {
    std::vector<FeatureVector> fs(items.size());
    parallel_for(items.size(), config.workers, [&](std::size_t i) {
      fs[i] = refined ? refine_image(backend, clf, items[i].id, build_scale_set(config.n), config.m, config.criterion,
                                     config.weighting, config.seed)
                            .vector
                      : encode_view(backend, items[i].id, ViewKey::global());
    });
    return fs;
  };
  auto labels_of = [](std::span<const LabeledImage> items) {
    std::vector<int> ls;
    for (const auto& it : items) ls.push_back(it.label);
    return ls;
  };

  const auto train_features = features_of(episode.train, config.refine_cache_keys);
  const auto train_labels = labels_of(episode.train);
  p.cache = build_cache(train_features, train_labels, clf.num_classes());

  if (config.adapter.grid) {
    const bool has_val = !episode.val.empty();
    const auto& val = has_val ? episode.val : episode.train;
    const auto val_features = features_of(val, true);
    const GridResult best = grid_search(*p.cache, clf, val_features, labels_of(val), config.adapter.alpha_range,
                                        config.adapter.beta_range, config.adapter.steps);
    p.alpha = best.alpha;
    p.beta = best.beta;
    if (validation) *validation = has_val ? "val" : "train";
  }
  if (config.train_epochs > 0) {
    AdapterConfig tuned = config.adapter;
    tuned.alpha = p.alpha;
    tuned.beta = p.beta;
    p.cache = train_cache_keys(*p.cache, clf, train_features, train_labels, tuned, config.lr, config.train_epochs);
  }
  return p;
}

std::vector<EvalReport> evaluate_modes(std::span<const LabeledImage> test, const EncoderBackend& backend,
                                       const Predictor& predictor, std::span<const ModeSpec> modes,
                                       const EvalConfig& config) {
  config.validate();
  if (test.empty()) throw InvalidArgument("evaluate: empty test set");
  const TextClassifier& clf = *predictor.clf;

  // predictions[mode][repeat][image]; seconds[mode][image]
  std::vector<std::vector<std::vector<int>>> predictions(modes.size());
  std::vector<std::vector<double>> seconds(modes.size(), std::vector<double>(test.size(), 0.0));
  for (std::size_t k = 0; k < modes.size(); ++k)
    predictions[k].assign(repeats_for(modes[k], config), std::vector<int>(test.size(), -1));

  parallel_for(test.size(), config.workers, [&](std::size_t i) {
    ImageContext ctx(backend, clf, config, test[i].id);
    for (std::size_t k = 0; k < modes.size(); ++k) {
      for (std::size_t r = 0; r < predictions[k].size(); ++r) {
        const auto t0 = Clock::now();
        double pool_seconds = 0.0;
        const FeatureVector f = ctx.feature(modes[k], static_cast<int>(r), &pool_seconds);
        predictions[k][r][i] = predictor.predict(f);
        seconds[k][i] += seconds_since(t0) + (r == 0 ? pool_seconds : 0.0);
      }
    }
  });

  std::vector<int> labels;
  for (const auto& t : test) labels.push_back(t.label);

  std::vector<EvalReport> reports;
  for (std::size_t k = 0; k < modes.size(); ++k) {
    const ModeSpec& spec = modes[k];
    EvalReport rep;
    rep.mode = spec.name;
    rep.criterion = spec.kind == ModeKind::GlobalBaseline || spec.kind == ModeKind::TenCrop ||
                            spec.kind == ModeKind::Stored || spec.weighting == Weighting::GlobalOnly
                        ? "none"
                        : to_string(spec.criterion);
    rep.weighting = spec.kind == ModeKind::Stored ? "stored" : to_string(spec.weighting);
    rep.n = spec.kind == ModeKind::NVariant ? spec.n : config.n;
    rep.m = config.m;
    rep.alpha = predictor.cache ? predictor.alpha : 0.0;
    rep.beta = predictor.cache ? predictor.beta : 0.0;
    rep.seed = config.seed;
    rep.repeats = static_cast<int>(predictions[k].size());
    rep.validation = "none";
    rep.test_count = test.size();
    rep.per_class_accuracy.assign(clf.num_classes(), 0.0);
    for (const auto& preds : predictions[k]) {
      const Accuracy acc = evaluate(preds, labels, clf.num_classes());
      rep.top1_accuracy += acc.top1;
      rep.mean_correct += static_cast<double>(acc.correct);
      for (Index c = 0; c < clf.num_classes(); ++c) rep.per_class_accuracy[c] += acc.per_class[c];
    }
    const double reps = static_cast<double>(rep.repeats);
    rep.top1_accuracy /= reps;
    rep.mean_correct /= reps;
    for (double& v : rep.per_class_accuracy) v /= reps;
    rep.wall_time = std::accumulate(seconds[k].begin(), seconds[k].end(), 0.0);
    rep.predictions = predictions[k].front();
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::vector<EvalReport> run_ablation(const Episode& episode, const EncoderBackend& backend, const TextClassifier& clf,
                                     std::span<const std::string> modes, const EvalConfig& config) {
  config.validate();
  std::vector<ModeSpec> specs;
  for (const auto& name : modes) specs.push_back(parse_mode(name, config));
  std::string validation;
  const Predictor predictor = build_predictor(episode, backend, clf, config, &validation);
  auto reports = evaluate_modes(episode.test, backend, predictor, specs, config);
  for (auto& r : reports) {
    r.shots = episode.shots;
    r.validation = validation;
  }
  return reports;
}

std::vector<EvalReport> run_domain_generalization(const Episode& source, const EncoderBackend& source_backend,
                                                  const TextClassifier& clf, std::span<const DomainTarget> targets,
                                                  const EvalConfig& config) {
  config.validate();
  const auto& names = clf.class_names();
  for (const auto& t : targets) {
    if (t.backend == nullptr) throw InvalidArgument("domain target '" + t.name + "' has no backend");
    const std::size_t common = std::min(t.classes.size(), names.size());
    for (std::size_t i = 0; i < common; ++i)
      if (t.classes[i] != names[i])
        throw InvalidArgument("domain target '" + t.name + "': class list diverges at index " + std::to_string(i) +
                              " ('" + t.classes[i] + "' vs source '" + names[i] + "')");
    if (t.classes.size() != names.size())
      throw InvalidArgument("domain target '" + t.name + "': class list diverges at index " + std::to_string(common) +
                            " (" + std::to_string(t.classes.size()) + " classes vs source " +
                            std::to_string(names.size()) + ")");
  }

  std::string validation;
  const Predictor predictor = build_predictor(source, source_backend, clf, config, &validation);
  const ModeSpec pipeline = parse_mode("pipeline", config);
  std::vector<EvalReport> reports;
  for (const auto& t : targets) {
    auto r = evaluate_modes(t.test, *t.backend, predictor, std::span(&pipeline, 1), config).front();
    r.mode = t.name;
    r.shots = source.shots;
    r.validation = validation;
    reports.push_back(std::move(r));
  }
  return reports;
}

// ---- planted-scene benchmark --------------------------------------------------------------

void SyntheticConfig::validate() const {
  if (classes < 2) throw InvalidArgument("synthetic: need at least 2 classes");
  if (distractors > 0 && classes < 3) throw InvalidArgument("synthetic: distractors need at least 3 classes");
  if (images < 1) throw InvalidArgument("synthetic: need at least 1 image");
  if (distractors < 0) throw InvalidArgument("synthetic: distractors must be >= 0");
  if (n < 1 || m < 1) throw InvalidArgument("synthetic: n and m must be >= 1");
  if (!(noise_amp >= 0.0)) throw InvalidArgument("synthetic: noise must be >= 0");
  if (dim <= classes) throw InvalidArgument("synthetic: dim must exceed the class count");
  if (!(tau > 0.0)) throw InvalidArgument("synthetic: tau must be > 0");
  if (seeds < 1 || repeats < 1 || workers < 1) throw InvalidArgument("synthetic: seeds, repeats, workers must be >= 1");
  if (scene.width < 2 || scene.height < 2) throw InvalidArgument("synthetic: scene must be at least 2x2");
}

std::vector<std::string> default_synthetic_modes(int n) {
  std::vector<std::string> modes{"global_baseline",
                                 "ten_crop",
                                 "multi_crop_avg",
                                 "random_per_scale_avg",
                                 "selected_uniform_avg",
                                 "selected_scale_weighted",
                                 "criterion:max_margin",
                                 "criterion:min_margin",
                                 "criterion:min_entropy",
                                 "criterion:random"};
  const ScaleSet scales = build_scale_set(n);
  for (double s : scales.scales) {
    std::ostringstream os;
    os << "per_scale:" << s;
    modes.push_back(os.str());
  }
  return modes;
}

const ModeAggregate& SyntheticReport::mode(const std::string& name) const {
  for (const auto& m : modes)
    if (m.mode == name) return m;
  throw NotFound("no mode '" + name + "' in synthetic report");
}

SyntheticWorld make_synthetic_world(const SyntheticConfig& config, std::uint64_t seed, double noise_amp) {
  std::vector<std::string> names;
  for (int c = 0; c < config.classes; ++c) names.push_back("class_" + std::to_string(c));
  TextClassifier clf = build_text_classifier(names, make_prototypes(config.classes, config.dim, CounterRng::split(seed, 1)),
                                             config.tau);
  SceneConfig scene = config.scene;
  scene.distractors = config.distractors;
  const std::uint64_t scene_key = CounterRng::split(seed, 2);
  std::vector<SyntheticScene> scenes;
  for (int i = 0; i < config.images; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%05d", i);
    scenes.push_back(generate_scene(id, scene, config.classes, CounterRng::split(scene_key, static_cast<std::uint64_t>(i))));
  }
  auto backend = std::make_unique<SyntheticBackend>(clf, scenes, noise_amp);
  return {std::move(clf), std::move(scenes), std::move(backend)};
}

SyntheticReport synthetic_benchmark(const SyntheticConfig& config) {
  config.validate();
  SyntheticReport report;
  report.config = config;
  const auto modes = config.modes.empty() ? default_synthetic_modes(config.n) : config.modes;

  std::vector<std::vector<double>> accuracy(modes.size());
  std::vector<double> seconds(modes.size(), 0.0);
  for (int s = 0; s < config.seeds; ++s) {
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(s);
    const SyntheticWorld world = make_synthetic_world(config, seed, config.noise_amp);
    Episode episode;
    for (const auto& sc : world.scenes) episode.test.push_back({sc.image_id, sc.object_class});

    EvalConfig ec;
    ec.n = config.n;
    ec.m = config.m;
    ec.repeats = config.repeats;
    ec.seed = seed;
    ec.workers = config.workers;
    ec.adapter.alpha = 0.0;
    const auto reports = run_ablation(episode, *world.backend, world.classifier, modes, ec);
    for (std::size_t k = 0; k < modes.size(); ++k) {
      accuracy[k].push_back(reports[k].top1_accuracy);
      seconds[k] += reports[k].wall_time;
    }
  }

  const double total_images = static_cast<double>(config.images) * config.seeds;
  for (std::size_t k = 0; k < modes.size(); ++k) {
    ModeAggregate agg;
    agg.mode = modes[k];
    agg.per_seed = accuracy[k];
    const double count = static_cast<double>(agg.per_seed.size());
    agg.mean = std::accumulate(agg.per_seed.begin(), agg.per_seed.end(), 0.0) / count;
    double ss = 0.0;
    for (double v : agg.per_seed) ss += (v - agg.mean) * (v - agg.mean);
    agg.stddev = count > 1 ? std::sqrt(ss / (count - 1)) : 0.0;
    agg.wall_time_per_image = seconds[k] / total_images;
    report.modes.push_back(std::move(agg));
  }
  return report;
}

json synthetic_config_to_json(const SyntheticConfig& c) {
  return {{"classes", c.classes},
          {"images", c.images},
          {"distractors", c.distractors},
          {"n", c.n},
          {"m", c.m},
          {"noise", c.noise_amp},
          {"dim", c.dim},
          {"tau", c.tau},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"repeats", c.repeats},
          {"scene",
           {{"width", c.scene.width},
            {"height", c.scene.height},
            {"object_radius", {c.scene.object_radius_min, c.scene.object_radius_max}},
            {"distractor_radius", {c.scene.distractor_radius_min, c.scene.distractor_radius_max}}}}};
}

json synthetic_report_to_json(const SyntheticReport& r, bool include_timing) {
  json modes = json::array();
  for (const auto& m : r.modes) {
    json j = {{"mode", m.mode}, {"mean", m.mean}, {"stddev", m.stddev}, {"per_seed", m.per_seed}};
    if (include_timing) j["wall_time_per_image"] = m.wall_time_per_image;
    modes.push_back(std::move(j));
  }
  return {{"config", synthetic_config_to_json(r.config)}, {"modes", std::move(modes)}};
}

std::string synthetic_report_to_csv(const SyntheticReport& r, bool include_timing) {
  std::ostringstream os;
  os << "mode,mean,stddev,seeds";
  if (include_timing) os << ",wall_time_per_image";
  os << "\n";
  for (const auto& m : r.modes) {
    os << m.mode << "," << csv_number(m.mean) << "," << csv_number(m.stddev) << "," << m.per_seed.size();
    if (include_timing) os << "," << csv_number(m.wall_time_per_image);
    os << "\n";
  }
  return os.str();
}

}  // namespace vcr
