#include "vcr/adapter.hpp"

#include "vcr/refine.hpp"

namespace vcr {

void AdapterConfig::validate() const {
  if (!(alpha >= 0.0)) throw InvalidArgument("adapter: alpha must be >= 0");
  if (!(beta > 0.0)) throw InvalidArgument("adapter: beta must be > 0");
  if (alpha_range.lo > alpha_range.hi || beta_range.lo > beta_range.hi)
    throw InvalidArgument("adapter: grid ranges must be ordered (lo <= hi)");
  if (alpha_range.lo < 0.0 || beta_range.lo < 0.0) throw InvalidArgument("adapter: grid ranges must be non-negative");
  if (steps < 1) throw InvalidArgument("adapter: grid steps must be >= 1");
}

CacheModel build_cache(std::span<const FeatureVector> features, std::span<const int> labels, Index num_classes) {
  if (features.empty()) throw InvalidArgument("build_cache: empty training set");
  if (features.size() != labels.size()) throw InvalidArgument("build_cache: features and labels differ in length");
  if (num_classes < 2) throw InvalidArgument("build_cache: need at least 2 classes");
  const Index n = static_cast<Index>(features.size());
  const Index dim = features.front().size();

  CacheModel cache;
  cache.num_classes = num_classes;
  cache.keys.resize(n, dim);
  cache.values = Eigen::MatrixXf::Zero(n, num_classes);
  cache.labels.assign(labels.begin(), labels.end());
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes)
      throw InvalidArgument("build_cache: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) +
                            ")");
    if (features[i].size() != dim) throw InvalidArgument("build_cache: mixed feature dimensions");
    if (!is_unit_norm(features[i])) throw ValidationError("build_cache: training feature is not unit-norm", {i});
    cache.keys.row(i) = features[i].transpose();
    cache.values(i, y) = 1.0f;
  }
  return cache;
}

Logits cache_logits(const FeatureVector& feature, const CacheModel& cache, double beta) {
  if (feature.size() != cache.dim())
    throw InvalidArgument("cache_logits: feature dimension " + std::to_string(feature.size()) +
                          " does not match cache dimension " + std::to_string(cache.dim()));
  const Vector<double> affinity = cache.keys.cast<double>() * feature.cast<double>();
  const Vector<double> activated = (-beta * (1.0 - affinity.array())).exp().matrix();
  return cache.values.cast<double>().transpose() * activated;
}

Logits adapter_logits(const Logits& clip, const Logits& cache, double alpha) {
  if (clip.size() != cache.size()) throw InvalidArgument("adapter_logits: class counts differ");
  return clip + alpha * cache;
}

Logits adapter_predict(const FeatureVector& feature, const TextClassifier& clf, const CacheModel& cache, double alpha,
                       double beta) {
  const Logits clip = zero_shot_logits(feature, clf);
  if (alpha == 0.0) return clip;
  return adapter_logits(clip, cache_logits(feature, cache, beta), alpha);
}

namespace {

struct ForwardPass {
  Eigen::MatrixXd activated;  // S x N, φ(F Kᵀ)
  Eigen::MatrixXd probs;      // S x C
  double loss = 0.0;
};

ForwardPass forward(const RowMatrix<double>& keys, const CacheModel& cache, const TextClassifier& clf,
                    const RowMatrix<double>& features, std::span<const int> labels, double alpha, double beta) {
  const Index samples = features.rows();
  if (samples == 0) throw InvalidArgument("cache training: empty training set");
  if (static_cast<std::size_t>(samples) != labels.size()) throw InvalidArgument("cache training: label count mismatch");
  if (features.cols() != keys.cols() || keys.cols() != clf.dim())
    throw InvalidArgument("cache training: dimension mismatch");

  ForwardPass fp;
  const Eigen::MatrixXd clip = features * clf.weights().cast<double>().transpose() / clf.tau();
  fp.activated = (-beta * (1.0 - (features * keys.transpose()).array())).exp().matrix();
  const Eigen::MatrixXd z = clip + alpha * fp.activated * cache.values.cast<double>();
  fp.probs.resize(z.rows(), z.cols());
  for (Index s = 0; s < samples; ++s) {
    const double zmax = z.row(s).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(s).array() - zmax).exp().matrix();
    const double sum = e.sum();
    fp.probs.row(s) = e / sum;
    const int y = labels[s];
    if (y < 0 || y >= z.cols()) throw InvalidArgument("cache training: label out of range");
    fp.loss -= (z(s, y) - zmax) - std::log(sum);
  }
  fp.loss /= static_cast<double>(samples);
  return fp;
}

}  // namespace

double cache_training_loss(const RowMatrix<double>& keys, const CacheModel& cache, const TextClassifier& clf,
                           const RowMatrix<double>& features, std::span<const int> labels, double alpha, double beta) {
  return forward(keys, cache, clf, features, labels, alpha, beta).loss;
}

RowMatrix<double> cache_training_gradient(const RowMatrix<double>& keys, const CacheModel& cache,
                                          const TextClassifier& clf, const RowMatrix<double>& features,
                                          std::span<const int> labels, double alpha, double beta) {
  ForwardPass fp = forward(keys, cache, clf, features, labels, alpha, beta);
  Eigen::MatrixXd& delta = fp.probs;  // dL/dz per sample, before averaging
  for (Index s = 0; s < delta.rows(); ++s) delta(s, labels[s]) -= 1.0;
  // dL/dA = α (δ Lᵀ) ∘ β φ(A)
  const Eigen::MatrixXd d_affinity =
      (alpha * beta) * (delta * cache.values.cast<double>().transpose()).cwiseProduct(fp.activated);
  return d_affinity.transpose() * features / static_cast<double>(features.rows());
}

CacheModel train_cache_keys(const CacheModel& cache, const TextClassifier& clf, std::span<const FeatureVector> features,
                            std::span<const int> labels, const AdapterConfig& config, double lr, int epochs,
                            std::vector<double>* losses) {
  if (epochs < 0) throw InvalidArgument("train_cache_keys: epochs must be >= 0");
  if (epochs == 0) return cache;
  if (!(lr > 0.0)) throw InvalidArgument("train_cache_keys: learning rate must be > 0");
  config.validate();
  if (features.size() != labels.size()) throw InvalidArgument("train_cache_keys: features and labels differ in length");

  RowMatrix<double> f(static_cast<Index>(features.size()), cache.dim());
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != cache.dim()) throw InvalidArgument("train_cache_keys: dimension mismatch");
    f.row(static_cast<Index>(i)) = features[i].cast<double>().transpose();
  }
  RowMatrix<double> keys = cache.keys.cast<double>();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (losses) losses->push_back(cache_training_loss(keys, cache, clf, f, labels, config.alpha, config.beta));
    keys -= lr * cache_training_gradient(keys, cache, clf, f, labels, config.alpha, config.beta);
    for (Index j = 0; j < keys.rows(); ++j) keys.row(j).normalize();
  }
  if (losses) losses->push_back(cache_training_loss(keys, cache, clf, f, labels, config.alpha, config.beta));

  CacheModel trained = cache;
  trained.keys = keys.cast<float>();
  return trained;
}

std::vector<double> grid_points(const Range& range, int steps) {
  if (steps < 1) throw InvalidArgument("grid: steps must be >= 1");
  if (range.lo > range.hi) throw InvalidArgument("grid: range must be ordered");
  std::vector<double> pts;
  if (steps == 1 || range.lo == range.hi) return {range.lo};
  for (int i = 0; i < steps; ++i) pts.push_back(range.lo + (range.hi - range.lo) * i / (steps - 1));
  pts.back() = range.hi;
  return pts;
}

GridResult grid_search(const CacheModel& cache, const TextClassifier& clf, std::span<const FeatureVector> features,
                       std::span<const int> labels, const Range& alpha_range, const Range& beta_range, int steps) {
  if (features.empty()) throw InvalidArgument("grid_search: empty validation set");
  if (features.size() != labels.size()) throw InvalidArgument("grid_search: features and labels differ in length");
  const auto alphas = grid_points(alpha_range, steps);
  const auto betas = grid_points(beta_range, steps);

  std::vector<Logits> clip;
  std::vector<Vector<double>> affinity;
  for (const auto& f : features) {
    clip.push_back(zero_shot_logits(f, clf));
    affinity.push_back(cache.keys.cast<double>() * f.cast<double>());
  }
  const Eigen::MatrixXd values = cache.values.cast<double>();

  GridResult best{alphas.front(), betas.front(), -1.0};
  for (double beta : betas) {
    std::vector<Logits> cached;
    for (const auto& a : affinity) cached.push_back(values.transpose() * (-beta * (1.0 - a.array())).exp().matrix());
    for (double alpha : alphas) {
      std::size_t correct = 0;
      for (std::size_t i = 0; i < features.size(); ++i)
        if (argmax(clip[i] + alpha * cached[i]) == labels[i]) ++correct;
      const double acc = static_cast<double>(correct) / static_cast<double>(features.size());
      const bool better = acc > best.accuracy ||
                          (acc == best.accuracy && (alpha < best.alpha || (alpha == best.alpha && beta < best.beta)));
      if (better) best = {alpha, beta, acc};
    }
  }
  return best;
}

void write_cache(const CacheModel& cache, const AdapterConfig& config, const std::filesystem::path& path) {
  write_vcre(cache.keys, path);
  write_json_file(sidecar_path(path), {{"labels", cache.labels},
                                       {"num_classes", cache.num_classes},
                                       {"adapter", {{"alpha", config.alpha}, {"beta", config.beta}}}});
}

std::pair<CacheModel, AdapterConfig> load_cache(const std::filesystem::path& path) {
  const FeatureMatrix keys = read_vcre(path);
  const auto manifest = read_json_file(sidecar_path(path));
  require_unit_rows(keys, path.string());
  const auto labels = manifest.at("labels").get<std::vector<int>>();
  if (static_cast<Index>(labels.size()) != keys.rows())
    throw ValidationError(path.string() + ": label count does not match key rows");
  std::vector<FeatureVector> rows;
  for (Index i = 0; i < keys.rows(); ++i) rows.push_back(keys.row(i).transpose());
  AdapterConfig config;
  config.alpha = manifest.at("adapter").at("alpha").get<double>();
  config.beta = manifest.at("adapter").at("beta").get<double>();
  config.validate();
  return {build_cache(rows, labels, manifest.at("num_classes").get<Index>()), config};
}

}  // namespace vcr
