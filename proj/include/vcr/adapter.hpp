#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "vcr/embeddings.hpp"

namespace vcr {

// Key-value cache of few-shot training features (keys) and one-hot labels (values).
struct CacheModel {
  FeatureMatrix keys;           // N x d, unit rows
  Eigen::MatrixXf values;       // N x C, one-hot rows
  std::vector<int> labels;      // N
  Index num_classes = 0;

  Index size() const noexcept { return keys.rows(); }
  Index dim() const noexcept { return keys.cols(); }
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AdapterConfig {
  double alpha = 1.0;  // cache mixing weight
  double beta = 5.0;   // sharpness of the affinity activation
  bool grid = false;
  Range alpha_range{0.1, 5.0};
  Range beta_range{1.0, 10.0};
  int steps = 20;

  void validate() const;
};

CacheModel build_cache(std::span<const FeatureVector> features, std::span<const int> labels, Index num_classes);

// φ(z) = exp(-β(1 - z))
inline double affinity_activation(double z, double beta) { return std::exp(-beta * (1.0 - z)); }

// φ(keys · feature)ᵀ · values
Logits cache_logits(const FeatureVector& feature, const CacheModel& cache, double beta);

// clip + alpha · cache
Logits adapter_logits(const Logits& clip, const Logits& cache, double alpha);

// Full adapter prediction for one feature.
Logits adapter_predict(const FeatureVector& feature, const TextClassifier& clf, const CacheModel& cache, double alpha,
                       double beta);

// Mean cross-entropy of softmax(adapter logits) over a training set, as a function of the
// cache keys (used as given, without re-normalization).
double cache_training_loss(const RowMatrix<double>& keys, const CacheModel& cache, const TextClassifier& clf,
                           const RowMatrix<double>& features, std::span<const int> labels, double alpha, double beta);

// Analytic gradient of cache_training_loss with respect to the keys.
RowMatrix<double> cache_training_gradient(const RowMatrix<double>& keys, const CacheModel& cache,
                                          const TextClassifier& clf, const RowMatrix<double>& features,
                                          std::span<const int> labels, double alpha, double beta);

// Full-batch gradient descent on the keys; values stay frozen and keys are re-normalized after
// every step. `losses` (optional) receives the loss before each epoch plus the final loss.
CacheModel train_cache_keys(const CacheModel& cache, const TextClassifier& clf,
                            std::span<const FeatureVector> features, std::span<const int> labels,
                            const AdapterConfig& config, double lr, int epochs, std::vector<double>* losses = nullptr);

struct GridResult {
  double alpha = 0.0;
  double beta = 0.0;
  double accuracy = 0.0;
};

// `steps` evenly spaced points per axis (a single point at lo when steps == 1). Ties resolve to
// the smallest alpha, then the smallest beta.
std::vector<double> grid_points(const Range& range, int steps);
GridResult grid_search(const CacheModel& cache, const TextClassifier& clf, std::span<const FeatureVector> features,
                       std::span<const int> labels, const Range& alpha_range, const Range& beta_range, int steps);

void write_cache(const CacheModel& cache, const AdapterConfig& config, const std::filesystem::path& path);
std::pair<CacheModel, AdapterConfig> load_cache(const std::filesystem::path& path);

}  // namespace vcr
