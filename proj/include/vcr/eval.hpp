#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vcr/adapter.hpp"
#include "vcr/refine.hpp"
#include "vcr/synthetic.hpp"

namespace vcr {

// ---- datasets and episodes ----------------------------------------------------------------

struct DatasetItem {
  std::string id;
  int label = 0;
  int width = 0;
  int height = 0;
};

// {"classes": [str...], "items": [{"id", "label", "width", "height"}...]}
struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<DatasetItem> items;

  void validate() const;
};

DatasetManifest dataset_from_json(const nlohmann::json& j);
nlohmann::json dataset_to_json(const DatasetManifest& d);
DatasetManifest load_dataset_manifest(const std::filesystem::path& path);

struct LabeledImage {
  std::string id;
  int label = 0;
};

struct Episode {
  int shots = 0;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
  std::vector<LabeledImage> test;
  std::uint64_t seed = 0;
};

// Per class (in class order) the items are shuffled with a seeded Fisher-Yates pass; the first
// `shots` become train, the next `val_shots` val, and the rest test. Test keeps manifest order.
Episode build_fewshot_episode(const DatasetManifest& dataset, int shots, std::uint64_t seed, int val_shots = 0);

// Every item goes to test (zero-shot and target-domain sets).
Episode test_only_episode(const DatasetManifest& dataset);

// ---- accuracy -----------------------------------------------------------------------------

struct Accuracy {
  double top1 = 0.0;
  std::vector<double> per_class;  // NaN where a class has no test samples
  std::size_t total = 0;
  std::size_t correct = 0;
};

Accuracy evaluate(std::span<const int> predictions, std::span<const int> labels, Index num_classes);

// ---- modes --------------------------------------------------------------------------------

enum class ModeKind {
  GlobalBaseline,
  TenCrop,
  MultiCropAvg,
  PerScale,
  RandomPerScaleAvg,
  SelectedUniformAvg,
  SelectedScaleWeighted,
  CriterionVariant,
  NVariant,
  Pipeline,  // the configured criterion / weighting / n
  Stored,    // a precomputed "refined" row when the backend has one, else the global view
};

struct ModeSpec {
  std::string name;
  ModeKind kind = ModeKind::Pipeline;
  Criterion criterion = Criterion::MaxMargin;
  Weighting weighting = Weighting::ScaleWeighted;
  int n = 10;
  double scale = 1.0;  // PerScale only
  bool randomized = false;
};

struct EvalConfig {
  int n = 10;
  int m = 100;
  Criterion criterion = Criterion::MaxMargin;
  Weighting weighting = Weighting::ScaleWeighted;
  AdapterConfig adapter;
  bool refine_cache_keys = false;
  int train_epochs = 0;
  double lr = 1e-3;
  int repeats = 10;  // random modes: mean over this many runs
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

// Names: global_baseline, ten_crop, multi_crop_avg, per_scale:<s>, random_per_scale_avg,
// selected_uniform_avg, selected_scale_weighted, criterion:<name>, n:<k>, pipeline, stored.
ModeSpec parse_mode(const std::string& name, const EvalConfig& config);

// Classical 10-crop: four corners and the center at 0.875 of each side, each plus its mirror.
std::vector<ViewKey> ten_crop_views(int width, int height);

// Every view a mode set can request for one image; lets `decompose` emit a complete crop list.
std::vector<ViewKey> required_views(const std::string& image_id, int width, int height,
                                    std::span<const ModeSpec> modes, const EvalConfig& config);

// ---- reports ------------------------------------------------------------------------------

struct EvalReport {
  std::string mode;
  std::string criterion;
  std::string weighting;
  int n = 0;
  int m = 0;
  int shots = 0;
  double alpha = 0.0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  int repeats = 1;
  std::string validation;  // "val", "train" (reused), or "none"

  double top1_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::size_t test_count = 0;
  double mean_correct = 0.0;
  double wall_time = 0.0;  // seconds, excluded from JSON unless requested

  std::vector<int> predictions;  // first repeat
};

nlohmann::json report_to_json(const EvalReport& r, bool include_timing = false);
std::string reports_to_csv(std::span<const EvalReport> reports, bool include_timing = false);

// ---- runs ---------------------------------------------------------------------------------

// Zero-shot classifier plus an optional cache (alpha == 0 or an empty cache means zero-shot).
struct Predictor {
  const TextClassifier* clf = nullptr;
  std::optional<CacheModel> cache;
  double alpha = 0.0;
  double beta = 1.0;

  int predict(const FeatureVector& feature) const;
};

// Builds the cache from the episode's train images (grid search and key training per config).
// `validation` receives "val", "train" or "none".
Predictor build_predictor(const Episode& episode, const EncoderBackend& backend, const TextClassifier& clf,
                          const EvalConfig& config, std::string* validation = nullptr);

std::vector<EvalReport> evaluate_modes(std::span<const LabeledImage> test, const EncoderBackend& backend,
                                       const Predictor& predictor, std::span<const ModeSpec> modes,
                                       const EvalConfig& config);

std::vector<EvalReport> run_ablation(const Episode& episode, const EncoderBackend& backend, const TextClassifier& clf,
                                     std::span<const std::string> modes, const EvalConfig& config);

struct DomainTarget {
  std::string name;
  std::vector<std::string> classes;
  std::vector<LabeledImage> test;
  const EncoderBackend* backend = nullptr;
};

// Cache from the source train split only; one pipeline report per target.
std::vector<EvalReport> run_domain_generalization(const Episode& source, const EncoderBackend& source_backend,
                                                  const TextClassifier& clf, std::span<const DomainTarget> targets,
                                                  const EvalConfig& config);

// ---- planted-scene benchmark --------------------------------------------------------------

struct SyntheticConfig {
  int classes = 8;
  int images = 500;
  int distractors = 3;
  int n = 5;
  int m = 20;
  double noise_amp = 0.1;
  int dim = 32;
  double tau = 0.5;
  SceneConfig scene;
  std::uint64_t seed = 0;
  int seeds = 10;  // runs use seed, seed+1, ...
  int repeats = 10;
  int workers = 1;
  std::vector<std::string> modes;  // empty: default_synthetic_modes(n)

  void validate() const;
};

std::vector<std::string> default_synthetic_modes(int n);

struct ModeAggregate {
  std::string mode;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over seeds
  std::vector<double> per_seed;
  double wall_time_per_image = 0.0;
};

struct SyntheticReport {
  SyntheticConfig config;
  std::vector<ModeAggregate> modes;

  const ModeAggregate& mode(const std::string& name) const;
};

// One seeded world: prototypes, scenes and backend.
struct SyntheticWorld {
  TextClassifier classifier;
  std::vector<SyntheticScene> scenes;
  std::unique_ptr<SyntheticBackend> backend;
};

SyntheticWorld make_synthetic_world(const SyntheticConfig& config, std::uint64_t seed, double noise_amp);

SyntheticReport synthetic_benchmark(const SyntheticConfig& config);
nlohmann::json synthetic_config_to_json(const SyntheticConfig& c);
nlohmann::json synthetic_report_to_json(const SyntheticReport& r, bool include_timing = false);
std::string synthetic_report_to_csv(const SyntheticReport& r, bool include_timing = false);

}  // namespace vcr
