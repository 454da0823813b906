#include "vcr/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <deque>
#include <functional>
#include <iostream>
#include <map>

#include "vcr/eval.hpp"
#include "vcr/parallel.hpp"

namespace vcr {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Settings {
  int n = 10;
  int m = 100;
  std::string criterion = "max-margin";
  std::string weighting = "scale";
  int shots = 16;
  int val_shots = 0;
  double alpha = 1.0;
  double beta = 5.0;
  bool grid = false;
  std::vector<double> alpha_range{0.1, 5.0};
  std::vector<double> beta_range{1.0, 10.0};
  int grid_steps = 20;
  int epochs = 0;
  double lr = 1e-3;
  bool refine_keys = false;
  int repeats = 10;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string embeddings;
  std::string classifier;
  std::string manifest;
  std::string out;
  std::string format = "json";
  std::string config;
  bool timing = false;
  std::vector<std::string> modes;
  std::vector<std::string> targets;
  std::vector<std::string> target_embeddings;
  std::string path;

  // synth
  std::string preset = "default";
  int classes = 8;
  int images = 500;
  int distractors = 3;
  double noise = 0.1;
  int dim = 32;
  double tau = 0.5;
  int seeds = 10;
};

// Options that only steer where or how fast output is produced; they stay out of the echoed config
// so reports are identical across them.
bool echoed(const std::string& key) {
  return key != "out" && key != "format" && key != "workers" && key != "timing" && key != "config" && key != "help";
}

class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& description)
      : app_(parent.add_subcommand(name, description)) {}

  CLI::App* app() const { return app_; }
  Settings& s() { return s_; }

  template <typename T>
  CLI::Option* option(const std::string& name, T& ref, const std::string& description) {
    CLI::Option* o = app_->add_option(name, ref, description)->capture_default_str();
    record(o, ref);
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& ref, const std::string& description) {
    CLI::Option* o = app_->add_flag(name, ref, description);
    record(o, ref);
    return o;
  }

  json echo() const {
    json j = json::object();
    for (const auto& [key, get] : echo_) j[key] = get();
    return j;
  }

 private:
  template <typename T>
  void record(CLI::Option* o, T& ref) {
    const std::string key = o->get_single_name();
    if (echoed(key)) echo_[key] = [&ref] { return json(ref); };
  }

  CLI::App* app_;
  Settings s_;
  std::map<std::string, std::function<json()>> echo_;
};

void add_pipeline_flags(Command& c) {
  auto& s = c.s();
  c.option("--n", s.n, "number of scales")->check(CLI::PositiveNumber);
  c.option("--m", s.m, "views per local scale")->check(CLI::PositiveNumber);
  c.option("--criterion", s.criterion, "view selection criterion")
      ->check(CLI::IsMember({"max-margin", "min-margin", "min-entropy", "random", "max_margin", "min_margin",
                             "min_entropy"}));
  c.option("--weighting", s.weighting, "merge weighting")
      ->check(CLI::IsMember({"scale", "uniform", "global", "scale_weighted", "global_only"}));
}

void add_seed_flag(Command& c) { c.option("--seed", c.s().seed, "global seed (falls back to VCR_SEED)"); }

void add_workers_flag(Command& c) {
  c.option("--workers", c.s().workers, "parallel image workers")->check(CLI::PositiveNumber);
}

void add_report_flags(Command& c) {
  auto& s = c.s();
  c.option("--out", s.out, "report path (stdout when empty)");
  c.option("--format", s.format, "report format")->check(CLI::IsMember({"json", "csv"}));
  c.flag("--timing", s.timing, "include wall-clock timings in the report");
  c.option("--repeats", s.repeats, "runs averaged for random modes")->check(CLI::PositiveNumber);
}

void add_data_flags(Command& c) {
  auto& s = c.s();
  c.option("--embeddings", s.embeddings, "embedding store (.vcre)")->required();
  c.option("--classifier", s.classifier, "text classifier (.vcre)")->required();
  c.option("--manifest", s.manifest, "dataset manifest (JSON)")->required();
}

void add_adapter_flags(Command& c) {
  auto& s = c.s();
  c.option("--shots", s.shots, "training images per class")->check(CLI::NonNegativeNumber);
  c.option("--val-shots", s.val_shots, "validation images per class")->check(CLI::NonNegativeNumber);
  c.option("--alpha", s.alpha, "cache mixing weight (0 disables the cache)")->check(CLI::NonNegativeNumber);
  c.option("--beta", s.beta, "affinity sharpness")->check(CLI::PositiveNumber);
  c.flag("--grid", s.grid, "grid-search alpha and beta on validation data");
  c.option("--alpha-range", s.alpha_range, "grid range for alpha")->expected(2);
  c.option("--beta-range", s.beta_range, "grid range for beta")->expected(2);
  c.option("--grid-steps", s.grid_steps, "grid points per axis")->check(CLI::PositiveNumber);
  c.option("--epochs", s.epochs, "cache key training epochs (0 keeps the cache training-free)")
      ->check(CLI::NonNegativeNumber);
  c.option("--lr", s.lr, "cache key learning rate")->check(CLI::PositiveNumber);
  c.flag("--refine-keys", s.refine_keys, "build cache keys from refined features");
}

void add_config_flag(Command& c) {
  c.app()->add_option("--config", c.s().config, "JSON file of option values (flags take precedence)");
}

// Config file values fill options that were not given on the command line.
void apply_config(Command& c) {
  const auto& path = c.s().config;
  if (path.empty()) return;
  const json cfg = read_json_file(path);
  if (!cfg.is_object()) throw CLI::ValidationError("--config", path + ": top level must be an object");
  for (const auto& [key, value] : cfg.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    CLI::Option* o = c.app()->get_option_no_throw("--" + name);
    if (o == nullptr || name == "config" || name == "help")
      throw CLI::ValidationError("--config", path + ": unknown key '" + key + "'");
    if (o->count() > 0) continue;
    auto as_string = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_array()) {
      for (const auto& v : value) o->add_result(as_string(v));
    } else {
      o->add_result(as_string(value));
    }
    o->run_callback();
  }
}

void resolve_seed(Command& c) {
  if (c.app()->get_option("--seed")->count() > 0) return;
  if (!c.s().config.empty() && read_json_file(c.s().config).contains("seed")) return;
  if (const char* env = std::getenv("VCR_SEED")) {
    const std::string text(env);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
      throw CLI::ValidationError("VCR_SEED", "expected an unsigned integer, got '" + text + "'");
    c.s().seed = v;
  }
}

EvalConfig eval_config(const Settings& s) {
  EvalConfig cfg;
  cfg.n = s.n;
  cfg.m = s.m;
  cfg.criterion = parse_criterion(s.criterion);
  cfg.weighting = parse_weighting(s.weighting);
  cfg.adapter.alpha = s.alpha;
  cfg.adapter.beta = s.beta;
  cfg.adapter.grid = s.grid;
  cfg.adapter.alpha_range = {s.alpha_range.at(0), s.alpha_range.at(1)};
  cfg.adapter.beta_range = {s.beta_range.at(0), s.beta_range.at(1)};
  cfg.adapter.steps = s.grid_steps;
  cfg.refine_cache_keys = s.refine_keys;
  cfg.train_epochs = s.epochs;
  cfg.lr = s.lr;
  cfg.repeats = s.repeats;
  cfg.seed = s.seed;
  cfg.workers = s.workers;
  cfg.validate();
  return cfg;
}

std::string format_scale(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string text(buf, ptr);
  if (text.find_first_of(".e") == std::string::npos) text += ".0";
  return text;
}

// Loaders that name the failing file in their errors.
template <typename Fn>
auto with_path(const std::string& path, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    const std::string what = e.what();
    if (what.find(path) != std::string::npos) throw;
    throw std::runtime_error(path + ": " + what);
  }
}

std::shared_ptr<const EmbeddingStore> load_store(const std::string& path) {
  return with_path(path, [&] { return std::make_shared<const EmbeddingStore>(load_embedding_file(path)); });
}

TextClassifier load_classifier(const std::string& path) {
  return with_path(path, [&] { return load_text_classifier(path); });
}

DatasetManifest load_dataset(const std::string& path, const TextClassifier& clf) {
  DatasetManifest d = with_path(path, [&] { return load_dataset_manifest(path); });
  if (d.classes != clf.class_names())
    throw InvalidArgument(path + ": class list does not match the classifier's");
  return d;
}

void require_dims(const EmbeddingStore& store, const TextClassifier& clf, const Settings& s) {
  if (store.dim() != clf.dim())
    throw InvalidArgument(s.embeddings + ": dimension " + std::to_string(store.dim()) + " does not match classifier " +
                          s.classifier + " (" + std::to_string(clf.dim()) + ")");
}

void emit(const Settings& s, const std::string& text, std::ostream& out) {
  if (s.out.empty()) {
    out << text;
  } else {
    write_file_atomic(s.out, text);
  }
}

void emit_reports(Command& c, const std::vector<EvalReport>& reports, std::ostream& out) {
  const auto& s = c.s();
  if (s.format == "csv") {
    emit(s, reports_to_csv(reports, s.timing), out);
    return;
  }
  json j{{"config", c.echo()}, {"reports", json::array()}};
  for (const auto& r : reports) j["reports"].push_back(report_to_json(r, s.timing));
  emit(s, j.dump(2) + "\n", out);
}

std::vector<std::string> full_mode_matrix(int n) {
  auto modes = default_synthetic_modes(n);
  for (const char* k : {"n:5", "n:10", "n:20"}) modes.emplace_back(k);
  return modes;
}

// ---- subcommands --------------------------------------------------------------------------

int cmd_scales(Command& c, std::ostream& out) {
  const ScaleSet set = build_scale_set(c.s().n);
  for (std::size_t i = 0; i < set.scales.size(); ++i) out << (i ? " " : "") << format_scale(set.scales[i]);
  out << "\n";
  return 0;
}

int cmd_decompose(Command& c, std::ostream& out) {
  auto& s = c.s();
  const DatasetManifest dataset = with_path(s.manifest, [&] { return load_dataset_manifest(s.manifest); });
  EvalConfig cfg = eval_config(s);
  std::vector<ModeSpec> specs;
  for (const auto& name : s.modes) specs.push_back(parse_mode(name, cfg));

  std::vector<std::vector<ViewKey>> views(dataset.items.size());
  parallel_for(dataset.items.size(), s.workers, [&](std::size_t i) {
    const auto& it = dataset.items[i];
    views[i] = required_views(it.id, it.width, it.height, specs, cfg);
  });

  json images = json::array();
  json rows = json::array();
  Index row = 0;
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    const auto& it = dataset.items[i];
    images.push_back({{"id", it.id}, {"width", it.width}, {"height", it.height}});
    for (const auto& v : views[i]) {
      json r{{"image", it.id}, {"crop", view_to_json(v)}, {"row", row++}};
      if (v.flipped) r["flip"] = true;
      rows.push_back(std::move(r));
    }
  }
  const json j{{"config", c.echo()}, {"images", std::move(images)}, {"rows", std::move(rows)}};
  emit(s, j.dump(2) + "\n", out);
  return 0;
}

int cmd_refine(Command& c, std::ostream&) {
  auto& s = c.s();
  const auto store = load_store(s.embeddings);
  const TextClassifier clf = load_classifier(s.classifier);
  require_dims(*store, clf, s);
  const EvalConfig cfg = eval_config(s);
  const StoreBackend backend(store);
  const ScaleSet scales = build_scale_set(cfg.n);

  const auto& images = store->images();
  std::vector<RefinedFeature> refined(images.size());
  std::vector<FeatureVector> global(images.size());
  parallel_for(images.size(), cfg.workers, [&](std::size_t i) {
    global[i] = encode_view(backend, images[i].id, ViewKey::global());
    refined[i] =
        refine_image(backend, clf, images[i].id, scales, cfg.m, cfg.criterion, cfg.weighting, cfg.seed);
  });

  EmbeddingStore::Builder builder(store->dim());
  for (std::size_t i = 0; i < images.size(); ++i) {
    builder.add_image(images[i]);
    builder.add_row(images[i].id, ViewKey::global(), global[i]);
    builder.add_row(images[i].id, ViewKey::refined(), refined[i].vector, {{"selection", selection_to_json(refined[i])}});
  }
  builder.set_meta("config", c.echo());
  write_embedding_file(std::move(builder).build(), s.out);
  return 0;
}

int cmd_eval(Command& c, std::ostream& out, int shots, const std::vector<std::string>& default_modes) {
  auto& s = c.s();
  const auto store = load_store(s.embeddings);
  const TextClassifier clf = load_classifier(s.classifier);
  require_dims(*store, clf, s);
  const DatasetManifest dataset = load_dataset(s.manifest, clf);
  const EvalConfig cfg = eval_config(s);
  const Episode episode = shots > 0 ? build_fewshot_episode(dataset, shots, cfg.seed, s.val_shots)
                                    : test_only_episode(dataset);
  const StoreBackend backend(store);
  const auto modes = s.modes.empty() ? default_modes : s.modes;
  emit_reports(c, run_ablation(episode, backend, clf, modes, cfg), out);
  return 0;
}

int cmd_domain(Command& c, std::ostream& out) {
  auto& s = c.s();
  if (!s.target_embeddings.empty() && s.target_embeddings.size() != s.targets.size())
    throw CLI::ValidationError("--target-embeddings", "give one per --target or none");
  const auto store = load_store(s.embeddings);
  const TextClassifier clf = load_classifier(s.classifier);
  require_dims(*store, clf, s);
  const DatasetManifest dataset = load_dataset(s.manifest, clf);
  const EvalConfig cfg = eval_config(s);
  const Episode source = build_fewshot_episode(dataset, s.shots, cfg.seed, s.val_shots);
  const StoreBackend source_backend(store);

  std::vector<std::unique_ptr<StoreBackend>> backends;
  std::vector<DomainTarget> targets;
  for (std::size_t t = 0; t < s.targets.size(); ++t) {
    const auto& path = s.targets[t];
    const DatasetManifest target = with_path(path, [&] { return load_dataset_manifest(path); });
    const EncoderBackend* backend = &source_backend;
    if (!s.target_embeddings.empty()) {
      backends.push_back(std::make_unique<StoreBackend>(load_store(s.target_embeddings[t])));
      backend = backends.back().get();
    }
    const Episode test = test_only_episode(target);
    targets.push_back({fs::path(path).stem().string(), target.classes, test.test, backend});
  }
  emit_reports(c, run_domain_generalization(source, source_backend, clf, targets, cfg), out);
  return 0;
}

int cmd_synth(Command& c, std::ostream& out) {
  auto& s = c.s();
  if (s.preset != "default") throw CLI::ValidationError("--preset", "unknown preset '" + s.preset + "'");
  SyntheticConfig cfg;
  cfg.classes = s.classes;
  cfg.images = s.images;
  cfg.distractors = s.distractors;
  cfg.noise_amp = s.noise;
  cfg.dim = s.dim;
  cfg.tau = s.tau;
  cfg.n = s.n;
  cfg.m = s.m;
  cfg.seed = s.seed;
  cfg.seeds = s.seeds;
  cfg.repeats = s.repeats;
  cfg.workers = s.workers;
  cfg.modes = s.modes;
  const SyntheticReport report = synthetic_benchmark(cfg);
  if (s.format == "csv") {
    emit(s, synthetic_report_to_csv(report, s.timing), out);
  } else {
    json j = synthetic_report_to_json(report, s.timing);
    j["config"]["preset"] = s.preset;
    emit(s, j.dump(2) + "\n", out);
  }
  return 0;
}

int cmd_validate(Command& c, std::ostream& out) {
  auto& s = c.s();
  const fs::path path = s.path;
  std::string kind;
  Index rows = 0;
  Index dim = 0;
  with_path(s.path, [&] {
    if (!s.manifest.empty()) {
      const EmbeddingStore store = load_exported_embeddings(path, s.manifest);
      require_unit_rows(store.rows(), s.path);
      kind = "embeddings";
      rows = store.count();
      dim = store.dim();
      return 0;
    }
    const fs::path side = sidecar_path(path);
    const json manifest = fs::exists(side) ? read_json_file(side) : json::object();
    if (manifest.contains("tau") && manifest.contains("classes")) {
      const TextClassifier clf = load_text_classifier(path);
      kind = "classifier";
      rows = clf.num_classes();
      dim = clf.dim();
    } else if (manifest.contains("labels") && manifest.contains("num_classes")) {
      const auto cache = load_cache(path).first;
      kind = "cache";
      rows = cache.size();
      dim = cache.dim();
    } else {
      const EmbeddingStore store = load_embedding_file(path);
      require_unit_rows(store.rows(), s.path);
      kind = "embeddings";
      rows = store.count();
      dim = store.dim();
    }
    return 0;
  });
  out << "ok " << kind << " " << s.path << " rows=" << rows << " dim=" << dim << "\n";
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Visual content refinement over precomputed vision-language embeddings", "vcr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "vcr 1.0");

  std::deque<Command> commands;
  auto add = [&](const std::string& name, const std::string& desc) -> Command& {
    return commands.emplace_back(app, name, desc);
  };

  Command& scales = add("scales", "print the decomposing scale set");
  scales.option("--n", scales.s().n, "number of scales")->check(CLI::PositiveNumber);

  Command& decompose = add("decompose", "emit the crop manifest for a dataset manifest");
  decompose.option("--manifest", decompose.s().manifest, "dataset manifest (JSON)")->required();
  add_pipeline_flags(decompose);
  add_seed_flag(decompose);
  add_workers_flag(decompose);
  decompose.s().modes = {"pipeline"};
  decompose.option("--modes", decompose.s().modes, "evaluation modes whose views to include");
  decompose.option("--out", decompose.s().out, "crop manifest path (stdout when empty)");

  Command& refine = add("refine", "write a refined-feature store");
  refine.option("--embeddings", refine.s().embeddings, "multi-scale embedding store (.vcre)")->required();
  refine.option("--classifier", refine.s().classifier, "text classifier (.vcre)")->required();
  add_pipeline_flags(refine);
  add_seed_flag(refine);
  add_workers_flag(refine);
  refine.option("--out", refine.s().out, "output store (.vcre)")->required();

  Command& zeroshot = add("zeroshot", "zero-shot accuracy of stored (refined or global) features");
  Command& fewshot = add("fewshot", "few-shot cache-adapter evaluation");
  Command& ablate = add("ablate", "evaluate a matrix of modes on one episode");
  for (Command* c : {&zeroshot, &fewshot, &ablate}) {
    add_data_flags(*c);
    add_pipeline_flags(*c);
    if (c != &zeroshot) add_adapter_flags(*c);
    add_seed_flag(*c);
    add_workers_flag(*c);
    add_report_flags(*c);
    c->option("--modes", c->s().modes, "evaluation modes");
  }
  ablate.s().shots = 0;
  ablate.app()->get_option("--shots")->default_str("0");

  Command& domain = add("domain", "train on a source episode and evaluate on target sets");
  add_data_flags(domain);
  add_pipeline_flags(domain);
  add_adapter_flags(domain);
  add_seed_flag(domain);
  add_workers_flag(domain);
  add_report_flags(domain);
  domain.option("--target", domain.s().targets, "target dataset manifest (repeatable)")->required();
  domain.option("--target-embeddings", domain.s().target_embeddings, "embedding store per target (repeatable)");

  Command& synth = add("synth", "planted-scene benchmark");
  {
    auto& s = synth.s();
    s.n = 5;
    s.m = 20;
    synth.option("--preset", s.preset, "benchmark preset")->check(CLI::IsMember({"default"}));
    synth.option("--classes", s.classes, "number of classes")->check(CLI::PositiveNumber);
    synth.option("--images", s.images, "scenes per seed")->check(CLI::PositiveNumber);
    synth.option("--distractors", s.distractors, "two-class distractors per scene")->check(CLI::NonNegativeNumber);
    synth.option("--noise", s.noise, "embedding noise amplitude")->check(CLI::NonNegativeNumber);
    synth.option("--dim", s.dim, "embedding dimension")->check(CLI::PositiveNumber);
    synth.option("--tau", s.tau, "classifier temperature")->check(CLI::PositiveNumber);
    synth.option("--n", s.n, "number of scales")->check(CLI::PositiveNumber);
    synth.option("--m", s.m, "views per local scale")->check(CLI::PositiveNumber);
    synth.option("--seeds", s.seeds, "number of seeded worlds")->check(CLI::PositiveNumber);
    add_seed_flag(synth);
    add_workers_flag(synth);
    add_report_flags(synth);
    synth.option("--modes", s.modes, "evaluation modes (default: the full matrix)");
  }

  Command& validate = add("validate", "check a .vcre file and its manifest");
  validate.option("path", validate.s().path, ".vcre file")->required();
  validate.option("--manifest", validate.s().manifest, "crop manifest the rows were exported from");

  for (auto& c : commands) add_config_flag(c);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  Command* chosen = nullptr;
  try {
    app.parse(reversed);
    for (auto& c : commands)
      if (c.app()->parsed()) chosen = &c;
    apply_config(*chosen);
    if (chosen->app()->get_option_no_throw("--seed")) resolve_seed(*chosen);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  } catch (const std::exception& e) {
    err << "vcr: " << e.what() << "\n";
    return 2;
  }

  const std::string name = chosen->app()->get_name();
  try {
    if (name == "scales") return cmd_scales(*chosen, out);
    if (name == "decompose") return cmd_decompose(*chosen, out);
    if (name == "refine") return cmd_refine(*chosen, out);
    if (name == "zeroshot") return cmd_eval(*chosen, out, 0, {"stored"});
    if (name == "fewshot") return cmd_eval(*chosen, out, chosen->s().shots, {"pipeline"});
    if (name == "ablate") return cmd_eval(*chosen, out, chosen->s().shots, full_mode_matrix(chosen->s().n));
    if (name == "domain") return cmd_domain(*chosen, out);
    if (name == "synth") return cmd_synth(*chosen, out);
    if (name == "validate") return cmd_validate(*chosen, out);
  } catch (const CLI::ParseError& e) {
    err << "vcr " << name << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "vcr " << name << ": " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace vcr
