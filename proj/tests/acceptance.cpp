// Acceptance run: one PASS/FAIL line per criterion plus a summary. The lines carry the verdict;
// the exit status is 0 whenever every criterion could be evaluated.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>

#include "fixtures.hpp"
#include "oracle.hpp"
#include "vcr/adapter.hpp"
#include "vcr/eval.hpp"
#include "vcr/refine.hpp"
#include "vcr/rng.hpp"

using namespace vcr;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

FeatureVector random_unit(CounterRng& rng, int dim) {
  Vector<double> v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v.normalized().cast<float>();
}

TextClassifier random_classifier(CounterRng& rng, int classes, int dim, double tau) {
  std::vector<std::string> names;
  for (int c = 0; c < classes; ++c) names.push_back("c" + std::to_string(c));
  return build_text_classifier(names, make_prototypes(classes, dim, rng.next()), tau);
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

Outcome pipeline_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    const auto inst = oracle::random_instance(k, 4, 16);
    for (auto [crit, pick] : {std::pair{Criterion::MaxMargin, oracle::Pick::Max},
                              std::pair{Criterion::MinMargin, oracle::Pick::Min},
                              std::pair{Criterion::MinEntropy, oracle::Pick::Entropy}}) {
      for (bool sw : {true, false}) {
        const auto ours = refine_image(*inst.world.backend, inst.world.classifier, inst.image_id, build_scale_set(5),
                                       8, crit, sw ? Weighting::ScaleWeighted : Weighting::Uniform, inst.seed);
        const auto ref = oracle::refine(*inst.world.backend, inst.world.classifier, inst.image_id, 5, 8, pick, sw,
                                        inst.seed);
        worst = std::max(worst, oracle::cosine_distance(ref, ours.vector));
      }
    }
  }
  const double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof buf, "max cosine distance %.3g over 100 instances x 6 pipelines, %.2f s", worst, secs);
  return {worst <= 1e-6 && secs < 10.0, buf};
}

Outcome reduction_law() {
  int checked = 0;
  bool ok = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto w = fixtures::small_world(80, seed);
    for (int shots : {0, 2, 4}) {
      const Episode episode = shots ? build_fewshot_episode(w.dataset, shots, seed, 0) : test_only_episode(w.dataset);
      for (int variant = 0; variant < 2; ++variant) {
        EvalConfig c;
        c.seed = seed;
        c.m = 8;
        c.adapter.alpha = shots ? 1.5 : 0.0;
        c.adapter.grid = shots == 4;
        c.adapter.steps = 3;
        if (variant == 0)
          c.n = 1;
        else
          c.weighting = Weighting::GlobalOnly;
        const std::vector<std::string> modes{"global_baseline", "pipeline"};
        const auto r = run_ablation(episode, *w.world.backend, w.world.classifier, modes, c);
        auto body = [](const EvalReport& rep) {
          auto j = report_to_json(rep);
          j.erase("mode");
          return j.dump();
        };
        ok &= r[0].predictions == r[1].predictions && body(r[0]) == body(r[1]);
        ++checked;
      }
    }
  }
  return {ok, std::to_string(checked) + " runs (n=1 and global_only; zero-shot, cache, grid)"};
}

SyntheticReport default_benchmark(double* seconds) {
  SyntheticConfig c;  // C=8, 500 images, 3 distractors, n=5, m=20, noise 0.1, 10 seeds
  c.workers = 1;
  const auto t0 = Clock::now();
  SyntheticReport r = synthetic_benchmark(c);
  *seconds = seconds_since(t0);
  return r;
}

Outcome criterion_ordering(const SyntheticReport& r, double seconds) {
  const double mm = r.mode("criterion:max_margin").mean;
  const double me = r.mode("criterion:min_entropy").mean;
  const double g = r.mode("global_baseline").mean;
  const double mn = r.mode("criterion:min_margin").mean;
  char buf[200];
  std::snprintf(buf, sizeof buf, "max_margin %.4f > min_entropy %.4f >= global %.4f > min_margin %.4f; gap %.2f pts; %.1f s",
                mm, me, g, mn, 100 * (mm - g), seconds);
  return {mm > me && me >= g && g > mn && mm - g >= 0.05 && seconds < 60.0, buf};
}

Outcome component_ordering(const SyntheticReport& r) {
  const double sw = r.mode("selected_scale_weighted").mean;
  const double u = r.mode("selected_uniform_avg").mean;
  const double rnd = r.mode("random_per_scale_avg").mean;
  const double g = r.mode("global_baseline").mean;
  const double tie = 0.005;
  char buf[200];
  std::snprintf(buf, sizeof buf, "scale_weighted %.4f >= uniform %.4f >= random %.4f >= global %.4f (ties within 0.5 pts)",
                sw, u, rnd, g);
  return {sw >= u - tie && u >= rnd - tie && rnd >= g - tie, buf};
}

Outcome cache_oracle() {
  FeatureVector a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  const std::vector<FeatureVector> keys{a, b};
  const std::vector<int> labels{0, 1};
  const Logits z = cache_logits(a, build_cache(keys, labels, 2), 1.0);
  bool ok = std::abs(z[0] - 1.0) < 1e-6 && std::abs(z[1] - std::exp(-1.0)) < 1e-6;

  CounterRng rng(505);
  int agree = 0;
  for (int t = 0; t < 1000; ++t) {
    const int classes = 2 + static_cast<int>(rng.bounded(4));
    const int dim = 2 + static_cast<int>(rng.bounded(6));
    const int count = classes + static_cast<int>(rng.bounded(8));
    std::vector<FeatureVector> f;
    std::vector<int> l;
    for (int i = 0; i < count; ++i) {
      f.push_back(random_unit(rng, dim));
      l.push_back(static_cast<int>(rng.bounded(static_cast<std::uint64_t>(classes))));
    }
    const FeatureVector q = random_unit(rng, dim);
    std::size_t nearest = 0;
    for (std::size_t j = 1; j < f.size(); ++j)
      if (f[j].cast<double>().dot(q.cast<double>()) > f[nearest].cast<double>().dot(q.cast<double>())) nearest = j;
    agree += argmax(cache_logits(q, build_cache(f, l, classes), 100.0)) == l[nearest];
  }
  ok &= agree == 1000;
  return {ok, "N=2 example [" + std::to_string(z[0]) + ", " + std::to_string(z[1]) + "]; nearest-key agreement " +
                  std::to_string(agree) + "/1000"};
}

Outcome gradient_check() {
  CounterRng rng(606);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int classes = 2 + static_cast<int>(rng.bounded(4));
    const int dim = classes + 1 + static_cast<int>(rng.bounded(5));
    const auto clf = random_classifier(rng, classes, dim, 0.05 + 0.5 * rng.uniform());
    std::vector<FeatureVector> keys, train;
    std::vector<int> key_labels, labels;
    for (int i = 0, n = 2 + static_cast<int>(rng.bounded(6)); i < n; ++i) {
      keys.push_back(random_unit(rng, dim));
      key_labels.push_back(static_cast<int>(rng.bounded(static_cast<std::uint64_t>(classes))));
    }
    for (int i = 0, n = 3 + static_cast<int>(rng.bounded(8)); i < n; ++i) {
      train.push_back(random_unit(rng, dim));
      labels.push_back(static_cast<int>(rng.bounded(static_cast<std::uint64_t>(classes))));
    }
    const CacheModel cache = build_cache(keys, key_labels, classes);
    const double alpha = 0.1 + 2.0 * rng.uniform(), beta = 0.5 + 5.0 * rng.uniform();
    RowMatrix<double> F(static_cast<Index>(train.size()), dim);
    for (std::size_t i = 0; i < train.size(); ++i) F.row(static_cast<Index>(i)) = train[i].cast<double>().transpose();
    const RowMatrix<double> K = cache.keys.cast<double>();
    const RowMatrix<double> g = cache_training_gradient(K, cache, clf, F, labels, alpha, beta);
    RowMatrix<double> num(K.rows(), K.cols());
    const double h = 1e-3;
    for (Index i = 0; i < K.rows(); ++i)
      for (Index j = 0; j < K.cols(); ++j) {
        RowMatrix<double> p = K, m = K;
        p(i, j) += h;
        m(i, j) -= h;
        num(i, j) = (cache_training_loss(p, cache, clf, F, labels, alpha, beta) -
                     cache_training_loss(m, cache, clf, F, labels, alpha, beta)) /
                    (2 * h);
      }
    worst = std::max(worst, (g - num).norm() / std::max(g.norm(), num.norm()));
  }

  // Separable toy set: C=2, d=4, 8 samples, lr 0.1, 10 epochs.
  const auto clf = build_text_classifier({"a", "b"}, make_prototypes(2, 4, 3), 0.5);
  std::vector<FeatureVector> f;
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) {
    Vector<double> v = Vector<double>::Zero(4);
    v[i % 2] = 1.0;
    for (int k = 0; k < 4; ++k) v[k] += 0.2 * rng.normal();
    f.push_back(v.normalized().cast<float>());
    labels.push_back(i % 2);
  }
  FeatureVector k0(4), k1(4);
  k0 << 1, 1, 0.3f, 0;
  k1 << 1, 1, 0, 0.3f;
  const std::vector<FeatureVector> keys{k0.normalized(), k1.normalized()};
  const std::vector<int> key_labels{0, 1};
  std::vector<double> losses;
  train_cache_keys(build_cache(keys, key_labels, 2), clf, f, labels, AdapterConfig{}, 0.1, 10, &losses);
  bool monotone = losses.size() == 11;
  for (std::size_t i = 1; i < losses.size(); ++i) monotone &= losses[i] < losses[i - 1];

  char buf[200];
  std::snprintf(buf, sizeof buf, "max relative error %.3g over 20 configs; loss %.4f -> %.4f over 10 epochs%s", worst,
                losses.front(), losses.back(), monotone ? ", strictly decreasing" : ", NOT monotone");
  return {worst <= 1e-4 && monotone, buf};
}

Outcome determinism_and_format() {
  const auto w = fixtures::small_world(60, 77);
  const Episode episode = build_fewshot_episode(w.dataset, 3, 77, 1);
  std::string reference;
  bool same = true;
  for (int workers : {1, 2, 4, 7}) {
    EvalConfig c;
    c.n = 4;
    c.m = 6;
    c.repeats = 3;
    c.seed = 77;
    c.workers = workers;
    c.adapter.grid = true;
    c.adapter.steps = 3;
    c.train_epochs = 2;
    auto modes = default_synthetic_modes(4);
    modes.push_back("n:2");
    const auto r = run_ablation(episode, *w.world.backend, w.world.classifier, modes, c);
    nlohmann::json all = nlohmann::json::array();
    for (const auto& rep : r) all.push_back(report_to_json(rep));
    const std::string bytes = all.dump() + reports_to_csv(r);
    if (reference.empty()) reference = bytes;
    same &= bytes == reference;
  }
  SyntheticConfig sc;
  sc.images = 50;
  sc.seeds = 2;
  const std::string s1 = synthetic_report_to_json(synthetic_benchmark(sc)).dump();
  sc.workers = 5;
  same &= synthetic_report_to_json(synthetic_benchmark(sc)).dump() == s1;

  CounterRng rng(707);
  FeatureMatrix rows(257, 19);
  for (Index i = 0; i < rows.rows(); ++i) rows.row(i) = random_unit(rng, 19).transpose();
  const auto bytes = encode_vcre(rows);
  const bool round_trip = encode_vcre(decode_vcre(bytes)) == bytes;

  int rejected = 0, tried = 0;
  for (std::size_t pos = 0; pos < 20; ++pos) {
    for (int v = 0; v < 256; ++v) {
      if (v == bytes[pos]) continue;
      auto bad = bytes;
      bad[pos] = static_cast<std::uint8_t>(v);
      ++tried;
      try {
        decode_vcre(bad);
      } catch (const FormatError&) {
        ++rejected;
      }
    }
  }
  return {same && round_trip && rejected == tried,
          std::string("reports identical at workers 1/2/4/7: ") + (same ? "yes" : "no") +
              "; .vcre round trip byte-identical: " + (round_trip ? "yes" : "no") + "; header corruptions rejected " +
              std::to_string(rejected) + "/" + std::to_string(tried)};
}

Outcome invariance_suite() {
  CounterRng rng(808);
  int failures = 0, checks = 0;
  auto expect = [&](bool ok) {
    ++checks;
    failures += !ok;
  };
  for (int t = 0; t < 500; ++t) {
    const int size = 2 + static_cast<int>(rng.bounded(20));
    Logits z(size);
    for (int i = 0; i < size; ++i) z[i] = 10 * rng.normal();
    const double c = 50 * rng.normal(), a = 0.01 + 10 * rng.uniform();
    const double m = prediction_margin(z);
    expect(m >= 0.0);
    expect(std::abs(prediction_margin((z.array() + c).matrix()) - m) <= 1e-9 * (1 + std::abs(c)));
    expect(std::abs(prediction_margin((a * z).eval()) - a * m) <= 1e-9 * a * (1 + m));
  }
  for (int t = 0; t < 200; ++t) {
    const int classes = 2 + static_cast<int>(rng.bounded(8)), dim = classes + 3;
    const auto clf = random_classifier(rng, classes, dim, 0.01);
    const auto hot = build_text_classifier(clf.class_names(), clf.weights(), 0.01 + rng.uniform());
    const FeatureVector f = random_unit(rng, dim);
    expect(argmax(zero_shot_logits(f, clf)) == argmax(zero_shot_logits(f, hot)));
  }
  for (int t = 0; t < 300; ++t) {
    const int dim = 2 + static_cast<int>(rng.bounded(30)), count = 2 + static_cast<int>(rng.bounded(9));
    const Vector<double> center = random_unit(rng, dim).cast<double>();
    std::vector<ScaledFeature> in;
    for (int i = 0; i < count; ++i)
      in.push_back({(i + 1.0) / count, (center + 0.5 * random_unit(rng, dim).cast<double>()).normalized().cast<float>()});
    for (Weighting wt : {Weighting::ScaleWeighted, Weighting::Uniform}) {
      Vector<double> combo = Vector<double>::Zero(dim);
      double total = 0;
      for (const auto& e : in) {
        const double w = wt == Weighting::ScaleWeighted ? e.scale : 1.0;
        combo += w * e.feature.cast<double>();
        total += w;
      }
      combo /= total;
      const FeatureVector merged = merge_features(in, wt).vector;
      expect(combo.norm() <= 1.0 + 1e-9);
      expect(is_unit_norm(merged));
      for (int i = 0; i < dim; ++i) {
        double lo = 1e9, hi = -1e9;
        for (const auto& e : in) {
          lo = std::min(lo, double(e.feature[i]));
          hi = std::max(hi, double(e.feature[i]));
        }
        const double coord = merged[i] * combo.norm();
        expect(coord >= lo - 1e-6 && coord <= hi + 1e-6);
      }
    }
  }
  for (std::uint64_t k = 0; k < 30; ++k) {
    const auto inst = oracle::random_instance(k, 4, 16);
    for (Criterion c : {Criterion::MaxMargin, Criterion::MinEntropy, Criterion::Random})
      expect(is_unit_norm(refine_image(*inst.world.backend, inst.world.classifier, inst.image_id, build_scale_set(4),
                                       5, c, Weighting::Uniform, k)
                              .vector));
    expect(is_unit_norm(encode_view(*inst.world.backend, inst.image_id, ViewKey::global())));
  }
  return {failures == 0, std::to_string(checks - failures) + "/" + std::to_string(checks) +
                             " checks (margin laws, temperature argmax, merge hull and norms, unit norms)"};
}

}  // namespace

int main() {
  int passed = 0;
  bool evaluated = true;
  auto line = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
      evaluated = false;
    }
    passed += o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  line(1, "pipeline oracle equivalence", pipeline_oracle);
  line(2, "reduction law", reduction_law);
  double seconds = 0.0;
  std::optional<SyntheticReport> bench;
  try {
    bench = default_benchmark(&seconds);
  } catch (const std::exception& e) {
    std::printf("benchmark error: %s\n", e.what());
    evaluated = false;
  }
  line(3, "criterion ordering", [&] { return bench ? criterion_ordering(*bench, seconds) : Outcome{false, "no benchmark"}; });
  line(4, "component ordering", [&] { return bench ? component_ordering(*bench) : Outcome{false, "no benchmark"}; });
  line(5, "cache oracle", cache_oracle);
  line(6, "gradient check", gradient_check);
  line(7, "determinism and format", determinism_and_format);
  line(8, "invariance suite", invariance_suite);
  std::printf("%d/8 criteria pass\n", passed);
  return evaluated ? 0 : 1;
}
