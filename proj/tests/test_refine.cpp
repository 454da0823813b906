#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracle.hpp"
#include "vcr/refine.hpp"
#include "vcr/rng.hpp"

using namespace vcr;

namespace {

TextClassifier axis_classifier(int classes, int dim, double tau) {
  FeatureMatrix w = FeatureMatrix::Zero(classes, dim);
  std::vector<std::string> names;
  for (int c = 0; c < classes; ++c) {
    w(c, c) = 1.0f;
    names.push_back("c" + std::to_string(c));
  }
  return build_text_classifier(names, w, tau);
}

Logits random_logits(CounterRng& rng, int size) {
  Logits z(size);
  for (int i = 0; i < size; ++i) z[i] = 10.0 * rng.normal();
  return z;
}

FeatureVector random_unit(CounterRng& rng, int dim) {
  Vector<double> v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v.normalized().cast<float>();
}

}  // namespace

TEST_CASE("zero-shot logits are cosine over temperature") {
  const auto clf = axis_classifier(2, 3, 0.01);
  FeatureVector f(3);
  f << 1, 0, 0;
  const Logits z = zero_shot_logits(f, clf);
  CHECK(z[0] == doctest::Approx(100.0));
  CHECK(z[1] == doctest::Approx(0.0));

  f << 0.6f, 0.8f, 0;
  const Logits y = zero_shot_logits(f, clf);
  CHECK(y[0] == doctest::Approx(60.0));
  CHECK(y[1] == doctest::Approx(80.0));

  const auto half = axis_classifier(2, 3, 0.5);
  const auto unit = axis_classifier(2, 3, 1.0);
  CHECK((zero_shot_logits(f, half) - 2.0 * zero_shot_logits(f, unit)).norm() < 1e-12);

  FeatureMatrix rows(2, 3);
  rows << 1, 0, 0, 0.6f, 0.8f, 0;
  const Eigen::MatrixXd batch = zero_shot_logits(rows, clf);
  CHECK(batch(0, 0) == z[0]);
  CHECK(batch(1, 1) == y[1]);

  CHECK_THROWS_AS(zero_shot_logits(FeatureVector(FeatureVector::Ones(4)), clf), InvalidArgument);
}

TEST_CASE("zero-shot logits match a naive cosine") {
  CounterRng rng(10);
  for (int t = 0; t < 200; ++t) {
    const int classes = 2 + static_cast<int>(rng.bounded(8));
    const int dim = classes + 1 + static_cast<int>(rng.bounded(20));
    const auto clf = build_text_classifier(axis_classifier(classes, dim, 1.0).class_names(),
                                           make_prototypes(classes, dim, rng.next()), 0.01 + rng.uniform());
    const FeatureVector f = random_unit(rng, dim);
    std::vector<std::vector<double>> T;
    for (int c = 0; c < classes; ++c) T.push_back(oracle::to_vec(clf.weights().row(c).transpose().eval()));
    const auto naive = oracle::logits(oracle::to_vec(f), T, clf.tau());
    const Logits z = zero_shot_logits(f, clf);
    for (int c = 0; c < classes; ++c) CHECK(z[c] * clf.tau() == doctest::Approx(naive[c] * clf.tau()).epsilon(1e-5));
  }
}

TEST_CASE("margin examples") {
  Logits z(3);
  z << 5, 2, 1;
  CHECK(prediction_margin(z) == 3.0);
  z << 2, 2, 1;
  CHECK(prediction_margin(z) == 0.0);
  Logits one(1);
  one << 1;
  CHECK_THROWS_AS(prediction_margin(one), InvalidArgument);
}

TEST_CASE("margin is shift-invariant and scales linearly") {
  CounterRng rng(11);
  for (int t = 0; t < 500; ++t) {
    const Logits z = random_logits(rng, 2 + static_cast<int>(rng.bounded(20)));
    const double c = 100.0 * rng.normal();
    const double a = 0.01 + 10.0 * rng.uniform();
    const double m = prediction_margin(z);
    CHECK(m >= 0.0);
    CHECK(prediction_margin((z.array() + c).matrix()) == doctest::Approx(m).epsilon(1e-9).scale(std::abs(c)));
    CHECK(prediction_margin((a * z).eval()) == doctest::Approx(a * m).epsilon(1e-12));
  }
}

TEST_CASE("temperature rescaling leaves the argmax unchanged") {
  CounterRng rng(12);
  for (int t = 0; t < 200; ++t) {
    const int classes = 2 + static_cast<int>(rng.bounded(10));
    const int dim = classes + 3;
    FeatureMatrix w(classes, dim);
    for (int c = 0; c < classes; ++c) w.row(c) = random_unit(rng, dim).transpose();
    const auto a = build_text_classifier(axis_classifier(classes, dim, 1.0).class_names(), w, 0.01);
    const auto b = build_text_classifier(a.class_names(), w, 0.01 + rng.uniform());
    const FeatureVector f = random_unit(rng, dim);
    CHECK(argmax(zero_shot_logits(f, a)) == argmax(zero_shot_logits(f, b)));
  }
}

TEST_CASE("entropy matches a naive softmax and stays finite at large logits") {
  CounterRng rng(13);
  for (int t = 0; t < 300; ++t) {
    const Logits z = random_logits(rng, 2 + static_cast<int>(rng.bounded(30)));
    const std::vector<double> zv(z.data(), z.data() + z.size());
    CHECK(softmax_entropy(z) == doctest::Approx(oracle::entropy(zv)).epsilon(1e-9));
  }
  const Logits flat = Logits::Constant(1000, 7.0);
  CHECK(softmax_entropy(flat) == doctest::Approx(std::log(1000.0)));
  Logits spike = Logits::Zero(1000);
  spike[3] = 1e6;
  CHECK(softmax_entropy(spike) < 1e-12);
  Logits big(2);
  big << 1e300, 1e300;
  CHECK(softmax_entropy(big) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("with many classes, minimum entropy and maximum margin can pick different views") {
  // View 0: a clear winner over a flat tail of 999 classes. View 1: two strong rivals and
  // an almost empty tail. Entropy rewards the concentrated view 1, margin the confident view 0.
  Logits a = Logits::Zero(1000);
  a[0] = 6.0;
  Logits b = Logits::Constant(1000, -30.0);
  b[0] = 10.0;
  b[1] = 9.0;
  const std::vector<Logits> views{a, b};
  CHECK(select_view(views, Criterion::MaxMargin, 0).index == 0);
  CHECK(select_view(views, Criterion::MinEntropy, 0).index == 1);
}

TEST_CASE("select_view examples") {
  Logits a(3), b(3), c(3);
  a << 1, 0, 0;
  b << 5, 0, 0;
  c << 3, 3, 0;
  const std::vector<Logits> views{a, b, c};
  const ViewChoice mx = select_view(views, Criterion::MaxMargin, 0);
  CHECK(mx.index == 1);
  CHECK(mx.score == 5.0);
  const ViewChoice mn = select_view(views, Criterion::MinMargin, 0);
  CHECK(mn.index == 2);
  CHECK(mn.score == 0.0);
  CHECK(select_view(views, Criterion::MinEntropy, 0).index == 1);

  const std::vector<Logits> tied{a, b, b, c};
  CHECK(select_view(tied, Criterion::MaxMargin, 0).index == 1);
  const std::vector<Logits> tied_low{c, a, c};
  CHECK(select_view(tied_low, Criterion::MinMargin, 0).index == 0);

  CHECK_THROWS_AS(select_view(std::span<const Logits>{}, Criterion::MaxMargin, 0), InvalidArgument);
}

TEST_CASE("random selection is seeded and roughly uniform") {
  const std::vector<Logits> views(4, Logits::Zero(3));
  std::vector<int> counts(4, 0);
  for (std::uint64_t s = 0; s < 4000; ++s) {
    const Index k = select_view(views, Criterion::Random, s).index;
    CHECK(k == select_view(views, Criterion::Random, s).index);
    ++counts[static_cast<std::size_t>(k)];
  }
  for (int c : counts) CHECK(std::abs(c - 1000) < 120);
}

TEST_CASE("merge examples") {
  FeatureVector x(2), y(2);
  x << 1, 0;
  y << 0, 1;
  const std::vector<ScaledFeature> two{{0.5, x}, {1.0, y}};

  const RefinedFeature sw = merge_features(two, Weighting::ScaleWeighted);
  Vector<double> expect_sw(2);
  expect_sw << 0.5, 1.0;
  expect_sw.normalize();
  CHECK(sw.vector[0] == doctest::Approx(expect_sw[0]));
  CHECK(sw.vector[1] == doctest::Approx(expect_sw[1]));

  const RefinedFeature u = merge_features(two, Weighting::Uniform);
  CHECK(u.vector[0] == doctest::Approx(std::sqrt(0.5)));
  CHECK(u.vector[1] == doctest::Approx(std::sqrt(0.5)));

  const RefinedFeature g = merge_features(two, Weighting::GlobalOnly);
  CHECK(g.vector == y);

  FeatureVector odd(2);
  odd << 0.6f, 0.8000001f;
  const std::vector<ScaledFeature> single{{1.0, odd}};
  CHECK(merge_features(single, Weighting::ScaleWeighted).vector == odd);
  CHECK(merge_features(single, Weighting::Uniform).vector == odd);

  CHECK_THROWS_AS(merge_features(std::span<const ScaledFeature>{}, Weighting::Uniform), InvalidArgument);
  const std::vector<ScaledFeature> opposite{{0.5, x}, {1.0, (-x).eval()}};
  CHECK_THROWS_AS(merge_features(opposite, Weighting::Uniform), InvalidArgument);
  const std::vector<ScaledFeature> repeated{{1.0, x}, {1.0, y}};
  CHECK_THROWS_AS(merge_features(repeated, Weighting::Uniform), InvalidArgument);
  const std::vector<ScaledFeature> local_only{{0.5, x}};
  CHECK_THROWS_AS(merge_features(local_only, Weighting::GlobalOnly), InvalidArgument);
}

TEST_CASE("merge stays in the convex hull and respects the norm bounds") {
  CounterRng rng(14);
  for (int t = 0; t < 300; ++t) {
    const int dim = 2 + static_cast<int>(rng.bounded(30));
    const int count = 2 + static_cast<int>(rng.bounded(9));
    const Vector<double> center = random_unit(rng, dim).cast<double>();
    std::vector<ScaledFeature> in;
    for (int i = 0; i < count; ++i) {
      // Features within one hemisphere keep the combination away from zero.
      Vector<double> f = center + 0.5 * random_unit(rng, dim).cast<double>();
      in.push_back({(i + 1.0) / count, f.normalized().cast<float>()});
    }
    for (Weighting w : {Weighting::ScaleWeighted, Weighting::Uniform}) {
      Vector<double> combo = Vector<double>::Zero(dim);
      double total = 0.0;
      for (const auto& e : in) {
        const double weight = w == Weighting::ScaleWeighted ? e.scale : 1.0;
        combo += weight * e.feature.cast<double>();
        total += weight;
      }
      combo /= total;
      const double norm = combo.norm();
      CHECK(norm <= 1.0 + 1e-6);
      double min_cos = 1.0;
      for (const auto& e : in) min_cos = std::min(min_cos, combo.normalized().dot(e.feature.cast<double>()));
      CHECK(norm >= min_cos - 1e-6);

      const FeatureVector merged = merge_features(in, w).vector;
      CHECK(is_unit_norm(merged));
      // merged·norm is the convex combination: coordinates lie within the inputs' range.
      for (int i = 0; i < dim; ++i) {
        double lo = 1e9, hi = -1e9;
        for (const auto& e : in) {
          lo = std::min(lo, static_cast<double>(e.feature[i]));
          hi = std::max(hi, static_cast<double>(e.feature[i]));
        }
        const double coord = merged[i] * norm;
        CHECK(coord >= lo - 1e-6);
        CHECK(coord <= hi + 1e-6);
      }
    }
  }
}

TEST_CASE("refine_image equals the brute-force composition on random planted scenes") {
  for (std::uint64_t k = 0; k < 100; ++k) {
    const auto inst = oracle::random_instance(k, 4, 16);
    const auto& backend = *inst.world.backend;
    const auto& clf = inst.world.classifier;
    const ScaleSet scales = build_scale_set(5);
    for (auto [crit, pick] : {std::pair{Criterion::MaxMargin, oracle::Pick::Max},
                              std::pair{Criterion::MinMargin, oracle::Pick::Min},
                              std::pair{Criterion::MinEntropy, oracle::Pick::Entropy}}) {
      for (bool sw : {true, false}) {
        const auto ours = refine_image(backend, clf, inst.image_id, scales, 8, crit,
                                       sw ? Weighting::ScaleWeighted : Weighting::Uniform, inst.seed);
        const auto ref = oracle::refine(backend, clf, inst.image_id, 5, 8, pick, sw, inst.seed);
        CHECK(oracle::cosine_distance(ref, ours.vector) <= 1e-6);
        CHECK(is_unit_norm(ours.vector));
        CHECK(ours.selection.per_scale.size() == 4);
      }
    }
  }
}

TEST_CASE("n = 1 and global_only return the global feature bit for bit") {
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto inst = oracle::random_instance(k, 4, 16);
    const auto& backend = *inst.world.backend;
    const FeatureVector global = encode_view(backend, inst.image_id, ViewKey::global());
    for (Criterion c : {Criterion::MaxMargin, Criterion::MinMargin, Criterion::MinEntropy, Criterion::Random}) {
      for (Weighting w : {Weighting::ScaleWeighted, Weighting::Uniform, Weighting::GlobalOnly}) {
        const auto one = refine_image(backend, inst.world.classifier, inst.image_id, build_scale_set(1), 8, c, w, k);
        CHECK(one.vector == global);
        CHECK(one.selection.per_scale.empty());
      }
      const auto g = refine_image(backend, inst.world.classifier, inst.image_id, build_scale_set(5), 8, c,
                                  Weighting::GlobalOnly, k);
      CHECK(g.vector == global);
    }
  }
}

TEST_CASE("selection json records each local scale") {
  const auto inst = oracle::random_instance(3, 4, 16);
  const auto r = refine_image(*inst.world.backend, inst.world.classifier, inst.image_id, build_scale_set(3), 4,
                              Criterion::MaxMargin, Weighting::ScaleWeighted, inst.seed);
  const auto j = selection_to_json(r);
  CHECK(j["criterion"] == "max_margin");
  CHECK(j["weighting"] == "scale_weighted");
  REQUIRE(j["per_scale"].size() == 2);
  CHECK(j["per_scale"][0]["scale"].get<double>() == doctest::Approx(1.0 / 3));
  CHECK(j["per_scale"][0]["crop"].size() == 4);
}

TEST_CASE("criterion and weighting names round-trip") {
  for (Criterion c : {Criterion::MaxMargin, Criterion::MinMargin, Criterion::MinEntropy, Criterion::Random})
    CHECK(parse_criterion(to_string(c)) == c);
  CHECK(parse_criterion("max-margin") == Criterion::MaxMargin);
  for (Weighting w : {Weighting::ScaleWeighted, Weighting::Uniform, Weighting::GlobalOnly})
    CHECK(parse_weighting(to_string(w)) == w);
  CHECK(parse_weighting("scale") == Weighting::ScaleWeighted);
  CHECK(parse_weighting("global") == Weighting::GlobalOnly);
  CHECK_THROWS_AS(parse_criterion("best"), InvalidArgument);
  CHECK_THROWS_AS(parse_weighting("median"), InvalidArgument);
}

TEST_CASE("a crop on the object is closer to its prototype than the whole cluttered image") {
  SyntheticScene scene;
  scene.image_id = "s";
  scene.width = scene.height = 100;
  scene.object_class = 0;
  scene.object = {25, 25, 20};
  scene.distractors.push_back({{75, 75, 20}, 1, 2});
  const auto clf = build_text_classifier({"a", "b", "c"}, make_prototypes(3, 8, 5), 0.01);
  const FeatureVector p = clf.weights().row(0).transpose();
  const FeatureVector crop = synthetic_encode(scene, {5, 5, 40, 40}, clf, 0.0);
  const FeatureVector whole = synthetic_encode(scene, {0, 0, 100, 100}, clf, 0.0);
  CHECK(cosine(crop, p) > cosine(whole, p));
  CHECK(prediction_margin(zero_shot_logits(crop, clf)) > prediction_margin(zero_shot_logits(whole, clf)));
}
