#include "gradcheck.hpp"

#include "mmscore/eval.hpp"

#include <doctest.h>

using namespace mmscore;

TEST_CASE("classifier gradients match central differences") {
  CHECK(gradcheck::classifier(50, 11) < 1e-3);
}

TEST_CASE("frechet distance of a set with itself is zero") {
  Rng rng = make_rng(1);
  const Matrix a = normal_matrix(500, 4, rng);
  CHECK(frechet_distance(a, a) < 1e-6);
}

TEST_CASE("frechet distance of shifted unit gaussians is one") {
  Rng rng = make_rng(2);
  const Matrix a = normal_matrix(10000, 1, rng);
  const Matrix b = (normal_matrix(10000, 1, rng).array() + 1.0).matrix();
  CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("frechet distance needs enough rows") {
  CHECK_THROWS(frechet_distance(Matrix::Zero(5, 2), Matrix::Zero(5, 2)));
}

TEST_CASE("attribute F1 hand cases") {
  Matrix p(1, 3), t(1, 3);
  p << 1, 1, 0;
  t << 1, 0, 0;
  CHECK(attribute_f1(p, t) == 2.0 / 3.0);
  CHECK(attribute_f1(Matrix::Zero(1, 3), Matrix::Zero(1, 3)) == 1.0);
  CHECK(attribute_f1(t, t) == 1.0);
}

TEST_CASE("cosine similarity of parallel and opposite vectors") {
  Matrix a(2, 2);
  a << 1, 2, -3, 0.5;
  CHECK(latent_cosine_similarity({a}, {a * 2.0}).average == 1.0);
  CHECK(latent_cosine_similarity({a}, {-a}).average == -1.0);
  Matrix z = a;
  z.row(1).setZero();
  const auto r = latent_cosine_similarity({a}, {z});
  CHECK(r.excluded[0] == 1);
  CHECK(r.per_modality[0] == doctest::Approx(1.0));
}

TEST_CASE("unconditional coherence histogram") {
  const std::vector<std::vector<std::uint32_t>> pred{{0, 1}, {0, 2}, {0, 3}};
  const auto u = unconditional_coherence(pred);
  CHECK(u.samples == 2);
  CHECK(u.all_agree == 0.5);
  CHECK(u.histogram[0] == 0.5);
  CHECK(u.histogram[2] == 0.5);
}

TEST_CASE("mode coverage shares") {
  const auto m = mode_coverage(std::vector<std::uint32_t>{0, 0, 1, 2}, 4);
  CHECK(m.counts == std::vector<std::size_t>{2, 1, 1, 0});
  CHECK(m.min_share == 0.0);
  CHECK(m.max_share == 0.5);
}

TEST_CASE("conditional coherence counts label matches") {
  DenseNet net({1, 1, 2}, {Activation::identity, Activation::identity}, 0);
  std::vector<double> p{1.0, 0.0, 1.0, -1.0, 0.0, 0.0};
  net.set_parameters(p);
  EvalClassifier clf(net, 1.0);
  Matrix x(4, 1);
  x << 1, 2, -1, -3;
  CHECK(conditional_coherence(clf, x, {0, 0, 1, 0}) == 0.75);
}

TEST_CASE("coherence gate") {
  EvalClassifier clf(3, 2, {4}, 1);
  clf.set_heldout_accuracy(0.5);
  CHECK_THROWS_AS(clf.require_gate(), StateError);
  clf.set_heldout_accuracy(0.99);
  CHECK_NOTHROW(clf.require_gate());
}

TEST_CASE("metric report CSV round trip keeps shortest decimals") {
  MetricReport r("abc");
  r.add("coherence/k1", 0.1, 1000, 7);
  r.add("frechet", 1.0 / 3.0, 10, 0);
  const MetricReport back = MetricReport::from_csv(r.to_csv());
  CHECK(back.value("coherence/k1") == 0.1);
  CHECK(back.value("frechet") == 1.0 / 3.0);
  CHECK(back.config_hash() == "abc");
  CHECK(format_double(0.1) == "0.1");
  CHECK_THROWS(r.value("missing"));
}
