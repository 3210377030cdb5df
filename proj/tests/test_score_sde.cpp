#include "gradcheck.hpp"

#include "mmscore/score_sde.hpp"

#include <doctest.h>

using namespace mmscore;

TEST_CASE("marginal parameters of the default schedule") {
  VPSDESchedule s;
  const auto p1 = marginal_params(s, 1.0);
  CHECK(p1.mean_coeff == doctest::Approx(0.2794).epsilon(1e-3));
  CHECK(p1.std == doctest::Approx(0.9602).epsilon(1e-3));
  const auto p0 = marginal_params(s, 0.0);
  CHECK(p0.mean_coeff == 1.0);
  CHECK(p0.std == 0.0);
  for (double t : {0.1, 0.4, 0.9}) {
    const auto p = marginal_params(s, t);
    CHECK(p.mean_coeff * p.mean_coeff + p.std * p.std == doctest::Approx(1.0));
  }
}

TEST_CASE("schedule validation") {
  VPSDESchedule s;
  s.beta_max = 0.05;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = VPSDESchedule{};
  s.steps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("perturb uses the kernel and returns -noise / std") {
  VPSDESchedule s;
  const Matrix z0 = Matrix::Ones(2, 3);
  const Matrix noise = Matrix::Constant(2, 3, 0.5);
  const auto p = perturb(s, z0, 0.5, noise);
  const auto m = marginal_params(s, 0.5);
  CHECK(p.z_t(0, 0) == doctest::Approx(m.mean_coeff + m.std * 0.5));
  CHECK(p.target_score(1, 2) == doctest::Approx(-0.5 / m.std));
  CHECK_THROWS_AS(perturb(s, z0, 1.5, noise), DomainError);
}

TEST_CASE("analytic gaussian score of an isotropic prior") {
  VPSDESchedule s;
  AnalyticGaussianScore sc(Matrix::Identity(2, 2), s);
  const Matrix z = Matrix::Constant(1, 2, 2.0);
  // a^2 + s^2 = 1, so the score is -z at every time.
  CHECK(sc.score(z, 0.3, nullptr)(0, 1) == doctest::Approx(-2.0));
}

TEST_CASE("DSM gradients match central differences") {
  CHECK(gradcheck::score(50, 5) < 1e-3);
}

TEST_CASE("time proposal integrates to one and keeps the uniform objective") {
  VPSDESchedule s;
  TimeProposal q(s, 1e-3, 512);
  double mass = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double t = 1e-3 + (1.0 - 1e-3) * (i + 0.5) / n;
    mass += q.density(t) * (1.0 - 1e-3) / n;
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  Rng rng = make_rng(1);
  // E_q[w] = 1 for weights uniform / q.
  const DsmDraw d = draw_dsm(q, 40000, 1, rng);
  CHECK(d.weight.mean() == doctest::Approx(1.0).epsilon(0.02));
  CHECK(d.t.minCoeff() >= 1e-3);
  CHECK(d.t.maxCoeff() <= 1.0);
}

TEST_CASE("normalizer inverts its standardization") {
  Rng rng = make_rng(2);
  Matrix z = normal_matrix(100, 3, rng) * 3.0;
  z.col(1).array() += 5.0;
  const auto n = LatentNormalizer::fit(z);
  const Matrix a = n.apply(z);
  CHECK(std::abs(a.col(1).mean()) < 1e-6);
  CHECK((n.invert(a) - z).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(LatentNormalizer::identity(3).is_identity());
}

TEST_CASE("score checkpoint round trip") {
  ScoreNetSpec spec;
  spec.latent_dim = 3;
  spec.hidden = {8};
  ScoreNetwork net(spec, VPSDESchedule{}, 1);
  round_to_f32(net.net());
  Checkpoint ck;
  save_score(ck, net, LatentLayout({1, 2}), LatentNormalizer::identity(3));
  const LoadedScore back = load_score(Checkpoint::decode(ck.encode()));
  CHECK(back.layout == LatentLayout({1, 2}));
  const Matrix z = Matrix::Ones(2, 3);
  CHECK(back.net.score(z, 0.4, nullptr) == net.score(z, 0.4, nullptr));
}

TEST_CASE("presence streams drop about the requested fraction") {
  const auto p = make_presence_stream(10000, 3, 0.2, 4);
  CHECK(p.size() == 10000);
  std::size_t missing = 0;
  for (const auto& m : p)
    for (std::size_t k = 0; k < 3; ++k) missing += m.observed(k) ? 0 : 1;
  CHECK(static_cast<double>(missing) / 30000.0 == doctest::Approx(0.2).epsilon(0.05));
}

TEST_CASE("score training reduces the held-out loss") {
  Rng rng = make_rng(3);
  const Matrix z = normal_matrix(2000, 2, rng);
  ScoreNetSpec spec;
  spec.latent_dim = 2;
  spec.hidden = {32, 32};
  ScoreNetwork net(spec, VPSDESchedule{}, 2);
  DSMConfig cfg;
  cfg.epochs = 8;
  cfg.learning_rate = 1e-3;
  const auto r = train_score(net, z, LatentLayout({1, 1}), cfg);
  CHECK(r.history.size() == 8);
  CHECK(r.history[static_cast<std::size_t>(r.best_epoch) - 1].heldout_loss < r.history.front().heldout_loss);
}
