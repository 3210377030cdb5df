#include "mmscore/sampler.hpp"

#include <doctest.h>

using namespace mmscore;

TEST_CASE("predictor update follows reverse Euler-Maruyama") {
  VPSDESchedule s;
  const Matrix z = Matrix::Constant(1, 2, 1.0);
  const Matrix sc = Matrix::Constant(1, 2, -0.5);
  const Matrix noise = Matrix::Constant(1, 2, 2.0);
  const double t = 0.5, dt = 0.01, b = s.beta(t);
  const Matrix out = predictor_update(s, z, sc, t, dt, &noise);
  CHECK(out(0, 0) == doctest::Approx(1.0 + (0.5 * b - 0.5 * b) * dt + std::sqrt(b * dt) * 2.0));
  const Matrix quiet = predictor_update(s, z, sc, t, dt, nullptr);
  CHECK(quiet(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("corrector step size from the batch-mean norms") {
  const Matrix z = Matrix::Zero(2, 1);
  Matrix sc(2, 1), noise(2, 1);
  sc << 1.0, 3.0;
  noise << 1.0, 1.0;
  const double r = 0.1;
  const double eta = 2.0 * std::pow(r * 1.0 / 2.0, 2);
  const Matrix out = corrector_update(z, sc, noise, r);
  CHECK(out(1, 0) == doctest::Approx(eta * 3.0 + std::sqrt(2.0 * eta)));
  CHECK(corrector_update(z, Matrix::Zero(2, 1), noise, r) == z);
}

TEST_CASE("sampler config validation") {
  SamplerConfig c;
  c.corrector_steps = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SamplerConfig{};
  c.snr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

struct Fixture {
  VPSDESchedule sched;
  LatentLayout layout{{1, 2}};
  AnalyticGaussianScore score{Matrix::Identity(3, 3), VPSDESchedule{}};
};

TEST_CASE("observed coordinates come back exactly") {
  Fixture f;
  SamplerConfig cfg;
  cfg.steps = 20;
  const ModalityMask mask = ModalityMask::first(2, 1);
  Matrix obs = Matrix::Zero(5, 3);
  obs.col(0) << 0.1, -0.2, 0.3, 1.5, -1.5;
  const Matrix z = pc_sample(f.score, f.sched, cfg, f.layout, mask, &obs, 0, {}, 3);
  CHECK(z.rows() == 5);
  CHECK(z.col(0) == obs.col(0));
  CHECK(z.allFinite());
}

TEST_CASE("without correctors, batching does not change the draws") {
  Fixture f;
  SamplerConfig cfg;
  cfg.steps = 10;
  cfg.corrector_steps = 0;
  const ModalityMask none = ModalityMask::none(2);
  const Matrix all = pc_sample(f.score, f.sched, cfg, f.layout, none, nullptr, 6, {}, 5);
  const Matrix tail = pc_sample(f.score, f.sched, cfg, f.layout, none, nullptr, 2, {}, 5, 4);
  CHECK(all.bottomRows(2) == tail);
  CHECK(pc_sample(f.score, f.sched, cfg, f.layout, none, nullptr, 6, {}, 5) == all);
}

TEST_CASE("unconditional samples of an isotropic prior have unit variance") {
  Fixture f;
  SamplerConfig cfg;
  const Matrix z = pc_sample(f.score, f.sched, cfg, f.layout, ModalityMask::none(2), nullptr, 4000, {}, 8);
  const double var = z.array().square().mean();
  CHECK(var == doctest::Approx(1.0).epsilon(0.08));
}

TEST_CASE("sampler refuses inconsistent inputs") {
  Fixture f;
  SamplerConfig cfg;
  const Matrix obs = Matrix::Zero(2, 3);
  CHECK_THROWS_AS(pc_sample(f.score, f.sched, cfg, f.layout, ModalityMask::none(2), &obs, 2, {}, 1), ConfigError);
  CHECK_THROWS_AS(pc_sample(f.score, f.sched, cfg, f.layout, ModalityMask::first(2, 1), nullptr, 2, {}, 1), ConfigError);
  cfg.guidance = GuidanceMode::energy;
  CHECK_THROWS_AS(pc_sample(f.score, f.sched, cfg, f.layout, ModalityMask::first(2, 1), &obs, 2, {}, 1), ConfigError);
}

TEST_CASE("energy guidance only moves unobserved coordinates") {
  const LatentLayout layout({2, 2, 2});
  EnergyNetwork e(2, 3, {8}, true, 1);
  Rng rng = make_rng(1);
  const Matrix z = normal_matrix(4, 6, rng);
  const Matrix s = Matrix::Zero(4, 6);
  GuidanceContext ctx;
  ctx.energy = &e;
  const ModalityMask mask = ModalityMask::first(3, 1);
  for (bool avg : {false, true}) {
    const Matrix g = apply_guidance(s, GuidanceMode::energy, 1000.0, ctx, z, layout, mask, avg, rng);
    CHECK(g.leftCols(2).isZero());
    CHECK_FALSE(g.rightCols(4).isZero());
  }
  CHECK(apply_guidance(s, GuidanceMode::none, 1000.0, ctx, z, layout, mask, false, rng) == s);
}
