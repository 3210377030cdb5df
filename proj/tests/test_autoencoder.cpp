#include "gradcheck.hpp"

#include "mmscore/autoencoder.hpp"

#include <doctest.h>

using namespace mmscore;

TEST_CASE("encoder gradients match central differences") {
  CHECK(gradcheck::autoencoder(50, 3, 0) < 1e-3);
}

TEST_CASE("decoder gradients match central differences") {
  CHECK(gradcheck::autoencoder(50, 3, 1) < 1e-3);
}

TEST_CASE("gaussian KL closed form") {
  Matrix mu(1, 2), lv(1, 2);
  mu << 0.0, 1.0;
  lv << 0.0, std::log(4.0);
  const Vector kl = gaussian_kl(mu, lv, 1.0);
  // 0.5 (var + mu^2 - 1 - log var) per coordinate.
  CHECK(kl(0) == doctest::Approx(0.5 * (4.0 + 1.0 - 1.0 - std::log(4.0))));
  CHECK(gaussian_kl(Matrix::Zero(1, 3), Matrix::Zero(1, 3), 1.0)(0) == doctest::Approx(0.0));
}

TEST_CASE("VAE mean encoding ignores the rng and sample encoding does not") {
  AutoencoderSpec s;
  s.input_dim = 4;
  s.latent_dim = 2;
  s.hidden = {8};
  ModalityVAE vae(s, 1);
  Rng a = make_rng(1), b = make_rng(2);
  const Matrix x = Matrix::Ones(3, 4);
  CHECK(vae.encode(x, EncodeMode::mean, a) == vae.encode(x, EncodeMode::mean, b));
  CHECK(vae.encode(x, EncodeMode::mean, a) == vae.encode_mean(x));
  CHECK_FALSE(vae.encode(x, EncodeMode::sample, a) == vae.encode(x, EncodeMode::sample, b));
}

TEST_CASE("bernoulli decoder output is clamped to (0, 1)") {
  AutoencoderSpec s;
  s.input_dim = 3;
  s.latent_dim = 1;
  s.hidden = {4};
  s.likelihood = Likelihood::bernoulli;
  auto m = make_autoencoder(s, 2);
  const Matrix p = m->decode(Matrix::Constant(2, 1, 1e4));
  CHECK(p.minCoeff() >= 1e-6);
  CHECK(p.maxCoeff() <= 1.0 - 1e-6);
}

TEST_CASE("autoencoder spec validation") {
  AutoencoderSpec s;
  s.latent_dim = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("autoencoder checkpoint round trip") {
  for (auto kind : {AutoencoderKind::vae, AutoencoderKind::rae}) {
    AutoencoderSpec s;
    s.kind = kind;
    s.input_dim = 5;
    s.latent_dim = 2;
    s.hidden = {6};
    auto m = make_autoencoder(s, 4);
    round_to_f32(m->encoder());
    round_to_f32(m->decoder());
    Checkpoint ck;
    m->save(ck, "ae0");
    auto back = load_autoencoder(Checkpoint::decode(ck.encode()), "ae0");
    CHECK(back->spec().kind == kind);
    const Matrix x = Matrix::Ones(2, 5);
    CHECK(back->encode_mean(x) == m->encode_mean(x));
  }
}

TEST_CASE("training lowers the loss on a small linear problem") {
  AutoencoderSpec s;
  s.input_dim = 2;
  s.latent_dim = 1;
  s.hidden = {};
  s.beta = 0.1;
  ModalityVAE vae(s, 3);
  Rng rng = make_rng(3);
  Matrix z = normal_matrix(512, 1, rng);
  Matrix x(512, 2);
  x.col(0) = z.col(0);
  x.col(1) = -2.0 * z.col(0);
  AutoencoderTrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-2;
  const auto hist = train_autoencoder(vae, x, Matrix(), cfg);
  CHECK(hist.back().loss < hist.front().loss);
}

TEST_CASE("finetune refuses an invalid drop probability") {
  FinetuneConfig c;
  c.drop_probability = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
