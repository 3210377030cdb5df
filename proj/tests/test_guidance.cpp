#include "gradcheck.hpp"

#include "mmscore/guidance.hpp"

#include <doctest.h>

using namespace mmscore;

TEST_CASE("energy NCE and input gradients match central differences") {
  CHECK(gradcheck::energy(50, 7) < 1e-3);
}

TEST_CASE("contrastive gradients match central differences") {
  CHECK(gradcheck::contrastive(50, 7) < 1e-3);
}

TEST_CASE("InfoNCE of perfectly aligned orthogonal embeddings") {
  const Matrix e = Matrix::Identity(3, 3);
  const double tau = 0.5;
  // Each row: -log(e^{1/tau} / (e^{1/tau} + 2)).
  const double expected = -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + 2.0));
  CHECK(info_nce_from_embeddings(e, e, tau) == doctest::Approx(expected));
}

TEST_CASE("shared and per-pair energy networks index their nets") {
  EnergyNetwork shared(2, 3, {4}, true, 1);
  CHECK(shared.nets().size() == 1);
  EnergyNetwork pairs(2, 3, {4}, false, 1);
  CHECK(pairs.nets().size() == 6);
  CHECK(pairs.net_index(0, 1) != pairs.net_index(1, 0));
}

TEST_CASE("energy checkpoint round trip") {
  EnergyNetwork e(2, 3, {4}, false, 5);
  for (auto& n : e.nets()) round_to_f32(n);
  Checkpoint ck;
  e.save(ck, "energy");
  const EnergyNetwork back = EnergyNetwork::load(Checkpoint::decode(ck.encode()), "energy");
  const Matrix a = Matrix::Ones(2, 2), b = Matrix::Zero(2, 2);
  CHECK(back.energy(a, b, 2, 0) == e.energy(a, b, 2, 0));
}

TEST_CASE("NCE pairs pair distinct modalities and differently labelled negatives") {
  Rng rng = make_rng(3);
  std::vector<Matrix> lat{Matrix::Zero(20, 1), Matrix::Ones(20, 1), Matrix::Constant(20, 1, 2.0)};
  std::vector<std::uint32_t> labels;
  for (int i = 0; i < 20; ++i) {
    labels.push_back(static_cast<std::uint32_t>(i % 4));
    for (auto& m : lat) m(i, 0) += 10.0 * i;
  }
  std::vector<std::size_t> rows(20);
  for (std::size_t i = 0; i < 20; ++i) rows[i] = i;
  const NcePairs p = sample_nce_pairs(lat, labels, rows, rng);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(p.modality_o[i] != p.modality_u[i]);
    const auto neg_row = static_cast<std::size_t>(std::lround((p.z_n(static_cast<Eigen::Index>(i), 0) - static_cast<double>(p.modality_u[i])) / 10.0));
    CHECK(labels[neg_row] != labels[i]);
  }
}

TEST_CASE("energy training separates coherent pairs") {
  Rng rng = make_rng(4);
  const std::size_t n = 600;
  std::vector<std::uint32_t> labels(n);
  std::vector<Matrix> lat(2, Matrix(n, 2));
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % 3);
    for (auto& m : lat) {
      m(static_cast<Eigen::Index>(i), 0) = std::cos(2.0 * labels[i]) + 0.1 * std::normal_distribution<double>()(rng);
      m(static_cast<Eigen::Index>(i), 1) = std::sin(2.0 * labels[i]) + 0.1 * std::normal_distribution<double>()(rng);
    }
  }
  EnergyNetwork e(2, 2, {32, 32}, true, 2);
  EbmTrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.learning_rate = 3e-3;
  cfg.perturb = false;
  train_ebm(e, lat, labels, VPSDESchedule{}, cfg);
  CHECK(energy_margin(e, lat, labels, VPSDESchedule{}, std::nullopt, 9) > 0.5);
}

TEST_CASE("condition embedding of nothing observed is the zero null condition") {
  ContrastiveEncoder enc({3, 2}, 4, {5}, 0.1, 1);
  std::vector<Matrix> x{Matrix::Ones(2, 3), Matrix::Ones(2, 2)};
  const Matrix z = condition_embedding(enc, x, ModalityMask::none(2), 4);
  CHECK(z.rows() == 4);
  CHECK(z.isZero());
  CHECK_THROWS_AS(condition_embedding(enc, x, ModalityMask::none(2), 0), ConfigError);
  const Matrix c = condition_embedding(enc, x, ModalityMask::first(2, 1));
  CHECK(c.row(0).norm() == doctest::Approx(1.0));
}
