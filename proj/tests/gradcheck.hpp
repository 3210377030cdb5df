#pragma once

// Central finite-difference checks shared by the unit tests and the acceptance binary.

#include "mmscore/autoencoder.hpp"
#include "mmscore/eval.hpp"
#include "mmscore/guidance.hpp"
#include "mmscore/score_sde.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace gradcheck {

using namespace mmscore;

inline double rel_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / scale;
}

/// Compares g . v against (f(p + h v) - f(p - h v)) / 2h for a random unit direction v spread over
/// every block. The blocks are restored afterwards.
inline double directional(const std::vector<std::span<double>>& blocks, const std::vector<std::vector<double>>& grads,
                          const std::function<double()>& f, Rng& rng, double h = 1e-6) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> dir(blocks.size());
  double norm = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    dir[b].resize(blocks[b].size());
    for (double& d : dir[b]) {
      d = normal(rng);
      norm += d * d;
    }
  }
  norm = std::sqrt(norm);
  double analytic = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (std::size_t i = 0; i < dir[b].size(); ++i) {
      dir[b][i] /= norm;
      analytic += grads[b][i] * dir[b][i];
    }
  auto shift = [&](double s) {
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (std::size_t i = 0; i < dir[b].size(); ++i) blocks[b][i] += s * dir[b][i];
  };
  std::vector<std::vector<double>> saved;
  for (auto& b : blocks) saved.emplace_back(b.begin(), b.end());
  shift(h);
  const double fp = f();
  for (std::size_t b = 0; b < blocks.size(); ++b) std::copy(saved[b].begin(), saved[b].end(), blocks[b].begin());
  shift(-h);
  const double fm = f();
  for (std::size_t b = 0; b < blocks.size(); ++b) std::copy(saved[b].begin(), saved[b].end(), blocks[b].begin());
  return rel_error(analytic, (fp - fm) / (2.0 * h));
}

/// Per-coordinate check of a gradient against central differences; returns the max relative error.
inline double coordinatewise(std::span<double> params, std::span<const double> grad, const std::function<double()>& f,
                             double h = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double fp = f();
    params[i] = keep - h;
    const double fm = f();
    params[i] = keep;
    worst = std::max(worst, rel_error(grad[i], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

inline Activation random_activation(Rng& rng) {
  const Activation acts[] = {Activation::identity, Activation::relu, Activation::softplus, Activation::tanh};
  return acts[std::uniform_int_distribution<int>(0, 3)(rng)];
}

inline int rand_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Offsets every parameter by N(0, 0.1^2). Freshly initialized biases are exactly zero, which puts
/// ReLU units fed by a dead layer on their kink.
inline void jitter(std::span<double> params, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 0.1);
  for (double& p : params) p += normal(rng);
}

// Each function runs `cases` randomized checks and returns the largest relative error seen.

/// DenseNet parameter and input gradients of sum(upstream . forward(x)), random widths and activations.
inline double dense_net(int cases, std::uint64_t seed) {
  Rng rng = make_rng(seed, 1);
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const int layers = rand_int(rng, 1, 3);
    std::vector<int> widths{rand_int(rng, 1, 6)};
    std::vector<Activation> acts;
    for (int l = 0; l < layers; ++l) {
      widths.push_back(rand_int(rng, 1, 6));
      acts.push_back(random_activation(rng));
    }
    DenseNet net(widths, acts, rng());
    jitter(net.parameters(), rng);
    const int n = rand_int(rng, 1, 5);
    Matrix x = normal_matrix(n, widths.front(), rng);
    const Matrix up = normal_matrix(n, widths.back(), rng);
    Tape tape;
    net.forward(x, tape);
    std::vector<double> g(net.parameter_count(), 0.0);
    const Matrix gx = net.backward(tape, up, g);
    auto f = [&] { return (net.forward(x).array() * up.array()).sum(); };
    worst = std::max(worst, coordinatewise(net.parameters(), g, f));
    std::vector<double> gxv(gx.data(), gx.data() + gx.size());
    worst = std::max(worst, coordinatewise(std::span<double>(x.data(), static_cast<std::size_t>(x.size())), gxv, f));
  }
  return worst;
}

inline AutoencoderSpec random_ae_spec(Rng& rng, AutoencoderKind kind) {
  AutoencoderSpec s;
  s.kind = kind;
  s.input_dim = rand_int(rng, 1, 8);
  s.latent_dim = rand_int(rng, 1, 4);
  s.hidden = {rand_int(rng, 2, 12)};
  if (rand_int(rng, 0, 1) == 1) s.hidden.push_back(rand_int(rng, 2, 8));
  s.hidden_activation = rand_int(rng, 0, 1) == 0 ? Activation::relu : Activation::softplus;
  s.beta = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
  s.prior_std = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  s.likelihood = kind == AutoencoderKind::rae || rand_int(rng, 0, 1) == 0 ? Likelihood::gaussian : Likelihood::bernoulli;
  s.decoder_noise_std = 0.1;
  return s;
}

/// Autoencoder loss gradients; `which` selects the encoder (0) or decoder (1) parameters.
inline double autoencoder(int cases, std::uint64_t seed, int which) {
  Rng rng = make_rng(seed, 2 + static_cast<std::uint64_t>(which));
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const auto kind = c % 2 == 0 ? AutoencoderKind::vae : AutoencoderKind::rae;
    const AutoencoderSpec spec = random_ae_spec(rng, kind);
    auto model = make_autoencoder(spec, rng());
    jitter(model->encoder().parameters(), rng);
    jitter(model->decoder().parameters(), rng);
    const int n = rand_int(rng, 1, 6);
    Matrix x = normal_matrix(n, spec.input_dim, rng);
    if (spec.likelihood == Likelihood::bernoulli) x = (x.array() > 0.0).cast<double>().matrix();
    const Matrix noise = normal_matrix(n, spec.latent_dim, rng);
    const AutoencoderLoss l = model->loss(x, noise);
    auto f = [&] { return model->loss(x, noise).total; };
    if (which == 0)
      worst = std::max(worst, directional({model->encoder().parameters()}, {l.encoder_grad}, f, rng));
    else
      worst = std::max(worst, directional({model->decoder().parameters()}, {l.decoder_grad}, f, rng));
  }
  return worst;
}

/// DSM loss gradients, with and without the control variate, coordinate masks and conditions.
inline double score(int cases, std::uint64_t seed) {
  Rng rng = make_rng(seed, 4);
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    ScoreNetSpec spec;
    spec.latent_dim = rand_int(rng, 1, 4);
    spec.time_embed_dim = 2 * rand_int(rng, 1, 4);
    spec.condition_dim = rand_int(rng, 0, 1) == 0 ? 0 : rand_int(rng, 1, 3);
    spec.hidden = {rand_int(rng, 2, 10), rand_int(rng, 2, 10)};
    VPSDESchedule sched;
    ScoreNetwork net(spec, sched, rng());
    jitter(net.net().parameters(), rng);
    const int n = rand_int(rng, 1, 6);
    const Matrix z0 = normal_matrix(n, spec.latent_dim, rng);
    DsmDraw draw;
    if (c % 2 == 0) {
      draw = draw_dsm(static_cast<std::size_t>(n), spec.latent_dim, 0.05, rng);
    } else {
      TimeProposal prop(sched, 0.05, 64);
      draw = draw_dsm(prop, static_cast<std::size_t>(n), spec.latent_dim, rng);
    }
    std::optional<Matrix> cond;
    if (spec.condition_dim > 0) cond = normal_matrix(n, spec.condition_dim, rng);
    std::optional<Matrix> mask;
    if (c % 3 == 0) mask = (normal_matrix(n, spec.latent_dim, rng).array() > 0.0).cast<double>().matrix();
    const bool cv = c % 4 < 2;
    const Matrix* cp = cond ? &*cond : nullptr;
    const Matrix* mp = mask ? &*mask : nullptr;
    const DsmLoss l = dsm_loss(net, z0, draw, cp, mp, cv);
    auto f = [&] { return dsm_loss(net, z0, draw, cp, mp, cv).value; };
    worst = std::max(worst, directional({net.net().parameters()}, {l.grad}, f, rng));
  }
  return worst;
}

inline NcePairs random_pairs(Rng& rng, int n, int d, int M) {
  NcePairs p;
  p.z_o = normal_matrix(n, d, rng);
  p.z_u = normal_matrix(n, d, rng);
  p.z_n = normal_matrix(n, d, rng);
  for (int i = 0; i < n; ++i) {
    const int o = rand_int(rng, 0, M - 1);
    int u = rand_int(rng, 0, M - 2);
    if (u >= o) ++u;
    p.modality_o.push_back(static_cast<std::size_t>(o));
    p.modality_u.push_back(static_cast<std::size_t>(u));
  }
  return p;
}

/// NCE parameter gradients (shared and per-pair networks) and grad_{z_u} E.
inline double energy(int cases, std::uint64_t seed) {
  Rng rng = make_rng(seed, 5);
  double worst = 0.0;
  VPSDESchedule sched;
  for (int c = 0; c < cases; ++c) {
    const int d = rand_int(rng, 1, 4);
    const int M = rand_int(rng, 2, 4);
    EnergyNetwork e(d, M, {rand_int(rng, 2, 10), rand_int(rng, 2, 10)}, c % 2 == 0, rng());
    for (auto& net : e.nets()) jitter(net.parameters(), rng);
    const int n = rand_int(rng, 1, 8);
    const NcePairs pairs = random_pairs(rng, n, d, M);
    const NceDraw draw = draw_nce(pairs, 0.01, rng);
    const NceDraw* dp = c % 3 == 0 ? nullptr : &draw;
    NceLoss l = nce_loss(e, pairs, sched, dp);
    std::vector<std::span<double>> blocks;
    for (std::size_t k = 0; k < e.nets().size(); ++k) {
      blocks.push_back(e.nets()[k].parameters());
      if (l.grads[k].empty()) l.grads[k].assign(e.nets()[k].parameter_count(), 0.0);
    }
    auto f = [&] { return nce_loss(e, pairs, sched, dp).value; };
    worst = std::max(worst, directional(blocks, l.grads, f, rng));

    const std::size_t o = pairs.modality_o[0], u = pairs.modality_u[0];
    Matrix zu = pairs.z_u;
    const Matrix gz = e.grad_unobserved(pairs.z_o, zu, o, u);
    std::vector<double> gzv(gz.data(), gz.data() + gz.size());
    auto fe = [&] { return e.energy(pairs.z_o, zu, o, u).sum(); };
    worst = std::max(worst, directional({std::span<double>(zu.data(), static_cast<std::size_t>(zu.size()))}, {gzv}, fe, rng));
  }
  return worst;
}

/// InfoNCE gradients for every modality network and the log temperature.
inline double contrastive(int cases, std::uint64_t seed) {
  Rng rng = make_rng(seed, 6);
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const int M = rand_int(rng, 2, 3);
    std::vector<int> dims;
    for (int k = 0; k < M; ++k) dims.push_back(rand_int(rng, 1, 6));
    ContrastiveEncoder enc(dims, rand_int(rng, 2, 5), {rand_int(rng, 2, 8)}, std::uniform_real_distribution<double>(0.05, 1.0)(rng), rng());
    for (auto& net : enc.nets()) jitter(net.parameters(), rng);
    const int n = rand_int(rng, 2, 6);
    const std::size_t a = static_cast<std::size_t>(rand_int(rng, 0, M - 1));
    std::size_t b = static_cast<std::size_t>(rand_int(rng, 0, M - 2));
    if (b >= a) ++b;
    const Matrix xa = normal_matrix(n, dims[a], rng), xb = normal_matrix(n, dims[b], rng);
    const ContrastiveLoss l = contrastive_loss(enc, xa, xb, a, b);
    std::vector<std::span<double>> blocks;
    std::vector<std::vector<double>> grads;
    for (std::size_t k = 0; k < enc.nets().size(); ++k) {
      blocks.push_back(enc.nets()[k].parameters());
      grads.push_back(l.grads[k].empty() ? std::vector<double>(enc.nets()[k].parameter_count(), 0.0) : l.grads[k]);
    }
    blocks.push_back(std::span<double>(&enc.log_temperature(), 1));
    grads.push_back({l.log_temperature_grad});
    auto f = [&] { return contrastive_loss(enc, xa, xb, a, b).value; };
    worst = std::max(worst, directional(blocks, grads, f, rng));
  }
  return worst;
}

/// Softmax cross-entropy gradients of the evaluation classifier.
inline double classifier(int cases, std::uint64_t seed) {
  Rng rng = make_rng(seed, 7);
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const int in = rand_int(rng, 1, 10), classes = rand_int(rng, 2, 6);
    EvalClassifier clf(in, classes, {rand_int(rng, 2, 10), rand_int(rng, 2, 8)}, rng());
    jitter(clf.net().parameters(), rng);
    const int n = rand_int(rng, 1, 8);
    const Matrix x = normal_matrix(n, in, rng);
    std::vector<std::uint32_t> y;
    for (int i = 0; i < n; ++i) y.push_back(static_cast<std::uint32_t>(rand_int(rng, 0, classes - 1)));
    const ClassifierLoss l = cross_entropy_loss(clf.net(), x, y);
    auto f = [&] { return cross_entropy_loss(clf.net(), x, y).value; };
    worst = std::max(worst, directional({clf.net().parameters()}, {l.grad}, f, rng));
  }
  return worst;
}

}  // namespace gradcheck
