#include "mmscore/sampler.hpp"

#include <cmath>
#include <map>

namespace mmscore {

std::string to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::energy: return "energy";
    case GuidanceMode::contrastive: return "contrastive";
  }
  return "none";
}

GuidanceMode guidance_mode_from_string(const std::string& s) {
  if (s == "none") return GuidanceMode::none;
  if (s == "energy") return GuidanceMode::energy;
  if (s == "contrastive") return GuidanceMode::contrastive;
  throw ConfigError("unknown guidance mode '" + s + "' (none, energy, contrastive)");
}

void SamplerConfig::validate() const {
  if (steps < 0) throw ConfigError("sampler steps must be >= 1 (0 selects the schedule's N)");
  if (corrector_steps < 0) throw ConfigError("corrector steps must be >= 0");
  if (corrector_steps > 0 && !(snr > 0.0)) throw ConfigError("corrector snr must be > 0");
  if (!(guidance_scale >= 0.0) || !std::isfinite(guidance_scale)) throw ConfigError("guidance scale must be finite and >= 0");
}

Matrix predictor_update(const VPSDESchedule& schedule, const Matrix& z, const Matrix& score, double t, double dt,
                        const Matrix* noise) {
  const double b = schedule.beta(t);
  Matrix out = z + (0.5 * b * z + b * score) * dt;
  if (noise != nullptr) out += std::sqrt(b * dt) * (*noise);
  return out;
}

Matrix corrector_update(const Matrix& z, const Matrix& score, const Matrix& noise, double snr, const RowVector* coordinate_mask) {
  double s_norm = 0.0, e_norm = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double s2 = 0.0, e2 = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      if (coordinate_mask != nullptr && (*coordinate_mask)(c) == 0.0) continue;
      s2 += score(r, c) * score(r, c);
      e2 += noise(r, c) * noise(r, c);
    }
    s_norm += std::sqrt(s2);
    e_norm += std::sqrt(e2);
  }
  if (s_norm == 0.0) return z;
  const double ratio = snr * e_norm / s_norm;
  const double eta = 2.0 * ratio * ratio;
  return z + eta * score + std::sqrt(2.0 * eta) * noise;
}

Matrix predictor_step(const ScoreFunction& score, const VPSDESchedule& schedule, const Matrix& z, int i, int N,
                      std::uint64_t seed, const Matrix* condition) {
  if (N < 1 || i < 1 || i > N) throw DomainError("predictor step index must lie in [1, N]");
  const double t = static_cast<double>(i) / N;
  Matrix s = score.score(z, t, condition);
  Matrix out;
  if (i > 1) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(i));
    Matrix noise = normal_matrix(z.rows(), z.cols(), rng);
    out = predictor_update(schedule, z, s, t, 1.0 / N, &noise);
  } else {
    out = predictor_update(schedule, z, s, t, 1.0 / N, nullptr);
  }
  if (!out.allFinite()) throw NumericError("non-finite state after predictor step " + std::to_string(i));
  return out;
}

Matrix corrector_step(const ScoreFunction& score, const Matrix& z, double t, double snr, std::uint64_t seed,
                      const Matrix* condition) {
  if (!(snr > 0.0)) throw ConfigError("corrector snr must be > 0");
  Rng rng = make_rng(seed, 0xc0);
  Matrix noise = normal_matrix(z.rows(), z.cols(), rng);
  Matrix out = corrector_update(z, score.score(z, t, condition), noise, snr);
  if (!out.allFinite()) throw NumericError("non-finite state after corrector step");
  return out;
}

namespace {

Matrix rows_noise(std::vector<Rng>& rngs, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(rngs.size()), cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < rngs.size(); ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), c) = normal(rngs[r]);
  return m;
}

Matrix slice_cols(const Matrix& z, const LatentLayout& layout, std::size_t k, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), layout.length(k));
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = z.row(rows[i]).segment(layout.offset(k), layout.length(k));
  return out;
}

Matrix guide_rows(const Matrix& score, GuidanceMode mode, double gamma, const GuidanceContext& ctx, const Matrix& z,
                  const LatentLayout& layout, const ModalityMask& mask, bool average_pairs, const std::vector<Rng*>& rngs) {
  if (mode != GuidanceMode::energy) return score;
  const auto obs = mask.observed_indices();
  const auto unobs = mask.unobserved_indices();
  if (obs.empty() || unobs.empty()) throw ConfigError("energy guidance needs at least one observed and one unobserved modality");
  if (ctx.energy == nullptr) throw ConfigError("energy guidance requested without an energy network");
  if (gamma == 0.0) return score;
  const EnergyNetwork& e = *ctx.energy;
  if (e.num_modalities() != static_cast<int>(layout.num_modalities())) throw ShapeError("energy network modality count mismatch");

  Matrix out = score;
  std::vector<Eigen::Index> all(static_cast<std::size_t>(z.rows()));
  for (std::size_t r = 0; r < all.size(); ++r) all[r] = static_cast<Eigen::Index>(r);

  if (average_pairs) {
    const double w = gamma / static_cast<double>(obs.size());
    for (std::size_t u : unobs) {
      Matrix zu = slice_cols(z, layout, u, all);
      for (std::size_t o : obs) {
        Matrix g = e.grad_unobserved(slice_cols(z, layout, o, all), zu, o, u);
        out.middleCols(layout.offset(u), layout.length(u)) -= w * g;
      }
    }
    return out;
  }

  std::map<std::pair<std::size_t, std::size_t>, std::vector<Eigen::Index>> groups;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Rng& rng = *rngs[static_cast<std::size_t>(r)];
    const std::size_t o = obs[std::uniform_int_distribution<std::size_t>(0, obs.size() - 1)(rng)];
    const std::size_t u = unobs[std::uniform_int_distribution<std::size_t>(0, unobs.size() - 1)(rng)];
    groups[{o, u}].push_back(r);
  }
  for (const auto& [key, rows] : groups) {
    const auto [o, u] = key;
    Matrix g = e.grad_unobserved(slice_cols(z, layout, o, rows), slice_cols(z, layout, u, rows), o, u);
    for (std::size_t i = 0; i < rows.size(); ++i)
      out.row(rows[i]).segment(layout.offset(u), layout.length(u)) -= gamma * g.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

}  // namespace

Matrix apply_guidance(const Matrix& score, GuidanceMode mode, double gamma, const GuidanceContext& ctx, const Matrix& z,
                      const LatentLayout& layout, const ModalityMask& mask, bool average_pairs, Rng& rng) {
  std::vector<Rng*> rngs(static_cast<std::size_t>(z.rows()), &rng);
  return guide_rows(score, mode, gamma, ctx, z, layout, mask, average_pairs, rngs);
}

Matrix pc_sample(const ScoreFunction& score, const VPSDESchedule& schedule, const SamplerConfig& cfg,
                 const LatentLayout& layout, const ModalityMask& mask, const Matrix* observed, std::size_t chains,
                 const GuidanceContext& ctx, std::uint64_t seed, std::uint64_t chain_offset) {
  cfg.validate();
  schedule.validate();
  const int D = layout.total();
  if (score.dim() != D) throw ShapeError("score model dimension does not match the latent layout");
  if (mask.size() != layout.num_modalities()) throw ConfigError("mask size does not match the modality count");
  const bool conditional = mask.any_observed();
  if (conditional != (observed != nullptr))
    throw ConfigError("observed latents must be given exactly when the mask observes a modality");
  if (observed != nullptr) {
    if (observed->cols() != D) throw ConfigError("observed latents do not match the latent layout");
    chains = static_cast<std::size_t>(observed->rows());
  }
  if (mask.all_observed()) return *observed;
  if (cfg.guidance == GuidanceMode::contrastive) {
    if (ctx.condition == nullptr) throw ConfigError("contrastive guidance requested without a condition embedding");
    if (static_cast<std::size_t>(ctx.condition->rows()) != chains) throw ShapeError("condition rows do not match chain count");
  }
  const Matrix* condition = cfg.guidance == GuidanceMode::contrastive ? ctx.condition : nullptr;

  const int N = cfg.steps > 0 ? cfg.steps : schedule.steps;
  const double dt = 1.0 / N;
  const RowVector obs_mask = mask.coordinate_mask(layout);
  const RowVector free_mask = RowVector::Ones(D) - obs_mask;

  std::vector<Rng> rngs;
  rngs.reserve(chains);
  for (std::size_t c = 0; c < chains; ++c) rngs.push_back(make_rng(seed, chain_offset + c));
  std::vector<Rng*> rng_ptrs;
  for (auto& r : rngs) rng_ptrs.push_back(&r);

  auto replace_observed = [&](Matrix& z, double t) {
    if (!conditional) return;
    Matrix target = *observed;
    if (!cfg.hold_clean && t > 0.0) {
      const auto p = marginal_params(schedule, t);
      target = p.mean_coeff * target + p.std * rows_noise(rngs, D);
    }
    for (Eigen::Index c = 0; c < D; ++c)
      if (obs_mask(c) != 0.0) z.col(c) = target.col(c);
  };
  auto guided = [&](const Matrix& z, double t) {
    Matrix s = score.score(z, t, condition);
    return guide_rows(s, cfg.guidance, cfg.guidance_scale, ctx, z, layout, mask, cfg.average_pairs, rng_ptrs);
  };

  Matrix z = rows_noise(rngs, D);
  replace_observed(z, 1.0);
  for (int i = N; i >= 1; --i) {
    const double t = static_cast<double>(i) / N;
    const double t_next = static_cast<double>(i - 1) / N;
    Matrix s = guided(z, t);
    if (i > 1) {
      Matrix noise = rows_noise(rngs, D);
      z = predictor_update(schedule, z, s, t, dt, &noise);
    } else {
      z = predictor_update(schedule, z, s, t, dt, nullptr);
    }
    if (!z.allFinite()) throw NumericError("non-finite state after predictor step " + std::to_string(i));
    replace_observed(z, t_next);
    if (t_next <= 0.0) break;
    for (int l = 0; l < cfg.corrector_steps; ++l) {
      Matrix sc = guided(z, t_next);
      Matrix noise = rows_noise(rngs, D);
      z = corrector_update(z, sc, noise, cfg.snr, conditional ? &free_mask : nullptr);
      if (!z.allFinite()) throw NumericError("non-finite state after corrector at step " + std::to_string(i));
      replace_observed(z, t_next);
    }
  }
  return z;
}

}  // namespace mmscore
