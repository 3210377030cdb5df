#pragma once

#include "mmscore/guidance.hpp"
#include "mmscore/latent.hpp"
#include "mmscore/score_sde.hpp"

#include <string>

namespace mmscore {

enum class GuidanceMode { none, energy, contrastive };

std::string to_string(GuidanceMode m);
GuidanceMode guidance_mode_from_string(const std::string& s);

struct SamplerConfig {
  /// Reverse-time grid size; 0 uses the schedule's N.
  int steps = 0;
  int corrector_steps = 1;
  double snr = 0.16;
  double guidance_scale = 1000.0;
  GuidanceMode guidance = GuidanceMode::none;
  /// Keep observed latents clean at every step instead of diffusing them to the current time.
  bool hold_clean = false;
  /// Energy guidance: average the gradient over every (observed, unobserved) pair.
  bool average_pairs = false;

  void validate() const;
};

/// Reverse Euler-Maruyama from t to t - dt:
/// z + (beta/2 z + beta s) dt + sqrt(beta dt) noise, with `noise == nullptr` dropping the noise term.
Matrix predictor_update(const VPSDESchedule& schedule, const Matrix& z, const Matrix& score, double t, double dt,
                        const Matrix* noise);

/// Langevin move z + eta s + sqrt(2 eta) noise with eta = 2 (r ||noise|| / ||s||)^2, where the
/// norms are batch means of the row norms over the columns flagged in `coordinate_mask` (all
/// columns when null). A zero score leaves z unchanged.
Matrix corrector_update(const Matrix& z, const Matrix& score, const Matrix& noise, double snr,
                        const RowVector* coordinate_mask = nullptr);

/// Step i in [1, N] moves grid time i/N to (i-1)/N; the last step (i = 1) adds no noise.
Matrix predictor_step(const ScoreFunction& score, const VPSDESchedule& schedule, const Matrix& z, int i, int N,
                      std::uint64_t seed, const Matrix* condition = nullptr);
Matrix corrector_step(const ScoreFunction& score, const Matrix& z, double t, double snr, std::uint64_t seed,
                      const Matrix* condition = nullptr);

/// Guidance inputs: the energy network for energy mode, the condition embedding (rows x e_c)
/// for contrastive mode.
struct GuidanceContext {
  const EnergyNetwork* energy = nullptr;
  const Matrix* condition = nullptr;
};

/// Adjusts a raw score batch. Energy mode subtracts gamma * grad_{z_u} E(z_o, z_u) from one random
/// unobserved slice per row, paired with one random observed slice (or averaged over all pairs);
/// observed coordinates are never touched. Contrastive and none modes return the score unchanged.
Matrix apply_guidance(const Matrix& score, GuidanceMode mode, double gamma, const GuidanceContext& ctx, const Matrix& z,
                      const LatentLayout& layout, const ModalityMask& mask, bool average_pairs, Rng& rng);

/// Predictor-corrector sampling of `chains` stacked latents at t = 0.
///
/// With observed modalities, `observed` (chains x D, unobserved columns ignored) supplies the
/// clean latents and those coordinates are overwritten after every update with their forward
/// diffusion to the current grid time; at t = 0 they equal the inputs exactly. Chain c draws from
/// its own random stream (seed, chain_offset + c). Without correctors, splitting a run into batches
/// does not change the result; the corrector step size depends on the whole batch.
Matrix pc_sample(const ScoreFunction& score, const VPSDESchedule& schedule, const SamplerConfig& cfg,
                 const LatentLayout& layout, const ModalityMask& mask, const Matrix* observed, std::size_t chains,
                 const GuidanceContext& ctx, std::uint64_t seed, std::uint64_t chain_offset = 0);

}  // namespace mmscore
