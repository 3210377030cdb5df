#pragma once

#include "mmscore/checkpoint.hpp"
#include "mmscore/latent.hpp"
#include "mmscore/nn.hpp"

#include <functional>
#include <string>
#include <optional>
#include <vector>

namespace mmscore {

/// Linear-beta variance-preserving SDE: dz = -1/2 beta(t) z dt + sqrt(beta(t)) dw on t in [0, 1].
struct VPSDESchedule {
  double beta_min = 0.1;
  double beta_max = 5.0;
  int steps = 100;

  void validate() const;
  double beta(double t) const { return beta_min + t * (beta_max - beta_min); }
  /// Integral of beta over [0, t].
  double beta_integral(double t) const { return beta_min * t + 0.5 * (beta_max - beta_min) * t * t; }
};

/// Perturbation kernel p_0t(z_t | z_0) = N(mean_coeff * z_0, std^2 I).
struct MarginalParams {
  double mean_coeff = 1.0;
  double std = 0.0;
};

MarginalParams marginal_params(const VPSDESchedule& schedule, double t);

struct Perturbation {
  Matrix z_t;
  /// grad log p_0t(z_t | z_0) = -noise / std.
  Matrix target_score;
};

/// Batched perturbation at one time t with caller-supplied standard normal noise.
Perturbation perturb(const VPSDESchedule& schedule, const Matrix& z0, double t, const Matrix& noise);
Perturbation perturb(const VPSDESchedule& schedule, const Matrix& z0, double t, std::uint64_t seed);
/// Single-block form; returns the block at time t and its target score.
std::pair<LatentBlock, Vector> perturb(const VPSDESchedule& schedule, const LatentBlock& z0, double t, std::uint64_t seed);

/// Anything that evaluates an approximation of grad_z log p_t(z) for a batch at a shared time.
class ScoreFunction {
 public:
  virtual ~ScoreFunction() = default;
  virtual int dim() const = 0;
  virtual int condition_dim() const { return 0; }
  /// `condition` is n x condition_dim() or null when the model takes no condition.
  virtual Matrix score(const Matrix& z, double t, const Matrix* condition) const = 0;
};

/// Exact score of the diffused zero-mean Gaussian N(0, cov): -(a^2 cov + s^2 I)^{-1} z.
class AnalyticGaussianScore final : public ScoreFunction {
 public:
  AnalyticGaussianScore(Matrix covariance, VPSDESchedule schedule);
  int dim() const override { return static_cast<int>(covariance_.rows()); }
  Matrix score(const Matrix& z, double t, const Matrix* condition) const override;
  Matrix precision(double t) const;

 private:
  Matrix covariance_;
  VPSDESchedule schedule_;
};

struct ScoreNetSpec {
  int latent_dim = 2;
  int time_embed_dim = 16;
  /// Width of the optional condition embedding appended to the time embedding; 0 disables it.
  int condition_dim = 0;
  std::vector<int> hidden{128, 128, 128};
  Activation activation = Activation::softplus;
};

/// s_theta(z, t [, c]) = net(z || time_embed(t) [|| c]) / std(t).
class ScoreNetwork final : public ScoreFunction {
 public:
  ScoreNetwork(ScoreNetSpec spec, VPSDESchedule schedule, std::uint64_t seed);
  ScoreNetwork(ScoreNetSpec spec, VPSDESchedule schedule, DenseNet net);

  int dim() const override { return spec_.latent_dim; }
  int condition_dim() const override { return spec_.condition_dim; }
  const ScoreNetSpec& spec() const { return spec_; }
  const VPSDESchedule& schedule() const { return schedule_; }
  DenseNet& net() { return net_; }
  const DenseNet& net() const { return net_; }

  Matrix score(const Matrix& z, double t, const Matrix* condition) const override;
  /// Per-row times; records the pass in `tape` when non-null.
  Matrix score_rows(const Matrix& z, const Vector& t, const Matrix* condition, Tape* tape) const;
  /// Backpropagates d(loss)/d(score) for a pass recorded by score_rows.
  void backward(const Tape& tape, const Matrix& d_score, const Vector& t, std::span<double> param_grad) const;

 private:
  Matrix build_input(const Matrix& z, const Vector& t, const Matrix* condition) const;

  ScoreNetSpec spec_;
  VPSDESchedule schedule_;
  DenseNet net_;
};

/// Per-coordinate affine standardization applied to latents before score modelling.
struct LatentNormalizer {
  RowVector mean;
  RowVector scale;

  static LatentNormalizer identity(int dim);
  static LatentNormalizer fit(const Matrix& latents);
  Matrix apply(const Matrix& z) const;
  Matrix invert(const Matrix& z) const;
  bool is_identity() const;
};

/// Fixed randomness for one DSM batch: per-row times and per-row noise.
struct DsmDraw {
  Vector t;
  Matrix noise;
  /// Per-row loss weights; empty means 1 for every row.
  Vector weight;
};

DsmDraw draw_dsm(std::size_t rows, int dim, double t_min, Rng& rng);

enum class TimeSampling { uniform, importance };

std::string to_string(TimeSampling s);
TimeSampling time_sampling_from_string(const std::string& s);

/// Proposal for t on [t_min, 1]: an even mixture of the uniform density and a tabulated density
/// proportional to 1 / sigma(t)^2. Rows carry the weight uniform(t) / q(t), so weighted losses
/// estimate the same uniform-time objective with bounded per-row weight / sigma^2.
class TimeProposal {
 public:
  TimeProposal(const VPSDESchedule& schedule, double t_min, int cells = 4096);

  double sample(Rng& rng) const;
  /// Density of the proposal at t (piecewise constant per table cell).
  double density(double t) const;
  double t_min() const { return t_min_; }

 private:
  double t_min_;
  std::vector<double> grid_;
  std::vector<double> cdf_;
};

DsmDraw draw_dsm(const TimeProposal& proposal, std::size_t rows, int dim, Rng& rng);

struct DsmLoss {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean over the batch of w ||s_theta(z_t, t) - grad log p_0t||^2 with lambda(t) = 1 and the
/// draw's row weights w.
/// `coordinate_mask` (n x D of 0/1) restricts the squared error to present coordinates.
/// With `control_variate`, the value adds 2 w target . s(alpha z0) and the gradient its parameter
/// derivative. Both terms have zero mean over the noise and cancel most of the 1/sigma noise of
/// the estimate at small t.
DsmLoss dsm_loss(const ScoreNetwork& net, const Matrix& z0, const DsmDraw& draw, const Matrix* condition = nullptr,
                 const Matrix* coordinate_mask = nullptr, bool control_variate = false);
DsmLoss dsm_loss(const ScoreNetwork& net, const Matrix& z0, std::uint64_t seed, double t_min = 1e-5,
                 const Matrix* condition = nullptr);

struct DSMConfig {
  /// lambda(t); the objective is defined for the constant weighting 1 only.
  double weighting = 1.0;
  int batch_size = 256;
  int epochs = 50;
  double learning_rate = 2e-4;
  /// Cosine decay of the learning rate over the epochs down to this fraction; 1 keeps it constant.
  double final_lr_fraction = 1.0;
  double t_min = 1e-5;
  double heldout_fraction = 0.1;
  /// Probability of replacing the condition embedding with zeros (conditional score nets only).
  double condition_dropout = 0.1;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  /// Zero-mean gradient correction evaluated at the unperturbed mean (see dsm_loss).
  bool control_variate = true;
  /// How training and held-out times are drawn.
  TimeSampling time_sampling = TimeSampling::importance;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ScoreEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
};

struct ScoreTrainResult {
  std::vector<ScoreEpoch> history;
  int best_epoch = 0;
};

/// Per-example presence of each modality (true = present) for masked training.
using PresenceStream = std::vector<ModalityMask>;

/// Per-modality condition embeddings for every training row; the conditioning input for a row is
/// the normalized mean over a random nonempty subset of its modalities.
struct ConditionSource {
  std::vector<Matrix> per_modality;
};

/// Optional hook returning fresh latents at the start of each epoch (e.g. a new posterior sample).
using LatentRefresh = std::function<Matrix(int epoch)>;

/// Denoising score matching with Adam. Holds out the trailing `heldout_fraction` of rows,
/// keeps the parameters with the lowest held-out loss. With a presence stream, missing slices
/// are filled with unit Gaussian noise and excluded from the loss.
ScoreTrainResult train_score(ScoreNetwork& net, const Matrix& latents, const LatentLayout& layout, const DSMConfig& cfg,
                             const PresenceStream* presence = nullptr, const ConditionSource* conditions = nullptr,
                             const LatentRefresh& refresh = {});

/// Draws a presence stream removing `missing_fraction` of rows independently for every modality.
PresenceStream make_presence_stream(std::size_t rows, std::size_t modalities, double missing_fraction, std::uint64_t seed);

void save_score(Checkpoint& ck, const ScoreNetwork& net, const LatentLayout& layout, const LatentNormalizer& normalizer);
struct LoadedScore {
  ScoreNetwork net;
  LatentLayout layout;
  LatentNormalizer normalizer;
};
LoadedScore load_score(const Checkpoint& ck);

}  // namespace mmscore
