#include "mmscore/score_sde.hpp"

#include "mmscore/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace mmscore {

void VPSDESchedule::validate() const {
  if (!(beta_min >= 0.0) || !std::isfinite(beta_min)) throw ConfigError("beta_min must be finite and >= 0");
  if (!(beta_max >= beta_min) || !std::isfinite(beta_max)) throw ConfigError("beta_max must be finite and >= beta_min");
  if (steps < 1) throw ConfigError("schedule needs at least one discretization step");
}

MarginalParams marginal_params(const VPSDESchedule& schedule, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("diffusion time " + std::to_string(t) + " outside [0, 1]");
  const double log_mean = -0.5 * schedule.beta_integral(t);
  MarginalParams p;
  p.mean_coeff = std::exp(log_mean);
  // 1 - exp(2 log_mean), computed without cancellation for small t.
  p.std = std::sqrt(-std::expm1(2.0 * log_mean));
  return p;
}

Perturbation perturb(const VPSDESchedule& schedule, const Matrix& z0, double t, const Matrix& noise) {
  if (noise.rows() != z0.rows() || noise.cols() != z0.cols()) throw ShapeError("perturb: noise shape mismatch");
  const auto p = marginal_params(schedule, t);
  if (p.std <= 0.0) throw DomainError("perturbation kernel is degenerate at t = " + std::to_string(t));
  Perturbation out;
  out.z_t = p.mean_coeff * z0 + p.std * noise;
  out.target_score = -noise / p.std;
  return out;
}

Perturbation perturb(const VPSDESchedule& schedule, const Matrix& z0, double t, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x9e47);
  return perturb(schedule, z0, t, normal_matrix(z0.rows(), z0.cols(), rng));
}

std::pair<LatentBlock, Vector> perturb(const VPSDESchedule& schedule, const LatentBlock& z0, double t, std::uint64_t seed) {
  if (z0.time != 0.0) throw DomainError("perturb expects a clean block at t = 0");
  Matrix row = z0.values.transpose();
  auto p = perturb(schedule, row, t, seed);
  LatentBlock out{p.z_t.row(0).transpose(), z0.layout, t};
  return {std::move(out), p.target_score.row(0).transpose()};
}

AnalyticGaussianScore::AnalyticGaussianScore(Matrix covariance, VPSDESchedule schedule)
    : covariance_(std::move(covariance)), schedule_(schedule) {
  if (covariance_.rows() != covariance_.cols()) throw ShapeError("covariance must be square");
}

Matrix AnalyticGaussianScore::precision(double t) const {
  const auto p = marginal_params(schedule_, t);
  Matrix cov_t = p.mean_coeff * p.mean_coeff * covariance_ +
                 p.std * p.std * Matrix::Identity(covariance_.rows(), covariance_.cols());
  return cov_t.inverse();
}

Matrix AnalyticGaussianScore::score(const Matrix& z, double t, const Matrix*) const {
  if (z.cols() != covariance_.rows()) throw ShapeError("analytic score: dimension mismatch");
  return -(z * precision(t));  // precision is symmetric
}

ScoreNetwork::ScoreNetwork(ScoreNetSpec spec, VPSDESchedule schedule, std::uint64_t seed)
    : ScoreNetwork(spec, schedule,
                   make_mlp(spec.latent_dim + spec.time_embed_dim + spec.condition_dim, spec.hidden, spec.latent_dim,
                            spec.activation, Activation::identity, seed)) {}

ScoreNetwork::ScoreNetwork(ScoreNetSpec spec, VPSDESchedule schedule, DenseNet net)
    : spec_(std::move(spec)), schedule_(schedule), net_(std::move(net)) {
  schedule_.validate();
  if (spec_.latent_dim < 1 || spec_.condition_dim < 0) throw ConfigError("score net dimensions invalid");
  if (net_.input_width() != spec_.latent_dim + spec_.time_embed_dim + spec_.condition_dim ||
      net_.output_width() != spec_.latent_dim)
    throw ConfigError("score net widths do not match its spec");
}

Matrix ScoreNetwork::build_input(const Matrix& z, const Vector& t, const Matrix* condition) const {
  if (z.cols() != spec_.latent_dim) throw ShapeError("score net: latent width mismatch");
  if (t.size() != z.rows()) throw ShapeError("score net: one time per row required");
  const int D = spec_.latent_dim, E = spec_.time_embed_dim, C = spec_.condition_dim;
  Matrix input(z.rows(), D + E + C);
  input.leftCols(D) = z;
  for (Eigen::Index r = 0; r < z.rows(); ++r) time_embed_into(t(r), E, input.row(r).segment(D, E));
  if (C > 0) {
    if (condition == nullptr) {
      input.rightCols(C).setZero();
    } else {
      if (condition->rows() != z.rows() || condition->cols() != C) throw ShapeError("score net: condition shape mismatch");
      input.rightCols(C) = *condition;
    }
  }
  return input;
}

Matrix ScoreNetwork::score_rows(const Matrix& z, const Vector& t, const Matrix* condition, Tape* tape) const {
  Matrix input = build_input(z, t, condition);
  Matrix out = tape != nullptr ? net_.forward(input, *tape) : net_.forward(input);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double s = marginal_params(schedule_, t(r)).std;
    if (s <= 0.0) throw DomainError("score evaluated at t with zero marginal std");
    out.row(r) /= s;
  }
  return out;
}

Matrix ScoreNetwork::score(const Matrix& z, double t, const Matrix* condition) const {
  return score_rows(z, Vector::Constant(z.rows(), t), condition, nullptr);
}

void ScoreNetwork::backward(const Tape& tape, const Matrix& d_score, const Vector& t, std::span<double> param_grad) const {
  Matrix d_out = d_score;
  for (Eigen::Index r = 0; r < d_out.rows(); ++r) d_out.row(r) /= marginal_params(schedule_, t(r)).std;
  net_.backward(tape, d_out, param_grad);
}

LatentNormalizer LatentNormalizer::identity(int dim) { return {RowVector::Zero(dim), RowVector::Ones(dim)}; }

LatentNormalizer LatentNormalizer::fit(const Matrix& latents) {
  if (latents.rows() < 2) throw ConfigError("latent standardization needs at least two rows");
  LatentNormalizer n;
  n.mean = latents.colwise().mean();
  Matrix centered = latents.rowwise() - n.mean;
  n.scale = (centered.colwise().squaredNorm() / static_cast<double>(latents.rows() - 1)).cwiseSqrt();
  for (Eigen::Index j = 0; j < n.scale.size(); ++j)
    if (!(n.scale(j) > 0.0)) n.scale(j) = 1.0;
  // Round to the checkpoint precision so saved and in-memory normalizers agree.
  for (Eigen::Index j = 0; j < n.mean.size(); ++j) {
    n.mean(j) = static_cast<float>(n.mean(j));
    n.scale(j) = static_cast<float>(n.scale(j));
  }
  return n;
}

Matrix LatentNormalizer::apply(const Matrix& z) const {
  return ((z.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

Matrix LatentNormalizer::invert(const Matrix& z) const {
  return ((z.array().rowwise() * scale.array()).matrix()).rowwise() + mean;
}

bool LatentNormalizer::is_identity() const { return mean.isZero(0.0) && (scale.array() == 1.0).all(); }

DsmDraw draw_dsm(std::size_t rows, int dim, double t_min, Rng& rng) {
  DsmDraw d;
  d.t.resize(static_cast<Eigen::Index>(rows));
  std::uniform_real_distribution<double> uniform(t_min, 1.0);
  for (Eigen::Index i = 0; i < d.t.size(); ++i) d.t(i) = uniform(rng);
  d.noise = normal_matrix(static_cast<Eigen::Index>(rows), dim, rng);
  return d;
}

std::string to_string(TimeSampling s) { return s == TimeSampling::uniform ? "uniform" : "importance"; }

TimeSampling time_sampling_from_string(const std::string& s) {
  if (s == "uniform") return TimeSampling::uniform;
  if (s == "importance") return TimeSampling::importance;
  throw ConfigError("unknown time sampling '" + s + "' (uniform, importance)");
}

TimeProposal::TimeProposal(const VPSDESchedule& schedule, double t_min, int cells) : t_min_(t_min) {
  schedule.validate();
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("time proposal needs 0 < t_min < 1");
  if (cells < 2) throw ConfigError("time proposal needs at least two cells");
  // Log-spaced cells resolve the 1/sigma^2 peak near t_min.
  grid_.resize(static_cast<std::size_t>(cells) + 1);
  const double log_lo = std::log(t_min);
  for (int i = 0; i <= cells; ++i) grid_[static_cast<std::size_t>(i)] = std::exp(log_lo * (1.0 - static_cast<double>(i) / cells));
  grid_.back() = 1.0;
  auto inv_var = [&](double t) {
    const double s = marginal_params(schedule, t).std;
    if (s <= 0.0) throw DomainError("time proposal: zero marginal std at t = " + std::to_string(t));
    return 1.0 / (s * s);
  };
  std::vector<double> mass(static_cast<std::size_t>(cells));
  double total = 0.0;
  for (std::size_t i = 0; i < mass.size(); ++i) {
    const double a = grid_[i], b = grid_[i + 1];
    mass[i] = 0.5 * (inv_var(a) + inv_var(b)) * (b - a);
    total += mass[i];
  }
  const double width = 1.0 - t_min;
  cdf_.assign(grid_.size(), 0.0);
  for (std::size_t i = 0; i < mass.size(); ++i)
    cdf_[i + 1] = cdf_[i] + 0.5 * mass[i] / total + 0.5 * (grid_[i + 1] - grid_[i]) / width;
  for (auto& c : cdf_) c /= cdf_.back();
}

double TimeProposal::sample(Rng& rng) const {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  std::size_t i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, it - cdf_.begin())) - 1;
  i = std::min(i, grid_.size() - 2);
  const double frac = (u - cdf_[i]) / (cdf_[i + 1] - cdf_[i]);
  return std::clamp(grid_[i] + frac * (grid_[i + 1] - grid_[i]), t_min_, 1.0);
}

double TimeProposal::density(double t) const {
  if (t < t_min_ || t > 1.0) return 0.0;
  auto it = std::upper_bound(grid_.begin(), grid_.end(), t);
  std::size_t i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, it - grid_.begin())) - 1;
  i = std::min(i, grid_.size() - 2);
  return (cdf_[i + 1] - cdf_[i]) / (grid_[i + 1] - grid_[i]);
}

DsmDraw draw_dsm(const TimeProposal& proposal, std::size_t rows, int dim, Rng& rng) {
  DsmDraw d;
  d.t.resize(static_cast<Eigen::Index>(rows));
  d.weight.resize(static_cast<Eigen::Index>(rows));
  const double uniform = 1.0 / (1.0 - proposal.t_min());
  for (Eigen::Index i = 0; i < d.t.size(); ++i) {
    d.t(i) = proposal.sample(rng);
    d.weight(i) = uniform / proposal.density(d.t(i));
  }
  d.noise = normal_matrix(static_cast<Eigen::Index>(rows), dim, rng);
  return d;
}

DsmLoss dsm_loss(const ScoreNetwork& net, const Matrix& z0, const DsmDraw& draw, const Matrix* condition,
                 const Matrix* coordinate_mask, bool control_variate) {
  if (z0.rows() == 0) throw ConfigError("dsm_loss: empty batch");
  if (draw.t.size() != z0.rows() || draw.noise.rows() != z0.rows() || draw.noise.cols() != z0.cols())
    throw ShapeError("dsm_loss: draw does not match batch");
  if (draw.weight.size() != 0 && draw.weight.size() != z0.rows()) throw ShapeError("dsm_loss: weight length does not match batch");
  const double n = static_cast<double>(z0.rows());
  Matrix z_t(z0.rows(), z0.cols());
  Matrix z_mean(z0.rows(), z0.cols());
  Matrix target(z0.rows(), z0.cols());
  for (Eigen::Index r = 0; r < z0.rows(); ++r) {
    const auto p = marginal_params(net.schedule(), draw.t(r));
    z_mean.row(r) = p.mean_coeff * z0.row(r);
    z_t.row(r) = z_mean.row(r) + p.std * draw.noise.row(r);
    target.row(r) = -draw.noise.row(r) / p.std;
  }
  if (coordinate_mask != nullptr) target = target.cwiseProduct(*coordinate_mask);
  Tape tape;
  Matrix diff = net.score_rows(z_t, draw.t, condition, &tape);
  if (coordinate_mask != nullptr) diff = diff.cwiseProduct(*coordinate_mask);
  diff -= target;
  Matrix weighted = draw.weight.size() != 0 ? Matrix(draw.weight.asDiagonal() * diff) : diff;
  DsmLoss out;
  out.value = weighted.cwiseProduct(diff).sum() / n;
  out.grad.assign(net.net().parameter_count(), 0.0);
  net.backward(tape, (2.0 / n) * weighted, draw.t, out.grad);
  if (control_variate) {
    Tape base;
    Matrix s_base = net.score_rows(z_mean, draw.t, condition, &base);
    if (coordinate_mask != nullptr) s_base = s_base.cwiseProduct(*coordinate_mask);
    Matrix w_target = draw.weight.size() != 0 ? Matrix(draw.weight.asDiagonal() * target) : target;
    out.value += 2.0 * w_target.cwiseProduct(s_base).sum() / n;
    net.backward(base, (2.0 / n) * w_target, draw.t, out.grad);
  }
  if (!std::isfinite(out.value)) throw NumericError("non-finite DSM loss");
  return out;
}

DsmLoss dsm_loss(const ScoreNetwork& net, const Matrix& z0, std::uint64_t seed, double t_min, const Matrix* condition) {
  Rng rng = make_rng(seed, 0xd5);
  return dsm_loss(net, z0, draw_dsm(static_cast<std::size_t>(z0.rows()), static_cast<int>(z0.cols()), t_min, rng), condition);
}

void DSMConfig::validate() const {
  if (weighting != 1.0) throw ConfigError("DSM weighting lambda(t) is fixed to 1");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) throw ConfigError("final learning-rate fraction must lie in (0, 1]");
  if (batch_size < 1 || epochs < 0) throw ConfigError("DSM batch size / epochs invalid");
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in (0, 1)");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout fraction must lie in [0, 1)");
  if (!(condition_dropout >= 0.0 && condition_dropout <= 1.0)) throw ConfigError("condition dropout must lie in [0, 1]");
}

PresenceStream make_presence_stream(std::size_t rows, std::size_t modalities, double missing_fraction, std::uint64_t seed) {
  if (!(missing_fraction >= 0.0 && missing_fraction <= 1.0)) throw ConfigError("missing fraction must lie in [0, 1]");
  std::vector<std::vector<bool>> present(rows, std::vector<bool>(modalities, true));
  const auto drop = static_cast<std::size_t>(std::llround(missing_fraction * static_cast<double>(rows)));
  std::vector<std::size_t> order(rows);
  for (std::size_t k = 0; k < modalities; ++k) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, 0x5000 + k);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < drop; ++i) present[order[i]][k] = false;
  }
  PresenceStream out;
  out.reserve(rows);
  for (auto& p : present) out.emplace_back(std::move(p));
  return out;
}

namespace {

Matrix normalized_rows(Matrix m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double norm = m.row(r).norm();
    if (norm > 0.0) m.row(r) /= norm;
  }
  return m;
}

// Condition input for the listed rows: normalized mean embedding over a random nonempty subset of
// present modalities, zeroed with probability `dropout`. Deterministic when rng is null (all present).
Matrix build_conditions(const ConditionSource& src, const std::vector<std::size_t>& rows, const PresenceStream* presence,
                        double dropout, Rng* rng) {
  const std::size_t M = src.per_modality.size();
  const auto C = src.per_modality.front().cols();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), C);
  std::bernoulli_distribution drop(dropout);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t row = rows[i];
    std::vector<std::size_t> avail;
    for (std::size_t k = 0; k < M; ++k)
      if (presence == nullptr || (*presence)[row].observed(k)) avail.push_back(k);
    if (avail.empty()) continue;
    std::vector<std::size_t> chosen;
    if (rng == nullptr) {
      chosen = avail;
    } else {
      if (drop(*rng)) continue;
      while (chosen.empty())
        for (auto k : avail)
          if (coin(*rng)) chosen.push_back(k);
    }
    RowVector acc = RowVector::Zero(C);
    for (auto k : chosen) acc += src.per_modality[k].row(static_cast<Eigen::Index>(row));
    out.row(static_cast<Eigen::Index>(i)) = acc / static_cast<double>(chosen.size());
  }
  return normalized_rows(std::move(out));
}

Matrix gather(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace

ScoreTrainResult train_score(ScoreNetwork& net, const Matrix& latents, const LatentLayout& layout, const DSMConfig& cfg,
                             const PresenceStream* presence, const ConditionSource* conditions, const LatentRefresh& refresh) {
  cfg.validate();
  if (latents.rows() == 0) throw ConfigError("train_score: empty latent dataset");
  if (latents.cols() != net.dim() || layout.total() != net.dim()) throw ShapeError("train_score: latent width mismatch");
  if (presence != nullptr && presence->size() != static_cast<std::size_t>(latents.rows()))
    throw ShapeError("train_score: presence stream length mismatch");
  if (conditions != nullptr) {
    if (net.condition_dim() == 0) throw ConfigError("train_score: conditions given to an unconditional score net");
    if (conditions->per_modality.size() != layout.num_modalities()) throw ShapeError("train_score: condition source size mismatch");
  }

  const auto n = static_cast<std::size_t>(latents.rows());
  const auto n_held = static_cast<std::size_t>(std::floor(cfg.heldout_fraction * static_cast<double>(n)));
  const std::size_t n_train = n - n_held;
  if (n_train == 0) throw ConfigError("train_score: no training rows after hold-out split");

  Matrix data = latents;
  Matrix coord_mask;
  auto fill_missing = [&](Matrix& z) {
    if (presence == nullptr) return;
    Rng fill_rng = make_rng(cfg.seed, 0xf111);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < layout.num_modalities(); ++k)
        if (!(*presence)[i].observed(k))
          for (int j = 0; j < layout.length(k); ++j) z(static_cast<Eigen::Index>(i), layout.offset(k) + j) = normal(fill_rng);
  };
  fill_missing(data);
  if (presence != nullptr) {
    coord_mask.resize(static_cast<Eigen::Index>(n), layout.total());
    for (std::size_t i = 0; i < n; ++i) coord_mask.row(static_cast<Eigen::Index>(i)) = (*presence)[i].coordinate_mask(layout);
  }

  std::vector<std::size_t> held_rows(n_held);
  std::iota(held_rows.begin(), held_rows.end(), n_train);
  std::optional<TimeProposal> proposal;
  if (cfg.time_sampling == TimeSampling::importance) proposal.emplace(net.schedule(), cfg.t_min);
  auto draw = [&](std::size_t rows, Rng& rng) {
    return proposal ? draw_dsm(*proposal, rows, net.dim(), rng) : draw_dsm(rows, net.dim(), cfg.t_min, rng);
  };
  DsmDraw held_draw;
  Matrix held_cond;
  if (n_held > 0) {
    Rng held_rng = make_rng(cfg.seed, 0x4e1d);
    held_draw = draw(n_held, held_rng);
    if (conditions != nullptr) held_cond = build_conditions(*conditions, held_rows, presence, 0.0, nullptr);
  }
  auto heldout_loss = [&]() {
    if (n_held == 0) return 0.0;
    Matrix z = gather(data, held_rows);
    Matrix mask = presence != nullptr ? gather(coord_mask, held_rows) : Matrix();
    return dsm_loss(net, z, held_draw, conditions != nullptr ? &held_cond : nullptr, presence != nullptr ? &mask : nullptr,
                    cfg.control_variate).value;
  };

  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  AdamState state(net.net().parameter_count(), adam_cfg);

  ScoreTrainResult result;
  std::vector<double> best_params(net.net().parameters().begin(), net.net().parameters().end());
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(n_train);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double progress = cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
    state.config.learning_rate =
        cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::acos(-1.0) * progress)));
    if (refresh) {
      Matrix fresh = refresh(epoch);
      if (fresh.rows() != latents.rows() || fresh.cols() != latents.cols()) throw ShapeError("latent refresh changed shape");
      data = std::move(fresh);
      fill_missing(data);
    }
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      Matrix z = gather(data, rows);
      DsmDraw batch_draw = draw(rows.size(), rng);
      Matrix cond;
      if (conditions != nullptr) cond = build_conditions(*conditions, rows, presence, cfg.condition_dropout, &rng);
      Matrix mask;
      if (presence != nullptr) mask = gather(coord_mask, rows);
      DsmLoss l = dsm_loss(net, z, batch_draw, conditions != nullptr ? &cond : nullptr, presence != nullptr ? &mask : nullptr,
                           cfg.control_variate);
      if (cfg.grad_clip > 0.0) clip_gradient_norm(l.grad, cfg.grad_clip);
      adam_step(state, net.net().parameters(), l.grad);
      loss_sum += l.value * static_cast<double>(rows.size());
    }
    ScoreEpoch rec{epoch, loss_sum / static_cast<double>(n_train), heldout_loss()};
    const double criterion = n_held > 0 ? rec.heldout_loss : rec.train_loss;
    if (criterion < best_loss) {
      best_loss = criterion;
      result.best_epoch = epoch;
      best_params.assign(net.net().parameters().begin(), net.net().parameters().end());
    }
    result.history.push_back(rec);
  }
  net.net().set_parameters(best_params);
  return result;
}

void save_score(Checkpoint& ck, const ScoreNetwork& net, const LatentLayout& layout, const LatentNormalizer& normalizer) {
  ck.put_net("score.net", net.net());
  io::ByteWriter w;
  w.put<double>(net.schedule().beta_min);
  w.put<double>(net.schedule().beta_max);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.schedule().steps));
  ck.put_raw("score.schedule", w.take());
  const std::vector<double> spec{static_cast<double>(net.spec().time_embed_dim), static_cast<double>(net.spec().condition_dim),
                                 static_cast<double>(static_cast<int>(net.spec().activation))};
  ck.put_f32("score.spec", spec);
  std::vector<double> dims(layout.lengths().begin(), layout.lengths().end());
  ck.put_f32("score.layout", dims);
  ck.put_f32("score.normalizer.mean", std::span<const double>(normalizer.mean.data(), static_cast<std::size_t>(normalizer.mean.size())));
  ck.put_f32("score.normalizer.scale", std::span<const double>(normalizer.scale.data(), static_cast<std::size_t>(normalizer.scale.size())));
}

LoadedScore load_score(const Checkpoint& ck) {
  io::ByteReader r(ck.raw("score.schedule"));
  VPSDESchedule schedule;
  schedule.beta_min = r.get<double>();
  schedule.beta_max = r.get<double>();
  schedule.steps = static_cast<int>(r.get<std::uint32_t>());
  const auto spec_vals = ck.get_f32("score.spec");
  if (spec_vals.size() != 3) throw FormatError("score.spec section malformed");
  DenseNet net = ck.get_net("score.net");
  ScoreNetSpec spec;
  spec.time_embed_dim = static_cast<int>(spec_vals[0]);
  spec.condition_dim = static_cast<int>(spec_vals[1]);
  spec.activation = static_cast<Activation>(static_cast<int>(spec_vals[2]));
  spec.latent_dim = net.output_width();
  spec.hidden.assign(net.widths().begin() + 1, net.widths().end() - 1);
  std::vector<int> dims;
  for (double d : ck.get_f32("score.layout")) dims.push_back(static_cast<int>(d));
  const auto mean = ck.get_f32("score.normalizer.mean");
  const auto scale = ck.get_f32("score.normalizer.scale");
  LatentNormalizer normalizer{Eigen::Map<const RowVector>(mean.data(), static_cast<Eigen::Index>(mean.size())),
                              Eigen::Map<const RowVector>(scale.data(), static_cast<Eigen::Index>(scale.size()))};
  return {ScoreNetwork(spec, schedule, std::move(net)), LatentLayout(dims), std::move(normalizer)};
}

}  // namespace mmscore
