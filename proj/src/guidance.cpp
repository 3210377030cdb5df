#include "mmscore/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace mmscore {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix gather(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Row-wise softmax of a matrix, numerically stabilized.
Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    RowVector e = (logits.row(r).array() - mx).exp().matrix();
    out.row(r) = e / e.sum();
  }
  return out;
}

// Mean cross-entropy of each row against its diagonal target.
double diagonal_cross_entropy(const Matrix& logits) {
  double acc = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    acc += lse - logits(r, r);
  }
  return acc / static_cast<double>(logits.rows());
}

Matrix normalize_rows(const Matrix& u, Vector& norms) {
  norms = u.rowwise().norm();
  Matrix e = u;
  for (Eigen::Index r = 0; r < u.rows(); ++r)
    if (norms(r) > 0.0) e.row(r) /= norms(r);
  return e;
}

// Gradient through e = u / ||u|| for each row.
Matrix normalize_backward(const Matrix& e, const Vector& norms, const Matrix& de) {
  Matrix du(e.rows(), e.cols());
  for (Eigen::Index r = 0; r < e.rows(); ++r) {
    if (norms(r) <= 0.0) {
      du.row(r).setZero();
      continue;
    }
    du.row(r) = (de.row(r) - e.row(r) * e.row(r).dot(de.row(r))) / norms(r);
  }
  return du;
}

}  // namespace

EnergyNetwork::EnergyNetwork(int latent_dim, int num_modalities, std::vector<int> hidden, bool shared, std::uint64_t seed)
    : latent_dim_(latent_dim), num_modalities_(num_modalities), shared_(shared) {
  if (latent_dim < 1 || num_modalities < 2) throw ConfigError("energy network needs latent_dim >= 1 and >= 2 modalities");
  const int input = shared ? 2 * latent_dim + 2 * num_modalities : 2 * latent_dim;
  const std::size_t count = shared ? 1 : static_cast<std::size_t>(num_modalities * (num_modalities - 1));
  for (std::size_t i = 0; i < count; ++i)
    nets_.push_back(make_mlp(input, hidden, 1, Activation::softplus, Activation::identity, mix_seed(seed, i)));
}

EnergyNetwork::EnergyNetwork(int latent_dim, int num_modalities, bool shared, std::vector<DenseNet> nets)
    : latent_dim_(latent_dim), num_modalities_(num_modalities), shared_(shared), nets_(std::move(nets)) {
  const std::size_t expected = shared ? 1 : static_cast<std::size_t>(num_modalities * (num_modalities - 1));
  if (nets_.size() != expected) throw FormatError("energy network count does not match its sharing mode");
}

std::size_t EnergyNetwork::net_index(std::size_t o, std::size_t u) const {
  const auto M = static_cast<std::size_t>(num_modalities_);
  if (o >= M || u >= M || o == u) throw ConfigError("energy pair must name two distinct modalities");
  if (shared_) return 0;
  return o * (M - 1) + (u < o ? u : u - 1);
}

Matrix EnergyNetwork::build_input(const Matrix& z_o, const Matrix& z_u, std::size_t o, std::size_t u) const {
  if (z_o.cols() != latent_dim_ || z_u.cols() != latent_dim_ || z_o.rows() != z_u.rows())
    throw ShapeError("energy network: latent shape mismatch");
  net_index(o, u);
  const int d = latent_dim_;
  Matrix in = Matrix::Zero(z_o.rows(), nets_.front().input_width());
  in.leftCols(d) = z_o;
  in.middleCols(d, d) = z_u;
  if (shared_) {
    in.col(2 * d + static_cast<Eigen::Index>(o)).setOnes();
    in.col(2 * d + num_modalities_ + static_cast<Eigen::Index>(u)).setOnes();
  }
  return in;
}

Vector EnergyNetwork::energy(const Matrix& z_o, const Matrix& z_u, std::size_t o, std::size_t u) const {
  return nets_[net_index(o, u)].forward(build_input(z_o, z_u, o, u)).col(0);
}

Matrix EnergyNetwork::grad_unobserved(const Matrix& z_o, const Matrix& z_u, std::size_t o, std::size_t u) const {
  const auto& net = nets_[net_index(o, u)];
  Tape tape;
  net.forward(build_input(z_o, z_u, o, u), tape);
  Matrix d_in = net.backward_input(tape, Matrix::Ones(z_o.rows(), 1));
  return d_in.middleCols(latent_dim_, latent_dim_);
}

void EnergyNetwork::save(Checkpoint& ck, const std::string& prefix) const {
  const std::vector<double> meta{static_cast<double>(latent_dim_), static_cast<double>(num_modalities_), shared_ ? 1.0 : 0.0};
  ck.put_f32(prefix + ".meta", meta);
  for (std::size_t i = 0; i < nets_.size(); ++i) ck.put_net(prefix + ".net" + std::to_string(i), nets_[i]);
}

EnergyNetwork EnergyNetwork::load(const Checkpoint& ck, const std::string& prefix) {
  const auto meta = ck.get_f32(prefix + ".meta");
  if (meta.size() != 3) throw FormatError("energy meta section malformed");
  const int d = static_cast<int>(meta[0]);
  const int M = static_cast<int>(meta[1]);
  const bool shared = meta[2] != 0.0;
  const std::size_t count = shared ? 1 : static_cast<std::size_t>(M * (M - 1));
  std::vector<DenseNet> nets;
  for (std::size_t i = 0; i < count; ++i) nets.push_back(ck.get_net(prefix + ".net" + std::to_string(i)));
  return EnergyNetwork(d, M, shared, std::move(nets));
}

NceDraw draw_nce(const NcePairs& pairs, double t_min, Rng& rng) {
  NceDraw d;
  const auto n = pairs.z_o.rows();
  d.t.resize(n);
  std::uniform_real_distribution<double> uniform(t_min, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) d.t(i) = uniform(rng);
  d.noise_o = normal_matrix(n, pairs.z_o.cols(), rng);
  d.noise_u = normal_matrix(n, pairs.z_u.cols(), rng);
  d.noise_n = normal_matrix(n, pairs.z_n.cols(), rng);
  return d;
}

NceLoss nce_loss(const EnergyNetwork& energy, const NcePairs& pairs, const VPSDESchedule& schedule, const NceDraw* draw) {
  const auto n = static_cast<std::size_t>(pairs.z_o.rows());
  if (n == 0) throw ConfigError("nce_loss: empty batch");
  if (pairs.z_u.rows() != pairs.z_o.rows() || pairs.z_n.rows() != pairs.z_o.rows() || pairs.modality_o.size() != n ||
      pairs.modality_u.size() != n)
    throw ShapeError("nce_loss: positive and negative pair counts differ");

  Matrix z_o = pairs.z_o, z_u = pairs.z_u, z_n = pairs.z_n;
  if (draw != nullptr) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const auto p = marginal_params(schedule, draw->t(r));
      z_o.row(r) = p.mean_coeff * z_o.row(r) + p.std * draw->noise_o.row(r);
      z_u.row(r) = p.mean_coeff * z_u.row(r) + p.std * draw->noise_u.row(r);
      z_n.row(r) = p.mean_coeff * z_n.row(r) + p.std * draw->noise_n.row(r);
    }
  }

  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[{pairs.modality_o[i], pairs.modality_u[i]}].push_back(i);

  NceLoss out;
  out.grads.resize(energy.nets().size());
  const double inv_n = 1.0 / static_cast<double>(n);
  double pos_sum = 0.0, neg_sum = 0.0;
  for (const auto& [key, rows] : groups) {
    const auto [o, u] = key;
    const std::size_t idx = energy.net_index(o, u);
    const auto& net = energy.nets()[idx];
    const auto g = static_cast<Eigen::Index>(rows.size());
    Matrix zo_g = gather(z_o, rows);
    Matrix both(2 * g, net.input_width());
    both.topRows(g) = energy.build_input(zo_g, gather(z_u, rows), o, u);
    both.bottomRows(g) = energy.build_input(zo_g, gather(z_n, rows), o, u);
    Tape tape;
    Matrix e = net.forward(both, tape);
    Matrix de(2 * g, 1);
    for (Eigen::Index r = 0; r < g; ++r) {
      const double ep = e(r, 0), en = e(g + r, 0);
      if (!std::isfinite(ep) || !std::isfinite(en)) throw NumericError("nce_loss: non-finite energy");
      out.value += inv_n * (softplus(ep) + softplus(-en));
      pos_sum += ep;
      neg_sum += en;
      de(r, 0) = inv_n * sigmoid(ep);
      de(g + r, 0) = -inv_n * sigmoid(-en);
    }
    if (out.grads[idx].empty()) out.grads[idx].assign(net.parameter_count(), 0.0);
    net.backward(tape, de, out.grads[idx]);
  }
  out.mean_positive_energy = pos_sum * inv_n;
  out.mean_negative_energy = neg_sum * inv_n;
  return out;
}

NcePairs sample_nce_pairs(const std::vector<Matrix>& latents, const std::vector<std::uint32_t>& labels,
                          const std::vector<std::size_t>& rows, Rng& rng) {
  const std::size_t M = latents.size();
  if (M < 2) throw ConfigError("NCE pairs need at least two modalities");
  const std::size_t n_all = labels.size();
  const auto d = latents.front().cols();
  NcePairs p;
  p.z_o.resize(static_cast<Eigen::Index>(rows.size()), d);
  p.z_u.resize(static_cast<Eigen::Index>(rows.size()), d);
  p.z_n.resize(static_cast<Eigen::Index>(rows.size()), d);
  std::uniform_int_distribution<std::size_t> pick_mod(0, M - 1);
  std::uniform_int_distribution<std::size_t> pick_other(0, M - 2);
  std::uniform_int_distribution<std::size_t> pick_row(0, n_all - 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t o = pick_mod(rng);
    std::size_t u = pick_other(rng);
    if (u >= o) ++u;
    std::size_t neg = pick_row(rng);
    for (int attempt = 0; labels[neg] == labels[rows[i]]; ++attempt) {
      if (attempt > 10000) throw ConfigError("cannot find an incoherent negative (single-class data?)");
      neg = pick_row(rng);
    }
    const auto r = static_cast<Eigen::Index>(i);
    p.z_o.row(r) = latents[o].row(static_cast<Eigen::Index>(rows[i]));
    p.z_u.row(r) = latents[u].row(static_cast<Eigen::Index>(rows[i]));
    p.z_n.row(r) = latents[u].row(static_cast<Eigen::Index>(neg));
    p.modality_o.push_back(o);
    p.modality_u.push_back(u);
  }
  return p;
}

namespace {
void require_ebm_data(const std::vector<Matrix>& latents, const std::vector<std::uint32_t>& labels) {
  if (latents.size() < 2) throw ConfigError("energy training needs at least two modalities");
  for (const auto& l : latents)
    if (static_cast<std::size_t>(l.rows()) != labels.size()) throw ShapeError("latent rows and labels differ");
  if (labels.empty()) throw ConfigError("energy training needs data");
  if (std::all_of(labels.begin(), labels.end(), [&](auto l) { return l == labels.front(); }))
    throw ConfigError("single-class dataset: cannot form incoherent negatives");
}
}  // namespace

std::vector<EbmEpoch> train_ebm(EnergyNetwork& energy, const std::vector<Matrix>& latents,
                                 const std::vector<std::uint32_t>& labels, const VPSDESchedule& schedule,
                                 const EbmTrainConfig& cfg) {
  require_ebm_data(latents, labels);
  if (static_cast<int>(latents.size()) != energy.num_modalities() || latents.front().cols() != energy.latent_dim())
    throw ShapeError("energy network does not match latent layout");
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  std::vector<AdamState> states;
  for (const auto& net : energy.nets()) states.emplace_back(net.parameter_count(), adam_cfg);

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EbmEpoch> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t total = cfg.pairs_per_epoch > 0 ? cfg.pairs_per_epoch : order.size();
    double sum = 0.0;
    for (std::size_t start = 0; start < total; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(total, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> rows;
      for (std::size_t i = start; i < end; ++i) rows.push_back(order[i % order.size()]);
      NcePairs pairs = sample_nce_pairs(latents, labels, rows, rng);
      NceLoss l;
      if (cfg.perturb) {
        NceDraw draw = draw_nce(pairs, cfg.t_min, rng);
        l = nce_loss(energy, pairs, schedule, &draw);
      } else {
        l = nce_loss(energy, pairs, schedule, nullptr);
      }
      for (std::size_t i = 0; i < energy.nets().size(); ++i)
        if (!l.grads[i].empty()) adam_step(states[i], energy.nets()[i].parameters(), l.grads[i]);
      sum += l.value * static_cast<double>(rows.size());
    }
    history.push_back({epoch, sum / static_cast<double>(total)});
  }
  return history;
}

double energy_margin(const EnergyNetwork& energy, const std::vector<Matrix>& latents,
                     const std::vector<std::uint32_t>& labels, const VPSDESchedule& schedule, std::optional<double> t,
                     std::uint64_t seed) {
  require_ebm_data(latents, labels);
  Rng rng = make_rng(seed, 0x3a);
  std::vector<std::size_t> rows(labels.size());
  std::iota(rows.begin(), rows.end(), 0);
  NcePairs pairs = sample_nce_pairs(latents, labels, rows, rng);
  NceLoss l;
  if (t.has_value()) {
    NceDraw draw = draw_nce(pairs, 0.0, rng);
    draw.t.setConstant(*t);
    l = nce_loss(energy, pairs, schedule, &draw);
  } else {
    l = nce_loss(energy, pairs, schedule, nullptr);
  }
  return l.mean_negative_energy - l.mean_positive_energy;
}

std::vector<Matrix> decouple_modalities(const std::vector<Matrix>& latents, std::uint64_t seed) {
  std::vector<Matrix> out;
  for (std::size_t k = 0; k < latents.size(); ++k) {
    const Matrix& m = latents[k];
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m.rows()));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, k);
    std::shuffle(order.begin(), order.end(), rng);
    Matrix p(m.rows(), m.cols());
    for (std::size_t i = 0; i < order.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = m.row(order[i]);
    out.push_back(std::move(p));
  }
  return out;
}

ContrastiveEncoder::ContrastiveEncoder(const std::vector<int>& input_dims, int embed_dim, std::vector<int> hidden,
                                       double temperature, std::uint64_t seed)
    : log_temperature_(std::log(temperature)) {
  if (input_dims.size() < 2 || embed_dim < 1) throw ConfigError("contrastive encoder needs >= 2 modalities and embed_dim >= 1");
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be > 0");
  for (std::size_t k = 0; k < input_dims.size(); ++k)
    nets_.push_back(make_mlp(input_dims[k], hidden, embed_dim, Activation::relu, Activation::identity, mix_seed(seed, k)));
}

ContrastiveEncoder::ContrastiveEncoder(std::vector<DenseNet> nets, double log_temperature)
    : nets_(std::move(nets)), log_temperature_(log_temperature) {
  if (nets_.size() < 2) throw ConfigError("contrastive encoder needs >= 2 modalities");
  for (const auto& n : nets_)
    if (n.output_width() != nets_.front().output_width()) throw ConfigError("contrastive encoders must share embedding width");
}

double ContrastiveEncoder::temperature() const { return std::exp(log_temperature_); }

Matrix ContrastiveEncoder::embed(std::size_t k, const Matrix& x) const {
  Vector norms;
  return normalize_rows(nets_.at(k).forward(x), norms);
}

void ContrastiveEncoder::save(Checkpoint& ck, const std::string& prefix) const {
  const std::vector<double> meta{static_cast<double>(nets_.size()), log_temperature_};
  ck.put_f32(prefix + ".meta", meta);
  for (std::size_t k = 0; k < nets_.size(); ++k) ck.put_net(prefix + ".net" + std::to_string(k), nets_[k]);
}

ContrastiveEncoder ContrastiveEncoder::load(const Checkpoint& ck, const std::string& prefix) {
  const auto meta = ck.get_f32(prefix + ".meta");
  if (meta.size() != 2) throw FormatError("contrastive meta section malformed");
  std::vector<DenseNet> nets;
  for (int k = 0; k < static_cast<int>(meta[0]); ++k) nets.push_back(ck.get_net(prefix + ".net" + std::to_string(k)));
  return ContrastiveEncoder(std::move(nets), meta[1]);
}

double info_nce_from_embeddings(const Matrix& e_a, const Matrix& e_b, double temperature) {
  if (e_a.rows() < 2 || e_a.rows() != e_b.rows()) throw ConfigError("InfoNCE needs matched batches of at least two rows");
  Matrix logits = (e_a * e_b.transpose()) / temperature;
  return 0.5 * (diagonal_cross_entropy(logits) + diagonal_cross_entropy(logits.transpose()));
}

ContrastiveLoss contrastive_loss(const ContrastiveEncoder& enc, const Matrix& x_a, const Matrix& x_b, std::size_t a,
                                 std::size_t b) {
  if (x_a.rows() < 2) throw ConfigError("contrastive loss needs a batch of at least two (no negatives otherwise)");
  if (x_a.rows() != x_b.rows()) throw ShapeError("contrastive loss: batch sizes differ");
  if (a == b || a >= enc.num_modalities() || b >= enc.num_modalities()) throw ConfigError("contrastive pair must be two distinct modalities");
  const auto& net_a = enc.nets()[a];
  const auto& net_b = enc.nets()[b];
  const double n = static_cast<double>(x_a.rows());
  const double tau = enc.temperature();

  Tape tape_a, tape_b;
  Vector norm_a, norm_b;
  Matrix e_a = normalize_rows(net_a.forward(x_a, tape_a), norm_a);
  Matrix e_b = normalize_rows(net_b.forward(x_b, tape_b), norm_b);
  Matrix logits = (e_a * e_b.transpose()) / tau;

  ContrastiveLoss out;
  out.modality_a = a;
  out.modality_b = b;
  out.value = 0.5 * (diagonal_cross_entropy(logits) + diagonal_cross_entropy(logits.transpose()));
  if (!std::isfinite(out.value)) throw NumericError("contrastive loss is not finite");

  const Matrix eye = Matrix::Identity(logits.rows(), logits.cols());
  Matrix d_logits = (0.5 / n) * ((softmax_rows(logits) - eye) + (softmax_rows(logits.transpose()) - eye).transpose());
  out.log_temperature_grad = -(d_logits.cwiseProduct(logits)).sum();
  Matrix d_ea = (d_logits * e_b) / tau;
  Matrix d_eb = (d_logits.transpose() * e_a) / tau;

  out.grads.resize(enc.num_modalities());
  out.grads[a].assign(net_a.parameter_count(), 0.0);
  out.grads[b].assign(net_b.parameter_count(), 0.0);
  net_a.backward(tape_a, normalize_backward(e_a, norm_a, d_ea), out.grads[a]);
  net_b.backward(tape_b, normalize_backward(e_b, norm_b, d_eb), out.grads[b]);
  return out;
}

ContrastiveLoss contrastive_loss(const ContrastiveEncoder& enc, const std::vector<Matrix>& batch, std::uint64_t seed) {
  if (batch.size() != enc.num_modalities()) throw ShapeError("contrastive loss: modality count mismatch");
  Rng rng = make_rng(seed, 0xc1);
  std::uniform_int_distribution<std::size_t> pick(0, batch.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_other(0, batch.size() - 2);
  const std::size_t a = pick(rng);
  std::size_t b = pick_other(rng);
  if (b >= a) ++b;
  return contrastive_loss(enc, batch[a], batch[b], a, b);
}

std::vector<double> train_contrastive(ContrastiveEncoder& enc, const std::vector<Matrix>& data,
                                      const ContrastiveTrainConfig& cfg) {
  if (data.size() != enc.num_modalities()) throw ShapeError("train_contrastive: modality count mismatch");
  const auto n = static_cast<std::size_t>(data.front().rows());
  if (n < 2) throw ConfigError("train_contrastive: need at least two rows");
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  std::vector<AdamState> states;
  for (const auto& net : enc.nets()) states.emplace_back(net.parameter_count(), adam_cfg);
  AdamState temp_state(1, adam_cfg);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0, count = 0.0;
    for (std::size_t start = 0; start + 1 < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      if (end - start < 2) break;
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<Matrix> batch;
      for (const auto& m : data) batch.push_back(gather(m, rows));
      ContrastiveLoss l = contrastive_loss(enc, batch, mix_seed(cfg.seed, ++step));
      adam_step(states[l.modality_a], enc.nets()[l.modality_a].parameters(), l.grads[l.modality_a]);
      adam_step(states[l.modality_b], enc.nets()[l.modality_b].parameters(), l.grads[l.modality_b]);
      double lt = enc.log_temperature();
      const double g = l.log_temperature_grad;
      adam_step(temp_state, std::span<double>(&lt, 1), std::span<const double>(&g, 1));
      enc.log_temperature() = lt;
      sum += l.value;
      count += 1.0;
    }
    history.push_back(count > 0 ? sum / count : 0.0);
  }
  return history;
}

Matrix condition_embedding(const ContrastiveEncoder& enc, const std::vector<Matrix>& x, const ModalityMask& mask,
                           std::size_t unconditional_rows) {
  if (mask.size() != enc.num_modalities() || x.size() != enc.num_modalities())
    throw ShapeError("condition_embedding: modality count mismatch");
  if (!mask.any_observed()) {
    if (unconditional_rows == 0) throw ConfigError("condition_embedding: no observed modality outside unconditional mode");
    return Matrix::Zero(static_cast<Eigen::Index>(unconditional_rows), enc.embed_dim());
  }
  Matrix acc;
  for (std::size_t k : mask.observed_indices()) {
    Matrix e = enc.embed(k, x[k]);
    if (acc.size() == 0) acc = Matrix::Zero(e.rows(), e.cols());
    if (e.rows() != acc.rows()) throw ShapeError("condition_embedding: observed batches differ in size");
    acc += e;
  }
  acc /= static_cast<double>(mask.observed_indices().size());
  Vector norms;
  return normalize_rows(acc, norms);
}

double retrieval_accuracy(const ContrastiveEncoder& enc, const Matrix& x_a, const Matrix& x_b, std::size_t a, std::size_t b) {
  Matrix sim = enc.embed(a, x_a) * enc.embed(b, x_b).transpose();
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < sim.rows(); ++r) {
    Eigen::Index best;
    sim.row(r).maxCoeff(&best);
    if (best == r) ++hits;
  }
  return sim.rows() > 0 ? static_cast<double>(hits) / static_cast<double>(sim.rows()) : 0.0;
}

}  // namespace mmscore
