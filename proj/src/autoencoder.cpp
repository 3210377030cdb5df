#include "mmscore/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace mmscore {

namespace {

constexpr double kProbFloor = 1e-6;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

DenseNet build_encoder(const AutoencoderSpec& s, std::uint64_t seed) {
  const int out = s.kind == AutoencoderKind::vae ? 2 * s.latent_dim : s.latent_dim;
  return make_mlp(s.input_dim, s.hidden, out, s.hidden_activation, Activation::identity, mix_seed(seed, 1));
}

DenseNet build_decoder(const AutoencoderSpec& s, std::uint64_t seed) {
  std::vector<int> hidden(s.hidden.rbegin(), s.hidden.rend());
  return make_mlp(s.latent_dim, hidden, s.input_dim, s.hidden_activation, Activation::identity, mix_seed(seed, 2));
}

}  // namespace

std::string to_string(AutoencoderKind k) { return k == AutoencoderKind::vae ? "vae" : "rae"; }
std::string to_string(Likelihood l) { return l == Likelihood::gaussian ? "gaussian" : "bernoulli"; }
std::string to_string(EncodeMode m) { return m == EncodeMode::sample ? "sample" : "mean"; }

AutoencoderKind autoencoder_kind_from_string(const std::string& s) {
  if (s == "vae") return AutoencoderKind::vae;
  if (s == "rae") return AutoencoderKind::rae;
  throw ConfigError("unknown autoencoder kind '" + s + "' (expected vae or rae)");
}

Likelihood likelihood_from_string(const std::string& s) {
  if (s == "gaussian") return Likelihood::gaussian;
  if (s == "bernoulli") return Likelihood::bernoulli;
  throw ConfigError("unknown likelihood '" + s + "' (expected gaussian or bernoulli)");
}

EncodeMode encode_mode_from_string(const std::string& s) {
  if (s == "sample") return EncodeMode::sample;
  if (s == "mean") return EncodeMode::mean;
  throw ConfigError("unknown encode mode '" + s + "' (expected sample or mean)");
}

void AutoencoderSpec::validate() const {
  if (input_dim < 1 || latent_dim < 1) throw ConfigError("autoencoder dimensions must be positive");
  if (kind == AutoencoderKind::vae) {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("VAE beta must be finite and >= 0");
    if (!(prior_std > 0.0)) throw ConfigError("VAE prior std must be > 0");
  } else {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("RAE latent penalty must be finite and >= 0");
    if (!(decoder_noise_std >= 0.0) || !std::isfinite(decoder_noise_std)) throw ConfigError("RAE decoder noise std must be finite and >= 0");
    if (likelihood != Likelihood::gaussian) throw ConfigError("RAE uses a squared-error reconstruction (gaussian likelihood)");
  }
}

ModalityAutoencoder::ModalityAutoencoder(AutoencoderSpec spec, DenseNet encoder, DenseNet decoder)
    : spec_(std::move(spec)), encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
  spec_.validate();
  const int enc_out = spec_.kind == AutoencoderKind::vae ? 2 * spec_.latent_dim : spec_.latent_dim;
  if (encoder_.input_width() != spec_.input_dim || encoder_.output_width() != enc_out)
    throw ConfigError("encoder widths do not match the autoencoder spec");
  if (decoder_.input_width() != spec_.latent_dim || decoder_.output_width() != spec_.input_dim)
    throw ConfigError("decoder widths do not match the autoencoder spec");
}

Matrix ModalityAutoencoder::encode_mean(const Matrix& x) const {
  Rng unused(0);
  return encode(x, EncodeMode::mean, unused);
}

Matrix ModalityAutoencoder::decode(const Matrix& z) const {
  if (z.cols() != spec_.latent_dim) throw ShapeError("decode: latent width mismatch");
  Matrix out = decoder_.forward(z);
  if (spec_.likelihood == Likelihood::bernoulli)
    out = out.unaryExpr([](double v) { return std::clamp(sigmoid(v), kProbFloor, 1.0 - kProbFloor); });
  return out;
}

AutoencoderLoss ModalityAutoencoder::loss(const Matrix& x, std::uint64_t seed) const {
  Rng rng = make_rng(seed, 0xae);
  return loss(x, normal_matrix(x.rows(), spec_.latent_dim, rng));
}

double ModalityAutoencoder::reconstruction_term(const Matrix& x, const Matrix& out, Matrix& d_out) const {
  d_out.resize(out.rows(), out.cols());
  double nll = 0.0;
  if (spec_.likelihood == Likelihood::gaussian) {
    d_out = out - x;
    nll = 0.5 * d_out.squaredNorm();
  } else {
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        const double s = sigmoid(out(r, c));
        const double p = std::clamp(s, kProbFloor, 1.0 - kProbFloor);
        const double t = x(r, c);
        nll -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
        d_out(r, c) = (s > kProbFloor && s < 1.0 - kProbFloor) ? s - t : 0.0;
      }
  }
  if (!std::isfinite(nll)) throw NumericError("non-finite reconstruction term");
  return nll;
}

double ModalityAutoencoder::reconstruction_nll(const Matrix& x, const Matrix& z, double weight,
                                               std::span<double> decoder_grad) const {
  if (x.cols() != spec_.input_dim || z.cols() != spec_.latent_dim || x.rows() != z.rows())
    throw ShapeError("reconstruction_nll: shape mismatch");
  Tape tape;
  Matrix out = decoder_.forward(z, tape);
  Matrix d_out;
  const double nll = reconstruction_term(x, out, d_out);
  decoder_.backward(tape, d_out * weight, decoder_grad);
  return nll;
}

void ModalityAutoencoder::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_string(prefix + ".kind", to_string(spec_.kind));
  ck.put_string(prefix + ".likelihood", to_string(spec_.likelihood));
  const std::vector<double> scalars{spec_.beta, spec_.prior_std, spec_.decoder_noise_std};
  ck.put_f32(prefix + ".scalars", scalars);
  ck.put_net(prefix + ".encoder", encoder_);
  ck.put_net(prefix + ".decoder", decoder_);
}

Vector gaussian_kl(const Matrix& mu, const Matrix& logvar, double prior_std) {
  const double prior_var = prior_std * prior_std;
  Vector kl(mu.rows());
  for (Eigen::Index r = 0; r < mu.rows(); ++r) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < mu.cols(); ++c) {
      const double v = std::exp(logvar(r, c));
      acc += 0.5 * ((mu(r, c) * mu(r, c) + v) / prior_var - 1.0 - logvar(r, c) + std::log(prior_var));
    }
    kl(r) = acc;
  }
  return kl;
}

ModalityVAE::ModalityVAE(AutoencoderSpec spec, std::uint64_t seed)
    : ModalityAutoencoder(spec, build_encoder(spec, seed), build_decoder(spec, seed)) {}

ModalityVAE::ModalityVAE(AutoencoderSpec spec, DenseNet encoder, DenseNet decoder)
    : ModalityAutoencoder(std::move(spec), std::move(encoder), std::move(decoder)) {}

std::pair<Matrix, Matrix> ModalityVAE::posterior(const Matrix& x) const {
  if (x.cols() != spec_.input_dim) throw ShapeError("encode: input width mismatch");
  Matrix h = encoder_.forward(x);
  const int d = spec_.latent_dim;
  return {h.leftCols(d), h.rightCols(d)};
}

Matrix ModalityVAE::encode(const Matrix& x, EncodeMode mode, Rng& rng) const {
  auto [mu, logvar] = posterior(x);
  if (mode == EncodeMode::mean) return mu;
  Matrix eps = normal_matrix(mu.rows(), mu.cols(), rng);
  return mu + ((0.5 * logvar.array()).exp() * eps.array()).matrix();
}

AutoencoderLoss ModalityVAE::loss(const Matrix& x, const Matrix& noise) const {
  if (x.rows() == 0) throw ConfigError("vae_loss: empty batch");
  if (x.cols() != spec_.input_dim || noise.rows() != x.rows() || noise.cols() != spec_.latent_dim)
    throw ShapeError("vae_loss: shape mismatch");
  const double n = static_cast<double>(x.rows());
  const int d = spec_.latent_dim;

  Tape enc_tape, dec_tape;
  Matrix h = encoder_.forward(x, enc_tape);
  Matrix mu = h.leftCols(d);
  Matrix logvar = h.rightCols(d);
  Matrix std_q = (0.5 * logvar.array()).exp().matrix();
  Matrix z = mu + std_q.cwiseProduct(noise);
  Matrix out = decoder_.forward(z, dec_tape);

  AutoencoderLoss result;
  Matrix d_out;
  const double rec = reconstruction_term(x, out, d_out);
  const Vector kl = gaussian_kl(mu, logvar, spec_.prior_std);
  if (!kl.allFinite()) throw NumericError("non-finite KL term");
  result.reconstruction = rec / n;
  result.regularizer = spec_.beta * kl.sum() / n;
  result.total = result.reconstruction + result.regularizer;

  result.decoder_grad.assign(decoder_.parameter_count(), 0.0);
  result.encoder_grad.assign(encoder_.parameter_count(), 0.0);
  Matrix dz = decoder_.backward(dec_tape, d_out / n, result.decoder_grad);

  const double prior_var = spec_.prior_std * spec_.prior_std;
  Matrix dh(x.rows(), 2 * d);
  dh.leftCols(d) = dz + (spec_.beta / (n * prior_var)) * mu;
  dh.rightCols(d) = (dz.array() * 0.5 * std_q.array() * noise.array() +
                     (spec_.beta / n) * 0.5 * ((logvar.array().exp() / prior_var) - 1.0))
                        .matrix();
  encoder_.backward(enc_tape, dh, result.encoder_grad);
  return result;
}

ModalityRAE::ModalityRAE(AutoencoderSpec spec, std::uint64_t seed)
    : ModalityAutoencoder(spec, build_encoder(spec, seed), build_decoder(spec, seed)) {}

ModalityRAE::ModalityRAE(AutoencoderSpec spec, DenseNet encoder, DenseNet decoder)
    : ModalityAutoencoder(std::move(spec), std::move(encoder), std::move(decoder)) {}

Matrix ModalityRAE::encode(const Matrix& x, EncodeMode, Rng&) const {
  if (x.cols() != spec_.input_dim) throw ShapeError("encode: input width mismatch");
  return encoder_.forward(x);
}

AutoencoderLoss ModalityRAE::loss(const Matrix& x, const Matrix& noise) const {
  if (x.rows() == 0) throw ConfigError("rae_loss: empty batch");
  if (x.cols() != spec_.input_dim || noise.rows() != x.rows() || noise.cols() != spec_.latent_dim)
    throw ShapeError("rae_loss: shape mismatch");
  const double n = static_cast<double>(x.rows());
  const double elems = n * static_cast<double>(spec_.input_dim);

  Tape enc_tape, dec_tape;
  Matrix z = encoder_.forward(x, enc_tape);
  Matrix out = decoder_.forward(z + spec_.decoder_noise_std * noise, dec_tape);
  Matrix diff = out - x;

  AutoencoderLoss result;
  result.reconstruction = diff.squaredNorm() / elems;
  result.regularizer = spec_.beta * z.squaredNorm() / n;
  result.total = result.reconstruction + result.regularizer;
  if (!std::isfinite(result.reconstruction)) throw NumericError("non-finite reconstruction term");
  if (!std::isfinite(result.regularizer)) throw NumericError("non-finite latent penalty term");

  result.decoder_grad.assign(decoder_.parameter_count(), 0.0);
  result.encoder_grad.assign(encoder_.parameter_count(), 0.0);
  Matrix dz = decoder_.backward(dec_tape, (2.0 / elems) * diff, result.decoder_grad);
  dz += (2.0 * spec_.beta / n) * z;
  encoder_.backward(enc_tape, dz, result.encoder_grad);
  return result;
}

std::unique_ptr<ModalityAutoencoder> make_autoencoder(const AutoencoderSpec& spec, std::uint64_t seed) {
  if (spec.kind == AutoencoderKind::vae) return std::make_unique<ModalityVAE>(spec, seed);
  return std::make_unique<ModalityRAE>(spec, seed);
}

std::unique_ptr<ModalityAutoencoder> load_autoencoder(const Checkpoint& ck, const std::string& prefix) {
  AutoencoderSpec spec;
  spec.kind = autoencoder_kind_from_string(ck.get_string(prefix + ".kind"));
  spec.likelihood = likelihood_from_string(ck.get_string(prefix + ".likelihood"));
  const auto scalars = ck.get_f32(prefix + ".scalars");
  if (scalars.size() != 3) throw FormatError("autoencoder scalars section malformed");
  spec.beta = scalars[0];
  spec.prior_std = scalars[1];
  spec.decoder_noise_std = scalars[2];
  DenseNet enc = ck.get_net(prefix + ".encoder");
  DenseNet dec = ck.get_net(prefix + ".decoder");
  spec.input_dim = enc.input_width();
  spec.latent_dim = dec.input_width();
  spec.hidden.assign(enc.widths().begin() + 1, enc.widths().end() - 1);
  if (!enc.activations().empty()) spec.hidden_activation = enc.activations().front();
  if (spec.kind == AutoencoderKind::vae) return std::make_unique<ModalityVAE>(spec, std::move(enc), std::move(dec));
  return std::make_unique<ModalityRAE>(spec, std::move(enc), std::move(dec));
}

std::vector<AutoencoderEpoch> train_autoencoder(ModalityAutoencoder& model, const Matrix& train, const Matrix& heldout,
                                                const AutoencoderTrainConfig& cfg) {
  if (train.rows() == 0) throw ConfigError("train_autoencoder: empty training set");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("train_autoencoder: invalid batch size or epochs");
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  AdamState enc_state(model.encoder().parameter_count(), adam_cfg);
  AdamState dec_state(model.decoder().parameter_count(), adam_cfg);

  std::vector<std::size_t> order(static_cast<std::size_t>(train.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<AutoencoderEpoch> history;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    AutoencoderEpoch rec;
    rec.epoch = epoch;
    double weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      Matrix batch = gather_rows(train, rows);
      Matrix noise = normal_matrix(batch.rows(), model.latent_dim(), rng);
      AutoencoderLoss l = model.loss(batch, noise);
      adam_step(enc_state, model.encoder().parameters(), l.encoder_grad);
      adam_step(dec_state, model.decoder().parameters(), l.decoder_grad);
      const double w = static_cast<double>(rows.size());
      rec.loss += w * l.total;
      rec.reconstruction += w * l.reconstruction;
      rec.regularizer += w * l.regularizer;
      weight += w;
    }
    rec.loss /= weight;
    rec.reconstruction /= weight;
    rec.regularizer /= weight;
    if (heldout.rows() > 0) rec.heldout_loss = model.loss(heldout, mix_seed(cfg.seed, 0x401d)).total;
    history.push_back(rec);
  }
  return history;
}

std::vector<Matrix> encode_all(const std::vector<std::unique_ptr<ModalityAutoencoder>>& models,
                               const std::vector<Matrix>& data, EncodeMode mode, std::uint64_t seed) {
  if (models.size() != data.size()) throw ShapeError("encode_all: model/modality count mismatch");
  std::vector<Matrix> out;
  for (std::size_t k = 0; k < models.size(); ++k) {
    Rng rng = make_rng(seed, k);
    out.push_back(models[k]->encode(data[k], mode, rng));
  }
  return out;
}

void FinetuneConfig::validate() const {
  if (!(drop_probability >= 0.0 && drop_probability < 1.0)) throw ConfigError("fine-tune drop probability must be in [0, 1)");
  if (samples_per_example < 1) throw ConfigError("fine-tune needs K >= 1");
  if (batch_size < 1 || epochs < 0) throw ConfigError("fine-tune batch size / epochs invalid");
}

FinetuneReport finetune_decoders(std::vector<std::unique_ptr<ModalityAutoencoder>>& models,
                                 const ConditionalLatentSampler& sampler, const std::vector<Matrix>& data,
                                 const FinetuneConfig& cfg) {
  cfg.validate();
  const std::size_t M = models.size();
  if (M == 0 || data.size() != M) throw ShapeError("finetune_decoders: model/modality count mismatch");
  const auto n = static_cast<std::size_t>(data.front().rows());
  std::vector<int> dims;
  for (const auto& m : models) dims.push_back(m->latent_dim());
  const LatentLayout layout(dims);

  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  std::vector<AdamState> states;
  for (auto& m : models) states.emplace_back(m->decoder().parameter_count(), adam_cfg);

  FinetuneReport report;
  double nll_sum = 0.0;
  double nll_count = 0.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t call = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution drop(cfg.drop_probability);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const double batch_rows = static_cast<double>(end - start);

      std::map<std::vector<bool>, std::vector<std::size_t>> groups;
      for (std::size_t i = start; i < end; ++i) {
        std::vector<bool> observed(M);
        do {
          for (std::size_t k = 0; k < M; ++k) observed[k] = !drop(rng);
        } while (std::none_of(observed.begin(), observed.end(), [](bool b) { return b; }));
        groups[observed].push_back(order[i]);
      }

      std::vector<std::vector<double>> grads(M);
      bool any_dropped = false;
      for (const auto& [observed, rows] : groups) {
        const ModalityMask mask(observed);
        if (mask.all_observed()) continue;
        any_dropped = true;
        const auto K = static_cast<std::size_t>(cfg.samples_per_example);
        std::vector<std::size_t> rep_rows;
        rep_rows.reserve(rows.size() * K);
        for (std::size_t r = 0; r < K; ++r) rep_rows.insert(rep_rows.end(), rows.begin(), rows.end());

        Matrix observed_latents = Matrix::Zero(static_cast<Eigen::Index>(rep_rows.size()), layout.total());
        for (std::size_t k : mask.observed_indices())
          observed_latents.middleCols(layout.offset(k), layout.length(k)) = models[k]->encode_mean(gather_rows(data[k], rep_rows));
        const Matrix full = sampler(mask, observed_latents, mix_seed(cfg.seed, ++call));
        const auto slices = split_latents(full, layout);
        const double weight = 1.0 / (static_cast<double>(K) * batch_rows);
        for (std::size_t k : mask.unobserved_indices()) {
          if (grads[k].empty()) grads[k].assign(models[k]->decoder().parameter_count(), 0.0);
          const double nll = models[k]->reconstruction_nll(gather_rows(data[k], rep_rows), slices[k], weight, grads[k]);
          nll_sum += nll;
          nll_count += static_cast<double>(rep_rows.size());
          report.dropped_modalities += rows.size();
        }
      }
      if (!any_dropped) continue;
      for (std::size_t k = 0; k < M; ++k)
        if (!grads[k].empty()) adam_step(states[k], models[k]->decoder().parameters(), grads[k]);
      ++report.optimizer_steps;
    }
  }
  report.mean_nll = nll_count > 0 ? nll_sum / nll_count : 0.0;
  return report;
}

}  // namespace mmscore
