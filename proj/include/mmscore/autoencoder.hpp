#pragma once

#include "mmscore/checkpoint.hpp"
#include "mmscore/latent.hpp"
#include "mmscore/nn.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mmscore {

enum class AutoencoderKind { vae, rae };
enum class Likelihood { gaussian, bernoulli };
enum class EncodeMode { sample, mean };

std::string to_string(AutoencoderKind k);
std::string to_string(Likelihood l);
std::string to_string(EncodeMode m);
AutoencoderKind autoencoder_kind_from_string(const std::string& s);
Likelihood likelihood_from_string(const std::string& s);
EncodeMode encode_mode_from_string(const std::string& s);

struct AutoencoderSpec {
  AutoencoderKind kind = AutoencoderKind::vae;
  int input_dim = 1;
  int latent_dim = 1;
  std::vector<int> hidden{};
  Activation hidden_activation = Activation::relu;
  /// KL weight for a VAE, latent L2 penalty for an RAE.
  double beta = 0.1;
  /// Step-I prior N(0, prior_std^2 I); VAE only.
  double prior_std = 1.0;
  Likelihood likelihood = Likelihood::gaussian;
  /// Std of Gaussian noise added to z before decoding; RAE only.
  double decoder_noise_std = 0.1;

  void validate() const;
};

/// Loss value with its decomposition and parameter gradients (encoder, decoder layouts).
struct AutoencoderLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  /// beta-weighted KL (VAE) or beta-weighted latent penalty (RAE).
  double regularizer = 0.0;
  std::vector<double> encoder_grad;
  std::vector<double> decoder_grad;
};

/// One modality's autoencoder. Modalities never share parameters.
class ModalityAutoencoder {
 public:
  virtual ~ModalityAutoencoder() = default;

  const AutoencoderSpec& spec() const { return spec_; }
  DenseNet& encoder() { return encoder_; }
  DenseNet& decoder() { return decoder_; }
  const DenseNet& encoder() const { return encoder_; }
  const DenseNet& decoder() const { return decoder_; }
  int latent_dim() const { return spec_.latent_dim; }
  int input_dim() const { return spec_.input_dim; }

  /// Posterior sample or mean (VAE); deterministic code (RAE, mode ignored).
  virtual Matrix encode(const Matrix& x, EncodeMode mode, Rng& rng) const = 0;
  Matrix encode_mean(const Matrix& x) const;
  /// Gaussian mean, or Bernoulli probabilities clamped to [1e-6, 1 - 1e-6].
  Matrix decode(const Matrix& z) const;

  /// Batch loss with explicit noise draws (n x latent_dim), for reproducible gradient checks.
  virtual AutoencoderLoss loss(const Matrix& x, const Matrix& noise) const = 0;
  AutoencoderLoss loss(const Matrix& x, std::uint64_t seed) const;

  /// Per-example negative log-likelihood of x under the decoder at z (up to additive constants),
  /// plus its gradient into decoder parameters (summed over the batch, scaled by `weight`).
  double reconstruction_nll(const Matrix& x, const Matrix& z, double weight, std::span<double> decoder_grad) const;

  void save(Checkpoint& ck, const std::string& prefix) const;

 protected:
  ModalityAutoencoder(AutoencoderSpec spec, DenseNet encoder, DenseNet decoder);
  /// Reconstruction NLL summed over a batch and its gradient w.r.t. the decoder output.
  double reconstruction_term(const Matrix& x, const Matrix& decoder_out, Matrix& d_out) const;

  AutoencoderSpec spec_;
  DenseNet encoder_;
  DenseNet decoder_;
};

/// Gaussian posterior q(z|x) = N(mu, diag(exp(logvar))); loss = NLL + beta * KL(q || N(0, sigma^2 I)).
class ModalityVAE final : public ModalityAutoencoder {
 public:
  ModalityVAE(AutoencoderSpec spec, std::uint64_t seed);
  ModalityVAE(AutoencoderSpec spec, DenseNet encoder, DenseNet decoder);

  /// Encoder head split into (mu, logvar), each n x latent_dim.
  std::pair<Matrix, Matrix> posterior(const Matrix& x) const;
  Matrix encode(const Matrix& x, EncodeMode mode, Rng& rng) const override;
  using ModalityAutoencoder::loss;
  AutoencoderLoss loss(const Matrix& x, const Matrix& noise) const override;
};

/// Deterministic encoder; loss = MSE(x, dec(z + noise)) + beta * ||z||^2, no decoder regularizer.
class ModalityRAE final : public ModalityAutoencoder {
 public:
  ModalityRAE(AutoencoderSpec spec, std::uint64_t seed);
  ModalityRAE(AutoencoderSpec spec, DenseNet encoder, DenseNet decoder);

  Matrix encode(const Matrix& x, EncodeMode mode, Rng& rng) const override;
  using ModalityAutoencoder::loss;
  AutoencoderLoss loss(const Matrix& x, const Matrix& noise) const override;
};

/// KL(N(mu, exp(logvar)) || N(0, prior_std^2)) summed over coordinates, per row.
Vector gaussian_kl(const Matrix& mu, const Matrix& logvar, double prior_std);

std::unique_ptr<ModalityAutoencoder> make_autoencoder(const AutoencoderSpec& spec, std::uint64_t seed);
std::unique_ptr<ModalityAutoencoder> load_autoencoder(const Checkpoint& ck, const std::string& prefix);

struct AutoencoderTrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct AutoencoderEpoch {
  int epoch = 0;
  double loss = 0.0;
  double reconstruction = 0.0;
  double regularizer = 0.0;
  double heldout_loss = 0.0;
};

/// Minibatch Adam on one modality. `heldout` may be empty; its loss uses fixed noise per epoch.
std::vector<AutoencoderEpoch> train_autoencoder(ModalityAutoencoder& model, const Matrix& train, const Matrix& heldout,
                                                const AutoencoderTrainConfig& cfg);

/// Per-modality latent batches for a dataset's modalities, encoded with `mode`.
std::vector<Matrix> encode_all(const std::vector<std::unique_ptr<ModalityAutoencoder>>& models,
                               const std::vector<Matrix>& data, EncodeMode mode, std::uint64_t seed);

struct FinetuneConfig {
  double drop_probability = 0.5;
  int samples_per_example = 1;
  int epochs = 1;
  int batch_size = 64;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Draws full stacked latents (rows x D) given the mask and stacked observed latents
/// (unobserved columns ignored). Implemented by the sampler module.
using ConditionalLatentSampler =
    std::function<Matrix(const ModalityMask& mask, const Matrix& observed_latents, std::uint64_t seed)>;

struct FinetuneReport {
  std::size_t optimizer_steps = 0;
  std::size_t dropped_modalities = 0;
  double mean_nll = 0.0;
};

/// Decoder fine-tuning on conditionally sampled latents: each example drops each modality with
/// probability p (masks dropping everything are redrawn), samples K latent completions, and
/// maximizes (1/K) sum log p(x_u | z_u) over the dropped modalities. Encoders are untouched.
FinetuneReport finetune_decoders(std::vector<std::unique_ptr<ModalityAutoencoder>>& models,
                                 const ConditionalLatentSampler& sampler, const std::vector<Matrix>& data,
                                 const FinetuneConfig& cfg);

}  // namespace mmscore
