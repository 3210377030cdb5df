#pragma once

#include "mmscore/checkpoint.hpp"
#include "mmscore/data_synth.hpp"
#include "mmscore/latent.hpp"
#include "mmscore/nn.hpp"
#include "mmscore/score_sde.hpp"

#include <optional>
#include <vector>

namespace mmscore {

/// Pairwise latent energy E(z_o, z_u): low for coherent pairs, high for incoherent ones.
///
/// Shared mode uses one softplus MLP over (z_o, z_u, onehot(o), onehot(u)); per-pair mode keeps
/// an independent network over (z_o, z_u) for every ordered modality pair. The arguments are
/// ordered (observed, unobserved); the energy is not assumed symmetric.
class EnergyNetwork {
 public:
  EnergyNetwork(int latent_dim, int num_modalities, std::vector<int> hidden, bool shared, std::uint64_t seed);
  EnergyNetwork(int latent_dim, int num_modalities, bool shared, std::vector<DenseNet> nets);

  int latent_dim() const { return latent_dim_; }
  int num_modalities() const { return num_modalities_; }
  bool shared() const { return shared_; }
  std::vector<DenseNet>& nets() { return nets_; }
  const std::vector<DenseNet>& nets() const { return nets_; }

  Vector energy(const Matrix& z_o, const Matrix& z_u, std::size_t o, std::size_t u) const;
  /// grad_{z_u} E(z_o, z_u), with z_o held constant.
  Matrix grad_unobserved(const Matrix& z_o, const Matrix& z_u, std::size_t o, std::size_t u) const;

  std::size_t net_index(std::size_t o, std::size_t u) const;
  Matrix build_input(const Matrix& z_o, const Matrix& z_u, std::size_t o, std::size_t u) const;

  void save(Checkpoint& ck, const std::string& prefix) const;
  static EnergyNetwork load(const Checkpoint& ck, const std::string& prefix);

 private:
  int latent_dim_;
  int num_modalities_;
  bool shared_;
  std::vector<DenseNet> nets_;
};

/// One NCE batch: row i pairs z_o with a coherent z_u and an incoherent z_n (same modality as z_u).
struct NcePairs {
  Matrix z_o;
  Matrix z_u;
  Matrix z_n;
  std::vector<std::size_t> modality_o;
  std::vector<std::size_t> modality_u;
};

/// Per-row perturbation draws: time shared by the three latents of a row, independent noises.
struct NceDraw {
  Vector t;
  Matrix noise_o;
  Matrix noise_u;
  Matrix noise_n;
};

NceDraw draw_nce(const NcePairs& pairs, double t_min, Rng& rng);

struct NceLoss {
  double value = 0.0;
  double mean_positive_energy = 0.0;
  double mean_negative_energy = 0.0;
  std::vector<std::vector<double>> grads;  // one per network
};

/// Negated logistic NCE objective: mean softplus(E(pos)) + mean softplus(-E(neg)). With a draw,
/// every latent is first perturbed by the score model's kernel at its row's time; `draw == nullptr`
/// scores the clean pairs.
NceLoss nce_loss(const EnergyNetwork& energy, const NcePairs& pairs, const VPSDESchedule& schedule, const NceDraw* draw);

struct EbmTrainConfig {
  int epochs = 30;
  int batch_size = 256;
  double learning_rate = 1e-3;
  bool perturb = true;
  double t_min = 1e-5;
  /// NCE pairs per epoch; 0 draws one pair per training row.
  std::size_t pairs_per_epoch = 0;
  std::uint64_t seed = 0;
};

struct EbmEpoch {
  int epoch = 0;
  double loss = 0.0;
};

/// Builds NCE pairs over `rows`: random ordered modality pair (o != u) per row, negative drawn
/// uniformly from rows with a different label.
NcePairs sample_nce_pairs(const std::vector<Matrix>& latents, const std::vector<std::uint32_t>& labels,
                          const std::vector<std::size_t>& rows, Rng& rng);

/// Trains the energy network on per-modality latents. Requires >= 2 modalities and >= 2 labels.
std::vector<EbmEpoch> train_ebm(EnergyNetwork& energy, const std::vector<Matrix>& latents,
                                 const std::vector<std::uint32_t>& labels, const VPSDESchedule& schedule,
                                 const EbmTrainConfig& cfg);

/// mean E(neg) - mean E(pos) with one random ordered pair and negative per row, latents perturbed
/// at time `t` when given.
double energy_margin(const EnergyNetwork& energy, const std::vector<Matrix>& latents,
                     const std::vector<std::uint32_t>& labels, const VPSDESchedule& schedule, std::optional<double> t,
                     std::uint64_t seed);

/// Null-control copy of per-modality latents: each modality's rows are permuted independently, so a
/// row no longer pairs examples of one concept. Labels stay attached to row indices.
std::vector<Matrix> decouple_modalities(const std::vector<Matrix>& latents, std::uint64_t seed);

/// Per-modality encoders into a shared, L2-normalized embedding space with a learnable temperature.
class ContrastiveEncoder {
 public:
  ContrastiveEncoder(const std::vector<int>& input_dims, int embed_dim, std::vector<int> hidden, double temperature,
                     std::uint64_t seed);
  ContrastiveEncoder(std::vector<DenseNet> nets, double log_temperature);

  int embed_dim() const { return nets_.front().output_width(); }
  std::size_t num_modalities() const { return nets_.size(); }
  double temperature() const;
  double& log_temperature() { return log_temperature_; }
  double log_temperature() const { return log_temperature_; }
  std::vector<DenseNet>& nets() { return nets_; }
  const std::vector<DenseNet>& nets() const { return nets_; }

  /// L2-normalized embeddings of modality k.
  Matrix embed(std::size_t k, const Matrix& x) const;

  void save(Checkpoint& ck, const std::string& prefix) const;
  static ContrastiveEncoder load(const Checkpoint& ck, const std::string& prefix);

 private:
  std::vector<DenseNet> nets_;
  double log_temperature_;
};

struct ContrastiveLoss {
  double value = 0.0;
  std::size_t modality_a = 0;
  std::size_t modality_b = 0;
  std::vector<std::vector<double>> grads;  // per modality network
  double log_temperature_grad = 0.0;
};

/// Symmetric InfoNCE over in-batch pairs of modalities (a, b), logits = cos(E_a, E_b) / tau.
ContrastiveLoss contrastive_loss(const ContrastiveEncoder& enc, const Matrix& x_a, const Matrix& x_b, std::size_t a,
                                 std::size_t b);
/// Same, with the modality pair drawn at random from the batch's modalities.
ContrastiveLoss contrastive_loss(const ContrastiveEncoder& enc, const std::vector<Matrix>& batch, std::uint64_t seed);

/// Loss of precomputed normalized embeddings; used for the closed-form checks.
double info_nce_from_embeddings(const Matrix& e_a, const Matrix& e_b, double temperature);

struct ContrastiveTrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

std::vector<double> train_contrastive(ContrastiveEncoder& enc, const std::vector<Matrix>& data,
                                      const ContrastiveTrainConfig& cfg);

/// Normalized mean of the observed modalities' embeddings (entries of `x` for unobserved
/// modalities are ignored and may be empty). With nothing observed, returns `unconditional_rows`
/// zero rows, the declared null condition; zero rows requested there is a configuration error.
Matrix condition_embedding(const ContrastiveEncoder& enc, const std::vector<Matrix>& x, const ModalityMask& mask,
                           std::size_t unconditional_rows = 0);

/// Fraction of rows whose nearest modality-b embedding (cosine) is its own pair.
double retrieval_accuracy(const ContrastiveEncoder& enc, const Matrix& x_a, const Matrix& x_b, std::size_t a, std::size_t b);

}  // namespace mmscore
