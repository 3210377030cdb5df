#pragma once

#include "mmscore/autoencoder.hpp"
#include "mmscore/data_synth.hpp"
#include "mmscore/eval.hpp"
#include "mmscore/guidance.hpp"
#include "mmscore/sampler.hpp"
#include "mmscore/score_sde.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mmscore {

enum class Stage { gen_data, train_ae, train_score, train_guidance, sample, eval, report };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);
const std::vector<Stage>& all_stages();

enum class DatasetKind { gaussian, toy_digits };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::toy_digits;
  GaussianJointSpec gaussian{};
  std::size_t gaussian_train = 20000;
  std::size_t gaussian_val = 2000;
  std::size_t gaussian_test = 2000;
  ToyDigitSpec toy{};

  std::size_t num_modalities() const;
};

/// Per-modality autoencoder settings; `per_modality` entries override the shared spec.
struct AutoencoderConfig {
  AutoencoderSpec spec{};
  std::vector<nlohmann::json> per_modality;
  EncodeMode encode_mode = EncodeMode::mean;
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 1e-3;
};

struct ScoreConfig {
  VPSDESchedule schedule{};
  int time_embed_dim = 16;
  std::vector<int> hidden{128, 128, 128};
  Activation activation = Activation::softplus;
  int batch_size = 256;
  int epochs = 50;
  double learning_rate = 2e-4;
  double final_lr_fraction = 1.0;
  double t_min = 1e-5;
  double heldout_fraction = 0.1;
  double grad_clip = 0.0;
  TimeSampling time_sampling = TimeSampling::importance;
  bool control_variate = true;
  double condition_dropout = 0.1;
  /// Standardize latents per coordinate before score modelling.
  bool standardize = false;
  /// Fraction of each modality's latents removed during score training (masked DSM).
  double missing_fraction = 0.0;
  /// Re-encode a fresh posterior sample every epoch (sample encode mode only).
  bool refresh_latents = false;
};

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::none;
  bool shared = true;
  bool perturb = true;
  std::vector<int> hidden{128, 128};
  int epochs = 30;
  int batch_size = 256;
  double learning_rate = 1e-3;
  std::size_t pairs_per_epoch = 0;
  int embed_dim = 32;
  std::vector<int> contrastive_hidden{128};
  double temperature = 0.07;
};

struct SamplingConfig {
  SamplerConfig sampler{};
  /// Independent sampling seeds for every conditional run.
  int seeds = 3;
  std::size_t conditional_rows = 1000;
  std::size_t unconditional_samples = 10000;
  /// Observed-modality counts for conditional runs (first k modalities observed); empty = 1..M-1.
  std::vector<int> observed_counts;
  /// Extra step counts compared on the one-observed-modality run.
  std::vector<int> compare_steps;
};

struct FinetuneRunConfig {
  bool enabled = false;
  FinetuneConfig cfg{};
  /// Rows of the training split used for fine-tuning; 0 = all.
  std::size_t rows = 0;
};

struct EvalConfig {
  ClassifierTrainConfig classifier{};
};

struct OracleConfig {
  std::vector<double> grid{-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5};
  std::size_t draws = 20000;
  double mean_tolerance = 0.1;
  double var_tolerance = 0.1;
};

/// Every knob of a run. Parsed from JSON; unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "run";
  DatasetConfig dataset{};
  AutoencoderConfig autoencoder{};
  ScoreConfig score{};
  GuidanceConfig guidance{};
  SamplingConfig sampling{};
  FinetuneRunConfig finetune{};
  EvalConfig eval{};
  OracleConfig oracle{};

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;
  /// 16 hex digits identifying every setting except the output directory.
  std::string hash() const;
  /// Hash of the settings `stage` reads plus the hashes of the stages it consumes. Artifacts carry
  /// the hash of the stage that wrote them.
  std::string stage_hash(Stage stage) const;
  AutoencoderSpec autoencoder_spec(std::size_t k, int input_dim) const;
  void validate() const;
};

struct StageOptions {
  bool force = false;
  std::ostream* log = nullptr;
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;
};

/// Runs one stage. Refuses when an upstream artifact is missing or stale ("run <stage> first") or
/// when the stage's own artifacts carry a different stage hash (unless forced). A stage whose
/// manifest matches its stage hash and whose artifacts exist is skipped.
StageOutcome run_stage(Stage stage, const RunConfig& cfg, const StageOptions& opts);
/// Runs `first` and, unless `stage_only`, every later stage.
std::vector<StageOutcome> run_pipeline(Stage first, const RunConfig& cfg, const StageOptions& opts, bool stage_only);

struct OracleRow {
  double z_o = 0.0;
  std::size_t draws = 0;
  double mean = 0.0;
  double expected_mean = 0.0;
  double var = 0.0;
  double expected_var = 0.0;
  bool pass = false;
};

struct OracleReport {
  std::vector<OracleRow> rows;
  /// Expected conditional slope in latent coordinates and the data-space correlation it carries.
  double expected_slope = 0.0;
  double correlation = 0.0;
  bool passed = false;
  std::vector<std::string> failures;
};

/// Trains (or reuses) the Gaussian run through train-score, draws conditional samples of the
/// second modality on the z_o grid and checks them against the closed-form Gaussian conditional
/// carried through the encoders and latent standardization.
OracleReport verify_oracle(const RunConfig& cfg, const StageOptions& opts);
void print_oracle(const OracleReport& r, std::ostream& os);

/// Everything downstream stages need, loaded from a run directory.
struct RunArtifacts {
  RunConfig cfg;
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<std::unique_ptr<ModalityAutoencoder>> autoencoders;
  std::optional<LoadedScore> score;
  std::optional<EnergyNetwork> energy;
  std::optional<ContrastiveEncoder> contrastive;
};

RunArtifacts load_artifacts(const RunConfig& cfg, bool need_score);

/// Stacked raw latents (rows x D) from the configured autoencoders in mean mode.
Matrix encode_stacked(const RunArtifacts& run, const Dataset& data);
/// Conditional draw in raw latent coordinates: normalizes, samples, inverts. Observed columns
/// of the result equal `observed` exactly.
Matrix sample_latents(const RunArtifacts& run, const SamplerConfig& sampler, const ModalityMask& mask,
                      const Matrix* observed, std::size_t chains, const Matrix* condition, std::uint64_t seed);
/// Decodes stacked raw latents into per-modality observations.
std::vector<Matrix> decode_stacked(const RunArtifacts& run, const Matrix& latents);

/// FNV-1a 64-bit hash as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace mmscore
