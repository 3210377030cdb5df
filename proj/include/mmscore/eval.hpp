#pragma once

#include "mmscore/checkpoint.hpp"
#include "mmscore/nn.hpp"

#include <string>
#include <vector>

namespace mmscore {

/// Coherence metrics refuse to run on a classifier below this held-out accuracy.
constexpr double kClassifierGate = 0.95;

struct ClassifierTrainConfig {
  std::vector<int> hidden{128, 64};
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct ClassifierEpoch {
  int epoch = 0;
  double loss = 0.0;
  double heldout_accuracy = 0.0;
};

struct ClassifierLoss {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean softmax cross-entropy of `net` logits against integer labels.
ClassifierLoss cross_entropy_loss(const DenseNet& net, const Matrix& x, const std::vector<std::uint32_t>& labels);

/// Label classifier shared by every modality; its last hidden layer provides Frechet features.
class EvalClassifier {
 public:
  EvalClassifier(int input_dim, int num_classes, const std::vector<int>& hidden, std::uint64_t seed);
  EvalClassifier(DenseNet net, double heldout_accuracy);

  const DenseNet& net() const { return net_; }
  DenseNet& net() { return net_; }
  int num_classes() const { return net_.output_width(); }
  int feature_dim() const;
  double heldout_accuracy() const { return heldout_accuracy_; }
  void set_heldout_accuracy(double a) { heldout_accuracy_ = a; }

  Matrix logits(const Matrix& x) const;
  std::vector<std::uint32_t> predict(const Matrix& x) const;
  /// Penultimate-layer activations.
  Matrix features(const Matrix& x) const;
  double accuracy(const Matrix& x, const std::vector<std::uint32_t>& labels) const;
  /// Throws StateError when held-out accuracy is below kClassifierGate.
  void require_gate() const;

  void save(Checkpoint& ck, const std::string& prefix) const;
  static EvalClassifier load(const Checkpoint& ck, const std::string& prefix);

 private:
  DenseNet net_;
  double heldout_accuracy_ = 0.0;
};

/// Trains on (x, labels), records accuracy on the held-out pair after every epoch.
std::vector<ClassifierEpoch> train_classifier(EvalClassifier& clf, const Matrix& x, const std::vector<std::uint32_t>& labels,
                                              const Matrix& heldout_x, const std::vector<std::uint32_t>& heldout_labels,
                                              const ClassifierTrainConfig& cfg);

/// Fraction of generated samples classified as their conditioning label.
double conditional_coherence(const EvalClassifier& clf, const Matrix& generated, const std::vector<std::uint32_t>& labels);

struct UnconditionalCoherence {
  /// histogram[k - 1]: fraction of samples whose largest agreeing label subset has size k.
  std::vector<double> histogram;
  double all_agree = 0.0;
  std::size_t samples = 0;
};

/// Classifies each modality of every joint sample and records the largest agreeing subset.
UnconditionalCoherence unconditional_coherence(const EvalClassifier& clf, const std::vector<Matrix>& modalities);
/// Same, from predicted labels (modality-major: predictions[k][i]).
UnconditionalCoherence unconditional_coherence(const std::vector<std::vector<std::uint32_t>>& predictions);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); both sets need at least 10 * d rows.
double frechet_distance(const Matrix& features_a, const Matrix& features_b);

struct ModeCoverage {
  std::vector<std::size_t> counts;
  double min_share = 0.0;
  double max_share = 0.0;
};

ModeCoverage mode_coverage(const std::vector<std::uint32_t>& predicted, int num_classes);
ModeCoverage mode_coverage(const EvalClassifier& clf, const Matrix& samples);

/// Sample-average F1 of binary rows (entries > 0.5 count as set); all-zero vs all-zero scores 1.
double attribute_f1(const Matrix& predicted, const Matrix& truth);

struct CosineReport {
  std::vector<double> per_modality;
  double average = 0.0;
  /// Pairs skipped because either vector had zero norm, per modality.
  std::vector<std::size_t> excluded;
};

CosineReport latent_cosine_similarity(const std::vector<Matrix>& truth, const std::vector<Matrix>& recovered);

struct MetricEntry {
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

/// Named scalar metrics with run metadata; rows keep insertion order.
class MetricReport {
 public:
  explicit MetricReport(std::string config_hash = "") : config_hash_(std::move(config_hash)) {}

  void add(const std::string& metric, double value, std::size_t n, std::uint64_t seed);
  const std::vector<MetricEntry>& entries() const { return entries_; }
  const std::string& config_hash() const { return config_hash_; }
  /// First entry named `metric`; throws when absent.
  double value(const std::string& metric) const;
  bool has(const std::string& metric) const;

  /// metric,value,n,seed,config_hash
  std::string to_csv() const;
  std::string to_json() const;
  static MetricReport from_csv(const std::string& text);

 private:
  std::string config_hash_;
  std::vector<MetricEntry> entries_;
};

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace mmscore
