#include "mmscore/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace mmscore {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

ClassifierLoss cross_entropy_loss(const DenseNet& net, const Matrix& x, const std::vector<std::uint32_t>& labels) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("classifier: rows and labels differ");
  if (labels.empty()) throw ConfigError("classifier: empty batch");
  Tape tape;
  Matrix logits = net.forward(x, tape);
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  Matrix d(logits.rows(), logits.cols());
  ClassifierLoss out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
    if (y >= logits.cols()) throw DomainError("classifier: label out of range");
    const double mx = logits.row(r).maxCoeff();
    RowVector e = (logits.row(r).array() - mx).exp().matrix();
    const double z = e.sum();
    out.value += inv_n * (std::log(z) + mx - logits(r, y));
    d.row(r) = e / z;
    d(r, y) -= 1.0;
  }
  d *= inv_n;
  out.grad.assign(net.parameter_count(), 0.0);
  net.backward(tape, d, out.grad);
  return out;
}

EvalClassifier::EvalClassifier(int input_dim, int num_classes, const std::vector<int>& hidden, std::uint64_t seed)
    : net_(make_mlp(input_dim, hidden, num_classes, Activation::relu, Activation::identity, seed)) {
  if (hidden.empty()) throw ConfigError("classifier needs at least one hidden layer for features");
  if (num_classes < 2) throw ConfigError("classifier needs at least two classes");
}

EvalClassifier::EvalClassifier(DenseNet net, double heldout_accuracy) : net_(std::move(net)), heldout_accuracy_(heldout_accuracy) {
  if (net_.num_layers() < 2) throw FormatError("classifier network has no hidden layer");
}

int EvalClassifier::feature_dim() const { return net_.widths()[net_.num_layers() - 1]; }

Matrix EvalClassifier::logits(const Matrix& x) const { return net_.forward(x); }

std::vector<std::uint32_t> EvalClassifier::predict(const Matrix& x) const {
  Matrix l = logits(x);
  std::vector<std::uint32_t> out(static_cast<std::size_t>(l.rows()));
  for (Eigen::Index r = 0; r < l.rows(); ++r) {
    Eigen::Index best;
    l.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<std::uint32_t>(best);
  }
  return out;
}

Matrix EvalClassifier::features(const Matrix& x) const { return net_.hidden(x, net_.num_layers() - 2); }

double EvalClassifier::accuracy(const Matrix& x, const std::vector<std::uint32_t>& labels) const {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("classifier: rows and labels differ");
  if (labels.empty()) throw ConfigError("classifier: empty evaluation set");
  const auto pred = predict(x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void EvalClassifier::require_gate() const {
  if (heldout_accuracy_ < kClassifierGate)
    throw StateError("classifier held-out accuracy " + format_double(heldout_accuracy_) + " is below the 0.95 gate");
}

void EvalClassifier::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_net(prefix + ".net", net_);
  const std::vector<double> acc{heldout_accuracy_};
  ck.put_f32(prefix + ".heldout_accuracy", acc);
}

EvalClassifier EvalClassifier::load(const Checkpoint& ck, const std::string& prefix) {
  const auto acc = ck.get_f32(prefix + ".heldout_accuracy");
  if (acc.size() != 1) throw FormatError("classifier accuracy section malformed");
  return EvalClassifier(ck.get_net(prefix + ".net"), acc[0]);
}

std::vector<ClassifierEpoch> train_classifier(EvalClassifier& clf, const Matrix& x, const std::vector<std::uint32_t>& labels,
                                              const Matrix& heldout_x, const std::vector<std::uint32_t>& heldout_labels,
                                              const ClassifierTrainConfig& cfg) {
  if (labels.empty()) throw ConfigError("classifier: empty training set");
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  AdamState state(clf.net().parameter_count(), adam_cfg);
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<ClassifierEpoch> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Matrix xb(static_cast<Eigen::Index>(end - start), x.cols());
      std::vector<std::uint32_t> yb;
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = x.row(static_cast<Eigen::Index>(order[i]));
        yb.push_back(labels[order[i]]);
      }
      ClassifierLoss l = cross_entropy_loss(clf.net(), xb, yb);
      adam_step(state, clf.net().parameters(), l.grad);
      sum += l.value * static_cast<double>(end - start);
    }
    ClassifierEpoch e;
    e.epoch = epoch;
    e.loss = sum / static_cast<double>(order.size());
    e.heldout_accuracy = heldout_labels.empty() ? 0.0 : clf.accuracy(heldout_x, heldout_labels);
    history.push_back(e);
  }
  if (!heldout_labels.empty()) clf.set_heldout_accuracy(history.empty() ? clf.accuracy(heldout_x, heldout_labels) : history.back().heldout_accuracy);
  return history;
}

double conditional_coherence(const EvalClassifier& clf, const Matrix& generated, const std::vector<std::uint32_t>& labels) {
  if (labels.empty()) throw ConfigError("coherence: empty sample set");
  clf.require_gate();
  const auto pred = clf.predict(generated);
  if (pred.size() != labels.size()) throw ShapeError("coherence: samples and labels differ in count");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

UnconditionalCoherence unconditional_coherence(const std::vector<std::vector<std::uint32_t>>& predictions) {
  if (predictions.empty() || predictions.front().empty()) throw ConfigError("coherence: empty sample set");
  const std::size_t M = predictions.size();
  const std::size_t n = predictions.front().size();
  for (const auto& p : predictions)
    if (p.size() != n) throw ShapeError("coherence: modalities differ in sample count");
  UnconditionalCoherence out;
  out.histogram.assign(M, 0.0);
  out.samples = n;
  std::map<std::uint32_t, std::size_t> votes;
  for (std::size_t i = 0; i < n; ++i) {
    votes.clear();
    std::size_t best = 0;
    for (std::size_t k = 0; k < M; ++k) best = std::max(best, ++votes[predictions[k][i]]);
    out.histogram[best - 1] += 1.0;
  }
  for (auto& h : out.histogram) h /= static_cast<double>(n);
  out.all_agree = out.histogram.back();
  return out;
}

UnconditionalCoherence unconditional_coherence(const EvalClassifier& clf, const std::vector<Matrix>& modalities) {
  if (modalities.empty()) throw ConfigError("coherence: no modalities");
  clf.require_gate();
  std::vector<std::vector<std::uint32_t>> pred;
  for (const auto& m : modalities) pred.push_back(clf.predict(m));
  return unconditional_coherence(pred);
}

namespace {

void mean_cov(const Matrix& x, RowVector& mu, Matrix& cov) {
  const double n = static_cast<double>(x.rows());
  mu = x.colwise().mean();
  Matrix c = x.rowwise() - mu;
  cov = (c.transpose() * c) / (n - 1.0);
  cov = 0.5 * (cov + cov.transpose()).eval();
}

Vector clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Matrix>& es) {
  if (es.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition failed");
  Vector ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8) throw NumericError("frechet: covariance product has eigenvalue " + format_double(ev(i)));
    ev(i) = std::max(ev(i), 0.0);
  }
  return ev;
}

}  // namespace

double frechet_distance(const Matrix& features_a, const Matrix& features_b) {
  if (features_a.cols() != features_b.cols()) throw ShapeError("frechet: feature widths differ");
  const auto d = features_a.cols();
  if (features_a.rows() < 10 * d || features_b.rows() < 10 * d || features_a.rows() < 2 || features_b.rows() < 2)
    throw ConfigError("frechet: each set needs at least 10 x feature_dim samples");
  RowVector mu_a, mu_b;
  Matrix s_a, s_b;
  mean_cov(features_a, mu_a, s_a);
  mean_cov(features_b, mu_b, s_b);

  Eigen::SelfAdjointEigenSolver<Matrix> es_a(s_a);
  Vector ev_a = clamped_eigenvalues(es_a);
  Matrix root_a = es_a.eigenvectors() * ev_a.cwiseSqrt().asDiagonal() * es_a.eigenvectors().transpose();
  Matrix inner = root_a * s_b * root_a;
  inner = 0.5 * (inner + inner.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> es_in(inner, Eigen::EigenvaluesOnly);
  const double tr_root = clamped_eigenvalues(es_in).cwiseSqrt().sum();

  const double value = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * tr_root;
  if (!std::isfinite(value)) throw NumericError("frechet: non-finite distance");
  return std::max(value, 0.0);
}

ModeCoverage mode_coverage(const std::vector<std::uint32_t>& predicted, int num_classes) {
  if (predicted.empty()) throw ConfigError("mode coverage: empty sample set");
  if (num_classes < 1) throw ConfigError("mode coverage: no classes");
  ModeCoverage out;
  out.counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (auto p : predicted) {
    if (p >= static_cast<std::uint32_t>(num_classes)) throw DomainError("mode coverage: label out of range");
    ++out.counts[p];
  }
  const auto [lo, hi] = std::minmax_element(out.counts.begin(), out.counts.end());
  out.min_share = static_cast<double>(*lo) / static_cast<double>(predicted.size());
  out.max_share = static_cast<double>(*hi) / static_cast<double>(predicted.size());
  return out;
}

ModeCoverage mode_coverage(const EvalClassifier& clf, const Matrix& samples) {
  return mode_coverage(clf.predict(samples), clf.num_classes());
}

double attribute_f1(const Matrix& predicted, const Matrix& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols()) throw ShapeError("f1: length mismatch");
  if (predicted.rows() == 0) throw ConfigError("f1: empty input");
  double acc = 0.0;
  for (Eigen::Index r = 0; r < truth.rows(); ++r) {
    double tp = 0, fp = 0, fn = 0;
    for (Eigen::Index c = 0; c < truth.cols(); ++c) {
      const bool p = predicted(r, c) > 0.5, t = truth(r, c) > 0.5;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    acc += (tp + fp + fn == 0.0) ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  }
  return acc / static_cast<double>(truth.rows());
}

CosineReport latent_cosine_similarity(const std::vector<Matrix>& truth, const std::vector<Matrix>& recovered) {
  if (truth.size() != recovered.size() || truth.empty()) throw ShapeError("cosine: modality counts differ");
  CosineReport out;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const Matrix& a = truth[k];
    const Matrix& b = recovered[k];
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("cosine: unmatched sample pairs");
    double sum = 0.0;
    std::size_t used = 0, skipped = 0;
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const double na = a.row(r).norm(), nb = b.row(r).norm();
      if (na == 0.0 || nb == 0.0) {
        ++skipped;
        continue;
      }
      sum += a.row(r).dot(b.row(r)) / (na * nb);
      ++used;
    }
    out.per_modality.push_back(used > 0 ? sum / static_cast<double>(used) : 0.0);
    out.excluded.push_back(skipped);
  }
  out.average = std::accumulate(out.per_modality.begin(), out.per_modality.end(), 0.0) /
                static_cast<double>(out.per_modality.size());
  return out;
}

void MetricReport::add(const std::string& metric, double value, std::size_t n, std::uint64_t seed) {
  if (!std::isfinite(value)) throw NumericError("metric '" + metric + "' is not finite");
  if (metric.find_first_of(",\n") != std::string::npos) throw ConfigError("metric names may not contain commas or newlines");
  entries_.push_back({metric, value, n, seed});
}

bool MetricReport::has(const std::string& metric) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const MetricEntry& e) { return e.metric == metric; });
}

double MetricReport::value(const std::string& metric) const {
  for (const auto& e : entries_)
    if (e.metric == metric) return e.value;
  throw ConfigError("metric '" + metric + "' not in report");
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "metric,value,n,seed,config_hash\n";
  for (const auto& e : entries_)
    os << e.metric << ',' << format_double(e.value) << ',' << e.n << ',' << e.seed << ',' << config_hash_ << '\n';
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash_;
  j["metrics"] = nlohmann::ordered_json::array();
  for (const auto& e : entries_)
    j["metrics"].push_back({{"metric", e.metric}, {"value", e.value}, {"n", e.n}, {"seed", e.seed}});
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "metric,value,n,seed,config_hash") throw FormatError("metric CSV header missing");
  MetricReport out;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw FormatError("metric CSV row has " + std::to_string(f.size()) + " fields");
    if (first) out.config_hash_ = f[4];
    else if (f[4] != out.config_hash_) throw ConfigError("metric CSV mixes config hashes");
    first = false;
    out.entries_.push_back({f[0], std::stod(f[1]), std::stoull(f[2]), std::stoull(f[3])});
  }
  return out;
}

}  // namespace mmscore
