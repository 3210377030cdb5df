#include "mmscore/pipeline.hpp"

#include "mmscore/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmscore {

// ---------------------------------------------------------------------------------------------
// Names

std::string to_string(Stage s) {
  switch (s) {
    case Stage::gen_data: return "gen-data";
    case Stage::train_ae: return "train-ae";
    case Stage::train_score: return "train-score";
    case Stage::train_guidance: return "train-guidance";
    case Stage::sample: return "sample";
    case Stage::eval: return "eval";
    case Stage::report: return "report";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : all_stages())
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + s + "'");
}

const std::vector<Stage>& all_stages() {
  // Guidance precedes score training: the contrastive score net consumes the trained encoders.
  static const std::vector<Stage> order{Stage::gen_data, Stage::train_ae,  Stage::train_guidance, Stage::train_score,
                                        Stage::sample,   Stage::eval,      Stage::report};
  return order;
}

std::size_t DatasetConfig::num_modalities() const {
  return static_cast<std::size_t>(kind == DatasetKind::gaussian ? gaussian.num_modalities : toy.num_modalities);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------------------------
// Config parsing

namespace {

class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: '" + path_ + "." + key + "' has the wrong type (" + e.what() + ")");
    }
  }

  template <class T, class F>
  void get_as(const char* key, T& out, F convert) {
    std::string s;
    if (!j_.contains(key)) {
      seen_.insert(key);
      return;
    }
    get(key, s);
    out = convert(s);
  }

  Obj sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Obj(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("config: unknown key '" + path_ + "." + item.key() + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_ae_spec(Obj& o, AutoencoderSpec& s) {
  o.get_as("kind", s.kind, autoencoder_kind_from_string);
  o.get("latent_dim", s.latent_dim);
  o.get("hidden", s.hidden);
  o.get_as("hidden_activation", s.hidden_activation, activation_from_string);
  o.get("beta", s.beta);
  o.get("prior_std", s.prior_std);
  o.get_as("likelihood", s.likelihood, likelihood_from_string);
  o.get("decoder_noise_std", s.decoder_noise_std);
}

json ae_spec_json(const AutoencoderSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"latent_dim", s.latent_dim},
          {"hidden", s.hidden},
          {"hidden_activation", to_string(s.hidden_activation)},
          {"beta", s.beta},
          {"prior_std", s.prior_std},
          {"likelihood", to_string(s.likelihood)},
          {"decoder_noise_std", s.decoder_noise_std}};
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "gaussian") return DatasetKind::gaussian;
  if (s == "toy_digits") return DatasetKind::toy_digits;
  throw ConfigError("unknown dataset kind '" + s + "' (gaussian, toy_digits)");
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Obj root(j, "config");
  root.get("seed", c.seed);
  root.get("out", c.out);

  {
    Obj d = root.sub("dataset");
    d.get_as("kind", c.dataset.kind, dataset_kind_from_string);
    Obj g = d.sub("gaussian");
    g.get("modalities", c.dataset.gaussian.num_modalities);
    g.get("dim", c.dataset.gaussian.dim);
    g.get("correlation", c.dataset.gaussian.correlation);
    g.get("observation_noise", c.dataset.gaussian.observation_noise);
    g.get("train", c.dataset.gaussian_train);
    g.get("val", c.dataset.gaussian_val);
    g.get("test", c.dataset.gaussian_test);
    g.finish();
    Obj t = d.sub("toy_digits");
    t.get("modalities", c.dataset.toy.num_modalities);
    t.get("side", c.dataset.toy.side);
    t.get("classes", c.dataset.toy.num_classes);
    t.get("train", c.dataset.toy.train);
    t.get("val", c.dataset.toy.val);
    t.get("test", c.dataset.toy.test);
    t.finish();
    d.finish();
  }
  {
    Obj a = root.sub("autoencoder");
    read_ae_spec(a, c.autoencoder.spec);
    if (a.has("per_modality")) {
      const json& pm = a.raw("per_modality");
      if (!pm.is_array()) throw ConfigError("config: 'config.autoencoder.per_modality' must be an array");
      for (std::size_t k = 0; k < pm.size(); ++k) {
        AutoencoderSpec probe;
        Obj o(pm[k], "config.autoencoder.per_modality[" + std::to_string(k) + "]");
        read_ae_spec(o, probe);
        o.finish();
        c.autoencoder.per_modality.push_back(pm[k]);
      }
    }
    a.get_as("encode_mode", c.autoencoder.encode_mode, encode_mode_from_string);
    a.get("epochs", c.autoencoder.epochs);
    a.get("batch_size", c.autoencoder.batch_size);
    a.get("learning_rate", c.autoencoder.learning_rate);
    a.finish();
  }
  {
    Obj s = root.sub("score");
    s.get("beta_min", c.score.schedule.beta_min);
    s.get("beta_max", c.score.schedule.beta_max);
    s.get("steps", c.score.schedule.steps);
    s.get("time_embed_dim", c.score.time_embed_dim);
    s.get("hidden", c.score.hidden);
    s.get_as("activation", c.score.activation, activation_from_string);
    s.get("batch_size", c.score.batch_size);
    s.get("epochs", c.score.epochs);
    s.get("learning_rate", c.score.learning_rate);
    s.get("final_lr_fraction", c.score.final_lr_fraction);
    s.get("t_min", c.score.t_min);
    s.get_as("time_sampling", c.score.time_sampling, time_sampling_from_string);
    s.get("control_variate", c.score.control_variate);
    s.get("heldout_fraction", c.score.heldout_fraction);
    s.get("grad_clip", c.score.grad_clip);
    s.get("condition_dropout", c.score.condition_dropout);
    s.get("standardize", c.score.standardize);
    s.get("missing_fraction", c.score.missing_fraction);
    s.get("refresh_latents", c.score.refresh_latents);
    s.finish();
  }
  {
    Obj g = root.sub("guidance");
    g.get_as("mode", c.guidance.mode, guidance_mode_from_string);
    g.get("shared", c.guidance.shared);
    g.get("perturb", c.guidance.perturb);
    g.get("hidden", c.guidance.hidden);
    g.get("epochs", c.guidance.epochs);
    g.get("batch_size", c.guidance.batch_size);
    g.get("learning_rate", c.guidance.learning_rate);
    g.get("pairs_per_epoch", c.guidance.pairs_per_epoch);
    g.get("embed_dim", c.guidance.embed_dim);
    g.get("contrastive_hidden", c.guidance.contrastive_hidden);
    g.get("temperature", c.guidance.temperature);
    g.finish();
  }
  {
    Obj s = root.sub("sampler");
    s.get("steps", c.sampling.sampler.steps);
    s.get("corrector_steps", c.sampling.sampler.corrector_steps);
    s.get("snr", c.sampling.sampler.snr);
    s.get("guidance_scale", c.sampling.sampler.guidance_scale);
    s.get("hold_clean", c.sampling.sampler.hold_clean);
    s.get("average_pairs", c.sampling.sampler.average_pairs);
    s.get("seeds", c.sampling.seeds);
    s.get("conditional_rows", c.sampling.conditional_rows);
    s.get("unconditional_samples", c.sampling.unconditional_samples);
    s.get("observed_counts", c.sampling.observed_counts);
    s.get("compare_steps", c.sampling.compare_steps);
    s.finish();
  }
  {
    Obj f = root.sub("finetune");
    f.get("enabled", c.finetune.enabled);
    f.get("drop_probability", c.finetune.cfg.drop_probability);
    f.get("samples_per_example", c.finetune.cfg.samples_per_example);
    f.get("epochs", c.finetune.cfg.epochs);
    f.get("batch_size", c.finetune.cfg.batch_size);
    f.get("learning_rate", c.finetune.cfg.learning_rate);
    f.get("rows", c.finetune.rows);
    f.finish();
  }
  {
    Obj e = root.sub("eval");
    Obj cl = e.sub("classifier");
    cl.get("hidden", c.eval.classifier.hidden);
    cl.get("epochs", c.eval.classifier.epochs);
    cl.get("batch_size", c.eval.classifier.batch_size);
    cl.get("learning_rate", c.eval.classifier.learning_rate);
    cl.finish();
    e.finish();
  }
  {
    Obj o = root.sub("oracle");
    o.get("grid", c.oracle.grid);
    o.get("draws", c.oracle.draws);
    o.get("mean_tolerance", c.oracle.mean_tolerance);
    o.get("var_tolerance", c.oracle.var_tolerance);
    o.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out"] = out;
  j["dataset"] = {{"kind", dataset.kind == DatasetKind::gaussian ? "gaussian" : "toy_digits"},
                  {"gaussian",
                   {{"modalities", dataset.gaussian.num_modalities},
                    {"dim", dataset.gaussian.dim},
                    {"correlation", dataset.gaussian.correlation},
                    {"observation_noise", dataset.gaussian.observation_noise},
                    {"train", dataset.gaussian_train},
                    {"val", dataset.gaussian_val},
                    {"test", dataset.gaussian_test}}},
                  {"toy_digits",
                   {{"modalities", dataset.toy.num_modalities},
                    {"side", dataset.toy.side},
                    {"classes", dataset.toy.num_classes},
                    {"train", dataset.toy.train},
                    {"val", dataset.toy.val},
                    {"test", dataset.toy.test}}}};
  json ae = ae_spec_json(autoencoder.spec);
  ae["per_modality"] = autoencoder.per_modality;
  ae["encode_mode"] = to_string(autoencoder.encode_mode);
  ae["epochs"] = autoencoder.epochs;
  ae["batch_size"] = autoencoder.batch_size;
  ae["learning_rate"] = autoencoder.learning_rate;
  j["autoencoder"] = ae;
  j["score"] = {{"beta_min", score.schedule.beta_min},
                {"beta_max", score.schedule.beta_max},
                {"steps", score.schedule.steps},
                {"time_embed_dim", score.time_embed_dim},
                {"hidden", score.hidden},
                {"activation", to_string(score.activation)},
                {"batch_size", score.batch_size},
                {"epochs", score.epochs},
                {"learning_rate", score.learning_rate},
                {"final_lr_fraction", score.final_lr_fraction},
                {"t_min", score.t_min},
                {"time_sampling", to_string(score.time_sampling)},
                {"control_variate", score.control_variate},
                {"heldout_fraction", score.heldout_fraction},
                {"grad_clip", score.grad_clip},
                {"condition_dropout", score.condition_dropout},
                {"standardize", score.standardize},
                {"missing_fraction", score.missing_fraction},
                {"refresh_latents", score.refresh_latents}};
  j["guidance"] = {{"mode", to_string(guidance.mode)},
                   {"shared", guidance.shared},
                   {"perturb", guidance.perturb},
                   {"hidden", guidance.hidden},
                   {"epochs", guidance.epochs},
                   {"batch_size", guidance.batch_size},
                   {"learning_rate", guidance.learning_rate},
                   {"pairs_per_epoch", guidance.pairs_per_epoch},
                   {"embed_dim", guidance.embed_dim},
                   {"contrastive_hidden", guidance.contrastive_hidden},
                   {"temperature", guidance.temperature}};
  j["sampler"] = {{"steps", sampling.sampler.steps},
                  {"corrector_steps", sampling.sampler.corrector_steps},
                  {"snr", sampling.sampler.snr},
                  {"guidance_scale", sampling.sampler.guidance_scale},
                  {"hold_clean", sampling.sampler.hold_clean},
                  {"average_pairs", sampling.sampler.average_pairs},
                  {"seeds", sampling.seeds},
                  {"conditional_rows", sampling.conditional_rows},
                  {"unconditional_samples", sampling.unconditional_samples},
                  {"observed_counts", sampling.observed_counts},
                  {"compare_steps", sampling.compare_steps}};
  j["finetune"] = {{"enabled", finetune.enabled},
                   {"drop_probability", finetune.cfg.drop_probability},
                   {"samples_per_example", finetune.cfg.samples_per_example},
                   {"epochs", finetune.cfg.epochs},
                   {"batch_size", finetune.cfg.batch_size},
                   {"learning_rate", finetune.cfg.learning_rate},
                   {"rows", finetune.rows}};
  j["eval"] = {{"classifier",
                {{"hidden", eval.classifier.hidden},
                 {"epochs", eval.classifier.epochs},
                 {"batch_size", eval.classifier.batch_size},
                 {"learning_rate", eval.classifier.learning_rate}}}};
  j["oracle"] = {{"grid", oracle.grid},
                 {"draws", oracle.draws},
                 {"mean_tolerance", oracle.mean_tolerance},
                 {"var_tolerance", oracle.var_tolerance}};
  return j;
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("out");
  return fnv1a_hex(j.dump());
}

std::string RunConfig::stage_hash(Stage stage) const {
  json j = to_json();
  json part;
  switch (stage) {
    case Stage::gen_data:
      part = {{"seed", j["seed"]}, {"dataset", j["dataset"]}};
      break;
    case Stage::train_ae:
      part = {{"up", stage_hash(Stage::gen_data)}, {"autoencoder", j["autoencoder"]}, {"standardize", j["score"]["standardize"]}};
      break;
    case Stage::train_guidance:
      part = {{"up", stage_hash(Stage::train_ae)},
              {"guidance", j["guidance"]},
              {"schedule", {j["score"]["beta_min"], j["score"]["beta_max"], j["score"]["steps"], j["score"]["t_min"]}}};
      break;
    case Stage::train_score:
      part = {{"up", stage_hash(Stage::train_ae)}, {"score", j["score"]}};
      if (guidance.mode == GuidanceMode::contrastive) part["guidance"] = stage_hash(Stage::train_guidance);
      break;
    case Stage::sample:
      part = {{"up", stage_hash(Stage::train_score)}, {"sampler", j["sampler"]}, {"mode", j["guidance"]["mode"]}};
      if (guidance.mode != GuidanceMode::none) part["guidance"] = stage_hash(Stage::train_guidance);
      break;
    case Stage::eval:
      part = {{"up", stage_hash(Stage::sample)}, {"eval", j["eval"]}, {"finetune", j["finetune"]}};
      break;
    case Stage::report:
      part = {{"up", stage_hash(Stage::eval)}};
      break;
  }
  part["stage"] = to_string(stage);
  return fnv1a_hex(part.dump());
}

AutoencoderSpec RunConfig::autoencoder_spec(std::size_t k, int input_dim) const {
  AutoencoderSpec s = autoencoder.spec;
  if (k < autoencoder.per_modality.size()) {
    Obj o(autoencoder.per_modality[k], "config.autoencoder.per_modality[" + std::to_string(k) + "]");
    read_ae_spec(o, s);
  }
  s.input_dim = input_dim;
  return s;
}

void RunConfig::validate() const {
  const std::size_t M = dataset.num_modalities();
  if (dataset.kind == DatasetKind::gaussian) {
    dataset.gaussian.validate();
    if (dataset.gaussian_train < 2 || dataset.gaussian_val < 1 || dataset.gaussian_test < 1)
      throw ConfigError("gaussian dataset needs train >= 2, val >= 1, test >= 1");
  } else {
    dataset.toy.validate();
  }
  if (autoencoder.per_modality.size() > M) throw ConfigError("more per-modality autoencoder entries than modalities");
  for (std::size_t k = 0; k < M; ++k) autoencoder_spec(k, 1).validate();
  if (autoencoder.epochs < 0 || autoencoder.batch_size < 1 || !(autoencoder.learning_rate > 0))
    throw ConfigError("autoencoder epochs / batch_size / learning_rate invalid");
  score.schedule.validate();
  if (score.time_embed_dim < 2 || score.time_embed_dim % 2 != 0) throw ConfigError("score time_embed_dim must be even and >= 2");
  if (!(score.missing_fraction >= 0.0 && score.missing_fraction < 1.0)) throw ConfigError("missing_fraction must lie in [0, 1)");
  if (score.refresh_latents && autoencoder.encode_mode != EncodeMode::sample)
    throw ConfigError("refresh_latents requires encode_mode = sample");
  DSMConfig d;
  d.batch_size = score.batch_size;
  d.epochs = score.epochs;
  d.learning_rate = score.learning_rate;
  d.t_min = score.t_min;
  d.heldout_fraction = score.heldout_fraction;
  d.condition_dropout = score.condition_dropout;
  d.grad_clip = score.grad_clip;
  d.final_lr_fraction = score.final_lr_fraction;
  d.validate();
  sampling.sampler.validate();
  if (sampling.seeds < 1) throw ConfigError("sampler seeds must be >= 1");
  for (int k : sampling.observed_counts)
    if (k < 1 || static_cast<std::size_t>(k) >= M) throw ConfigError("observed_counts entries must lie in [1, M-1]");
  for (int s : sampling.compare_steps)
    if (s < 1) throw ConfigError("compare_steps entries must be >= 1");
  if (guidance.mode != GuidanceMode::none && M < 2) throw ConfigError("guidance needs at least two modalities");
  if (guidance.mode == GuidanceMode::energy && dataset.kind == DatasetKind::gaussian)
    throw ConfigError("energy guidance needs labelled data (toy_digits)");
  if (guidance.mode == GuidanceMode::contrastive && (guidance.embed_dim < 1 || !(guidance.temperature > 0)))
    throw ConfigError("contrastive embed_dim / temperature invalid");
  if (finetune.enabled) finetune.cfg.validate();
  if (oracle.grid.empty() || oracle.draws < oracle.grid.size()) throw ConfigError("oracle needs a grid and at least one draw per point");
}

// ---------------------------------------------------------------------------------------------
// Files and manifests

namespace {

void log(const StageOptions& opts, const std::string& msg) {
  if (opts.log != nullptr) *opts.log << msg << std::endl;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  os << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path manifest_path(const RunConfig& cfg, Stage s) { return fs::path(cfg.out) / "manifests" / (to_string(s) + ".json"); }

struct Manifest {
  std::string hash;
  std::vector<std::string> artifacts;
};

std::optional<Manifest> read_manifest(const RunConfig& cfg, Stage s) {
  const fs::path p = manifest_path(cfg, s);
  if (!fs::exists(p)) return std::nullopt;
  json j = json::parse(read_text(p));
  Manifest m;
  m.hash = j.at("config_hash").get<std::string>();
  m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  return m;
}

bool manifest_complete(const RunConfig& cfg, Stage s) {
  auto m = read_manifest(cfg, s);
  if (!m || m->hash != cfg.stage_hash(s)) return false;
  for (const auto& a : m->artifacts)
    if (!fs::exists(fs::path(cfg.out) / a)) return false;
  return true;
}

void write_manifest(const RunConfig& cfg, Stage s, const std::vector<std::string>& artifacts) {
  json j{{"stage", to_string(s)}, {"config_hash", cfg.stage_hash(s)}, {"artifacts", artifacts}};
  write_text(manifest_path(cfg, s), j.dump(2) + "\n");
}

void require_upstream(const RunConfig& cfg, Stage upstream) {
  if (!manifest_complete(cfg, upstream)) throw StateError("missing upstream artifacts: run " + to_string(upstream) + " first");
}

void put_matrix(Checkpoint& ck, const std::string& name, const Matrix& m) {
  const std::vector<double> shape{static_cast<double>(m.rows()), static_cast<double>(m.cols())};
  ck.put_f32(name + ".shape", shape);
  ck.put_f32(name, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

Matrix get_matrix(const Checkpoint& ck, const std::string& name) {
  const auto shape = ck.get_f32(name + ".shape");
  if (shape.size() != 2) throw FormatError("section '" + name + ".shape' malformed");
  const auto rows = static_cast<Eigen::Index>(shape[0]), cols = static_cast<Eigen::Index>(shape[1]);
  const auto flat = ck.get_f32(name);
  if (static_cast<Eigen::Index>(flat.size()) != rows * cols) throw LengthError("section '" + name + "' has the wrong length");
  Matrix m(rows, cols);
  std::copy(flat.begin(), flat.end(), m.data());
  return m;
}

Matrix round_f32(Matrix m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  return m;
}

Stage producer_of(const std::string& rel) {
  if (rel == "ae.sbmc" || rel == "latents.sbmc") return Stage::train_ae;
  if (rel == "energy.sbmc" || rel == "contrastive.sbmc") return Stage::train_guidance;
  if (rel == "score.sbmc") return Stage::train_score;
  if (rel.rfind("samples/", 0) == 0) return Stage::sample;
  return Stage::eval;
}

Checkpoint load_checked(const RunConfig& cfg, const std::string& rel) {
  Checkpoint ck = Checkpoint::load((fs::path(cfg.out) / rel).string());
  if (!ck.has("config_hash") || ck.get_string("config_hash") != cfg.stage_hash(producer_of(rel)))
    throw ConfigError(rel + " belongs to a different config hash; refusing to mix runs");
  return ck;
}

std::string csv_join(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
  return s + "\n";
}

std::vector<std::uint32_t> repeat_labels(const std::vector<std::uint32_t>& labels, std::size_t times) {
  std::vector<std::uint32_t> out;
  for (std::size_t k = 0; k < times; ++k) out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

LatentLayout layout_of(const std::vector<std::unique_ptr<ModalityAutoencoder>>& models) {
  std::vector<int> dims;
  for (const auto& m : models) dims.push_back(m->latent_dim());
  return LatentLayout(dims);
}

std::uint64_t sampling_seed(const RunConfig& cfg, int index) { return mix_seed(cfg.seed, 700 + static_cast<std::uint64_t>(index)); }

}  // namespace

// ---------------------------------------------------------------------------------------------
// Loading helpers

RunArtifacts load_artifacts(const RunConfig& cfg, bool need_score) {
  RunArtifacts run;
  run.cfg = cfg;
  const fs::path out(cfg.out);
  run.train = read_dataset((out / "data" / "train.sbmd").string());
  run.val = read_dataset((out / "data" / "val.sbmd").string());
  run.test = read_dataset((out / "data" / "test.sbmd").string());
  Checkpoint ae = load_checked(cfg, "ae.sbmc");
  for (std::size_t k = 0; k < run.train.num_modalities(); ++k)
    run.autoencoders.push_back(load_autoencoder(ae, "ae" + std::to_string(k)));
  if (need_score) run.score = load_score(load_checked(cfg, "score.sbmc"));
  if (cfg.guidance.mode == GuidanceMode::energy && fs::exists(out / "energy.sbmc"))
    run.energy = EnergyNetwork::load(load_checked(cfg, "energy.sbmc"), "energy");
  if (cfg.guidance.mode == GuidanceMode::contrastive && fs::exists(out / "contrastive.sbmc"))
    run.contrastive = ContrastiveEncoder::load(load_checked(cfg, "contrastive.sbmc"), "contrastive");
  return run;
}

Matrix encode_stacked(const RunArtifacts& run, const Dataset& data) {
  return stack_latents(encode_all(run.autoencoders, data.modalities, EncodeMode::mean, 0));
}

Matrix sample_latents(const RunArtifacts& run, const SamplerConfig& sampler, const ModalityMask& mask,
                      const Matrix* observed, std::size_t chains, const Matrix* condition, std::uint64_t seed) {
  if (!run.score) throw StateError("no score model loaded: run train-score first");
  const LoadedScore& sc = *run.score;
  GuidanceContext ctx;
  ctx.energy = run.energy ? &*run.energy : nullptr;
  ctx.condition = condition;
  Matrix z;
  if (observed != nullptr) {
    Matrix obs_n = sc.normalizer.apply(*observed);
    z = sc.normalizer.invert(pc_sample(sc.net, sc.net.schedule(), sampler, sc.layout, mask, &obs_n, chains, ctx, seed));
    const RowVector cm = mask.coordinate_mask(sc.layout);
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      if (cm(c) != 0.0) z.col(c) = observed->col(c);
  } else {
    z = sc.normalizer.invert(pc_sample(sc.net, sc.net.schedule(), sampler, sc.layout, mask, nullptr, chains, ctx, seed));
  }
  return z;
}

std::vector<Matrix> decode_stacked(const RunArtifacts& run, const Matrix& latents) {
  const auto parts = split_latents(latents, layout_of(run.autoencoders));
  std::vector<Matrix> out;
  for (std::size_t k = 0; k < parts.size(); ++k) out.push_back(run.autoencoders[k]->decode(parts[k]));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Stages

namespace {

std::vector<std::string> stage_gen_data(const RunConfig& cfg, const StageOptions& opts) {
  const fs::path out(cfg.out);
  Dataset train, val, test;
  if (cfg.dataset.kind == DatasetKind::gaussian) {
    const auto& g = cfg.dataset.gaussian;
    train = gen_gaussian_joint(g, cfg.dataset.gaussian_train, mix_seed(cfg.seed, 1));
    val = gen_gaussian_joint(g, cfg.dataset.gaussian_val, mix_seed(cfg.seed, 2));
    test = gen_gaussian_joint(g, cfg.dataset.gaussian_test, mix_seed(cfg.seed, 3));
  } else {
    ToyDigitSplits s = gen_toy_digits(cfg.dataset.toy, mix_seed(cfg.seed, 1));
    train = std::move(s.train);
    val = std::move(s.val);
    test = std::move(s.test);
  }
  fs::create_directories(out / "data");
  write_dataset(train, (out / "data" / "train.sbmd").string());
  write_dataset(val, (out / "data" / "val.sbmd").string());
  write_dataset(test, (out / "data" / "test.sbmd").string());
  log(opts, "gen-data: " + std::to_string(train.size()) + "/" + std::to_string(val.size()) + "/" +
                std::to_string(test.size()) + " samples, " + std::to_string(train.num_modalities()) + " modalities");
  return {"data/train.sbmd", "data/val.sbmd", "data/test.sbmd"};
}

std::vector<std::string> stage_train_ae(const RunConfig& cfg, const StageOptions& opts) {
  require_upstream(cfg, Stage::gen_data);
  const fs::path out(cfg.out);
  const Dataset train = read_dataset((out / "data" / "train.sbmd").string());
  const Dataset val = read_dataset((out / "data" / "val.sbmd").string());
  std::vector<std::unique_ptr<ModalityAutoencoder>> models;
  Checkpoint ck;
  ck.put_string("config_hash", cfg.stage_hash(Stage::train_ae));
  std::string csv = "modality,epoch,loss,reconstruction,regularizer,heldout_loss,config_hash\n";
  for (std::size_t k = 0; k < train.num_modalities(); ++k) {
    const AutoencoderSpec spec = cfg.autoencoder_spec(k, train.dim(k));
    auto model = make_autoencoder(spec, mix_seed(cfg.seed, 100 + k));
    AutoencoderTrainConfig tc;
    tc.epochs = cfg.autoencoder.epochs;
    tc.batch_size = cfg.autoencoder.batch_size;
    tc.learning_rate = cfg.autoencoder.learning_rate;
    tc.seed = mix_seed(cfg.seed, 200 + k);
    const auto hist = train_autoencoder(*model, train.modalities[k], val.modalities[k], tc);
    for (const auto& e : hist)
      csv += csv_join({std::to_string(k), std::to_string(e.epoch), format_double(e.loss), format_double(e.reconstruction),
                       format_double(e.regularizer), format_double(e.heldout_loss), cfg.stage_hash(Stage::train_ae)});
    round_to_f32(model->encoder());
    round_to_f32(model->decoder());
    model->save(ck, "ae" + std::to_string(k));
    log(opts, "train-ae: modality " + std::to_string(k) + " held-out loss " +
                  (hist.empty() ? std::string("n/a") : format_double(hist.back().heldout_loss)));
    models.push_back(std::move(model));
  }
  ck.save((out / "ae.sbmc").string());
  write_text(out / "ae_log.csv", csv);

  Matrix latents = round_f32(stack_latents(encode_all(models, train.modalities, cfg.autoencoder.encode_mode, mix_seed(cfg.seed, 300))));
  const LatentNormalizer norm =
      cfg.score.standardize ? LatentNormalizer::fit(latents) : LatentNormalizer::identity(static_cast<int>(latents.cols()));
  Checkpoint lk;
  lk.put_string("config_hash", cfg.stage_hash(Stage::train_ae));
  put_matrix(lk, "latents.train", latents);
  lk.put_f32("normalizer.mean", std::span<const double>(norm.mean.data(), static_cast<std::size_t>(norm.mean.size())));
  lk.put_f32("normalizer.scale", std::span<const double>(norm.scale.data(), static_cast<std::size_t>(norm.scale.size())));
  lk.save((out / "latents.sbmc").string());
  return {"ae.sbmc", "ae_log.csv", "latents.sbmc"};
}

struct TrainLatents {
  Matrix raw;
  LatentNormalizer normalizer;
  LatentLayout layout;
};

TrainLatents load_train_latents(const RunConfig& cfg) {
  Checkpoint lk = load_checked(cfg, "latents.sbmc");
  TrainLatents t;
  t.raw = get_matrix(lk, "latents.train");
  const auto mean = lk.get_f32("normalizer.mean");
  const auto scale = lk.get_f32("normalizer.scale");
  t.normalizer.mean = Eigen::Map<const RowVector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  t.normalizer.scale = Eigen::Map<const RowVector>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  Checkpoint ae = load_checked(cfg, "ae.sbmc");
  std::vector<int> dims;
  for (std::size_t k = 0; k < cfg.dataset.num_modalities(); ++k)
    dims.push_back(load_autoencoder(ae, "ae" + std::to_string(k))->latent_dim());
  t.layout = LatentLayout(dims);
  return t;
}

std::vector<std::string> stage_train_guidance(const RunConfig& cfg, const StageOptions& opts) {
  require_upstream(cfg, Stage::train_ae);
  const fs::path out(cfg.out);
  const auto& g = cfg.guidance;
  if (g.mode == GuidanceMode::none) {
    log(opts, "train-guidance: guidance mode none, nothing to train");
    return {};
  }
  const Dataset train = read_dataset((out / "data" / "train.sbmd").string());
  const Dataset val = read_dataset((out / "data" / "val.sbmd").string());
  MetricReport metrics(cfg.stage_hash(Stage::train_guidance));
  std::string csv = "epoch,loss,config_hash\n";
  Checkpoint ck;
  ck.put_string("config_hash", cfg.stage_hash(Stage::train_guidance));
  std::vector<std::string> artifacts;

  if (g.mode == GuidanceMode::energy) {
    TrainLatents tl = load_train_latents(cfg);
    const auto& lengths = tl.layout.lengths();
    if (std::adjacent_find(lengths.begin(), lengths.end(), std::not_equal_to<>()) != lengths.end())
      throw ConfigError("energy guidance needs equal latent dimensions across modalities");
    const auto latents = split_latents(tl.normalizer.apply(tl.raw), tl.layout);
    EnergyNetwork energy(lengths.front(), static_cast<int>(lengths.size()), g.hidden, g.shared, mix_seed(cfg.seed, 400));
    EbmTrainConfig ec;
    ec.epochs = g.epochs;
    ec.batch_size = g.batch_size;
    ec.learning_rate = g.learning_rate;
    ec.perturb = g.perturb;
    ec.t_min = cfg.score.t_min;
    ec.pairs_per_epoch = g.pairs_per_epoch;
    ec.seed = mix_seed(cfg.seed, 401);
    for (const auto& e : train_ebm(energy, latents, train.labels, cfg.score.schedule, ec))
      csv += csv_join({std::to_string(e.epoch), format_double(e.loss), cfg.stage_hash(Stage::train_guidance)});
    for (auto& n : energy.nets()) round_to_f32(n);
    energy.save(ck, "energy");

    std::vector<std::unique_ptr<ModalityAutoencoder>> models;
    Checkpoint ae = load_checked(cfg, "ae.sbmc");
    for (std::size_t k = 0; k < train.num_modalities(); ++k) models.push_back(load_autoencoder(ae, "ae" + std::to_string(k)));
    const auto val_latents =
        split_latents(tl.normalizer.apply(stack_latents(encode_all(models, val.modalities, EncodeMode::mean, 0))), tl.layout);
    for (double t : {0.01, 0.3, 0.7}) {
      const double m = energy_margin(energy, val_latents, val.labels, cfg.score.schedule, t, mix_seed(cfg.seed, 402));
      metrics.add("energy_margin/t" + format_double(t), m, val.size(), mix_seed(cfg.seed, 402));
    }

    // Null control: the same training on latents whose modalities no longer pair up.
    EnergyNetwork control(lengths.front(), static_cast<int>(lengths.size()), g.hidden, g.shared, mix_seed(cfg.seed, 403));
    ec.seed = mix_seed(cfg.seed, 404);
    train_ebm(control, decouple_modalities(latents, mix_seed(cfg.seed, 405)), train.labels, cfg.score.schedule, ec);
    const auto val_control = decouple_modalities(val_latents, mix_seed(cfg.seed, 406));
    for (double t : {0.01, 0.3, 0.7}) {
      const double m = energy_margin(control, val_control, val.labels, cfg.score.schedule, t, mix_seed(cfg.seed, 402));
      metrics.add("energy_margin_control/t" + format_double(t), m, val.size(), mix_seed(cfg.seed, 402));
    }
    ck.save((out / "energy.sbmc").string());
    artifacts.push_back("energy.sbmc");
    log(opts, "train-guidance: energy margin at t=0.3 " + format_double(metrics.value("energy_margin/t0.3")));
  } else {
    ContrastiveEncoder enc(train.dims(), g.embed_dim, g.contrastive_hidden, g.temperature, mix_seed(cfg.seed, 410));
    ContrastiveTrainConfig cc;
    cc.epochs = g.epochs;
    cc.batch_size = g.batch_size;
    cc.learning_rate = g.learning_rate;
    cc.seed = mix_seed(cfg.seed, 411);
    const auto hist = train_contrastive(enc, train.modalities, cc);
    for (std::size_t e = 0; e < hist.size(); ++e) csv += csv_join({std::to_string(e + 1), format_double(hist[e]), cfg.stage_hash(Stage::train_guidance)});
    for (auto& n : enc.nets()) round_to_f32(n);
    enc.log_temperature() = static_cast<double>(static_cast<float>(enc.log_temperature()));
    enc.save(ck, "contrastive");
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < train.num_modalities(); ++a)
      for (std::size_t b = 0; b < train.num_modalities(); ++b)
        if (a != b) {
          acc += retrieval_accuracy(enc, val.modalities[a], val.modalities[b], a, b);
          ++pairs;
        }
    metrics.add("retrieval_accuracy", acc / static_cast<double>(pairs), val.size(), 0);
    metrics.add("temperature", enc.temperature(), 0, 0);
    ck.save((out / "contrastive.sbmc").string());
    artifacts.push_back("contrastive.sbmc");
    log(opts, "train-guidance: retrieval accuracy " + format_double(metrics.value("retrieval_accuracy")));
  }
  write_text(out / "guidance_log.csv", csv);
  write_text(out / "guidance_metrics.csv", metrics.to_csv());
  artifacts.push_back("guidance_log.csv");
  artifacts.push_back("guidance_metrics.csv");
  return artifacts;
}

std::vector<std::string> stage_train_score(const RunConfig& cfg, const StageOptions& opts) {
  require_upstream(cfg, Stage::train_ae);
  const bool contrastive = cfg.guidance.mode == GuidanceMode::contrastive;
  if (contrastive) require_upstream(cfg, Stage::train_guidance);
  const fs::path out(cfg.out);
  TrainLatents tl = load_train_latents(cfg);
  const Matrix z = tl.normalizer.apply(tl.raw);

  ScoreNetSpec spec;
  spec.latent_dim = tl.layout.total();
  spec.time_embed_dim = cfg.score.time_embed_dim;
  spec.condition_dim = contrastive ? cfg.guidance.embed_dim : 0;
  spec.hidden = cfg.score.hidden;
  spec.activation = cfg.score.activation;
  ScoreNetwork net(spec, cfg.score.schedule, mix_seed(cfg.seed, 500));

  DSMConfig dc;
  dc.batch_size = cfg.score.batch_size;
  dc.epochs = cfg.score.epochs;
  dc.learning_rate = cfg.score.learning_rate;
  dc.t_min = cfg.score.t_min;
  dc.heldout_fraction = cfg.score.heldout_fraction;
  dc.condition_dropout = cfg.score.condition_dropout;
  dc.grad_clip = cfg.score.grad_clip;
  dc.final_lr_fraction = cfg.score.final_lr_fraction;
  dc.time_sampling = cfg.score.time_sampling;
  dc.control_variate = cfg.score.control_variate;
  dc.seed = mix_seed(cfg.seed, 501);

  std::optional<PresenceStream> presence;
  if (cfg.score.missing_fraction > 0.0)
    presence = make_presence_stream(static_cast<std::size_t>(z.rows()), tl.layout.num_modalities(), cfg.score.missing_fraction,
                                    mix_seed(cfg.seed, 502));

  std::optional<ConditionSource> conditions;
  std::optional<Dataset> train;
  if (contrastive || cfg.score.refresh_latents) train = read_dataset((out / "data" / "train.sbmd").string());
  if (contrastive) {
    ContrastiveEncoder enc = ContrastiveEncoder::load(load_checked(cfg, "contrastive.sbmc"), "contrastive");
    conditions.emplace();
    for (std::size_t k = 0; k < train->num_modalities(); ++k) conditions->per_modality.push_back(enc.embed(k, train->modalities[k]));
  }
  LatentRefresh refresh;
  std::vector<std::unique_ptr<ModalityAutoencoder>> models;
  if (cfg.score.refresh_latents) {
    Checkpoint ae = load_checked(cfg, "ae.sbmc");
    for (std::size_t k = 0; k < train->num_modalities(); ++k) models.push_back(load_autoencoder(ae, "ae" + std::to_string(k)));
    refresh = [&](int epoch) {
      return tl.normalizer.apply(
          stack_latents(encode_all(models, train->modalities, EncodeMode::sample, mix_seed(cfg.seed, 600 + static_cast<std::uint64_t>(epoch)))));
    };
  }

  const ScoreTrainResult res = train_score(net, z, tl.layout, dc, presence ? &*presence : nullptr,
                                           conditions ? &*conditions : nullptr, refresh);
  round_to_f32(net.net());
  Checkpoint ck;
  ck.put_string("config_hash", cfg.stage_hash(Stage::train_score));
  save_score(ck, net, tl.layout, tl.normalizer);
  ck.save((out / "score.sbmc").string());
  std::string csv = "epoch,train_loss,heldout_loss,config_hash\n";
  for (const auto& e : res.history)
    csv += csv_join({std::to_string(e.epoch), format_double(e.train_loss), format_double(e.heldout_loss), cfg.stage_hash(Stage::train_score)});
  write_text(out / "score_log.csv", csv);
  log(opts, "train-score: best held-out epoch " + std::to_string(res.best_epoch) + " of " + std::to_string(res.history.size()));
  return {"score.sbmc", "score_log.csv"};
}

struct RunSpec {
  std::string name;
  int observed = 0;
  GuidanceMode guidance = GuidanceMode::none;
  int steps = 0;
  int seed_index = 0;
};

std::vector<RunSpec> sampling_runs(const RunConfig& cfg) {
  const int M = static_cast<int>(cfg.dataset.num_modalities());
  const int N = cfg.sampling.sampler.steps > 0 ? cfg.sampling.sampler.steps : cfg.score.schedule.steps;
  std::vector<int> counts = cfg.sampling.observed_counts;
  if (counts.empty())
    for (int k = 1; k < M; ++k) counts.push_back(k);
  const GuidanceMode base = cfg.guidance.mode == GuidanceMode::contrastive ? GuidanceMode::contrastive : GuidanceMode::none;
  std::vector<RunSpec> runs;
  runs.push_back({"uncond", 0, base, N, 0});
  for (int s = 0; s < cfg.sampling.seeds; ++s) {
    const std::string suffix = "_s" + std::to_string(s);
    for (int k : counts) runs.push_back({"k" + std::to_string(k) + suffix, k, base, N, s});
    if (M >= 2 && cfg.guidance.mode == GuidanceMode::energy) runs.push_back({"k1_energy" + suffix, 1, GuidanceMode::energy, N, s});
    if (M >= 2)
      for (int steps : cfg.sampling.compare_steps)
        runs.push_back({"k1_steps" + std::to_string(steps) + suffix, 1, base, steps, s});
  }
  return runs;
}

std::vector<std::string> stage_sample(const RunConfig& cfg, const StageOptions& opts) {
  require_upstream(cfg, Stage::train_score);
  if (cfg.guidance.mode != GuidanceMode::none) require_upstream(cfg, Stage::train_guidance);
  const fs::path out(cfg.out);
  RunArtifacts run = load_artifacts(cfg, true);
  const std::size_t M = run.test.num_modalities();
  const std::size_t rows = std::min(cfg.sampling.conditional_rows, run.test.size());
  const Dataset cond_data = run.test.slice(0, rows);
  const Matrix test_latents = encode_stacked(run, cond_data);

  std::vector<std::string> artifacts;
  std::string index = "run,observed,guidance,steps,seed_index,seed,rows,config_hash\n";
  fs::create_directories(out / "samples");
  for (const RunSpec& r : sampling_runs(cfg)) {
    SamplerConfig sc = cfg.sampling.sampler;
    sc.steps = r.steps;
    sc.guidance = r.guidance;
    const std::uint64_t seed = sampling_seed(cfg, r.seed_index);
    const ModalityMask mask = ModalityMask::first(M, static_cast<std::size_t>(r.observed));
    const std::size_t n = r.observed == 0 ? cfg.sampling.unconditional_samples : rows;
    std::optional<Matrix> condition;
    if (r.guidance == GuidanceMode::contrastive) {
      if (r.observed == 0)
        condition = condition_embedding(*run.contrastive, cond_data.modalities, mask, n);
      else
        condition = condition_embedding(*run.contrastive, cond_data.modalities, mask);
    }
    Matrix z = r.observed == 0 ? sample_latents(run, sc, mask, nullptr, n, condition ? &*condition : nullptr, seed)
                               : sample_latents(run, sc, mask, &test_latents, n, condition ? &*condition : nullptr, seed);
    z = round_f32(z);
    Dataset ds;
    ds.num_classes = run.test.num_classes;
    for (auto& m : decode_stacked(run, z)) ds.modalities.push_back(round_f32(m));
    ds.labels = r.observed == 0 ? std::vector<std::uint32_t>(n, 0) : cond_data.labels;
    const std::string base = "samples/" + r.name;
    write_dataset(ds, (out / (base + ".sbmd")).string());
    Checkpoint lk;
    lk.put_string("config_hash", cfg.stage_hash(Stage::sample));
    put_matrix(lk, "latents", z);
    std::vector<double> flags;
    for (bool b : mask.flags()) flags.push_back(b ? 1.0 : 0.0);
    lk.put_f32("mask", flags);
    lk.save((out / (base + ".latent.sbmc")).string());
    artifacts.push_back(base + ".sbmd");
    artifacts.push_back(base + ".latent.sbmc");
    index += csv_join({r.name, std::to_string(r.observed), to_string(r.guidance), std::to_string(r.steps),
                       std::to_string(r.seed_index), std::to_string(seed), std::to_string(n), cfg.stage_hash(Stage::sample)});
    log(opts, "sample: " + r.name + " (" + std::to_string(n) + " chains, " + std::to_string(r.steps) + " steps)");
  }
  write_text(out / "samples" / "runs.csv", index);
  artifacts.push_back("samples/runs.csv");
  return artifacts;
}

struct SampleRun {
  RunSpec spec;
  std::uint64_t seed = 0;
  Dataset data;
  Matrix latents;
};

std::vector<SampleRun> load_sample_runs(const RunConfig& cfg) {
  const fs::path out(cfg.out);
  std::istringstream is(read_text(out / "samples" / "runs.csv"));
  std::string line;
  std::getline(is, line);
  std::vector<SampleRun> runs;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw FormatError("samples/runs.csv row malformed");
    if (f[7] != cfg.stage_hash(Stage::sample)) throw ConfigError("samples/runs.csv belongs to a different config hash; refusing to mix runs");
    SampleRun r;
    r.spec = {f[0], std::stoi(f[1]), guidance_mode_from_string(f[2]), std::stoi(f[3]), std::stoi(f[4])};
    r.seed = std::stoull(f[5]);
    r.data = read_dataset((out / "samples" / (f[0] + ".sbmd")).string());
    r.latents = get_matrix(load_checked(cfg, "samples/" + f[0] + ".latent.sbmc"), "latents");
    runs.push_back(std::move(r));
  }
  return runs;
}

Matrix vstack(const std::vector<Matrix>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

/// Features for Frechet distances: classifier penultimate layer, or the raw observations when
/// the dataset has no classifier.
Matrix fd_features(const std::optional<EvalClassifier>& clf, const Matrix& x) { return clf ? clf->features(x) : x; }

std::optional<double> try_frechet(const Matrix& a, const Matrix& b) {
  if (a.rows() < 10 * a.cols() || b.rows() < 10 * b.cols() || a.rows() < 2 || b.rows() < 2) return std::nullopt;
  return frechet_distance(a, b);
}

struct CondScores {
  double coherence = 0.0;
  double coherence_last = 0.0;
  std::optional<double> frechet;
};

/// Scores the unobserved modalities of a conditional run decoded by `decoders`.
CondScores score_conditional(const std::optional<EvalClassifier>& clf, const std::vector<Matrix>& decoded,
                             const Dataset& reference, const std::vector<std::uint32_t>& labels, std::size_t observed) {
  CondScores s;
  const std::size_t M = decoded.size();
  double fd_sum = 0.0;
  std::size_t fd_count = 0;
  bool fd_ok = true;
  for (std::size_t k = observed; k < M; ++k) {
    if (clf) {
      const double c = conditional_coherence(*clf, decoded[k], labels);
      s.coherence += c / static_cast<double>(M - observed);
      if (k == M - 1) s.coherence_last = c;
    }
    auto fd = try_frechet(fd_features(clf, reference.modalities[k]), fd_features(clf, decoded[k]));
    if (fd) {
      fd_sum += *fd;
      ++fd_count;
    } else {
      fd_ok = false;
    }
  }
  if (fd_ok && fd_count > 0) s.frechet = fd_sum / static_cast<double>(fd_count);
  return s;
}

std::vector<std::string> stage_eval(const RunConfig& cfg, const StageOptions& opts) {
  require_upstream(cfg, Stage::sample);
  const fs::path out(cfg.out);
  RunArtifacts run = load_artifacts(cfg, cfg.finetune.enabled);
  const std::size_t M = run.test.num_modalities();
  const LatentLayout layout = layout_of(run.autoencoders);
  const auto runs = load_sample_runs(cfg);
  MetricReport report(cfg.stage_hash(Stage::eval));
  std::vector<std::string> artifacts;

  const std::size_t rows = std::min(cfg.sampling.conditional_rows, run.test.size());
  const Dataset cond_data = run.test.slice(0, rows);
  const auto true_latents = split_latents(encode_stacked(run, cond_data), layout);

  std::optional<EvalClassifier> clf;
  if (cfg.dataset.kind == DatasetKind::toy_digits) {
    clf.emplace(run.train.dim(0), static_cast<int>(run.train.num_classes), cfg.eval.classifier.hidden, mix_seed(cfg.seed, 800));
    ClassifierTrainConfig cc = cfg.eval.classifier;
    cc.seed = mix_seed(cfg.seed, 801);
    const auto hist = train_classifier(*clf, vstack(run.train.modalities), repeat_labels(run.train.labels, M),
                                       vstack(run.val.modalities), repeat_labels(run.val.labels, M), cc);
    round_to_f32(clf->net());
    clf->set_heldout_accuracy(clf->accuracy(vstack(run.val.modalities), repeat_labels(run.val.labels, M)));
    Checkpoint ck;
    ck.put_string("config_hash", cfg.stage_hash(Stage::eval));
    clf->save(ck, "classifier");
    ck.save((out / "classifier.sbmc").string());
    std::string csv = "epoch,loss,heldout_accuracy,config_hash\n";
    for (const auto& e : hist)
      csv += csv_join({std::to_string(e.epoch), format_double(e.loss), format_double(e.heldout_accuracy), cfg.stage_hash(Stage::eval)});
    write_text(out / "classifier_log.csv", csv);
    artifacts.push_back("classifier.sbmc");
    artifacts.push_back("classifier_log.csv");
    report.add("classifier_heldout_accuracy", clf->heldout_accuracy(), run.val.size() * M, 0);
    log(opts, "eval: classifier held-out accuracy " + format_double(clf->heldout_accuracy()));
    clf->require_gate();
  }

  std::vector<std::unique_ptr<ModalityAutoencoder>> tuned;
  if (cfg.finetune.enabled) {
    Checkpoint ae = load_checked(cfg, "ae.sbmc");
    for (std::size_t k = 0; k < M; ++k) tuned.push_back(load_autoencoder(ae, "ae" + std::to_string(k)));
    SamplerConfig plain = cfg.sampling.sampler;
    plain.guidance = GuidanceMode::none;
    ConditionalLatentSampler sampler = [&](const ModalityMask& mask, const Matrix& observed, std::uint64_t seed) {
      return sample_latents(run, plain, mask, &observed, static_cast<std::size_t>(observed.rows()), nullptr, seed);
    };
    const std::size_t n = cfg.finetune.rows > 0 ? std::min(cfg.finetune.rows, run.train.size()) : run.train.size();
    FinetuneConfig fc = cfg.finetune.cfg;
    fc.seed = mix_seed(cfg.seed, 850);
    const FinetuneReport fr = finetune_decoders(tuned, sampler, run.train.slice(0, n).modalities, fc);
    Checkpoint ck;
    ck.put_string("config_hash", cfg.stage_hash(Stage::eval));
    for (std::size_t k = 0; k < M; ++k) {
      round_to_f32(tuned[k]->decoder());
      tuned[k]->save(ck, "ae" + std::to_string(k));
    }
    ck.save((out / "ae_finetuned.sbmc").string());
    artifacts.push_back("ae_finetuned.sbmc");
    report.add("finetune/optimizer_steps", static_cast<double>(fr.optimizer_steps), n, fc.seed);
    report.add("finetune/mean_nll", fr.mean_nll, n, fc.seed);
    log(opts, "eval: decoder fine-tuning took " + std::to_string(fr.optimizer_steps) + " steps");
  }

  for (const SampleRun& r : runs) {
    const std::string& name = r.spec.name;
    const std::size_t n = r.data.size();
    if (r.spec.observed == 0) {
      if (clf) {
        const UnconditionalCoherence uc = unconditional_coherence(*clf, r.data.modalities);
        for (std::size_t j = 0; j < uc.histogram.size(); ++j) report.add("uncond_hist/" + std::to_string(j + 1), uc.histogram[j], n, r.seed);
        report.add("uncond_all_agree", uc.all_agree, n, r.seed);
        std::vector<std::uint32_t> pooled;
        for (const auto& m : r.data.modalities) {
          const auto p = clf->predict(m);
          pooled.insert(pooled.end(), p.begin(), p.end());
        }
        const ModeCoverage mc = mode_coverage(pooled, clf->num_classes());
        for (std::size_t c = 0; c < mc.counts.size(); ++c)
          report.add("mode_share/" + std::to_string(c), static_cast<double>(mc.counts[c]) / static_cast<double>(pooled.size()),
                     pooled.size(), r.seed);
        report.add("mode_share_min", mc.min_share, pooled.size(), r.seed);
        report.add("mode_share_max", mc.max_share, pooled.size(), r.seed);
      } else {
        Matrix c = r.latents.rowwise() - r.latents.colwise().mean();
        Matrix cov = (c.transpose() * c) / static_cast<double>(std::max<Eigen::Index>(1, r.latents.rows() - 1));
        for (Eigen::Index i = 0; i < cov.rows(); ++i)
          for (Eigen::Index j = i; j < cov.cols(); ++j)
            report.add("uncond_latent_cov/" + std::to_string(i) + "_" + std::to_string(j), cov(i, j), n, r.seed);
      }
      double fd_sum = 0.0;
      bool fd_ok = true;
      for (std::size_t k = 0; k < M; ++k) {
        auto fd = try_frechet(fd_features(clf, run.test.modalities[k]), fd_features(clf, r.data.modalities[k]));
        if (!fd) {
          fd_ok = false;
          continue;
        }
        report.add("frechet/m" + std::to_string(k), *fd, n, r.seed);
        fd_sum += *fd;
      }
      if (fd_ok) report.add("frechet_mean", fd_sum / static_cast<double>(M), n, r.seed);
      continue;
    }

    const auto observed = static_cast<std::size_t>(r.spec.observed);
    const CondScores s = score_conditional(clf, r.data.modalities, cond_data, cond_data.labels, observed);
    if (clf) {
      report.add("coherence/" + name, s.coherence, n, r.seed);
      report.add("coherence_last/" + name, s.coherence_last, n, r.seed);
    }
    if (s.frechet) report.add("frechet_cond/" + name, *s.frechet, n, r.seed);
    const auto sampled = split_latents(r.latents, layout);
    std::vector<Matrix> t_u, s_u;
    for (std::size_t k = observed; k < M; ++k) {
      t_u.push_back(true_latents[k]);
      s_u.push_back(sampled[k]);
    }
    report.add("cosine/" + name, latent_cosine_similarity(t_u, s_u).average, n, r.seed);

    if (!tuned.empty()) {
      std::vector<Matrix> decoded;
      for (std::size_t k = 0; k < M; ++k) decoded.push_back(round_f32(tuned[k]->decode(sampled[k])));
      const CondScores ft = score_conditional(clf, decoded, cond_data, cond_data.labels, observed);
      if (clf) {
        report.add("finetune/coherence/" + name, ft.coherence, n, r.seed);
        report.add("finetune/coherence_last/" + name, ft.coherence_last, n, r.seed);
      }
      if (ft.frechet) report.add("finetune/frechet_cond/" + name, *ft.frechet, n, r.seed);
    }
  }

  write_text(out / "metrics.csv", report.to_csv());
  write_text(out / "metrics.json", report.to_json());
  artifacts.push_back("metrics.csv");
  artifacts.push_back("metrics.json");
  log(opts, "eval: " + std::to_string(report.entries().size()) + " metrics");
  return artifacts;
}

/// Parses "<prefix>k<K>_s<S>" names with nothing after the seed.
bool parse_run_name(const std::string& name, const std::string& prefix, const std::string& infix, int& k, int& s) {
  if (name.rfind(prefix, 0) != 0) return false;
  const std::string rest = name.substr(prefix.size());
  const auto us = rest.find(infix + "_s");
  if (rest.empty() || rest[0] != 'k' || us == std::string::npos) return false;
  const std::string k_str = rest.substr(1, us - 1);
  const std::string s_str = rest.substr(us + infix.size() + 2);
  if (k_str.empty() || s_str.empty() || !std::all_of(k_str.begin(), k_str.end(), ::isdigit) ||
      !std::all_of(s_str.begin(), s_str.end(), ::isdigit))
    return false;
  k = std::stoi(k_str);
  s = std::stoi(s_str);
  return true;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::vector<std::string> stage_report(const RunConfig& cfg, const StageOptions& opts) {
  const fs::path out(cfg.out);
  const fs::path dir = out / "report";
  fs::create_directories(dir);
  std::vector<std::string> gaps;
  std::vector<std::string> artifacts;
  std::optional<MetricReport> metrics;
  if (manifest_complete(cfg, Stage::eval)) {
    metrics = MetricReport::from_csv(read_text(out / "metrics.csv"));
    if (metrics->config_hash() != cfg.stage_hash(Stage::eval) && !metrics->entries().empty())
      throw ConfigError("metrics.csv belongs to a different config hash; refusing to mix runs");
  } else {
    gaps.push_back("metrics: absent (run eval first)");
  }
  std::map<std::string, double> m;
  if (metrics)
    for (const auto& e : metrics->entries()) m.emplace(e.metric, e.value);

  auto emit = [&](const std::string& table, const std::string& body, const std::string& reason) {
    const std::string rel = "report/" + table + ".csv";
    if (body.empty()) {
      if (fs::exists(out / rel)) fs::remove(out / rel);
      gaps.push_back(table + ": absent (" + reason + ")");
      return false;
    }
    write_text(out / rel, "x,y,series\n" + body);
    artifacts.push_back(rel);
    return true;
  };

  // Coherence of the last modality against the number of observed modalities.
  std::map<int, std::map<int, double>> by_k;
  for (const auto& [name, v] : m) {
    int k, s;
    if (parse_run_name(name, "coherence_last/", "", k, s)) by_k[k][s] = v;
  }
  std::string body;
  for (const auto& [k, seeds] : by_k) {
    std::vector<double> vals;
    for (const auto& [s, v] : seeds) {
      body += csv_join({std::to_string(k), format_double(v), "seed" + std::to_string(s)});
      vals.push_back(v);
    }
    body += csv_join({std::to_string(k), format_double(mean_of(vals)), "mean"});
  }
  const bool t1 = emit("coherence_vs_observed", body, "no conditional coherence metrics");

  // Guidance on/off and sampling steps at one observed modality.
  const int N = cfg.sampling.sampler.steps > 0 ? cfg.sampling.sampler.steps : cfg.score.schedule.steps;
  std::map<std::pair<std::string, int>, std::vector<double>> gs;
  bool any_variant = false;
  for (const auto& [name, v] : m) {
    int k, s;
    if (parse_run_name(name, "coherence_last/", "", k, s) && k == 1) gs[{"none", N}].push_back(v);
    if (parse_run_name(name, "coherence_last/", "_energy", k, s) && k == 1) {
      gs[{"energy", N}].push_back(v);
      any_variant = true;
    }
    const std::string pre = "coherence_last/k1_steps";
    if (name.rfind(pre, 0) == 0) {
      const std::string rest = name.substr(pre.size());
      const auto us = rest.find("_s");
      if (us != std::string::npos) {
        gs[{"none", std::stoi(rest.substr(0, us))}].push_back(v);
        any_variant = true;
      }
    }
  }
  body.clear();
  if (any_variant)
    for (const auto& [key, vals] : gs) body += csv_join({std::to_string(key.second), format_double(mean_of(vals)), key.first});
  const bool t2 = emit("guidance_steps", body, "no guided or step-count comparison runs");

  body.clear();
  for (std::size_t j = 1; m.count("uncond_hist/" + std::to_string(j)); ++j)
    body += csv_join({std::to_string(j), format_double(m.at("uncond_hist/" + std::to_string(j))), "fraction"});
  const bool t3 = emit("unconditional_histogram", body, "no unconditional coherence metrics");

  body.clear();
  for (std::size_t c = 0; m.count("mode_share/" + std::to_string(c)); ++c)
    body += csv_join({std::to_string(c), format_double(m.at("mode_share/" + std::to_string(c))), "share"});
  const bool t4 = emit("mode_coverage", body, "no mode coverage metrics");

  MetricReport summary(cfg.stage_hash(Stage::report));
  if (metrics)
    for (const auto& e : metrics->entries()) summary.add(e.metric, e.value, e.n, e.seed);
  summary.add("table/coherence_vs_observed", t1 ? 1.0 : 0.0, 0, 0);
  summary.add("table/guidance_steps", t2 ? 1.0 : 0.0, 0, 0);
  summary.add("table/unconditional_histogram", t3 ? 1.0 : 0.0, 0, 0);
  summary.add("table/mode_coverage", t4 ? 1.0 : 0.0, 0, 0);
  write_text(dir / "summary.csv", summary.to_csv());
  std::string gap_text;
  for (const auto& g : gaps) gap_text += g + "\n";
  write_text(dir / "gaps.txt", gap_text);
  artifacts.push_back("report/summary.csv");
  artifacts.push_back("report/gaps.txt");
  log(opts, "report: " + std::to_string(artifacts.size() - 2) + " tables, " + std::to_string(gaps.size()) + " gaps");
  return artifacts;
}

}  // namespace

StageOutcome run_stage(Stage stage, const RunConfig& cfg, const StageOptions& opts) {
  cfg.validate();
  const fs::path out(cfg.out);
  fs::create_directories(out);
  const std::string h = cfg.stage_hash(stage);
  if (const auto prev = read_manifest(cfg, stage); prev && prev->hash != h && !opts.force)
    throw ConfigError("output directory '" + cfg.out + "' holds " + to_string(stage) + " artifacts with config hash " + prev->hash +
                      " (this config: " + h + "); refusing to mix runs, use --force or another --out");
  if (!opts.force && manifest_complete(cfg, stage)) {
    log(opts, to_string(stage) + ": up to date, skipped");
    return {stage, true};
  }
  json cj = cfg.to_json();
  cj["config_hash"] = cfg.hash();
  write_text(out / "config.json", cj.dump(2) + "\n");
  if (fs::exists(manifest_path(cfg, stage))) fs::remove(manifest_path(cfg, stage));

  std::vector<std::string> artifacts;
  switch (stage) {
    case Stage::gen_data: artifacts = stage_gen_data(cfg, opts); break;
    case Stage::train_ae: artifacts = stage_train_ae(cfg, opts); break;
    case Stage::train_guidance: artifacts = stage_train_guidance(cfg, opts); break;
    case Stage::train_score: artifacts = stage_train_score(cfg, opts); break;
    case Stage::sample: artifacts = stage_sample(cfg, opts); break;
    case Stage::eval: artifacts = stage_eval(cfg, opts); break;
    case Stage::report: artifacts = stage_report(cfg, opts); break;
  }
  write_manifest(cfg, stage, artifacts);
  return {stage, false};
}

std::vector<StageOutcome> run_pipeline(Stage first, const RunConfig& cfg, const StageOptions& opts, bool stage_only) {
  std::vector<StageOutcome> done;
  const auto& order = all_stages();
  auto it = std::find(order.begin(), order.end(), first);
  for (; it != order.end(); ++it) {
    done.push_back(run_stage(*it, cfg, opts));
    if (stage_only) break;
  }
  return done;
}

OracleReport verify_oracle(const RunConfig& cfg, const StageOptions& opts) {
  if (cfg.dataset.kind != DatasetKind::gaussian) throw ConfigError("verify-oracle needs a gaussian dataset config");
  const auto& g = cfg.dataset.gaussian;
  if (g.num_modalities < 2 || g.dim != 1) throw ConfigError("verify-oracle needs >= 2 modalities of dimension 1");
  for (Stage s : {Stage::gen_data, Stage::train_ae, Stage::train_score}) run_stage(s, cfg, opts);
  RunArtifacts run = load_artifacts(cfg, true);
  const LoadedScore& sc = *run.score;
  for (const auto& ae : run.autoencoders)
    if (ae->latent_dim() != 1) throw ConfigError("verify-oracle needs one latent dimension per modality");

  // Encoders must be affine for the Gaussian conditional to carry over in closed form.
  double a[2], b[2];
  for (int k = 0; k < 2; ++k) {
    Matrix x(3, 1);
    x << 0.0, 1.0, 2.0;
    const Matrix z = run.autoencoders[static_cast<std::size_t>(k)]->encode_mean(x);
    a[k] = z(1, 0) - z(0, 0);
    b[k] = z(0, 0);
    if (std::abs((z(2, 0) - z(1, 0)) - a[k]) > 1e-9 * std::max(1.0, std::abs(a[k])) || a[k] == 0.0)
      throw ConfigError("verify-oracle needs linear, non-degenerate encoders (no hidden layers)");
  }
  const int o_col = sc.layout.offset(0), u_col = sc.layout.offset(1);
  const double c_o = a[0] / sc.normalizer.scale(o_col), c_u = a[1] / sc.normalizer.scale(u_col);
  const double e_o = (b[0] - sc.normalizer.mean(o_col)) / sc.normalizer.scale(o_col);
  const double e_u = (b[1] - sc.normalizer.mean(u_col)) / sc.normalizer.scale(u_col);
  const double s2 = 1.0 + g.observation_noise * g.observation_noise;
  const double rho = g.correlation;

  OracleReport rep;
  rep.expected_slope = c_u * rho / (s2 * c_o);
  rep.correlation = rho / s2;
  SamplerConfig scfg = cfg.sampling.sampler;
  scfg.guidance = GuidanceMode::none;
  const std::size_t per_point = cfg.oracle.draws / cfg.oracle.grid.size();
  const json cj = cfg.to_json();
  const std::string oracle_hash = fnv1a_hex(cfg.stage_hash(Stage::train_score) + cj["sampler"].dump() + cj["oracle"].dump());
  const ModalityMask mask = ModalityMask::first(sc.layout.num_modalities(), 1);
  std::string csv = "z_o,draws,mean,expected_mean,var,expected_var,pass,config_hash\n";
  for (std::size_t i = 0; i < cfg.oracle.grid.size(); ++i) {
    const double z_o = cfg.oracle.grid[i];
    Matrix obs = Matrix::Zero(static_cast<Eigen::Index>(per_point), sc.layout.total());
    obs.col(o_col).setConstant(z_o);
    const Matrix z = pc_sample(sc.net, sc.net.schedule(), scfg, sc.layout, mask, &obs, per_point, {}, mix_seed(cfg.seed, 900 + i));
    const Vector zu = z.col(u_col);
    OracleRow row;
    row.z_o = z_o;
    row.draws = per_point;
    row.mean = zu.mean();
    row.var = (zu.array() - row.mean).square().sum() / static_cast<double>(per_point - 1);
    const double x_o = (z_o - e_o) / c_o;
    row.expected_mean = c_u * (rho / s2) * x_o + e_u;
    row.expected_var = c_u * c_u * (s2 - rho * rho / s2);
    const double dm = std::abs(row.mean - row.expected_mean), dv = std::abs(row.var - row.expected_var);
    row.pass = dm < cfg.oracle.mean_tolerance && dv < cfg.oracle.var_tolerance;
    if (dm >= cfg.oracle.mean_tolerance)
      rep.failures.push_back("z_o=" + format_double(z_o) + ": conditional mean error " + format_double(dm) + " >= " +
                             format_double(cfg.oracle.mean_tolerance));
    if (dv >= cfg.oracle.var_tolerance)
      rep.failures.push_back("z_o=" + format_double(z_o) + ": conditional variance error " + format_double(dv) + " >= " +
                             format_double(cfg.oracle.var_tolerance));
    csv += csv_join({format_double(z_o), std::to_string(per_point), format_double(row.mean), format_double(row.expected_mean),
                     format_double(row.var), format_double(row.expected_var), row.pass ? "1" : "0", oracle_hash});
    rep.rows.push_back(row);
  }
  rep.passed = rep.failures.empty();
  write_text(fs::path(cfg.out) / "oracle.csv", csv);
  return rep;
}

void print_oracle(const OracleReport& r, std::ostream& os) {
  os << "expected slope " << format_double(r.expected_slope) << " (data correlation " << format_double(r.correlation) << ")\n";
  os << std::setw(8) << "z_o" << std::setw(12) << "mean" << std::setw(12) << "expected" << std::setw(12) << "var"
     << std::setw(12) << "expected" << "  status\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& row : r.rows)
    os << std::setw(8) << row.z_o << std::setw(12) << row.mean << std::setw(12) << row.expected_mean << std::setw(12) << row.var
       << std::setw(12) << row.expected_var << "  " << (row.pass ? "ok" : "FAIL") << "\n";
  os.unsetf(std::ios::fixed);
  for (const auto& f : r.failures) os << "failure: " << f << "\n";
  os << (r.passed ? "oracle: PASS" : "oracle: FAIL") << "\n";
}

}  // namespace mmscore
