#include "mmscore/pipeline.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

namespace py = pybind11;
using namespace mmscore;

namespace {

RunConfig config_from(const std::string& text, const std::string& out) {
  RunConfig cfg = RunConfig::from_json(nlohmann::json::parse(text));
  if (!out.empty()) cfg.out = out;
  cfg.validate();
  return cfg;
}

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["modalities"] = ds.modalities;
  d["labels"] = ds.labels;
  d["num_classes"] = ds.num_classes;
  d["dims"] = ds.dims();
  return d;
}

/// Loaded run directory: encode, sample and decode in raw latent coordinates.
class Run {
 public:
  Run(const std::string& config_json, const std::string& out) : run_(load_artifacts(config_from(config_json, out), true)) {}

  std::size_t num_modalities() const { return run_.autoencoders.size(); }
  Matrix encode(const std::vector<Matrix>& x) const {
    Dataset ds;
    ds.modalities = x;
    ds.labels.assign(static_cast<std::size_t>(x.at(0).rows()), 0);
    return encode_stacked(run_, ds);
  }
  std::vector<Matrix> decode(const Matrix& z) const { return decode_stacked(run_, z); }
  Matrix sample(const std::vector<bool>& observed_mask, std::optional<Matrix> observed, std::size_t chains, std::uint64_t seed,
                const std::string& guidance, std::optional<double> gamma, int steps) const {
    SamplerConfig sc = run_.cfg.sampling.sampler;
    sc.guidance = guidance_mode_from_string(guidance);
    if (gamma) sc.guidance_scale = *gamma;
    if (steps > 0) sc.steps = steps;
    const ModalityMask mask(observed_mask);
    return sample_latents(run_, sc, mask, observed ? &*observed : nullptr, chains, nullptr, seed);
  }
  py::dict split(const std::string& which) const {
    if (which == "train") return dataset_dict(run_.train);
    if (which == "val") return dataset_dict(run_.val);
    if (which == "test") return dataset_dict(run_.test);
    throw ConfigError("unknown split '" + which + "' (train, val, test)");
  }

 private:
  RunArtifacts run_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multimodal latent score-based generative modelling";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "marginal_params",
      [](double t, double beta_min, double beta_max) {
        const auto p = marginal_params(VPSDESchedule{beta_min, beta_max, 100}, t);
        return py::make_tuple(p.mean_coeff, p.std);
      },
      py::arg("t"), py::arg("beta_min") = 0.1, py::arg("beta_max") = 5.0, "(alpha(t), sigma(t)) of the linear-beta VP-SDE kernel");

  m.def(
      "gen_gaussian_joint",
      [](int modalities, int dim, double correlation, std::size_t n, std::uint64_t seed, double observation_noise) {
        return dataset_dict(gen_gaussian_joint(GaussianJointSpec{modalities, dim, correlation, observation_noise}, n, seed));
      },
      py::arg("modalities") = 2, py::arg("dim") = 1, py::arg("correlation") = 0.8, py::arg("n") = 1000, py::arg("seed") = 0,
      py::arg("observation_noise") = 0.0);

  m.def(
      "gen_toy_digits",
      [](int modalities, int side, int classes, std::size_t train, std::size_t val, std::size_t test, std::uint64_t seed) {
        ToyDigitSpec s{modalities, side, classes, train, val, test};
        const ToyDigitSplits sp = gen_toy_digits(s, seed);
        py::dict d;
        d["train"] = dataset_dict(sp.train);
        d["val"] = dataset_dict(sp.val);
        d["test"] = dataset_dict(sp.test);
        return d;
      },
      py::arg("modalities") = 5, py::arg("side") = 12, py::arg("classes") = 10, py::arg("train") = 5000, py::arg("val") = 500,
      py::arg("test") = 1000, py::arg("seed") = 0);

  m.def(
      "analytic_pc_sample",
      [](const Matrix& covariance, const std::vector<int>& dims, const std::vector<bool>& observed_mask, std::optional<Matrix> observed,
         std::size_t chains, std::uint64_t seed, int steps, int corrector_steps, double snr) {
        const VPSDESchedule sched;
        const AnalyticGaussianScore score(covariance, sched);
        SamplerConfig sc;
        sc.steps = steps;
        sc.corrector_steps = corrector_steps;
        sc.snr = snr;
        return pc_sample(score, sched, sc, LatentLayout(dims), ModalityMask(observed_mask), observed ? &*observed : nullptr, chains, {}, seed);
      },
      py::arg("covariance"), py::arg("dims"), py::arg("observed_mask"), py::arg("observed") = py::none(), py::arg("chains") = 1000,
      py::arg("seed") = 0, py::arg("steps") = 100, py::arg("corrector_steps") = 1, py::arg("snr") = 0.16,
      "Predictor-corrector sampling with the exact score of N(0, covariance)");

  m.def("frechet_distance", &frechet_distance, py::arg("features_a"), py::arg("features_b"));
  m.def("attribute_f1", &attribute_f1, py::arg("predicted"), py::arg("truth"));
  m.def(
      "latent_cosine_similarity",
      [](const std::vector<Matrix>& truth, const std::vector<Matrix>& recovered) {
        return latent_cosine_similarity(truth, recovered).average;
      },
      py::arg("truth"), py::arg("recovered"));

  m.def(
      "config_hash", [](const std::string& config_json) { return config_from(config_json, "").hash(); }, py::arg("config_json"));
  m.def(
      "stage_hash",
      [](const std::string& config_json, const std::string& stage) { return config_from(config_json, "").stage_hash(stage_from_string(stage)); },
      py::arg("config_json"), py::arg("stage"));

  m.def(
      "run_stage",
      [](const std::string& config_json, const std::string& stage, const std::string& out, bool force, bool stage_only) {
        const RunConfig cfg = config_from(config_json, out);
        StageOptions opts;
        opts.force = force;
        py::list done;
        for (const auto& o : run_pipeline(stage_from_string(stage), cfg, opts, stage_only))
          done.append(py::make_tuple(to_string(o.stage), o.skipped));
        return done;
      },
      py::arg("config_json"), py::arg("stage"), py::arg("out") = "", py::arg("force") = false, py::arg("stage_only") = true,
      "Runs a stage (and every later one unless stage_only); returns (stage, skipped) pairs");

  m.def(
      "verify_oracle",
      [](const std::string& config_json, const std::string& out) {
        const OracleReport r = verify_oracle(config_from(config_json, out), StageOptions{});
        py::list rows;
        for (const auto& row : r.rows) {
          py::dict d;
          d["z_o"] = row.z_o;
          d["mean"] = row.mean;
          d["expected_mean"] = row.expected_mean;
          d["var"] = row.var;
          d["expected_var"] = row.expected_var;
          d["pass"] = row.pass;
          rows.append(d);
        }
        py::dict out_d;
        out_d["passed"] = r.passed;
        out_d["rows"] = rows;
        out_d["failures"] = r.failures;
        return out_d;
      },
      py::arg("config_json"), py::arg("out") = "");

  m.def(
      "read_metrics",
      [](const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        py::dict d;
        const MetricReport report = MetricReport::from_csv(ss.str());
        for (const auto& e : report.entries()) d[py::str(e.metric)] = e.value;
        return d;
      },
      py::arg("path"));

  py::class_<Run>(m, "Run")
      .def(py::init<const std::string&, const std::string&>(), py::arg("config_json"), py::arg("out") = "")
      .def_property_readonly("num_modalities", &Run::num_modalities)
      .def("encode", &Run::encode, py::arg("modalities"), "Stacked mean latents of per-modality observations")
      .def("decode", &Run::decode, py::arg("latents"))
      .def("sample", &Run::sample, py::arg("observed_mask"), py::arg("observed") = py::none(), py::arg("chains") = 1,
           py::arg("seed") = 0, py::arg("guidance") = "none", py::arg("gamma") = py::none(), py::arg("steps") = 0,
           "Conditional or unconditional latent draws; observed columns are returned unchanged")
      .def("split", &Run::split, py::arg("which"));
}
