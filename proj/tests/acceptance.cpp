// Acceptance suite: one PASS/FAIL line per criterion.
//
//   mmscore_acceptance [--work DIR] [--reuse] [--only N[,N...]]
//
// Runs train from scratch in DIR (wiped first unless --reuse). Exit status is the number of failures.

#include "gradcheck.hpp"

#include "mmscore/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#ifndef MMSCORE_CONFIG_DIR
#define MMSCORE_CONFIG_DIR "configs"
#endif

using namespace mmscore;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

fs::path g_work;
std::ostringstream g_log;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

RunConfig load_config(const std::string& name, const fs::path& out) {
  RunConfig cfg = RunConfig::load((fs::path(MMSCORE_CONFIG_DIR) / name).string());
  cfg.out = out.string();
  return cfg;
}

StageOptions quiet() {
  StageOptions o;
  o.log = &g_log;
  return o;
}

double train_through_score(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  for (Stage s : {Stage::gen_data, Stage::train_ae, Stage::train_score}) run_stage(s, cfg, quiet());
  return seconds_since(t0);
}

Verdict oracle_verdict(const RunConfig& cfg, double limit_s) {
  const double train_s = train_through_score(cfg);
  const OracleReport rep = verify_oracle(cfg, quiet());
  double dm = 0.0, dv = 0.0;
  for (const auto& r : rep.rows) {
    dm = std::max(dm, std::abs(r.mean - r.expected_mean));
    dv = std::max(dv, std::abs(r.var - r.expected_var));
  }
  Verdict v;
  v.pass = rep.passed && train_s <= limit_s;
  v.detail = "max |mean err| " + fmt(dm) + " (tol " + fmt(cfg.oracle.mean_tolerance) + "), max |var err| " + fmt(dv) + " (tol " +
             fmt(cfg.oracle.var_tolerance) + "), slope " + fmt(rep.expected_slope) + ", training " + fmt(train_s, 3) + " s";
  return v;
}

// 1. Gaussian conditional oracle.
Verdict c1_oracle() { return oracle_verdict(load_config("gaussian_oracle.json", g_work / "oracle"), 600.0); }

// 2. Trained score vs analytic score of the diffused Gaussian on the |z| <= 2 disc.
Verdict c2_analytic_score() {
  const RunConfig cfg = load_config("gaussian_oracle.json", g_work / "unused");
  const GaussianJointSpec g = cfg.dataset.gaussian;
  const Dataset d = gen_gaussian_joint(g, cfg.dataset.gaussian_train, mix_seed(cfg.seed, 20));
  const Matrix z = stack_latents(d.modalities);
  ScoreNetSpec spec;
  spec.latent_dim = static_cast<int>(z.cols());
  spec.time_embed_dim = cfg.score.time_embed_dim;
  spec.hidden = cfg.score.hidden;
  spec.activation = cfg.score.activation;
  ScoreNetwork net(spec, cfg.score.schedule, mix_seed(cfg.seed, 21));
  DSMConfig dc;
  dc.batch_size = cfg.score.batch_size;
  dc.epochs = cfg.score.epochs;
  dc.learning_rate = cfg.score.learning_rate;
  dc.final_lr_fraction = cfg.score.final_lr_fraction;
  dc.time_sampling = cfg.score.time_sampling;
  dc.control_variate = cfg.score.control_variate;
  dc.seed = mix_seed(cfg.seed, 22);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<int> dims(static_cast<std::size_t>(g.num_modalities), g.dim);
  train_score(net, z, LatentLayout(dims), dc);
  const double secs = seconds_since(t0);

  std::vector<RowVector> pts;
  for (int i = -8; i <= 8; ++i)
    for (int j = -8; j <= 8; ++j) {
      RowVector p(2);
      p << 0.25 * i, 0.25 * j;
      if (p.norm() <= 2.0 + 1e-12) pts.push_back(p);
    }
  Matrix grid(static_cast<Eigen::Index>(pts.size()), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) grid.row(static_cast<Eigen::Index>(i)) = pts[i];
  const AnalyticGaussianScore exact(g.covariance(), cfg.score.schedule);
  Verdict v;
  v.pass = secs <= 600.0;
  std::string per_t;
  for (double t : {0.1, 0.5, 0.9}) {
    const Matrix e = net.score(grid, t, nullptr) - exact.score(grid, t, nullptr);
    const double mse = e.squaredNorm() / static_cast<double>(e.size());
    v.pass = v.pass && mse < 0.05;
    per_t += "t=" + fmt(t, 2) + " " + fmt(mse) + ", ";
  }
  v.detail = "MSE " + per_t + std::to_string(pts.size()) + " grid points, training " + fmt(secs, 3) + " s";
  return v;
}

// 3. Perturbation kernel vs closed form.
Verdict c3_kernel() {
  const VPSDESchedule s;
  const std::size_t n = 100000;
  Verdict v;
  v.pass = true;
  const Matrix z0 = Matrix::Ones(static_cast<Eigen::Index>(n), 1);
  for (double t : {0.25, 0.5, 1.0}) {
    const Perturbation p = perturb(s, z0, t, mix_seed(3, static_cast<std::uint64_t>(t * 100)));
    const double mean = p.z_t.mean();
    const double sd = std::sqrt((p.z_t.array() - mean).square().sum() / static_cast<double>(n - 1));
    const MarginalParams m = marginal_params(s, t);
    const double se_mean = m.std / std::sqrt(static_cast<double>(n));
    const double se_sd = m.std / std::sqrt(2.0 * static_cast<double>(n - 1));
    const double zm = std::abs(mean - m.mean_coeff) / se_mean, zs = std::abs(sd - m.std) / se_sd;
    v.pass = v.pass && zm < 3.0 && zs < 3.0;
    v.detail += "t=" + fmt(t, 2) + " alpha " + fmt(mean, 5) + "/" + fmt(m.mean_coeff, 5) + " (" + fmt(zm, 2) + " SE), sigma " +
                fmt(sd, 5) + "/" + fmt(m.std, 5) + " (" + fmt(zs, 2) + " SE); ";
  }
  const MarginalParams one = marginal_params(s, 1.0);
  v.pass = v.pass && std::abs(one.mean_coeff - 0.2794) < 5e-5 && std::abs(one.std - 0.9602) < 5e-5;
  return v;
}

// 4. Finite-difference gradient suite.
Verdict c4_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  struct Row {
    const char* name;
    double err;
    double tol;
  };
  const std::vector<Row> rows{
      {"nn-core", gradcheck::dense_net(50, 41), 1e-4},   {"encoder", gradcheck::autoencoder(50, 42, 0), 1e-3},
      {"decoder", gradcheck::autoencoder(50, 42, 1), 1e-3}, {"score", gradcheck::score(50, 43), 1e-3},
      {"energy", gradcheck::energy(50, 44), 1e-3},        {"contrastive", gradcheck::contrastive(50, 45), 1e-3},
      {"classifier", gradcheck::classifier(50, 46), 1e-3},
  };
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = secs <= 120.0;
  for (const auto& r : rows) {
    v.pass = v.pass && r.err < r.tol;
    v.detail += std::string(r.name) + " " + fmt(r.err, 2) + ", ";
  }
  v.detail += "50 cases each, " + fmt(secs, 3) + " s";
  return v;
}

struct Toy {
  RunConfig cfg;
  double train_s = 0.0;
  double total_s = 0.0;
  MetricReport metrics;
  MetricReport guidance;
};

MetricReport read_report(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return MetricReport::from_csv(ss.str());
}

Toy& toy() {
  static std::optional<Toy> cached;
  if (cached) return *cached;
  Toy t;
  t.cfg = load_config("toy_digits.json", g_work / "toy");
  const auto t0 = std::chrono::steady_clock::now();
  for (Stage s : {Stage::gen_data, Stage::train_ae, Stage::train_guidance, Stage::train_score}) run_stage(s, t.cfg, quiet());
  t.train_s = seconds_since(t0);
  for (Stage s : {Stage::sample, Stage::eval, Stage::report}) run_stage(s, t.cfg, quiet());
  t.total_s = seconds_since(t0);
  t.metrics = read_report(g_work / "toy" / "metrics.csv");
  t.guidance = read_report(g_work / "toy" / "guidance_metrics.csv");
  cached = std::move(t);
  return *cached;
}

struct Stat {
  double mean = 0.0;
  double se = 0.0;
};

Stat over_seeds(const MetricReport& m, const std::string& prefix, const std::string& suffix, int seeds) {
  std::vector<double> xs;
  for (int s = 0; s < seeds; ++s) xs.push_back(m.value(prefix + "_s" + std::to_string(s) + suffix));
  Stat st;
  for (double x : xs) st.mean += x;
  st.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - st.mean) * (x - st.mean);
  st.se = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size())) : 0.0;
  return st;
}

// 5. Toy-digit coherence trends.
Verdict c5_toy_trends() {
  Toy& t = toy();
  const MetricReport& m = t.metrics;
  const int seeds = t.cfg.sampling.seeds;
  const int M = static_cast<int>(t.cfg.dataset.num_modalities());
  const int C = t.cfg.dataset.toy.num_classes;
  Verdict v;
  v.pass = true;

  bool a = true;
  std::string curve;
  Stat prev;
  for (int k = 1; k < M; ++k) {
    const Stat s = over_seeds(m, "coherence_last/k" + std::to_string(k), "", seeds);
    if (k > 1 && s.mean < prev.mean - 2.0 * std::sqrt(s.se * s.se + prev.se * prev.se)) a = false;
    curve += fmt(s.mean, 3) + "+-" + fmt(s.se, 2) + (k + 1 < M ? " " : "");
    prev = s;
  }
  const Stat plain = over_seeds(m, "coherence_last/k1", "", seeds);
  const Stat guided = over_seeds(m, "coherence_last/k1_energy", "", seeds);
  const bool b = guided.mean > plain.mean;
  const int long_steps = t.cfg.sampling.compare_steps.empty() ? 0 : t.cfg.sampling.compare_steps.front();
  const Stat longer = over_seeds(m, "coherence_last/k1_steps" + std::to_string(long_steps), "", seeds);
  const bool c = long_steps > 0 && longer.mean >= plain.mean;
  const double baseline = std::pow(1.0 / C, M - 1);
  const double agree = m.value("uncond_all_agree");
  const bool d = agree > 100.0 * baseline;
  const double lo = m.value("mode_share_min"), hi = m.value("mode_share_max");
  const bool e = lo >= 0.05 && hi <= 0.15;
  v.pass = a && b && c && d && e;
  v.detail = std::string("(a)") + (a ? "ok" : "FAIL") + " k=1.." + std::to_string(M - 1) + ": " + curve + "; (b)" + (b ? "ok" : "FAIL") +
             " energy " + fmt(guided.mean, 3) + " vs " + fmt(plain.mean, 3) + "; (c)" + (c ? "ok" : "FAIL") + " " +
             std::to_string(long_steps) + " steps " + fmt(longer.mean, 3) + " vs " + fmt(plain.mean, 3) + "; (d)" + (d ? "ok" : "FAIL") +
             " all-agree " + fmt(agree, 3) + " vs 100x" + fmt(baseline, 2) + "; (e)" + (e ? "ok" : "FAIL") + " class shares [" +
             fmt(lo, 3) + ", " + fmt(hi, 3) + "]; training " + fmt(t.train_s / 60.0, 3) + " min, total " + fmt(t.total_s / 60.0, 3) + " min";
  return v;
}

// 6. Energy margins and the decoupled null control.
Verdict c6_ebm() {
  Toy& t = toy();
  Verdict v;
  v.pass = true;
  std::string pos, ctl;
  for (const char* lvl : {"0.01", "0.3", "0.7"}) {
    const double m = t.guidance.value(std::string("energy_margin/t") + lvl);
    const double c = t.guidance.value(std::string("energy_margin_control/t") + lvl);
    v.pass = v.pass && m > 0.5 && std::abs(c) < 0.1;
    pos += std::string(lvl) + ":" + fmt(m, 3) + " ";
    ctl += std::string(lvl) + ":" + fmt(c, 3) + " ";
  }
  v.detail = "margin " + pos + "| control " + ctl;
  return v;
}

// 7. Metric kernels.
Verdict c7_metrics() {
  Rng rng = make_rng(7);
  const Matrix a = normal_matrix(10000, 1, rng);
  const Matrix b = (normal_matrix(10000, 1, rng).array() + 1.0).matrix();
  const Matrix f = normal_matrix(2000, 8, rng);
  const double self = frechet_distance(f, f);
  const double shift = frechet_distance(a, b);
  Matrix p(1, 3), q(1, 3);
  p << 1, 1, 0;
  q << 1, 0, 0;
  const double f1 = attribute_f1(p, q);
  Matrix u(3, 3);
  u << 1, 2, 3, -0.5, 0.25, 4, 7, -1, 0.5;
  const double cp = latent_cosine_similarity({u}, {u * 3.0}).average;
  const double cn = latent_cosine_similarity({u}, {-0.5 * u}).average;
  Verdict v;
  v.pass = self < 1e-6 && std::abs(shift - 1.0) <= 0.05 && f1 == 2.0 / 3.0 && cp == 1.0 && cn == -1.0;
  v.detail = "FD self " + fmt(self, 3) + ", FD N(0,1) vs N(1,1) " + fmt(shift) + ", F1 " + fmt(f1, 17) + ", cosine " + fmt(cp, 17) + " / " +
             fmt(cn, 17);
  return v;
}

// 8. Masked score training still passes the oracle with doubled tolerances.
Verdict c8_masked() {
  const RunConfig cfg = load_config("gaussian_masked.json", g_work / "masked");
  Verdict v = oracle_verdict(cfg, 600.0);
  v.detail = "missing " + fmt(cfg.score.missing_fraction, 2) + "; " + v.detail;
  return v;
}

// 9. Decoder fine-tuning: coherence holds, Frechet distance grows.
Verdict c9_finetune() {
  Toy& t = toy();
  const MetricReport& m = t.metrics;
  const int M = static_cast<int>(t.cfg.dataset.num_modalities());
  Verdict v;
  double d_coh = 0.0;
  int runs = 0;
  bool fd_up = true;
  std::string per_seed;
  for (int s = 0; s < t.cfg.sampling.seeds; ++s) {
    double d_fd = 0.0;
    for (int k = 1; k < M; ++k) {
      const std::string name = "k" + std::to_string(k) + "_s" + std::to_string(s);
      d_coh += m.value("finetune/coherence/" + name) - m.value("coherence/" + name);
      d_fd += m.value("finetune/frechet_cond/" + name) - m.value("frechet_cond/" + name);
      ++runs;
    }
    d_fd /= static_cast<double>(M - 1);
    fd_up = fd_up && d_fd > 0.0;
    per_seed += fmt(d_fd, 3) + (s + 1 < t.cfg.sampling.seeds ? " " : "");
  }
  d_coh /= static_cast<double>(runs);
  v.pass = d_coh >= 0.0 && fd_up;
  v.detail = "mean coherence change " + fmt(d_coh, 3) + ", Frechet change per seed " + per_seed;
  return v;
}

// 10. Bit-identical reruns.
Verdict c10_determinism() {
  const RunConfig a = load_config("gaussian_oracle.json", g_work / "oracle");
  const RunConfig b = load_config("gaussian_oracle.json", g_work / "oracle_rerun");
  verify_oracle(a, quiet());
  verify_oracle(b, quiet());
  for (Stage s : {Stage::sample, Stage::eval, Stage::report}) {
    run_stage(s, a, quiet());
    run_stage(s, b, quiet());
  }
  std::size_t compared = 0;
  std::vector<std::string> diffs;
  for (const auto& e : fs::recursive_directory_iterator(a.out)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.out);
    if (rel == "config.json") continue;
    const fs::path other = fs::path(b.out) / rel;
    auto slurp = [](const fs::path& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(in), {});
    };
    ++compared;
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) diffs.push_back(rel.string());
  }
  Verdict v;
  v.pass = compared > 0 && diffs.empty();
  v.detail = std::to_string(compared) + " files compared (checkpoints, datasets, samples, reports)";
  for (const auto& d : diffs) v.detail += ", differs: " + d;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmscore acceptance suite"};
  std::string work = "acceptance_runs";
  bool reuse = false;
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory for runs");
  app.add_flag("--reuse", reuse, "keep artifacts from a previous invocation");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  g_work = fs::absolute(work);
  if (!reuse) fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gaussian conditional oracle", c1_oracle},
      {"analytic score recovery", c2_analytic_score},
      {"perturbation kernel closed form", c3_kernel},
      {"finite-difference gradient suite", c4_gradients},
      {"toy-digit coherence trends", c5_toy_trends},
      {"energy separation and null control", c6_ebm},
      {"metric kernels", c7_metrics},
      {"masked score training oracle", c8_masked},
      {"decoder fine-tuning trend", c9_finetune},
      {"determinism", c10_determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << v.detail << " ("
              << fmt(seconds_since(t0), 3) << " s)" << std::endl;
  }
  return failures;
}
