// Command-line driver for the staged pipeline.

#include "mmscore/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool force = false;
  bool stage_only = false;
};

struct GuidanceFlags {
  std::optional<std::size_t> pairs;
  std::optional<int> epochs;
  std::optional<std::string> perturb;
  bool shared = false;
  bool per_pair = false;
};

struct SampleFlags {
  std::optional<int> steps;
  std::optional<double> gamma;
  std::optional<std::string> guidance;
  std::optional<std::size_t> chains;
  std::vector<int> observed;
  std::optional<int> seeds;
};

void add_common(CLI::App* cmd, Common& c, bool with_stage_only) {
  cmd->add_option("--config", c.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the global seed");
  cmd->add_option("--out", c.out, "override the output directory");
  cmd->add_flag("--force", c.force, "rerun stages even when artifacts are up to date");
  if (with_stage_only) cmd->add_flag("--stage-only", c.stage_only, "run only this stage, not the stages after it");
}

mmscore::RunConfig load(const Common& c) {
  mmscore::RunConfig cfg = mmscore::RunConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out = *c.out;
  return cfg;
}

void apply(const GuidanceFlags& g, mmscore::RunConfig& cfg) {
  if (g.pairs) cfg.guidance.pairs_per_epoch = *g.pairs;
  if (g.epochs) cfg.guidance.epochs = *g.epochs;
  if (g.perturb) {
    if (*g.perturb != "on" && *g.perturb != "off") throw mmscore::ConfigError("--perturb takes on or off");
    cfg.guidance.perturb = *g.perturb == "on";
  }
  if (g.shared && g.per_pair) throw mmscore::ConfigError("--shared and --per-pair are exclusive");
  if (g.shared) cfg.guidance.shared = true;
  if (g.per_pair) cfg.guidance.shared = false;
}

void apply(const SampleFlags& s, mmscore::RunConfig& cfg) {
  if (s.steps) cfg.sampling.sampler.steps = *s.steps;
  if (s.gamma) cfg.sampling.sampler.guidance_scale = *s.gamma;
  if (s.guidance) cfg.guidance.mode = mmscore::guidance_mode_from_string(*s.guidance);
  if (s.chains) cfg.sampling.unconditional_samples = *s.chains;
  if (!s.observed.empty()) cfg.sampling.observed_counts = s.observed;
  if (s.seeds) cfg.sampling.seeds = *s.seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal score-based latent generative models"};
  app.require_subcommand(1);

  Common common;
  GuidanceFlags gflags;
  SampleFlags sflags;
  std::vector<std::string> metric_filter;
  std::map<std::string, CLI::App*> stage_cmds;

  const std::vector<std::pair<std::string, std::string>> stages{
      {"gen-data", "generate the dataset splits"},
      {"train-ae", "train one autoencoder per modality"},
      {"train-score", "train the latent score model"},
      {"train-guidance", "train the energy network or the contrastive encoders"},
      {"sample", "draw unconditional and conditional samples"},
      {"eval", "compute metrics over the samples"},
      {"report", "write plot-ready tables and the summary CSV"}};
  for (const auto& [name, help] : stages) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, common, true);
    stage_cmds[name] = cmd;
  }
  CLI::App* g = stage_cmds["train-guidance"];
  g->add_option("--pairs", gflags.pairs, "NCE pairs per epoch (0 = one per training row)");
  g->add_option("--epochs", gflags.epochs, "training epochs");
  g->add_option("--perturb", gflags.perturb, "perturb NCE pairs with the diffusion kernel (on/off)");
  g->add_flag("--shared", gflags.shared, "one energy network for all modality pairs");
  g->add_flag("--per-pair", gflags.per_pair, "one energy network per ordered modality pair");
  CLI::App* s = stage_cmds["sample"];
  s->add_option("--steps", sflags.steps, "reverse-time steps");
  s->add_option("--gamma", sflags.gamma, "energy guidance scale");
  s->add_option("--guidance", sflags.guidance, "guidance mode: none, energy, contrastive");
  s->add_option("--chains", sflags.chains, "unconditional sample count");
  s->add_option("--observed", sflags.observed, "observed-modality counts for conditional runs");
  s->add_option("--sampling-seeds", sflags.seeds, "number of sampling seeds");
  stage_cmds["eval"]->add_option("--metrics", metric_filter, "print metrics whose names start with these prefixes");

  CLI::App* oracle = app.add_subcommand("verify-oracle", "train on the Gaussian oracle and check conditional moments");
  add_common(oracle, common, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (oracle->parsed()) {
      mmscore::RunConfig cfg = load(common);
      mmscore::StageOptions opts{common.force, &std::cerr};
      const mmscore::OracleReport rep = mmscore::verify_oracle(cfg, opts);
      mmscore::print_oracle(rep, std::cout);
      return rep.passed ? 0 : 2;
    }
    for (const auto& [name, cmd] : stage_cmds) {
      if (!cmd->parsed()) continue;
      mmscore::RunConfig cfg = load(common);
      apply(gflags, cfg);
      apply(sflags, cfg);
      cfg.validate();
      mmscore::StageOptions opts{common.force, &std::cerr};
      mmscore::run_pipeline(mmscore::stage_from_string(name), cfg, opts, common.stage_only);
      if (!metric_filter.empty()) {
        std::ifstream in(std::filesystem::path(cfg.out) / "metrics.csv");
        std::stringstream ss;
        ss << in.rdbuf();
        const auto report = mmscore::MetricReport::from_csv(ss.str());
        for (const auto& e : report.entries())
          for (const auto& prefix : metric_filter)
            if (e.metric.rfind(prefix, 0) == 0) {
              std::cout << e.metric << "," << mmscore::format_double(e.value) << "\n";
              break;
            }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
