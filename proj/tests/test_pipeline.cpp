#include "mmscore/pipeline.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mmscore;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const std::string& dir) {
  nlohmann::json j = {
      {"seed", 3},
      {"out", dir},
      {"dataset", {{"kind", "gaussian"}, {"gaussian", {{"modalities", 2}, {"dim", 1}, {"correlation", 0.8}, {"train", 400}, {"val", 100}, {"test", 100}}}}},
      {"autoencoder", {{"kind", "vae"}, {"latent_dim", 1}, {"hidden", nlohmann::json::array()}, {"epochs", 2}, {"batch_size", 64}, {"learning_rate", 0.01}}},
      {"score", {{"hidden", {16, 16}}, {"epochs", 2}, {"batch_size", 64}, {"learning_rate", 0.001}, {"standardize", true}}},
      {"sampler", {{"steps", 10}, {"corrector_steps", 1}, {"seeds", 1}, {"conditional_rows", 50}, {"unconditional_samples", 100}}},
  };
  return RunConfig::from_json(j);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and bad values") {
  CHECK_THROWS_AS(RunConfig::from_json({{"seed", 1}, {"bogus", 2}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"score", {{"batch_size", 0}}}}).validate(), ConfigError);
  const RunConfig c = tiny_config("x");
  CHECK(RunConfig::from_json(c.to_json()).hash() == c.hash());
}

TEST_CASE("stage hashes follow lineage") {
  RunConfig a = tiny_config("x");
  RunConfig b = a;
  b.sampling.sampler.corrector_steps = 3;
  CHECK(a.stage_hash(Stage::train_score) == b.stage_hash(Stage::train_score));
  CHECK(a.stage_hash(Stage::sample) != b.stage_hash(Stage::sample));
  CHECK(a.stage_hash(Stage::eval) != b.stage_hash(Stage::eval));
  b = a;
  b.autoencoder.epochs = 5;
  CHECK(a.stage_hash(Stage::gen_data) == b.stage_hash(Stage::gen_data));
  CHECK(a.stage_hash(Stage::train_score) != b.stage_hash(Stage::train_score));
  b = a;
  b.out = "elsewhere";
  CHECK(a.hash() == b.hash());
}

TEST_CASE("stages refuse missing upstream, skip when current, refuse foreign artifacts") {
  const fs::path dir = fs::temp_directory_path() / "mmscore_pipeline_test";
  fs::remove_all(dir);
  RunConfig cfg = tiny_config(dir.string());
  StageOptions opts;
  CHECK_THROWS_AS(run_stage(Stage::train_ae, cfg, opts), StateError);

  const auto all = run_pipeline(Stage::gen_data, cfg, opts, false);
  CHECK(all.size() == all_stages().size());
  for (const char* f : {"data/train.sbmd", "ae.sbmc", "score.sbmc", "samples/runs.csv", "metrics.csv"})
    CHECK(fs::exists(dir / f));

  CHECK(run_stage(Stage::train_score, cfg, opts).skipped);

  RunConfig other = cfg;
  other.score.epochs = 3;
  CHECK_THROWS_AS(run_stage(Stage::train_score, other, opts), ConfigError);
  CHECK(run_stage(Stage::gen_data, other, opts).skipped);
  fs::remove_all(dir);
}

TEST_CASE("reruns with the same seed are bit-identical") {
  const fs::path a = fs::temp_directory_path() / "mmscore_det_a";
  const fs::path b = fs::temp_directory_path() / "mmscore_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  StageOptions opts;
  run_pipeline(Stage::gen_data, tiny_config(a.string()), opts, false);
  run_pipeline(Stage::gen_data, tiny_config(b.string()), opts, false);
  for (const char* f : {"ae.sbmc", "score.sbmc", "samples/k1_s0.latent.sbmc", "metrics.csv"}) CHECK(slurp(a / f) == slurp(b / f));
  fs::remove_all(a);
  fs::remove_all(b);
}
