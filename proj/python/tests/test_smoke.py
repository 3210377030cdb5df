import json
import math
import os

import numpy as np
import pytest

import mmscore

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "configs")


def tiny_config(out):
    with open(os.path.join(CONFIG_DIR, "gaussian_oracle.json")) as f:
        cfg = json.load(f)
    cfg["out"] = str(out)
    cfg["dataset"]["gaussian"].update(train=400, val=100, test=100)
    cfg["autoencoder"]["epochs"] = 2
    cfg["score"].update(epochs=2, hidden=[32, 32])
    cfg["sampler"].update(steps=20, corrector_steps=1, conditional_rows=100, unconditional_samples=200)
    return cfg


def test_marginal_params():
    a, s = mmscore.marginal_params(1.0)
    assert a == pytest.approx(math.exp(-0.5 * (0.1 + 2.45)), rel=1e-12)
    assert a * a + s * s == pytest.approx(1.0, abs=1e-12)
    assert mmscore.marginal_params(0.0) == (1.0, 0.0)


def test_gaussian_joint_correlation():
    d = mmscore.gen_gaussian_joint(correlation=0.8, n=20000, seed=3)
    x0, x1 = d["modalities"]
    assert x0.shape == (20000, 1)
    assert np.corrcoef(x0[:, 0], x1[:, 0])[0, 1] == pytest.approx(0.8, abs=0.02)


def test_toy_digits_shapes():
    s = mmscore.gen_toy_digits(modalities=3, side=8, classes=4, train=40, val=8, test=8, seed=1)
    assert len(s["train"]["modalities"]) == 3
    assert s["train"]["modalities"][0].shape == (40, 64)
    assert sorted(set(s["train"]["labels"])) == [0, 1, 2, 3]


def test_analytic_sampler_matches_conditional():
    # Replacement conditioning needs several corrector sweeps per step to reach the conditional.
    rho = 0.8
    cov = np.array([[1.0, rho], [rho, 1.0]])
    observed = np.zeros((4000, 2))
    observed[:, 0] = 1.0
    z = mmscore.analytic_pc_sample(cov, [1, 1], [True, False], observed, chains=4000, seed=5, corrector_steps=5)
    assert np.all(z[:, 0] == 1.0)
    assert z[:, 1].mean() == pytest.approx(rho, abs=0.05)
    assert z[:, 1].var() == pytest.approx(1 - rho * rho, abs=0.05)


def test_metric_kernels():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 3))
    assert mmscore.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)
    assert mmscore.frechet_distance(a, a + 1.0) == pytest.approx(3.0, abs=1e-6)
    truth = np.array([[1.0, 0.0, 1.0]])
    assert mmscore.attribute_f1(np.array([[1.0, 1.0, 0.0]]), truth) == pytest.approx(0.5)
    assert mmscore.latent_cosine_similarity([a], [-a]) == pytest.approx(-1.0)


def test_bad_config_raises():
    with pytest.raises(mmscore.ConfigError):
        mmscore.config_hash({"no_such_key": 1})


def test_pipeline_stages_and_lineage(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    with pytest.raises(mmscore.StateError):
        mmscore.run_stage(cfg, "train-ae")
    assert mmscore.run_stage(cfg, "gen-data") == [("gen-data", False)]
    assert mmscore.run_stage(cfg, "gen-data") == [("gen-data", True)]
    done = mmscore.run_stage(cfg, "train-ae", stage_only=False)
    assert [s for s, _ in done] == ["train-ae", "train-guidance", "train-score", "sample", "eval", "report"]
    metrics = mmscore.read_metrics(str(tmp_path / "run" / "metrics.csv"))
    assert metrics

    changed = dict(cfg, score=dict(cfg["score"], epochs=3))
    assert mmscore.stage_hash(changed, "train-ae") == mmscore.stage_hash(cfg, "train-ae")
    assert mmscore.stage_hash(changed, "train-score") != mmscore.stage_hash(cfg, "train-score")
    with pytest.raises(mmscore.ConfigError, match="refusing"):
        mmscore.run_stage(changed, "train-score")
    assert mmscore.run_stage(changed, "train-score", force=True) == [("train-score", False)]
    assert mmscore.run_stage(cfg, "train-score", force=True) == [("train-score", False)]

    run = mmscore.open_run(cfg)
    test = run.split("test")
    z = run.encode(test["modalities"])
    assert z.shape[0] == 100
    draws = run.sample([True, False], z, chains=100, seed=2)
    np.testing.assert_array_equal(draws[:, : z.shape[1] // 2], z[:, : z.shape[1] // 2])
    x = run.decode(draws)
    assert [m.shape for m in x] == [m.shape for m in test["modalities"]]
