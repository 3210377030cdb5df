"""Multimodal latent score-based generative modelling (C++ core)."""

import json as _json
import os as _os

from ._core import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    Run,
    ShapeError,
    StateError,
    analytic_pc_sample,
    attribute_f1,
    frechet_distance,
    gen_gaussian_joint,
    gen_toy_digits,
    latent_cosine_similarity,
    marginal_params,
    read_metrics,
)
from . import _core


def _config_text(config):
    if isinstance(config, dict):
        return _json.dumps(config)
    if isinstance(config, (str, _os.PathLike)) and _os.path.exists(config):
        with open(config) as f:
            return f.read()
    return str(config)


def config_hash(config):
    return _core.config_hash(_config_text(config))


def stage_hash(config, stage):
    return _core.stage_hash(_config_text(config), stage)


def run_stage(config, stage, out="", force=False, stage_only=True):
    """Run one pipeline stage (or it and all later ones). `config` is a dict, JSON text or path."""
    return _core.run_stage(_config_text(config), stage, out, force, stage_only)


def verify_oracle(config, out=""):
    return _core.verify_oracle(_config_text(config), out)


def open_run(config, out=""):
    return Run(_config_text(config), out)
