from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from opdgeo.config import (
    AnalysisConfig,
    EffOpdConfig,
    ExperimentConfig,
    ModelConfig,
    QuadsimConfig,
    SupervisedConfig,
    TaskConfig,
    TrainConfig,
)
from opdgeo.toylab.task import SyntheticTask
from opdgeo.toylab.trainer import make_base, make_teacher

# 50 prompts (5 x 5 operand pairs, two operators), one answer token, three layers.
# Base and teacher skip supervised training; the teacher is a different random init.
TINY = ExperimentConfig(
    task=TaskConfig(modulus=5, n_operands=2, operators=("+", "*"), vocab_size=8),
    model=ModelConfig(hidden_dim=8, mlp_dim=16, n_layers=3),
    train=TrainConfig(
        steps=4, lr=0.1, batch_size=16, checkpoint_stride=2, eval_size=32, log_every=0
    ),
    supervised=SupervisedConfig(
        base_target_accuracy=0.0,
        base_max_steps=0,
        teacher_target_accuracy=0.0,
        teacher_max_steps=0,
        heldout_size=32,
    ),
    effopd=EffOpdConfig(validation_size=8),
    quadsim=QuadsimConfig(
        dim=8,
        instances=3,
        steps=(1, 10, 100),
        lockin_instances=5,
        lockin_k=2,
        mc_samples=400,
        mc_shards=4,
    ),
    analysis=AnalysisConfig(
        selections=("metrics", "align"),
        k_max=2,
        eval_reps=1,
        truncate_percents=(50.0, 100.0),
        alphas=(0.0, 1.0),
        betas=(0.0, 1.0),
        early_fraction=0.5,
    ),
)


@pytest.fixture(scope="session")
def tiny_cfg() -> ExperimentConfig:
    return TINY


@pytest.fixture(scope="session")
def task(tiny_cfg) -> SyntheticTask:
    return SyntheticTask(tiny_cfg.task)


@pytest.fixture(scope="session")
def base(task, tiny_cfg):
    return make_base(task, tiny_cfg.model, tiny_cfg.supervised)


@pytest.fixture(scope="session")
def teacher(task, tiny_cfg):
    return make_teacher(task, tiny_cfg.model, replace(tiny_cfg.supervised, seed=1))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def config_file(tmp_path):
    """Factory dumping a config as JSON, with top-level keys overridden."""

    def write(cfg: ExperimentConfig = TINY, name: str = "config.json", **overrides) -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(cfg.to_dict() | overrides, indent=2), encoding="utf-8")
        return path

    return write
