"""Multi-seed comparison of OPD, RL and EffOPD trained from one shared base.

Every seed trains the three methods, measures the geometry and intervention
contrasts between them, and contributes one row to a seed table. The table is
aggregated with the mean and the median, and each desk-scale claim is checked
against its threshold.
"""

from __future__ import annotations

import logging

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed

from .config import ExperimentConfig
from .errors import NumericalError
from .geometry import (
    ModuleKind,
    UpdateDelta,
    alignment_trajectory,
    mean_summaries,
    norm_match_scale,
    rank1_trajectory_evr,
)
from .intervene import paired_truncation_eval, window_sweep
from .pipeline.align import early_step
from .toylab.metrics import accuracy, evaluate
from .toylab.model import ToyPolicy
from .toylab.task import SyntheticTask
from .toylab.trainer import TrainRun, norm_to_reach, speedup_to_target, train

logger = logging.getLogger(__name__)

TOP_PERCENT = 10.0
BOTTOM_PERCENT = 50.0
EARLY_PROGRESS = 0.3
MIN_TOP_RECOVERY = 0.9
MIN_EARLY_GAIN = 0.6
MIN_SPEEDUP = 2.0

SEED_COLUMNS = [
    "seed",
    "opd_norm_at_tau",
    "rl_norm_at_tau",
    "opd_reached_tau",
    "rl_reached_tau",
    "opd_top_recovery",
    "rl_top_recovery",
    "tail_norm_ratio",
    "early_step",
    "early_gain",
    "early_kl_unscaled",
    "early_kl_rescaled",
    "effopd_speedup",
    "opd_top1pct",
    "rl_top1pct",
    "opd_early_alignment",
    "rl_early_alignment",
    "opd_rank1_evr",
    "rl_rank1_evr",
    "sweep_peak_center",
    "sweep_inverted_u",
]


def _recorded(run: TrainRun) -> tuple[list[int], list[UpdateDelta]]:
    steps = sorted(step for step in run.checkpoints if step > 0)
    return steps, [run.delta(0, step) for step in steps]


def norm_at_tau(metrics: pd.DataFrame, tau: float) -> tuple[float, bool]:
    """‖ΔW‖_F at the first step reaching ``tau`` and whether it was reached.

    A run that never reaches ``tau`` reports its final norm, a lower bound of
    the norm it would need.
    """
    norm = norm_to_reach(metrics, tau)
    if np.isnan(norm):
        return float(metrics["delta_norm"].iloc[-1]), False
    return norm, True


def early_alignment(run: TrainRun, k_max: int, progress: float = EARLY_PROGRESS) -> float:
    """Mean alignment with the final delta over checkpoints up to ``progress`` of training."""
    steps, deltas = _recorded(run)
    series = alignment_trajectory(deltas, k_max, steps)
    cutoff = progress * run.final_step
    early = [value for step, value in zip(series.steps, series.values) if step <= cutoff]
    return float(np.mean(early)) if early else float("nan")


def mean_rank1_evr(run: TrainRun) -> float:
    """Mean two-component EVR of the leading singular direction per matrix."""
    _, deltas = _recorded(run)
    values = []
    for name in deltas[-1].by_kind(ModuleKind.ATTENTION, ModuleKind.MLP).paths:
        usable = [delta for delta in deltas if np.any(delta[name])]
        if len(usable) < 3:
            continue
        try:
            values.append(rank1_trajectory_evr(usable, name))
        except NumericalError:
            values.append(1.0)
    return float(np.mean(values)) if values else float("nan")


def early_rescale(
        cfg: ExperimentConfig,
        run: TrainRun,
        base: ToyPolicy,
        teacher: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
) -> dict[str, float]:
    """Norm-match (β = 1) the early checkpoint of ``run`` against its final model.

    The early checkpoint is the first one at ``cfg.analysis.early_fraction`` of
    training. ``early_gain`` is the rescaled model's share of the final accuracy
    gain over the base.
    """
    step = early_step(
        sorted(run.checkpoints),
        cfg.analysis.early_fraction,
        cfg.train.checkpoint_stride,
        f"{run.mode} run (seed {run.seed})",
    )
    params = base.get_params()
    early = run.delta(0, step)
    moved = [name for name, value in early.items() if np.any(value)]
    rescaled = norm_match_scale(early.restrict(moved), run.delta().restrict(moved), 1.0)

    base_acc = accuracy(base, task, prompts)
    final_acc = accuracy(base.clone_with(run.checkpoints[run.final_step]), task, prompts)
    unscaled = evaluate(base.clone_with(early.apply_to(params)), task, prompts, teacher=teacher)
    scaled = evaluate(base.clone_with(rescaled.apply_to(params)), task, prompts, teacher=teacher)
    gain = final_acc - base_acc
    return {
        "early_step": step,
        "early_gain": (scaled.accuracy - base_acc) / gain if gain else float("nan"),
        "early_kl_unscaled": unscaled.kl_to_teacher,
        "early_kl_rescaled": scaled.kl_to_teacher,
    }


def mlp_sweep_shape(
        cfg: ExperimentConfig,
        base: ToyPolicy,
        delta: UpdateDelta,
        task: SyntheticTask,
        prompts: torch.Tensor,
        seed: int,
) -> dict:
    """Peak center of the MLP window sweep and whether the peak beats both end layers."""
    sweep = window_sweep(
        base,
        delta,
        ModuleKind.MLP,
        task,
        prompts,
        radius=cfg.analysis.window_radius,
        eval_reps=cfg.analysis.eval_reps,
        base_seed=seed,
    )
    peak = sweep.loc[sweep["mean_accuracy"].idxmax()]
    ends = sweep["mean_accuracy"].iloc[[0, -1]]
    return {
        "sweep_peak_center": int(peak["center"]),
        "sweep_inverted_u": bool((peak["mean_accuracy"] > ends).all()),
    }


def seed_row(
        cfg: ExperimentConfig,
        seed: int,
        runs: dict[str, TrainRun],
        base: ToyPolicy,
        teacher: ToyPolicy,
        task: SyntheticTask,
) -> dict:
    """One row of contrasts from the OPD, RL and EffOPD runs of a seed."""
    opd, rl, effopd = runs["opd"], runs["rl"], runs["effopd"]
    prompts = task.eval_prompts(cfg.train.eval_size)
    row: dict = {"seed": seed}

    for name, run in (("opd", opd), ("rl", rl)):
        norm, reached = norm_at_tau(run.metrics, cfg.analysis.tau)
        row[f"{name}_norm_at_tau"] = norm
        row[f"{name}_reached_tau"] = reached
        row[f"{name}_top1pct"] = mean_summaries(run.delta()).top1pct_norm_ratio
        row[f"{name}_early_alignment"] = early_alignment(run, cfg.analysis.k_max)
        row[f"{name}_rank1_evr"] = mean_rank1_evr(run)

    truncation = paired_truncation_eval(
        base, opd.delta(), rl.delta(), task, prompts, TOP_PERCENT, BOTTOM_PERCENT
    )
    row |= {
        "opd_top_recovery": truncation["opd_top_recovery"],
        "rl_top_recovery": truncation["rl_top_recovery"],
        "tail_norm_ratio": truncation["tail_norm_ratio"],
    }
    row |= early_rescale(cfg, opd, base, teacher, task, prompts)
    row["effopd_speedup"] = speedup_to_target(opd.metrics, effopd.metrics)["speedup"]
    row |= mlp_sweep_shape(cfg, base, opd.delta(), task, prompts, seed)
    return row


def reproduce_seed(cfg: ExperimentConfig, seed: int, base: ToyPolicy, teacher: ToyPolicy) -> dict:
    """Train OPD, RL and EffOPD for ``seed`` from ``base`` and measure their contrasts."""
    task = SyntheticTask(cfg.task)
    runs = {mode: train(cfg, seed, base, teacher, mode=mode) for mode in ("opd", "rl", "effopd")}
    row = seed_row(cfg, seed, runs, base, teacher, task)
    logger.info(
        "seed %d: |dW| at tau opd %.4f rl %.4f, EffOPD speedup %.2f",
        seed,
        row["opd_norm_at_tau"],
        row["rl_norm_at_tau"],
        row["effopd_speedup"],
    )
    return row


def summarize_seeds(frame: pd.DataFrame) -> dict:
    """Mean and median of every numeric column and the pass flag of each claim.

    A NaN in a median column (a run that never reached its target) fails the
    corresponding claim.
    """
    numeric = frame.drop(columns=["seed"]).astype(float)
    kl_drop = frame["early_kl_unscaled"] - frame["early_kl_rescaled"]
    checks = {
        "opd_smaller_norm_at_tau": bool(
            frame["opd_reached_tau"].all()
            and frame["opd_norm_at_tau"].mean() < frame["rl_norm_at_tau"].mean()
        ),
        "opd_top_recovery": bool(frame["opd_top_recovery"].median(skipna=False) >= MIN_TOP_RECOVERY),
        "rl_heavier_tail": bool(frame["tail_norm_ratio"].median(skipna=False) > 1.0),
        "early_rescale_gain": bool(frame["early_gain"].median(skipna=False) >= MIN_EARLY_GAIN),
        "early_rescale_lowers_kl": bool(kl_drop.median(skipna=False) > 0.0),
        "effopd_speedup": bool(frame["effopd_speedup"].median(skipna=False) >= MIN_SPEEDUP),
        "opd_concentrated_top1pct": bool((frame["opd_top1pct"] > frame["rl_top1pct"]).all()),
        "opd_aligns_early": bool(
            (frame["opd_early_alignment"] > frame["rl_early_alignment"]).all()
        ),
        "opd_higher_rank1_evr": bool((frame["opd_rank1_evr"] > frame["rl_rank1_evr"]).all()),
        "mlp_sweep_inverted_u": bool(frame["sweep_inverted_u"].all()),
    }
    return {
        "seeds": [int(seed) for seed in frame["seed"]],
        "mean": {key: float(value) for key, value in numeric.mean().items()},
        "median": {key: float(value) for key, value in numeric.median().items()},
        "checks": checks,
    }


def reproduce(
        cfg: ExperimentConfig,
        base: ToyPolicy,
        teacher: ToyPolicy,
        jobs: int = 1,
) -> tuple[pd.DataFrame, dict]:
    """Seed table over ``cfg.seeds`` (one worker slot per seed) and its summary."""
    rows = Parallel(n_jobs=jobs)(
        delayed(reproduce_seed)(cfg, seed, base, teacher) for seed in cfg.seeds
    )
    frame = pd.DataFrame(rows, columns=SEED_COLUMNS)
    return frame, summarize_seeds(frame)
