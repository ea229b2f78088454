"""Localizing functional updates by injecting parts of a delta into the base.

A plan names which parameters receive the delta: a window of layers for the
MLP or attention-like matrices, a singular-value range of every matrix, an
explicit module list, or the complement of the embeddings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed

from .config import DEFAULT_EVAL_REPS, DEFAULT_WINDOW_RADIUS
from .geometry import ModuleKind, UpdateDelta, check_same_architecture, parse_module_path
from .linalg import numerical_rank, svd
from .toylab.metrics import accuracy
from .toylab.model import ToyPolicy
from .toylab.task import SyntheticTask

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["center", "mean_accuracy", "window_lo", "window_hi", "window_update_norm"]


class TargetKind(str, Enum):
    """What a plan injects."""

    EMBEDDING = "embedding"
    MLP_WINDOW = "mlp-window"
    ATTENTION_WINDOW = "attention-window"
    RANK_RANGE = "rank-range-global"
    MODULES = "modules"


@dataclass(frozen=True)
class WindowSpec:
    """Layers {max(1, l − radius) .. min(L, l + radius)} around a 1-based center."""

    center: int
    radius: int
    n_layers: int

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError(f"window radius must be >= 0, got {self.radius}")
        if not 1 <= self.center <= self.n_layers:
            raise ValueError(f"window center {self.center} outside layers 1..{self.n_layers}")

    @property
    def lo(self) -> int:
        return max(1, self.center - self.radius)

    @property
    def hi(self) -> int:
        return min(self.n_layers, self.center + self.radius)

    @property
    def layers(self) -> range:
        return range(self.lo, self.hi + 1)


@dataclass(frozen=True)
class RankRange:
    """Top or bottom k% of the singular components of every matrix."""

    mode: str
    k_percent: float
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("top", "bottom"):
            raise ValueError(f"rank range mode must be 'top' or 'bottom', got '{self.mode}'")
        if not 0.0 < self.k_percent <= 100.0:
            raise ValueError(f"k_percent must lie in (0, 100], got {self.k_percent}")


@dataclass(frozen=True)
class InterventionPlan:
    """One target kind with its parameters and the source delta."""

    target: TargetKind
    delta: UpdateDelta
    window: WindowSpec | None = None
    rank_range: RankRange | None = None
    modules: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        windowed = self.target in (TargetKind.MLP_WINDOW, TargetKind.ATTENTION_WINDOW)
        if windowed != (self.window is not None):
            raise ValueError(f"{self.target.value} plan needs exactly a window")
        if (self.target is TargetKind.RANK_RANGE) != (self.rank_range is not None):
            raise ValueError(f"{self.target.value} plan needs exactly a rank range")
        if (self.target is TargetKind.MODULES) != bool(self.modules):
            raise ValueError(f"{self.target.value} plan needs exactly a module list")
        unknown = sorted(set(self.modules) - set(self.delta.paths))
        if unknown:
            raise KeyError(f"modules not in the delta: {', '.join(unknown)}")

    def module_names(self) -> list[str]:
        """Parameters that receive (part of) the delta."""
        if self.target is TargetKind.MODULES:
            return list(self.modules)
        if self.target is TargetKind.RANK_RANGE:
            return self.delta.paths
        if self.target is TargetKind.EMBEDDING:
            return [
                name
                for name in self.delta.paths
                if parse_module_path(name).kind is not ModuleKind.EMBEDDING
            ]
        kind = ModuleKind.MLP if self.target is TargetKind.MLP_WINDOW else ModuleKind.ATTENTION
        layers = set(self.window.layers)
        return [
            name
            for name in self.delta.paths
            if parse_module_path(name).kind is kind and parse_module_path(name).layer in layers
        ]

    def effective_delta(self) -> UpdateDelta:
        """The delta actually added to the base, zero outside the target."""
        if self.target is TargetKind.RANK_RANGE:
            ranks = self.rank_range
            return truncate_delta(self.delta, ranks.mode, ranks.k_percent).scaled(ranks.scale)
        return self.delta.masked(self.module_names())


def truncate_matrix(m: np.ndarray, mode: str, k_percent: float) -> np.ndarray:
    """Leading (top) or trailing (bottom) ceil(r·k%/100) singular components of m.

    r is the numerical rank; a zero matrix stays zero.
    """
    if m.ndim != 2 or not np.any(m):
        return np.array(m, dtype=np.float64)
    factors = svd(m)
    r = numerical_rank(factors.sigma)
    k = max(1, math.ceil(r * k_percent / 100.0))
    lo, hi = (0, k) if mode == "top" else (r - k, r)
    return (factors.u[:, lo:hi] * factors.sigma[lo:hi]) @ factors.vt[lo:hi, :]


def truncate_delta(delta: UpdateDelta, mode: str, k_percent: float) -> UpdateDelta:
    """Per-matrix top-k% or bottom-k% truncation of every module."""
    RankRange(mode, k_percent)
    return UpdateDelta(
        {name: truncate_matrix(value, mode, k_percent) for name, value in delta.items()}
    )


def _check_layers(base: ToyPolicy, plan: InterventionPlan) -> None:
    if plan.window is not None and plan.window.n_layers != base.config.n_layers:
        raise ValueError(
            f"window built for {plan.window.n_layers} layers, policy has {base.config.n_layers}"
        )


def apply(base: ToyPolicy, plan: InterventionPlan) -> ToyPolicy:
    """New policy: base plus the plan's targeted part of the delta.

    For an embedding plan the embeddings stay at their base values while every
    other parameter receives its full delta.

    Raises:
        ArchitectureMismatchError: if the delta does not match the base.
        ValueError: if the window does not fit the policy depth.
    """
    params = base.get_params()
    check_same_architecture(params, plan.delta.entries)
    _check_layers(base, plan)
    return base.clone_with(plan.effective_delta().apply_to(params))


def compose(base: ToyPolicy, plans: Sequence[InterventionPlan]) -> ToyPolicy:
    """Apply a disjoint union of plans at once.

    Raises:
        ValueError: if two plans target the same parameter.
    """
    params = base.get_params()
    seen: set[str] = set()
    total = UpdateDelta.zeros_like(params)
    for plan in plans:
        check_same_architecture(params, plan.delta.entries)
        _check_layers(base, plan)
        names = set(plan.module_names())
        overlap = seen & names
        if overlap:
            raise ValueError(f"plans overlap on {', '.join(sorted(overlap))}")
        seen |= names
        total = total + plan.effective_delta()
    return base.clone_with(total.apply_to(params))


def window_plan(delta: UpdateDelta, kind: ModuleKind, center: int, radius: int, n_layers: int) -> InterventionPlan:
    target = TargetKind.MLP_WINDOW if kind is ModuleKind.MLP else TargetKind.ATTENTION_WINDOW
    return InterventionPlan(target, delta, window=WindowSpec(center, radius, n_layers))


def sampled_accuracy(
        policy: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
        reps: int,
        base_seed: int = 0,
) -> float:
    """Mean accuracy of ``reps`` temperature-1 sampled decodes with seeds base_seed + r."""
    if reps < 1:
        raise ValueError(f"eval_reps must be >= 1, got {reps}")
    values = [
        accuracy(
            policy, task, prompts, greedy=False,
            generator=torch.Generator().manual_seed(base_seed + r),
        )
        for r in range(reps)
    ]
    return float(np.mean(values))


def _sweep_center(
        base: ToyPolicy,
        plan: InterventionPlan,
        task: SyntheticTask,
        prompts: torch.Tensor,
        reps: int,
        base_seed: int,
) -> dict:
    policy = apply(base, plan)
    return {
        "center": plan.window.center,
        "mean_accuracy": sampled_accuracy(policy, task, prompts, reps, base_seed),
        "window_lo": plan.window.lo,
        "window_hi": plan.window.hi,
        "window_update_norm": plan.effective_delta().frobenius_norm(),
    }


def window_sweep(
        base: ToyPolicy,
        delta: UpdateDelta,
        kind: ModuleKind,
        task: SyntheticTask,
        prompts: torch.Tensor,
        radius: int = DEFAULT_WINDOW_RADIUS,
        eval_reps: int = DEFAULT_EVAL_REPS,
        base_seed: int = 0,
        jobs: int = 1,
) -> pd.DataFrame:
    """Accuracy of base + windowed delta for every center 1..L.

    Every center uses the same decoding seeds, so differences between rows come
    from the intervention only.
    """
    if kind not in (ModuleKind.MLP, ModuleKind.ATTENTION):
        raise ValueError(f"window sweeps cover mlp-sub or attention-sub, not {kind.value}")
    if eval_reps < 1:
        raise ValueError(f"eval_reps must be >= 1, got {eval_reps}")
    n_layers = base.config.n_layers
    plans = [window_plan(delta, kind, center, radius, n_layers) for center in range(1, n_layers + 1)]
    rows = Parallel(n_jobs=jobs)(
        delayed(_sweep_center)(base, plan, task, prompts, eval_reps, base_seed) for plan in plans
    )
    logger.debug("window sweep over %d centers done", len(rows))
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


@dataclass(frozen=True)
class TruncationResult:
    """Accuracy of a truncated-delta model and the norm of the injected delta."""

    mode: str
    k_percent: float
    accuracy: float
    truncated_norm: float
    scale: float


def truncated_model_eval(
        base: ToyPolicy,
        delta: UpdateDelta,
        mode: str,
        k_percent: float,
        task: SyntheticTask,
        prompts: torch.Tensor,
        norm_match: bool = False,
        norm_target: float | None = None,
) -> TruncationResult:
    """Greedy accuracy of base + truncated delta.

    With ``norm_match`` (top mode only) the truncated delta is rescaled to the
    global Frobenius norm ``norm_target``, the norm of the other method's top-k
    truncation in a paired comparison. Bottom-k tails are never rescaled.

    Raises:
        ValueError: on norm matching in bottom mode, or when ``norm_match`` and
            ``norm_target`` are not given together.
    """
    if norm_match and mode != "top":
        raise ValueError("norm matching applies to top-k truncation only")
    if norm_match != (norm_target is not None):
        raise ValueError("norm_match needs a norm_target and a norm_target needs norm_match")
    truncated = truncate_delta(delta, mode, k_percent)
    norm = truncated.frobenius_norm()
    scale = 1.0
    if norm_match and norm > 0:
        scale = norm_target / norm
    plan = InterventionPlan(
        TargetKind.RANK_RANGE, delta, rank_range=RankRange(mode, k_percent, scale)
    )
    policy = apply(base, plan)
    return TruncationResult(
        mode=mode,
        k_percent=k_percent,
        accuracy=accuracy(policy, task, prompts),
        truncated_norm=norm,
        scale=scale,
    )


def paired_truncation_eval(
        base: ToyPolicy,
        opd_delta: UpdateDelta,
        rl_delta: UpdateDelta,
        task: SyntheticTask,
        prompts: torch.Tensor,
        top_percent: float = 10.0,
        bottom_percent: float = 50.0,
) -> dict[str, float]:
    """Top-k% truncations at a common norm budget and unscaled bottom-k% tails.

    RL's top-k% delta is rescaled to the Frobenius norm of OPD's. The recovery
    columns are (truncated − base) / (full − base) accuracy gains.
    """
    base_acc = accuracy(base, task, prompts)
    result: dict[str, float] = {"base_accuracy": base_acc}
    opd_top = truncated_model_eval(base, opd_delta, "top", top_percent, task, prompts)
    rl_top = truncated_model_eval(
        base,
        rl_delta,
        "top",
        top_percent,
        task,
        prompts,
        norm_match=True,
        norm_target=opd_top.truncated_norm,
    )
    for name, delta, top in (("opd", opd_delta, opd_top), ("rl", rl_delta, rl_top)):
        full_acc = accuracy(base.clone_with(delta.apply_to(base.get_params())), task, prompts)
        bottom = truncated_model_eval(base, delta, "bottom", bottom_percent, task, prompts)
        gain = full_acc - base_acc
        result |= {
            f"{name}_full_accuracy": full_acc,
            f"{name}_top_accuracy": top.accuracy,
            f"{name}_top_recovery": (top.accuracy - base_acc) / gain if gain else float("nan"),
            f"{name}_bottom_accuracy": bottom.accuracy,
            f"{name}_tail_norm": bottom.truncated_norm,
        }
    result["tail_norm_ratio"] = (
        result["rl_tail_norm"] / result["opd_tail_norm"] if result["opd_tail_norm"] else float("nan")
    )
    return result


def modules_plan(delta: UpdateDelta, names: Iterable[str]) -> InterventionPlan:
    return InterventionPlan(TargetKind.MODULES, delta, modules=tuple(names))
