from __future__ import annotations

import math

import numpy as np
import pandas as pd

from ..errors import MissingCheckpointError, NumericalError
from ..geometry import (
    ModuleKind,
    UpdateDelta,
    alignment_trajectory,
    pca_evr2,
    rank1_alignment,
    rank1_trajectory_evr,
)
from ..store import load_checkpoint
from .base import Handler


def early_step(steps: list[int], fraction: float, stride: int = 1, where: str = "run") -> int:
    """First recorded step at or after ``fraction`` of the final step.

    :param steps: recorded checkpoint steps, 0 included
    :param fraction: share of the final step
    :param stride: checkpoint stride, named when no step after 0 exists
    :param where: run description for the error message
    :raises MissingCheckpointError: if no step after 0 was recorded
    """
    positive = [step for step in steps if step > 0]
    if not positive:
        raise MissingCheckpointError([stride], where)
    target = math.ceil(fraction * positive[-1])
    return next(step for step in positive if step >= target)


class AlignmentHandler(Handler):
    """Subspace alignment with the final delta, rank-1 alignment and trajectory EVRs."""

    name = "align"

    def process(self, context: dict) -> dict:
        run = context["run"]
        cfg = context["cfg"]
        base = context["base"]
        steps = [step for step in run.steps if step > 0]
        if len(steps) < 2:
            stride = cfg.train.checkpoint_stride
            raise MissingCheckpointError(
                [s for s in (stride, 2 * stride) if s not in run.steps], f"run {run.run_id}"
            )

        deltas = [UpdateDelta.from_params(load_checkpoint(run, step), base) for step in steps]
        series = alignment_trajectory(deltas, cfg.analysis.k_max, steps)
        context["tables"]["align"] = series.to_frame()

        early = deltas[steps.index(early_step(run.steps, cfg.analysis.early_fraction))]
        rank1 = rank1_alignment(early, deltas[-1])
        context["tables"]["rank1_alignment"] = pd.DataFrame(
            {"matrix_name": list(rank1), "abs_cosine": list(rank1.values())}
        )

        matrices = deltas[-1].by_kind(ModuleKind.ATTENTION, ModuleKind.MLP).paths
        evr_rows = []
        for name in matrices:
            usable = [delta for delta in deltas if np.any(delta[name])]
            if len(usable) < 3:
                continue
            try:
                evr_rows.append({"matrix_name": name, "evr2": rank1_trajectory_evr(usable, name)})
            except NumericalError:
                evr_rows.append({"matrix_name": name, "evr2": 1.0})
        context["tables"]["rank1_evr"] = pd.DataFrame(evr_rows, columns=["matrix_name", "evr2"])

        report = {
            "final_similarity": series.values[-1],
            "early_step": early_step(run.steps, cfg.analysis.early_fraction),
        }
        if len(deltas) >= 3:
            flat = [np.concatenate([np.ravel(v) for v in d.entries.values()]) for d in deltas]
            report["trajectory_evr2"] = pca_evr2(flat)
        context["reports"]["align"] = report
        return context
