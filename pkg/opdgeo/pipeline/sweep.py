from __future__ import annotations

import pandas as pd

from ..geometry import ModuleKind, UpdateDelta
from ..intervene import window_sweep
from .base import Handler


class WindowSweepHandler(Handler):
    """Sliding-window injection of the final delta into the base, MLP and attention."""

    name = "sweep"

    def __init__(self, jobs: int = 1, next_handler=None):
        super().__init__(next_handler)
        self.jobs = jobs

    def process(self, context: dict) -> dict:
        cfg = context["cfg"]
        base = context["template"].clone_with(context["base"])
        delta = UpdateDelta.from_params(context["final"], context["base"])

        frames = []
        for kind in (ModuleKind.MLP, ModuleKind.ATTENTION):
            frame = window_sweep(
                base,
                delta,
                kind,
                context["task"],
                context["eval_prompts"],
                radius=cfg.analysis.window_radius,
                eval_reps=cfg.analysis.eval_reps,
                base_seed=context["run"].seed,
                jobs=self.jobs,
            )
            frame.insert(0, "kind", kind.value)
            frames.append(frame)
        context["tables"]["sweep"] = pd.concat(frames, ignore_index=True)
        return context
