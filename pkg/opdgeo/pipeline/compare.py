from __future__ import annotations

import numpy as np

from ..geometry import UpdateDelta
from ..intervene import paired_truncation_eval
from ..toylab.trainer import norm_to_reach, steps_to_reach
from .base import Handler


class CompareHandler(Handler):
    """Paired norm-vs-accuracy table of two runs from the same base.

    When the pair is one OPD-like and one RL run, the paired truncation
    evaluation is added to the report.
    """

    name = "compare"

    def process(self, context: dict) -> dict:
        run, other = context["run"], context["other"]
        left = run.mode if run.mode != other.mode else f"{run.mode}_a"
        right = other.mode if run.mode != other.mode else f"{other.mode}_b"
        tau = context["cfg"].analysis.tau

        columns = ["step", "samples", "accuracy", "delta_norm"]
        paired = (
            context["metrics"][columns]
            .merge(
                context["other_metrics"][columns],
                on=["step", "samples"],
                how="outer",
                suffixes=(f"_{left}", f"_{right}"),
            )
            .sort_values("step", ignore_index=True)
        )
        context["tables"]["compare"] = paired

        report = {
            "tau": tau,
            f"{left}_norm_at_tau": norm_to_reach(context["metrics"], tau),
            f"{right}_norm_at_tau": norm_to_reach(context["other_metrics"], tau),
            f"{left}_steps_to_tau": steps_to_reach(context["metrics"], tau),
            f"{right}_steps_to_tau": steps_to_reach(context["other_metrics"], tau),
            "shared_base": all(
                np.array_equal(context["base"][name], context["other_base"][name])
                for name in context["base"]
            ),
        }

        modes = {run.mode, other.mode}
        if report["shared_base"] and "rl" in modes and modes - {"rl"}:
            base = context["template"].clone_with(context["base"])
            deltas = {
                run.mode: UpdateDelta.from_params(context["final"], context["base"]),
                other.mode: UpdateDelta.from_params(context["other_final"], context["other_base"]),
            }
            opd_mode = next(iter(modes - {"rl"}))
            report["truncation"] = paired_truncation_eval(
                base, deltas[opd_mode], deltas["rl"], context["task"], context["eval_prompts"]
            )
        context["reports"]["compare"] = report
        return context
