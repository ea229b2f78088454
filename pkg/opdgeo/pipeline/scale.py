from __future__ import annotations

import numpy as np
import pandas as pd

from ..geometry import UpdateDelta, norm_match_scale
from ..store import load_checkpoint
from ..toylab.metrics import evaluate
from ..toylab.trainer import alpha_sweep
from .align import early_step
from .base import Handler

BETA_COLUMNS = ["beta", "early_step", "update_norm", "accuracy", "kl_to_teacher"]


class ScalingHandler(Handler):
    """α-scaling of the final delta and β norm-matching of an early checkpoint."""

    name = "scale"

    def process(self, context: dict) -> dict:
        run = context["run"]
        cfg = context["cfg"]
        task = context["task"]
        prompts = context["eval_prompts"]
        template = context["template"]
        base = context["base"]
        final = UpdateDelta.from_params(context["final"], base)

        context["tables"]["alpha"] = alpha_sweep(
            base, final, cfg.analysis.alphas, task, template, prompts
        )

        step = early_step(
            run.steps, cfg.analysis.early_fraction, cfg.train.checkpoint_stride, f"run {run.run_id}"
        )
        early = UpdateDelta.from_params(load_checkpoint(run, step), base)
        moved = [name for name, value in early.items() if np.any(value)]
        rows = []
        for beta in cfg.analysis.betas:
            scaled = norm_match_scale(early.restrict(moved), final.restrict(moved), beta)
            policy = template.clone_with(scaled.apply_to(base))
            measured = evaluate(policy, task, prompts, teacher=context["teacher"])
            rows.append(
                {
                    "beta": beta,
                    "early_step": step,
                    "update_norm": scaled.frobenius_norm(),
                    "accuracy": measured.accuracy,
                    "kl_to_teacher": (
                        np.nan if measured.kl_to_teacher is None else measured.kl_to_teacher
                    ),
                }
            )
        context["tables"]["beta"] = pd.DataFrame(rows, columns=BETA_COLUMNS)
        return context
