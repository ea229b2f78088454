from __future__ import annotations

import pandas as pd

from ..geometry import UpdateDelta
from ..intervene import truncated_model_eval
from ..toylab.metrics import accuracy
from .base import Handler

TRUNCATE_COLUMNS = ["mode", "k_percent", "accuracy", "truncated_norm", "recovery"]


class TruncationHandler(Handler):
    """Accuracy of top-k% and bottom-k% truncated final deltas."""

    name = "truncate"

    def process(self, context: dict) -> dict:
        cfg = context["cfg"]
        task = context["task"]
        prompts = context["eval_prompts"]
        base = context["template"].clone_with(context["base"])
        delta = UpdateDelta.from_params(context["final"], context["base"])

        base_acc = accuracy(base, task, prompts)
        full_acc = accuracy(base.clone_with(context["final"]), task, prompts)
        gain = full_acc - base_acc

        rows = []
        for mode in ("top", "bottom"):
            for k_percent in cfg.analysis.truncate_percents:
                result = truncated_model_eval(base, delta, mode, k_percent, task, prompts)
                rows.append(
                    {
                        "mode": mode,
                        "k_percent": k_percent,
                        "accuracy": result.accuracy,
                        "truncated_norm": result.truncated_norm,
                        "recovery": (result.accuracy - base_acc) / gain if gain else float("nan"),
                    }
                )
        context["tables"]["truncate"] = pd.DataFrame(rows, columns=TRUNCATE_COLUMNS)
        context["reports"]["truncate"] = {"base_accuracy": base_acc, "full_accuracy": full_acc}
        return context
