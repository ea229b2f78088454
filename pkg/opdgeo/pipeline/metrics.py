from __future__ import annotations

import pandas as pd

from ..errors import MissingCheckpointError
from ..geometry import UpdateDelta, embedding_shift, layer_norms, mean_summaries, summaries_frame
from ..store import load_checkpoint
from .base import Handler

SUMMARY_COLUMNS = [
    "step",
    "matrices",
    "sigma_max",
    "spec_frob_ratio",
    "effective_rank",
    "top1pct_ratio",
    "delta_norm",
]


class SpectralMetricsHandler(Handler):
    """Spectral summaries of W_t − W_0 for every recorded checkpoint after the base."""

    name = "metrics"

    def process(self, context: dict) -> dict:
        run = context["run"]
        base = context["base"]
        steps = [step for step in run.steps if step > 0]
        if not steps:
            raise MissingCheckpointError([context["cfg"].train.checkpoint_stride], f"run {run.run_id}")

        rows = []
        per_matrix = []
        for step in steps:
            delta = UpdateDelta.from_params(load_checkpoint(run, step), base)
            per_matrix.append(summaries_frame(delta, step))
            if not per_matrix[-1].empty:
                agg = mean_summaries(delta.restrict(per_matrix[-1]["matrix_name"]))
                rows.append(
                    {
                        "step": step,
                        "matrices": agg.count,
                        "sigma_max": agg.spectral_norm,
                        "spec_frob_ratio": agg.spec_frob_ratio,
                        "effective_rank": agg.effective_rank,
                        "top1pct_ratio": agg.top1pct_norm_ratio,
                        "delta_norm": delta.frobenius_norm(),
                    }
                )

        final = UpdateDelta.from_params(context["final"], base)
        context["tables"]["metrics"] = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
        context["tables"]["metrics_matrices"] = pd.concat(per_matrix, ignore_index=True)
        context["tables"]["layer_norms"] = layer_norms(final)
        context["reports"]["metrics"] = {
            "final_step": steps[-1],
            "delta_norm": final.frobenius_norm(),
            "token_embedding_shift": embedding_shift(base, context["final"]),
            "position_embedding_shift": embedding_shift(base, context["final"], "position_embedding"),
        }
        return context
