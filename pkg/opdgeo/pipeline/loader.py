from __future__ import annotations

from pathlib import Path

import numpy as np

from ..store import load_checkpoint, load_metrics, load_teacher, open_run
from ..toylab.model import ToyPolicy
from ..toylab.task import SyntheticTask
from .base import Handler


def policy_from(template: ToyPolicy, params: dict[str, np.ndarray] | None) -> ToyPolicy | None:
    return None if params is None else template.clone_with(params)


class RunLoader(Handler):
    """Load a run directory, its configuration and its end checkpoints into the context."""

    name = "load"

    def __init__(self, path: Path, next_handler=None, key: str = "run"):
        """Create loader.

        :param path: run directory or its manifest.json
        :type path: Path
        :param next_handler: next handler in pipeline
        :type next_handler: Handler or None
        :param key: context key the manifest is stored under ("run" or "other")
        :type key: str
        """
        super().__init__(next_handler)
        self.path = path
        self.key = key

    def process(self, context: dict) -> dict:
        """Open the manifest; the primary run also defines task, template and teacher."""
        run = open_run(self.path)
        context[self.key] = run
        context.setdefault("tables", {})
        context.setdefault("reports", {})

        if self.key == "run":
            cfg = run.experiment_config()
            task = SyntheticTask(cfg.task)
            template = ToyPolicy(task.vocab_size, task.context_len, cfg.model, seed=0)
            context["cfg"] = cfg
            context["task"] = task
            context["template"] = template
            context["eval_prompts"] = task.eval_prompts(cfg.train.eval_size)
            context["base"] = load_checkpoint(run, 0)
            context["final"] = load_checkpoint(run, run.steps[-1])
            context["metrics"] = load_metrics(run)
            context["teacher"] = policy_from(template, load_teacher(run))
        else:
            context[f"{self.key}_final"] = load_checkpoint(run, run.steps[-1])
            context[f"{self.key}_base"] = load_checkpoint(run, 0)
            context[f"{self.key}_metrics"] = load_metrics(run)
        return context
