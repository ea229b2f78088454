from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from ..store import with_provenance, write_table
from .base import Handler


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    return value


class ReportSaver(Handler):
    """Write every context table as CSV and the reports as one JSON file."""

    name = "save"

    def __init__(self, output_dir: Path, next_handler=None):
        """Create saver.

        :param output_dir: directory receiving ``<table>.csv`` and ``report.json``
        :type output_dir: Path
        :param next_handler: next handler in pipeline
        :type next_handler: Handler or None
        """
        super().__init__(next_handler)
        self.output_dir = output_dir

    def process(self, context: dict) -> dict:
        """Tag each output with config digest and seed, then write it."""
        run = context["run"]
        written = []
        for name, df in context["tables"].items():
            frame: pd.DataFrame = with_provenance(df, run.config_digest, run.seed)
            written.append(write_table(frame, self.output_dir / f"{name}.csv"))

        report = {
            "run_id": run.run_id,
            "config_digest": run.config_digest,
            "seed": run.seed,
            **_plain(context["reports"]),
        }
        report_path = self.output_dir / "report.json"
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(report_path)
        context["written"] = written
        return context
