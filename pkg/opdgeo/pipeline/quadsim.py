from __future__ import annotations

from ..quadsim import quadsim_report
from .base import Handler


class QuadsimHandler(Handler):
    """Checks of the quadratic theory under the run's quadsim settings."""

    name = "quadsim"

    def __init__(self, jobs: int = 1, next_handler=None):
        super().__init__(next_handler)
        self.jobs = jobs

    def process(self, context: dict) -> dict:
        context["reports"]["quadsim"] = quadsim_report(context["cfg"].quadsim, jobs=self.jobs)
        return context
