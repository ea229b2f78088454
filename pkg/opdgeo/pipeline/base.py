from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Optional

logger = logging.getLogger(__name__)


class Handler(ABC):
    """One analysis stage.

    Stages share a context dict: ``run`` (RunManifest), ``cfg``, ``task``,
    ``template`` policy, ``base`` / ``final`` parameters, ``tables`` (name to
    DataFrame) and ``reports`` (name to JSON-ready dict).
    """

    name = "stage"

    def __init__(self, next_handler: Optional["Handler"] = None):
        self.next_handler = next_handler

    def set_next(self, next_handler: "Handler") -> "Handler":
        """
        Appends a stage and returns it, so calls can be chained.

        :param next_handler: stage run after this one
        :type next_handler: Handler
        :return: the appended stage
        :rtype: Handler
        """

        self.next_handler = next_handler
        return next_handler

    def handle(self, context: dict) -> dict:
        """Run this stage, then the rest of the chain.

        :param context: analysis context
        :type context: dict
        :return: context after every remaining stage
        :rtype: dict
        """

        logger.info("analysis stage: %s", self.name)
        context = self.process(context)
        if self.next_handler:
            return self.next_handler.handle(context)
        return context

    @abstractmethod
    def process(self, context: dict) -> dict:
        """Stage-specific work; adds tables or reports to the context.

        :param context: analysis context
        :type context: dict
        :return: updated context
        :rtype: dict
        """

        ...


def chain(*handlers: Handler) -> Handler:
    """Link stages in the given order and return the first one."""
    if not handlers:
        raise ValueError("an analysis chain needs at least one stage")
    current = handlers[0]
    for handler in handlers[1:]:
        current = current.set_next(handler)
    return handlers[0]
