"""Настольный стенд учитель-студент."""

from .metrics import EvalResult, evaluate
from .model import ToyPolicy
from .task import SyntheticTask
from .trainer import (
    PolicyValidator,
    StepResult,
    ToyTrainer,
    TrainRun,
    make_base,
    make_teacher,
    opd_step,
    rl_step,
    train,
)

__all__ = [
    "EvalResult",
    "PolicyValidator",
    "StepResult",
    "SyntheticTask",
    "ToyPolicy",
    "ToyTrainer",
    "TrainRun",
    "evaluate",
    "make_base",
    "make_teacher",
    "opd_step",
    "rl_step",
    "train",
]
