"""Extrapolation scheduler wrapping any step-based trainer.

At every step t = 2^n the scheduler estimates the direction of recent progress
Δ_n = W_{2^n} − W_{2^{n−1}} (Δ_0 = W_1 − W_0), evaluates the candidates
W_{2^n} + 2kΔ_n for k = 1, 2, ... on a fixed validation score and keeps the last
candidate accepted before the first rejection. Extrapolation consumes no
training step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from .config import DEFAULT_MAX_EXTRAPOLATION_K
from .errors import MissingCheckpointError
from .geometry import UpdateDelta, params_digest

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]
Validator = Callable[[Mapping[str, np.ndarray]], float]


class SteppedTrainer(Protocol):
    """What the scheduler needs from a trainer."""

    step_count: int

    def step(self) -> object: ...

    def get_params(self) -> Params: ...

    def set_params(self, params: Params) -> None: ...


@dataclass
class ExtrapolationEvent:
    """One extrapolation attempt at trigger step t = 2^n."""

    n: int
    t: int
    base_score: float | None
    scores: list[float | None] = field(default_factory=list)
    accepted_k: int = 0
    accepted_score: float | None = None
    direction_norm: float = 0.0
    params_digest: str = ""
    wallclock_ms: float = 0.0
    failures: list[str] = field(default_factory=list)


@dataclass
class EffOpdRun:
    """Event log and final parameters of a scheduled run."""

    events: list[ExtrapolationEvent]
    steps: int
    params: Params


def trigger_steps(total_steps: int) -> list[int]:
    """{1, 2, 4, 8, ...} ∩ [1, total_steps]."""
    steps = []
    t = 1
    while t <= total_steps:
        steps.append(t)
        t *= 2
    return steps


def direction(n: int, history: Mapping[int, Mapping[str, np.ndarray]]) -> UpdateDelta:
    """Δ_n from the checkpoint history keyed by step.

    Raises:
        MissingCheckpointError: if W_{2^n} or W_{2^{n-1}} (W_0 for n = 0) is absent.
    """
    if n < 0:
        raise ValueError(f"exponent must be >= 0, got {n}")
    newer = 2**n
    older = 0 if n == 0 else 2 ** (n - 1)
    missing = [step for step in (older, newer) if step not in history]
    if missing:
        raise MissingCheckpointError(missing, "extrapolation history")
    return UpdateDelta.from_params(history[newer], history[older])


def _score(validator: Validator, params: Params) -> tuple[float | None, str | None]:
    try:
        value = float(validator(params))
    except Exception as exc:  # noqa: BLE001 - any validator failure rejects the candidate
        return None, f"{type(exc).__name__}: {exc}"
    if not np.isfinite(value):
        return None, f"non-finite score {value}"
    return value, None


def extrapolate_and_select(
        params: Mapping[str, np.ndarray],
        delta: UpdateDelta,
        validator: Validator,
        max_k: int = DEFAULT_MAX_EXTRAPOLATION_K,
        n: int = 0,
        t: int = 1,
) -> tuple[Params, ExtrapolationEvent]:
    """Sequential acceptance of W + 2kΔ for k = 1..max_k.

    A candidate is accepted when its score is at least the last accepted score
    (ties accept). The search stops at the first rejection; a validator exception
    or a non-finite score counts as a rejection and is recorded.

    Args:
        params: W_{2^n}, the parameters before extrapolation.
        delta: direction Δ_n.
        validator: deterministic score V(W), larger is better.
        max_k: largest candidate index.
        n: exponent of the trigger, for the event record.
        t: trigger step, for the event record.

    Returns:
        (accepted parameters, event). With accepted_k = 0 the parameters are the
        unchanged input.
    """
    started = time.perf_counter()
    accepted: Params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    base_score, failure = _score(validator, accepted)
    event = ExtrapolationEvent(n=n, t=t, base_score=base_score, direction_norm=delta.frobenius_norm())

    if base_score is None:
        event.failures.append(f"base: {failure}")
    else:
        v_acc = base_score
        event.accepted_score = base_score
        for k in range(1, max_k + 1):
            candidate = delta.scaled(2.0 * k).apply_to(params)
            score, failure = _score(validator, candidate)
            event.scores.append(score)
            if score is None:
                event.failures.append(f"k={k}: {failure}")
                break
            if score < v_acc:
                break
            accepted, v_acc = candidate, score
            event.accepted_k = k
            event.accepted_score = score

    event.params_digest = params_digest(accepted)
    event.wallclock_ms = (time.perf_counter() - started) * 1000.0
    return accepted, event


def run_effopd(
        trainer: SteppedTrainer,
        total_steps: int,
        validator: Validator,
        max_k: int = DEFAULT_MAX_EXTRAPOLATION_K,
        on_step: Callable[[int], None] | None = None,
        on_install: Callable[[int], None] | None = None,
) -> EffOpdRun:
    """Train for ``total_steps`` steps with an extrapolation event at every t = 2^n.

    Accepted parameters are installed in the trainer and training continues from
    them; the history keeps the installed parameters, so the next direction
    measures training displacement only.

    Args:
        trainer: trainer exposing step(), get_params() and set_params().
        total_steps: number of optimizer steps.
        validator: deterministic validation score; must not touch the trainer's RNG.
        max_k: largest candidate index per event.
        on_step: called with the step index after every optimizer step.
        on_install: called with the step index after accepted parameters are installed.

    Returns:
        EffOpdRun with the complete event log.
    """
    history: dict[int, Params] = {0: trainer.get_params()}
    events: list[ExtrapolationEvent] = []
    n = 0
    next_trigger = 1
    for t in range(1, total_steps + 1):
        trainer.step()
        if on_step is not None:
            on_step(t)
        if t != next_trigger:
            continue

        history[t] = trainer.get_params()
        params, event = extrapolate_and_select(
            history[t], direction(n, history), validator, max_k=max_k, n=n, t=t
        )
        if event.accepted_k > 0:
            trainer.set_params(params)
            history[t] = params
            if on_install is not None:
                on_install(t)
        logger.info(
            "extrapolation n=%d t=%d: accepted k=%d (score %s -> %s)",
            n,
            t,
            event.accepted_k,
            event.base_score,
            event.accepted_score,
        )
        events.append(event)
        n += 1
        next_trigger *= 2
        history = {step: value for step, value in history.items() if step in (0, t)}

    return EffOpdRun(events=events, steps=total_steps, params=trainer.get_params())


def write_events(
        events: list[ExtrapolationEvent],
        path: Path,
        config_digest: str | None = None,
        seed: int | None = None,
) -> Path:
    """Write the event log as JSON lines, each stamped with the run provenance."""
    provenance = {"config_digest": config_digest, "seed": seed}
    lines = [json.dumps(provenance | asdict(event), sort_keys=True) + "\n" for event in events]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(lines), encoding="utf-8")
    return path


def read_events(path: Path) -> list[ExtrapolationEvent]:
    """Read an event log written by write_events, dropping the provenance keys."""
    if not path.is_file():
        raise FileNotFoundError(f"event log not found: {path}")
    known = {item.name for item in fields(ExtrapolationEvent)}
    lines = path.read_text(encoding="utf-8").splitlines()
    records = [json.loads(line) for line in lines if line.strip()]
    return [
        ExtrapolationEvent(**{key: value for key, value in record.items() if key in known})
        for record in records
    ]
