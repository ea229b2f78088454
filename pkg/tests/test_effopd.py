import itertools
import json

import numpy as np
import pytest

from opdgeo.effopd import (
    ExtrapolationEvent,
    direction,
    extrapolate_and_select,
    read_events,
    run_effopd,
    trigger_steps,
    write_events,
)
from opdgeo.errors import MissingCheckpointError
from opdgeo.geometry import UpdateDelta, params_digest
from opdgeo.quadsim import QuadraticTrainer, negative_loss_validator, quadratic_loss, random_model
from opdgeo.toylab.trainer import ToyTrainer


def _theta(values) -> dict[str, np.ndarray]:
    return {"theta": np.asarray(values, dtype=np.float64)}


def _distance_validator(target):
    target = np.asarray(target, dtype=np.float64)
    return lambda params: -float(np.linalg.norm(params["theta"] - target))


def _alternating():
    values = itertools.cycle([1.0, 0.0])
    return lambda params: next(values)


def test_trigger_steps():
    assert trigger_steps(0) == []
    assert trigger_steps(1) == [1]
    assert trigger_steps(10) == [1, 2, 4, 8]
    assert trigger_steps(16) == [1, 2, 4, 8, 16]


def test_direction():
    history = {0: _theta([0.0]), 1: _theta([1.0]), 4: _theta([3.0]), 8: _theta([7.0])}
    np.testing.assert_array_equal(direction(0, history)["theta"], [1.0])
    np.testing.assert_array_equal(direction(3, history)["theta"], [4.0])
    with pytest.raises(MissingCheckpointError) as info:
        direction(1, history)
    assert info.value.steps == [2]
    with pytest.raises(ValueError):
        direction(-1, history)


def test_direction_without_progress_is_zero():
    history = {2: _theta([5.0, 1.0]), 4: _theta([5.0, 1.0])}
    assert direction(2, history).frobenius_norm() == 0.0


def test_all_candidates_accepted_on_monotone_objective():
    params = _theta([0.0, 0.0])
    delta = UpdateDelta(_theta([0.01, 0.02]))
    accepted, event = extrapolate_and_select(params, delta, _distance_validator([100.0, 100.0]))
    assert event.accepted_k == 5
    np.testing.assert_allclose(accepted["theta"], [0.1, 0.2])
    assert len(event.scores) == 5
    assert event.params_digest == params_digest(accepted)


def test_first_rejection_returns_input_unchanged():
    params = _theta([1.0, -2.0])
    delta = UpdateDelta(_theta([0.5, 0.5]))
    accepted, event = extrapolate_and_select(params, delta, _distance_validator([1.0, -2.0]))
    assert event.accepted_k == 0
    np.testing.assert_array_equal(accepted["theta"], params["theta"])
    assert event.accepted_score == event.base_score
    assert len(event.scores) == 1


@pytest.mark.parametrize("target", [0.35, 0.55, 0.75, 0.95, 1.3])
def test_selection_matches_sequential_oracle(target):
    params = _theta([0.0])
    delta = UpdateDelta(_theta([0.1]))
    validator = _distance_validator([target])
    _, event = extrapolate_and_select(params, delta, validator)

    expected = 0
    best = validator(params)
    for k in range(1, 6):
        score = validator(_theta([0.2 * k]))
        if score < best:
            break
        expected, best = k, score
    assert event.accepted_k == expected


def test_ties_are_accepted():
    _, event = extrapolate_and_select(_theta([0.0]), UpdateDelta(_theta([1.0])), lambda params: 0.5)
    assert event.accepted_k == 5


def test_validator_failure_counts_as_rejection():
    calls = iter([1.0, 2.0, float("nan")])
    accepted, event = extrapolate_and_select(
        _theta([0.0]), UpdateDelta(_theta([1.0])), lambda params: next(calls)
    )
    assert event.accepted_k == 1
    np.testing.assert_array_equal(accepted["theta"], [2.0])
    assert event.scores == [2.0, None]
    assert event.failures and event.failures[0].startswith("k=2")


def test_validator_exception_on_base_keeps_parameters():
    def broken(params):
        raise RuntimeError("no logits")

    accepted, event = extrapolate_and_select(_theta([3.0]), UpdateDelta(_theta([1.0])), broken)
    assert event.accepted_k == 0
    assert event.base_score is None
    np.testing.assert_array_equal(accepted["theta"], [3.0])
    assert "RuntimeError" in event.failures[0]


def test_single_step_run_has_one_event():
    trainer = QuadraticTrainer(random_model(4, np.random.default_rng(0)))
    run = run_effopd(trainer, 1, negative_loss_validator(trainer.model))
    assert [(e.n, e.t) for e in run.events] == [(0, 1)]
    assert run.steps == 1


def test_run_on_quadratic_never_worsens_validation():
    model = random_model(12, np.random.default_rng(3))
    trainer = QuadraticTrainer(model)
    validator = negative_loss_validator(model)
    run = run_effopd(trainer, 64, validator)
    assert [e.t for e in run.events] == trigger_steps(64)
    assert trainer.step_count == 64
    for event in run.events:
        assert event.accepted_score >= event.base_score
        accepted = event.scores[: event.accepted_k]
        assert all(b >= a for a, b in zip(accepted, accepted[1:]))
    assert quadratic_loss(model, run.params["theta"]) <= quadratic_loss(model, np.zeros(12))


def test_installed_parameters_continue_training():
    model = random_model(6, np.random.default_rng(5))
    trainer = QuadraticTrainer(model)
    installs = []
    run = run_effopd(
        trainer, 8, negative_loss_validator(model), on_install=installs.append
    )
    assert installs == [e.t for e in run.events if e.accepted_k > 0]
    np.testing.assert_array_equal(run.params["theta"], trainer.theta)


@pytest.mark.parametrize("validator", [_alternating, lambda: (lambda params: float("nan"))])
def test_rejecting_validator_degenerates_to_vanilla_quadratic(validator):
    model = random_model(5, np.random.default_rng(9))
    vanilla = QuadraticTrainer(model)
    for _ in range(20):
        vanilla.step()
    scheduled = QuadraticTrainer(model)
    run = run_effopd(scheduled, 20, validator())
    assert all(e.accepted_k == 0 for e in run.events)
    np.testing.assert_array_equal(run.params["theta"], vanilla.theta)


def test_rejecting_validator_degenerates_to_vanilla_toy_training(base, teacher, task, tiny_cfg):
    steps = 6
    vanilla = ToyTrainer("opd", base.clone_with(base.get_params()), task, tiny_cfg.train, 4, teacher)
    for _ in range(steps):
        vanilla.step()
    scheduled = ToyTrainer("opd", base.clone_with(base.get_params()), task, tiny_cfg.train, 4, teacher)
    run = run_effopd(scheduled, steps, _alternating())
    assert len(run.events) == 3
    for name, value in vanilla.get_params().items():
        np.testing.assert_array_equal(run.params[name], value)


def test_event_log_round_trip(tmp_path):
    events = [
        ExtrapolationEvent(n=0, t=1, base_score=0.5, scores=[0.6, None], accepted_k=1,
                           accepted_score=0.6, direction_norm=0.1, failures=["k=2: nan"]),
        ExtrapolationEvent(n=1, t=2, base_score=None, failures=["base: boom"]),
    ]
    path = write_events(events, tmp_path / "events.jsonl")
    assert len(path.read_text().splitlines()) == 2
    assert read_events(path) == events


def test_event_log_lines_are_stamped(tmp_path):
    event = ExtrapolationEvent(n=0, t=1, base_score=0.5)
    path = write_events([event], tmp_path / "e.jsonl", "ab" * 32, 7)
    record = json.loads(path.read_text().splitlines()[0])
    assert record["config_digest"] == "ab" * 32 and record["seed"] == 7
    assert read_events(path) == [event]


def test_read_events_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_events(tmp_path / "absent.jsonl")
