import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from opdgeo.reproduce import SEED_COLUMNS, norm_at_tau, reproduce, summarize_seeds


def _passing_row(seed):
    return {
        "seed": seed,
        "opd_norm_at_tau": 1.0,
        "rl_norm_at_tau": 2.0,
        "opd_reached_tau": True,
        "rl_reached_tau": False,
        "opd_top_recovery": 0.95,
        "rl_top_recovery": 0.5,
        "tail_norm_ratio": 1.5,
        "early_step": 10,
        "early_gain": 0.7,
        "early_kl_unscaled": 0.4,
        "early_kl_rescaled": 0.2,
        "effopd_speedup": 2.5,
        "opd_top1pct": 0.3,
        "rl_top1pct": 0.2,
        "opd_early_alignment": 0.6,
        "rl_early_alignment": 0.3,
        "opd_rank1_evr": 0.9,
        "rl_rank1_evr": 0.7,
        "sweep_peak_center": 4,
        "sweep_inverted_u": True,
    }


@pytest.fixture
def seed_frame():
    return pd.DataFrame([_passing_row(seed) for seed in range(5)], columns=SEED_COLUMNS)


def test_norm_at_tau_falls_back_to_final_norm():
    metrics = pd.DataFrame({"accuracy": [0.1, 0.5, 0.7], "delta_norm": [0.0, 1.0, 3.0]})
    assert norm_at_tau(metrics, 0.5) == (1.0, True)
    assert norm_at_tau(metrics, 0.8) == (3.0, False)


def test_all_checks_pass_on_passing_seeds(seed_frame):
    summary = summarize_seeds(seed_frame)
    assert summary["seeds"] == [0, 1, 2, 3, 4]
    assert all(summary["checks"].values())
    assert summary["median"]["effopd_speedup"] == pytest.approx(2.5)
    assert summary["mean"]["opd_reached_tau"] == 1.0


@pytest.mark.parametrize(
    "column, values, check",
    [
        ("opd_reached_tau", [True, True, False, True, True], "opd_smaller_norm_at_tau"),
        ("rl_norm_at_tau", [0.5] * 5, "opd_smaller_norm_at_tau"),
        ("opd_top_recovery", [0.95, 0.95, 0.8, 0.8, 0.8], "opd_top_recovery"),
        ("tail_norm_ratio", [1.0] * 5, "rl_heavier_tail"),
        ("early_gain", [0.7, 0.7, 0.5, 0.5, 0.5], "early_rescale_gain"),
        ("early_kl_rescaled", [0.5] * 5, "early_rescale_lowers_kl"),
        ("effopd_speedup", [2.5, 2.5, math.nan, math.nan, math.nan], "effopd_speedup"),
        ("rl_top1pct", [0.2, 0.2, 0.2, 0.2, 0.3], "opd_concentrated_top1pct"),
        ("rl_early_alignment", [0.3, 0.3, 0.3, 0.7, 0.3], "opd_aligns_early"),
        ("rl_rank1_evr", [0.95] * 5, "opd_higher_rank1_evr"),
        ("sweep_inverted_u", [True, True, True, True, False], "mlp_sweep_inverted_u"),
    ],
)
def test_each_check_fails_on_its_own_column(seed_frame, column, values, check):
    seed_frame[column] = values
    checks = summarize_seeds(seed_frame)["checks"]
    assert not checks[check]
    assert all(passed for name, passed in checks.items() if name != check)


def test_median_with_unreached_target_fails(seed_frame):
    seed_frame["effopd_speedup"] = [3.0, 3.0, 3.0, 3.0, math.nan]
    assert not summarize_seeds(seed_frame)["checks"]["effopd_speedup"]


def test_reproduce_fills_one_row_per_seed(tiny_cfg, base, teacher):
    cfg = replace(tiny_cfg, seeds=(0, 1), train=replace(tiny_cfg.train, steps=8))
    frame, summary = reproduce(cfg, base, teacher)

    assert list(frame.columns) == SEED_COLUMNS
    assert frame["seed"].tolist() == [0, 1]
    # early_fraction 0.5 of 8 steps with stride 2
    assert frame["early_step"].tolist() == [4, 4]
    assert frame["sweep_peak_center"].between(1, cfg.model.n_layers).all()
    assert np.isfinite(frame["opd_top1pct"]).all()
    assert np.isfinite(frame["opd_rank1_evr"]).all()
    assert (frame["opd_norm_at_tau"] >= 0).all()
    assert summary["seeds"] == [0, 1]
    assert all(isinstance(passed, bool) for passed in summary["checks"].values())


def test_reproduce_is_deterministic(tiny_cfg, base, teacher):
    cfg = replace(tiny_cfg, seeds=(3,), train=replace(tiny_cfg.train, steps=6))
    first, _ = reproduce(cfg, base, teacher)
    second, _ = reproduce(cfg, base, teacher)
    pd.testing.assert_frame_equal(first, second)
