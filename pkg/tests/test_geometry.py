import math

import numpy as np
import pytest

from opdgeo.errors import ArchitectureMismatchError, NumericalError
from opdgeo.geometry import (
    ModuleKind,
    UpdateDelta,
    alignment_trajectory,
    embedding_shift,
    layer_norms,
    mean_summaries,
    norm_match_scale,
    params_digest,
    parse_module_path,
    pca_evr2,
    rank1_alignment,
    rank1_trajectory_evr,
    scale_delta,
    summaries_frame,
    summarize,
    top_fraction_norm_ratio,
)
from opdgeo.linalg import random_orthogonal


def _delta(rng, scale=1.0) -> UpdateDelta:
    return UpdateDelta(
        {
            "token_embedding": scale * rng.standard_normal((8, 4)),
            "blocks.0.mix": scale * rng.standard_normal((4, 4)),
            "blocks.0.up": scale * rng.standard_normal((6, 4)),
            "blocks.1.down": scale * rng.standard_normal((4, 6)),
        }
    )


@pytest.mark.parametrize(
    "name, layer, kind",
    [
        ("token_embedding", None, ModuleKind.EMBEDDING),
        ("position_embedding", None, ModuleKind.EMBEDDING),
        ("head", None, ModuleKind.HEAD),
        ("blocks.0.mix", 1, ModuleKind.ATTENTION),
        ("blocks.7.up", 8, ModuleKind.MLP),
        ("blocks.2.down", 3, ModuleKind.MLP),
    ],
)
def test_parse_module_path(name, layer, kind):
    path = parse_module_path(name)
    assert path.layer == layer
    assert path.kind is kind


@pytest.mark.parametrize("name", ["blocks.x.mix", "blocks.0.attn", "lm_head", "blocks.0"])
def test_parse_module_path_rejects_unknown(name):
    with pytest.raises(KeyError):
        parse_module_path(name)


def test_from_params_subtracts_base():
    trained = {"blocks.0.mix": np.full((2, 2), 3.0)}
    base = {"blocks.0.mix": np.ones((2, 2))}
    delta = UpdateDelta.from_params(trained, base)
    np.testing.assert_array_equal(delta["blocks.0.mix"], np.full((2, 2), 2.0))
    np.testing.assert_array_equal(delta.apply_to(base)["blocks.0.mix"], trained["blocks.0.mix"])


def test_from_params_lists_every_divergence():
    a = {"blocks.0.mix": np.zeros((2, 2)), "blocks.0.up": np.zeros((3, 2))}
    b = {"blocks.0.mix": np.zeros((2, 3)), "head": np.zeros((4, 2))}
    with pytest.raises(ArchitectureMismatchError) as info:
        UpdateDelta.from_params(a, b)
    assert set(info.value.divergent) == {"blocks.0.mix", "blocks.0.up", "head"}


def test_summarize_rank_one():
    u = np.array([1.0, 2.0, 2.0]) / 3.0
    v = np.array([0.6, 0.8])
    s = summarize(5.0 * np.outer(u, v), "blocks.0.mix")
    assert s.spectral_norm == pytest.approx(5.0)
    assert s.spec_frob_ratio == pytest.approx(1.0)
    assert s.effective_rank == pytest.approx(1.0)
    assert s.top1pct_norm_ratio == pytest.approx(1.0)


@pytest.mark.parametrize("r", [1, 3, 7])
def test_effective_rank_of_uniform_spectrum(r):
    m = np.zeros((8, 8))
    m[:r, :r] = np.eye(r)
    assert summarize(m, "m").effective_rank == pytest.approx(r, abs=1e-9)


def test_summarize_rejects_zero_matrix():
    with pytest.raises(NumericalError, match="blocks.3.up"):
        summarize(np.zeros((3, 3)), "blocks.3.up")


def test_summarize_is_scale_invariant(rng):
    m = rng.standard_normal((12, 9))
    a = summarize(m, "m")
    b = summarize(7.5 * m, "m")
    assert b.spec_frob_ratio == pytest.approx(a.spec_frob_ratio, abs=1e-9)
    assert b.effective_rank == pytest.approx(a.effective_rank, abs=1e-9)
    assert b.top1pct_norm_ratio == pytest.approx(a.top1pct_norm_ratio, abs=1e-9)


def test_summarize_matches_formulas_from_sigma(rng):
    m = rng.standard_normal((200, 200))
    s = summarize(m, "m")
    sigma = np.linalg.svd(m, compute_uv=False)
    p = sigma / sigma.sum()
    assert s.spec_frob_ratio == pytest.approx(sigma[0] / np.sqrt(np.sum(sigma**2)), rel=1e-9)
    assert s.effective_rank == pytest.approx(np.exp(-np.sum(p * np.log(p))), rel=1e-9)
    assert s.top1pct_norm_ratio == pytest.approx(
        np.sqrt(np.sum(sigma[:2] ** 2) / np.sum(sigma**2)), rel=1e-9
    )


def test_top_fraction_uses_ceiling():
    sigma = np.ones(150)
    assert top_fraction_norm_ratio(sigma, 1.0) == pytest.approx(math.sqrt(2 / 150))


def test_mean_summaries_averages_attention_and_mlp(rng):
    delta = _delta(rng)
    agg = mean_summaries(delta)
    singles = [summarize(delta[name], name) for name in ("blocks.0.mix", "blocks.0.up", "blocks.1.down")]
    assert agg.count == 3
    assert agg.spec_frob_ratio == pytest.approx(np.mean([s.spec_frob_ratio for s in singles]))
    assert agg.effective_rank == pytest.approx(np.mean([s.effective_rank for s in singles]))


def test_mean_summaries_single_matrix(rng):
    m = rng.standard_normal((4, 4))
    agg = mean_summaries(UpdateDelta({"blocks.0.mix": m}))
    assert agg.spectral_norm == pytest.approx(summarize(m, "m").spectral_norm)


def test_mean_summaries_rejects_embedding_only(rng):
    with pytest.raises(ValueError):
        mean_summaries(UpdateDelta({"token_embedding": rng.standard_normal((4, 2))}))


def test_summaries_frame_skips_zero_matrices(rng):
    delta = _delta(rng)
    delta = UpdateDelta(dict(delta.entries) | {"blocks.1.mix": np.zeros((4, 4))})
    frame = summaries_frame(delta, step=10)
    assert set(frame["matrix_name"]) == {"blocks.0.mix", "blocks.0.up", "blocks.1.down"}
    assert (frame["step"] == 10).all()


def test_scale_delta(rng):
    delta = _delta(rng)
    assert scale_delta(delta, 0.0).frobenius_norm() == 0.0
    np.testing.assert_array_equal(scale_delta(delta, 1.0)["blocks.0.mix"], delta["blocks.0.mix"])
    with pytest.raises(ValueError):
        scale_delta(delta, float("inf"))


def test_norm_match_scale(rng):
    early, final = _delta(rng, 0.1), _delta(rng, 2.0)
    unchanged = norm_match_scale(early, final, 0.0)
    for name in early:
        np.testing.assert_allclose(unchanged[name], early[name])

    matched = norm_match_scale(early, final, 1.0)
    for name, norm in final.module_norms().items():
        assert matched.module_norms()[name] == pytest.approx(norm, rel=1e-9)
        ratio = matched[name] / early[name]
        assert np.allclose(ratio, ratio.flat[0]) and ratio.flat[0] > 0


def test_norm_match_scale_rejects_zero_early_module(rng):
    early = _delta(rng)
    early = UpdateDelta(dict(early.entries) | {"blocks.0.up": np.zeros((6, 4))})
    with pytest.raises(NumericalError, match="blocks.0.up"):
        norm_match_scale(early, _delta(rng), 0.5)


def test_norm_match_scale_rejects_direction_flip(rng):
    early, final = _delta(rng, 1.0), _delta(rng, 0.01)
    with pytest.raises(NumericalError):
        norm_match_scale(early, final, 2.0)


def test_alignment_trajectory(rng):
    series = [_delta(rng) for _ in range(4)]
    result = alignment_trajectory(series, k_max=3, steps=[10, 20, 30, 40])
    assert result.values[-1] == pytest.approx(1.0, abs=1e-9)
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in result.values)
    frame = result.to_frame()
    assert list(frame.columns) == ["step", "similarity", "k1", "k2", "k3"]
    assert frame["step"].tolist() == [10, 20, 30, 40]


def test_alignment_trajectory_is_sign_invariant(rng):
    final = _delta(rng)
    flipped = final.scaled(-1.0)
    result = alignment_trajectory([flipped, final], k_max=2)
    assert result.values[0] == pytest.approx(1.0)


def test_alignment_of_unrelated_vectors_is_small(rng):
    d = 400
    values = []
    for _ in range(20):
        a = UpdateDelta({"blocks.0.mix": rng.standard_normal((d, 2))})
        b = UpdateDelta({"blocks.0.mix": rng.standard_normal((d, 2))})
        values.append(alignment_trajectory([a, b], k_max=1).values[0])
    assert np.mean(values) < 5.0 / np.sqrt(d)


def test_alignment_trajectory_errors(rng):
    with pytest.raises(ValueError):
        alignment_trajectory([_delta(rng)], k_max=1)
    with pytest.raises(ValueError):
        alignment_trajectory([_delta(rng), _delta(rng)], k_max=5)


def test_pca_evr2_line():
    direction = np.array([1.0, -2.0, 0.5])
    points = [t * direction for t in range(5)]
    assert pca_evr2(points) == pytest.approx(1.0)


def test_pca_evr2_isotropic_cloud(rng):
    cloud = list(rng.standard_normal((5000, 10)))
    assert pca_evr2(cloud) == pytest.approx(0.2, abs=0.05)


def test_pca_evr2_errors():
    with pytest.raises(ValueError):
        pca_evr2([np.zeros(3), np.ones(3)])
    with pytest.raises(NumericalError):
        pca_evr2([np.ones(3)] * 4)


def test_rank1_alignment_of_same_delta_is_one(rng):
    delta = _delta(rng)
    alignment = rank1_alignment(delta, delta.scaled(3.0))
    assert all(value == pytest.approx(1.0) for value in alignment.values())


def test_rank1_trajectory_evr_of_planar_rotation(rng):
    q = random_orthogonal(5, rng)
    u, w = q[:, 0], q[:, 1]
    series = []
    for t in range(4):
        left = u + 0.2 * t * w
        series.append(UpdateDelta({"blocks.0.mix": np.outer(left / np.linalg.norm(left), q[:, 2])}))
    assert rank1_trajectory_evr(series, "blocks.0.mix") == pytest.approx(1.0)


def test_layer_norms(rng):
    delta = _delta(rng)
    frame = layer_norms(delta)
    assert list(zip(frame["layer"], frame["kind"])) == [
        (1, "attention-sub"),
        (1, "mlp-sub"),
        (2, "mlp-sub"),
    ]
    mix = frame[(frame["layer"] == 1) & (frame["kind"] == "attention-sub")]["frobenius_norm"]
    assert float(mix.iloc[0]) == pytest.approx(np.linalg.norm(delta["blocks.0.mix"]))


def test_embedding_shift(rng):
    q = random_orthogonal(4, rng)
    base = {"token_embedding": rng.standard_normal((6, 4))}
    assert embedding_shift(base, base) == pytest.approx(1.0)
    rotated = {"token_embedding": base["token_embedding"] @ q}
    assert embedding_shift(base, rotated) < 1.0


def test_params_digest_detects_single_entry_change(rng):
    params = {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal(4)}
    changed = {name: value.copy() for name, value in params.items()}
    changed["a"][1, 2] = np.nextafter(changed["a"][1, 2], np.inf)
    assert params_digest(params) == params_digest(dict(reversed(list(params.items()))))
    assert params_digest(params) != params_digest(changed)
