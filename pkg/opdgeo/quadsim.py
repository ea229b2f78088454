"""Quadratic model of OPD around the base: exact dynamics and their checks.

Linearizing the student logits around the base and taking the second-order
expansion of the reverse KL gives the objective ½ΔθᵀAΔθ − bᵀΔθ with
A = E[J_cᵀF_cJ_c], b = E[J_cᵀF_c r_c] and F_c = Diag(p₀) − p₀p₀ᵀ. Gradient
descent on it has the closed form Δθ_s = [I − (I − ηA)^s] A⁺ b.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from joblib import Parallel, delayed

from .config import QuadsimConfig
from .errors import NumericalError, ShapeMismatchError
from .linalg import random_orthogonal

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-10
PINV_CUTOFF = 1e-12
BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class QuadraticModel:
    """Curvature A, driving term b, step size η and an optional block partition."""

    a: np.ndarray
    b: np.ndarray
    eta: float
    blocks: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape != (a.shape[0],):
            raise ShapeMismatchError(f"A {a.shape} and b {b.shape} are incompatible")
        if not np.allclose(a, a.T, atol=SYMMETRY_TOL, rtol=0.0):
            raise NumericalError("A is not symmetric")
        if a.size and np.linalg.eigvalsh(a).min() < -PSD_TOL:
            raise NumericalError("A is not positive semi-definite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return int(self.b.shape[0])

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.a).max()) if self.dim else 0.0

    def with_eta(self, eta: float) -> "QuadraticModel":
        return replace(self, eta=eta)


@dataclass(frozen=True)
class FisherAtBase:
    """Logit-space curvature of the KL at the base distribution."""

    p0: np.ndarray
    f: np.ndarray


def fisher_at_base(p0: np.ndarray) -> FisherAtBase:
    """F = Diag(p₀) − p₀p₀ᵀ.

    Raises:
        ValueError: if p0 is not a probability vector.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.ndim != 1 or np.any(p0 < 0) or not math.isclose(p0.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("p0 must be a probability vector")
    return FisherAtBase(p0=p0, f=np.diag(p0) - np.outer(p0, p0))


def build_from_contexts(
        jacobians: Sequence[np.ndarray],
        residuals: Sequence[np.ndarray],
        p0s: Sequence[np.ndarray],
        eta: float | None = None,
        blocks: tuple[tuple[int, ...], ...] | None = None,
) -> QuadraticModel:
    """Empirical A and b over contexts.

    Args:
        jacobians: J_c, (vocab, dim) each.
        residuals: teacher-minus-student logit residuals r_c, (vocab,) each.
        p0s: base distributions p₀ at each context.
        eta: step size; defaults to 1/λ_max (1.0 when A = 0).
        blocks: optional module partition of the parameter indices.

    Raises:
        ShapeMismatchError: on inconsistent shapes or context counts.
    """
    if not (len(jacobians) == len(residuals) == len(p0s)) or not jacobians:
        raise ShapeMismatchError("jacobians, residuals and p0s must be non-empty and aligned")
    vocab, dim = np.shape(jacobians[0])
    a = np.zeros((dim, dim))
    b = np.zeros(dim)
    for j, r, p0 in zip(jacobians, residuals, p0s):
        j = np.asarray(j, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        if j.shape != (vocab, dim) or r.shape != (vocab,) or np.shape(p0) != (vocab,):
            raise ShapeMismatchError(
                f"context shapes J {j.shape}, r {r.shape}, p0 {np.shape(p0)} "
                f"differ from ({vocab}, {dim})"
            )
        f = fisher_at_base(p0).f
        a += j.T @ f @ j
        b += j.T @ f @ r
    a /= len(jacobians)
    b /= len(jacobians)
    a = 0.5 * (a + a.T)
    if eta is None:
        lam = float(np.linalg.eigvalsh(a).max())
        eta = 1.0 / lam if lam > 0 else 1.0
    return QuadraticModel(a=a, b=b, eta=eta, blocks=blocks)


def quadratic_loss(model: QuadraticModel, theta: np.ndarray) -> float:
    """½θᵀAθ − bᵀθ."""
    return float(0.5 * theta @ model.a @ theta - model.b @ theta)


def check_convergent(model: QuadraticModel) -> None:
    """Raise NumericalError unless 0 < η < 2/λ_max."""
    lam = model.lambda_max
    if model.eta <= 0 or (lam > 0 and model.eta >= 2.0 / lam):
        raise NumericalError(
            f"step size eta={model.eta:.6g} outside the convergent range (0, {2.0 / lam:.6g})"
            if lam > 0
            else f"step size eta={model.eta:.6g} must be > 0"
        )


def iterate_gd(model: QuadraticModel, steps: int) -> np.ndarray:
    """Δθ_{s+1} = (I − ηA)Δθ_s + ηb from Δθ_0 = 0."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    theta = np.zeros(model.dim)
    for _ in range(steps):
        theta = theta - model.eta * (model.a @ theta) + model.eta * model.b
    return theta


def _pinv(a: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(a, rcond=PINV_CUTOFF, hermitian=True)


def _growth(model: QuadraticModel, steps: int) -> np.ndarray:
    """I − (I − ηA)^s."""
    eye = np.eye(model.dim)
    return eye - np.linalg.matrix_power(eye - model.eta * model.a, steps)


def closed_form(model: QuadraticModel, steps: int) -> np.ndarray:
    """[I − (I − ηA)^s] A⁺ b with the pseudo-inverse on the support of A.

    Raises:
        NumericalError: if η is outside (0, 2/λ_max).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    check_convergent(model)
    return _growth(model, steps) @ _pinv(model.a) @ model.b


@dataclass(frozen=True)
class SpectralDynamics:
    """Per-eigendirection view of Δθ_s, eigenvalues in decreasing order.

    ``saturation`` is 1 − (1 − ηλ_i)^s, ``coefficients`` the coordinates of Δθ_s
    in the eigenbasis (zero on the null space of A).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    beta: np.ndarray
    saturation: np.ndarray
    coefficients: np.ndarray
    vector: np.ndarray


def _eigh_desc(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        lam, u = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigendecomposition of A did not converge") from exc
    order = np.argsort(lam)[::-1]
    return lam[order], u[:, order]


def _support(lam: np.ndarray) -> np.ndarray:
    top = lam.max() if lam.size else 0.0
    return lam > PINV_CUTOFF * top if top > 0 else np.zeros_like(lam, dtype=bool)


def spectral_form(model: QuadraticModel, steps: int) -> SpectralDynamics:
    """Σ_{i: λ_i > 0} (1 − (1 − ηλ_i)^s)/λ_i · β_i u_i with β = Uᵀb."""
    lam, u = _eigh_desc(model.a)
    beta = u.T @ model.b
    saturation = 1.0 - (1.0 - model.eta * lam) ** steps
    support = _support(lam)
    coefficients = np.zeros_like(lam)
    coefficients[support] = saturation[support] / lam[support] * beta[support]
    return SpectralDynamics(
        eigenvalues=lam,
        eigenvectors=u,
        beta=beta,
        saturation=saturation,
        coefficients=coefficients,
        vector=u @ coefficients,
    )


@dataclass(frozen=True)
class LockinReport:
    """Tail-contribution bound of the update after s steps."""

    k: int
    steps: int
    epsilon: float
    rho_perp: float
    lhs: float
    rhs: float
    holds: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "steps": self.steps,
            "epsilon": self.epsilon,
            "rho_perp": self.rho_perp,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "holds": self.holds,
        }


def lockin_bound_check(model: QuadraticModel, k: int, steps: int) -> LockinReport:
    """Compare the update with its top-k-driven part.

    ε = ‖P⊥b‖/‖b‖ for the span U_k of the top-k eigenvectors,
    ρ⊥(s) = max_{i>k, λ_i>0} |1 − (1 − ηλ_i)^s|/λ_i,
    lhs = ‖Δθ_s − [I − (I − ηA)^s]A⁺P_k b‖ and rhs = ρ⊥(s)·ε‖b‖.
    """
    if not 1 <= k < model.dim:
        raise ValueError(f"k must satisfy 1 <= k < {model.dim}, got {k}")
    dynamics = spectral_form(model, steps)
    lam, u = dynamics.eigenvalues, dynamics.eigenvectors
    support = _support(lam)

    b_norm = float(np.linalg.norm(model.b))
    b_par = u[:, :k] @ (u[:, :k].T @ model.b)
    epsilon = float(np.linalg.norm(model.b - b_par) / b_norm) if b_norm > 0 else 0.0

    tail = np.arange(lam.size) >= k
    tail &= support
    rho_perp = (
        float(np.max(np.abs(dynamics.saturation[tail]) / lam[tail])) if np.any(tail) else 0.0
    )

    beta_par = u.T @ b_par
    par_coefficients = np.zeros_like(lam)
    par_coefficients[support] = dynamics.saturation[support] / lam[support] * beta_par[support]
    lhs = float(np.linalg.norm(dynamics.vector - u @ par_coefficients))
    rhs = rho_perp * epsilon * b_norm
    return LockinReport(
        k=k, steps=steps, epsilon=epsilon, rho_perp=rho_perp, lhs=lhs, rhs=rhs,
        holds=lhs <= rhs + BOUND_SLACK,
    )


@dataclass
class BlockReport:
    """Block-local solutions against the exact minimizer."""

    solutions: list[np.ndarray]
    blockwise: np.ndarray
    exact: np.ndarray
    coupling_error: float
    singular_blocks: list[int] = field(default_factory=list)
    decoupled: bool = False


def _check_partition(blocks: tuple[tuple[int, ...], ...] | None, dim: int) -> None:
    if not blocks:
        raise ValueError("model has no block partition")
    indices = [i for block in blocks for i in block]
    if sorted(indices) != list(range(dim)):
        raise ValueError("blocks must cover every index exactly once")


def block_decoupling(model: QuadraticModel, tolerance: float = 1e-10) -> BlockReport:
    """Δθ_m ≈ A_mm⁺ b_m per block and the relative error against A⁺b.

    Singular diagonal blocks are pseudo-inverted on their support and flagged.
    ``decoupled`` reports coupling_error ≤ tolerance.
    """
    _check_partition(model.blocks, model.dim)
    exact = _pinv(model.a) @ model.b
    blockwise = np.zeros(model.dim)
    solutions = []
    singular = []
    for index, block in enumerate(model.blocks):
        idx = np.asarray(block)
        a_mm = model.a[np.ix_(idx, idx)]
        lam = np.linalg.eigvalsh(a_mm)
        if lam.min() <= PINV_CUTOFF * max(lam.max(), 0.0):
            singular.append(index)
            logger.debug("block %d is singular, using its pseudo-inverse", index)
        solution = _pinv(a_mm) @ model.b[idx]
        solutions.append(solution)
        blockwise[idx] = solution

    exact_norm = float(np.linalg.norm(exact))
    difference = float(np.linalg.norm(exact - blockwise))
    error = difference / exact_norm if exact_norm > 0 else difference
    return BlockReport(
        solutions=solutions,
        blockwise=blockwise,
        exact=exact,
        coupling_error=error,
        singular_blocks=singular,
        decoupled=error <= tolerance,
    )


def scale_coupling(model: QuadraticModel, delta: float) -> QuadraticModel:
    """Copy of the model with every off-diagonal block multiplied by delta.

    For delta in [0, 1] the result is a convex combination of A and its block
    diagonal, so it stays positive semi-definite.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"coupling scale must lie in [0, 1], got {delta}")
    _check_partition(model.blocks, model.dim)
    mask = np.zeros_like(model.a, dtype=bool)
    for block in model.blocks:
        idx = np.asarray(block)
        mask[np.ix_(idx, idx)] = True
    a = np.where(mask, model.a, delta * model.a)
    return replace(model, a=a)


@dataclass(frozen=True)
class VarianceReport:
    """Monte-Carlo trace of the covariance of per-sample OPD and RL gradients."""

    trace_cov_opd: float
    trace_cov_rl: float
    se_opd: float
    se_rl: float
    samples: int
    analytic_opd: float
    analytic_rl: float

    def to_dict(self) -> dict[str, float]:
        return {
            "trace_cov_opd": self.trace_cov_opd,
            "trace_cov_rl": self.trace_cov_rl,
            "se_opd": self.se_opd,
            "se_rl": self.se_rl,
            "samples": self.samples,
            "analytic_opd": self.analytic_opd,
            "analytic_rl": self.analytic_rl,
        }


def _variance_shard(
        jacobians: Sequence[np.ndarray],
        residuals: Sequence[np.ndarray],
        p0s: Sequence[np.ndarray],
        reward_prob: float,
        samples: int,
        seed: np.random.SeedSequence,
) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    dim = np.shape(jacobians[0])[1]
    opd = np.zeros((samples, dim))
    rl = np.zeros((samples, dim))
    contexts = rng.integers(0, len(jacobians), size=samples)
    for row, c in enumerate(contexts):
        j, p0 = jacobians[c], p0s[c]
        f = fisher_at_base(p0).f
        opd[row] = j.T @ f @ residuals[c]
        y = rng.choice(p0.shape[0], p=p0)
        advantage = float(rng.random() < reward_prob) - reward_prob
        e_y = np.zeros_like(p0)
        e_y[y] = 1.0
        rl[row] = advantage * (j.T @ (e_y - p0))
    return float(opd.var(axis=0, ddof=1).sum()), float(rl.var(axis=0, ddof=1).sum())


def analytic_traces(
        jacobians: Sequence[np.ndarray],
        residuals: Sequence[np.ndarray],
        p0s: Sequence[np.ndarray],
        reward_prob: float,
) -> tuple[float, float]:
    """Exact traces: OPD from the spread over contexts, RL = p(1 − p)·tr(A)."""
    opd = np.array(
        [j.T @ fisher_at_base(p0).f @ r for j, r, p0 in zip(jacobians, residuals, p0s)]
    )
    trace_opd = float(np.sum(opd.var(axis=0, ddof=0)))
    trace_a = float(
        np.mean([np.trace(j.T @ fisher_at_base(p0).f @ j) for j, p0 in zip(jacobians, p0s)])
    )
    return trace_opd, reward_prob * (1.0 - reward_prob) * trace_a


def gradient_variance_compare(
        jacobians: Sequence[np.ndarray],
        residuals: Sequence[np.ndarray],
        p0s: Sequence[np.ndarray],
        reward_prob: float,
        samples: int,
        shards: int = 8,
        seed: int = 0,
        jobs: int = 1,
) -> VarianceReport:
    """Trace of Cov(ĝ_OPD) and Cov(ĝ_RL) on the same contexts.

    ĝ_OPD = J_cᵀF_c r_c and ĝ_RL = a·J_cᵀ(e_y − p₀) with y ~ p₀ and the advantage
    a = Bernoulli(p) − p drawn independently of y. Shards run in parallel with
    seeds spawned from ``seed`` and are merged in shard order; standard errors
    come from the spread of the shard estimates.
    """
    if not 0.0 <= reward_prob <= 1.0:
        raise ValueError(f"reward probability must lie in [0, 1], got {reward_prob}")
    per_shard = samples // shards
    if shards < 2 or per_shard < 2:
        raise ValueError("need at least 2 shards of at least 2 samples each")
    jacobians = [np.asarray(j, dtype=np.float64) for j in jacobians]
    residuals = [np.asarray(r, dtype=np.float64) for r in residuals]
    p0s = [np.asarray(p, dtype=np.float64) for p in p0s]

    seeds = np.random.SeedSequence(seed).spawn(shards)
    results = Parallel(n_jobs=jobs)(
        delayed(_variance_shard)(jacobians, residuals, p0s, reward_prob, per_shard, s)
        for s in seeds
    )
    opd = np.array([r[0] for r in results])
    rl = np.array([r[1] for r in results])
    analytic_opd, analytic_rl = analytic_traces(jacobians, residuals, p0s, reward_prob)
    return VarianceReport(
        trace_cov_opd=float(opd.mean()),
        trace_cov_rl=float(rl.mean()),
        se_opd=float(opd.std(ddof=1) / math.sqrt(shards)),
        se_rl=float(rl.std(ddof=1) / math.sqrt(shards)),
        samples=per_shard * shards,
        analytic_opd=analytic_opd,
        analytic_rl=analytic_rl,
    )


class QuadraticTrainer:
    """Gradient descent on the quadratic model behind the trainer protocol."""

    def __init__(self, model: QuadraticModel) -> None:
        self.model = model
        self.theta = np.zeros(model.dim)
        self.step_count = 0

    def step(self) -> float:
        self.theta = self.theta - self.model.eta * (self.model.a @ self.theta - self.model.b)
        self.step_count += 1
        return quadratic_loss(self.model, self.theta)

    def get_params(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta.copy()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.theta = np.array(params["theta"], dtype=np.float64)


def negative_loss_validator(model: QuadraticModel):
    """Validation score −f(θ) for EffOPD runs on the quadratic model."""

    def score(params: dict[str, np.ndarray]) -> float:
        return -quadratic_loss(model, np.asarray(params["theta"]))

    return score


def random_spd(dim: int, rng: np.random.Generator, low: float = 0.1, high: float = 10.0) -> np.ndarray:
    """Q Diag(λ) Qᵀ with λ log-uniform in [low, high]."""
    q = random_orthogonal(dim, rng)
    lam = np.exp(rng.uniform(math.log(low), math.log(high), size=dim))
    a = (q * lam) @ q.T
    return 0.5 * (a + a.T)


def random_model(dim: int, rng: np.random.Generator, eta_fraction: float = 1.0) -> QuadraticModel:
    """Random SPD instance with η = eta_fraction / λ_max."""
    a = random_spd(dim, rng)
    lam = float(np.linalg.eigvalsh(a).max())
    return QuadraticModel(a=a, b=rng.standard_normal(dim), eta=eta_fraction / lam)


def concentrated_model(
        dim: int,
        k: int,
        epsilon: float,
        gap: float,
        rng: np.random.Generator,
        eta_fraction: float = 1.0,
) -> QuadraticModel:
    """Instance whose b has tail share at most ε and spectral gap λ_k/λ_{k+1} ≥ gap."""
    q = random_orthogonal(dim, rng)
    tail = rng.uniform(0.1, 1.0, size=dim - k)
    head = rng.uniform(gap, 5.0 * gap, size=k)
    lam = np.concatenate([np.sort(head)[::-1], np.sort(tail)[::-1]])
    a = (q * lam) @ q.T
    a = 0.5 * (a + a.T)

    share = rng.uniform(0.0, epsilon)
    head_part = q[:, :k] @ rng.standard_normal(k)
    tail_part = q[:, k:] @ rng.standard_normal(dim - k)
    b = math.sqrt(1.0 - share**2) * head_part / np.linalg.norm(head_part)
    b += share * tail_part / np.linalg.norm(tail_part)
    return QuadraticModel(a=a, b=b, eta=eta_fraction / lam[0])


def block_model(
        block_sizes: Sequence[int],
        rng: np.random.Generator,
        coupling: float = 1.0,
) -> QuadraticModel:
    """Random SPD model with a block partition, off-diagonal blocks scaled by ``coupling``."""
    dim = int(sum(block_sizes))
    blocks = []
    start = 0
    for size in block_sizes:
        blocks.append(tuple(range(start, start + size)))
        start += size
    a = random_spd(dim, rng, low=1.0, high=2.0)
    model = QuadraticModel(
        a=a, b=rng.standard_normal(dim), eta=1.0 / float(np.linalg.eigvalsh(a).max()),
        blocks=tuple(blocks),
    )
    return scale_coupling(model, coupling)


def random_contexts(
        n_contexts: int,
        vocab: int,
        dim: int,
        rng: np.random.Generator,
        residual_scale: float = 0.1,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Random Jacobians, small teacher residuals and softmax base distributions."""
    jacobians = [rng.standard_normal((vocab, dim)) / math.sqrt(dim) for _ in range(n_contexts)]
    residuals = [residual_scale * rng.standard_normal(vocab) for _ in range(n_contexts)]
    p0s = []
    for _ in range(n_contexts):
        z = rng.standard_normal(vocab)
        p = np.exp(z - z.max())
        p0s.append(p / p.sum())
    return jacobians, residuals, p0s


def _relative(x: np.ndarray, y: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(y)), float(np.linalg.norm(x)), 1e-300)
    return float(np.linalg.norm(x - y)) / scale


def quadsim_report(cfg: QuadsimConfig, jobs: int = 1) -> dict[str, Any]:
    """Every randomized oracle and bound check of the quadratic theory.

    Raises:
        NumericalError: if the configured step size is outside the convergent range.
    """
    from .effopd import run_effopd

    rng = np.random.default_rng(cfg.seed)

    worst = 0.0
    monotone = True
    for _ in range(cfg.instances):
        model = random_model(cfg.dim, rng, cfg.eta_fraction)
        for steps in cfg.steps:
            iterated = iterate_gd(model, steps)
            closed = closed_form(model, steps)
            spectral = spectral_form(model, steps).vector
            worst = max(
                worst,
                _relative(iterated, closed),
                _relative(spectral, closed),
                _relative(iterated, spectral),
            )
        losses = [quadratic_loss(model, iterate_gd(model, s)) for s in range(0, 20)]
        monotone &= all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    logger.info("oracle agreement: worst relative error %.3e", worst)

    lockin = []
    for _ in range(cfg.lockin_instances):
        model = concentrated_model(
            cfg.dim, cfg.lockin_k, cfg.lockin_epsilon, cfg.lockin_gap, rng, cfg.eta_fraction
        )
        lockin.append(lockin_bound_check(model, cfg.lockin_k, max(cfg.steps)))
    violations = sum(not report.holds for report in lockin)
    logger.info("lock-in bound: %d violations over %d instances", violations, len(lockin))

    sizes = [cfg.dim // 4] * 3 + [cfg.dim - 3 * (cfg.dim // 4)]
    coupled = block_model(sizes, rng)
    coupling = [
        {"delta": 0.0, "coupling_error": block_decoupling(scale_coupling(coupled, 0.0)).coupling_error}
    ]
    coupling += [
        {"delta": d, "coupling_error": block_decoupling(scale_coupling(coupled, d)).coupling_error}
        for d in cfg.coupling_deltas
    ]
    errors = [row["coupling_error"] for row in coupling]

    jacobians, residuals, p0s = random_contexts(16, 8, cfg.dim, rng)
    variance = gradient_variance_compare(
        jacobians, residuals, p0s, cfg.reward_prob, cfg.mc_samples, cfg.mc_shards,
        seed=cfg.seed, jobs=jobs,
    )

    accelerated = QuadraticTrainer(random_model(cfg.dim, rng, cfg.eta_fraction))
    extrapolation = run_effopd(
        accelerated, max(cfg.steps), negative_loss_validator(accelerated.model)
    )

    return {
        "oracle": {
            "instances": cfg.instances,
            "steps": list(cfg.steps),
            "max_relative_error": worst,
            "pass": worst <= 1e-9,
            "loss_monotone": monotone,
        },
        "lockin": {
            "instances": len(lockin),
            "violations": violations,
            "max_epsilon": max((r.epsilon for r in lockin), default=0.0),
            "holds": violations == 0,
        },
        "coupling": {
            "sweep": coupling,
            "exact_when_decoupled": errors[0] <= 1e-10,
            "monotone": all(b >= a for a, b in zip(errors, errors[1:])),
        },
        "variance": variance.to_dict() | {"rl_exceeds_opd": variance.trace_cov_rl > variance.trace_cov_opd},
        "effopd": {
            "accepted_k": [event.accepted_k for event in extrapolation.events],
            "final_loss": quadratic_loss(accelerated.model, extrapolation.params["theta"]),
        },
    }
