"""Метрики геометрии обновлений и анализ дельт весов без вмешательства в модель.

Имена параметров следуют соглашению игрушечной политики: ``token_embedding``,
``position_embedding``, необязательный ``head``, ``blocks.<i>.mix`` (смешивание,
аналог внимания) и ``blocks.<i>.up`` / ``blocks.<i>.down`` (MLP) для блока ``i``
с нумерацией от 0.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA

from .errors import ArchitectureMismatchError, NumericalError
from .linalg import (
    as_matrix,
    cosine_similarity,
    frobenius_norm,
    numerical_rank,
    subspace_similarity,
    svd,
)

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "step",
    "matrix_name",
    "sigma_max",
    "spec_frob_ratio",
    "effective_rank",
    "top1pct_ratio",
]


class ModuleKind(str, Enum):
    """Функциональный вид матрицы параметров."""

    EMBEDDING = "embedding"
    ATTENTION = "attention-sub"
    MLP = "mlp-sub"
    HEAD = "head"


@dataclass(frozen=True)
class ModulePath:
    """Разобранное имя параметра: слой с нумерацией от 1 (None вне блоков) и вид."""

    name: str
    layer: int | None
    kind: ModuleKind


def parse_module_path(name: str) -> ModulePath:
    """Сопоставляет имени параметра его слой и вид модуля.

    Аргументы:
        name: имя параметра политики.

    Вернёт:
        ModulePath с номером слоя и видом модуля.

    Исключения:
        KeyError: имя не подходит под соглашение об именах.
    """
    if name in ("token_embedding", "position_embedding"):
        return ModulePath(name, None, ModuleKind.EMBEDDING)
    if name == "head":
        return ModulePath(name, None, ModuleKind.HEAD)
    parts = name.split(".")
    if len(parts) == 3 and parts[0] == "blocks" and parts[1].isdigit():
        layer = int(parts[1]) + 1
        if parts[2] == "mix":
            return ModulePath(name, layer, ModuleKind.ATTENTION)
        if parts[2] in ("up", "down"):
            return ModulePath(name, layer, ModuleKind.MLP)
    raise KeyError(f"unknown module path: {name}")


@dataclass(frozen=True)
class UpdateDelta:
    """Дельты весов по модулям между двумя наборами параметров."""

    entries: Mapping[str, np.ndarray]

    @classmethod
    def from_params(
            cls,
            trained: Mapping[str, np.ndarray],
            base: Mapping[str, np.ndarray],
    ) -> "UpdateDelta":
        """Вычисляет ΔW = trained - base в float64.

        Исключения:
            ArchitectureMismatchError: различаются имена или формы.
        """
        check_same_architecture(trained, base)
        return cls(
            {
                name: np.asarray(trained[name], dtype=np.float64)
                - np.asarray(base[name], dtype=np.float64)
                for name in trained
            }
        )

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "UpdateDelta":
        return cls({name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def paths(self) -> list[str]:
        return list(self.entries)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self.entries.items()

    def scaled(self, alpha: float) -> "UpdateDelta":
        return UpdateDelta({name: alpha * value for name, value in self.entries.items()})

    def restrict(self, names: Iterable[str]) -> "UpdateDelta":
        """Оставляет только заданные модули."""
        keep = set(names)
        return UpdateDelta({name: value for name, value in self.entries.items() if name in keep})

    def masked(self, names: Iterable[str]) -> "UpdateDelta":
        """Обнуляет все модули вне ``names``, сохраняя все пути."""
        keep = set(names)
        return UpdateDelta(
            {
                name: value if name in keep else np.zeros_like(value)
                for name, value in self.entries.items()
            }
        )

    def by_kind(self, *kinds: ModuleKind) -> "UpdateDelta":
        return self.restrict(name for name in self.entries if parse_module_path(name).kind in kinds)

    def frobenius_norm(self) -> float:
        """Глобальная норма Фробениуса по всем модулям."""
        return math.sqrt(sum(float(np.sum(value * value)) for value in self.entries.values()))

    def module_norms(self) -> dict[str, float]:
        return {name: frobenius_norm(np.atleast_2d(value)) for name, value in self.entries.items()}

    def apply_to(self, base: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Возвращает base + delta; модули, которых нет в дельте, копируются без изменений."""
        return {
            name: np.asarray(value, dtype=np.float64) + self.entries[name]
            if name in self.entries
            else np.array(value, dtype=np.float64)
            for name, value in base.items()
        }

    def __add__(self, other: "UpdateDelta") -> "UpdateDelta":
        check_same_architecture(self.entries, other.entries)
        return UpdateDelta({name: value + other[name] for name, value in self.entries.items()})

    def __sub__(self, other: "UpdateDelta") -> "UpdateDelta":
        check_same_architecture(self.entries, other.entries)
        return UpdateDelta({name: value - other[name] for name, value in self.entries.items()})


def check_same_architecture(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    """Бросает ArchitectureMismatchError со списком всех расхождений имён и форм."""
    divergent = sorted(set(a) ^ set(b))
    divergent += sorted(
        name for name in set(a) & set(b) if np.shape(a[name]) != np.shape(b[name])
    )
    if divergent:
        raise ArchitectureMismatchError("parameter sets differ", divergent)


@dataclass(frozen=True)
class SpectralSummary:
    """Сингулярный спектр и четыре метрики геометрии обновления одной матрицы."""

    matrix_name: str
    sigma: np.ndarray
    spectral_norm: float
    spec_frob_ratio: float
    effective_rank: float
    top1pct_norm_ratio: float


@dataclass(frozen=True)
class SummaryAggregate:
    """Равномерное среднее метрик SpectralSummary по набору матриц."""

    count: int
    spectral_norm: float
    spec_frob_ratio: float
    effective_rank: float
    top1pct_norm_ratio: float


def effective_rank(sigma: np.ndarray) -> float:
    """Экспонента энтропии Шеннона нормированных сохранённых сингулярных чисел."""
    kept = sigma[: numerical_rank(sigma)]
    p = kept / kept.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def top_fraction_norm_ratio(sigma: np.ndarray, percent: float = 1.0) -> float:
    """Доля нормы Фробениуса в ведущих ceil(r * percent / 100) компонентах."""
    r = numerical_rank(sigma)
    k = max(1, math.ceil(r * percent / 100.0))
    energy = sigma[:r] ** 2
    return float(math.sqrt(energy[:k].sum() / energy.sum()))


def summarize(delta_matrix: np.ndarray, name: str) -> SpectralSummary:
    """Вычисляет спектральную норму, отношение спектральной нормы к норме Фробениуса,
    эффективный ранг и долю top-1%.

    Аргументы:
        delta_matrix: матрица дельты.
        name: имя матрицы для сообщений.

    Вернёт:
        SpectralSummary матрицы.

    Исключения:
        NumericalError: матрица целиком нулевая.
    """
    m = as_matrix(delta_matrix, name)
    sigma = svd(m, name).sigma
    if sigma.size == 0 or sigma[0] == 0.0:
        raise NumericalError(f"'{name}': zero update, spectral ratios are undefined")
    return SpectralSummary(
        matrix_name=name,
        sigma=sigma,
        spectral_norm=float(sigma[0]),
        spec_frob_ratio=float(sigma[0] / np.sqrt(np.sum(sigma**2))),
        effective_rank=effective_rank(sigma),
        top1pct_norm_ratio=top_fraction_norm_ratio(sigma, 1.0),
    )


def summarize_delta(delta: UpdateDelta) -> list[SpectralSummary]:
    """Сводки по каждой матрице внимания и MLP в дельте."""
    return [
        summarize(value, name)
        for name, value in delta.by_kind(ModuleKind.ATTENTION, ModuleKind.MLP).items()
    ]


def mean_summaries(deltas: UpdateDelta) -> SummaryAggregate:
    """Вычисляет среднее арифметическое каждой метрики по матрицам внимания и MLP.

    Исключения:
        ValueError: в дельте нет матриц внимания или MLP.
    """
    summaries = summarize_delta(deltas)
    if not summaries:
        raise ValueError("delta has no attention/MLP matrices to summarize")
    return SummaryAggregate(
        count=len(summaries),
        spectral_norm=float(np.mean([s.spectral_norm for s in summaries])),
        spec_frob_ratio=float(np.mean([s.spec_frob_ratio for s in summaries])),
        effective_rank=float(np.mean([s.effective_rank for s in summaries])),
        top1pct_norm_ratio=float(np.mean([s.top1pct_norm_ratio for s in summaries])),
    )


def summaries_frame(delta: UpdateDelta, step: int) -> pd.DataFrame:
    """Строки метрик по матрицам для одного чекпоинта (нулевые матрицы пропускаются)."""
    rows = []
    for name, value in delta.by_kind(ModuleKind.ATTENTION, ModuleKind.MLP).items():
        if not np.any(value):
            continue
        s = summarize(value, name)
        rows.append(
            {
                "step": step,
                "matrix_name": name,
                "sigma_max": s.spectral_norm,
                "spec_frob_ratio": s.spec_frob_ratio,
                "effective_rank": s.effective_rank,
                "top1pct_ratio": s.top1pct_norm_ratio,
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def scale_delta(delta: UpdateDelta, alpha: float) -> UpdateDelta:
    """Умножает каждый модуль на alpha."""
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    return delta.scaled(alpha)


def norm_match_scale(early: UpdateDelta, final: UpdateDelta, beta: float) -> UpdateDelta:
    """Масштабирует каждый ранний модуль к норме Фробениуса финального модуля.

    ΔW_scaled = ΔW_early * (1 + β (‖ΔW_final‖ - ‖ΔW_early‖) / ‖ΔW_early‖).
    При β = 1 норма каждого модуля равна норме финального.

    Аргументы:
        early: ранняя дельта.
        final: финальная дельта с теми же путями.
        beta: коэффициент масштабирования.

    Вернёт:
        Масштабированную раннюю дельту.

    Исключения:
        ArchitectureMismatchError: пути модулей различаются.
        NumericalError: ранний модуль нулевой или множитель неположителен.
    """
    check_same_architecture(early.entries, final.entries)
    scaled = {}
    for name, value in early.items():
        early_norm = frobenius_norm(np.atleast_2d(value))
        if early_norm == 0.0:
            raise NumericalError(f"module '{name}' has a zero early update")
        final_norm = frobenius_norm(np.atleast_2d(final[name]))
        factor = 1.0 + beta * (final_norm - early_norm) / early_norm
        if factor <= 0.0:
            raise NumericalError(
                f"module '{name}': scaling factor {factor:.4g} would flip the update direction"
            )
        scaled[name] = value * factor
    return UpdateDelta(scaled)


@dataclass(frozen=True)
class AlignmentSeries:
    """Усреднённое по k сходство подпространств дельты каждого шага с финальной дельтой."""

    steps: tuple[int, ...]
    k_max: int
    values: tuple[float, ...]
    per_k: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.per_k, columns=[f"k{k}" for k in range(1, self.k_max + 1)])
        frame.insert(0, "similarity", self.values)
        frame.insert(0, "step", self.steps)
        return frame


def alignment_trajectory(
        series: Sequence[UpdateDelta],
        k_max: int,
        steps: Sequence[int] | None = None,
        kinds: tuple[ModuleKind, ...] = (ModuleKind.ATTENTION, ModuleKind.MLP),
) -> AlignmentSeries:
    """Сходство левых сингулярных подпространств top-k с финальным шагом, среднее по k.

    Для каждого шага и каждого k из 1..k_max сходство равно среднему по матрицам
    среднего косинуса главных углов; затем значения усредняются по k.

    Аргументы:
        series: упорядоченные дельты, последняя считается финальной.
        k_max: наибольшее k.
        steps: номера шагов, по умолчанию 0..len(series)-1.
        kinds: виды учитываемых матриц.

    Вернёт:
        AlignmentSeries по всем шагам.

    Исключения:
        ValueError: меньше двух чекпоинтов или k_max больше наименьшей
            размерности матрицы.
    """
    if len(series) < 2:
        raise ValueError("alignment needs at least two checkpoints")
    if steps is None:
        steps = list(range(len(series)))
    if len(steps) != len(series):
        raise ValueError("steps and series differ in length")

    final = series[-1].by_kind(*kinds)
    if len(final) == 0:
        raise ValueError("no matrices of the requested kinds")
    min_dim = min(min(value.shape) for value in final.entries.values())
    if not 1 <= k_max <= min_dim:
        raise ValueError(f"k_max={k_max} exceeds the smallest matrix dimension {min_dim}")

    final_bases = {name: svd(value, name).u for name, value in final.items()}
    per_k = np.zeros((len(series), k_max))
    for row, delta in enumerate(series):
        bases = {name: svd(delta[name], name).u for name in final_bases}
        for k in range(1, k_max + 1):
            per_k[row, k - 1] = np.mean(
                [
                    subspace_similarity(bases[name][:, :k], final_bases[name][:, :k])
                    for name in final_bases
                ]
            )
    values = per_k.mean(axis=1)
    return AlignmentSeries(
        steps=tuple(int(s) for s in steps),
        k_max=k_max,
        values=tuple(float(v) for v in values),
        per_k=per_k,
    )


def pca_evr2(trajectory: Sequence[np.ndarray]) -> float:
    """Доля дисперсии траектории, объяснённая первыми двумя главными компонентами.

    Исключения:
        ValueError: меньше трёх точек или разные размерности.
        NumericalError: точки совсем не меняются.
    """
    if len(trajectory) < 3:
        raise ValueError("PCA explained-variance ratio needs at least 3 points")
    x = np.vstack([np.ravel(point).astype(np.float64) for point in trajectory])
    if not np.any(x - x.mean(axis=0)):
        raise NumericalError("trajectory has zero variance")
    pca = PCA().fit(x)
    return float(min(1.0, pca.explained_variance_ratio_[:2].sum()))


def leading_left_vector(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    return svd(m, name).u[:, 0]


def rank1_alignment(early: UpdateDelta, final: UpdateDelta) -> dict[str, float]:
    """|cos| между ведущими левыми сингулярными векторами ранних и финальных модулей."""
    check_same_architecture(early.entries, final.entries)
    return {
        name: abs(
            cosine_similarity(leading_left_vector(value, name), leading_left_vector(final[name], name))
        )
        for name, value in early.items()
        if np.any(value) and np.any(final[name])
    }


def rank1_trajectory_evr(series: Sequence[UpdateDelta], name: str) -> float:
    """PCA EVR ведущего левого сингулярного вектора одного модуля по чекпоинтам.

    Знаки векторов выравниваются по вектору финального чекпоинта, нулевые дельты
    пропускаются.
    """
    anchor = leading_left_vector(series[-1][name], name)
    points = []
    for delta in series:
        if not np.any(delta[name]):
            continue
        u1 = leading_left_vector(delta[name], name)
        points.append(u1 if u1 @ anchor >= 0 else -u1)
    return pca_evr2(points)


def layer_norms(delta: UpdateDelta) -> pd.DataFrame:
    """Норма Фробениуса по слоям и видам модулей (внимание и MLP)."""
    totals: dict[tuple[int, str], float] = {}
    for name, value in delta.items():
        path = parse_module_path(name)
        if path.layer is None:
            continue
        key = (path.layer, path.kind.value)
        totals[key] = totals.get(key, 0.0) + float(np.sum(value * value))
    rows = [
        {"layer": layer, "kind": kind, "frobenius_norm": math.sqrt(energy)}
        for (layer, kind), energy in sorted(totals.items())
    ]
    return pd.DataFrame(rows, columns=["layer", "kind", "frobenius_norm"])


def embedding_shift(
        base: Mapping[str, np.ndarray],
        trained: Mapping[str, np.ndarray],
        name: str = "token_embedding",
) -> float:
    """Среднее построчное косинусное сходство базовых и обученных строк эмбеддингов."""
    rows_base = np.asarray(base[name], dtype=np.float64)
    rows_trained = np.asarray(trained[name], dtype=np.float64)
    return float(
        np.mean([cosine_similarity(a, b) for a, b in zip(rows_base, rows_trained)])
    )


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 по отсортированным именам, формам и float64-байтам набора параметров."""
    digest = hashlib.sha256()
    for name in sorted(params):
        value = np.ascontiguousarray(params[name], dtype="<f8")
        digest.update(name.encode("utf-8"))
        digest.update(repr(value.shape).encode("ascii"))
        digest.update(value.tobytes())
    return digest.hexdigest()
