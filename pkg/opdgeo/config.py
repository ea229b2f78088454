"""Конфигурация эксперимента: значения по умолчанию, замороженные датаклассы и строгая загрузка JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final

from .errors import ConfigError

DEFAULT_OUTPUT_ROOT: Final[Path] = Path("runs")
OUTPUT_ENV_VAR: Final[str] = "OPDGEO_OUT"

DEFAULT_SEED: Final[int] = 42
DEFAULT_MODE: Final[str] = "opd"
MODES: Final[tuple[str, ...]] = ("opd", "rl", "effopd")

# task
DEFAULT_MODULUS: Final[int] = 7
DEFAULT_N_OPERANDS: Final[int] = 3
DEFAULT_VOCAB_SIZE: Final[int] = 16

# model
DEFAULT_HIDDEN_DIM: Final[int] = 32
DEFAULT_MLP_DIM: Final[int] = 64
DEFAULT_N_LAYERS: Final[int] = 8
DEFAULT_INIT_SCALE: Final[float] = 0.3

# OPD / RL training, plain SGD
DEFAULT_STEPS: Final[int] = 200
DEFAULT_LR: Final[float] = 0.5
DEFAULT_BATCH_SIZE: Final[int] = 64
DEFAULT_CHECKPOINT_STRIDE: Final[int] = 10
DEFAULT_LOG_RATIO_CAP: Final[float] = 20.0
DEFAULT_EVAL_SIZE: Final[int] = 64
DEFAULT_LOG_EVERY: Final[int] = 20

# supervised preparation of the shared base and of the teacher (Adam)
DEFAULT_SUPERVISED_LR: Final[float] = 3e-3
DEFAULT_SUPERVISED_BATCH_SIZE: Final[int] = 128
DEFAULT_BASE_TARGET_ACCURACY: Final[float] = 0.3
DEFAULT_BASE_MAX_STEPS: Final[int] = 2000
DEFAULT_TEACHER_TARGET_ACCURACY: Final[float] = 0.95
DEFAULT_TEACHER_MAX_STEPS: Final[int] = 6000
DEFAULT_HELDOUT_SIZE: Final[int] = 64

# EffOPD
DEFAULT_VALIDATION_SIZE: Final[int] = 50
DEFAULT_MAX_EXTRAPOLATION_K: Final[int] = 5
EFFOPD_ACCURACY_TOLERANCE: Final[float] = 0.02
VALIDATION_SCORES: Final[tuple[str, ...]] = ("accuracy", "reward", "neg_kl")

# quadratic theory
DEFAULT_QUAD_DIM: Final[int] = 32
DEFAULT_QUAD_INSTANCES: Final[int] = 50
DEFAULT_QUAD_STEPS: Final[tuple[int, ...]] = (1, 10, 100, 1000)
DEFAULT_LOCKIN_INSTANCES: Final[int] = 100
DEFAULT_LOCKIN_K: Final[int] = 4
DEFAULT_LOCKIN_EPSILON: Final[float] = 0.05
DEFAULT_LOCKIN_GAP: Final[float] = 10.0
DEFAULT_MC_SAMPLES: Final[int] = 20_000
DEFAULT_MC_SHARDS: Final[int] = 8

# analyses
ANALYSES: Final[tuple[str, ...]] = (
    "metrics",
    "align",
    "truncate",
    "scale",
    "sweep",
    "quadsim",
)
DEFAULT_K_MAX: Final[int] = 20
DEFAULT_WINDOW_RADIUS: Final[int] = 1
DEFAULT_EVAL_REPS: Final[int] = 4
DEFAULT_TRUNCATE_PERCENTS: Final[tuple[float, ...]] = (1.0, 5.0, 10.0, 25.0, 50.0, 100.0)
DEFAULT_ALPHAS: Final[tuple[float, ...]] = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_BETAS: Final[tuple[float, ...]] = (0.0, 0.4, 0.8, 1.2, 1.6)
DEFAULT_EARLY_FRACTION: Final[float] = 0.1
DEFAULT_TAU: Final[float] = 0.8


@dataclass(frozen=True)
class TaskConfig:
    """Синтетическая задача модульной арифметики."""

    modulus: int = DEFAULT_MODULUS
    n_operands: int = DEFAULT_N_OPERANDS
    operators: tuple[str, ...] = ("+",)
    vocab_size: int = DEFAULT_VOCAB_SIZE
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    """Размеры слоистой игрушечной политики."""

    hidden_dim: int = DEFAULT_HIDDEN_DIM
    mlp_dim: int = DEFAULT_MLP_DIM
    n_layers: int = DEFAULT_N_LAYERS
    tied_output: bool = True
    init_scale: float = DEFAULT_INIT_SCALE


@dataclass(frozen=True)
class TrainConfig:
    """Цикл on-policy обучения (OPD или RL), обычный градиентный спуск."""

    steps: int = DEFAULT_STEPS
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH_SIZE
    checkpoint_stride: int = DEFAULT_CHECKPOINT_STRIDE
    log_ratio_cap: float = DEFAULT_LOG_RATIO_CAP
    eval_size: int = DEFAULT_EVAL_SIZE
    log_every: int = DEFAULT_LOG_EVERY


@dataclass(frozen=True)
class SupervisedConfig:
    """Supervised-подготовка общей базы и учителя."""

    lr: float = DEFAULT_SUPERVISED_LR
    batch_size: int = DEFAULT_SUPERVISED_BATCH_SIZE
    base_target_accuracy: float = DEFAULT_BASE_TARGET_ACCURACY
    base_max_steps: int = DEFAULT_BASE_MAX_STEPS
    teacher_target_accuracy: float = DEFAULT_TEACHER_TARGET_ACCURACY
    teacher_max_steps: int = DEFAULT_TEACHER_MAX_STEPS
    heldout_size: int = DEFAULT_HELDOUT_SIZE
    seed: int = 0


@dataclass(frozen=True)
class EffOpdConfig:
    """Планировщик экстраполяции."""

    validation_size: int = DEFAULT_VALIDATION_SIZE
    max_k: int = DEFAULT_MAX_EXTRAPOLATION_K
    score: str = "accuracy"


@dataclass(frozen=True)
class QuadsimConfig:
    """Рандомизированные проверки квадратичной теории."""

    dim: int = DEFAULT_QUAD_DIM
    instances: int = DEFAULT_QUAD_INSTANCES
    steps: tuple[int, ...] = DEFAULT_QUAD_STEPS
    eta_fraction: float = 1.0
    lockin_instances: int = DEFAULT_LOCKIN_INSTANCES
    lockin_k: int = DEFAULT_LOCKIN_K
    lockin_epsilon: float = DEFAULT_LOCKIN_EPSILON
    lockin_gap: float = DEFAULT_LOCKIN_GAP
    coupling_deltas: tuple[float, ...] = (0.01, 0.1, 0.5)
    mc_samples: int = DEFAULT_MC_SAMPLES
    mc_shards: int = DEFAULT_MC_SHARDS
    reward_prob: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class AnalysisConfig:
    """Набор анализов и их параметры для `analyze`."""

    selections: tuple[str, ...] = ("metrics", "align")
    k_max: int = DEFAULT_K_MAX
    window_radius: int = DEFAULT_WINDOW_RADIUS
    eval_reps: int = DEFAULT_EVAL_REPS
    truncate_percents: tuple[float, ...] = DEFAULT_TRUNCATE_PERCENTS
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    betas: tuple[float, ...] = DEFAULT_BETAS
    early_fraction: float = DEFAULT_EARLY_FRACTION
    tau: float = DEFAULT_TAU


@dataclass(frozen=True)
class ExperimentConfig:
    """Корневая конфигурация одного эксперимента (возможно, с несколькими сидами)."""

    mode: str = DEFAULT_MODE
    seeds: tuple[int, ...] = (DEFAULT_SEED,)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    effopd: EffOpdConfig = field(default_factory=EffOpdConfig)
    quadsim: QuadsimConfig = field(default_factory=QuadsimConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str | None = None
    jobs: int = 1

    def to_dict(self) -> dict[str, Any]:
        """Итоговая конфигурация в виде простых JSON-совместимых данных."""
        return _to_plain(dataclasses.asdict(self))


def _to_plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(item) for item in value]
    return value


def config_digest(cfg: ExperimentConfig) -> str:
    """SHA-256 канонической JSON-формы итоговой конфигурации."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_output_root(flag: Path | None, cfg: ExperimentConfig | None = None) -> Path:
    """Выбирает корень вывода: флаг --out, затем конфиг, затем OPDGEO_OUT, затем значение по умолчанию."""
    if flag is not None:
        return flag
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    env_value = os.environ.get(OUTPUT_ENV_VAR)
    if env_value:
        return Path(env_value)
    return DEFAULT_OUTPUT_ROOT


def prompt_count(task: TaskConfig) -> int:
    """Размер пространства промптов: значения операндов, умноженные на выбор операторов."""
    return task.modulus ** task.n_operands * len(task.operators) ** max(task.n_operands - 1, 0)


def _line_of(text: str, key: str) -> int:
    """Номер строки (с 1) первого вхождения JSON-ключа, 0 если ключ не найден."""
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return 0


def _type_name(default: Any) -> str:
    if isinstance(default, bool):
        return "a boolean"
    if isinstance(default, int):
        return "an integer"
    if isinstance(default, float):
        return "a number"
    return "a string"


def _check_scalar(value: Any, default: Any, name: str, source: str, text: str) -> Any:
    """Отклоняет JSON-значение, тип которого не совпадает с типом значения по умолчанию.

    Целые числа принимаются и приводятся там, где ожидается float. Булевы значения
    числами не считаются.

    Исключения:
        ConfigError: тип значения не подходит, в сообщении указаны файл и строка.
    """
    if default is None:
        ok = value is None or isinstance(value, str)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        expected = "a string or null" if default is None else _type_name(default)
        raise ConfigError(f"{source}:{_line_of(text, name)}: '{name}' must be {expected}")
    return float(value) if isinstance(default, float) else value


def _build(cls: type, data: Any, source: str, text: str, prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:{_line_of(text, prefix) or 1}: '{prefix}' must be an object")

    known = {item.name: item for item in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            line = _line_of(text, key)
            raise ConfigError(f"{source}:{line}: unknown key '{prefix + '.' if prefix else ''}{key}'")

    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, source, text, name)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{source}:{_line_of(text, name)}: '{name}' must be a list")
            kwargs[name] = tuple(
                _check_scalar(item, default[0], name, source, text) if default else item
                for item in value
            )
        else:
            kwargs[name] = _check_scalar(value, default, name, source, text)
    return cls(**kwargs)


def validate(cfg: ExperimentConfig, source: str = "<config>", text: str = "") -> ExperimentConfig:
    """Проверяет диапазоны значений, которые датаклассы выразить не могут.

    Аргументы:
        cfg: разобранная конфигурация.
        source: имя источника для сообщений об ошибках.
        text: исходный JSON-текст для поиска номера строки.

    Вернёт:
        Ту же конфигурацию.

    Исключения:
        ConfigError: значение вне допустимого диапазона.
    """
    prompts = prompt_count(cfg.task)
    checks: list[tuple[bool, str, str]] = [
        (cfg.mode in MODES, "mode", f"mode must be one of {MODES}"),
        (len(cfg.seeds) > 0, "seeds", "at least one seed is required"),
        (cfg.train.steps >= 0, "steps", "steps must be >= 0"),
        (cfg.train.lr > 0, "lr", "lr must be > 0"),
        (cfg.train.batch_size >= 1, "batch_size", "batch_size must be >= 1"),
        (cfg.train.checkpoint_stride >= 1, "checkpoint_stride", "checkpoint_stride must be >= 1"),
        (cfg.task.modulus >= 2, "modulus", "modulus must be >= 2"),
        (cfg.task.n_operands >= 1, "n_operands", "n_operands must be >= 1"),
        (
            set(cfg.task.operators) <= {"+", "*"} and len(cfg.task.operators) > 0,
            "operators",
            "operators must be a non-empty subset of ['+', '*']",
        ),
        (
            cfg.task.vocab_size >= cfg.task.modulus + 3,
            "vocab_size",
            "vocab_size must hold the values plus '+', '*', '=' tokens",
        ),
        (
            0 < cfg.train.eval_size < prompts,
            "eval_size",
            f"eval_size must leave training prompts out of the {prompts} the task has",
        ),
        (
            0 < cfg.supervised.heldout_size < prompts,
            "heldout_size",
            f"heldout_size must leave training prompts out of the {prompts} the task has",
        ),
        (cfg.effopd.validation_size >= 1, "validation_size", "validation_size must be >= 1"),
        (cfg.model.n_layers >= 1, "n_layers", "n_layers must be >= 1"),
        (cfg.effopd.score in VALIDATION_SCORES, "score", f"score must be one of {VALIDATION_SCORES}"),
        (cfg.effopd.max_k >= 1, "max_k", "max_k must be >= 1"),
        (
            set(cfg.analysis.selections) <= set(ANALYSES),
            "selections",
            f"selections must be a subset of {ANALYSES}",
        ),
        (cfg.jobs >= 1, "jobs", "jobs must be >= 1"),
    ]
    for ok, key, message in checks:
        if not ok:
            raise ConfigError(f"{source}:{_line_of(text, key)}: {message}")
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Разбирает JSON-документ в ExperimentConfig.

    Аргументы:
        text: JSON-текст.
        source: имя, к которому привязываются сообщения об ошибках.

    Вернёт:
        Проверенную конфигурацию.

    Исключения:
        ConfigError: синтаксическая ошибка, неизвестный ключ, неверный тип или
            значение вне диапазона.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: {exc.msg}") from exc

    try:
        cfg = _build(ExperimentConfig, data, source, text, "")
    except TypeError as exc:
        raise ConfigError(f"{source}:1: {exc}") from exc
    return validate(cfg, source, text)


def load_config(path: Path) -> ExperimentConfig:
    """Читает и разбирает файл конфигурации."""
    if not path.is_file():
        raise ConfigError(f"{path}:0: config file not found")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
