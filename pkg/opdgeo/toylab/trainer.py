"""Обучение игрушечных политик: supervised-подготовка, шаги OPD и RL, цикл прогона."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from ..config import (
    EFFOPD_ACCURACY_TOLERANCE,
    EffOpdConfig,
    ExperimentConfig,
    ModelConfig,
    SupervisedConfig,
    TrainConfig,
)
from ..errors import DivergenceError, TeacherConvergenceError
from ..geometry import UpdateDelta
from .metrics import accuracy, evaluate, kl_to_teacher
from .model import ToyPolicy
from .task import SyntheticTask

logger = logging.getLogger(__name__)

SUPERVISED_EVAL_EVERY = 10
VALIDATION_SEED_OFFSET = 104_729
METRIC_COLUMNS = [
    "step",
    "samples",
    "loss",
    "mean_reward",
    "accuracy",
    "kl_to_teacher",
    "delta_norm",
    "clamp_events",
]


@dataclass
class StepResult:
    """Градиент одного on-policy шага и его скалярная диагностика."""

    grads: dict[str, np.ndarray]
    loss: float
    mean_reward: float
    clamp_events: int = 0


@dataclass
class TrainRun:
    """Серия чекпоинтов и пошаговые метрики одного прогона обучения."""

    mode: str
    seed: int
    lr: float
    batch_size: int
    checkpoint_stride: int
    steps: int
    checkpoints: dict[int, dict[str, np.ndarray]]
    metrics: pd.DataFrame
    events: list = field(default_factory=list)
    clamp_events: int = 0

    @property
    def base(self) -> dict[str, np.ndarray]:
        return self.checkpoints[0]

    @property
    def final_step(self) -> int:
        return max(self.checkpoints)

    def delta(self, step_a: int = 0, step_b: int | None = None) -> UpdateDelta:
        """W_b − W_a между двумя записанными чекпоинтами (по умолчанию база и финал)."""
        step_b = self.final_step if step_b is None else step_b
        return UpdateDelta.from_params(self.checkpoints[step_b], self.checkpoints[step_a])


def make_policy(task: SyntheticTask, config: ModelConfig, seed: int) -> ToyPolicy:
    """Создаёт свежеинициализированную политику под размеры ``task``."""
    return ToyPolicy(task.vocab_size, task.context_len, config, seed=seed)


def _supervised_fit(
        policy: ToyPolicy,
        task: SyntheticTask,
        cfg: SupervisedConfig,
        target: float,
        max_steps: int,
        seed: int,
) -> tuple[float, int]:
    """Обучает Adam на правдоподобии ответов с teacher forcing до целевой точности.

    Батчи берутся только из промптов вне отложенной части.

    Аргументы:
        policy: обучаемая политика.
        task: задача.
        cfg: параметры supervised-обучения.
        target: целевая точность на отложенной части.
        max_steps: максимальное число шагов.
        seed: сид выборки батчей.

    Вернёт:
        Пару (итоговая точность на отложенной части, число шагов).
    """
    generator = torch.Generator().manual_seed(seed)
    heldout, pool = task.split(cfg.heldout_size)
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.lr)

    acc = accuracy(policy, task, heldout)
    step = 0
    while acc < target and step < max_steps:
        prompts = task.sample_prompts(cfg.batch_size, generator, pool)
        sequences = torch.cat([prompts, task.answers(prompts)], dim=1)
        optimizer.zero_grad()
        loss = -policy.answer_log_probs(sequences, task.prompt_len).mean()
        loss.backward()
        optimizer.step()
        step += 1

        if step % SUPERVISED_EVAL_EVERY == 0 or step == max_steps:
            acc = accuracy(policy, task, heldout)
            if step % (SUPERVISED_EVAL_EVERY * 50) == 0:
                logger.info("Step %d/%d — loss: %.4f, accuracy: %.4f", step, max_steps, loss.item(), acc)
    return acc, step


def make_base(task: SyntheticTask, model: ModelConfig, cfg: SupervisedConfig) -> ToyPolicy:
    """Создаёт общую базу W_Base: кратко обученную политику с частичной точностью.

    Обучение останавливается, как только точность на отложенной части достигает
    ``cfg.base_target_accuracy``, или через ``cfg.base_max_steps`` шагов. База ниже
    цели только логируется.
    """
    policy = make_policy(task, model, seed=cfg.seed)
    acc, steps = _supervised_fit(
        policy, task, cfg, cfg.base_target_accuracy, cfg.base_max_steps, seed=cfg.seed + 1
    )
    if acc < cfg.base_target_accuracy:
        logger.warning("base stopped at accuracy %.4f after %d steps", acc, steps)
    else:
        logger.info("base ready: accuracy %.4f after %d steps", acc, steps)
    return policy


def make_teacher(
        task: SyntheticTask,
        model: ModelConfig,
        cfg: SupervisedConfig,
        base: ToyPolicy | None = None,
) -> ToyPolicy:
    """Обучает учителя с учителем (от ``base``, если она задана) и замораживает его.

    Аргументы:
        task: задача.
        model: размеры модели.
        cfg: параметры supervised-обучения.
        base: необязательная стартовая политика.

    Вернёт:
        Замороженного учителя.

    Исключения:
        TeacherConvergenceError: точность на отложенной части осталась ниже цели
            после ``cfg.teacher_max_steps`` шагов.
    """
    if base is None:
        teacher = make_policy(task, model, seed=cfg.seed)
    else:
        teacher = base.clone_with(base.get_params())
    acc, steps = _supervised_fit(
        teacher, task, cfg, cfg.teacher_target_accuracy, cfg.teacher_max_steps, seed=cfg.seed + 2
    )
    if acc < cfg.teacher_target_accuracy:
        raise TeacherConvergenceError(acc, cfg.teacher_target_accuracy, steps)
    logger.info("teacher ready: accuracy %.4f after %d steps", acc, steps)
    teacher.requires_grad_(False)
    teacher.eval()
    return teacher


def _gradients(surrogate: torch.Tensor, policy: ToyPolicy) -> dict[str, np.ndarray]:
    names, params = zip(*policy.named_parameters())
    grads = torch.autograd.grad(surrogate, params, allow_unused=True)
    return {
        name: (np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy().copy())
        for name, p, g in zip(names, params, grads)
    }


def opd_surrogate(
        student: ToyPolicy,
        teacher: ToyPolicy,
        sequences: torch.Tensor,
        prompt_len: int,
        cap: float,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Суррогат OPD с нулевым дисконтом на фиксированных траекториях.

    Вес токена равен отсоединённому лог-отношению log π_θ(y_t|c) − log π*(y_t|c),
    обрезанному до ±cap. Градиент суррогата совпадает с градиентом обратного KL.

    Вернёт:
        Тройку (суррогат, обрезанные лог-отношения по токенам, число обрезанных токенов).
    """
    log_p = student.answer_log_probs(sequences, prompt_len)
    with torch.no_grad():
        log_q = teacher.answer_log_probs(sequences, prompt_len)
        ratio = log_p.detach() - log_q
        clamped = ratio.clamp(-cap, cap)
        events = int((ratio.abs() > cap).sum()) + int((~torch.isfinite(log_q)).sum())
        clamped = torch.nan_to_num(clamped, nan=cap, posinf=cap, neginf=-cap)
    surrogate = (clamped * log_p).sum(dim=1).mean()
    return surrogate, clamped, events


def opd_step(
        student: ToyPolicy,
        teacher: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
        generator: torch.Generator,
        cap: float,
) -> StepResult:
    """Вычисляет один градиент OPD на траекториях, только что сэмплированных студентом.

    Возвращаемый loss является средней по токенам выборочной оценкой обратного KL.
    Награда сэмплов сообщается, но в градиенте не участвует.
    """
    answers = student.generate(prompts, task.answer_len, generator=generator)
    sequences = torch.cat([prompts, answers], dim=1)
    surrogate, ratios, events = opd_surrogate(student, teacher, sequences, task.prompt_len, cap)
    return StepResult(
        grads=_gradients(surrogate, student),
        loss=float(ratios.mean()),
        mean_reward=float(task.reward(prompts, answers).mean()),
        clamp_events=events,
    )


def rl_surrogate(
        student: ToyPolicy,
        sequences: torch.Tensor,
        prompt_len: int,
        rewards: torch.Tensor,
) -> torch.Tensor:
    """Суррогат REINFORCE с бейзлайном по среднему батча, применённый к каждому токену ответа."""
    advantages = rewards - rewards.mean()
    log_p = student.answer_log_probs(sequences, prompt_len).sum(dim=1)
    return -(advantages * log_p).mean()


def rl_step(
        student: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
        generator: torch.Generator,
) -> StepResult:
    """Вычисляет один policy-gradient шаг на траекториях, только что сэмплированных студентом."""
    answers = student.generate(prompts, task.answer_len, generator=generator)
    sequences = torch.cat([prompts, answers], dim=1)
    rewards = task.reward(prompts, answers)
    surrogate = rl_surrogate(student, sequences, task.prompt_len, rewards)
    mean_reward = float(rewards.mean())
    return StepResult(
        grads=_gradients(surrogate, student),
        loss=-mean_reward,
        mean_reward=mean_reward,
    )


class ToyTrainer:
    """Обычный градиентный спуск по игрушечной политике, один on-policy батч на шаг."""

    def __init__(
            self,
            mode: str,
            student: ToyPolicy,
            task: SyntheticTask,
            cfg: TrainConfig,
            seed: int,
            teacher: ToyPolicy | None = None,
    ) -> None:
        """Инициализирует тренер.

        Аргументы:
            mode: "opd" или "rl" (EffOPD управляет тренером "opd").
            student: политика, обновляемая на месте.
            task: задача с промптами и наградой.
            cfg: число шагов, скорость обучения, размер батча и порог обрезки.
            seed: сид потока сэмплирования обучения.
            teacher: замороженный учитель, обязателен для OPD.
        """
        if mode not in ("opd", "rl"):
            raise ValueError(f"unknown training mode '{mode}'")
        if mode == "opd" and teacher is None:
            raise ValueError("OPD training needs a teacher")
        self.mode = mode
        self.student = student
        self.task = task
        self.cfg = cfg
        self.teacher = teacher
        self.generator = torch.Generator().manual_seed(seed)
        self.pool = task.training_pool(cfg.eval_size)
        self.step_count = 0
        self.last: StepResult | None = None

    def step(self) -> StepResult:
        """Сэмплирует батч, вычисляет градиент и применяет θ ← θ − η·g.

        Исключения:
            DivergenceError: loss или градиент не конечны.
        """
        prompts = self.task.sample_prompts(self.cfg.batch_size, self.generator, self.pool)
        if self.mode == "opd":
            result = opd_step(
                self.student,
                self.teacher,
                self.task,
                prompts,
                self.generator,
                self.cfg.log_ratio_cap,
            )
        else:
            result = rl_step(self.student, self.task, prompts, self.generator)

        step = self.step_count + 1
        if not np.isfinite(result.loss):
            raise DivergenceError(step, f"loss is {result.loss}")
        bad = [name for name, g in result.grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise DivergenceError(step, f"non-finite gradient in {', '.join(bad)}")

        with torch.no_grad():
            for name, p in self.student.named_parameters():
                p.sub_(self.cfg.lr * torch.as_tensor(result.grads[name]))
        self.step_count = step
        self.last = result
        return result

    def get_params(self) -> dict[str, np.ndarray]:
        return self.student.get_params()

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.student.set_params(params)


class PolicyValidator:
    """Лёгкая валидационная оценка V(W) на фиксированном наборе промптов.

    Каждый вызов строит независимую политику и декодирует своим генератором, поэтому
    оценка не расходует поток сэмплирования обучения.
    """

    def __init__(
            self,
            template: ToyPolicy,
            task: SyntheticTask,
            prompts: torch.Tensor,
            score: str = "accuracy",
            teacher: ToyPolicy | None = None,
            seed: int = 0,
    ) -> None:
        if score == "neg_kl" and teacher is None:
            raise ValueError("neg_kl validation needs a teacher")
        self.template = template
        self.task = task
        self.prompts = prompts
        self.score = score
        self.teacher = teacher
        self.seed = seed

    def __call__(self, params: dict[str, np.ndarray]) -> float:
        bad = [name for name, value in params.items() if not np.all(np.isfinite(value))]
        if bad:
            raise FloatingPointError(f"non-finite parameters in {', '.join(bad)}")
        policy = self.template.clone_with(params)
        if self.score == "accuracy":
            value = accuracy(policy, self.task, self.prompts)
        elif self.score == "reward":
            generator = torch.Generator().manual_seed(self.seed)
            value = accuracy(policy, self.task, self.prompts, greedy=False, generator=generator)
        else:
            value = -kl_to_teacher(policy, self.teacher, self.task, self.prompts, seed=self.seed)
        if not np.isfinite(value):
            raise FloatingPointError(f"validation score is {value}")
        return float(value)


def make_validator(
        cfg: ExperimentConfig,
        task: SyntheticTask,
        template: ToyPolicy,
        seed: int,
        teacher: ToyPolicy | None = None,
        effopd: EffOpdConfig | None = None,
) -> PolicyValidator:
    """Создаёт валидатор на ``validation_size`` промптах вне отложенной тестовой части."""
    effopd = effopd or cfg.effopd
    prompts = task.validation_prompts(
        cfg.train.eval_size, effopd.validation_size, seed + VALIDATION_SEED_OFFSET
    )
    return PolicyValidator(template, task, prompts, effopd.score, teacher, seed=seed)


class _Recorder:
    """Строки метрик и чекпоинты с шагом stride для работающего тренера."""

    def __init__(
            self,
            trainer: ToyTrainer,
            eval_prompts: torch.Tensor,
            stride: int,
            total_steps: int,
            log_every: int,
    ) -> None:
        self.trainer = trainer
        self.eval_prompts = eval_prompts
        self.stride = stride
        self.total_steps = total_steps
        self.log_every = log_every
        self.base = trainer.get_params()
        self.checkpoints: dict[int, dict[str, np.ndarray]] = {0: self.base}
        self.rows: list[dict] = []
        self.clamp_events = 0
        self._row(0, None)

    def _row(self, step: int, result: StepResult | None) -> None:
        trainer = self.trainer
        current = trainer.get_params()
        measured = evaluate(trainer.student, trainer.task, self.eval_prompts, teacher=trainer.teacher)
        self.rows.append(
            {
                "step": step,
                "samples": step * trainer.cfg.batch_size,
                "loss": np.nan if result is None else result.loss,
                "mean_reward": np.nan if result is None else result.mean_reward,
                "accuracy": measured.accuracy,
                "kl_to_teacher": (
                    np.nan if measured.kl_to_teacher is None else measured.kl_to_teacher
                ),
                "delta_norm": UpdateDelta.from_params(current, self.base).frobenius_norm(),
                "clamp_events": 0 if result is None else result.clamp_events,
            }
        )
        if result is not None:
            self.clamp_events += result.clamp_events

    def __call__(self, step: int, result: StepResult) -> None:
        self._row(step, result)
        if step % self.stride == 0 or step == self.total_steps:
            self.checkpoints[step] = self.trainer.get_params()
        if self.log_every and step % self.log_every == 0:
            row = self.rows[-1]
            logger.info(
                "Step %d/%d — loss: %.4f, accuracy: %.4f, |ΔW|: %.4f",
                step,
                self.total_steps,
                row["loss"],
                row["accuracy"],
                row["delta_norm"],
            )

    def refresh_checkpoint(self, step: int) -> None:
        """Перезаписывает ``step`` после замены параметров тренера на месте."""
        current = self.trainer.get_params()
        if step in self.checkpoints:
            self.checkpoints[step] = current
        trainer = self.trainer
        measured = evaluate(trainer.student, trainer.task, self.eval_prompts, teacher=trainer.teacher)
        row = self.rows[-1]
        row["accuracy"] = measured.accuracy
        if measured.kl_to_teacher is not None:
            row["kl_to_teacher"] = measured.kl_to_teacher
        row["delta_norm"] = UpdateDelta.from_params(current, self.base).frobenius_norm()

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)


def train(
        cfg: ExperimentConfig,
        seed: int,
        base: ToyPolicy,
        teacher: ToyPolicy | None = None,
        mode: str | None = None,
) -> TrainRun:
    """Выполняет ``cfg.train.steps`` шагов OPD, RL или EffOPD от копии ``base``.

    Аргументы:
        cfg: конфигурация эксперимента.
        seed: сид потока сэмплирования обучения.
        base: общая инициализация, не изменяется.
        teacher: замороженный учитель (обязателен для OPD и EffOPD, для RL даёт столбец KL).
        mode: переопределяет ``cfg.mode``.

    Вернёт:
        TrainRun, чей чекпоинт шага 0 в точности равен ``base``.

    Исключения:
        DivergenceError: шаг дал неконечный loss или градиент.
    """
    from ..effopd import run_effopd

    mode = mode or cfg.mode
    task = SyntheticTask(cfg.task)
    student = base.clone_with(base.get_params())
    trainer = ToyTrainer("rl" if mode == "rl" else "opd", student, task, cfg.train, seed, teacher)
    recorder = _Recorder(
        trainer,
        task.eval_prompts(cfg.train.eval_size),
        cfg.train.checkpoint_stride,
        cfg.train.steps,
        cfg.train.log_every,
    )

    events = []
    if mode == "effopd":
        validator = make_validator(cfg, task, base, seed, teacher)
        effopd_run = run_effopd(
            trainer,
            cfg.train.steps,
            validator,
            max_k=cfg.effopd.max_k,
            on_step=lambda step: recorder(step, trainer.last),
            on_install=recorder.refresh_checkpoint,
        )
        events = effopd_run.events
    else:
        for step in range(1, cfg.train.steps + 1):
            recorder(step, trainer.step())

    logger.info(
        "%s run (seed %d) finished: %d steps, %d clamp events",
        mode,
        seed,
        trainer.step_count,
        recorder.clamp_events,
    )
    return TrainRun(
        mode=mode,
        seed=seed,
        lr=cfg.train.lr,
        batch_size=cfg.train.batch_size,
        checkpoint_stride=cfg.train.checkpoint_stride,
        steps=trainer.step_count,
        checkpoints=recorder.checkpoints,
        metrics=recorder.frame(),
        events=events,
        clamp_events=recorder.clamp_events,
    )


def norm_to_reach(metrics: pd.DataFrame, tau: float) -> float:
    """‖ΔW‖_F на первом шаге с точностью не ниже ``tau``; NaN, если порог не достигнут."""
    reached = metrics[metrics["accuracy"] >= tau]
    if reached.empty:
        return float("nan")
    return float(reached.iloc[0]["delta_norm"])


def steps_to_reach(metrics: pd.DataFrame, tau: float) -> float:
    """Первый шаг с точностью не ниже ``tau``; NaN, если порог не достигнут."""
    reached = metrics[metrics["accuracy"] >= tau]
    if reached.empty:
        return float("nan")
    return float(reached.iloc[0]["step"])


def speedup_to_target(
        vanilla: pd.DataFrame,
        accelerated: pd.DataFrame,
        tolerance: float = EFFOPD_ACCURACY_TOLERANCE,
) -> dict[str, float]:
    """Шаги до финальной точности ванильного прогона (минус ``tolerance``) и ускорение.

    Аргументы:
        vanilla: метрики ванильного OPD-прогона.
        accelerated: метрики прогона EffOPD из той же базы.
        tolerance: допуск по точности.

    Вернёт:
        Словарь target_accuracy, vanilla_steps, effopd_steps, speedup; speedup равен
        NaN, если какой-либо прогон не достиг цели или цель достигнута на шаге 0.
    """
    target = float(vanilla["accuracy"].iloc[-1]) - tolerance
    vanilla_steps = steps_to_reach(vanilla, target)
    effopd_steps = steps_to_reach(accelerated, target)
    speedup = (
        vanilla_steps / effopd_steps
        if effopd_steps > 0 and not math.isnan(vanilla_steps)
        else float("nan")
    )
    return {
        "target_accuracy": target,
        "vanilla_steps": vanilla_steps,
        "effopd_steps": effopd_steps,
        "speedup": speedup,
    }


def alpha_sweep(
        base: dict[str, np.ndarray],
        delta: UpdateDelta,
        alphas: list[float] | tuple[float, ...],
        task: SyntheticTask,
        template: ToyPolicy,
        eval_prompts: torch.Tensor,
) -> pd.DataFrame:
    """Точность W_Base + αΔW для каждого α вместе с нормой масштабированного обновления."""
    rows = []
    norm = delta.frobenius_norm()
    for alpha in alphas:
        policy = template.clone_with(delta.scaled(alpha).apply_to(base))
        rows.append(
            {
                "alpha": float(alpha),
                "update_norm": abs(alpha) * norm,
                "accuracy": accuracy(policy, task, eval_prompts),
            }
        )
    return pd.DataFrame(rows, columns=["alpha", "update_norm", "accuracy"])
