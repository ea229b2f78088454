"""Оценка точности и KL до учителя для игрушечных политик."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import ToyPolicy
from .task import SyntheticTask

KL_SAMPLE_SEED = 7_919


@dataclass(frozen=True)
class EvalResult:
    """Точность по точному совпадению и, при заданном учителе, средний по токенам KL(π_θ ‖ π*)."""

    accuracy: float
    kl_to_teacher: float | None = None


@torch.no_grad()
def accuracy(
        policy: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
        greedy: bool = True,
        generator: torch.Generator | None = None,
) -> float:
    """Доля декодированных ответов, точно совпавших с правильными."""
    answers = policy.generate(prompts, task.answer_len, generator=generator, greedy=greedy)
    return float(task.reward(prompts, answers).mean())


@torch.no_grad()
def token_kl(
        student: ToyPolicy,
        teacher: ToyPolicy,
        sequences: torch.Tensor,
        prompt_len: int,
) -> torch.Tensor:
    """KL(π_θ(·|c) ‖ π*(·|c)) на каждой позиции ответа, (batch, answer_len)."""
    log_p = torch.log_softmax(student.answer_logits(sequences, prompt_len), dim=-1)
    log_q = torch.log_softmax(teacher.answer_logits(sequences, prompt_len), dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


@torch.no_grad()
def kl_to_teacher(
        student: ToyPolicy,
        teacher: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
        seed: int = KL_SAMPLE_SEED,
) -> float:
    """Средний по токенам обратный KL на контекстах, сэмплированных самим студентом."""
    generator = torch.Generator().manual_seed(seed)
    answers = student.generate(prompts, task.answer_len, generator=generator)
    sequences = torch.cat([prompts, answers], dim=1)
    return float(token_kl(student, teacher, sequences, task.prompt_len).mean())


def evaluate(
        policy: ToyPolicy,
        task: SyntheticTask,
        prompts: torch.Tensor,
        teacher: ToyPolicy | None = None,
        greedy: bool = True,
        generator: torch.Generator | None = None,
) -> EvalResult:
    """Вычисляет точность (по умолчанию жадную) и, при заданном учителе, on-policy KL.

    Аргументы:
        policy: оцениваемая политика.
        task: задача с правильными ответами и наградой.
        prompts: оценочные промпты, выбранные независимо от обучения.
        teacher: необязательный учитель для столбца KL.
        greedy: жадное декодирование, иначе сэмплирование из ``generator``.
        generator: генератор для нежадного декодирования.

    Вернёт:
        EvalResult с точностью и, если задан учитель, KL.
    """
    acc = accuracy(policy, task, prompts, greedy=greedy, generator=generator)
    kl = None if teacher is None else kl_to_teacher(policy, teacher, task, prompts)
    return EvalResult(accuracy=acc, kl_to_teacher=kl)
