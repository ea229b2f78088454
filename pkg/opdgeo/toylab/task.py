"""Синтетическая задача модульной арифметики с проверяемой наградой 0/1.

Промпт имеет вид ``x1 op1 x2 op2 ... xn =``, ответ является цепочкой промежуточных
результатов ``(x1 op1 x2) mod m, ((x1 op1 x2) op2 x3) mod m, ...``. При одном
операнде ответ повторяет его.
"""

from __future__ import annotations

import itertools

import torch

from ..config import TaskConfig

EVAL_SEED_OFFSET = 1_000_003


class SyntheticTask:
    """Распределение промптов, правильные ответы и награда игрушечной задачи."""

    def __init__(self, config: TaskConfig) -> None:
        """Инициализирует раскладку токенов.

        Аргументы:
            config: параметры задачи.
        """
        self.config = config
        self.modulus = config.modulus
        self.plus_token = config.modulus
        self.times_token = config.modulus + 1
        self.equals_token = config.modulus + 2
        self.operator_tokens = [
            self.plus_token if op == "+" else self.times_token for op in config.operators
        ]

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def prompt_len(self) -> int:
        return 2 * self.config.n_operands

    @property
    def answer_len(self) -> int:
        return max(1, self.config.n_operands - 1)

    @property
    def context_len(self) -> int:
        return self.prompt_len + self.answer_len

    def _assemble(self, operands: torch.Tensor, operators: torch.Tensor) -> torch.Tensor:
        batch, n = operands.shape
        prompts = torch.empty((batch, 2 * n), dtype=torch.long)
        prompts[:, 0::2][:, :n] = operands
        if n > 1:
            prompts[:, 1 : 2 * n - 1 : 2] = operators
        prompts[:, -1] = self.equals_token
        return prompts

    def sample_prompts(
            self, n: int, generator: torch.Generator, pool: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Равномерно выбирает n промптов из ``pool``, если он задан, иначе из всех промптов."""
        if pool is not None:
            return pool[torch.randint(0, pool.shape[0], (n,), generator=generator)]
        k = self.config.n_operands
        operands = torch.randint(0, self.modulus, (n, k), generator=generator)
        choice = torch.randint(0, len(self.operator_tokens), (n, max(k - 1, 0)), generator=generator)
        operators = torch.tensor(self.operator_tokens, dtype=torch.long)[choice]
        return self._assemble(operands, operators)

    def all_prompts(self) -> torch.Tensor:
        """Все различные промпты в лексикографическом порядке."""
        k = self.config.n_operands
        operand_grid = list(itertools.product(range(self.modulus), repeat=k))
        operator_grid = list(itertools.product(self.operator_tokens, repeat=k - 1))
        rows = [(ops, opr) for ops in operand_grid for opr in operator_grid]
        operands = torch.tensor([r[0] for r in rows], dtype=torch.long)
        operators = torch.tensor([r[1] for r in rows], dtype=torch.long).reshape(len(rows), k - 1)
        return self._assemble(operands, operators)

    def num_prompts(self) -> int:
        return self.modulus**self.config.n_operands * len(self.operator_tokens) ** (
            self.config.n_operands - 1
        )

    def split(self, eval_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Делит все промпты на непересекающиеся части: отложенную оценочную и остальной пул.

        Перестановка зависит только от сида задачи и не зависит от сидов обучения.

        Аргументы:
            eval_size: размер отложенной части.

        Вернёт:
            Пару (отложенные промпты, остальной пул).
        """
        prompts = self.all_prompts()
        generator = torch.Generator().manual_seed(self.config.seed + EVAL_SEED_OFFSET)
        order = torch.randperm(prompts.shape[0], generator=generator)
        size = min(eval_size, prompts.shape[0])
        return prompts[order[:size]], prompts[order[size:]]

    def eval_prompts(self, size: int) -> torch.Tensor:
        """Отложенные оценочные промпты без повторений."""
        return self.split(size)[0]

    def training_pool(self, heldout_size: int) -> torch.Tensor:
        """Все промпты вне отложенной части размера ``heldout_size``."""
        return self.split(heldout_size)[1]

    def validation_prompts(self, eval_size: int, size: int, seed: int) -> torch.Tensor:
        """Выбирает ``size`` промптов вне отложенной части, без повторений.

        Аргументы:
            eval_size: размер отложенной части.
            size: число промптов.
            seed: сид выборки.

        Исключения:
            ValueError: пул вне отложенной части слишком мал.
        """
        pool = self.training_pool(eval_size)
        if pool.shape[0] < size:
            raise ValueError(
                f"only {pool.shape[0]} prompts outside the held-out set, {size} requested"
            )
        generator = torch.Generator().manual_seed(seed)
        return pool[torch.randperm(pool.shape[0], generator=generator)[:size]]

    def answers(self, prompts: torch.Tensor) -> torch.Tensor:
        """Токены правильного ответа для батча промптов."""
        k = self.config.n_operands
        operands = prompts[:, 0 : 2 * k : 2]
        if k == 1:
            return operands.clone()
        operators = prompts[:, 1 : 2 * k - 1 : 2]
        running = operands[:, 0]
        steps = []
        for i in range(1, k):
            added = (running + operands[:, i]) % self.modulus
            multiplied = (running * operands[:, i]) % self.modulus
            running = torch.where(operators[:, i - 1] == self.plus_token, added, multiplied)
            steps.append(running)
        return torch.stack(steps, dim=1)

    def reward(self, prompts: torch.Tensor, answers: torch.Tensor) -> torch.Tensor:
        """Награда за точное совпадение, 0 или 1, в float64."""
        return (answers == self.answers(prompts)).all(dim=1).to(torch.float64)
