"""Слоистая игрушечная политика над словарём токенов."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from ..config import ModelConfig
from ..geometry import check_same_architecture


class Block(nn.Module):
    """Остаточный блок: причинное усреднение через ``mix``, затем tanh-MLP."""

    def __init__(
            self,
            hidden_dim: int,
            mlp_dim: int,
            n_layers: int,
            generator: torch.Generator,
    ) -> None:
        super().__init__()
        depth_gain = 1.0 / math.sqrt(2 * n_layers)
        self.mix = nn.Parameter(
            torch.randn(hidden_dim, hidden_dim, generator=generator, dtype=torch.float64)
            * depth_gain / math.sqrt(hidden_dim)
        )
        self.up = nn.Parameter(
            torch.randn(mlp_dim, hidden_dim, generator=generator, dtype=torch.float64)
            / math.sqrt(hidden_dim)
        )
        self.down = nn.Parameter(
            torch.randn(hidden_dim, mlp_dim, generator=generator, dtype=torch.float64)
            * depth_gain / math.sqrt(mlp_dim)
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(1, h.shape[1] + 1, dtype=h.dtype, device=h.device)
        mixed = torch.cumsum(h, dim=1) / positions[None, :, None]
        h = h + mixed @ self.mix.T
        return h + torch.tanh(h @ self.up.T) @ self.down.T


class ToyPolicy(nn.Module):
    """Политика следующего токена: эмбеддинги, L остаточных блоков, связанный или отдельный выход."""

    def __init__(self, vocab_size: int, context_len: int, config: ModelConfig, seed: int) -> None:
        """Инициализирует политику с детерминированными float64-параметрами.

        Аргументы:
            vocab_size: количество токенов.
            context_len: длина самой длинной последовательности (промпт + ответ).
            config: размеры модели.
            seed: сид инициализации параметров.
        """
        super().__init__()
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.config = config
        generator = torch.Generator().manual_seed(seed)
        h = config.hidden_dim
        self.token_embedding = nn.Parameter(
            torch.randn(vocab_size, h, generator=generator, dtype=torch.float64) * config.init_scale
        )
        self.position_embedding = nn.Parameter(
            torch.randn(context_len, h, generator=generator, dtype=torch.float64) * config.init_scale
        )
        self.blocks = nn.ModuleList(
            Block(h, config.mlp_dim, config.n_layers, generator)
            for _ in range(config.n_layers)
        )
        if config.tied_output:
            self.head = None
        else:
            self.head = nn.Parameter(
                torch.randn(vocab_size, h, generator=generator, dtype=torch.float64)
                * config.init_scale
            )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Выполняет прямой проход: логиты z_θ(c) для каждого префикса ``tokens``.

        Аргументы:
            tokens: LongTensor (batch, length).

        Вернёт:
            Тензор (batch, length, vocab) логитов следующего токена.
        """
        length = tokens.shape[1]
        h = self.token_embedding[tokens] + self.position_embedding[:length]
        for block in self.blocks:
            h = block(h)
        out = self.token_embedding if self.head is None else self.head
        return h @ out.T

    def answer_log_probs(self, sequences: torch.Tensor, prompt_len: int) -> torch.Tensor:
        """log π(y_t | x, y_<t) токенов ответа в ``sequences``.

        Вернёт:
            Тензор (batch, answer_len).
        """
        logits = self(sequences[:, :-1])[:, prompt_len - 1 :]
        log_probs = torch.log_softmax(logits, dim=-1)
        targets = sequences[:, prompt_len:]
        return log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)

    def answer_logits(self, sequences: torch.Tensor, prompt_len: int) -> torch.Tensor:
        """Логиты следующего токена на каждой позиции ответа, (batch, answer_len, vocab)."""
        return self(sequences[:, :-1])[:, prompt_len - 1 :]

    @torch.no_grad()
    def generate(
            self,
            prompts: torch.Tensor,
            answer_len: int,
            generator: torch.Generator | None = None,
            greedy: bool = False,
            temperature: float = 1.0,
    ) -> torch.Tensor:
        """Декодирует ``answer_len`` токенов после каждого промпта.

        Сэмплирование берёт случайность из ``generator``, жадное декодирование берёт argmax.
        """
        sequences = prompts
        for _ in range(answer_len):
            logits = self(sequences)[:, -1]
            if greedy:
                next_tokens = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                next_tokens = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            sequences = torch.cat([sequences, next_tokens[:, None]], dim=1)
        return sequences[:, prompts.shape[1] :]

    def get_params(self) -> dict[str, np.ndarray]:
        """Копия всех параметров как float64-массивов numpy по путям модулей."""
        return {name: p.detach().cpu().numpy().copy() for name, p in self.named_parameters()}

    @torch.no_grad()
    def set_params(self, params: dict[str, np.ndarray]) -> None:
        """Перезаписывает параметры на месте из float64-массивов."""
        check_same_architecture(self.get_params(), params)
        for name, p in self.named_parameters():
            p.copy_(torch.as_tensor(np.asarray(params[name], dtype=np.float64)))

    def clone_with(self, params: dict[str, np.ndarray]) -> "ToyPolicy":
        """Независимая политика той же архитектуры с параметрами ``params``."""
        policy = ToyPolicy(self.vocab_size, self.context_len, self.config, seed=0)
        policy.set_params(params)
        return policy
