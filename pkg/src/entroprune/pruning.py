"""Layerwise patch pruning: score, keep the top fraction, propagate the survivors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .entropy import Criterion, EntropyScores, head_averaged_scores, random_scores
from .model import ConfigError, ModelConfig, TokenMatrix, ViTParams, block_forward, classify, image_tokens

DEFAULT_BLOCKS = (4, 7, 10)

__all__ = [
    "DEFAULT_BLOCKS",
    "PruneSchedule",
    "PruneEvent",
    "PruneTrace",
    "keep_count",
    "select_keep",
    "gather_tokens",
    "pruned_forward",
    "run_blocks",
    "random_prune_baseline",
    "token_trajectory",
]


def keep_count(r: float, m: int) -> int:
    """``ceil(r * m)`` with ``r`` taken at its decimal value, so 0.9 * 10 is 9, not 10."""
    return math.ceil(Fraction(repr(float(r))) * m)


@dataclass(frozen=True)
class PruneSchedule:
    """Prune after each 1-based block in ``blocks``, keeping ``keep_rate`` of the patch tokens."""

    blocks: tuple[int, ...] = DEFAULT_BLOCKS
    keep_rate: float = 1.0
    criterion: Criterion = field(default_factory=Criterion)

    def __post_init__(self):
        blocks = tuple(sorted(set(int(b) for b in self.blocks)))
        object.__setattr__(self, "blocks", blocks)
        if not 0 < self.keep_rate <= 1:
            raise ConfigError(f"keep rate must be in (0, 1], got {self.keep_rate}")
        if any(b < 1 for b in blocks):
            raise ConfigError(f"prune blocks are 1-based, got {list(blocks)}")

    def validate(self, config: ModelConfig) -> None:
        over = [b for b in self.blocks if b > config.depth]
        if over:
            raise ConfigError(f"prune blocks {over} exceed model depth {config.depth}")

    @classmethod
    def dense(cls) -> "PruneSchedule":
        return cls(blocks=(), keep_rate=1.0)


@dataclass(frozen=True)
class PruneEvent:
    block: int
    scores: EntropyScores
    kept_ids: np.ndarray
    dropped_ids: np.ndarray
    tokens_before: int
    tokens_after: int

    def to_dict(self) -> dict:
        c = self.scores.criterion
        return {
            "block": self.block,
            "criterion": c.kind,
            "alpha": c.alpha,
            "kept_ids": self.kept_ids.tolist(),
            "dropped_ids": self.dropped_ids.tolist(),
            "scores": self.scores.values.tolist(),
            "tokens_before": self.tokens_before,
            "tokens_after": self.tokens_after,
        }


@dataclass
class PruneTrace:
    schedule: PruneSchedule
    initial_tokens: int
    events: list[PruneEvent] = field(default_factory=list)

    @property
    def trajectory(self) -> list[int]:
        """Token count entering the first block, then after every pruning event."""
        return [self.initial_tokens] + [e.tokens_after for e in self.events]

    def survivors(self) -> np.ndarray:
        """Patch ids still alive after the last pruning event."""
        if not self.events:
            return np.arange(self.initial_tokens - 1)
        return self.events[-1].kept_ids

    def to_dict(self) -> dict:
        c = self.schedule.criterion
        return {
            "criterion": c.kind,
            "alpha": c.alpha,
            "keep_rate": self.schedule.keep_rate,
            "blocks": list(self.schedule.blocks),
            "trajectory": self.trajectory,
            "events": [e.to_dict() for e in self.events],
        }


def select_keep(scores: EntropyScores, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Positions to keep and to drop, each sorted ascending.

    Keeps ``ceil(r*m)`` patches: the lowest scores for entropy criteria, the
    highest when ``scores.higher_is_important``. Equal scores favour the
    earlier position (smaller original patch id).
    """
    values = np.asarray(scores.values, dtype=np.float64)
    m = values.shape[0]
    if m == 0:
        raise ValueError("cannot select from an empty score vector")
    if not 0 < r <= 1:
        raise ValueError(f"keep rate must be in (0, 1], got {r}")
    k = keep_count(r, m)
    key = -values if scores.higher_is_important else values
    order = np.argsort(key, kind="stable")
    kept = np.sort(order[:k])
    dropped = np.sort(order[k:])
    return kept, dropped


def gather_tokens(x: TokenMatrix, kept) -> TokenMatrix:
    """Class token plus the patch columns at positions ``kept`` (0-based among patches)."""
    kept = np.asarray(kept, dtype=np.intp).reshape(-1)
    m = x.n - 1
    if kept.size and (kept.min() < 0 or kept.max() >= m):
        raise IndexError(f"kept positions out of range for {m} patches")
    if np.any(np.diff(kept) <= 0):
        raise ValueError("kept positions must be strictly increasing")
    rows = np.concatenate([[0], kept + 1])
    return TokenMatrix(x.tokens[rows], x.patch_ids[kept])


def random_prune_baseline(m: int, r: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random kept set of size ``ceil(r*m)``, reproducible from ``seed``."""
    return select_keep(random_scores(m, seed), r)


BlockHook = Callable[[int, TokenMatrix, np.ndarray], None]


def run_blocks(
    x: TokenMatrix,
    params: ViTParams,
    config: ModelConfig,
    schedule: PruneSchedule,
    on_block: BlockHook | None = None,
) -> tuple[TokenMatrix, PruneTrace]:
    """Run all blocks on ``x``, pruning after each scheduled block.

    ``on_block(block, tokens_out, attention)`` sees every block before any
    pruning of its output.
    """
    schedule.validate(config)
    trace = PruneTrace(schedule, x.n)
    prune_at = set(schedule.blocks)
    for i, bp in enumerate(params.blocks, start=1):
        x, attn = block_forward(x, bp, config)
        if on_block is not None:
            on_block(i, x, attn)
        if i in prune_at and x.n > 1:
            scores = head_averaged_scores(attn, schedule.criterion, block=i)
            kept, dropped = select_keep(scores, schedule.keep_rate)
            before = x.n
            ids = x.patch_ids
            x = gather_tokens(x, kept)
            trace.events.append(PruneEvent(i, scores, ids[kept], ids[dropped], before, x.n))
    return x, trace


def pruned_forward(
    image,
    params: ViTParams,
    config: ModelConfig,
    schedule: PruneSchedule,
    on_block: BlockHook | None = None,
) -> tuple[np.ndarray, PruneTrace]:
    """Forward pass with pruning; returns class probabilities and the pruning trace."""
    schedule.validate(config)
    x = image_tokens(image, params, config)
    x, trace = run_blocks(x, params, config, schedule, on_block)
    return classify(x, params, config), trace


def token_trajectory(config: ModelConfig, schedule: PruneSchedule) -> list[int]:
    """Token count entering each block (length ``depth``), from the schedule alone."""
    schedule.validate(config)
    n = config.num_patches + 1
    counts = []
    for i in range(1, config.depth + 1):
        counts.append(n)
        if i in schedule.blocks and n > 1:
            n = keep_count(schedule.keep_rate, n - 1) + 1
    return counts
