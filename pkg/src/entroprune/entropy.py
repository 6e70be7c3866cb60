"""Patch importance scores from attention: Shannon/Renyi entropy and the EViT baseline.

All entropies are in nats. For entropy criteria a LOWER score means a more
important patch; for the class-attention (EViT) criterion HIGHER is more
important. ``EntropyScores.higher_is_important`` records which.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Criterion",
    "EntropyScores",
    "DegenerateDistributionError",
    "InvalidOrderError",
    "DEGENERATE_MASS",
    "patch_attention_distribution",
    "patch_distributions",
    "shannon_entropy",
    "renyi_entropy",
    "entropy",
    "head_averaged_scores",
    "evit_cls_score",
    "random_scores",
    "attention_distance",
]

DEGENERATE_MASS = 1e-12


class DegenerateDistributionError(ValueError):
    pass


class InvalidOrderError(ValueError):
    pass


@dataclass(frozen=True)
class Criterion:
    """Scoring rule. ``kind`` is one of shannon, renyi, evit, random."""

    kind: str = "shannon"
    alpha: float | None = None
    seed: int = 0
    include_class: bool = False

    KINDS = ("shannon", "renyi", "evit", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown criterion {self.kind!r}; choose from {self.KINDS}")
        if self.kind == "renyi":
            if self.alpha is None:
                raise InvalidOrderError("renyi criterion needs an order alpha")
            _check_order(self.alpha)
            object.__setattr__(self, "alpha", float(self.alpha))
        elif self.alpha is not None:
            object.__setattr__(self, "alpha", None)

    @property
    def is_entropy(self) -> bool:
        return self.kind in ("shannon", "renyi")

    @property
    def name(self) -> str:
        if self.kind == "renyi":
            return f"renyi:{self.alpha:g}"
        if self.kind == "random":
            return f"random:{self.seed}"
        return self.kind

    @classmethod
    def parse(cls, text: str, **kw) -> "Criterion":
        """``shannon``, ``renyi:2``, ``evit``, ``random:7``. ``renyi:1`` means shannon."""
        kind, _, arg = text.strip().partition(":")
        kind = kind.lower()
        if kind == "renyi" and arg:
            alpha = float(arg)
            if alpha == 1.0:
                return cls("shannon", **kw)
            return cls("renyi", alpha=alpha, **kw)
        if kind == "random" and arg:
            return cls("random", seed=int(arg), **kw)
        if arg:
            raise ValueError(f"criterion {kind!r} takes no argument")
        return cls(kind, **kw)


@dataclass(frozen=True)
class EntropyScores:
    values: np.ndarray  # one score per surviving patch, in column order
    criterion: Criterion
    block: int | None = None
    higher_is_important: bool = False

    def __len__(self) -> int:
        return self.values.shape[0]


def _check_order(alpha) -> None:
    if not (alpha > 0) or alpha == 1 or not math.isfinite(alpha):
        raise InvalidOrderError(f"Renyi order must be positive and != 1, got {alpha!r}")


def _restrict(rows: np.ndarray, include_class: bool) -> tuple[np.ndarray, np.ndarray]:
    sub = rows if include_class else rows[..., 1:]
    mass = sub.sum(axis=-1, keepdims=True)
    return sub, mass


def patch_attention_distribution(a, head: int, query_patch: int, include_class: bool = False) -> np.ndarray:
    """Attention of patch ``query_patch`` (0-based among patch columns) over patch keys.

    The class column is dropped and the remaining row renormalised, which is
    the same as a softmax over patch logits only.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    if not 0 <= query_patch < n - 1:
        raise IndexError(f"query patch {query_patch} out of range for {n - 1} patches")
    sub, mass = _restrict(a[head, query_patch + 1], include_class)
    if mass[0] < DEGENERATE_MASS:
        raise DegenerateDistributionError(
            f"head {head}, patch {query_patch}: patch-restricted attention mass {mass[0]:.3g}"
        )
    return sub / mass


def patch_distributions(a, include_class: bool = False, block: int | None = None) -> np.ndarray:
    """All patch-query distributions at once: shape ``(h, n-1, n-1)`` (or ``n`` columns with the class key)."""
    a = np.asarray(a, dtype=np.float64)
    sub, mass = _restrict(a[:, 1:, :], include_class)
    bad = np.argwhere(mass[..., 0] < DEGENERATE_MASS)
    if bad.size:
        h, i = bad[0]
        where = f"block {block}, " if block is not None else ""
        raise DegenerateDistributionError(
            f"{where}head {h}, patch {i}: patch-restricted attention mass {mass[h, i, 0]:.3g}"
        )
    return sub / mass


def shannon_entropy(dist) -> np.ndarray | float:
    """``-sum p log p`` over the last axis with ``0 log 0 = 0``."""
    p = np.asarray(dist, dtype=np.float64)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    h = -(p * logp).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def renyi_entropy(dist, alpha: float) -> np.ndarray | float:
    """Order-``alpha`` Renyi entropy over the last axis, zero entries excluded.

    ``log sum p^alpha`` is evaluated as a log-sum-exp over ``alpha * log p``.
    """
    _check_order(alpha)
    p = np.asarray(dist, dtype=np.float64)
    pos = p > 0
    logp = np.log(p, out=np.zeros_like(p), where=pos)
    z = np.where(pos, alpha * logp, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    h = lse / (1.0 - alpha)
    return float(h) if np.ndim(h) == 0 else h


def entropy(dist, criterion: Criterion):
    if criterion.kind == "shannon":
        return shannon_entropy(dist)
    if criterion.kind == "renyi":
        return renyi_entropy(dist, criterion.alpha)
    raise ValueError(f"{criterion.kind} is not an entropy criterion")


def head_averaged_scores(a, criterion: Criterion, block: int | None = None) -> EntropyScores:
    """One score per patch token for a block's attention ``a`` of shape ``(h, n, n)``.

    Entropy criteria score each head separately and average the per-head
    entropies (not the entropy of the head-averaged attention).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"attention must be (h, n, n), got {a.shape}")
    if a.shape[1] < 2:
        raise ValueError("need at least one patch token to score")
    if criterion.kind == "evit":
        return evit_cls_score(a, block)
    if criterion.kind == "random":
        return random_scores(a.shape[1] - 1, criterion, block)
    dists = patch_distributions(a, criterion.include_class, block)
    per_head = entropy(dists, criterion)
    return EntropyScores(per_head.mean(axis=0), criterion, block, higher_is_important=False)


def evit_cls_score(a, block: int | None = None) -> EntropyScores:
    """Head-averaged attention from the class query to each patch (higher = keep)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[1] < 2:
        raise ValueError("need at least one patch token to score")
    return EntropyScores(a[:, 0, 1:].mean(axis=0), Criterion("evit"), block, higher_is_important=True)


def random_scores(m: int, criterion: Criterion | int = 0, block: int | None = None) -> EntropyScores:
    """Uniform random scores; keeping the lowest ``k`` gives a uniform random subset."""
    if not isinstance(criterion, Criterion):
        criterion = Criterion("random", seed=int(criterion))
    rng = np.random.default_rng([criterion.seed, 0 if block is None else block])
    return EntropyScores(rng.random(m), criterion, block, higher_is_important=False)


def attention_distance(a, patch_ids, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """Mean attention distance per head, in pixels.

    For every patch query the distance to each patch key (grid distance times
    ``patch_size``) is weighted by the patch-restricted attention; the result is
    averaged over queries. Queries with no patch mass are skipped.
    """
    a = np.asarray(a, dtype=np.float64)
    ids = np.asarray(patch_ids)
    if ids.shape[0] != a.shape[-1] - 1:
        raise ValueError(f"{ids.shape[0]} patch ids for {a.shape[-1]} tokens")
    rows, cols = grid
    yx = np.stack([ids // cols, ids % cols], axis=1).astype(np.float64)
    if ids.size and (ids.max() >= rows * cols or ids.min() < 0):
        raise ValueError("patch id outside the grid")
    dist = np.sqrt(((yx[:, None, :] - yx[None, :, :]) ** 2).sum(-1)) * patch_size
    sub = a[:, 1:, 1:]
    mass = sub.sum(-1)
    ok = mass >= DEGENERATE_MASS
    w = np.divide(sub, mass[..., None], out=np.zeros_like(sub), where=ok[..., None])
    per_query = (w * dist[None]).sum(-1)
    counts = ok.sum(-1)
    total = np.where(ok, per_query, 0.0).sum(-1)
    return np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
