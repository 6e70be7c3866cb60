"""Analytic FLOPs and measured throughput for dense vs pruned schedules.

FLOP convention: one multiply-add counts as one FLOP. LayerNorm, softmax,
GELU and bias adds are not counted.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .model import ModelConfig, ViTParams, forward
from .pruning import PruneSchedule, keep_count, pruned_forward

PRUNE_POINTS = ("post_block", "mid_block")


def block_flops(n: int, d: int, ffn_ratio: float = 4.0) -> int:
    """MACs of one block on ``n`` tokens: ``4nd^2 + 2n^2d + 2*ratio*nd^2``."""
    return attention_flops(n, d) + ffn_flops(n, d, ffn_ratio)


def attention_flops(n: int, d: int) -> int:
    # Q, K, V and output projections, then QK^T and A V
    return 4 * n * d * d + 2 * n * n * d


def ffn_flops(n: int, d: int, ffn_ratio: float = 4.0) -> int:
    return 2 * n * d * int(round(d * ffn_ratio))


@dataclass(frozen=True)
class BlockCost:
    block: int
    tokens: int
    tokens_ffn: int
    flops: int


@dataclass(frozen=True)
class FlopsReport:
    blocks: list[BlockCost]
    embed: int
    head: int
    total: int
    dense_total: int
    reduction: float
    keep_rate: float
    prune_blocks: tuple[int, ...]
    prune_point: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prune_blocks"] = list(self.prune_blocks)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'block':>5} {'tokens':>6} {'ffn_tok':>7} {'MFLOPs':>10}"]
        lines.append(f"{'embed':>5} {'':>6} {'':>7} {self.embed / 1e6:10.2f}")
        for b in self.blocks:
            lines.append(f"{b.block:>5} {b.tokens:>6} {b.tokens_ffn:>7} {b.flops / 1e6:10.2f}")
        lines.append(f"{'head':>5} {'':>6} {'':>7} {self.head / 1e6:10.2f}")
        lines.append(f"{'total':>5} {'':>6} {'':>7} {self.total / 1e6:10.2f}")
        lines.append(f"GFLOPs {self.total / 1e9:.3f} (dense {self.dense_total / 1e9:.3f}), reduction {self.reduction:.2%}")
        return "\n".join(lines)


def _block_costs(config: ModelConfig, schedule: PruneSchedule, prune_point: str) -> list[BlockCost]:
    if prune_point not in PRUNE_POINTS:
        raise ValueError(f"prune_point must be one of {PRUNE_POINTS}")
    schedule.validate(config)
    d = config.embed_dim
    n = config.num_patches + 1
    costs = []
    for i in range(1, config.depth + 1):
        n_out = keep_count(schedule.keep_rate, n - 1) + 1 if i in schedule.blocks and n > 1 else n
        n_ffn = n_out if prune_point == "mid_block" else n
        flops = attention_flops(n, d) + ffn_flops(n_ffn, d, config.ffn_ratio)
        costs.append(BlockCost(i, n, n_ffn, flops))
        n = n_out
    return costs


def model_flops(config: ModelConfig, schedule: PruneSchedule, prune_point: str = "post_block") -> FlopsReport:
    """Total FLOPs along the schedule's token trajectory.

    ``post_block`` prunes after the whole block (the engine's behaviour);
    ``mid_block`` also runs the pruning block's FFN on the reduced set.
    """
    embed = config.num_patches * config.embed_dim * config.patch_dim
    head = config.embed_dim * config.num_classes
    blocks = _block_costs(config, schedule, prune_point)
    total = embed + head + sum(b.flops for b in blocks)
    dense = embed + head + sum(b.flops for b in _block_costs(config, PruneSchedule.dense(), prune_point))
    return FlopsReport(
        blocks=blocks,
        embed=embed,
        head=head,
        total=total,
        dense_total=dense,
        reduction=1.0 - total / dense,
        keep_rate=schedule.keep_rate,
        prune_blocks=schedule.blocks,
        prune_point=prune_point,
    )


@dataclass(frozen=True)
class BenchmarkResult:
    dense_ips: float
    pruned_ips: float
    dense_times: list[float]
    pruned_times: list[float]
    n_images: int
    threads: int

    @property
    def ratio(self) -> float:
        return self.pruned_ips / self.dense_ips

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d


def _time_batch(fn, images, threads: int) -> float:
    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fn, images))
    else:
        for img in images:
            fn(img)
    return time.perf_counter() - t0


def random_images(config: ModelConfig, n: int, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    shape = (config.image_size, config.image_size, config.in_chans)
    return [rng.standard_normal(shape) for _ in range(n)]


def measure_throughput(fn, images, n_warmup: int = 1, repeats: int = 3, threads: int = 1) -> tuple[float, list[float]]:
    """Median images/second of ``fn`` over ``repeats`` timed passes over ``images``."""
    for img in images[: max(n_warmup, 0)]:
        fn(img)
    times = [_time_batch(fn, images, threads) for _ in range(repeats)]
    return len(images) / statistics.median(times), times


def benchmark(
    params: ViTParams,
    config: ModelConfig,
    schedule: PruneSchedule,
    n_images: int = 2,
    n_warmup: int = 1,
    repeats: int = 3,
    threads: int = 1,
    images=None,
) -> BenchmarkResult:
    """Dense and pruned throughput side by side on the same images."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if images is None:
        images = random_images(config, n_images)
    images = list(images)[:n_images]

    def dense(img):
        return forward(img, params, config)

    def pruned(img):
        return pruned_forward(img, params, config, schedule)[0]

    dense_ips, dense_times = measure_throughput(dense, images, n_warmup, repeats, threads)
    pruned_ips, pruned_times = measure_throughput(pruned, images, n_warmup, repeats, threads)
    return BenchmarkResult(dense_ips, pruned_ips, dense_times, pruned_times, len(images), threads)
