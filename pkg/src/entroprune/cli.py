"""Command-line entry point: ``entroprune <command> ...``.

Exit codes: 0 success, 1 at least one input failed, 2 configuration or usage error.
Structured output is JSON lines; tables are fixed-width text.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import PRUNE_POINTS, benchmark, model_flops, random_images
from .entropy import (
    Criterion,
    attention_distance,
    head_averaged_scores,
    patch_distributions,
    renyi_entropy,
    shannon_entropy,
)
from .imageio import ImageFormatError, encode_pnm, load_image
from .linalg import ShapeError
from .model import ConfigError, ModelConfig, ViTParams, forward, init_weights, load_params
from .pruning import DEFAULT_BLOCKS, PruneSchedule, pruned_forward
from .weights import ArchiveError, decode_archive, encode_archive, load_archive, save_archive

log = logging.getLogger("entroprune")

DEFAULT_KEEP_RATES = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)
DEFAULT_CRITERIA = ("shannon", "renyi:2", "renyi:5", "renyi:10", "evit")
EXIT_OK, EXIT_ITEM_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    archive: Path
    config: ModelConfig
    schedule: PruneSchedule
    inputs: list[Path]
    out_dir: Path | None = None
    seed: int = 0
    threads: int = 1
    _params: ViTParams | None = field(default=None, repr=False)

    def validate(self) -> None:
        self.schedule.validate(self.config)
        if not self.archive.is_file():
            raise UsageError(f"archive not found: {self.archive}")
        if self.threads < 1:
            raise UsageError("--threads must be >= 1")

    @property
    def params(self) -> ViTParams:
        if self._params is None:
            self._params = load_params(load_archive(self.archive), self.config)
        return self._params

    def map_inputs(self, fn) -> list:
        """Apply ``fn`` to every input; results come back in input order."""
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(fn, self.inputs))
        return [fn(p) for p in self.inputs]


def _parse_blocks(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(b) for b in text.split(","))
    except ValueError:
        raise UsageError(f"--blocks must be a comma list of integers, got {text!r}") from None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma list of numbers, got {text!r}") from None


def _criterion(args) -> Criterion:
    kind = args.criterion
    include_class = getattr(args, "include_class", False)
    if kind == "renyi":
        if args.alpha is None:
            raise UsageError("--criterion renyi needs --alpha")
        if args.alpha == 1.0:
            return Criterion("shannon", include_class=include_class)
        return Criterion("renyi", alpha=args.alpha, include_class=include_class)
    if kind == "random":
        return Criterion("random", seed=args.seed)
    return Criterion(kind, include_class=include_class)


def _parse_criterion(text: str, seed: int) -> Criterion:
    if text.strip().lower() == "random":
        return Criterion("random", seed=seed)
    return Criterion.parse(text)


def _config(args) -> ModelConfig:
    return ModelConfig.from_json(args.config) if args.config else ModelConfig()


def _manifest(args) -> RunManifest:
    config = _config(args)
    schedule = PruneSchedule(_parse_blocks(args.blocks), args.keep_rate, _criterion(args))
    m = RunManifest(
        archive=Path(args.archive),
        config=config,
        schedule=schedule,
        inputs=[Path(p) for p in args.inputs],
        out_dir=Path(args.out_dir) if args.out_dir else None,
        seed=args.seed,
        threads=args.threads,
    )
    m.validate()
    return m


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _emit(lines: list[str], out_dir: Path | None, filename: str) -> None:
    text = "".join(line + "\n" for line in lines)
    if out_dir is None:
        sys.stdout.write(text)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / filename).write_text(text)


# ---------------------------------------------------------------- classify


def cmd_classify(m: RunManifest, top_k: int = 5) -> tuple[list[dict], int]:
    params = m.params

    def one(path: Path) -> dict:
        try:
            img = load_image(path, m.config)
        except (OSError, ImageFormatError, ShapeError) as exc:
            log.warning("%s: %s", path, exc)
            return {"path": str(path), "error": str(exc)}
        probs, trace = pruned_forward(img, params, m.config, m.schedule)
        k = min(top_k, probs.shape[0])
        top = np.argsort(-probs, kind="stable")[:k]
        return {
            "path": str(path),
            "top_k": top.tolist(),
            "top_probs": probs[top].tolist(),
            "probabilities": probs.tolist(),
            "trajectory": trace.trajectory,
            "criterion": m.schedule.criterion.name,
            "keep_rate": m.schedule.keep_rate,
            "blocks": list(m.schedule.blocks),
        }

    records = m.map_inputs(one)
    failed = sum("error" in r for r in records)
    _emit([_dumps(r) for r in records], m.out_dir, "classify.jsonl")
    return records, EXIT_ITEM_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------- entropy map


def heatmap_pixels(scores: np.ndarray, patch_ids: np.ndarray, grid: int) -> np.ndarray:
    """Min-max scale scores to 0..255 on the patch grid; absent patches get 255."""
    img = np.full(grid * grid, 255, dtype=np.uint8)
    if scores.size:
        lo, hi = float(scores.min()), float(scores.max())
        if hi > lo:
            img[patch_ids] = np.rint((scores - lo) / (hi - lo) * 255).astype(np.uint8)
        else:
            img[patch_ids] = 0
    return img.reshape(grid, grid)


def cmd_entropy_map(m: RunManifest, block: int, alpha: float | None = None) -> tuple[list[dict], int]:
    if not 1 <= block <= m.config.depth:
        raise ConfigError(f"block {block} outside 1..{m.config.depth}")
    crit = Criterion("renyi", alpha=alpha) if alpha not in (None, 1.0) else Criterion("shannon")
    params = m.params
    grid = m.config.grid_size

    def one(path: Path) -> dict:
        try:
            img = load_image(path, m.config)
        except (OSError, ImageFormatError, ShapeError) as exc:
            log.warning("%s: %s", path, exc)
            return {"path": str(path), "error": str(exc)}
        captured = {}

        def hook(i, x, attn):
            if i == block:
                captured["ids"] = x.patch_ids
                captured["attn"] = attn

        pruned_forward(img, params, m.config, m.schedule, on_block=hook)
        ids = captured["ids"]
        if ids.size == 0:
            raise ConfigError(f"no patch tokens survive to block {block}")
        scores = head_averaged_scores(captured["attn"], crit, block=block).values
        pixels = heatmap_pixels(scores, ids, grid)
        rec = {
            "path": str(path),
            "block": block,
            "criterion": crit.kind,
            "alpha": crit.alpha,
            "grid": [grid, grid],
            "patch_ids": ids.tolist(),
            "scores": scores.tolist(),
        }
        if m.out_dir is not None:
            m.out_dir.mkdir(parents=True, exist_ok=True)
            stem = m.out_dir / f"{path.stem}.block{block}"
            Path(f"{stem}.pgm").write_bytes(encode_pnm(pixels))
            Path(f"{stem}.json").write_text(_dumps(rec) + "\n")
            rec["heatmap"] = f"{stem}.pgm"
        return rec

    records = m.map_inputs(one)
    failed = sum("error" in r for r in records)
    if m.out_dir is None:
        _emit([_dumps(r) for r in records], None, "")
    return records, EXIT_ITEM_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------- sweep


def cmd_sweep(m: RunManifest, keep_rates, criteria) -> tuple[dict, int]:
    """Criterion x keep-rate grid: FLOPs, reduction, agreement with dense, kept-set overlap."""
    if not keep_rates or not criteria:
        raise UsageError("sweep needs at least one keep rate and one criterion")
    crits = [c if isinstance(c, Criterion) else _parse_criterion(c, m.seed) for c in criteria]
    params = m.params
    images = []
    failures = []
    for p in m.inputs:
        try:
            images.append((p, load_image(p, m.config)))
        except (OSError, ImageFormatError, ShapeError) as exc:
            failures.append({"path": str(p), "error": str(exc)})
    if not images:
        raise UsageError("no readable inputs")

    dense_top = [int(np.argmax(forward(img, params, m.config))) for _, img in images]
    rows = []
    pairwise = []
    for r in keep_rates:
        survivors = {}
        for c in crits:
            sched = PruneSchedule(m.schedule.blocks, r, c)
            agree = 0
            surv = []
            for (_, img), top in zip(images, dense_top):
                probs, trace = pruned_forward(img, params, m.config, sched)
                agree += int(np.argmax(probs)) == top
                surv.append(set(trace.survivors().tolist()))
            survivors[c.name] = surv
            rep = model_flops(m.config, sched)
            rows.append(
                {
                    "criterion": c.name,
                    "keep_rate": r,
                    "gflops": rep.total / 1e9,
                    "reduction": rep.reduction,
                    "agreement": agree / len(images),
                }
            )
        ref = crits[0].name
        names = [c.name for c in crits]
        for row in rows[-len(crits) :]:
            row["overlap_vs_ref"] = _overlap(survivors[row["criterion"]], survivors[ref])
            row["reference"] = ref
        pairwise.append(
            {
                "keep_rate": r,
                "criteria": names,
                "overlap": [[_overlap(survivors[a], survivors[b]) for b in names] for a in names],
            }
        )
    result = {
        "blocks": list(m.schedule.blocks),
        "n_images": len(images),
        "rows": rows,
        "pairwise_overlap": pairwise,
        "failures": failures,
    }
    return result, EXIT_ITEM_FAILED if failures else EXIT_OK


def _overlap(a: list[set], b: list[set]) -> float:
    vals = [len(x & y) / len(y) if y else 1.0 for x, y in zip(a, b)]
    return float(np.mean(vals))


def sweep_table(result: dict) -> str:
    lines = [f"{'criterion':<12} {'r':>5} {'GFLOPs':>8} {'reduct':>8} {'agree':>7} {'overlap':>8}"]
    for row in result["rows"]:
        lines.append(
            f"{row['criterion']:<12} {row['keep_rate']:>5.2f} {row['gflops']:>8.3f} "
            f"{row['reduction']:>8.2%} {row['agreement']:>7.3f} {row['overlap_vs_ref']:>8.3f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- analysis


def cmd_analyze(m: RunManifest, alphas=(2.0, 5.0, 10.0), bins: int = 20) -> tuple[list[dict], int]:
    """Per block: entropy histograms by order, per-head mean entropy and attention distance."""
    params = m.params
    cfg = m.config

    def one(path: Path) -> dict:
        try:
            img = load_image(path, cfg)
        except (OSError, ImageFormatError, ShapeError) as exc:
            return {"path": str(path), "error": str(exc)}
        blocks = []

        def hook(i, x, attn):
            if x.n < 2:
                return
            dists = patch_distributions(attn)
            per_order = {"1": shannon_entropy(dists)}
            for a in alphas:
                per_order[f"{a:g}"] = renyi_entropy(dists, a)
            top = math.log(x.n - 1) if x.n > 2 else 1.0
            entry = {
                "block": i,
                "tokens": x.n,
                "attention_distance": attention_distance(attn, x.patch_ids, (cfg.grid_size, cfg.grid_size), cfg.patch_size).tolist(),
                "head_mean_entropy": {k: v.mean(axis=1).tolist() for k, v in per_order.items()},
                "histogram": {
                    k: np.histogram(v.mean(axis=0), bins=bins, range=(0.0, top))[0].tolist() for k, v in per_order.items()
                },
                "histogram_range": [0.0, top],
            }
            blocks.append(entry)

        pruned_forward(img, params, cfg, m.schedule, on_block=hook)
        return {"path": str(path), "blocks": blocks}

    records = m.map_inputs(one)
    _emit([_dumps(r) for r in records], m.out_dir, "analysis.jsonl")
    return records, EXIT_ITEM_FAILED if any("error" in r for r in records) else EXIT_OK


# ---------------------------------------------------------------- argparse


def _add_model_args(p: argparse.ArgumentParser, inputs: bool = True) -> None:
    p.add_argument("--archive", required=True, help="weight archive (.entp)")
    p.add_argument("--config", help="JSON file with ModelConfig fields (default: DeiT-S geometry)")
    p.add_argument("--keep-rate", type=float, default=1.0)
    p.add_argument("--blocks", default=",".join(map(str, DEFAULT_BLOCKS)), help="1-based prune blocks, comma separated")
    p.add_argument("--criterion", choices=Criterion.KINDS, default="shannon")
    p.add_argument("--alpha", type=float, default=None, help="Renyi order")
    p.add_argument("--include-class", action="store_true", help="keep the class key in patch distributions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.add_argument("--threads", type=int, default=1)
    if inputs:
        p.add_argument("inputs", nargs="+", help="PGM/PPM/raw-f32 images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entroprune", description="ViT inference with attention-entropy patch pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", help="classify images, optionally with pruning")
    _add_model_args(p)
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("entropy-map", help="write per-patch entropy heatmaps (PGM) and raw scores")
    _add_model_args(p)
    p.add_argument("--block", type=int, required=True, help="1-based block whose attention is mapped")

    p = sub.add_parser("sweep", help="compare criteria across keep rates")
    _add_model_args(p)
    p.add_argument("--keep-rates", default=",".join(map(str, DEFAULT_KEEP_RATES)))
    p.add_argument("--criteria", default=",".join(DEFAULT_CRITERIA))

    p = sub.add_parser("analyze", help="entropy-by-depth histograms and attention distance")
    _add_model_args(p)
    p.add_argument("--alphas", default="2,5,10")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--config")
    p.add_argument("--keep-rate", type=float, default=0.7)
    p.add_argument("--blocks", default=",".join(map(str, DEFAULT_BLOCKS)))
    p.add_argument("--json", action="store_true", help="JSON lines instead of tables")

    p = sub.add_parser("benchmark", help="dense vs pruned throughput")
    p.add_argument("--archive", help="weight archive; random weights if omitted")
    p.add_argument("--config")
    p.add_argument("--keep-rates", default="0.9,0.7,0.5,0.3")
    p.add_argument("--blocks", default=",".join(map(str, DEFAULT_BLOCKS)))
    p.add_argument("--criterion", choices=Criterion.KINDS, default="shannon")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=2)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("init-archive", help="write a seeded random-weight archive")
    p.add_argument("output")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--std", type=float, default=0.02)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ENTROPRUNE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "classify":
        _, code = cmd_classify(_manifest(args), args.top_k)
        return code
    if args.command == "entropy-map":
        _, code = cmd_entropy_map(_manifest(args), args.block, args.alpha)
        return code
    if args.command == "sweep":
        m = _manifest(args)
        result, code = cmd_sweep(m, _parse_floats(args.keep_rates), [c for c in args.criteria.split(",") if c])
        if m.out_dir is not None:
            m.out_dir.mkdir(parents=True, exist_ok=True)
            (m.out_dir / "sweep.json").write_text(_dumps(result) + "\n")
            (m.out_dir / "sweep.txt").write_text(sweep_table(result) + "\n")
        print(sweep_table(result))
        return code
    if args.command == "analyze":
        _, code = cmd_analyze(_manifest(args), _parse_floats(args.alphas), args.bins)
        return code
    if args.command == "flops":
        config = _config(args)
        sched = PruneSchedule(_parse_blocks(args.blocks), args.keep_rate)
        for point in PRUNE_POINTS:
            rep = model_flops(config, sched, point)
            print(rep.to_json() if args.json else f"[{point}]\n{rep.to_table()}\n")
        return EXIT_OK
    if args.command == "benchmark":
        config = _config(args)
        if args.archive:
            params = load_params(load_archive(args.archive), config)
        else:
            params = load_params(decode_archive(encode_archive(init_weights(config, args.seed))), config)
        images = random_images(config, args.n_images, args.seed)
        for r in _parse_floats(args.keep_rates):
            sched = PruneSchedule(_parse_blocks(args.blocks), r, _criterion(args))
            res = benchmark(params, config, sched, args.n_images, args.warmup, args.repeats, args.threads, images)
            print(_dumps({"keep_rate": r, "dense_ips": res.dense_ips, "pruned_ips": res.pruned_ips, "ratio": res.ratio}))
        return EXIT_OK
    if args.command == "init-archive":
        save_archive(args.output, init_weights(_config(args), args.seed, args.std))
        return EXIT_OK
    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    _setup_logging()
    try:
        return run(argv)
    except (UsageError, ConfigError, ArchiveError, ShapeError, ValueError) as exc:
        log.error("%s", exc)
        print(f"entroprune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
