"""Print the FLOPs reduction grid (keep rate x prune point) for a model geometry."""

from __future__ import annotations

import argparse

from entroprune.cost import PRUNE_POINTS, model_flops
from entroprune.model import ModelConfig
from entroprune.pruning import PruneSchedule, token_trajectory


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--blocks", default="4,7,10")
    args = ap.parse_args()
    config = ModelConfig.from_json(args.config) if args.config else ModelConfig()
    blocks = tuple(int(b) for b in args.blocks.split(","))
    print(f"{'r':>4} {'trajectory':<22} " + " ".join(f"{p:>18}" for p in PRUNE_POINTS))
    for r in (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3):
        sched = PruneSchedule(blocks, r)
        counts = token_trajectory(config, sched)
        traj = "->".join(str(c) for i, c in enumerate(counts) if i == 0 or c != counts[i - 1])
        cells = []
        for p in PRUNE_POINTS:
            rep = model_flops(config, sched, p)
            cells.append(f"{rep.total / 1e9:7.3f}G {rep.reduction:8.2%}")
        print(f"{r:>4.1f} {traj:<22} " + " ".join(f"{c:>18}" for c in cells))


if __name__ == "__main__":
    main()
