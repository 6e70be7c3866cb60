"""End-to-end demo on a small random-weight model and synthetic images.

Writes an archive, a config, a few textured-square images, then runs
classify, entropy-map, sweep and analyze into ``--out``.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from entroprune.cli import main as cli
from entroprune.imageio import write_pnm
from entroprune.model import ModelConfig, init_weights
from entroprune.weights import save_archive


def textured_square(size: int, rng) -> np.ndarray:
    img = np.full((size, size, 3), int(rng.integers(60, 200)), np.uint8)
    lo = int(rng.integers(0, size // 2))
    hi = lo + size // 2
    yy, xx = np.mgrid[lo:hi, lo:hi]
    img[lo:hi, lo:hi] = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 255, 0)[..., None]
    return img


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--images", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = ModelConfig(depth=6, num_heads=4, embed_dim=64, patch_size=8, image_size=64, num_classes=10)
    (out / "config.json").write_text(json.dumps(config.to_dict()))
    save_archive(out / "model.entp", init_weights(config, args.seed, std=0.2))
    rng = np.random.default_rng(args.seed)
    images = []
    for i in range(args.images):
        path = out / f"img{i}.ppm"
        write_pnm(path, textured_square(config.image_size, rng))
        images.append(str(path))

    base = ["--archive", str(out / "model.entp"), "--config", str(out / "config.json"), "--blocks", "2,4"]
    cli(["classify", *base, "--keep-rate", "0.7", "--out-dir", str(out), *images])
    cli(["entropy-map", *base, "--block", "2", "--out-dir", str(out / "maps"), *images])
    cli(["sweep", *base, "--keep-rates", "0.9,0.7,0.5", "--out-dir", str(out), *images])
    cli(["analyze", *base, "--out-dir", str(out), *images])
    print(f"outputs in {out}/")


if __name__ == "__main__":
    main()
