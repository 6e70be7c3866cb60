"""Convert a timm DeiT/ViT state dict (``.pth``) into an entroprune archive.

    python scripts/convert_deit.py deit_small_patch16_224.pth deit_s.entp [--config deit_s.json]

Needs torch (``pip install .[convert]``).
"""

from __future__ import annotations

import argparse
import json

import numpy as np
import torch

from entroprune.model import ModelConfig
from entroprune.weights import save_archive


def convert(state: dict, config: ModelConfig) -> dict[str, np.ndarray]:
    sd = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}
    d = config.embed_dim
    conv = sd["patch_embed.proj.weight"]  # (d, C, p, p)
    out = {
        "patch_embed.weight": conv.transpose(0, 2, 3, 1).reshape(d, -1),
        "patch_embed.bias": sd["patch_embed.proj.bias"],
        "cls_token": sd["cls_token"].reshape(1, d),
        "pos_embed": sd["pos_embed"].reshape(-1, d),
    }
    for i in range(config.depth):
        src, dst = f"blocks.{i}.", f"blocks.{i}."
        qkv_w, qkv_b = sd[src + "attn.qkv.weight"], sd[src + "attn.qkv.bias"]
        for j, name in enumerate(("wq", "wk", "wv")):
            out[dst + f"attn.{name}.weight"] = qkv_w[j * d : (j + 1) * d]
            out[dst + f"attn.{name}.bias"] = qkv_b[j * d : (j + 1) * d]
        out[dst + "attn.wo.weight"] = sd[src + "attn.proj.weight"]
        out[dst + "attn.wo.bias"] = sd[src + "attn.proj.bias"]
        for a, b in (("ln1", "norm1"), ("ln2", "norm2")):
            out[dst + f"{a}.gamma"] = sd[src + f"{b}.weight"]
            out[dst + f"{a}.beta"] = sd[src + f"{b}.bias"]
        for fc in ("fc1", "fc2"):
            out[dst + f"ffn.{fc}.weight"] = sd[src + f"mlp.{fc}.weight"]
            out[dst + f"ffn.{fc}.bias"] = sd[src + f"mlp.{fc}.bias"]
    out["norm.gamma"], out["norm.beta"] = sd["norm.weight"], sd["norm.bias"]
    out["head.weight"], out["head.bias"] = sd["head.weight"], sd["head.bias"]
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("output")
    ap.add_argument("--config", help="ModelConfig JSON (default DeiT-S geometry)")
    args = ap.parse_args()
    config = ModelConfig.from_json(args.config) if args.config else ModelConfig()
    state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    if "model" in state:
        state = state["model"]
    tensors = convert(state, config)
    if tensors["head.weight"].shape[0] != config.num_classes:
        raise SystemExit(f"checkpoint has {tensors['head.weight'].shape[0]} classes, config says {config.num_classes}")
    save_archive(args.output, tensors)
    print(json.dumps({"output": args.output, "tensors": len(tensors)}))


if __name__ == "__main__":
    main()
