"""ViT forward pass: patchify, embed, pre-norm transformer blocks, classifier head.

Token matrices are stored token-major: ``tokens[i]`` is the ``d``-vector of
token ``i``; row 0 is the class token. This is the same memory layout as a
``d x n`` column-token matrix in column-major order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .linalg import LN_EPS, ShapeError, gelu, layer_norm, matmul, softmax_rows
from .weights import WeightArchive, get_tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Model geometry. Defaults are DeiT-S/16 at 224px."""

    depth: int = 12
    num_heads: int = 6
    embed_dim: int = 384
    patch_size: int = 16
    image_size: int = 224
    num_classes: int = 1000
    ffn_ratio: float = 4.0
    in_chans: int = 3
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    ln_eps: float = LN_EPS

    def __post_init__(self):
        for name in ("depth", "num_heads", "embed_dim", "patch_size", "image_size", "num_classes", "in_chans"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.ffn_ratio <= 0 or self.hidden_dim < 1:
            raise ConfigError(f"bad ffn_ratio {self.ffn_ratio}")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != self.in_chans or len(self.std) != self.in_chans:
            raise ConfigError("mean/std must have one entry per input channel")
        if any(s <= 0 for s in self.std):
            raise ConfigError("std entries must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.ffn_ratio))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        head_dim = d.pop("head_dim", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        if head_dim is not None and head_dim != cfg.head_dim:
            raise ConfigError(f"head_dim {head_dim} != embed_dim / num_heads = {cfg.head_dim}")
        return cfg

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TokenMatrix:
    tokens: np.ndarray  # (n, d)
    patch_ids: np.ndarray  # (n - 1,) original patch index of rows 1..n-1

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"tokens must be (n>=1, d), got {self.tokens.shape}")
        if self.patch_ids.shape != (self.tokens.shape[0] - 1,):
            raise ShapeError(f"{self.patch_ids.shape[0]} patch ids for {self.tokens.shape[0]} tokens")
        if np.any(np.diff(self.patch_ids) <= 0):
            raise ShapeError("patch ids must be strictly increasing")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class BlockParams:
    """One block's weights in ``x @ W`` orientation.

    ``wq``, ``wk``, ``wv`` are ``d x d`` with head ``k`` owning columns
    ``k*d' : (k+1)*d'``; ``wo`` maps the concatenated heads back to ``d``.
    """

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray


@dataclass(frozen=True)
class ViTParams:
    patch_w: np.ndarray  # (p*p*C, d)
    patch_b: np.ndarray
    cls_token: np.ndarray  # (d,)
    pos_embed: np.ndarray  # (1 + num_patches, d)
    blocks: list[BlockParams] = field(default_factory=list)
    norm_gamma: np.ndarray = None
    norm_beta: np.ndarray = None
    head_w: np.ndarray = None  # (d, num_classes)
    head_b: np.ndarray = None


def load_params(archive: WeightArchive, config: ModelConfig) -> ViTParams:
    """Pull every tensor the model needs, checking shapes against ``config``."""
    d, hid, c = config.embed_dim, config.hidden_dim, config.num_classes

    def vec(name, n=d):
        return get_tensor(archive, name, [n])

    def lin(name, out_f, in_f):
        # stored (out, in); transpose once so the forward pass is x @ W
        return np.ascontiguousarray(get_tensor(archive, name, [out_f, in_f]).T)

    blocks = []
    for i in range(config.depth):
        pre = f"blocks.{i}."
        blocks.append(
            BlockParams(
                ln1_gamma=vec(pre + "ln1.gamma"),
                ln1_beta=vec(pre + "ln1.beta"),
                wq=lin(pre + "attn.wq.weight", d, d),
                bq=vec(pre + "attn.wq.bias"),
                wk=lin(pre + "attn.wk.weight", d, d),
                bk=vec(pre + "attn.wk.bias"),
                wv=lin(pre + "attn.wv.weight", d, d),
                bv=vec(pre + "attn.wv.bias"),
                wo=lin(pre + "attn.wo.weight", d, d),
                bo=vec(pre + "attn.wo.bias"),
                ln2_gamma=vec(pre + "ln2.gamma"),
                ln2_beta=vec(pre + "ln2.beta"),
                fc1_w=lin(pre + "ffn.fc1.weight", hid, d),
                fc1_b=vec(pre + "ffn.fc1.bias", hid),
                fc2_w=lin(pre + "ffn.fc2.weight", d, hid),
                fc2_b=vec(pre + "ffn.fc2.bias"),
            )
        )
    return ViTParams(
        patch_w=lin("patch_embed.weight", d, config.patch_dim),
        patch_b=vec("patch_embed.bias"),
        cls_token=get_tensor(archive, "cls_token", [1, d])[0],
        pos_embed=get_tensor(archive, "pos_embed", [config.num_patches + 1, d]),
        blocks=blocks,
        norm_gamma=vec("norm.gamma"),
        norm_beta=vec("norm.beta"),
        head_w=lin("head.weight", c, d),
        head_b=vec("head.bias", c),
    )


def init_weights(config: ModelConfig, seed: int = 0, std: float = 0.02) -> dict[str, np.ndarray]:
    """Seeded random weights under the canonical archive names (float32).

    Linear weights and embeddings are N(0, std^2); LN affines are N(1, std^2)
    and N(0, std^2) so nothing is exactly neutral.
    """
    rng = np.random.default_rng(seed)
    d, hid = config.embed_dim, config.hidden_dim

    def normal(*shape, loc=0.0):
        return (loc + std * rng.standard_normal(shape)).astype(np.float32)

    t = {
        "patch_embed.weight": normal(d, config.patch_dim),
        "patch_embed.bias": normal(d),
        "cls_token": normal(1, d),
        "pos_embed": normal(config.num_patches + 1, d),
    }
    for i in range(config.depth):
        pre = f"blocks.{i}."
        t[pre + "ln1.gamma"] = normal(d, loc=1.0)
        t[pre + "ln1.beta"] = normal(d)
        for w in ("wq", "wk", "wv", "wo"):
            t[pre + f"attn.{w}.weight"] = normal(d, d)
            t[pre + f"attn.{w}.bias"] = normal(d)
        t[pre + "ln2.gamma"] = normal(d, loc=1.0)
        t[pre + "ln2.beta"] = normal(d)
        t[pre + "ffn.fc1.weight"] = normal(hid, d)
        t[pre + "ffn.fc1.bias"] = normal(hid)
        t[pre + "ffn.fc2.weight"] = normal(d, hid)
        t[pre + "ffn.fc2.bias"] = normal(d)
    t["norm.gamma"] = normal(d, loc=1.0)
    t["norm.beta"] = normal(d)
    t["head.weight"] = normal(config.num_classes, d)
    t["head.bias"] = normal(config.num_classes)
    return t


def patchify(image, p: int) -> np.ndarray:
    """Split an ``H x W x C`` image into ``(H/p)*(W/p)`` flattened patches.

    Patches are ordered row-major over the patch grid; each patch vector is
    its ``p x p x C`` block flattened in (row, column, channel) order.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {img.shape}")
    h, w, c = img.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    return img.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)


def embed_tokens(patches, params: ViTParams, config: ModelConfig) -> TokenMatrix:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (config.num_patches, config.patch_dim):
        raise ShapeError(
            f"expected {config.num_patches} patches of length {config.patch_dim}, got {patches.shape}"
        )
    x = matmul(patches, params.patch_w) + params.patch_b
    tokens = np.vstack([params.cls_token[None, :], x]) + params.pos_embed
    return TokenMatrix(tokens, np.arange(config.num_patches))


def head_attention(z: np.ndarray, params: BlockParams, config: ModelConfig) -> np.ndarray:
    """Per-head attention probabilities ``(h, n, n)`` for already-normalised tokens ``z``.

    Row ``i`` of head ``k`` is ``softmax_j(q_i . k_j / sqrt(d'))``.
    """
    q = matmul(z, params.wq) + params.bq
    k = matmul(z, params.wk) + params.bk
    return _attention_from_qk(q, k, config)


def _attention_from_qk(q, k, config):
    dh = config.head_dim
    scale = 1.0 / math.sqrt(dh)
    n = q.shape[0]
    out = np.empty((config.num_heads, n, n))
    for h in range(config.num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = matmul(q[:, sl], np.ascontiguousarray(k[:, sl].T)) * scale
        out[h] = softmax_rows(logits)
    return out


def attention_weights(x: TokenMatrix, params: BlockParams, config: ModelConfig) -> np.ndarray:
    """The attention a block computes for ``x`` (on its LN1-normalised input)."""
    _check_tokens(x, config)
    z = layer_norm(x.tokens, params.ln1_gamma, params.ln1_beta, config.ln_eps)
    return head_attention(z, params, config)


def mhsa(z: np.ndarray, params: BlockParams, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head self-attention on normalised tokens; returns (output, attention)."""
    q = matmul(z, params.wq) + params.bq
    k = matmul(z, params.wk) + params.bk
    v = matmul(z, params.wv) + params.bv
    attn = _attention_from_qk(q, k, config)
    dh = config.head_dim
    heads = np.empty_like(v)
    for h in range(config.num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        heads[:, sl] = matmul(attn[h], np.ascontiguousarray(v[:, sl]))
    return matmul(heads, params.wo) + params.bo, attn


def block_forward(x: TokenMatrix, params: BlockParams, config: ModelConfig) -> tuple[TokenMatrix, np.ndarray]:
    """Pre-norm block: ``u = x + MHSA(LN1(x))``, ``out = u + FFN(LN2(u))``."""
    _check_tokens(x, config)
    z = layer_norm(x.tokens, params.ln1_gamma, params.ln1_beta, config.ln_eps)
    attn_out, attn = mhsa(z, params, config)
    u = x.tokens + attn_out
    y = layer_norm(u, params.ln2_gamma, params.ln2_beta, config.ln_eps)
    hidden = gelu(matmul(y, params.fc1_w) + params.fc1_b)
    out = u + (matmul(hidden, params.fc2_w) + params.fc2_b)
    return TokenMatrix(out, x.patch_ids), attn


def classify(x: TokenMatrix, params: ViTParams, config: ModelConfig) -> np.ndarray:
    """Final LN on the class token, linear head, softmax."""
    cls = layer_norm(x.tokens[:1], params.norm_gamma, params.norm_beta, config.ln_eps)
    logits = matmul(cls, params.head_w) + params.head_b
    return softmax_rows(logits)[0]


def image_tokens(image, params: ViTParams, config: ModelConfig) -> TokenMatrix:
    img = np.asarray(image, dtype=np.float64)
    expected = (config.image_size, config.image_size, config.in_chans)
    if img.shape != expected:
        raise ShapeError(f"image shape {img.shape}, model expects {expected}")
    return embed_tokens(patchify(img, config.patch_size), params, config)


def forward(image, params: ViTParams, config: ModelConfig) -> np.ndarray:
    """Dense forward pass; returns class probabilities."""
    x = image_tokens(image, params, config)
    for bp in params.blocks:
        x, _ = block_forward(x, bp, config)
    return classify(x, params, config)


def _check_tokens(x: TokenMatrix, config: ModelConfig) -> None:
    if x.dim != config.embed_dim:
        raise ShapeError(f"token dim {x.dim} != embed_dim {config.embed_dim}")
