"""Scalar-loop reference implementations for the test suite.

Everything numeric here is plain Python (lists, ``math``); nothing is shared
with the numpy model code, so agreement between the two is evidence rather
than a tautology. Only weight generation and archive encoding touch numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig
from .weights import encode_archive


@dataclass(frozen=True)
class ToyModelSpec:
    config: ModelConfig
    weights: dict  # canonical name -> float32 ndarray
    seed: int

    def archive_bytes(self) -> bytes:
        return encode_archive(self.weights)

    def w(self, name: str):
        return self.weights[name].astype(float).tolist()


def make_toy(
    seed: int,
    depth: int | None = None,
    num_heads: int | None = None,
    head_dim: int | None = None,
    scale: float = 0.7,
) -> ToyModelSpec:
    """Random small model: depth <= 4, d <= 8, heads <= 2, n <= 10."""
    rng = np.random.default_rng(seed)
    depth = depth or int(rng.integers(1, 5))
    heads = num_heads or int(rng.integers(1, 3))
    hd = head_dim or int(rng.integers(1, 8 // heads + 1))
    d = heads * hd
    patch = int(rng.integers(1, 3))
    grid = int(rng.integers(1, 4))
    chans = int(rng.integers(1, 3))
    config = ModelConfig(
        depth=depth,
        num_heads=heads,
        embed_dim=d,
        patch_size=patch,
        image_size=grid * patch,
        num_classes=int(rng.integers(2, 6)),
        ffn_ratio=float(rng.choice([1.0, 2.0, 4.0])),
        in_chans=chans,
        mean=(0.0,) * chans,
        std=(1.0,) * chans,
    )
    hid = config.hidden_dim

    def normal(*shape, loc=0.0):
        return (loc + scale * rng.standard_normal(shape)).astype(np.float32)

    w = {
        "patch_embed.weight": normal(d, config.patch_dim),
        "patch_embed.bias": normal(d),
        "cls_token": normal(1, d),
        "pos_embed": normal(config.num_patches + 1, d),
    }
    for i in range(depth):
        p = f"blocks.{i}."
        w[p + "ln1.gamma"] = normal(d, loc=1.0)
        w[p + "ln1.beta"] = normal(d)
        for name in ("wq", "wk", "wv", "wo"):
            w[p + f"attn.{name}.weight"] = normal(d, d)
            w[p + f"attn.{name}.bias"] = normal(d)
        w[p + "ln2.gamma"] = normal(d, loc=1.0)
        w[p + "ln2.beta"] = normal(d)
        w[p + "ffn.fc1.weight"] = normal(hid, d)
        w[p + "ffn.fc1.bias"] = normal(hid)
        w[p + "ffn.fc2.weight"] = normal(d, hid)
        w[p + "ffn.fc2.bias"] = normal(d)
    w["norm.gamma"] = normal(d, loc=1.0)
    w["norm.beta"] = normal(d)
    w["head.weight"] = normal(config.num_classes, d)
    w["head.bias"] = normal(config.num_classes)
    return ToyModelSpec(config, w, seed)


def toy_image(spec: ToyModelSpec, seed: int) -> np.ndarray:
    c = spec.config
    return np.random.default_rng(seed).standard_normal((c.image_size, c.image_size, c.in_chans))


# ------------------------------------------------------------ scalar kernels


def _linear(x, weight, bias):
    """``weight`` is (out, in) nested lists."""
    out = []
    for o in range(len(weight)):
        s = 0.0
        row = weight[o]
        for i in range(len(x)):
            s += row[i] * x[i]
        out.append(s + bias[o])
    return out


def _layer_norm(x, gamma, beta, eps):
    n = len(x)
    mu = math.fsum(x) / n
    var = math.fsum((v - mu) ** 2 for v in x) / n
    sd = math.sqrt(var + eps)
    return [(v - mu) / sd * g + b for v, g, b in zip(x, gamma, beta)]


def _softmax(row):
    top = max(row)
    e = [math.exp(v - top) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


# ------------------------------------------------------------ model pieces


def naive_tokens(spec: ToyModelSpec, image) -> list[list[float]]:
    """Patchify, project, prepend the class token and add positions."""
    c = spec.config
    img = np.asarray(image, dtype=float).tolist()
    p = c.patch_size
    g = c.grid_size
    pw, pb = spec.w("patch_embed.weight"), spec.w("patch_embed.bias")
    pos = spec.w("pos_embed")
    tokens = [[a + b for a, b in zip(spec.w("cls_token")[0], pos[0])]]
    for gy in range(g):
        for gx in range(g):
            vec = []
            for dy in range(p):
                for dx in range(p):
                    vec.extend(img[gy * p + dy][gx * p + dx])
            e = _linear(vec, pw, pb)
            tokens.append([a + b for a, b in zip(e, pos[1 + gy * g + gx])])
    return tokens


def naive_block(spec: ToyModelSpec, block: int, tokens):
    """One pre-norm block (``block`` is 1-based). Returns (tokens, attention[h][i][j])."""
    c = spec.config
    pre = f"blocks.{block - 1}."
    w = spec.w
    eps = c.ln_eps
    n = len(tokens)
    dh = c.head_dim

    z = [_layer_norm(t, w(pre + "ln1.gamma"), w(pre + "ln1.beta"), eps) for t in tokens]
    q = [_linear(t, w(pre + "attn.wq.weight"), w(pre + "attn.wq.bias")) for t in z]
    k = [_linear(t, w(pre + "attn.wk.weight"), w(pre + "attn.wk.bias")) for t in z]
    v = [_linear(t, w(pre + "attn.wv.weight"), w(pre + "attn.wv.bias")) for t in z]

    attn = []
    concat = [[0.0] * c.embed_dim for _ in range(n)]
    for h in range(c.num_heads):
        lo = h * dh
        a_h = []
        for i in range(n):
            logits = []
            for j in range(n):
                s = 0.0
                for e in range(dh):
                    s += q[i][lo + e] * k[j][lo + e]
                logits.append(s / math.sqrt(dh))
            a_h.append(_softmax(logits))
        attn.append(a_h)
        # attended value for query i: sum_j A[i][j] v_j
        for i in range(n):
            for e in range(dh):
                s = 0.0
                for j in range(n):
                    s += a_h[i][j] * v[j][lo + e]
                concat[i][lo + e] = s

    u = []
    for i in range(n):
        o = _linear(concat[i], w(pre + "attn.wo.weight"), w(pre + "attn.wo.bias"))
        u.append([a + b for a, b in zip(tokens[i], o)])
    out = []
    for t in u:
        y = _layer_norm(t, w(pre + "ln2.gamma"), w(pre + "ln2.beta"), eps)
        hdn = [_gelu(s) for s in _linear(y, w(pre + "ffn.fc1.weight"), w(pre + "ffn.fc1.bias"))]
        f = _linear(hdn, w(pre + "ffn.fc2.weight"), w(pre + "ffn.fc2.bias"))
        out.append([a + b for a, b in zip(t, f)])
    return out, attn


def naive_classify(spec: ToyModelSpec, tokens) -> list[float]:
    cls = _layer_norm(tokens[0], spec.w("norm.gamma"), spec.w("norm.beta"), spec.config.ln_eps)
    return _softmax(_linear(cls, spec.w("head.weight"), spec.w("head.bias")))


def naive_run(spec: ToyModelSpec, tokens, blocks):
    """Run the given 1-based blocks in order; returns (tokens, [attention per block])."""
    attns = []
    for b in blocks:
        tokens, a = naive_block(spec, b, tokens)
        attns.append(a)
    return tokens, attns


def naive_forward(spec: ToyModelSpec, image) -> list[float]:
    tokens = naive_tokens(spec, image)
    tokens, _ = naive_run(spec, tokens, range(1, spec.config.depth + 1))
    return naive_classify(spec, tokens)


def dense_on_subset(spec: ToyModelSpec, tokens, kept, remaining_blocks):
    """Keep the class token and patch positions ``kept``, then run ``remaining_blocks`` densely."""
    sub = [list(tokens[0])] + [list(tokens[k + 1]) for k in kept]
    out, _ = naive_run(spec, sub, remaining_blocks)
    return out


def naive_pruned_forward(spec: ToyModelSpec, image, events):
    """Replay a pruning trace: ``events`` is a list of ``(block, kept_patch_ids)``.

    Returns (probabilities, attention seen at each pruning block).
    """
    tokens = naive_tokens(spec, image)
    ids = list(range(spec.config.num_patches))
    by_block = dict(events)
    seen = {}
    start = 1
    for b in sorted(by_block):
        tokens, attns = naive_run(spec, tokens, range(start, b + 1))
        seen[b] = attns[-1]
        kept_ids = set(by_block[b])
        pos = [i for i, pid in enumerate(ids) if pid in kept_ids]
        tokens = dense_on_subset(spec, tokens, pos, ())
        ids = [ids[i] for i in pos]
        start = b + 1
    tokens, _ = naive_run(spec, tokens, range(start, spec.config.depth + 1))
    return naive_classify(spec, tokens), seen


# ------------------------------------------------------------ entropy


def naive_entropy(dist, alpha: float | None = None) -> float:
    """Shannon (``alpha`` None or 1) or Renyi entropy by direct exact-rounded summation."""
    p = [float(v) for v in dist]
    if alpha is None or alpha == 1:
        return -math.fsum(v * math.log(v) for v in p if v > 0)
    return math.log(math.fsum(v**alpha for v in p if v > 0)) / (1.0 - alpha)


def naive_patch_scores(attn, alpha: float | None = None) -> list[float]:
    """Head-averaged entropy per patch query from ``attn[h][i][j]`` nested lists."""
    heads = len(attn)
    n = len(attn[0])
    scores = []
    for i in range(1, n):
        per_head = []
        for h in range(heads):
            row = attn[h][i][1:]
            mass = math.fsum(row)
            per_head.append(naive_entropy([v / mass for v in row], alpha))
        scores.append(math.fsum(per_head) / heads)
    return scores
