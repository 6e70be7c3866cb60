"""Dense float64 kernels shared by the model, scoring and pruning code.

Matrices are plain 2-D numpy arrays of dtype float64. ``matmul`` accumulates
over the inner dimension strictly left to right so results are reproducible
bit for bit and agree exactly with a scalar triple loop.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy.special import erf

__all__ = ["ShapeError", "as_matrix", "matmul", "softmax_rows", "layer_norm", "gelu"]

LN_EPS = 1e-6
_SQRT_HALF = np.sqrt(0.5)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    ``out[i, j] = ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, each product and
    each partial sum rounded separately, exactly like a naive loop.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


# no fastmath: LLVM must not contract to FMA or reorder the k loop
@njit(cache=True, nogil=True)
def _matmul_kernel(a, b):
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for k in range(inner):
            aik = a[i, k]
            for j in range(cols):
                out[i, j] += aik * b[k, j]
    return out


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """Normalise each row (token) over its features, then apply ``gamma``/``beta``."""
    x = as_matrix(x)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    d = x.shape[1]
    if gamma.shape[0] != d or beta.shape[0] != d:
        raise ShapeError(f"layer_norm: features={d}, gamma={gamma.shape}, beta={beta.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    denom = np.sqrt(var + eps)
    # eps=0 on a constant row would divide 0 by 0
    denom[denom == 0.0] = 1.0
    return xc / denom * gamma + beta


def gelu(x) -> np.ndarray:
    """Exact (erf) GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))
