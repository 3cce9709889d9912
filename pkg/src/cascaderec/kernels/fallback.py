"""Pure-numpy implementations of the hot kernels.

Mirrors the math of the compiled ``_core`` extension exactly (same masking,
same tie-break rules); selected automatically when the extension is missing
or when ``CASCADEREC_NO_EXT=1``.
"""

import numpy as np


def nearest_centroid(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096):
    """Nearest centroid per row by squared Euclidean distance.

    Ties break to the lowest centroid index. Returns (indices [n] int64,
    squared distances [n] float64).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    c_sq = np.einsum("kd,kd->k", c, c)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        xb = x[lo:hi]
        d2 = np.einsum("nd,nd->n", xb, xb)[:, None] - 2.0 * (xb @ c.T) + c_sq[None, :]
        best = np.argmin(d2, axis=1)
        idx[lo:hi] = best
        dist[lo:hi] = np.maximum(d2[np.arange(hi - lo), best], 0.0)
    return idx, dist


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def gated_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    first_valid: np.ndarray, inv_scale: float):
    """Softmax-free gated attention: O = (silu(Q K^T) * inv_scale * mask) V.

    q, k, v: [B, heads, L, dh]; position t of batch row b is valid iff
    t >= first_valid[b]; scores are causal over valid positions. Returns
    (S, O) where S holds raw scores zeroed outside the mask (cached for
    the backward pass).
    """
    b, _, l, _ = q.shape
    t_idx = np.arange(l)
    causal = t_idx[None, :, None] >= t_idx[None, None, :]  # [1, L, L] query >= key
    valid = t_idx[None, :] >= np.asarray(first_valid).reshape(b, 1)  # [B, L]
    mask = (causal & valid[:, None, :] & valid[:, :, None])[:, None, :, :]
    s = np.einsum("bhtd,bhsd->bhts", q, k) * mask
    a = _silu(s) * inv_scale * mask
    o = np.einsum("bhts,bhsd->bhtd", a, v)
    return s, o


def attention_mask(first_valid: np.ndarray, l: int) -> np.ndarray:
    """The [B, 1, L, L] causal+validity mask used by gated_attention."""
    b = len(first_valid)
    t_idx = np.arange(l)
    causal = t_idx[None, :, None] >= t_idx[None, None, :]
    valid = t_idx[None, :] >= np.asarray(first_valid).reshape(b, 1)
    return (causal & valid[:, None, :] & valid[:, :, None])[:, None, :, :]


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def gated_attention_backward(do: np.ndarray, s: np.ndarray, q: np.ndarray,
                             k: np.ndarray, v: np.ndarray,
                             first_valid: np.ndarray, inv_scale: float):
    """Adjoint of gated_attention: (dQ, dK, dV) from dO and the cached scores."""
    mask = attention_mask(first_valid, q.shape[2])
    a = _silu(s) * inv_scale * mask
    da = np.einsum("bhtd,bhsd->bhts", do, v) * mask
    dv = np.einsum("bhts,bhtd->bhsd", a, do)
    ds = da * _silu_grad(s) * inv_scale * mask
    dq = np.einsum("bhts,bhsd->bhtd", ds, k)
    dk = np.einsum("bhts,bhtd->bhsd", ds, q)
    return dq, dk, dv
