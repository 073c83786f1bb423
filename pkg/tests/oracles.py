"""Independent reference implementations used by the tests.

Everything here is plain numpy in float64 and shares no code with the package.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def mha_full_sequence(q, k, v, n_heads, bank_k=None, bank_v=None):
    """Per-batch, per-head loop over an explicitly concatenated key/value sequence."""
    q, k, v = (np.asarray(a, np.float64) for a in (q, k, v))
    if bank_k is not None and len(bank_k):
        k = np.concatenate([np.broadcast_to(bank_k, (k.shape[0],) + bank_k.shape[-2:]), k], axis=1)
        v = np.concatenate([np.broadcast_to(bank_v, (v.shape[0],) + bank_v.shape[-2:]), v], axis=1)
    b, n, d = q.shape
    dh = d // n_heads
    out = np.zeros((b, n, d))
    for bi in range(b):
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[bi, :, sl] @ k[bi, :, sl].T / np.sqrt(dh)
            out[bi, :, sl] = softmax(scores) @ v[bi, :, sl]
    return out


def dense_lora(weight, factors):
    """``weight + sum(strength * alpha / r * up @ down)`` for (down, up, alpha, strength) tuples."""
    w = np.asarray(weight, np.float64).copy()
    for down, up, alpha, strength in factors:
        down, up = np.asarray(down, np.float64), np.asarray(up, np.float64)
        w += strength * alpha / down.shape[0] * (up @ down)
    return w


def avg_pool2(img):
    h, w, c = img.shape
    out = np.zeros((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = img[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1))
    return out


def splitmix64(seed: int, n: int) -> list[int]:
    """Textbook SplitMix64 in pure Python integers."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def select(mask, a, b):
    """Per-element ``a if mask else b`` by explicit iteration."""
    out = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        out[idx] = a[idx] if mask[idx] > 0.5 else b[idx]
    return out
