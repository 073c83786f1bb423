"""Test utilities that drive the package (unlike ``oracles``, which stand alone)."""

from __future__ import annotations

import numpy as np

from templet import autodiff as ad
from templet.autodiff import Tape, Tensor

# slices whose gradient is (numerically) zero on both sides compare against this floor
GRAD_FLOOR = 1e-6


def slice_gradcheck(loss_of, weights: dict[str, np.ndarray], per_tensor: int = 6, eps: float = 1e-3,
                    seed: int = 0) -> dict[str, float]:
    """Relative error of tape gradients vs central differences on a random slice of every tensor.

    ``loss_of(params: dict[str, Tensor]) -> Tensor`` must be a scalar; runs in float64.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    with ad.default_dtype(np.float64):
        w64 = {k: np.asarray(v, np.float64) for k, v in weights.items()}
        leaves = {k: Tensor(v, trainable=True, name=k) for k, v in w64.items()}
        with Tape() as tape:
            loss = loss_of(leaves)
        grads = ad.backward(tape, loss)
        for name in sorted(w64):
            flat = w64[name].reshape(-1)
            idx = rng.choice(flat.size, size=min(per_tensor, flat.size, 64), replace=False)
            analytic = grads.get(leaves[name], np.zeros_like(w64[name])).reshape(-1)[idx]
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                vals = []
                for sign in (1.0, -1.0):
                    pert = flat.copy()
                    pert[i] += sign * eps
                    params = {k: Tensor(v) for k, v in w64.items()}
                    params[name] = Tensor(pert.reshape(w64[name].shape))
                    vals.append(loss_of(params).item())
                numeric[j] = (vals[0] - vals[1]) / (2 * eps)
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
            errors[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return errors


def jitter(weights: dict[str, np.ndarray], scale: float = 0.1, seed: int = 0) -> dict[str, np.ndarray]:
    """Move weights off degenerate initial values (zero factors, unit gains)."""
    rng = np.random.default_rng(seed)
    return {k: (v + scale * rng.standard_normal(v.shape)).astype(np.float32) for k, v in weights.items()}
