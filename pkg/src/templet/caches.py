"""Template caches and the merge engine.

A cache is exactly one of three variants:

* :class:`KVCache`   -- per-layer key/value token banks, fused by token concatenation;
* :class:`LoRACache` -- per-linear low-rank deltas with a strength, fused by rank concatenation;
* :class:`PipelineArgs` -- sampler constraints (inpainting), collected in order.

Merges are pure and preserve activation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (KVBank, LoRADelta, ShapeError, Tensor, broadcast_to, concat, reshape,
                       scale, tensor)


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class KVCache:
    banks: dict[int, KVBank]

    cache_type = "kv"

    def token_counts(self) -> dict[int, int]:
        return {lid: b.n_tokens for lid, b in self.banks.items()}


@dataclass(frozen=True)
class LoRACache:
    deltas: dict[str, list[LoRADelta]]
    strength: float = 1.0

    cache_type = "lora"


@dataclass(frozen=True)
class StepConstraint:
    """Latent-space hard constraint; ``mask`` is 1 where the sampler may edit."""

    mask: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        if self.mask.shape != self.reference.shape:
            raise ShapeError(f"constraint mask {self.mask.shape} vs reference {self.reference.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise CacheError("constraint mask must be binary")


@dataclass(frozen=True)
class PipelineArgs:
    constraints: tuple[StepConstraint, ...]

    cache_type = "pipeline_args"


TemplateCache = KVCache | LoRACache | PipelineArgs


@dataclass
class CacheBundle:
    """What the sampler consumes: at most one KV map, one LoRA map and a constraint list."""

    kv: KVCache | None = None
    lora: LoRACache | None = None
    constraints: list[StepConstraint] = field(default_factory=list)

    def is_empty(self) -> bool:
        return self.kv is None and self.lora is None and not self.constraints

    def bank(self, layer_id: int) -> KVBank | None:
        return None if self.kv is None else self.kv.banks.get(layer_id)

    def lora_for(self, target_id: str) -> Sequence[LoRADelta]:
        if self.lora is None:
            return ()
        return self.lora.deltas.get(target_id, ())

    def lora_strength(self) -> float:
        return 1.0 if self.lora is None else self.lora.strength


def merge_kv(caches: Sequence[KVCache]) -> KVCache:
    """Concatenate banks along the token axis, per layer, in list order.

    Layers present in only some caches pass through unchanged.
    """
    if not caches:
        raise CacheError("merge_kv needs at least one cache")
    if len(caches) == 1:
        return caches[0]
    by_layer: dict[int, list[KVBank]] = {}
    for c in caches:
        for lid, bank in c.banks.items():
            by_layer.setdefault(lid, []).append(bank)
    merged = {}
    for lid in sorted(by_layer):
        banks = [b for b in by_layer[lid] if b.n_tokens > 0] or by_layer[lid][:1]
        if len(banks) == 1:
            merged[lid] = banks[0]
            continue
        widths = {b.d_model for b in banks}
        if len(widths) != 1:
            raise CacheError(f"merge_kv: layer {lid} banks disagree on width {sorted(widths)}")
        keys = _align_batch([b.keys for b in banks], lid)
        values = _align_batch([b.values for b in banks], lid)
        merged[lid] = KVBank(lid, concat(keys, axis=-2), concat(values, axis=-2))
    return KVCache(merged)


def _align_batch(ts: list[Tensor], lid: int) -> list[Tensor]:
    if all(t.ndim == 2 for t in ts):
        return ts
    batches = {t.shape[0] for t in ts if t.ndim == 3} - {1}
    if len(batches) > 1:
        raise CacheError(f"merge_kv: layer {lid} banks disagree on batch size {sorted(batches)}")
    b = batches.pop() if batches else 1
    out = []
    for t in ts:
        if t.ndim == 2:
            t = reshape(t, (1,) + t.shape)
        if t.shape[0] != b:
            t = broadcast_to(t, (b,) + t.shape[1:])
        out.append(t)
    return out


def merge_lora(caches: Sequence[LoRACache]) -> LoRACache:
    """Stack factors along the rank axis with each sub-delta's scale folded into ``up``.

    The merged cache has strength 1 and, per target, a single delta with
    ``alpha == rank`` so that applying it gives
    ``sum_i strength_i * alpha_i / r_i * up_i @ down_i``. Zero-strength
    caches contribute no factors at all.
    """
    if not caches:
        raise CacheError("merge_lora needs at least one cache")
    parts: dict[str, list[tuple[Tensor, Tensor]]] = {}
    shapes: dict[str, tuple[int, int]] = {}
    for c in caches:
        if c.strength == 0:
            continue
        for target, deltas in c.deltas.items():
            for d in deltas:
                shape = (d.d_out, d.d_in)
                if shapes.setdefault(target, shape) != shape:
                    raise CacheError(f"merge_lora: target {target} deltas disagree on shape "
                                     f"{shapes[target]} vs {shape}")
                k = c.strength * d.scale
                up = d.up if k == 1.0 else scale(d.up, k)
                parts.setdefault(target, []).append((d.down, up))
    merged = {}
    for target, pairs in parts.items():
        if len(pairs) == 1:
            down, up = pairs[0]
        else:
            downs = _align_lora_batch([p[0] for p in pairs])
            ups = _align_lora_batch([p[1] for p in pairs])
            down, up = concat(downs, axis=-2), concat(ups, axis=-1)
        merged[target] = [LoRADelta(target, down, up, alpha=float(down.shape[-2]))]
    return LoRACache(merged, 1.0)


def _align_lora_batch(ts: list[Tensor]) -> list[Tensor]:
    batched = [t.shape[0] for t in ts if t.ndim == 3]
    if not batched:
        return ts
    if len(set(batched) - {1}) > 1:
        raise CacheError(f"merge_lora: factors disagree on batch size {sorted(set(batched))}")
    b = max(batched)
    return [t if t.ndim == 3 and t.shape[0] == b else broadcast_to(t, (b,) + t.shape[-2:]) for t in ts]


def merge_heterogeneous(caches: Iterable[TemplateCache]) -> CacheBundle:
    """Group by variant and merge within groups; no variant is ever converted."""
    kv, lora, constraints = [], [], []
    for c in caches:
        if isinstance(c, KVCache):
            kv.append(c)
        elif isinstance(c, LoRACache):
            lora.append(c)
        elif isinstance(c, PipelineArgs):
            constraints.extend(c.constraints)
        else:
            raise CacheError(f"not a template cache: {type(c).__name__}")
    bundle = CacheBundle(constraints=constraints)
    if kv:
        bundle.kv = merge_kv(kv)
    if lora:
        merged = merge_lora(lora)
        bundle.lora = merged if merged.deltas else None
    return bundle


def kv_token_total(bundle: CacheBundle) -> dict[int, int]:
    return {} if bundle.kv is None else bundle.kv.token_counts()


def as_numpy_cache(cache: TemplateCache) -> TemplateCache:
    """Detach tensors from any tape (fresh leaves with the same data)."""
    if isinstance(cache, KVCache):
        return KVCache({lid: KVBank(lid, tensor(b.keys.data), tensor(b.values.data))
                        for lid, b in cache.banks.items()})
    if isinstance(cache, LoRACache):
        return LoRACache({t: [LoRADelta(t, tensor(d.down.data), tensor(d.up.data), d.alpha) for d in ds]
                          for t, ds in cache.deltas.items()}, cache.strength)
    return cache
