"""Desk-scale base pipeline: fixed VAE, tiny transformer denoiser, rectified-flow loss, guided Euler sampler."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import archive, manifest
from . import autodiff as ad
from .autodiff import Tensor
from .caches import CacheBundle, StepConstraint
from .rng import SplitMix64, derive_seed

IMAGE_SIZE = 32
LATENT_SIZE = 16
CHANNELS = 3
PATCH = 2
SHAPES = ("circle", "square", "triangle")
NULL_CONDITION = len(SHAPES)


class InjectionError(ValueError):
    """A cache does not fit the base model it is injected into."""


# --------------------------------------------------------------------------- VAE

def vae_encode(img: np.ndarray) -> np.ndarray:
    """2x2 average pool per channel; works on (H, W, 3) or a leading batch axis."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[-3], img.shape[-2]
    if h % 4 or w % 4:
        raise ValueError(f"image size {w}x{h} must be divisible by 4")
    lead = img.shape[:-3]
    x = img.reshape(lead + (h // 2, 2, w // 2, 2, img.shape[-1]))
    return x.mean(axis=(-4, -2), dtype=np.float32)


def vae_decode(lat: np.ndarray) -> np.ndarray:
    """2x upsample by pixel replication, clamped to [0, 1]."""
    lat = np.asarray(lat, dtype=np.float32)
    up = np.repeat(np.repeat(lat, 2, axis=-3), 2, axis=-2)
    return np.clip(up, 0.0, 1.0)


# --------------------------------------------------------------------------- model

@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    n_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    latent_size: int = LATENT_SIZE
    channels: int = CHANNELS
    patch: int = PATCH
    n_conditions: int = len(SHAPES)

    @property
    def n_patches(self) -> int:
        return (self.latent_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def null_condition(self) -> int:
        return self.n_conditions


def _init(rng: SplitMix64, shape, std: float) -> np.ndarray:
    return rng.normal(shape) * np.float32(std)


def init_denoiser_params(cfg: DenoiserConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = SplitMix64(derive_seed(seed, 7))
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    p: dict[str, np.ndarray] = {}

    def lin(name, d_in, d_out, std=None):
        p[f"{name}.weight"] = _init(rng, (d_out, d_in), std if std is not None else 1.0 / math.sqrt(d_in))
        p[f"{name}.bias"] = np.zeros(d_out, np.float32)

    lin("patch_embed", cfg.patch_dim, d)
    p["pos_embed"] = _init(rng, (cfg.n_patches, d), 0.02)
    lin("time_mlp.0", d, d)
    lin("time_mlp.1", d, d)
    p["cond_embed"] = _init(rng, (cfg.n_conditions + 1, d), 0.02)
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        p[f"{b}.ln1.gain"] = np.ones(d, np.float32)
        p[f"{b}.ln1.bias"] = np.zeros(d, np.float32)
        lin(f"{b}.attn.qkv", d, 3 * d)
        lin(f"{b}.attn.out", d, d, std=0.5 / math.sqrt(d))
        p[f"{b}.ln2.gain"] = np.ones(d, np.float32)
        p[f"{b}.ln2.bias"] = np.zeros(d, np.float32)
        lin(f"{b}.mlp.fc1", d, hid)
        lin(f"{b}.mlp.fc2", hid, d, std=0.5 / math.sqrt(hid))
    p["final_ln.gain"] = np.ones(d, np.float32)
    p["final_ln.bias"] = np.zeros(d, np.float32)
    lin("out", d, cfg.patch_dim, std=0.0)
    return p


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def patchify(x: Tensor, cfg: DenoiserConfig) -> Tensor:
    b = x.shape[0]
    g, p, c = cfg.latent_size // cfg.patch, cfg.patch, cfg.channels
    x = ad.reshape(x, (b, g, p, g, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, g * g, p * p * c))


def unpatchify(tokens: Tensor, cfg: DenoiserConfig) -> Tensor:
    b = tokens.shape[0]
    g, p, c = cfg.latent_size // cfg.patch, cfg.patch, cfg.channels
    x = ad.reshape(tokens, (b, g, g, p, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, g * p, g * p, c))


class DenoiserModel:
    """Velocity predictor ``(x_t, t, condition, caches) -> v``.

    Sequence layout: ``[time token, condition token, 64 patch tokens]``.
    KV banks are injected per block; every ``*.weight`` of a linear is a
    LoRA target addressed by its module name (``blocks.0.attn.qkv``).
    """

    PARAMS_NAME = "weights.tmpl"
    CONFIG_NAME = "config.txt"

    def __init__(self, params: dict[str, np.ndarray], cfg: DenoiserConfig | None = None,
                 trainable: bool = False):
        self.cfg = cfg or DenoiserConfig()
        self.params = {k: Tensor(v, trainable=trainable, name=k) for k, v in params.items()}

    @classmethod
    def create(cls, seed: int = 0, cfg: DenoiserConfig | None = None, trainable: bool = False):
        cfg = cfg or DenoiserConfig()
        return cls(init_denoiser_params(cfg, seed), cfg, trainable)

    # ------------------------------------------------------------------ introspection

    @property
    def linear_targets(self) -> dict[str, tuple[int, int]]:
        return {k[:-len(".weight")]: v.shape for k, v in self.params.items()
                if k.endswith(".weight") and v.ndim == 2}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def weights_sha256(self) -> str:
        return hashlib.sha256(archive.dumps(self.state_dict())).hexdigest()

    def check_bundle(self, bundle: CacheBundle | None) -> None:
        if bundle is None:
            return
        if bundle.kv is not None:
            for lid, bank in bundle.kv.banks.items():
                if not 0 <= lid < self.cfg.depth:
                    raise InjectionError(f"KV bank targets layer {lid}; model has {self.cfg.depth} layers")
                if bank.d_model != self.cfg.d_model:
                    raise InjectionError(f"KV bank for layer {lid} has width {bank.d_model}, "
                                         f"model width is {self.cfg.d_model}")
        if bundle.lora is not None:
            targets = self.linear_targets
            for tid, deltas in bundle.lora.deltas.items():
                if tid not in targets:
                    raise InjectionError(f"LoRA target {tid!r} is not a linear of the base model")
                for d in deltas:
                    if (d.d_out, d.d_in) != targets[tid]:
                        raise InjectionError(f"LoRA target {tid}: delta {(d.d_out, d.d_in)} "
                                             f"vs weight {targets[tid]}")
        for c in bundle.constraints:
            if c.mask.shape != (self.cfg.latent_size, self.cfg.latent_size, self.cfg.channels):
                raise InjectionError(f"constraint shape {c.mask.shape} does not match the latent")

    # ------------------------------------------------------------------ forward

    def _linear(self, name: str, x: Tensor, bundle: CacheBundle | None) -> Tensor:
        lora = () if bundle is None else bundle.lora_for(name)
        if lora and bundle.lora_strength() != 1.0:
            s = bundle.lora_strength()
            lora = [ad.LoRADelta(d.target_id, d.down, d.up, d.alpha * s) for d in lora]
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], lora)

    def embed_patches(self, x, bundle: CacheBundle | None = None) -> Tensor:
        tokens = self._linear("patch_embed", patchify(ad.tensor(x), self.cfg), bundle)
        return ad.add(tokens, self.params["pos_embed"])

    def forward(self, x, t, cond, bundle: CacheBundle | None = None,
                extra_tokens: Tensor | None = None) -> Tensor:
        """``x``: (B, 16, 16, 3); ``t``: (B,); ``cond``: (B,) ints. Returns velocity, same shape as x."""
        p, cfg = self.params, self.cfg
        x = ad.tensor(x)
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float32).reshape(-1), (b,))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64).reshape(-1), (b,))
        h = self.embed_patches(x, bundle)
        temb = self._linear("time_mlp.0", ad.tensor(timestep_features(t, cfg.d_model)), bundle)
        temb = self._linear("time_mlp.1", ad.gelu(temb), bundle)
        cemb = ad.index(p["cond_embed"], cond)
        seq = [ad.reshape(temb, (b, 1, cfg.d_model)), ad.reshape(cemb, (b, 1, cfg.d_model)), h]
        if extra_tokens is not None:
            seq.append(extra_tokens)
        h = ad.concat(seq, axis=1)
        for i in range(cfg.depth):
            h = self._block(i, h, bundle)
        n = cfg.n_patches
        h = ad.index(h, (slice(None), slice(2, 2 + n)))
        h = ad.layernorm(h, p["final_ln.gain"], p["final_ln.bias"])
        return unpatchify(self._linear("out", h, bundle), cfg)

    def _block(self, i: int, h: Tensor, bundle: CacheBundle | None) -> Tensor:
        p, d = self.params, self.cfg.d_model
        pre = f"blocks.{i}"
        a = ad.layernorm(h, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
        qkv = self._linear(f"{pre}.attn.qkv", a, bundle)
        q = ad.index(qkv, (Ellipsis, slice(0, d)))
        k = ad.index(qkv, (Ellipsis, slice(d, 2 * d)))
        v = ad.index(qkv, (Ellipsis, slice(2 * d, 3 * d)))
        bank = None if bundle is None else bundle.bank(i)
        att = ad.attention_injected(q, k, v, bank, self.cfg.n_heads)
        h = ad.add(h, self._linear(f"{pre}.attn.out", att, bundle))
        m = ad.layernorm(h, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
        m = self._linear(f"{pre}.mlp.fc2", ad.gelu(self._linear(f"{pre}.mlp.fc1", m, bundle)), bundle)
        return ad.add(h, m)

    __call__ = forward

    # ------------------------------------------------------------------ persistence

    def save(self, directory) -> str:
        os.makedirs(directory, exist_ok=True)
        data = archive.save(os.path.join(directory, self.PARAMS_NAME), self.state_dict())
        digest = hashlib.sha256(data).hexdigest()
        cfg = {f"model.{k}": v for k, v in self.cfg.__dict__.items()}
        cfg["weights_sha256"] = digest
        with open(os.path.join(directory, self.CONFIG_NAME), "w", encoding="utf-8", newline="\n") as f:
            f.write("# base denoiser\n" + manifest.dumps(cfg))
        return digest

    @classmethod
    def load(cls, directory) -> "DenoiserModel":
        from .package import IntegrityError

        with open(os.path.join(directory, cls.CONFIG_NAME), encoding="utf-8") as f:
            meta = manifest.loads(f.read())
        with open(os.path.join(directory, cls.PARAMS_NAME), "rb") as f:
            data = f.read()
        if hashlib.sha256(data).hexdigest() != meta.get("weights_sha256"):
            raise IntegrityError(f"base weights in {directory} do not match their recorded sha256")
        cfg = DenoiserConfig(**manifest.unflatten("model", meta))
        return cls(archive.loads(data), cfg)


# --------------------------------------------------------------------------- loss

def interpolate(x0: np.ndarray, noise: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float32).reshape((-1,) + (1,) * (np.ndim(x0) - 1)) if np.ndim(t) else np.float32(t)
    return ((1 - t) * x0 + t * noise).astype(np.float32)


def flow_loss(model, x0, cond, noise, t, bundle: CacheBundle | None = None) -> Tensor:
    """Rectified flow: ``mse(model(x_t, t), noise - x0)`` with ``x_t = (1-t) x0 + t noise``."""
    t = np.asarray(t, dtype=np.float32)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("flow_loss: t must lie strictly inside (0, 1)")
    x0 = np.asarray(x0, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    xt = interpolate(x0, noise, t)
    target = (noise - x0).astype(np.float32)
    return ad.mse(model(xt, t, cond, bundle), target)


# --------------------------------------------------------------------------- sampling

@dataclass
class TemplateSpec:
    """One enabled template: a display name, a package reference and its raw input."""

    name: str
    ref: Any
    input: Any


@dataclass
class GenerationRequest:
    condition_id: int = 0
    seed: int = 0
    steps: int = 50
    guidance_scale: float = 4.0
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE
    templates: list[TemplateSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if (self.width, self.height) != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"the desk-scale backbone generates {IMAGE_SIZE}x{IMAGE_SIZE} images only")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.height // 2, self.width // 2, CHANNELS)


def guide(v_cond: np.ndarray, v_null: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free guidance; s=0 and s=1 return the branch itself exactly."""
    if s == 0:
        return v_null
    if s == 1:
        return v_cond
    return v_null + np.float32(s) * (v_cond - v_null)


def forward_noised(reference: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    if t == 0:
        return reference
    return interpolate(reference, noise, t)


def apply_step_constraints(latent: np.ndarray, constraints: Sequence[StepConstraint], t_next: float,
                           noise: np.ndarray | None = None) -> np.ndarray:
    """Replace each constraint's frozen region (mask == 0) with its reference, re-noised to ``t_next``."""
    for c in constraints:
        if c.mask.shape != latent.shape:
            raise ad.ShapeError(f"constraint mask {c.mask.shape} vs latent {latent.shape}")
        if t_next != 0 and noise is None:
            raise ValueError("intermediate constraint steps need a noise sample")
        ref = forward_noised(c.reference, noise, t_next)
        latent = np.where(c.mask > 0.5, latent, ref)
    return latent


def sample_latent(model: DenoiserModel, request: GenerationRequest, bundle: CacheBundle | None = None,
                  on_step: Callable[[int], None] | None = None,
                  on_constraint: Callable[[int], None] | None = None,
                  velocity_fn: Callable | None = None) -> np.ndarray:
    """Euler integration from t=1 (seeded noise) to t=0 with guidance and step constraints."""
    bundle = bundle or CacheBundle()
    model.check_bundle(bundle)
    rng = SplitMix64(request.seed)
    x = rng.normal(request.latent_shape)
    constraint_rng = SplitMix64(derive_seed(request.seed, 1))
    # one re-noising sample per run keeps the constrained region on a straight path
    constraint_noise = constraint_rng.normal(request.latent_shape) if bundle.constraints else None
    conds = np.array([request.condition_id, model.cfg.null_condition])
    n = request.steps
    for i in range(n):
        t = 1.0 - i / n
        t_next = 0.0 if i == n - 1 else 1.0 - (i + 1) / n
        if velocity_fn is not None:
            v_cond, v_null = velocity_fn(x, t, conds)
        else:
            out = model(np.stack([x, x]), np.full(2, t, np.float32), conds, bundle).data
            v_cond, v_null = out[0], out[1]
        v = guide(v_cond, v_null, request.guidance_scale)
        x = (x - np.float32(t - t_next) * v).astype(np.float32)
        if on_step is not None:
            on_step(i)
        if bundle.constraints:
            x = apply_step_constraints(x, bundle.constraints, t_next, constraint_noise)
            if on_constraint is not None:
                on_constraint(i)
    return x


def sample(model: DenoiserModel, request: GenerationRequest, bundle: CacheBundle | None = None,
           **kwargs) -> np.ndarray:
    return vae_decode(sample_latent(model, request, bundle, **kwargs))
