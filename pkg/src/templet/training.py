"""Two-stage template training and base-model pretraining.

Stage I runs ``process_inputs`` without a tape and keeps the features in a
content-addressed cache; Stage II optimizes template parameters only, through
``forward`` and the frozen base's flow loss.
"""

from __future__ import annotations

import hashlib
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import archive
from . import autodiff as ad
from .backbone import DenoiserModel, flow_loss, vae_encode
from .caches import merge_heterogeneous
from .package import TemplateModel
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

T_MIN, T_MAX = 0.001, 0.999


class FrozenParameterError(RuntimeError):
    """A gradient reached (or a weight of) the frozen base model."""


class FeatureCacheWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    cache_dir: str | None = None
    condition_dropout: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            g = g.astype(np.float32, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    losses: list[float]
    dead_parameters: list[str] = field(default_factory=list)


def write_loss_csv(path, losses: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v!r}\n")


def read_loss_csv(path) -> list[float]:
    with open(path, encoding="utf-8") as f:
        rows = f.read().split("\n")[1:]
    return [float(r.split(",")[1]) for r in rows if r]


def moving_average(xs: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.size < window:
        return np.array([x.mean()])
    return np.convolve(x, np.ones(window) / window, mode="valid")


def drop_conditions(rng: SplitMix64, conds: np.ndarray, rate: float, null_id: int) -> np.ndarray:
    keep = rng.uniform(len(conds)) >= rate
    return np.where(keep, conds, null_id)


# --------------------------------------------------------------------------- stage I

def feature_key(template: TemplateModel, raw) -> str:
    h = hashlib.sha256()
    h.update(template.manifest.name.encode("utf-8") + b"\0")
    h.update(template.manifest.version.encode("utf-8") + b"\0")
    h.update(template.serialize_input(raw))
    return h.hexdigest()


@dataclass
class FeatureCacheEntry:
    key: str
    features: dict[str, np.ndarray]


class FeatureCache:
    """One TensorArchive per key (``<key>``) with a ``<key>.sha256`` sidecar guarding corruption."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self.computations = 0
        self.writes = 0
        self.hits = 0
        self.corrupt = 0

    def _paths(self, key: str) -> tuple[str, str]:
        p = os.path.join(self.directory, key)
        return p, p + ".sha256"

    def read(self, key: str) -> dict[str, np.ndarray] | None:
        path, side = self._paths(key)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as f:
            data = f.read()
        try:
            with open(side, encoding="ascii") as f:
                expected = f.read().strip()
        except OSError:
            expected = ""
        if hashlib.sha256(data).hexdigest() != expected:
            self.corrupt += 1
            warnings.warn(f"feature cache entry {key} is corrupt; recomputing", FeatureCacheWarning, stacklevel=3)
            return None
        try:
            return archive.loads(data)
        except archive.ArchiveError:
            self.corrupt += 1
            warnings.warn(f"feature cache entry {key} is unreadable; recomputing", FeatureCacheWarning, stacklevel=3)
            return None

    def write(self, key: str, features: dict[str, np.ndarray]) -> None:
        path, side = self._paths(key)
        data = archive.dumps(features)
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "wb") as f:
            f.write(data)
        with open(side, "w", encoding="ascii") as f:
            f.write(hashlib.sha256(data).hexdigest())
        os.replace(tmp, path)
        self.writes += 1

    def get(self, template: TemplateModel, raw) -> FeatureCacheEntry:
        key = feature_key(template, raw)
        feats = self.read(key)
        if feats is not None:
            self.hits += 1
            return FeatureCacheEntry(key, feats)
        feats = template.process_inputs(raw)
        self.computations += 1
        self.write(key, feats)
        return FeatureCacheEntry(key, feats)


def stage1_preprocess(template: TemplateModel, samples: Sequence, cache: FeatureCache) -> Iterator[FeatureCacheEntry]:
    """Gradient-free feature extraction, served from ``cache`` when possible."""
    for s in samples:
        yield cache.get(template, s.input)


def _features(template: TemplateModel, samples: Sequence, cache_dir: str | None) -> list[dict[str, np.ndarray]]:
    if cache_dir is None:
        return [template.process_inputs(s.input) for s in samples]
    return [e.features for e in stage1_preprocess(template, samples, FeatureCache(cache_dir))]


# --------------------------------------------------------------------------- stage II

def _assert_frozen(base: DenoiserModel) -> None:
    live = [k for k, t in base.params.items() if t.trainable]
    if live:
        raise FrozenParameterError(f"base parameters marked trainable: {', '.join(live[:5])}")


def stage2_train(template: TemplateModel, base: DenoiserModel, samples: Sequence, config: TrainConfig,
                 features: list[dict[str, np.ndarray]] | None = None) -> TrainResult:
    """Adam on template parameters against the frozen base's flow loss."""
    _assert_frozen(base)
    base_hash = base.weights_sha256()
    if features is None:
        features = _features(template, samples, config.cache_dir)
    keys = list(features[0]) if features else []
    stacked = {k: np.stack([f[k] for f in features]) for k in keys}
    x0_all = vae_encode(np.stack([s.target for s in samples]))
    conds_all = np.array([s.condition_id for s in samples], dtype=np.int64)
    opt = Adam(template.weights, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = SplitMix64(derive_seed(config.seed, 2))
    base_ids = {id(t): k for k, t in base.params.items()}
    seen_grad = {k: False for k in opt.params}
    losses = []
    for step in range(config.steps):
        idx = rng.integers(len(samples), size=config.batch_size)
        conds = drop_conditions(rng, conds_all[idx], config.condition_dropout, base.cfg.null_condition)
        t = (T_MIN + (T_MAX - T_MIN) * rng.uniform(config.batch_size)).astype(np.float32)
        noise = rng.normal(x0_all[idx].shape)
        params = {k: ad.Tensor(v, trainable=True, name=k) for k, v in opt.params.items()}
        with ad.Tape() as tape:
            caches = template.forward({k: v[idx] for k, v in stacked.items()}, params)
            bundle = merge_heterogeneous(caches)
            loss = flow_loss(base, x0_all[idx], conds, noise, t, bundle)
        grads = ad.backward(tape, loss)
        named = {}
        for tensor_, g in grads.items():
            if id(tensor_) in base_ids:
                raise FrozenParameterError(f"gradient reached base parameter {base_ids[id(tensor_)]}")
            named[tensor_.name] = g
        if step < 10:
            for k, g in named.items():
                seen_grad[k] = seen_grad[k] or bool(np.any(g != 0))
        opt.step(named)
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("template %s step %d loss %.5f", template.name, step, losses[-1])
    if base.weights_sha256() != base_hash:
        raise FrozenParameterError("base weights changed during template training")
    dead = [k for k, v in seen_grad.items() if not v] if config.steps >= 10 else []
    return TrainResult(opt.params, losses, dead)


def train_template(template: TemplateModel, base: DenoiserModel, samples: Sequence,
                   config: TrainConfig) -> tuple[TemplateModel, TrainResult]:
    result = stage2_train(template, base, samples, config)
    return template.with_weights(result.weights), result


# --------------------------------------------------------------------------- base

def train_base(samples: Sequence, config: TrainConfig, model: DenoiserModel | None = None) -> tuple[DenoiserModel, TrainResult]:
    """Pretrain the toy backbone with condition dropout so guidance works."""
    base = model or DenoiserModel.create(config.seed)
    opt = Adam(base.state_dict(), config.learning_rate, config.beta1, config.beta2, config.eps)
    x0_all = vae_encode(np.stack([s.target for s in samples]))
    conds_all = np.array([s.condition_id for s in samples], dtype=np.int64)
    rng = SplitMix64(derive_seed(config.seed, 3))
    losses = []
    for step in range(config.steps):
        idx = rng.integers(len(samples), size=config.batch_size)
        conds = drop_conditions(rng, conds_all[idx], config.condition_dropout, base.cfg.null_condition)
        t = (T_MIN + (T_MAX - T_MIN) * rng.uniform(config.batch_size)).astype(np.float32)
        noise = rng.normal(x0_all[idx].shape)
        model_ = DenoiserModel(opt.params, base.cfg, trainable=True)
        with ad.Tape() as tape:
            loss = flow_loss(model_, x0_all[idx], conds, noise, t)
        grads = ad.backward(tape, loss)
        opt.step({t_.name: g for t_, g in grads.items()})
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("base step %d loss %.5f", step, losses[-1])
    return DenoiserModel(opt.params, base.cfg), TrainResult(opt.params, losses)
