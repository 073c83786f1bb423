"""Built-in template kinds.

=================  ==============  ==========================================
kind               cache           used for
=================  ==============  ==========================================
scalar_control     kv              brightness (1 scalar), color (3 scalars)
image_kv           kv              structural control, editing, super-res
image_lora         lora            content reference
preference_lora    lora            aesthetic alignment
inpaint            pipeline_args   local inpainting (+ a kv cache)
=================  ==============  ==========================================
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .. import autodiff as ad
from ..autodiff import KVBank, LoRADelta, ShapeError, Tensor
from ..backbone import DenoiserConfig, patchify, vae_encode
from ..caches import KVCache, LoRACache, PipelineArgs, StepConstraint
from ..images import read_mask, read_ppm
from ..package import TemplateModel, register
from ..rng import SplitMix64, derive_seed

_BASE = DenoiserConfig()


def _normal(rng: SplitMix64, shape, std: float) -> np.ndarray:
    return rng.normal(shape) * np.float32(std)


def _linear_init(p: dict, rng: SplitMix64, name: str, d_in: int, d_out: int, std: float | None = None):
    p[f"{name}.weight"] = _normal(rng, (d_out, d_in), 1.0 / math.sqrt(d_in) if std is None else std)
    p[f"{name}.bias"] = np.zeros(d_out, np.float32)


def _lin(params: dict[str, Tensor], name: str, x) -> Tensor:
    return ad.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _check_features(features: dict[str, np.ndarray], key: str, tail: tuple[int, ...]) -> np.ndarray:
    if key not in features:
        raise ShapeError(f"missing feature {key!r}")
    arr = np.asarray(features[key], dtype=np.float32)
    if arr.shape[1:] != tail:
        raise ShapeError(f"feature {key!r} has shape {arr.shape}, expected (batch,) + {tail}")
    return arr


def _kv_from_flat(flat: Tensor, layers: int, n_tokens: int, d: int) -> KVCache:
    """(B, layers*2*n_tokens*d) -> one bank per layer."""
    b = flat.shape[0]
    x = ad.reshape(flat, (b, layers, 2, n_tokens, d))
    banks = {}
    for i in range(layers):
        banks[i] = KVBank(i, ad.index(x, (slice(None), i, 0)), ad.index(x, (slice(None), i, 1)))
    return KVCache(banks)


def _image_raw(raw) -> np.ndarray:
    if isinstance(raw, str):
        raw = read_ppm(raw)
    img = np.asarray(raw, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    return img


def _array_bytes(*arrays: np.ndarray) -> bytes:
    out = []
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f4")
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
    return b"".join(out)


# --------------------------------------------------------------------------- scalar control

def scalar_encoding(values, n_freqs: int) -> np.ndarray:
    """Per scalar: ``[s, sin(2^k pi s), cos(2^k pi s)]`` for k < n_freqs."""
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    freqs = (2.0 ** np.arange(n_freqs)) * math.pi
    enc = np.concatenate([v, np.sin(v * freqs), np.cos(v * freqs)], axis=1)
    return enc.reshape(-1).astype(np.float32)


@register("scalar_control")
class ScalarControlTemplate(TemplateModel):
    """Positional encoding of one or more scalars -> 2 FC layers -> KV tokens for every base layer."""

    cache_type = "kv"

    @classmethod
    def default_hyperparameters(cls):
        return {"n_scalars": 1, "n_freqs": 8, "hidden": 128, "n_tokens": 4,
                "layers": _BASE.depth, "d_model": _BASE.d_model}

    @classmethod
    def input_schema(cls, hp):
        if hp["n_scalars"] == 1:
            return {"value": "float[0,1]"}
        names = "rgb" if hp["n_scalars"] == 3 else [f"s{i}" for i in range(hp["n_scalars"])]
        return {n: "float[0,1]" for n in names}

    @staticmethod
    def encoding_dim(hp) -> int:
        return hp["n_scalars"] * (1 + 2 * hp["n_freqs"])

    @classmethod
    def init_weights(cls, hp, seed):
        rng = SplitMix64(derive_seed(seed, 101))
        p: dict[str, np.ndarray] = {}
        out = hp["layers"] * 2 * hp["n_tokens"] * hp["d_model"]
        _linear_init(p, rng, "fc1", cls.encoding_dim(hp), hp["hidden"])
        _linear_init(p, rng, "fc2", hp["hidden"], out, std=0.1 / math.sqrt(hp["hidden"]))
        return p

    def process_inputs(self, raw):
        vals = np.atleast_1d(np.asarray(raw, dtype=np.float64))
        if vals.size != self.hp["n_scalars"]:
            raise ShapeError(f"{self.name}: expected {self.hp['n_scalars']} scalars, got {vals.size}")
        return {"encoding": scalar_encoding(vals, self.hp["n_freqs"])}

    def forward(self, features, params=None):
        params = params or self.params()
        hp = self.hp
        enc = _check_features(features, "encoding", (self.encoding_dim(hp),))
        h = ad.gelu(_lin(params, "fc1", enc))
        flat = _lin(params, "fc2", h)
        return [_kv_from_flat(flat, hp["layers"], hp["n_tokens"], hp["d_model"])]

    def serialize_input(self, raw):
        vals = np.atleast_1d(np.asarray(raw, dtype=np.float64))
        return struct.pack(f"<{vals.size}d", *vals)

    def parse_input(self, text):
        text = text.strip()
        if text.startswith("#") and len(text) == 7:
            vals = [int(text[i:i + 2], 16) / 255.0 for i in (1, 3, 5)]
        else:
            vals = [float(v) for v in text.split(",")]
        return vals[0] if len(vals) == 1 else tuple(vals)


# --------------------------------------------------------------------------- image -> kv

class _ImageEncoderMixin:
    """Patch embed on the latent grid + small pre-LN transformer."""

    @staticmethod
    def _encoder_init(p, rng, hp):
        d, hid = hp["d_model"], hp["d_model"] * hp["mlp_ratio"]
        _linear_init(p, rng, "patch_embed", hp["in_channels"] * _BASE.patch ** 2, d)
        p["pos_embed"] = _normal(rng, (_BASE.n_patches, d), 0.02)
        for i in range(hp["n_blocks"]):
            b = f"enc.{i}"
            p[f"{b}.ln1.gain"] = np.ones(d, np.float32)
            p[f"{b}.ln1.bias"] = np.zeros(d, np.float32)
            _linear_init(p, rng, f"{b}.attn.qkv", d, 3 * d)
            _linear_init(p, rng, f"{b}.attn.out", d, d, std=0.5 / math.sqrt(d))
            p[f"{b}.ln2.gain"] = np.ones(d, np.float32)
            p[f"{b}.ln2.bias"] = np.zeros(d, np.float32)
            _linear_init(p, rng, f"{b}.mlp.fc1", d, hid)
            _linear_init(p, rng, f"{b}.mlp.fc2", hid, d, std=0.5 / math.sqrt(hid))
        p["enc_ln.gain"] = np.ones(d, np.float32)
        p["enc_ln.bias"] = np.zeros(d, np.float32)

    @staticmethod
    def _encode(params, latent: np.ndarray, hp) -> Tensor:
        cfg = DenoiserConfig(channels=hp["in_channels"])
        d = hp["d_model"]
        h = ad.add(_lin(params, "patch_embed", patchify(ad.tensor(latent), cfg)), params["pos_embed"])
        for i in range(hp["n_blocks"]):
            b = f"enc.{i}"
            a = ad.layernorm(h, params[f"{b}.ln1.gain"], params[f"{b}.ln1.bias"])
            qkv = _lin(params, f"{b}.attn.qkv", a)
            q = ad.index(qkv, (Ellipsis, slice(0, d)))
            k = ad.index(qkv, (Ellipsis, slice(d, 2 * d)))
            v = ad.index(qkv, (Ellipsis, slice(2 * d, 3 * d)))
            h = ad.add(h, _lin(params, f"{b}.attn.out", ad.attention(q, k, v, hp["n_heads"])))
            m = ad.layernorm(h, params[f"{b}.ln2.gain"], params[f"{b}.ln2.bias"])
            h = ad.add(h, _lin(params, f"{b}.mlp.fc2", ad.gelu(_lin(params, f"{b}.mlp.fc1", m))))
        return ad.layernorm(h, params["enc_ln.gain"], params["enc_ln.bias"])


@register("image_kv")
class ImageConditionTemplate(_ImageEncoderMixin, TemplateModel):
    """Condition image -> latent patches -> 2 transformer blocks -> one KV token per patch per base layer."""

    cache_type = "kv"

    @classmethod
    def default_hyperparameters(cls):
        return {"d_model": _BASE.d_model, "n_heads": 4, "n_blocks": 2, "mlp_ratio": 2,
                "layers": _BASE.depth, "in_channels": _BASE.channels}

    @classmethod
    def input_schema(cls, hp):
        return {"image": "image[32x32]"}

    @classmethod
    def init_weights(cls, hp, seed):
        rng = SplitMix64(derive_seed(seed, 102))
        p: dict[str, np.ndarray] = {}
        cls._encoder_init(p, rng, hp)
        for i in range(hp["layers"]):
            _linear_init(p, rng, f"kv.{i}", hp["d_model"], 2 * hp["d_model"], std=0.5 / math.sqrt(hp["d_model"]))
        return p

    def process_inputs(self, raw):
        return {"latent": vae_encode(_image_raw(raw))}

    def _kv(self, params, latent) -> KVCache:
        hp, d = self.hp, self.hp["d_model"]
        h = self._encode(params, latent, hp)
        banks = {}
        for i in range(hp["layers"]):
            kv = _lin(params, f"kv.{i}", h)
            banks[i] = KVBank(i, ad.index(kv, (Ellipsis, slice(0, d))), ad.index(kv, (Ellipsis, slice(d, 2 * d))))
        return KVCache(banks)

    def forward(self, features, params=None):
        params = params or self.params()
        latent = _check_features(features, "latent", (_BASE.latent_size, _BASE.latent_size, self.hp["in_channels"]))
        return [self._kv(params, latent)]

    def serialize_input(self, raw):
        return _array_bytes(_image_raw(raw))

    def parse_input(self, text):
        return read_ppm(text.strip())


@register("inpaint")
class InpaintTemplate(ImageConditionTemplate):
    """Masked image -> KV cache, plus a hard constraint pinning the unmasked latent cells."""

    cache_type = "pipeline_args"

    @classmethod
    def input_schema(cls, hp):
        return {"image": "image[32x32]", "mask": "mask[32x32]"}

    @classmethod
    def init_weights(cls, hp, seed):
        return super().init_weights(hp, derive_seed(seed, 5))

    @staticmethod
    def latent_mask(mask: np.ndarray) -> np.ndarray:
        """A latent cell is editable when any pixel of its 2x2 block is."""
        m = np.asarray(mask, dtype=np.float32)
        h, w = m.shape
        cell = m.reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3))
        return np.repeat((cell > 0.5).astype(np.float32)[..., None], _BASE.channels, axis=-1)

    def process_inputs(self, raw):
        image, mask = raw
        image = _image_raw(image)
        mask = np.asarray(mask, dtype=np.float32)
        if mask.shape != image.shape[:2]:
            raise ShapeError(f"mask {mask.shape} vs image {image.shape}")
        masked = image * (1.0 - mask)[..., None]
        return {"latent": vae_encode(masked), "mask": self.latent_mask(mask), "reference": vae_encode(image)}

    def forward(self, features, params=None):
        kv = super().forward(features, params)[0]
        grid = (_BASE.latent_size, _BASE.latent_size, _BASE.channels)
        masks = _check_features(features, "mask", grid)
        refs = _check_features(features, "reference", grid)
        constraints = tuple(StepConstraint(m, r) for m, r in zip(masks, refs))
        return [PipelineArgs(constraints), kv]

    def serialize_input(self, raw):
        image, mask = raw
        return _array_bytes(_image_raw(image), np.asarray(mask, np.float32))

    def parse_input(self, text):
        img, _, mask = text.partition(",")
        return read_ppm(img.strip()), read_mask(mask.strip())


# --------------------------------------------------------------------------- lora templates

def _parse_targets(spec: str) -> list[tuple[str, int, int]]:
    out = []
    for item in spec.split(","):
        name, _, dims = item.strip().partition(":")
        d_out, _, d_in = dims.partition("x")
        out.append((name, int(d_out), int(d_in)))
    return out


def _default_targets() -> str:
    d = _BASE.d_model
    return ",".join(f"blocks.{i}.attn.out:{d}x{d}" for i in range(_BASE.depth))


@register("preference_lora")
class PreferenceLoRATemplate(TemplateModel):
    """Fixed trained LoRA factors; the runtime preference scale is the LoRA strength."""

    cache_type = "lora"

    @classmethod
    def default_hyperparameters(cls):
        return {"rank": 4, "targets": _default_targets()}

    @classmethod
    def input_schema(cls, hp):
        return {"scale": "float"}

    @classmethod
    def init_weights(cls, hp, seed):
        rng = SplitMix64(derive_seed(seed, 103))
        p = {}
        for name, d_out, d_in in _parse_targets(hp["targets"]):
            p[f"{name}.down"] = _normal(rng, (hp["rank"], d_in), 1.0 / math.sqrt(d_in))
            p[f"{name}.up"] = np.zeros((d_out, hp["rank"]), np.float32)
        return p

    def process_inputs(self, raw):
        return {"strength": np.array([float(raw)], np.float32)}

    def forward(self, features, params=None):
        params = params or self.params()
        s = _check_features(features, "strength", (1,))[:, 0]
        deltas = {}
        uniform = bool(np.all(s == s[0]))
        for name, _, _ in _parse_targets(self.hp["targets"]):
            up = params[f"{name}.up"]
            if not uniform:
                up = ad.mul(ad.reshape(ad.tensor(s), (-1, 1, 1)), up)
            deltas[name] = [LoRADelta(name, params[f"{name}.down"], up)]
        return [LoRACache(deltas, float(s[0]) if uniform else 1.0)]

    def serialize_input(self, raw):
        return struct.pack("<d", float(raw))

    def parse_input(self, text):
        return float(text)


@register("image_lora")
class ImageToLoRATemplate(TemplateModel):
    """Condition image -> conv encoder -> pooled vector -> FC -> LoRA factors."""

    cache_type = "lora"

    @classmethod
    def default_hyperparameters(cls):
        return {"rank": 4, "targets": _default_targets(), "channels": 16, "hidden": 64}

    @classmethod
    def input_schema(cls, hp):
        return {"image": "image[32x32]"}

    @classmethod
    def _factor_sizes(cls, hp):
        return [(name, hp["rank"] * d_in, d_out * hp["rank"], d_out, d_in) for name, d_out, d_in in _parse_targets(hp["targets"])]

    @classmethod
    def init_weights(cls, hp, seed):
        rng = SplitMix64(derive_seed(seed, 104))
        c = hp["channels"]
        p = {
            "conv1.weight": _normal(rng, (4, 4, 3, c), 1.0 / math.sqrt(48)),
            "conv1.bias": np.zeros(c, np.float32),
            "conv2.weight": _normal(rng, (4, 4, c, 2 * c), 1.0 / math.sqrt(16 * c)),
            "conv2.bias": np.zeros(2 * c, np.float32),
        }
        _linear_init(p, rng, "fc1", 2 * c, hp["hidden"])
        total = sum(a + b for _, a, b, _, _ in cls._factor_sizes(hp))
        _linear_init(p, rng, "fc2", hp["hidden"], total, std=0.05 / math.sqrt(hp["hidden"]))
        # a fixed, non-zero "down" bias so the up factor receives gradient from step one
        off = 0
        for _, n_down, n_up, _, d_in in cls._factor_sizes(hp):
            p["fc2.bias"][off:off + n_down] = _normal(rng, (n_down,), 1.0 / math.sqrt(d_in))
            off += n_down + n_up
        return p

    def process_inputs(self, raw):
        return {"image": _image_raw(raw) * np.float32(2.0) - np.float32(1.0)}

    def forward(self, features, params=None):
        params = params or self.params()
        img = _check_features(features, "image", (32, 32, 3))
        b, r = img.shape[0], self.hp["rank"]
        h = ad.gelu(ad.conv2d(img, params["conv1.weight"], params["conv1.bias"], stride=2, pad=1))
        h = ad.gelu(ad.conv2d(h, params["conv2.weight"], params["conv2.bias"], stride=2, pad=1))
        pooled = ad.mean(ad.reshape(h, (b, -1, h.shape[-1])), axis=1)
        flat = _lin(params, "fc2", ad.gelu(_lin(params, "fc1", pooled)))
        deltas, off = {}, 0
        for name, n_down, n_up, d_out, d_in in self._factor_sizes(self.hp):
            down = ad.reshape(ad.index(flat, (slice(None), slice(off, off + n_down))), (b, r, d_in))
            off += n_down
            up = ad.reshape(ad.index(flat, (slice(None), slice(off, off + n_up))), (b, d_out, r))
            off += n_up
            deltas[name] = [LoRADelta(name, down, up)]
        return [LoRACache(deltas, 1.0)]

    def serialize_input(self, raw):
        return _array_bytes(_image_raw(raw))

    def parse_input(self, text):
        return read_ppm(text.strip())
