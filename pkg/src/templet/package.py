"""Template packages: ``<dir>/manifest.txt`` + ``<dir>/weights.tmpl``.

Loading is declarative. The manifest's ``template_kind`` selects a built-in
architecture from the registry; nothing stored in a package is executed.
"""

from __future__ import annotations

import hashlib
import os
from typing import Any, Callable

import numpy as np

from . import archive
from .autodiff import Tensor
from .caches import TemplateCache
from .manifest import ManifestParseError, TemplateManifest

MANIFEST_NAME = "manifest.txt"
WEIGHTS_NAME = "weights.tmpl"


class TemplateError(Exception):
    pass


class IntegrityError(TemplateError):
    """Bytes on disk (or on the wire) do not match their declared sha256."""


class RegistryError(TemplateError):
    pass


class VersionError(TemplateError):
    pass


class PackageParseError(TemplateError):
    pass


class PackageLoadError(TemplateError):
    pass


_REGISTRY: dict[str, type["TemplateModel"]] = {}


def register(kind: str) -> Callable[[type], type]:
    def deco(cls):
        if kind in _REGISTRY and _REGISTRY[kind] is not cls:
            raise RegistryError(f"template kind {kind!r} already registered")
        cls.kind = kind
        _REGISTRY[kind] = cls
        return cls
    return deco


def _ensure_builtins() -> None:
    from . import zoo  # noqa: F401  (registers the built-in kinds)


def lookup(kind: str) -> type["TemplateModel"]:
    _ensure_builtins()
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise RegistryError(f"unknown template_kind {kind!r}; registered: {', '.join(sorted(_REGISTRY))}") from None


def registered_kinds() -> list[str]:
    _ensure_builtins()
    return sorted(_REGISTRY)


class TemplateModel:
    """A plugin mapping task input to template caches.

    Subclasses implement the two entry points:

    ``process_inputs(raw) -> dict[str, np.ndarray]``
        deterministic, side-effect free, never recorded on a tape;
    ``forward(features, params) -> list[TemplateCache]``
        the only trainable computation; ``features`` arrays carry a leading
        batch axis.
    """

    kind = "abstract"
    cache_type = "kv"

    def __init__(self, manifest: TemplateManifest, tensors: dict[str, np.ndarray]):
        self.manifest = manifest
        self.hp = dict(manifest.hyperparameters)
        self.weights = dict(tensors)

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def weight_bytes(self) -> int:
        return int(sum(a.nbytes for a in self.weights.values()))

    def params(self, trainable: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, trainable=trainable, name=k) for k, v in self.weights.items()}

    def process_inputs(self, raw: Any) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def forward(self, features: dict[str, np.ndarray], params: dict[str, Tensor] | None = None) -> list[TemplateCache]:
        raise NotImplementedError

    def serialize_input(self, raw: Any) -> bytes:
        """Canonical bytes of a raw input, used for feature-cache keys."""
        raise NotImplementedError

    def parse_input(self, text: str) -> Any:
        """Raw input from its command-line spelling."""
        raise NotImplementedError

    def __call__(self, raw: Any) -> list[TemplateCache]:
        feats = {k: v[None] for k, v in self.process_inputs(raw).items()}
        return self.forward(feats)

    @classmethod
    def init_weights(cls, hp: dict[str, Any], seed: int) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @classmethod
    def default_hyperparameters(cls) -> dict[str, Any]:
        return {}

    @classmethod
    def input_schema(cls, hp: dict[str, Any]) -> dict[str, str]:
        return {}

    @classmethod
    def create(cls, name: str, hp: dict[str, Any] | None = None, seed: int = 0,
               version: str = "0.1.0") -> "TemplateModel":
        full = {**cls.default_hyperparameters(), **(hp or {})}
        man = TemplateManifest(name=name, version=version, cache_type=cls.cache_type,
                               template_kind=cls.kind, input_schema=cls.input_schema(full),
                               hyperparameters=full)
        return cls(man, cls.init_weights(full, seed))

    def with_weights(self, tensors: dict[str, np.ndarray]) -> "TemplateModel":
        return type(self)(self.manifest, tensors)

    def save(self, directory) -> TemplateManifest:
        return save_package(directory, self.manifest, self.weights)


def save_package(directory, manifest: TemplateManifest, tensors: dict[str, np.ndarray]) -> TemplateManifest:
    os.makedirs(directory, exist_ok=True)
    data = archive.dumps(tensors)
    manifest.weights_sha256 = hashlib.sha256(data).hexdigest()
    manifest.weights_file = manifest.weights_file or WEIGHTS_NAME
    with open(os.path.join(directory, manifest.weights_file), "wb") as f:
        f.write(data)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as f:
        f.write(manifest.to_text())
    return manifest


def read_manifest(directory) -> TemplateManifest:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise PackageLoadError(f"cannot read {path}: {exc}") from None
    try:
        return TemplateManifest.from_text(text)
    except ManifestParseError as exc:
        raise PackageParseError(f"{path}: {exc}") from None


def load_package(directory) -> tuple[TemplateManifest, dict[str, np.ndarray]]:
    """Read and verify a package; the weights digest is checked before parsing."""
    man = read_manifest(directory)
    lookup(man.template_kind)
    path = os.path.join(directory, man.weights_file)
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise PackageLoadError(f"cannot read {path}: {exc}") from None
    digest = hashlib.sha256(data).hexdigest()
    if digest != man.weights_sha256:
        raise IntegrityError(f"{path}: sha256 {digest} does not match manifest {man.weights_sha256}")
    try:
        tensors = archive.loads(data)
    except archive.ArchiveVersionError as exc:
        raise VersionError(str(exc)) from None
    except archive.ArchiveError as exc:
        raise PackageParseError(f"{path}: {exc}") from None
    return man, tensors


def load_template(directory) -> TemplateModel:
    man, tensors = load_package(directory)
    return lookup(man.template_kind)(man, tensors)
