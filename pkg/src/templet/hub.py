"""Remote package resolution with a digest-addressed local cache.

A remote package is two files served over plain HTTP GET: the manifest and
the weights archive.  The caller must supply the expected weights sha256.
"""

from __future__ import annotations

import fcntl
import hashlib
import os
import shutil
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from .manifest import ManifestParseError, TemplateManifest
from .package import MANIFEST_NAME, IntegrityError, TemplateError

RETRIES = 3
RETRY_DELAY = 0.5
TIMEOUT = 30.0
CACHE_ENV = "TEMPLET_CACHE_DIR"


class TransportError(TemplateError):
    pass


class ConflictError(TemplateError):
    pass


@dataclass(frozen=True)
class PackageRef:
    path: str | None = None
    manifest_url: str | None = None
    weights_url: str | None = None
    sha256: str | None = None

    def __post_init__(self):
        if self.path is not None:
            if self.manifest_url or self.weights_url:
                raise ValueError("a package ref is either a local path or a URL pair, not both")
            return
        if not (self.manifest_url and self.weights_url):
            raise ValueError("remote package refs need both a manifest URL and a weights URL")
        if not self.sha256 or len(self.sha256) != 64:
            raise ValueError("remote package refs must carry the expected weights sha256")

    @property
    def is_remote(self) -> bool:
        return self.path is None

    @classmethod
    def local(cls, path) -> "PackageRef":
        return cls(path=str(path))

    @classmethod
    def remote(cls, base_url: str, sha256: str, weights_file: str = "weights.tmpl") -> "PackageRef":
        base = base_url.rstrip("/")
        return cls(manifest_url=f"{base}/{MANIFEST_NAME}", weights_url=f"{base}/{weights_file}", sha256=sha256.lower())


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "templet"


class HubClient:
    """Resolves refs to local package directories.

    ``requests`` counts HTTP GETs issued; ``downloads`` counts packages fetched
    into the cache (one per cold remote ref, two GETs each).
    """

    def __init__(self, cache_dir=None, retries: int = RETRIES, retry_delay: float = RETRY_DELAY):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.retries = retries
        self.retry_delay = retry_delay
        self.requests = 0
        self.downloads = 0

    def _get(self, url: str) -> bytes:
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.retry_delay)
            self.requests += 1
            try:
                with urllib.request.urlopen(url, timeout=TIMEOUT) as resp:
                    return resp.read()
            except urllib.error.HTTPError as exc:
                last = exc
                if 400 <= exc.code < 500:
                    break
            except (urllib.error.URLError, OSError) as exc:
                last = exc
        raise TransportError(f"GET {url} failed: {last}")

    def resolve(self, ref: PackageRef | str | os.PathLike) -> Path:
        if not isinstance(ref, PackageRef):
            ref = PackageRef.local(ref)
        if not ref.is_remote:
            return Path(ref.path)
        digest = ref.sha256.lower()
        entry = self.cache_dir / digest
        if (entry / MANIFEST_NAME).exists():
            return entry
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        with open(self.cache_dir / f".{digest}.lock", "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                if (entry / MANIFEST_NAME).exists():
                    return entry
                self._download(ref, digest, entry)
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)
        return entry

    def _download(self, ref: PackageRef, digest: str, entry: Path) -> None:
        man_bytes = self._get(ref.manifest_url)
        weights = self._get(ref.weights_url)
        try:
            man = TemplateManifest.from_text(man_bytes.decode("utf-8"))
        except (ManifestParseError, UnicodeDecodeError) as exc:
            raise TransportError(f"{ref.manifest_url}: unreadable manifest: {exc}") from None
        # bytes vs the ref first: a wrong expected digest is an integrity failure, not a conflict
        actual = hashlib.sha256(weights).hexdigest()
        if actual != digest:
            raise IntegrityError(f"{ref.weights_url}: integrity check failed, sha256 {actual} != expected {digest}")
        if man.weights_sha256.lower() != digest:
            raise ConflictError(f"manifest declares weights sha256 {man.weights_sha256}, ref expects {digest}")
        tmp = Path(tempfile.mkdtemp(prefix=f".{digest}.", dir=self.cache_dir))
        try:
            (tmp / man.weights_file).write_bytes(weights)
            (tmp / MANIFEST_NAME).write_bytes(man_bytes)
            os.replace(tmp, entry)
            self.downloads += 1
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise


def resolve(ref, cache_dir=None) -> Path:
    return HubClient(cache_dir).resolve(ref)
