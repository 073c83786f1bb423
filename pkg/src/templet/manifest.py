"""Flat ``key = value`` text format used by manifests, base configs and dataset metadata.

Grammar, one entry per line (UTF-8, LF)::

    line    := blank | comment | entry
    comment := ws* "#" any*
    entry   := ws* key ws* "=" ws* value ws* ("#" any*)?
    key     := [A-Za-z0-9_.-]+
    value   := string | int | float | "true" | "false"
    string  := '"' (char | '\\"' | '\\\\' | '\\n')* '"'

Nested mappings are flattened with dotted keys (``hp.n_tokens = 4``). Keys
are written in insertion order so the text is a stable function of the data.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

_KEY = re.compile(r"[A-Za-z0-9_.\-]+\Z")
_INT = re.compile(r"[+-]?\d+\Z")
_FLOAT = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?\Z|[+-]?(inf|nan)\Z")

CACHE_TYPES = ("kv", "lora", "pipeline_args")


class ManifestParseError(ValueError):
    pass


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        esc = v.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{esc}"'
    raise TypeError(f"unsupported value type {type(v).__name__}")


def dumps(data: dict[str, Any]) -> str:
    lines = []
    for k, v in data.items():
        if not _KEY.match(k):
            raise ValueError(f"invalid key {k!r}")
        lines.append(f"{k} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def _parse_string(s: str, lineno: int) -> tuple[str, str]:
    out, i = [], 1
    while i < len(s):
        c = s[i]
        if c == "\\":
            nxt = s[i + 1:i + 2]
            if nxt not in ('"', "\\", "n"):
                raise ManifestParseError(f"line {lineno}: bad escape \\{nxt}")
            out.append("\n" if nxt == "n" else nxt)
            i += 2
            continue
        if c == '"':
            return "".join(out), s[i + 1:]
        out.append(c)
        i += 1
    raise ManifestParseError(f"line {lineno}: unterminated string")


def loads(text: str) -> dict[str, Any]:
    data: dict[str, Any] = {}
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, rest = line.partition("=")
        key = key.strip()
        if not eq or not _KEY.match(key):
            raise ManifestParseError(f"line {lineno}: expected 'key = value', got {raw!r}")
        rest = rest.strip()
        if rest.startswith('"'):
            value, tail = _parse_string(rest, lineno)
        else:
            token, sep, tail = rest.partition("#")
            token = token.strip()
            tail = sep + tail
            if token in ("true", "false"):
                value = token == "true"
            elif _INT.match(token):
                value = int(token)
            elif _FLOAT.match(token):
                value = float(token)
            else:
                raise ManifestParseError(f"line {lineno}: cannot parse value {token!r}")
        tail = tail.strip()
        if tail and not tail.startswith("#"):
            raise ManifestParseError(f"line {lineno}: trailing text {tail!r}")
        if key in data:
            raise ManifestParseError(f"line {lineno}: duplicate key {key!r}")
        data[key] = value
    return data


def flatten(prefix: str, mapping: dict[str, Any]) -> dict[str, Any]:
    return {f"{prefix}.{k}": v for k, v in mapping.items()}


def unflatten(prefix: str, data: dict[str, Any]) -> dict[str, Any]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in data.items() if k.startswith(p)}


@dataclass
class TemplateManifest:
    name: str
    version: str
    cache_type: str
    template_kind: str
    input_schema: dict[str, str] = field(default_factory=dict)
    hyperparameters: dict[str, Any] = field(default_factory=dict)
    weights_file: str = "weights.tmpl"
    weights_sha256: str = ""

    def __post_init__(self):
        if self.cache_type not in CACHE_TYPES:
            raise ManifestParseError(f"cache_type must be one of {CACHE_TYPES}, got {self.cache_type!r}")

    def to_text(self) -> str:
        head = {
            "name": self.name,
            "version": self.version,
            "cache_type": self.cache_type,
            "template_kind": self.template_kind,
            "weights_file": self.weights_file,
            "weights_sha256": self.weights_sha256,
        }
        body = {**head, **flatten("input", self.input_schema), **flatten("hp", self.hyperparameters)}
        return "# template manifest\n" + dumps(body)

    @classmethod
    def from_text(cls, text: str) -> "TemplateManifest":
        data = loads(text)
        required = ("name", "version", "cache_type", "template_kind", "weights_file", "weights_sha256")
        missing = [k for k in required if k not in data]
        if missing:
            raise ManifestParseError(f"manifest missing keys: {', '.join(missing)}")
        for k in required:
            if not isinstance(data[k], str):
                raise ManifestParseError(f"manifest key {k!r} must be a string")
        known = set(required)
        extra = [k for k in data if k not in known and not k.startswith(("input.", "hp."))]
        if extra:
            raise ManifestParseError(f"unknown manifest keys: {', '.join(extra)}")
        return cls(
            name=data["name"], version=data["version"], cache_type=data["cache_type"],
            template_kind=data["template_kind"],
            input_schema={k: str(v) for k, v in unflatten("input", data).items()},
            hyperparameters=unflatten("hp", data),
            weights_file=data["weights_file"], weights_sha256=data["weights_sha256"],
        )
