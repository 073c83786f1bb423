"""Generation orchestration: templates run once, outside the denoising loop.

Each enabled template is loaded, fed its own input and unloaded in turn, so at
most one template's weights are resident.  The emitted caches are merged and
handed to the base sampler.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .backbone import DenoiserModel, GenerationRequest, TemplateSpec, sample_latent, vae_decode, vae_encode
from .caches import CacheBundle, TemplateCache, merge_heterogeneous
from .hub import HubClient, PackageRef
from .package import PackageLoadError, TemplateError, TemplateModel, load_template, read_manifest

EVENT_KINDS = ("load", "process_inputs", "forward", "unload", "merge", "denoise_step", "constraint_applied")


@dataclass
class EventLog:
    events: list[tuple[str, str]] = field(default_factory=list)

    def emit(self, kind: str, arg: Any) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        self.events.append((kind, str(arg)))

    def lines(self) -> list[str]:
        return [f"EVENT {k} {a}" for k, a in self.events]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EventLog":
        log = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            tag, kind, arg = line.split(" ", 2)
            if tag != "EVENT":
                raise ValueError(f"not an event line: {line!r}")
            log.emit(kind, arg)
        return log

    def count(self, kind: str, arg: Any = None) -> int:
        return sum(1 for k, a in self.events if k == kind and (arg is None or a == str(arg)))

    def index(self, kind: str, arg: Any = None) -> list[int]:
        return [i for i, (k, a) in enumerate(self.events) if k == kind and (arg is None or a == str(arg))]


class ResidencyMeter:
    """Bytes of template weights currently materialized, and the peak."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def load(self, nbytes: int) -> None:
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def unload(self, nbytes: int) -> None:
        self.current -= nbytes


@dataclass
class PipelineRun:
    request: GenerationRequest
    log: EventLog
    bundle: CacheBundle
    latent: np.ndarray
    image: np.ndarray
    peak_template_bytes: int


class _Slot:
    """A template awaiting execution: either an in-memory model or a resolved package directory."""

    def __init__(self, spec: TemplateSpec, model: TemplateModel | None, directory: Path | None):
        self.spec = spec
        self.model = model
        self.directory = directory

    def materialize(self) -> TemplateModel:
        if self.model is not None:
            # copy so residency reflects a real load, and the caller's instance stays untouched
            return self.model.with_weights({k: v.copy() for k, v in self.model.weights.items()})
        return load_template(self.directory)


class TemplatePipeline:
    def __init__(self, base: DenoiserModel, hub: HubClient | None = None):
        self.base = base
        self.hub = hub or HubClient()
        self.meter = ResidencyMeter()

    def _prepare(self, specs: Sequence[TemplateSpec]) -> list[_Slot]:
        # every reference is resolved, and its manifest read, before any template runs
        slots = []
        for spec in specs:
            if isinstance(spec.ref, TemplateModel):
                slots.append(_Slot(spec, spec.ref, None))
                continue
            try:
                directory = self.hub.resolve(spec.ref)
            except TemplateError:
                raise
            except (OSError, ValueError) as exc:
                raise PackageLoadError(f"template {spec.name}: cannot resolve {spec.ref}: {exc}") from None
            read_manifest(directory)
            slots.append(_Slot(spec, None, directory))
        return slots

    def schedule_round_robin(self, specs: Sequence[TemplateSpec], log: EventLog | None = None,
                             eager: bool = False) -> list[TemplateCache]:
        """Run templates one after another; ``eager`` loads all first (the memory baseline)."""
        log = log if log is not None else EventLog()
        slots = self._prepare(specs)
        caches: list[TemplateCache] = []
        if eager:
            models = []
            for s in slots:
                m = s.materialize()
                self.meter.load(m.weight_bytes)
                log.emit("load", s.spec.name)
                models.append(m)
            for s, m in zip(slots, models):
                caches.extend(self._execute(s, m, log))
            for s, m in zip(slots, models):
                self.meter.unload(m.weight_bytes)
                log.emit("unload", s.spec.name)
            return caches
        for s in slots:
            m = s.materialize()
            self.meter.load(m.weight_bytes)
            log.emit("load", s.spec.name)
            try:
                caches.extend(self._execute(s, m, log))
            finally:
                self.meter.unload(m.weight_bytes)
                log.emit("unload", s.spec.name)
            del m
        return caches

    @staticmethod
    def _execute(slot: _Slot, model: TemplateModel, log: EventLog) -> list[TemplateCache]:
        raw = slot.spec.input
        if isinstance(raw, str):
            raw = model.parse_input(raw)
        feats = model.process_inputs(raw)
        log.emit("process_inputs", slot.spec.name)
        caches = model.forward({k: v[None] for k, v in feats.items()})
        log.emit("forward", slot.spec.name)
        return caches

    def run(self, request: GenerationRequest, events_path=None, eager: bool = False) -> PipelineRun:
        log = EventLog()
        self.meter = ResidencyMeter()
        caches = self.schedule_round_robin(request.templates, log, eager=eager)
        bundle = merge_heterogeneous(caches)
        if request.templates:
            log.emit("merge", len(caches))
        latent = sample_latent(self.base, request, bundle,
                               on_step=lambda i: log.emit("denoise_step", i),
                               on_constraint=lambda i: log.emit("constraint_applied", i))
        if events_path is not None:
            log.write(events_path)
        return PipelineRun(request, log, bundle, latent, vae_decode(latent), self.meter.peak)


def run(base: DenoiserModel, request: GenerationRequest, events_path=None, hub: HubClient | None = None) -> PipelineRun:
    return TemplatePipeline(base, hub).run(request, events_path)


# --------------------------------------------------------------------------- timing

@dataclass
class TimingReport:
    condition_encoder_invocations: int
    wall_time: float


def timing_probe(base: DenoiserModel, request: GenerationRequest, template: TemplateModel,
                 condition_image: np.ndarray, with_templates: bool = True) -> TimingReport:
    """Count image-condition encodings for the template path versus in-loop conditioning.

    The baseline re-encodes the condition image inside every step and appends
    its tokens to the denoiser's sequence, as an in-context conditioning model
    would.
    """
    calls = 0
    start = time.perf_counter()
    if with_templates:
        feats = template.process_inputs(condition_image)
        caches = template.forward({k: v[None] for k, v in feats.items()})
        calls += 1
        sample_latent(base, request, merge_heterogeneous(caches))
    else:
        cond_latent = vae_encode(condition_image)[None]

        def velocity(x, t, conds):
            nonlocal calls
            tokens = base.embed_patches(np.concatenate([cond_latent, cond_latent]))
            calls += 1
            out = base(np.stack([x, x]), np.full(2, t, np.float32), conds, extra_tokens=tokens).data
            return out[0], out[1]

        sample_latent(base, request, velocity_fn=velocity)
    return TimingReport(calls, time.perf_counter() - start)
