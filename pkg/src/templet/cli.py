"""``templet`` command line.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import archive, manifest
from .backbone import DenoiserModel, GenerationRequest, TemplateSpec
from .hub import HubClient, PackageRef
from .images import write_ppm
from .package import MANIFEST_NAME, lookup, read_manifest, registered_kinds
from .zoo.scenes import KINDS, directory_digest, load_dataset, make_dataset, save_dataset


class UsageError(Exception):
    pass


def _template_spec(text: str) -> TemplateSpec:
    name, sep, rest = text.partition("=")
    pkg, sep2, raw = rest.rpartition(":")
    if not (sep and sep2 and name and pkg):
        raise UsageError(f"--template expects name=package:input, got {text!r}")
    return TemplateSpec(name, pkg, raw)


def _hyperparameters(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--hp expects key=value, got {item!r}")
        # reuse the manifest value grammar for typed scalars
        try:
            out[key] = manifest.loads(f"v = {value}")["v"]
        except manifest.ManifestParseError:
            out[key] = value
    return out


def _base(path) -> DenoiserModel:
    return DenoiserModel.load(path) if path else DenoiserModel.create(0)


def _write_report(losses, csv_path) -> None:
    from .plotting import loss_curve
    from .training import write_loss_csv

    write_loss_csv(csv_path, losses)
    loss_curve(losses, Path(csv_path).with_suffix(".png"))


def cmd_gen(args) -> int:
    from .pipeline import TemplatePipeline

    specs = [_template_spec(t) for t in args.template]
    request = GenerationRequest(condition_id=args.condition, seed=args.seed, steps=args.steps,
                                guidance_scale=args.cfg, templates=specs)
    result = TemplatePipeline(_base(args.base)).run(request, events_path=args.events)
    write_ppm(args.out, result.image)
    return 0


def cmd_train_base(args) -> int:
    from .training import TrainConfig, train_base

    samples = load_dataset(args.data) if args.data else make_dataset(args.kind, args.n, args.seed)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, learning_rate=args.lr, seed=args.seed)
    model, result = train_base(samples, cfg)
    model.save(args.out)
    if args.loss_csv:
        _write_report(result.losses, args.loss_csv)
    print(f"base saved to {args.out} (sha256 {model.weights_sha256()})")
    return 0


def cmd_train_template(args) -> int:
    from .training import TrainConfig, train_template

    cls = lookup(args.kind)
    samples = load_dataset(args.data) if args.data else make_dataset(args.data_kind, args.n, args.seed)
    template = cls.create(args.name, _hyperparameters(args.hp), seed=args.seed)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, learning_rate=args.lr, seed=args.seed,
                      cache_dir=args.cache_dir)
    trained, result = train_template(template, _base(args.base), samples, cfg)
    trained.save(args.out)
    if args.loss_csv:
        _write_report(result.losses, args.loss_csv)
    for name in result.dead_parameters:
        print(f"warning: no gradient reached {name} in the first steps", file=sys.stderr)
    print(f"template saved to {args.out} (sha256 {trained.manifest.weights_sha256})")
    return 0


def cmd_make_data(args) -> int:
    save_dataset(make_dataset(args.kind, args.n, args.seed), args.out)
    print(directory_digest(args.out))
    return 0


def cmd_inspect(args) -> int:
    man = read_manifest(args.package)
    sys.stdout.write(man.to_text())
    tensors = archive.load(Path(args.package) / man.weights_file)
    for name, arr in tensors.items():
        print(f"tensor {name} {'x'.join(map(str, arr.shape)) or 'scalar'} {arr.dtype}")
    return 0


def cmd_fetch(args) -> int:
    if args.url:
        ref = PackageRef.remote(args.url, args.sha256)
    else:
        ref = PackageRef(manifest_url=args.manifest_url, weights_url=args.weights_url, sha256=args.sha256)
    print(HubClient(args.cache_dir).resolve(ref))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="templet", description="Composable template plugins for a toy diffusion backbone.")
    p.add_argument("--version", action="version", version=f"templet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate one image")
    g.add_argument("--condition", type=int, default=0, help="class id of the base model (0 circle, 1 square, 2 triangle)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--cfg", type=float, default=4.0, help="guidance scale")
    g.add_argument("--template", action="append", default=[], metavar="NAME=PKG:INPUT",
                   help="enable a template package (repeatable; order is activation order)")
    g.add_argument("--base", help="base model directory (default: untrained seed-0 weights)")
    g.add_argument("--out", required=True, help="output PPM path")
    g.add_argument("--events", help="write the event log here")
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("train-base", help="pretrain the base denoiser")
    b.add_argument("--data", help="dataset directory from make-data")
    b.add_argument("--kind", default="brightness", choices=KINDS, help="dataset kind when --data is absent")
    b.add_argument("--n", type=int, default=2048)
    b.add_argument("--steps", type=int, default=10000)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--loss-csv", help="write step,loss CSV and a PNG loss curve beside it")
    b.set_defaults(func=cmd_train_base)

    t = sub.add_parser("train-template", help="train a template against a frozen base")
    t.add_argument("--kind", required=True, help="template kind: " + ", ".join(registered_kinds()))
    t.add_argument("--name", required=True)
    t.add_argument("--base", help="base model directory")
    t.add_argument("--data", help="dataset directory from make-data")
    t.add_argument("--data-kind", default="brightness", choices=KINDS)
    t.add_argument("--n", type=int, default=1024)
    t.add_argument("--hp", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--cache-dir", help="Stage I feature cache directory (default: no cache)")
    t.add_argument("--out", required=True)
    t.add_argument("--loss-csv")
    t.set_defaults(func=cmd_train_template)

    d = sub.add_parser("make-data", help="render a synthetic dataset")
    d.add_argument("--kind", required=True, choices=KINDS)
    d.add_argument("--n", type=int, default=256)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_make_data)

    pk = sub.add_parser("package", help="package utilities")
    psub = pk.add_subparsers(dest="package_command", required=True)
    ins = psub.add_parser("inspect", help="print manifest fields and tensor shapes")
    ins.add_argument("package")
    ins.set_defaults(func=cmd_inspect)

    f = sub.add_parser("fetch", help="resolve a remote package into the local cache")
    f.add_argument("--url", help=f"base URL serving {MANIFEST_NAME} and the weights file")
    f.add_argument("--manifest-url")
    f.add_argument("--weights-url")
    f.add_argument("--sha256", required=True)
    f.add_argument("--cache-dir")
    f.set_defaults(func=cmd_fetch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "fetch" and not args.url and not (args.manifest_url and args.weights_url):
        parser.error("fetch needs --url or both --manifest-url and --weights-url")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        chain = []
        e: BaseException | None = exc
        while e is not None:
            chain.append(f"{type(e).__name__}: {e}")
            e = e.__cause__ or e.__context__
        print("error: " + "\n  caused by: ".join(chain), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
