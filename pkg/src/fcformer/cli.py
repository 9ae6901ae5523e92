"""Command-line entry point: synth, augment, train, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, oia
from .evaluate import EvalError, build_index, cmc_map, dump_features, format_table
from .losses import LossError
from .numerics import CheckpointError
from .oil import LibraryError, load_library, make_synthetic_library
from .trainer import TrainConfig, TrainingError, fit, load_model, model_grad_check

log = logging.getLogger("fcformer")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- config files ---------------------------------------------------------------

def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_pairs(lines, source: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(config_file: str | None, overrides: list[str]) -> TrainConfig:
    """Defaults, then the config file, then ``--set`` overrides. Every problem is reported at once."""
    defaults = TrainConfig()
    fields = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(TrainConfig)}
    raw: dict[str, str] = {}
    if config_file:
        path = Path(config_file)
        try:
            raw.update(parse_pairs(path.read_text().splitlines(), str(path)))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    raw.update(parse_pairs(overrides, "--set"))
    errors, values = [], {}
    for key, value in raw.items():
        if key not in fields:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            values[key] = _coerce(key, value, fields[key])
        except UsageError as exc:
            errors.append(str(exc))
    cfg = dataclasses.replace(defaults, **values) if not errors else defaults
    if not errors:
        errors = cfg.validate()
    if errors:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = data.generate_dataset(args.seed, args.ids, imgs_per_id=args.imgs_per_id, n_cams=args.cams,
                               query_per_id=args.query_per_id, gallery_per_id=args.gallery_per_id,
                               occlude_query=not args.holistic_query)
    root = data.save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train, {len(ds.query)} query, {len(ds.gallery)} gallery images to {root}")
    return EXIT_OK


def cmd_augment(args) -> int:
    lib = load_library(args.manifest) if args.manifest else make_synthetic_library(args.oil_seed, 16)
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory not found: {src}")
    files = sorted(src.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG images in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = []
    for f in files:
        m = data.NAME_RE.match(f.name)
        pid, cam = (int(m.group(1)), int(m.group(2))) if m else (0, 0)
        batch.append((np.asarray(Image.open(f).convert("RGB")), pid, cam))
    pairs = oia.augment_batch(batch, lib, np.random.default_rng([args.seed, 5]), fixed=args.fixed)
    for f, pair in zip(files, pairs):
        Image.fromarray(pair.holistic).save(out / f"{f.stem}_h.png")
        Image.fromarray(pair.occluded).save(out / f"{f.stem}_o.png")
        Image.fromarray(pair.occ_mask * 255).save(out / f"{f.stem}_m.png")
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag in ("epochs", "seed", "base_lr"):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{flag}={v}")
    cfg = build_config(args.config, overrides)
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    ds = data.load_dataset(args.data)
    run_dir = Path(args.run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(format_config(cfg))
    except OSError as exc:
        raise UsageError(f"cannot write run directory {run_dir}: {exc.strerror}") from None
    print(format_config(cfg), end="")
    result = fit(cfg, ds, run_dir=run_dir, resume=args.resume)
    last = result.history[-1] if result.history else None
    if last:
        print(f"step {result.steps}: total {last['total']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    for p in (args.checkpoint, args.data):
        if not Path(p).exists():
            raise UsageError(f"not found: {p}")
    model, meta, _ = load_model(args.checkpoint)
    model.eval()
    ds = data.load_dataset(args.data)
    q = build_index(model, ds.query.images, ds.query.cams, ds.query.pids)
    g = build_index(model, ds.gallery.images, ds.gallery.cams, ds.gallery.pids)
    report = cmc_map(q, g)
    print(format_table(report))
    if report.excluded_queries:
        print(f"({report.excluded_queries} queries without a valid match excluded)")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    if args.dump:
        dump_dir = Path(args.dump)
        dump_dir.mkdir(parents=True, exist_ok=True)
        dump_features(dump_dir / "query.fcf", q, {"split": "query", "checkpoint": str(args.checkpoint)})
        dump_features(dump_dir / "gallery.fcf", g, {"split": "gallery", "checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = build_config(args.config, list(args.set or []))
    report = model_grad_check(cfg, seed=args.seed, max_elements=args.max_elements, tol=args.tol)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_RUNTIME


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--imgs-per-id", type=int, default=8)
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--query-per-id", type=int, default=2)
    p.add_argument("--gallery-per-id", type=int, default=4)
    p.add_argument("--holistic-query", action="store_true", help="do not occlude query images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="write holistic/occluded/mask triples for a directory of images")
    p.add_argument("--manifest", help="occlusion library manifest (default: synthetic library)")
    p.add_argument("--oil-seed", type=int, default=1)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixed", action="store_true", help="one shared position per batch")
    p.set_defaults(func=cmd_augment)

    def add_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--dump", help="directory for query/gallery feature dumps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-elements", type=int, default=64)
    p.add_argument("--tol", type=float, default=1e-2)
    add_config(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("FCF_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FCF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FCF_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, LibraryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        target = exc.filename or ""
        print(f"error: {target}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, LossError, EvalError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
