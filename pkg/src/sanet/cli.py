"""Command-line entry point: synth, train, eval, align-viz, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("sanet")


class ValidationError(Exception):
    pass


def _write_run(out_dir: Path, command: str, seed: int, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "seed": seed, "config": resolved, "version": __version__}
    (out_dir / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _announce(command: str, seed: int, resolved: dict) -> None:
    print(json.dumps({"command": command, "seed": seed, "config": resolved}, sort_keys=True), flush=True)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")


def cmd_synth(args) -> int:
    from .data import SyntheticSpec, dataset_hash, generate_dataset, save_dataset

    raw = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(raw)
    except TypeError as exc:
        raise ValidationError(f"bad synthetic spec: {exc}")
    _announce("synth", spec.seed, spec.to_dict())
    out = Path(args.out)
    save_dataset(generate_dataset(spec), out)
    _write_run(out, "synth", spec.seed, spec.to_dict())
    print(f"dataset hash {dataset_hash(out)}")
    return 0


def _train_parts(args):
    from .model import SANetConfig
    from .trainer import TrainConfig

    raw = _read_json(args.config) if args.config else {}
    model_raw = raw.pop("model", {})
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        tcfg = TrainConfig(**raw)
    except TypeError as exc:
        raise ValidationError(f"bad train config: {exc}")
    return tcfg, model_raw, SANetConfig


def cmd_train(args) -> int:
    from .data import dataset_hash, load_dataset
    from .model import SANet
    from .trainer import fit

    tcfg, model_raw, SANetConfig = _train_parts(args)
    data_dir = Path(args.data)
    if not (data_dir / "meta.json").exists():
        raise ValidationError(f"no dataset at {data_dir}")
    ds = load_dataset(data_dir)
    num_classes = len(np.unique(ds.train.identities))
    model_raw = {**model_raw, "num_classes": num_classes, "input_size": ds.spec.image_size,
                 "seed": model_raw.get("seed", tcfg.seed)}
    if args.baseline:
        model_raw["stn_enabled"] = False
    try:
        mcfg = SANetConfig(**model_raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad model config: {exc}")
    resolved = {"train": vars(tcfg), "model": mcfg.to_dict(), "data": str(data_dir),
                "dataset_hash": dataset_hash(data_dir)}
    _announce("train", tcfg.seed, resolved)
    out = Path(args.out)
    _write_run(out, "train", tcfg.seed, resolved)
    result = fit(SANet(mcfg), ds, tcfg, out, progress=True)
    print(f"checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import cmc, distance_matrix, embed_set, export_results
    from .model import load_checkpoint

    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    resolved = {"ckpt": str(args.ckpt), "data": str(args.data), "kmax": args.kmax,
                "model": model.config.to_dict()}
    _announce("eval", model.config.seed, resolved)
    q = embed_set(model, ds.query.images, ds.query.identities, ds.query.names)
    g = embed_set(model, ds.gallery.images, ds.gallery.identities, ds.gallery.names)
    dist = distance_matrix(q, g)
    curve = cmc(dist, q.labels, g.labels, args.kmax)
    out = Path(args.out)
    export_results(curve, dist, q, g, out)
    _write_run(out, "eval", model.config.seed, resolved)
    shown = {f"CMC-{k}": round(float(curve[k - 1]), 4) for k in (1, 5, 10) if k <= len(curve)}
    print(json.dumps(shown))
    return 0


def cmd_align_viz(args) -> int:
    from .data import load_dataset
    from .evaluate import export_alignment_pairs
    from .model import load_checkpoint

    model = load_checkpoint(args.ckpt)
    if not model.config.stn_enabled:
        raise ValidationError("checkpoint has no alignment module (baseline model)")
    ds = load_dataset(args.data)
    split = ds.splits[args.split]
    count = min(args.count, len(split))
    resolved = {"ckpt": str(args.ckpt), "data": str(args.data), "count": count, "split": args.split}
    _announce("align-viz", model.config.seed, resolved)
    out = Path(args.out)
    export_alignment_pairs(model, split.images[:count], split.names[:count], out)
    _write_run(out, "align-viz", model.config.seed, resolved)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    seed = 0 if args.seed is None else args.seed
    _announce("gradcheck", seed, {"instances": args.instances, "tolerance": TOLERANCE})
    results = run_suite(seed=seed, instances=args.instances)
    ok = True
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        ok &= err < TOLERANCE
        print(f"{name:24s} max_rel_err={err:.3e} {status}")
    if not ok:
        raise ValidationError("gradient check failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sanet", description=__doc__)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train SANet (or the baseline)")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON with TrainConfig fields and an optional 'model' object")
    t.add_argument("--out", required=True)
    t.add_argument("--baseline", action="store_true", help="disable the self-alignment module")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="CMC evaluation on the query/gallery split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--kmax", type=int, default=25)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("align-viz", help="apply regressed transforms to raw images")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--count", type=int, default=16)
    a.add_argument("--split", default="query", choices=["train", "query", "gallery"])
    a.set_defaults(func=cmd_align_viz)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--seed", type=int)
    g.add_argument("--instances", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    from .trainer import NumericalAbort

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, FileNotFoundError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
