"""Command-line entry point: ``spseg <command> [options]``.

Commands: prepare, annotate, degrade, train, eval, predict, sweep, report.
Settings resolve as flags > ``--config`` file > defaults, and every command
writes the resolved settings next to its outputs. Outputs default to
``$SPSEG_OUTPUT_ROOT`` (or ``./runs``) and existing outputs are never
replaced without ``--overwrite``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotation import (ClusterDegradeSpec, ClusteringError, NoiseSpec, degrade_sp_clustering,
                         degrade_sp_noise_all, extract_sp, sample_dataset_keypoints, write_degrade_sidecar)
from .core import AnnotatedDataset, DatasetError, load_dataset, save_dataset, write_keypoint_csv, write_sp_csv
from .evaluation import (MetricsReport, aggregate_reports, evaluate_model, markdown_table, predict_dataset,
                         write_report)
from .ingestion import SyntheticSpec, TilingSpec, generate_synthetic, load_aerial_dubai, load_electron_microscopy
from .network import export_mask, export_score_maps, gap, load_checkpoint
from .objectives import LossConfig
from .sweeps import SweepSpec, run_sweep, trend_check
from .training import TRAINERS, TrainConfig, save_run

log = logging.getLogger("spseg")

OUTPUT_ROOT_ENV = "SPSEG_OUTPUT_ROOT"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def parse_kv(tokens) -> dict[str, str]:
    """``["a=1", "b=x,y"]`` -> {"a": "1", "b": "x,y"}; dicts pass through."""
    if tokens is None:
        return {}
    if isinstance(tokens, dict):
        return {str(k): str(v) for k, v in tokens.items()}
    out = {}
    for tok in tokens:
        key, sep, value = str(tok).partition("=")
        if not sep or not key:
            raise CliError(f"expected key=value, got {tok!r}")
        out[key.strip()] = value.strip()
    return out


def _pop(kv: dict, key: str, cast, default=None):
    if key not in kv:
        return default
    raw = kv.pop(key)
    try:
        return cast(raw)
    except ValueError as exc:
        raise CliError(f"bad value for {key}: {raw!r}") from exc


def _no_leftovers(kv: dict, what: str) -> None:
    if kv:
        raise CliError(f"unknown {what} option(s): {', '.join(sorted(kv))}")


def _pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


def _flag(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_path(value: str | None, default_name: str) -> Path:
    return Path(value) if value else output_root() / default_name


def _guard(path: Path, overwrite: bool) -> None:
    """Refuse to write into an existing non-empty output."""
    if overwrite or not path.exists():
        return
    if path.is_dir() and not any(path.iterdir()):
        return
    raise CliError(f"{path} already exists; pass --overwrite to replace it")


def _jsonable(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_resolved(out_dir: Path, args: argparse.Namespace, name: str = "config.json", **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {"cli": _jsonable(args), **extra}
    (out_dir / name).write_text(json.dumps(body, indent=2, sort_keys=True, default=str))


def _load(args, with_keypoints: bool = True) -> AnnotatedDataset:
    kp = getattr(args, "keypoints_file", None) if with_keypoints else None
    return load_dataset(args.data, sp_path=getattr(args, "sp", None), keypoint_path=kp)


def _class_indices(ds: AnnotatedDataset, names: str | None) -> list[int]:
    if not names:
        if ds.mode == "binary":
            return [0]
        raise CliError("--keypoints needs classes=<name,...> for multiclass data")
    out = []
    for name in names.split(","):
        name = name.strip()
        if name in ds.class_names:
            out.append(ds.class_names.index(name))
        elif name.isdigit() and int(name) < ds.n_classes:
            out.append(int(name))
        else:
            raise CliError(f"unknown class {name!r}; known: {', '.join(ds.class_names)}")
    return out


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    out = _out_path(args.out, "dataset")
    _guard(out / "manifest.json", args.overwrite)
    if args.synthetic is not None:
        kv = parse_kv(args.synthetic)
        mode = _pop(kv, "mode", str, "multiclass")
        size = _pop(kv, "size", int, 64)
        names = _pop(kv, "names", lambda s: tuple(s.split(",")), ())
        spec = SyntheticSpec(
            n_images=_pop(kv, "n", int, 100), m=size, h=size,
            n_classes=_pop(kv, "classes", int, 3), mode=mode,
            radius_range=_pop(kv, "radius", _pair, (8, 18)),
            count_range=_pop(kv, "count", _pair, (1, 2)),
            imbalance_ratio=_pop(kv, "imbalance", float, None),
            noise_std=_pop(kv, "noise", float, 0.1),
            brightness_jitter=_pop(kv, "jitter", float, 0.1),
            channels=_pop(kv, "channels", int, None),
            train_fraction=_pop(kv, "train_fraction", float, args.train_fraction),
            seed=_pop(kv, "seed", int, args.seed),
            class_names=names,
        )
        _no_leftovers(kv, "--synthetic")
        ds = generate_synthetic(spec)
    else:
        root = Path(args.root)
        if not root.exists():
            raise CliError(f"dataset root {root} does not exist")
        size = args.patch or (224 if args.dataset == "aerial" else 256)
        tiling = TilingSpec.square(size, args.stride or size, args.edge_policy)
        loader = load_aerial_dubai if args.dataset == "aerial" else load_electron_microscopy
        ds = loader(root, tiling, train_fraction=args.train_fraction, seed=args.seed)
    save_dataset(ds, out)
    _write_resolved(out, args)
    print(f"{len(ds.ids)} patches ({len(ds.train_ids)} train / {len(ds.test_ids)} test), "
          f"{len(ds.class_names)} classes ({ds.mode}) -> {out}")
    return 0


def cmd_annotate(args) -> int:
    ds = load_dataset(args.data)
    if ds.gt_masks is None or any(i not in ds.gt_masks for i in ds.ids):
        raise CliError("annotate needs ground-truth masks for every patch")
    out = _out_path(args.out, "annotations")
    _guard(out / "sp.csv", args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    write_sp_csv(out / "sp.csv", {i: extract_sp(ds.gt_masks[i]) for i in ds.ids}, ds.class_names)
    written = ["sp.csv"]
    if args.keypoints is not None:
        kv = parse_kv(args.keypoints)
        n_seeds = _pop(kv, "n", int, 3)
        radius = _pop(kv, "radius", int, 2)
        classes = _class_indices(ds, _pop(kv, "classes", str, None))
        negatives = _pop(kv, "negatives", _flag, False)
        fraction = _pop(kv, "fraction", float, 1.0)
        _no_leftovers(kv, "--keypoints")
        if not 0 < fraction <= 1:
            raise CliError("keypoint fraction must be in (0, 1]")
        train = sorted(ds.train_ids)
        rng = np.random.default_rng([args.seed, 0x4B50])
        chosen = sorted(train[k] for k in rng.permutation(len(train))[:max(1, round(fraction * len(train)))])
        kps = sample_dataset_keypoints(ds.gt_masks, chosen, classes, n_seeds, radius, args.seed, negatives)
        write_keypoint_csv(out / "keypoints.csv", kps)
        written.append(f"keypoints.csv ({len(kps)} annotations on {len({k.image_id for k in kps})} images)")
    _write_resolved(out, args)
    print(f"wrote {', '.join(written)} -> {out}")
    return 0


def cmd_degrade(args) -> int:
    ds = _load(args, with_keypoints=False)
    train_sp = {i: ds.sp[i] for i in ds.train_ids}
    if args.noise is not None:
        kv = parse_kv(args.noise)
        spec = NoiseSpec(sigma=_pop(kv, "sigma", float, 0.1), renorm=_pop(kv, "renorm", str, "softmax_if_noisy"),
                         seed=_pop(kv, "seed", int, args.seed))
        _no_leftovers(kv, "--noise")
        degraded, tag = degrade_sp_noise_all(train_sp, spec), f"noise_{spec.sigma:g}"
    else:
        kv = parse_kv(args.cluster)
        spec = ClusterDegradeSpec(k=_pop(kv, "k", int, 10), seed=_pop(kv, "seed", int, args.seed))
        _no_leftovers(kv, "--cluster")
        if spec.k > len(train_sp):
            raise CliError(f"k={spec.k} exceeds the {len(train_sp)} training images")
        degraded, tag = degrade_sp_clustering(train_sp, spec)[0], f"cluster_{spec.k}"
    out = Path(args.out) if args.out else output_root() / "degraded" / f"sp_{tag}.csv"
    _guard(out, args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sp_csv(out, {**ds.sp, **degraded}, ds.class_names)
    source = args.sp or str(Path(args.data) / "sp.csv")
    write_degrade_sidecar(out.with_suffix(".json"), spec, source=source)
    print(f"degraded {len(degraded)} train SPs ({tag}) -> {out}")
    return 0


def train_config_from(args, mode: str | None = None) -> TrainConfig:
    return TrainConfig(
        mode=mode or args.mode, learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
        patience=args.patience, seed=args.seed, loss_cfg=LossConfig(alpha=args.alpha),
        base_filters=args.base_filters, dtype=args.dtype, val_fraction=args.val_fraction,
        monitor=args.monitor, prior_init=not args.no_prior_init,
    )


def cmd_train(args) -> int:
    ds = _load(args)
    cfg = train_config_from(args)
    if cfg.mode == "spss_plus" and not ds.keypoints:
        raise CliError("spss_plus needs keypoints (--keypoints-file); use --mode spss for SP-only training")
    if cfg.mode == "benchmark" and ds.gt_masks is None:
        raise CliError("benchmark training needs ground-truth masks")
    out = _out_path(args.out, f"train_{cfg.mode}")
    _guard(out, args.overwrite)
    for r in range(args.repeat):
        run_cfg = replace(cfg, seed=cfg.seed + r)
        run_dir = out / f"run_{r:02d}" if args.repeat > 1 else out
        model, hist = TRAINERS[cfg.mode](ds, run_cfg)
        save_run(run_dir, model, hist, run_cfg, {"cli": _jsonable(args)})
        print(f"{cfg.mode} seed={run_cfg.seed}: {hist.stopped_epoch} epochs, best epoch {hist.best_epoch}, "
              f"loss {hist.best_val_loss:.6f} -> {run_dir}")
    return 0


def _run_dirs(path: Path) -> list[Path]:
    if (path / "checkpoint.pt").exists():
        return [path]
    runs = sorted(p for p in path.glob("run_*") if (p / "checkpoint.pt").exists())
    if not runs:
        raise CliError(f"no checkpoint.pt in {path} or its run_* directories")
    return runs


def _excluded(ds: AnnotatedDataset, names: Sequence[str]) -> list[int]:
    scored = ["background", *ds.class_names] if ds.mode == "binary" else list(ds.class_names)
    missing = [n for n in names if n not in scored]
    if missing:
        raise CliError(f"cannot exclude unknown class(es) {missing}; known: {', '.join(scored)}")
    return [scored.index(n) for n in names]


def cmd_eval(args) -> int:
    ds = _load(args, with_keypoints=False)
    if ds.gt_masks is None:
        raise CliError("evaluation needs ground-truth masks")
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "eval"
    _guard(out / "report.json", args.overwrite)
    excluded = _excluded(ds, args.exclude)
    reports = []
    for run_dir in _run_dirs(run):
        model = load_checkpoint(run_dir / "checkpoint.pt")
        reports.append(evaluate_model(model, ds, args.mask_mode, excluded, args.threshold))
        if args.export_maps:
            _export(model, ds, sorted(ds.test_ids), out / "maps" / run_dir.name, args)
    report = aggregate_reports(reports) if len(reports) > 1 else reports[0]
    write_report(report, out, title=run.name, config={"cli": _jsonable(args)})
    print(markdown_table({run.name: report}), end="")
    return 0


def _export(model, ds: AnnotatedDataset, ids: Sequence[str], out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = list(ds.class_names)
    rows = []
    for image_id, maps, mask in predict_dataset(model, ds, ids, args.mask_mode, args.threshold):
        export_score_maps(maps, out, image_id, names)
        export_mask(mask, out / f"{image_id}_mask.png")
        rows.append([image_id, *(repr(float(v)) for v in gap(maps).values)])
    with open(out / "predicted_sp.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", *names])
        w.writerows(rows)


def cmd_predict(args) -> int:
    ds = _load(args, with_keypoints=False)
    run_dir = _run_dirs(Path(args.run))[0]
    out = _out_path(args.out, "predictions")
    _guard(out, args.overwrite)
    ids = args.ids or sorted(ds.test_ids)
    unknown = [i for i in ids if i not in set(ds.ids)]
    if unknown:
        raise CliError(f"unknown image id(s): {unknown[:5]}")
    _export(load_checkpoint(run_dir / "checkpoint.pt"), ds, ids, out, args)
    _write_resolved(out, args)
    print(f"exported score maps and masks for {len(ids)} images -> {out}")
    return 0


def cmd_sweep(args) -> int:
    ds = _load(args, with_keypoints=False)
    kind = "noise" if args.noise is not None else "cluster"
    kv = parse_kv(args.noise if kind == "noise" else args.cluster)
    levels = _pop(kv, "levels", lambda s: [v.strip() for v in s.split(",") if v.strip()], None)
    renorm = _pop(kv, "renorm", str, "softmax_if_noisy")
    _no_leftovers(kv, f"--{kind}")
    if not levels:
        raise CliError(f"--{kind} needs levels=<v1,v2,...>")
    if kind == "noise":
        levels = [float(v) for v in levels]
    else:
        levels = [v if v.startswith("N") else int(v) for v in levels]
    spec = SweepSpec(kind, tuple(levels), train_config_from(args, "spss"), args.runs, args.seed, renorm)
    out = _out_path(args.out, f"sweep_{kind}")
    if not args.resume:
        _guard(out, args.overwrite)
    rows = run_sweep(ds, spec, out)
    _write_resolved(out, args, name="config.json", sweep=spec.to_dict())
    trend = trend_check(rows, args.tolerance)
    for row in rows:
        print(f"{kind} {row.level}: mean IoU {100 * row.mean_iou:.1f} (seed {row.seed})")
    print(f"trend check (tolerance {args.tolerance} points): {'pass' if trend else 'fail'}"
          + ("" if trend else f" at {list(trend.violations)}"))
    return 0


def _collect_reports(paths: Sequence[str]) -> dict[str, MetricsReport]:
    rows = {}
    for p in map(Path, paths):
        file = p / "report.json" if p.is_dir() else p
        if not file.exists() and p.is_dir() and (p / "eval" / "report.json").exists():
            file = p / "eval" / "report.json"
        if not file.exists():
            raise CliError(f"no report.json at {p}")
        body = json.loads(file.read_text())
        rows[p.name if p.is_dir() else p.parent.name] = MetricsReport.from_json(body["metrics"])
    return rows


def cmd_report(args) -> int:
    rows = _collect_reports(args.inputs)
    text = markdown_table(rows)
    if args.out:
        out = Path(args.out)
        _guard(out, args.overwrite)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.max_epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--alpha", type=float, default=LossConfig().alpha, help="SP weight in the SPSS+ loss")
    p.add_argument("--base-filters", type=int, default=d.base_filters)
    p.add_argument("--dtype", choices=["float32", "float64"], default=d.dtype)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--monitor", choices=["train_holdout", "test"], default=d.monitor)
    p.add_argument("--no-prior-init", action="store_true", help="plain random head instead of prior-matched bias")


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
    p.add_argument("--out", help=f"output path (default under ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="spseg", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="global seed for data, annotation and training")
    parser.add_argument("--config", help="JSON or YAML file with option defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["prepare"] = sub.add_parser("prepare", help="tile a raw dataset or generate synthetic data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                     help="classes, n, size, mode, imbalance, radius=lo-hi, count=lo-hi, noise, jitter, "
                          "channels, names, seed")
    src.add_argument("--dataset", choices=["aerial", "em"])
    p.add_argument("--root", help="raw dataset directory (with --dataset)")
    p.add_argument("--patch", type=int, help="patch side (224 aerial, 256 em)")
    p.add_argument("--stride", type=int)
    p.add_argument("--edge-policy", choices=["drop_partial", "pad_reflect"], default="drop_partial")
    p.add_argument("--train-fraction", type=float, default=0.8)
    _add_common(p, data=False)
    p.set_defaults(func=cmd_prepare)

    p = subs["annotate"] = sub.add_parser("annotate", help="SP CSV (and keypoints) from masks")
    p.add_argument("--keypoints", nargs="*", metavar="KEY=VALUE",
                   help="n, radius, classes=a,b, negatives=0/1, fraction")
    _add_common(p)
    p.set_defaults(func=cmd_annotate)

    p = subs["degrade"] = sub.add_parser("degrade", help="noise or cluster-collapse the train SPs")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--noise", nargs="*", metavar="KEY=VALUE", help="sigma, renorm, seed")
    mode.add_argument("--cluster", nargs="*", metavar="KEY=VALUE", help="k, seed")
    p.add_argument("--sp", help="SP CSV to degrade (default: the dataset's)")
    _add_common(p)
    p.set_defaults(func=cmd_degrade)

    p = subs["train"] = sub.add_parser("train", help="fit spss, spss_plus or the benchmark")
    p.add_argument("--mode", choices=sorted(TRAINERS), default="spss")
    p.add_argument("--sp", help="SP CSV overriding the dataset's")
    p.add_argument("--keypoints-file", help="keypoint CSV overriding the dataset's")
    p.add_argument("--repeat", type=int, default=1, help="independent runs with seeds seed, seed+1, ...")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score checkpoints on the test split"),
                             ("predict", cmd_predict, "export score maps and masks")):
        p = subs[name] = sub.add_parser(name, help=text)
        p.add_argument("--run", required=True, help="run directory (or parent of run_* directories)")
        p.add_argument("--mask-mode", choices=["argmax", "threshold"])
        p.add_argument("--threshold", type=float, default=0.5)
        if name == "eval":
            p.add_argument("--exclude", nargs="*", default=[], help="class names left out of the means")
            p.add_argument("--export-maps", action="store_true", help="also write score-map and mask PNGs")
        else:
            p.add_argument("--ids", nargs="*", help="image ids (default: test split)")
        _add_common(p)
        p.set_defaults(func=func)

    p = subs["sweep"] = sub.add_parser("sweep", help="SP-degradation sensitivity sweep")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--noise", nargs="*", metavar="KEY=VALUE", help="levels=0,0.1,..., renorm")
    mode.add_argument("--cluster", nargs="*", metavar="KEY=VALUE", help="levels=N,N/3,10,5")
    p.add_argument("--sp", help="SP CSV overriding the dataset's")
    p.add_argument("--runs", type=int, default=1, help="runs per level")
    p.add_argument("--tolerance", type=float, default=3.0, help="trend tolerance in Mean IoU points")
    p.add_argument("--resume", action="store_true", help="reuse finished levels in --out")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = subs["report"] = sub.add_parser("report", help="combine report.json files into one table")
    p.add_argument("inputs", nargs="+", help="report.json files or directories holding them")
    _add_common(p, data=False)
    p.set_defaults(func=cmd_report)
    return parser, subs


def load_config(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a mapping")
    return data


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse flags, then re-parse with config-file values as defaults.

    The config may hold flat option names and/or a section per command;
    command sections win over flat keys, explicit flags win over both.
    """
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    conf = load_config(args.config)
    sub = subs[args.command]
    known_sub = {a.dest for a in sub._actions}
    known_top = {a.dest for a in parser._actions}
    values = {k.replace("-", "_"): v for k, v in conf.items() if not isinstance(v, dict) or k not in subs}
    values.update({k.replace("-", "_"): v for k, v in conf.get(args.command, {}).items()})
    unknown = sorted(set(values) - known_sub - known_top - {"command"})
    if unknown:
        raise CliError(f"unknown option(s) in {args.config}: {', '.join(unknown)}")
    sub.set_defaults(**{k: v for k, v in values.items() if k in known_sub})
    parser.set_defaults(**{k: v for k, v in values.items() if k in known_top and k != "config"})
    resolved = parser.parse_args(argv)
    log.info("resolved options: %s", _jsonable(resolved))
    return resolved


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"spseg: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "prepare" and args.dataset and not args.root:
        print("spseg prepare: error: --dataset needs --root", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, DatasetError, ClusteringError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"spseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
