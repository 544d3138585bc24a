"""Command-line interface.

Subcommands: ingest, maskgen, train-attention, train-baseline,
run-scheme, eval, saliency, cluster-preview, sweep-clusters.

Exit codes: 0 success, 1 usage error (bad flags/arguments), 2 runtime
failure (missing files, malformed data, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .clustering import ClusterConfig, cluster_to_masks, kmeans_fit, label_image, model_to_text
from .config import default_config, load_config, render_config
from .data import (
    DataError,
    lower_half_mask,
    load_dataset_dir,
    mask_dataset,
    parse_fer_csv,
    save_dataset_dir,
    write_pgm,
)
from .metrics import evaluate, render_report, report_to_json, sweep_clusters
from .models import Model, mean_attention_map, saliency
from .training import run_baseline, run_perturb_scheme, train_attention, curves_to_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="perturb", description="attention-guided occlusion training pipeline")
    parser.add_argument("--version", action="version", version=f"perturb {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[], help="parse a FER-format CSV into a dataset directory")
    p.add_argument("--fer-csv", required=True, help="source CSV (emotion,pixels,Usage)")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("maskgen", help="write a masked copy of a dataset directory")
    p.add_argument("--in", dest="in_dir", required=True, help="source dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--region", default="lower-half", choices=["lower-half"], help="mask region")
    p.add_argument("--fill", default="mean", help="'mean' or a constant in [0,1]")

    for name, help_ in [
        ("train-attention", "phase 1: train the attention classifier"),
        ("train-baseline", "train the plain predictor (control arm)"),
        ("run-scheme", "full pipeline: attention, clustering, masked predictor"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--workers", type=int, default=None, help="eval batch workers (1 = sequential)")

    p = sub.add_parser("eval", help="score a saved model on a dataset split")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--workers", type=int, default=1, help="eval batch workers (1 = sequential)")

    p = sub.add_parser("saliency", help="gradient saliency map for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--index", type=int, required=True, help="image index within the split")
    p.add_argument("--class", dest="class_index", type=int, default=None, help="logit to differentiate (default: true label)")
    p.add_argument("--out", required=True, help="output PGM path")

    p = sub.add_parser("cluster-preview", help="cluster the mean attention map and render labels")
    p.add_argument("--model", required=True, help="attention-classifier checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--lambda", dest="grid_weight", type=float, default=1.5, help="grid-distance weight")
    p.add_argument("--alpha", dest="intensity_weight", type=float, default=1.2, help="intensity-distance weight")
    p.add_argument("--out", required=True, help="output PGM path (cluster label image)")
    p.add_argument("--text", default=None, help="also write the fitted model as text")

    p = sub.add_parser("sweep-clusters", help="train one masked predictor per cluster count")
    p.add_argument("--config", required=True)
    p.add_argument("--k", default="1,2,3,4,5", help="comma-separated cluster counts")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("show-config", help="print the default run configuration")
    return parser


def _load_model(path) -> Model:
    if not Path(path).exists():
        raise DataError(f"model checkpoint not found: {path}")
    return Model.load(path)


def _cmd_ingest(args) -> int:
    ds = parse_fer_csv(args.fer_csv)
    save_dataset_dir(ds, args.out, {"mask": None, "source_csv": str(args.fer_csv)})
    sizes = ds.sizes()
    print(f"ingested {sum(sizes.values())} images " f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']}) -> {args.out}")
    return 0


def _cmd_maskgen(args) -> int:
    try:
        fill = args.fill if args.fill == "mean" else float(args.fill)
    except ValueError:
        raise UsageError(f"--fill must be 'mean' or a float, got {args.fill!r}") from None
    ds = load_dataset_dir(args.in_dir)
    spec = lower_half_mask(fill)
    masked = mask_dataset(ds, spec)
    save_dataset_dir(
        masked,
        args.out,
        {"mask": {"region": args.region, "fill": fill, "pixels": spec.pixel_count()}},
    )
    print(f"masked {args.region} ({spec.pixel_count()} px, fill={fill}) -> {args.out}")
    return 0


def _with_workers(cfg, workers):
    if not workers:
        return cfg
    from dataclasses import replace

    return replace(cfg, train=replace(cfg.train, workers=workers))


def _cmd_train_attention(args) -> int:
    cfg = _with_workers(load_config(args.config), args.workers)
    ds = cfg.load_dataset()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, curves, _ = train_attention(ds, cfg.attention_spec(), cfg.train)
    model.save(out / "attention.ckpt")
    (out / "curves.csv").write_text(curves_to_csv(curves))
    report = evaluate(model, *ds.split("test"), cfg.train.eval_batch_size, cfg.train.workers)
    (out / "metrics.json").write_text(report_to_json(report))
    (out / "manifest.json").write_text(_manifest("train-attention", cfg))
    print(render_report(report), end="")
    print(f"artifacts -> {out}")
    return 0


def _manifest(command: str, cfg) -> str:
    return json.dumps(
        {"schema_version": 1, "command": command, "package_version": __version__, "config": render_config(cfg)},
        indent=2,
        sort_keys=True,
    ) + "\n"


def _cmd_train_baseline(args) -> int:
    cfg = _with_workers(load_config(args.config), args.workers)
    ds = cfg.load_dataset()
    model, _ = run_baseline(ds, cfg.predictor_spec(), cfg.train, args.out, {"config": render_config(cfg), "package_version": __version__})
    report = evaluate(model, *ds.split("test"), cfg.train.eval_batch_size, cfg.train.workers)
    print(render_report(report), end="")
    print(f"artifacts -> {args.out}")
    return 0


def _cmd_run_scheme(args) -> int:
    cfg = _with_workers(load_config(args.config), args.workers)
    ds = cfg.load_dataset()
    artifacts = run_perturb_scheme(
        ds,
        cfg.attention_spec(),
        cfg.predictor_spec(),
        cfg.train,
        args.out,
        {"config": render_config(cfg), "package_version": __version__},
    )
    print(artifacts.test_report_json, end="")
    print(f"artifacts -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args.model)
    ds = load_dataset_dir(args.data)
    images, labels = ds.split(args.split)
    report = evaluate(model, images, labels, workers=args.workers)
    text = report_to_json(report)
    if args.report:
        Path(args.report).write_text(text)
    print(render_report(report), end="")
    return 0


def _cmd_saliency(args) -> int:
    model = _load_model(args.model)
    ds = load_dataset_dir(args.data)
    images, labels = ds.split(args.split)
    if not 0 <= args.index < len(images):
        raise DataError(f"index {args.index} out of range for split {args.split!r} ({len(images)} images)")
    cls = args.class_index if args.class_index is not None else int(labels[args.index])
    smap = saliency(model, images[args.index], cls)
    write_pgm(args.out, smap)
    print(f"saliency map for image {args.index} (class {cls}) -> {args.out}")
    return 0


def _cmd_cluster_preview(args) -> int:
    model = _load_model(args.model)
    ds = load_dataset_dir(args.data)
    images, _ = ds.split(args.split)
    if len(images) == 0:
        raise DataError(f"split {args.split!r} is empty")
    amap = mean_attention_map(model, images)
    cfg = ClusterConfig(k=args.k, grid_weight=args.grid_weight, intensity_weight=args.intensity_weight)
    cm = kmeans_fit(amap, cfg)
    write_pgm(args.out, label_image(cm))
    if args.text:
        Path(args.text).write_text(model_to_text(cm))
    sizes = [int((cm.assignments == c).sum()) for c in range(cm.k)]
    print(f"k={cm.k} inertia={cm.inertia:.4f} cluster sizes {sizes} -> {args.out}")
    return 0


def _cmd_sweep_clusters(args) -> int:
    cfg = load_config(args.config)
    try:
        k_values = [int(v) for v in args.k.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--k must be comma-separated integers, got {args.k!r}") from None
    if not k_values:
        raise UsageError("--k must name at least one cluster count")
    ds = cfg.load_dataset()
    model, _, _ = train_attention(ds, cfg.attention_spec(), cfg.train)
    eval_images, eval_labels = ds.split("test")
    result = sweep_clusters(ds, model, cfg.predictor_spec(), cfg.train, k_values, eval_images, eval_labels)
    Path(args.out).write_text(result.to_csv())
    print(result.to_csv(), end="")
    print(f"best k = {result.best_k()}")
    return 0


def _cmd_show_config(args) -> int:
    print(render_config(default_config()), end="")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "maskgen": _cmd_maskgen,
    "train-attention": _cmd_train_attention,
    "train-baseline": _cmd_train_baseline,
    "run-scheme": _cmd_run_scheme,
    "eval": _cmd_eval,
    "saliency": _cmd_saliency,
    "cluster-preview": _cmd_cluster_preview,
    "sweep-clusters": _cmd_sweep_clusters,
    "show-config": _cmd_show_config,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        handler = _COMMANDS[args.command]
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
