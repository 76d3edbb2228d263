"""Command-line entry point: ``attrcl {gen-data,train,eval,compare}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .augment import PerspectiveConfig
from .datamodel import (DataError, SynthConfig, build_task_sequence, generate_synthetic,
                        load_manifest, write_manifest)
from .encoder import EncoderConfig
from .evaluation import RetrievalReport, export_attention_map, forgetting_report
from .losses import Hyperparams
from .model import load_checkpoint
from .trainer import MethodConfig, TrainHistory, count_images_per_step, train_sequence, write_run

log = logging.getLogger("attrcl")

OUTPUT_ROOT_ENV = "ATTRCL_OUTPUT_ROOT"
# arguments that describe the invocation rather than the experiment; the
# output directory is where the snapshot itself lives
_NOT_SNAPSHOTTED = {"command", "config", "func", "verbose", "out"}


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def write_config_file(path, settings: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(settings):
            v = settings[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(map(str, v))
            fh.write(f"{k} = {'' if v is None else v}\n")


def _settings(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in _NOT_SNAPSHOTTED}


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> Path:
    out = Path(args.out) if args.out else _output_root() / "data"
    cfg = SynthConfig.desk(args.attrs, args.subclasses, args.per_subclass, args.image_size)
    ds = generate_synthetic(cfg, args.seed)
    try:
        write_manifest(ds, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    write_config_file(out / "config.txt", _settings(args))
    print(f"wrote {len(ds)} items to {out}")
    return out


def _method_config(args, image_size: int) -> MethodConfig:
    hyper = Hyperparams(tau=args.tau, lambda_kd=args.lambda_kd, margin=args.margin,
                        beta=args.beta, batch=args.batch)
    return MethodConfig(method=args.method, hyper=hyper, epochs=args.epochs, lr=args.lr,
                        replay_capacity=args.replay_capacity, distill=not args.no_distill,
                        perspective=PerspectiveConfig(args.strength),
                        encoder=EncoderConfig(image_size=image_size))


def cmd_train(args) -> Path:
    if not args.data:
        raise DataError("--data is required")
    dataset = load_manifest(args.data)
    order = args.order.split(",") if args.order else dataset.attribute_names
    config = _method_config(args, dataset.items[0].image.shape[0])
    out = Path(args.out) if args.out else _output_root() / f"{config.method}_seed{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    settings = _settings(args)
    write_config_file(out / "config.txt", settings)
    tasks = build_task_sequence([dataset], order, args.doublets, args.seed)
    history = train_sequence(tasks, config, args.seed, dataset,
                             checkpoint_dir=out / "checkpoints")
    write_run(history, config, out, settings)
    print(f"trained {len(tasks)} tasks ({len(history.records)} steps) -> {out}")
    return out


def load_run(run_dir) -> TrainHistory:
    run = Path(run_dir)
    manifest_path = run / "history.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no history.json in {run}")
    manifest = json.loads(manifest_path.read_text())
    history = TrainHistory(manifest["method"], list(manifest["order"]))
    for i, rel in enumerate(manifest["checkpoints"]):
        path = run / rel
        if not path.exists():
            raise FileNotFoundError(f"missing snapshot {path}")
        history.snapshots[i], _ = load_checkpoint(path)
    if history.snapshots:
        history.final = history.snapshots[len(history.order) - 1]
    return history


def cmd_eval(args) -> Path:
    run = Path(args.run)
    history = load_run(run)
    data = args.data
    if not data:
        data = read_config_file(run / "config.txt").get("data")
    if not data:
        raise DataError("--data is required")
    dataset = load_manifest(data)
    report = forgetting_report(history, dataset, args.max_items, use_teacher=args.use_teacher)
    report.to_csv(run / "report.csv")
    (run / "report.txt").write_text(report.render())
    print(report.render(), end="")
    if args.export_attention is not None:
        targets = [(i, a) for i in args.export_attention for a in history.order]
        if not args.export_attention:
            targets = [(dataset.carriers(a)[0].id, a) for a in history.order
                       if dataset.carriers(a)]
        for item_id, attr in targets:
            export_attention_map(history.final, dataset.item(item_id).image, attr,
                                 run / "attention" / f"{item_id}__{attr}")
    return run


def _read_images_per_step(run: Path) -> int:
    return int(json.loads((run / "history.json").read_text())["images_per_step"])


def cmd_compare(args) -> Path:
    runs = [Path(r) for r in args.runs]
    if len(runs) < 2:
        raise DataError("compare needs at least two runs")
    reports = []
    for run in runs:
        path = run / "report.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run 'attrcl eval --run {run}' first")
        method = json.loads((run / "history.json").read_text())["method"]
        reports.append(RetrievalReport.from_csv(path, method))
    names = [sorted(r.attribute for r in rep.rows) for rep in reports]
    if any(n != names[0] for n in names):
        raise DataError("runs cover different attribute sets")
    out = Path(args.out) if args.out else _output_root() / "compare"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "method", "mean_A", "mean_B", "mean_forgetting", "images_per_step"])
        for run, rep in zip(runs, reports):
            w.writerow([str(run), rep.method, f"{rep.mean_a:.4f}", f"{rep.mean_b:.4f}",
                        f"{rep.mean_forgetting:.4f}", _read_images_per_step(run)])
    _plot_comparison(reports, [r.name for r in runs], out / "compare.png")
    print((out / "comparison.csv").read_text(), end="")
    return out


def _plot_comparison(reports, labels, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    attrs = [r.attribute for r in reports[0].rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [3, 1]})
    width = 0.8 / len(reports)
    x = np.arange(len(attrs))
    for k, (rep, label) in enumerate(zip(reports, labels)):
        by_name = {r.attribute: r for r in rep.rows}
        ax1.bar(x + k * width, [by_name[a].a for a in attrs], width, label=f"{label} A")
        ax1.scatter(x + k * width, [by_name[a].b for a in attrs], marker="_", s=200,
                    color="k", zorder=3)
    ax1.set_xticks(x + width * (len(reports) - 1) / 2, attrs, rotation=20)
    ax1.set_ylabel("mAP (bars: A, ticks: B)")
    ax1.legend(fontsize=8)
    ax2.bar(labels, [rep.mean_forgetting for rep in reports])
    ax2.set_ylabel("mean forgetting (B - A)")
    ax2.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)


# -- parser -----------------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults unless the help text already explains them."""

    def _get_help_string(self, action):
        if "(default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="attrcl", description=__doc__,
        epilog=f"Default output root: ${OUTPUT_ROOT_ENV} (else ./runs).",
        formatter_class=_HelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = _HelpFormatter

    g = sub.add_parser("gen-data", help="render a synthetic dataset", formatter_class=fmt)
    g.add_argument("--attrs", type=int, default=4, help="number of attributes (max 5)")
    g.add_argument("--subclasses", type=int, default=4, help="subclasses per attribute")
    g.add_argument("--per-subclass", type=int, default=50, help="items per subclass per attribute")
    g.add_argument("--image-size", type=int, default=64, help="square image side in pixels")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--out", default=None, help="output directory (default: <root>/data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a task sequence", formatter_class=fmt)
    t.add_argument("--method", choices=["mclfir", "er", "multihead", "multihead_triplet"],
                   default="mclfir", help="training method (multihead = multihead_triplet)")
    t.add_argument("--order", default=None,
                   help="comma-separated attribute order (default: dataset order)")
    t.add_argument("--epochs", type=int, default=3, help="epochs per task")
    t.add_argument("--doublets", type=int, default=500,
                   help="training doublets (or triplets) per task")
    t.add_argument("--batch", type=int, default=16, help="doublets (or triplets) per step")
    t.add_argument("--lambda", dest="lambda_kd", type=float, default=1e-4,
                   help="distillation weight")
    t.add_argument("--beta", type=float, default=0.999, help="EMA teacher momentum")
    t.add_argument("--tau", type=float, default=0.3, help="InfoNCE temperature")
    t.add_argument("--margin", type=float, default=0.2, help="triplet margin (baselines)")
    t.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    t.add_argument("--replay-capacity", type=int, default=2000,
                   help="reservoir size in triplets (er only)")
    t.add_argument("--strength", type=float, default=0.2, help="perspective corner jitter")
    t.add_argument("--no-distill", action="store_true",
                   help="drop the distillation term (EMA teacher still updated)")
    t.add_argument("--seed", type=int, default=0, help="sampling and initialization seed")
    t.add_argument("--data", default=None, help="dataset directory or manifest")
    t.add_argument("--out", default=None,
                   help="run directory (default: <root>/<method>_seed<seed>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="A/(B) report for a run", formatter_class=fmt)
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--data", default=None, help="evaluation dataset (default: training data)")
    e.add_argument("--max-items", type=int, default=None,
                   help="evaluate only the first N carriers per attribute")
    e.add_argument("--use-teacher", action="store_true", help="embed with the EMA teacher")
    e.add_argument("--export-attention", nargs="*", default=None, metavar="ITEM_ID",
                   help="write attention maps for these items (no ids: first carrier "
                        "of each attribute)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="compare evaluated runs", formatter_class=fmt)
    c.add_argument("--runs", nargs="+", required=True, help="evaluated run directories")
    c.add_argument("--out", default=None, help="output directory (default: <root>/compare)")
    c.set_defaults(func=cmd_compare)

    for sp in (g, t, e, c):
        sp.add_argument("--config", default=None, help="flat key = value file of defaults")
    return p


def _coerce(parser: argparse.ArgumentParser, values: dict) -> dict:
    actions = {a.dest: a for a in parser._actions}
    out = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise ValueError(f"unknown config key {key!r}")
        if raw == "":
            out[key] = None
        elif isinstance(action, argparse._StoreTrueAction):
            out[key] = raw.lower() in ("1", "true", "yes")
        elif action.nargs in ("+", "*"):
            out[key] = raw.split(",")
        elif action.type is not None:
            out[key] = action.type(raw)
        else:
            out[key] = raw
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.config:
            subparser = parser._subparsers._group_actions[0].choices[args.command]
            subparser.set_defaults(**_coerce(subparser, read_config_file(args.config)))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        args.func(args)
    except (DataError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"attrcl: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
