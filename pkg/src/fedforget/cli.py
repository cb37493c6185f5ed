"""``fedforget`` command line.

Subcommands::

    prepare     raw UCI HAR directory -> split manifest, normalisation stats, cache
    train-base  train the base CNN with best-validation selection
    run         execute a baseline or federated scenario file
    project     PCA / t-SNE of per-class samples in feature space
    synth       write a synthetic dataset in the UCI layout (dry runs only)

Exit codes: 0 success, 2 invalid input data or scenario, 3 checkpoint write
failure, 4 insufficient data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import emit_reports, pca, scatter_svg, tsne, write_projection_csv
from .core import Rng, derive
from .dataset import N_CLASSES, draw_disjoint, load_prepared, load_uci, prepare, save_prepared
from .errors import (
    CheckpointCorrupt,
    FedForgetError,
    InsufficientData,
    IoFailure,
    MissingFile,
    PerplexityInfeasible,
    ScheduleInvalid,
)
from .fedsim import (
    ScenarioConfig,
    round_log_summary,
    run_scenario,
    write_initial_csv,
    write_loss_csv,
    write_provenance_csv,
)
from .model import HyperParams, extract_features, load_checkpoint, save_checkpoint, train_base

log = logging.getLogger("fedforget")

EXIT_DATA = 2
EXIT_CHECKPOINT = 3
EXIT_INSUFFICIENT = 4
BUILTIN_SCENARIOS = ("baseline", "federated")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(path: Path, command: str, config: dict, seed, started: str, artifacts) -> None:
    paths = []
    for a in artifacts:
        s = str(a)
        if s not in paths:
            paths.append(s)
    doc = {
        "command": command,
        "config": config,
        "root_seed": seed,
        "started": started,
        "finished": _now(),
        "artifacts": paths,
        "version": __version__,
    }
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n")


def scenario_path(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists() or name_or_path not in BUILTIN_SCENARIOS:
        return p
    return Path(str(resources.files("fedforget") / "scenarios" / f"{name_or_path}.json"))


# -- commands --------------------------------------------------------------------

def cmd_prepare(args) -> int:
    started = _now()
    try:
        raw = load_uci(args.uci_dir)
    except FedForgetError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    prepared = prepare(raw, Rng(args.seed))
    out = Path(args.out)
    written = save_prepared(out, prepared)
    counts = raw.per_class_count().tolist()
    log.info("loaded %d windows, class counts %s", len(raw), counts)
    config = {"uci_dir": str(args.uci_dir), "out": str(out), "class_counts": counts,
              "split_sizes": {n: len(prepared.split(n)) for n in ("train", "val", "test")}}
    write_run_manifest(out / "prepare_manifest.json", "prepare", config, args.seed, started, written)
    return 0


def _load_data(path):
    try:
        return load_prepared(path)
    except MissingFile as exc:
        raise CliError(EXIT_DATA, f"prepared data not found: {exc}") from exc


def cmd_train_base(args) -> int:
    started = _now()
    data = _load_data(args.data)
    hp = HyperParams(learning_rate=args.lr, batch_size=args.batch, dropout_rate=args.dropout, epochs=1)
    t0 = time.perf_counter()
    result = train_base(data.train, data.val, data.test, hp, Rng(args.seed), max_epochs=args.epochs)
    ckpt = Path(args.out)
    try:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, result.params)
    except (IoFailure, OSError) as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    metrics = dict(result.metrics, history=result.history, seconds=round(time.perf_counter() - t0, 1))
    metrics_path = ckpt.with_name(ckpt.name + ".metrics.json")
    metrics_path.write_text(json.dumps(metrics, indent=2) + "\n")
    log.info("base model: train %.4f val %.4f test %.4f (epoch %d)", metrics["train"], metrics["val"],
             metrics["test"], metrics["best_epoch"])
    config = {"data": str(args.data), "epochs": args.epochs, "lr": args.lr, "batch": args.batch,
              "dropout": args.dropout}
    write_run_manifest(ckpt.with_name(ckpt.name + ".manifest.json"), "train-base", config, args.seed,
                       started, [ckpt, metrics_path])
    return 0


def cmd_run(args) -> int:
    started = _now()
    path = scenario_path(args.scenario)
    if not path.is_file():
        raise CliError(EXIT_DATA, f"scenario file not found: {path}")
    try:
        cfg = ScenarioConfig.from_json(path)
    except ScheduleInvalid as exc:
        raise CliError(EXIT_DATA, f"invalid scenario {path}: {exc}") from exc
    if args.seed is not None:
        cfg.root_seed = args.seed
    if args.checkpoint:
        cfg.initial_checkpoint = args.checkpoint
    if not cfg.initial_checkpoint:
        raise CliError(EXIT_DATA, "no initial checkpoint: pass --checkpoint or set 'checkpoint' in the scenario")
    data = _load_data(args.data)
    try:
        initial = load_checkpoint(cfg.initial_checkpoint)
    except CheckpointCorrupt as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    try:
        rlog = run_scenario(cfg, data, initial, parallel=args.parallel)
    except InsufficientData as exc:
        raise CliError(EXIT_INSUFFICIENT, str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if rlog.rounds:
        written += emit_reports(rlog, out)
    extra = {"provenance.csv": write_provenance_csv, "losses.csv": write_loss_csv,
             "initial_accuracy.csv": write_initial_csv}
    for name, fn in extra.items():
        fn(out / name, rlog)
        written.append(out / name)
    (out / "summary.json").write_text(json.dumps(round_log_summary(rlog), indent=2) + "\n")
    written.append(out / "summary.json")
    write_run_manifest(out / "manifest.json", "run", cfg.to_dict(), cfg.root_seed, started, written)
    return 0


def sample_per_class(dataset, per_class: int, rng: Rng):
    """``per_class`` windows of each class, sampled without replacement."""
    counts = dataset.per_class_count()
    short = [c for c in range(N_CLASSES) if counts[c] < per_class]
    if short:
        c = short[0]
        raise InsufficientData(f"class {c} has {counts[c]} windows, fewer than --per-class {per_class}",
                               label=c, shortfall=int(per_class - counts[c]))
    sample, _ = draw_disjoint(dataset, range(N_CLASSES), per_class * N_CLASSES, rng)
    return sample


def cmd_project(args) -> int:
    started = _now()
    data = _load_data(args.data)
    try:
        params = load_checkpoint(args.checkpoint)
    except CheckpointCorrupt as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    root = Rng(args.seed)
    try:
        sample = sample_per_class(data.all(), args.per_class, derive(root, 0))
    except InsufficientData as exc:
        raise CliError(EXIT_INSUFFICIENT, str(exc)) from exc
    feats = extract_features(params, sample, args.layer)
    try:
        if args.method == "pca":
            proj = pca(feats, 3, sample.labels)
        else:
            proj = tsne(feats, args.perplexity, args.iterations, derive(root, 1), sample.labels)
    except (PerplexityInfeasible, FedForgetError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"projection_{args.method}_{args.layer}"
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    write_projection_csv(csv_path, proj)
    scatter_svg(proj, f"{args.method.upper()} of {args.per_class} windows per class ({args.layer})", svg_path)
    meta = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in proj.meta.items()
            if k in ("explained_variance_ratio", "explained_variance", "kl", "kl_trace", "perplexity")}
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "method": args.method,
              "layer": args.layer, "per_class": args.per_class, "meta": meta}
    write_run_manifest(out / f"{stem}.manifest.json", "project", config, args.seed, started, [csv_path, svg_path])
    return 0


def cmd_synth(args) -> int:
    from .synthetic import UCI_COUNTS, write_synthetic_uci

    counts = UCI_COUNTS if args.scale == 1.0 else tuple(max(1, int(c * args.scale)) for c in UCI_COUNTS)
    write_synthetic_uci(args.out, counts, seed=args.seed)
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedforget", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load raw UCI HAR files and write the 70/15/15 split")
    p.add_argument("--uci-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-base", help="train the base model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50, help="maximum epochs (0 writes the initialisation)")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.5)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("--scenario", required=True, help="scenario JSON path, or 'baseline' / 'federated'")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="initial model (overrides the scenario's 'checkpoint')")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the scenario root seed")
    p.add_argument("--parallel", action="store_true", help="train the two clients on worker threads")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("project", help="PCA / t-SNE of model features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("pca", "tsne"), default="pca")
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--layer", choices=("penultimate", "logits"), default="penultimate")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("synth", help="write a synthetic dataset in the UCI layout")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0, help="fraction of the UCI class counts")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fedforget {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
