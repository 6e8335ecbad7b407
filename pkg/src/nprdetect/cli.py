"""``npr`` command line: gen, extract, train, eval, repro.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 non-finite loss.
Every command writes ``resolved_config.json`` next to its outputs; passing that
file back with ``--config`` reruns the command with identical settings.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DEFAULT_CROP, DatasetError, FeatureDataset, load_dataset, split_samples
from .evaluation import evaluate_sources
from .image import read_image, write_png
from .nn import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train, write_history
from .nn.checkpoint import CheckpointError, file_sha256
from .npr import GridSpec, extract_npr, npr_difference, npr_heatmap, save_npr
from .synthgen import (
    CorpusConfig,
    SourceConfig,
    build_corpus,
    image_seed,
    make_decoder,
)

logger = logging.getLogger("nprdetect")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
CONFIG_NAME = "resolved_config.json"
DEFAULT_SEED = 1337


class ConfigError(ValueError):
    """Invalid command-line or config-file settings."""


def default_jobs() -> int:
    raw = os.environ.get("NPR_JOBS", "1")
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigError(f"NPR_JOBS must be an integer, got {raw!r}") from None
    if jobs < 1:
        raise ConfigError("NPR_JOBS must be >= 1")
    return jobs


def parse_sources(text: str, count: int, seed: int):
    """``kind:seed=S[:depth=D][:hidden=H][:name=N],...`` to source configs."""
    sources = []
    for index, item in enumerate(filter(None, (t.strip() for t in text.split(",")))):
        kind, *opts = item.split(":")
        fields = {"seed": None, "depth": "1", "hidden": "8", "name": kind}
        for opt in opts:
            key, sep, value = opt.partition("=")
            if not sep or key not in fields:
                raise ConfigError(f"bad source option {opt!r} in {item!r}")
            fields[key] = value
        if fields["seed"] is None:
            raise ConfigError(f"source {item!r} needs seed=<int>")
        try:
            decoder = make_decoder(int(fields["seed"]), kind, int(fields["depth"]), int(fields["hidden"]))
        except ValueError as exc:
            raise ConfigError(f"source {item!r}: {exc}") from None
        sources.append(SourceConfig(fields["name"], decoder, image_seed(seed, index), count))
    if not sources:
        raise ConfigError("--sources is empty")
    return sources


def grid_from_args(args) -> GridSpec:
    try:
        return GridSpec.parse(args.l, args.pivot)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_config(out_dir: Path, args) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in ("func", "config", "verbose")}
    cfg["version"] = __version__
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return cfg


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# --- gen -----------------------------------------------------------------

def cmd_gen(args) -> int:
    _require(args, "out", "sources")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    sources = parse_sources(args.sources, args.count, args.seed)
    try:
        config = CorpusConfig(Path(args.out), sources, args.size,
                              Path(args.real_dir) if args.real_dir else None, jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    build_corpus(config)
    write_config(Path(args.out), args)
    print(f"wrote {len(sources)} source(s) x {2 * args.count} images to {args.out}")
    return EXIT_OK


# --- extract -------------------------------------------------------------

def cmd_extract(args) -> int:
    _require(args, "input", "out")
    grid = grid_from_args(args)
    out = Path(args.out)
    image = read_image(args.input)
    npr = extract_npr(image, grid)
    other = extract_npr(read_image(args.diff), grid) if args.diff else None
    if other is not None and other.shape != npr.shape:
        raise ConfigError(f"--diff image gives NPR shape {other.shape}, expected {npr.shape}")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    written = []
    if not args.no_npr:
        save_npr(out / f"{stem}.npr", npr)
        written.append(out / f"{stem}.npr")
    if args.heatmap:
        for c in range(npr.channels):
            write_png(out / f"{stem}_c{c}.png", npr_heatmap(npr, c))
            written.append(out / f"{stem}_c{c}.png")
    if other is not None:
        diff = npr_difference(npr, other)
        for c in range(diff.channels):
            write_png(out / f"{stem}_diff_c{c}.png", npr_heatmap(diff, c))
            written.append(out / f"{stem}_diff_c{c}.png")
    write_config(out, args)
    for p in written:
        print(p)
    return EXIT_OK


# --- train ---------------------------------------------------------------

def _train_meta(args, grid: GridSpec) -> dict:
    return {"seed": args.seed, "grid": grid.describe(), "l": grid.l, "pivot": args.pivot,
            "crop": args.crop, "representation": args.representation,
            "lr": repr(args.lr), "batch": args.batch_size}


def cmd_train(args) -> int:
    _require(args, "corpus", "out")
    grid = grid_from_args(args)
    try:
        config = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, lr=args.lr,
                             checkpoint_every=args.checkpoint_every, val_fraction=args.val_fraction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"lr={args.lr!r} batch={args.batch_size}")
    samples = load_dataset(args.corpus)
    if args.source:
        samples = [s for s in samples if s.source_name == args.source]
        if not samples:
            raise ConfigError(f"corpus has no source named {args.source!r}")
    for label, cls in ((0, "0_real"), (1, "1_fake")):
        if not any(s.label == label for s in samples):
            raise ConfigError(f"corpus has no samples of class {cls}")
    split = split_samples(samples, args.val_fraction, args.seed)
    train_set = FeatureDataset(split.train, grid, crop=args.crop, representation=args.representation, jobs=args.jobs)
    val_set = FeatureDataset(split.val, grid, crop=args.crop, representation=args.representation, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split.write_manifest(out / "split.json")
    write_config(out, args)
    meta = _train_meta(args, grid)
    try:
        model, history = train(config, train_set, val_set,
                               checkpoint_dir=out if args.checkpoint_every else None, meta=meta)
    except TrainingDiverged as exc:
        save_checkpoint(out / "last_good.nprm", exc.last_good, meta)
        write_history(out / "history.csv", exc.history)
        print(f"error: {exc}; last good checkpoint kept at {out / 'last_good.nprm'}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(out / "model.nprm", model, meta)
    write_history(out / "history.csv", history)
    best = max(history, key=lambda r: (r["val_acc"], r["val_ap"]))
    print(f"best epoch {best['epoch']}: val_acc={best['val_acc']:.2f} val_ap={best['val_ap']:.2f}")
    print(out / "model.nprm")
    return EXIT_OK


# --- eval ----------------------------------------------------------------

def cmd_eval(args) -> int:
    _require(args, "checkpoint", "corpus", "out")
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise ConfigError(f"{args.checkpoint}: {exc}") from None
    l = args.l if args.l is not None else int(meta.get("l", 2))
    pivot = args.pivot if args.pivot is not None else meta.get("pivot", "index:1")
    crop = args.crop if args.crop is not None else int(meta.get("crop", DEFAULT_CROP))
    representation = meta.get("representation", "npr")
    try:
        grid = GridSpec.parse(l, pivot)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = evaluate_sources(model, args.corpus, grid, crop=crop, representation=representation,
                              jobs=args.jobs, meta={"checkpoint_sha256": file_sha256(args.checkpoint),
                                                    "checkpoint_meta": meta})
    out = Path(args.out)
    report.write(out)
    write_config(out, args)
    print(report.to_text(), end="")
    return EXIT_OK


# --- repro ---------------------------------------------------------------

REPRO_THRESHOLDS = {"in_source_val_acc": 95.0, "unseen_acc": 75.0, "unseen_ap": 80.0, "baseline_gap": 10.0}


def _sub(argv) -> int:
    code = main(argv)
    if code != EXIT_OK:
        raise SystemExit(code)
    return code


def repro_paths(root: Path) -> dict:
    return {
        "train_corpus": root / "corpus-train",
        "test_corpus": root / "corpus-test",
        "npr": root / "train-npr",
        "pixels": root / "train-pixels",
        "eval_npr": root / "eval-npr",
        "eval_pixels": root / "eval-pixels",
    }


def acceptance_rows(val_acc, unseen, baseline_unseen, thresholds=REPRO_THRESHOLDS):
    gap = unseen["acc"] - baseline_unseen["acc"]
    return [
        ("in-source validation accuracy", val_acc, thresholds["in_source_val_acc"]),
        ("unseen bilinear accuracy", unseen["acc"], thresholds["unseen_acc"]),
        ("unseen bilinear AP", unseen["ap"], thresholds["unseen_ap"]),
        ("pixel-baseline accuracy gap on bilinear", gap, thresholds["baseline_gap"]),
    ]


def cmd_repro(args) -> int:
    root = Path(args.out) if args.out else Path(f"repro-seed{args.seed}")
    paths = repro_paths(root)
    rng = np.random.default_rng(args.seed)
    near_seed, bil_seed, train_seed, test_seed = (int(v) for v in rng.integers(0, 2**31 - 1, 4))
    common = ["--size", str(args.size), "--jobs", str(args.jobs)]
    write_config(root, args)
    _sub(["gen", "--out", str(paths["train_corpus"]), "--seed", str(train_seed), "--count", str(args.train_count),
          "--sources", f"nearest:seed={near_seed}"] + common)
    _sub(["gen", "--out", str(paths["test_corpus"]), "--seed", str(test_seed), "--count", str(args.test_count),
          "--sources", f"nearest:seed={near_seed},bilinear:seed={bil_seed}"] + common)
    for rep in ("npr", "pixels"):
        _sub(["train", "--corpus", str(paths["train_corpus"]), "--out", str(paths[rep]), "--seed", str(args.seed),
              "--epochs", str(args.epochs), "--crop", str(args.size), "--representation", rep,
              "--jobs", str(args.jobs)])
        _sub(["eval", "--checkpoint", str(paths[rep] / "model.nprm"), "--corpus", str(paths["test_corpus"]),
              "--out", str(paths["eval_" + rep]), "--jobs", str(args.jobs)])
    result = summarize_repro(root)
    (root / "acceptance.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (root / "acceptance.txt").write_text(result["table"])
    print(result["table"], end="")
    return EXIT_OK


def _best_val_acc(history_csv: Path) -> float:
    rows = history_csv.read_text().splitlines()[1:]
    return max(float(r.split(",")[2]) for r in rows)


def summarize_repro(root) -> dict:
    """Collect the cross-source numbers of a finished repro directory."""
    paths = repro_paths(Path(root))
    npr = json.loads((paths["eval_npr"] / "report.json").read_text())
    pix = json.loads((paths["eval_pixels"] / "report.json").read_text())
    by_src = {r["source"]: r for r in npr["rows"]}
    pix_src = {r["source"]: r for r in pix["rows"]}
    val_acc = _best_val_acc(paths["npr"] / "history.csv")
    rows = acceptance_rows(val_acc, by_src["bilinear"], pix_src["bilinear"])
    lines = []
    for name, value, floor in rows:
        status = "PASS" if value >= floor else "FAIL"
        lines.append(f"{status}  {name:42s} {value:7.2f}  (>= {floor:.2f})")
    return {
        "in_source_val_acc": val_acc,
        "npr": {k: {"acc": v["acc"], "ap": v["ap"]} for k, v in by_src.items()},
        "pixels": {k: {"acc": v["acc"], "ap": v["ap"]} for k, v in pix_src.items()},
        "checks": [{"name": n, "value": v, "threshold": t, "pass": v >= t} for n, v, t in rows],
        "checkpoint_sha256": {"npr": file_sha256(paths["npr"] / "model.nprm"),
                              "pixels": file_sha256(paths["pixels"] / "model.nprm")},
        "table": "\n".join(lines) + "\n",
    }


# --- parser --------------------------------------------------------------

def _grid_flags(p, defaults=True):
    p.add_argument("--l", type=int, default=2 if defaults else None, help="grid side (2 or 3)")
    p.add_argument("--pivot", default="index:1" if defaults else None, help="index:J, avg or max")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npr", description="Neighboring-pixel-relationship detector toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="resolved_config.json from an earlier run")
        p.add_argument("--jobs", type=int, default=None, help="worker threads (default: $NPR_JOBS or 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("gen", cmd_gen, "generate a toy real/fake corpus")
    p.add_argument("--out", help="corpus root directory")
    p.add_argument("--sources", help="e.g. nearest:seed=1,bilinear:seed=2[:depth=2:hidden=8]")
    p.add_argument("--count", type=int, default=100, help="images per class per source")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--real-dir", help="use images from this directory as reals")

    p = add("extract", cmd_extract, "write NPR maps and heatmaps for one image")
    p.add_argument("--input")
    p.add_argument("--out", help="output directory")
    _grid_flags(p)
    p.add_argument("--heatmap", action="store_true", help="write per-channel heatmap PNGs")
    p.add_argument("--diff", help="second image; writes differential NPR heatmaps")
    p.add_argument("--no-npr", action="store_true", help="skip the binary NPR file")

    p = add("train", cmd_train, "train a detector on a corpus")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--source", help="train on this source only")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--crop", type=int, default=DEFAULT_CROP)
    p.add_argument("--representation", choices=("npr", "pixels"), default="npr")
    _grid_flags(p)

    p = add("eval", cmd_eval, "evaluate a checkpoint on every source of a corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--crop", type=int, default=None, help="default: value stored in the checkpoint")
    _grid_flags(p, defaults=False)

    p = add("repro", cmd_repro, "run the desk-scale cross-generator experiment")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", help="default: ./repro-seed<SEED>")
    p.add_argument("--epochs", type=int, default=40, help="training epochs for both models")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train-count", type=int, default=250, help="reals (and fakes) in the training source")
    p.add_argument("--test-count", type=int, default=100, help="reals (and fakes) per test source")
    return parser


def _apply_config_file(parser, argv, args):
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read --config {args.config}: {exc}") from None
    if cfg.get("command") != args.command:
        raise ConfigError(f"{args.config} is a {cfg.get('command')!r} config, not {args.command!r}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    sub.set_defaults(**{k: v for k, v in cfg.items() if k in known and k != "config"})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config_file(parser, argv, args)
        if args.jobs is None:
            args.jobs = default_jobs()
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError) and str(exc).startswith("missing required"):
            sub = parser._subparsers._group_actions[0].choices[args.command]
            sub.print_usage(sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
