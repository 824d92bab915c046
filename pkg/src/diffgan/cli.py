"""Command line entry point: ``diffgan prepare|train|sample|eval|compare|keys``.

Exit codes: 0 success, 1 degraded result (FAILED comparison rows),
2 usage, config or load error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from diffgan import data, metrics, plotting, trainer
from diffgan import tensor as T
from diffgan.config import Config, describe_keys, load_config
from diffgan.errors import ArgumentError, CheckpointError, ConfigError, DatasetError, DiffGanError

log = logging.getLogger("diffgan")

EXIT_OK, EXIT_DEGRADED, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

FEATURE_CAVEAT = ("note: FID/KID use a fixed-seed random-feature extractor, not Inception; "
                  "values are comparable only within this tool")

VARIANTS = {
    "base": {"loss__kind": "ns", "diffusion__enabled": False},
    "base+Wloss": {"loss__kind": "wasserstein", "diffusion__enabled": False},
    "base+Diffusion": {"loss__kind": "ns", "diffusion__enabled": True},
    "base+Wloss+Diffusion": {"loss__kind": "wasserstein", "diffusion__enabled": True},
}
# lower is better for the first two, higher for the rest
METRIC_SENSE = {"fid": -1, "kid": -1, "precision": 1, "recall": 1}


class UsageError(DiffGanError):
    pass


# ---------------------------------------------------------------- prepare

def _print_hist(title: str, hist: dict[str, int]) -> None:
    print(f"{title}: {sum(hist.values())} images")
    width = max((len(k) for k in hist), default=0)
    for k, v in hist.items():
        print(f"  {k.ljust(width)}  {v}")


def cmd_prepare(args) -> int:
    rng = T.Rng(args.seed, T.stream_id("prepare"))
    if args.toy:
        if args.source:
            raise UsageError("give either --toy or a source directory, not both")
        if args.toy == "motif":
            ds = data.synth_motif(args.n, args.res, rng, channels=args.channels)
        else:
            ds = data.synth_gaussian_grid(args.n, args.grid_side, args.spacing, args.std, rng)
        _print_hist("generated", ds.histogram())
    else:
        if not args.source:
            raise UsageError("prepare needs --toy NAME or a source directory")
        ds = data.load_image_folder(args.source, args.res, args.channels)
        _print_hist("before", ds.histogram())
        if ds.meta.get("skipped"):
            print(f"skipped {ds.meta['skipped']} unreadable files")
        if args.per_class_target:
            ds = data.balance_classes(ds, args.per_class_target, data.AugmentConfig(), rng,
                                      truncate=args.truncate)
            _print_hist("after", ds.histogram())
    manifest = data.save_dataset(ds, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _sample_artifacts(state: trainer.TrainState, ds: data.ImageDataset, out_png: Path,
                      seed: int, grid: int = 8) -> None:
    if ds.kind == "points":
        pts = trainer.generate(state.G_ema, 2000, seed)
        centers = np.asarray(ds.meta["centers"]) if "centers" in ds.meta else None
        plotting.plot_points(pts, out_png, centers)
    else:
        plotting.save_grid_png(trainer.generate(state.G_ema, grid * grid, seed), grid, out_png)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = data.load_dataset(args.data)
    out = Path(args.out)

    def snap(state, tag):
        _sample_artifacts(state, ds, out / f"samples-{tag}.png", cfg.train.seed)

    try:
        state = trainer.train(cfg, ds, out, resume=args.resume, on_snapshot=snap)
    except trainer.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"last good snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_ABORT
    plotting.plot_training_log(out / "log.csv", out / "training.png")
    print(f"trained {state.iter} iterations; artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- sample / eval

def cmd_sample(args) -> int:
    if args.n > args.grid * args.grid:
        raise ArgumentError(f"--n {args.n} does not fit a {args.grid}x{args.grid} grid")
    if args.n < 1:
        raise ArgumentError("--n must be positive")
    state = trainer.load_checkpoint(args.checkpoint)
    samples = trainer.generate(state.G_ema, args.n, args.seed)
    if state.resolution == 1:
        plotting.plot_points(samples, args.out)
    else:
        plotting.save_grid_png(samples, args.grid, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.n_samples is not None and args.n_samples < 2:
        raise ArgumentError("--n-samples must be at least 2")
    ds = data.load_dataset(args.data)
    if args.real_split:
        # self-comparison of the two halves of the dataset
        cfg = Config()
        if args.k is not None:
            cfg = cfg.with_overrides(eval__k=args.k)
        half = len(ds) // 2
        if half < 2:
            raise ArgumentError("dataset too small to split")
        doc = metrics.evaluate(ds.images[:half], ds.images[half:2 * half],
                               trainer.make_extractor(cfg, ds), cfg.eval.k, cfg.eval.kid_block)
        doc["seed"] = int(args.seed)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --real-split)")
        state = trainer.load_checkpoint(args.checkpoint)
        cfg = state.cfg if args.k is None else state.cfg.with_overrides(eval__k=args.k)
        trainer.check_dataset(cfg, ds)
        doc = trainer.evaluate_generator(state.G_ema, ds, cfg, args.seed, args.n_samples)
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- compare

def _aggregate(runs: list[dict]) -> list[dict]:
    table = []
    for name in VARIANTS:
        rows = [r for r in runs if r["variant"] == name]
        ok = [r for r in rows if r["status"] == "ok"]
        entry = {"variant": name, "status": "ok" if len(ok) == len(rows) else "FAILED",
                 "n_seeds": len(ok)}
        for m in METRIC_SENSE:
            vals = np.array([r[m] for r in ok], dtype=float)
            if len(vals):
                entry[f"{m}_median"] = float(np.median(vals))
                entry[f"{m}_min"] = float(vals.min())
                entry[f"{m}_max"] = float(vals.max())
        table.append(entry)
    return table


def _ranks(table: list[dict]) -> dict[tuple[str, str], str]:
    marks = {}
    for m, sense in METRIC_SENSE.items():
        vals = [(sense * -e[f"{m}_median"], e["variant"]) for e in table if f"{m}_median" in e]
        order = sorted(vals)
        if order:
            marks[(order[0][1], m)] = "*"
        if len(order) > 1 and order[1][0] != order[0][0]:
            marks[(order[1][1], m)] = "_"
    return marks


def _fmt_cell(e: dict, m: str, mark: str) -> str:
    if f"{m}_median" not in e:
        return "-"
    cell = f"{e[f'{m}_median']:.4g} ({e[f'{m}_min']:.4g}/{e[f'{m}_max']:.4g})"
    return f"{mark}{cell}{mark}" if mark else cell


def format_table(table: list[dict]) -> str:
    """Aligned text table; ``*`` marks the best median, ``_`` the second best."""
    marks = _ranks(table)
    header = ["variant", "FID", "KID", "Prec", "Rec", "status"]
    body = [[e["variant"]] + [_fmt_cell(e, m, marks.get((e["variant"], m), ""))
                              for m in METRIC_SENSE] + [e["status"]] for e in table]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("cells: median across seeds (min/max); * best, _ second best")
    lines.append(FEATURE_CAVEAT)
    return "\n".join(lines)


def cmd_compare(args) -> int:
    base = load_config(args.config)
    ds = data.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for name, flags in VARIANTS.items():
        for seed in args.seeds:
            cfg = base.with_overrides(train__seed=seed, **flags)
            run_dir = out / name.replace("+", "_") / f"seed{seed}"
            row = {"variant": name, "seed": seed}
            try:
                state = trainer.train(cfg, ds, run_dir)
                doc = trainer.evaluate_generator(state.G_ema, ds, cfg, seed)
                row.update({"status": "ok", **{m: doc[m] for m in METRIC_SENSE}})
                for extra in ("modes", "hq_fraction"):
                    if extra in doc:
                        row[extra] = doc[extra]
            except trainer.TrainingAborted as exc:
                log.warning("%s seed %d aborted: %s", name, seed, exc)
                row["status"] = "FAILED"
            runs.append(row)
            print(f"{name} seed {seed}: {row['status']}"
                  + "".join(f" {m}={row[m]:.4g}" for m in METRIC_SENSE if m in row), flush=True)
    extra_cols = [c for c in ("modes", "hq_fraction") if any(c in r for r in runs)]
    cols = ["variant", "seed", "status"] + list(METRIC_SENSE) + extra_cols
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(runs)
    table = _aggregate(runs)
    tcols = ["variant", "status", "n_seeds"] + [f"{m}_{s}" for m in METRIC_SENSE
                                               for s in ("median", "min", "max")]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, tcols, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    text = format_table(table)
    (out / "table.txt").write_text(text + "\n")
    plotting.plot_comparison(table, out / "compare.png", FEATURE_CAVEAT)
    print(text)
    return EXIT_DEGRADED if any(e["status"] != "ok" for e in table) else EXIT_OK


def cmd_keys(args) -> int:
    print(describe_keys())
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="build a dataset cache from a folder or a toy generator")
    s.add_argument("source", nargs="?", help="folder with one subfolder per class")
    s.add_argument("--toy", choices=["motif", "gaussian-grid"])
    s.add_argument("--out", required=True, help="cache path (writes .bin and .json)")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--res", type=int, default=28)
    s.add_argument("--channels", type=int, default=None)
    s.add_argument("--per-class-target", type=int, default=0)
    s.add_argument("--truncate", action="store_true", help="cut classes above the target")
    s.add_argument("--grid-side", type=int, default=5)
    s.add_argument("--spacing", type=float, default=2.0)
    s.add_argument("--std", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write a PNG grid from the EMA generator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--grid", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="FID/KID/precision/recall as JSON")
    s.add_argument("--checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--n-samples", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.add_argument("--k", type=int, default=None, help="neighbours for precision/recall")
    s.add_argument("--real-split", action="store_true",
                   help="compare the two halves of the dataset instead of a generator")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="four-variant comparison table")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("keys", help="list config keys with defaults and reference values")
    s.set_defaults(func=cmd_keys)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "channels", 0) is None:
        args.channels = 1 if args.toy == "motif" else 3
    try:
        return args.func(args)
    except trainer.TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, DatasetError, CheckpointError, ArgumentError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
