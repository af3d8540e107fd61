"""Command-line front end: train, eval, ablate, selftest, export-masks."""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, parse_pairs
from .data import generate_dataset
from .errors import ConfigError, ContractError, DivergenceError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("cvseg")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", default=out_default, help="run directory")
        p.add_argument("--seed", type=int, help="shortcut for --set seed=N")

    common(sub.add_parser("train", help="train one model"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(p)
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoints/final.bin")
    p = sub.add_parser("ablate", help="train one run per cell of a config grid")
    common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="grid axis (repeatable; cells are the cartesian product)")
    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--quick", action="store_true", help="smaller instance counts")
    p = sub.add_parser("export-masks", help="write predictions and pseudo-masks as PNG files")
    common(p)
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoints/final.bin")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--limit", type=int, default=0, help="export at most this many images")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = parse_pairs(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    return cfg.with_overrides(overrides).validate()


def _restore(cfg: ExperimentConfig, path):
    from .train import build_model

    net = build_model(cfg)
    checkpoint.restore(net.parameters(), checkpoint.load(path))
    return net


def cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args)
    result = train(cfg)
    row = result.final if result.rows else {}
    print(f"{cfg.out}: mIoU {row.get('miou', float('nan')):.4f}  "
          f"mFDR {row.get('mfdr', float('nan')):.4f}  mFNR {row.get('mfnr', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    cfg = load_config(args)
    path = Path(args.checkpoint or Path(cfg.out) / "checkpoints" / "final.bin")
    net = _restore(cfg, path)
    data = generate_dataset(cfg.dataset)
    miou, mfdr, mfnr = evaluate(net, data.val, cfg)
    print(f"mIoU {miou:.6f}  mFDR {mfdr:.6f}  mFNR {mfnr:.6f}")
    return EXIT_OK


def parse_grid(specs) -> list:
    """``["a=1,2", "b=x"]`` -> list of override dicts, one per cell."""
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(spec, "grid axis must look like key=v1,v2")
        key, values = spec.split("=", 1)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(key.strip(), "grid axis has no values")
        axes.append([(key.strip(), v) for v in vals])
    return [dict(cell) for cell in itertools.product(*axes)]


def cell_name(cell: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in cell.items()) or "base"


def cmd_ablate(args) -> int:
    from .train import train

    base = load_config(args)
    cells = parse_grid(args.grid)
    for cell in cells:
        base.with_overrides(cell).validate()  # fail fast, before any training
    root = Path(base.out)
    summary = []
    for cell in cells:
        cfg = base.with_overrides({**cell, "out": str(root / cell_name(cell))})
        try:
            result = train(cfg)
            row = result.final if result.rows else {}
            status = "ok"
        except DivergenceError as exc:
            log.error("%s: %s", cell_name(cell), exc)
            row, status = {}, "diverged"
        summary.append({"cell": cell_name(cell), "status": status,
                        **{k: row.get(k, "") for k in ("miou", "mfdr", "mfnr")}})
        print(f"{cell_name(cell)}: {status} mIoU {row.get('miou', float('nan')):.4f}")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["cell", "status", "miou", "mfdr", "mfnr"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)
    return EXIT_DIVERGED if any(s["status"] != "ok" for s in summary) else EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAILED


def cmd_export_masks(args) -> int:
    from .mvmc import RefineConfig, calibrate, save_mask
    from .train import view_spec
    from .transforms import make_views

    cfg = load_config(args)
    path = Path(args.checkpoint or Path(cfg.out) / "checkpoints" / "final.bin")
    net = _restore(cfg, path)
    split = getattr(generate_dataset(cfg.dataset), args.split)
    n = len(split) if args.limit <= 0 else min(args.limit, len(split))
    out = Path(cfg.out) / "masks" / args.split
    m = cfg.mvmc
    refine_cfg = RefineConfig(m.refine_iterations, m.kernel_size, m.sigma_color) if m.refine else None
    spec = view_spec(cfg)
    spec = type(spec)(spec.scales, spec.flip, spec.color, crop=split.images.shape[1])
    rng = np.random.default_rng(cfg.seed)
    for i in range(n):
        image = split.images[i:i + 1]
        pred = net.predict(image, cfg.cvlr.tau, cfg.cvlr.iterations)[0]
        views = make_views(image, spec, rng)
        logits = net.forward([v.images for v in views.views], cfg.cvlr.tau, cfg.cvlr.iterations,
                             cfg.cvlr.shared_dictionary).logits
        labels = split.labels[i:i + 1] if split.has_labels[i] else None
        pseudo = calibrate([lg.data for lg in logits], views.geoms, image, m.gamma, refine_cfg, m.tie_band,
                           image_labels=labels)
        save_mask(out / "pred" / f"{i:04d}.png", pred)
        save_mask(out / "pseudo" / f"{i:04d}.png", pseudo.targets()[0])
        save_mask(out / "gt" / f"{i:04d}.png", split.masks[i])
    print(f"wrote {n} prediction/pseudo-mask/ground-truth triples to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
    "export-masks": cmd_export_masks,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
