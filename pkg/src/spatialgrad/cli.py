"""Command-line entry point: train, verify-equivalence, inspect-scaling,
grid-search, magnitude.

Every command is deterministic given its config and seed, and writes plain
CSV / JSON-lines artifacts meant for offline plotting. Exit codes: 0 success,
1 config error, 2 runtime or numeric failure, 3 equivalence check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .expconfig import ConfigError, build_datasets, load_config, resolved_ini
from .network import DenseSpec, build_network, kernel_magnitude_matrix
from .optim import OptimizerConfig
from .reparam import equivalence_run, standard_mask_sets
from .training import (
    TrainingDivergedError,
    inspect_scalings,
    metrics_to_csv,
    save_weights,
    scaling_history_to_jsonl,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_EQUIVALENCE_FAIL = 3

EQUIVALENCE_TOLERANCE = 1e-8


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> tuple:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.raw["train"]["seed"] = str(args.seed)
    if args.precision is not None:
        cfg.train.precision = args.precision
        cfg.raw["train"]["precision"] = str(args.precision)
    train_ds, eval_ds = build_datasets(cfg.data)
    return cfg, train_ds, eval_ds


def _echo_config(cfg, out: Path) -> None:
    (out / "resolved.ini").write_text(resolved_ini(cfg))


def cmd_train(args) -> int:
    cfg, train_ds, eval_ds = _load(args)
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    result = train(cfg.model, train_ds, eval_ds, cfg.train)
    metrics_to_csv(result.metrics, out / "metrics.csv")
    scaling_history_to_jsonl(result.scaling_history, out / "scalings.jsonl")
    save_weights(result.final_weights(), out / "weights.npz")
    last = result.metrics[-1]
    print(f"trained {cfg.train.epochs} epochs: "
          f"train_loss={last.train_loss:.4f} eval_acc={last.eval_acc:.4f}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'scalings.jsonl'}, {out / 'weights.npz'}")
    return EXIT_OK


def cmd_verify_equivalence(args) -> int:
    kernel = (args.kernel, args.kernel) if isinstance(args.kernel, int) else args.kernel
    masks = standard_mask_sets(kernel, args.mask_family, count=args.mask_count, seed=args.seed)
    optimizer = OptimizerConfig(
        kind=args.optimizer,
        momentum=args.momentum if args.optimizer == "sgd_momentum" else 0.0,
        weight_decay=args.weight_decay,
    )
    report = equivalence_run(masks, optimizer, steps=args.steps, seed=args.seed,
                             kernel=kernel, lr=args.lr)
    out = _out_dir(args.out)
    report.to_csv(out / "divergence.csv")
    print(f"wrote {out / 'divergence.csv'}")
    if report.diverged_numerically:
        print(f"NO VERDICT: both trainees overflowed at step {report.steps[-1]}; "
              f"lower --lr (heavy mask families multiply the effective rate by "
              f"their coverage)", file=sys.stderr)
        return EXIT_RUNTIME
    if not report.linear_guarantee:
        print(f"WARNING: optimizer '{report.optimizer_kind}' is outside the linear family; "
              "no equivalence guarantee (report is informational)")
        print(f"max divergence over {args.steps} steps: {report.max_divergence:.3e}")
        return EXIT_OK
    if report.max_divergence <= EQUIVALENCE_TOLERANCE:
        print(f"PASS: max divergence {report.max_divergence:.3e} "
              f"<= {EQUIVALENCE_TOLERANCE:.0e} over {args.steps} steps")
        return EXIT_OK
    print(f"FAIL: max divergence {report.max_divergence:.3e} "
          f"> {EQUIVALENCE_TOLERANCE:.0e}")
    return EXIT_EQUIVALENCE_FAIL


def cmd_inspect_scaling(args) -> int:
    cfg, train_ds, _ = _load(args)
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    dtype = cfg.train.dtype
    seeds = np.random.SeedSequence(cfg.train.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    refresh_rng = np.random.default_rng(seeds[2])
    ds = train_ds.astype(dtype)
    # Inspection never touches labels; size the head by the model itself so
    # unlabeled synthetic datasets work.
    dense_widths = [s.out_features for s in cfg.model if isinstance(s, DenseSpec)]
    class_count = dense_widths[-1] if dense_widths else ds.class_count
    net = build_network(cfg.model, ds.images.shape[1:], class_count, init_rng, dtype)
    results = inspect_scalings(net, ds, cfg.train.sgs, refresh_rng, cfg.train.batch_size)
    records = []
    for idx in sorted(results):
        dep, scal = results[idx]
        if dep is not None:
            records.append(dep.to_record(layer=f"conv{idx}", epoch=0))
        records.append({"kind": "scaling", **scal.to_record(layer=f"conv{idx}", epoch=0)})
    path = out / "scalings.json"
    path.write_text(json.dumps(records, indent=2))
    print(f"wrote {path} ({len(records)} records)")
    return EXIT_OK


def _grid_cell(config_path: str, seed: int | None, precision: int | None,
               cell: dict, validation_fraction: float) -> dict:
    """Train one grid cell on a train/validation split; runs in a worker process."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.train.seed = seed
    if precision is not None:
        cfg.train.precision = precision
    cfg.train.sgs.enabled = True
    for key, value in cell.items():
        setattr(cfg.train.sgs, key, value)
    if "alpha" in cell:
        cfg.train.sgs.measure = "alpha_beta"
    full_train, _ = build_datasets(cfg.data)
    n = len(full_train)
    n_val = max(1, int(round(validation_fraction * n)))
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 917]))
    order = split_rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    sub_train = LabeledDataset(full_train.images[train_idx], full_train.labels[train_idx],
                               full_train.class_count)
    sub_val = LabeledDataset(full_train.images[val_idx], full_train.labels[val_idx],
                             full_train.class_count)
    result = train(cfg.model, sub_train, sub_val, cfg.train)
    last = result.metrics[-1]
    return {**cell, "val_acc": last.eval_acc, "final_train_loss": last.train_loss}


def cmd_grid_search(args) -> int:
    cfg, _, _ = _load(args)  # fail fast on config errors before spawning workers
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    if args.ks:
        cells = [{"k": float(k)} for k in args.ks.split(",")]
        columns = ["k"]
    elif args.alphas and args.betas:
        alphas = [float(a) for a in args.alphas.split(",")]
        betas = [float(b) for b in args.betas.split(",")]
        cells = [{"alpha": a, "beta": b} for a in alphas for b in betas]
        columns = ["alpha", "beta"]
    else:
        raise ConfigError("grid-search needs either --ks or both --alphas and --betas")

    work = [(str(args.config), args.seed, args.precision, cell, args.validation_fraction)
            for cell in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_grid_cell, *zip(*work)))
    else:
        rows = [_grid_cell(*w) for w in work]

    path = out / "grid.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns + ["val_acc", "final_train_loss"])
        for row in rows:
            writer.writerow([row[c] for c in columns]
                            + [repr(row["val_acc"]), repr(row["final_train_loss"])])
    best = max(rows, key=lambda r: r["val_acc"])
    print(f"wrote {path}; best cell: "
          + ", ".join(f"{c}={best[c]}" for c in columns)
          + f" (val_acc={best['val_acc']:.4f})")
    return EXIT_OK


def cmd_magnitude(args) -> int:
    path = Path(args.weights)
    if not path.exists():
        raise ConfigError(f"no such weights file: {path}")
    with np.load(path) as archive:
        records = []
        for name in archive.files:
            arr = archive[name]
            if arr.ndim == 4:
                matrix = kernel_magnitude_matrix(arr)
                records.append({
                    "layer": name,
                    "kernel": list(matrix.shape),
                    "values": [float(v) for v in matrix.ravel()],
                })
    out = _out_dir(args.out)
    target = out / "magnitude.json"
    target.write_text(json.dumps(records, indent=2))
    print(f"wrote {target} ({len(records)} conv layers)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialgrad",
        description="Spatially scaled convolutional training and its reparameterization oracle",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None,
                       help="override the config precision")

    p_train = sub.add_parser("train", help="train a model per the config")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_ver = sub.add_parser("verify-equivalence",
                           help="lockstep branched-vs-scaled training check")
    p_ver.add_argument("--kernel", type=int, default=3, help="square kernel size")
    p_ver.add_argument("--mask-family", default="acb",
                       choices=("acb", "full_plus_center", "all_rectangles", "random"))
    p_ver.add_argument("--mask-count", type=int, default=3,
                       help="random-family mask count")
    p_ver.add_argument("--optimizer", default="sgd_momentum",
                       choices=("sgd", "sgd_momentum", "adam", "adagrad"))
    p_ver.add_argument("--momentum", type=float, default=0.9)
    p_ver.add_argument("--weight-decay", type=float, default=1e-4)
    p_ver.add_argument("--lr", type=float, default=0.05)
    p_ver.add_argument("--steps", type=int, default=100)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--out", required=True)
    p_ver.set_defaults(func=cmd_verify_equivalence)

    p_insp = sub.add_parser("inspect-scaling",
                            help="export dependence and scaling matrices without training")
    add_common(p_insp)
    p_insp.set_defaults(func=cmd_inspect_scaling)

    p_grid = sub.add_parser("grid-search", help="grid search over k or alpha/beta scalings")
    add_common(p_grid)
    p_grid.add_argument("--ks", default=None, help="comma list of k values")
    p_grid.add_argument("--alphas", default=None, help="comma list of alpha values")
    p_grid.add_argument("--betas", default=None, help="comma list of beta values")
    p_grid.add_argument("--validation-fraction", type=float, default=0.2)
    p_grid.add_argument("--jobs", type=int, default=1)
    p_grid.set_defaults(func=cmd_grid_search)

    p_mag = sub.add_parser("magnitude", help="kernel magnitude matrices of saved weights")
    p_mag.add_argument("--weights", required=True, help="weights.npz from train")
    p_mag.add_argument("--out", required=True)
    p_mag.set_defaults(func=cmd_magnitude)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
