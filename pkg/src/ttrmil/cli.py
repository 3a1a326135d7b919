"""Command-line entry point.

One subcommand per pipeline stage so masks can be reused across the m grid:

    synth       write a synthetic cohort to disk
    train-fast  low-res classifier, 5-fold CV with a fixed test set
    make-masks  attention masks from trained fast weights at one m
    train-slow  Cox head per fold on masked high-res bags
    nested-cv   (top_k, m) grid under nested 5x5 CV
    predict     fold-ensembled TTR predictions
    gradcheck   finite-difference audit of the differentiable core

All randomness flows from --seed (or the config's seed).  Logs go to stderr
as JSON lines; data goes to files only.  Every command writes a
run_config.json sidecar carrying the config hash.  Failures exit 1 with a
single JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig, config_hash, load_config
from .data import (
    GridGeometry,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
)
from .diffcore import GradTape, Tensor2, grad_check
from .errors import ConfigError, DegenerateMaskError, TtrmilError
from .harness import make_fold_plan, run_grid, save_report_csv, save_runs_jsonl
from .models import (
    fast_forward,
    fast_loss,
    init_fast_params,
    init_slow_params,
    load_fast_params,
    load_slow_params,
    save_params,
    slow_forward,
)
from .pipeline import (
    _cox_loss_node,
    apply_mask,
    ensemble_predict,
    load_mask_csv,
    make_mask,
    save_mask_csv,
    save_predictions_csv,
    train_fast,
    train_slow,
)
from .survival import SurvivalRecord

logger = logging.getLogger("ttrmil")


class _JsonLineFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(),
                           "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _log(event: str, **fields) -> None:
    logger.info(json.dumps({"event": event, **fields}, sort_keys=True))


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _build_cfg(args, **extra) -> RunConfig:
    """Config file (if any) -> CLI flag overrides -> validated RunConfig."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: v for k, v in extra.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _write_sidecar(out_dir: Path, payload_key: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    sidecar = {"sha256": hashlib.sha256(canonical.encode()).hexdigest(),
               payload_key: payload}
    (out_dir / "run_config.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def _cfg_sidecar(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {"sha256": config_hash(cfg), "config": cfg.to_dict()}
    (out_dir / "run_config.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def _geometry_for(manifest_path: Path) -> GridGeometry:
    geom_path = manifest_path.parent / "geometry.json"
    if not geom_path.exists():
        raise ConfigError(f"geometry.json not found next to manifest: {geom_path}")
    return GridGeometry.from_json_file(geom_path)


def _masked_bags(dataset, masks, geometry):
    """Apply masks to every high-res bag; degenerate cases are dropped with a log."""
    out = {}
    for row in dataset.rows:
        if row.case_id not in masks:
            raise ConfigError(f"no mask for case {row.case_id!r}")
        bag = dataset.load_bag(row, "high")
        try:
            out[row.case_id] = apply_mask(bag, masks[row.case_id], geometry)
        except DegenerateMaskError as exc:
            _log("degenerate_mask", case_id=exc.case_id)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_cases=args.cases,
        d=args.dim,
        patches_per_bag=(args.patches[0], args.patches[1]),
        hot_fraction=args.hot_fraction,
        hot_direction_seed=args.hot_direction_seed,
        baseline_hazard=args.baseline_hazard,
        censoring_rate=args.censoring_rate,
        seed=args.seed if args.seed is not None else 0,
        severity_range=(args.severity[0], args.severity[1]),
        noise_scale=args.noise,
        test_fraction=args.test_fraction,
    )
    out = Path(args.out)
    manifest = generate_synthetic(spec, out)
    _write_sidecar(out, "spec", dataclasses.asdict(spec))
    _log("synth_done", manifest=str(manifest), cases=spec.n_cases)
    return 0


def cmd_train_fast(args) -> int:
    cfg = _build_cfg(args, T=args.t, fast_epochs=args.epochs, lr=args.lr)
    dataset = load_dataset(args.manifest)
    bags = dataset.load_all("low")
    records = dataset.records()
    test_ids = [r.case_id for r in dataset.rows if r.split == "test"]
    rest = [r.case_id for r in dataset.rows if r.split != "test"]
    if test_ids:
        # manifest supplies the fixed test set; 5 validation folds of the rest
        plan = make_fold_plan(rest, cfg.seed, "nested_5x5")
        folds = [([c for c in rest if c not in set(fold)], list(fold))
                 for fold in plan.outer_folds]
    else:
        plan = make_fold_plan(rest, cfg.seed, "fixed_test_5fold")
        test_ids = list(plan.fixed_test)
        folds = plan.fast_folds()
    result = train_fast(bags, records, cfg, folds, test_ids)
    out = Path(args.out)
    save_params(out / "fast", result.params)
    metrics = {
        "best_fold": result.best_fold,
        "fold_val_auc": [None if math.isnan(a) else a for a in result.fold_val_auc],
        "test_auc": result.test_auc,
        "n_excluded": len(records) - len(result.retained),
        "history": result.history,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    _cfg_sidecar(out, cfg)
    _log("train_fast_done", best_fold=result.best_fold, test_auc=result.test_auc)
    return 0


def cmd_make_masks(args) -> int:
    cfg = _build_cfg(args, m_percent=args.m)
    dataset = load_dataset(args.manifest)
    params = load_fast_params(Path(args.fast_weights))
    masks = []
    for row in dataset.rows:
        bag = dataset.load_bag(row, "low")
        att = fast_forward(bag, params).attention.data[:, 0]
        masks.append(make_mask(att, bag.coords, cfg.m_percent, case_id=row.case_id))
    out = Path(args.out)
    mask_path = out / f"masks_m{cfg.m_percent:g}.csv"
    save_mask_csv(mask_path, masks)
    _cfg_sidecar(out, cfg)
    _log("make_masks_done", path=str(mask_path), cases=len(masks))
    return 0


def cmd_train_slow(args) -> int:
    cfg = _build_cfg(args, top_k=args.top_k, slow_epochs=args.epochs, lr=args.lr,
                     m_percent=args.m)
    dataset = load_dataset(args.manifest)
    geometry = _geometry_for(Path(args.manifest))
    masks = load_mask_csv(args.masks, m_percent=cfg.m_percent)
    bags = _masked_bags(dataset, masks, geometry)
    records = [r for r in dataset.records() if r.case_id in bags]
    ids = [r.case_id for r in records]
    plan = make_fold_plan(ids, cfg.seed, "plain_10fold")
    out = Path(args.out)
    losses = []
    for f, fold in enumerate(plan.outer_folds):
        val = set(fold)
        train_ids = [c for c in ids if c not in val]
        result = train_slow(bags, records, cfg, train_ids, list(fold), stream=f)
        save_params(out / f"fold_{f}", result.params)
        losses.append({"fold": f, "train_losses": result.train_losses,
                       "val_losses": result.val_losses,
                       "min_epoch": result.min_epoch,
                       "checkpoint_epoch": result.checkpoint_epoch})
        _log("train_slow_fold_done", fold=f, checkpoint=result.checkpoint_epoch)
    (out / "losses.json").write_text(json.dumps(losses, sort_keys=True, indent=2) + "\n")
    _cfg_sidecar(out, cfg)
    _log("train_slow_done", folds=len(plan.outer_folds))
    return 0


def cmd_nested_cv(args) -> int:
    cfg = _build_cfg(args)
    dataset = load_dataset(args.manifest)
    geometry = _geometry_for(Path(args.manifest))
    records = dataset.records()
    ks = [int(v) for v in args.ks.split(",")]
    ms = [float(v) for v in args.ms.split(",")]
    masks_dir = Path(args.masks_dir)
    bags_by_m = {}
    for m in ms:
        mask_path = masks_dir / f"masks_m{m:g}.csv"
        if not mask_path.exists():
            raise ConfigError(f"mask file not found: {mask_path}")
        masks = load_mask_csv(mask_path, m_percent=m)
        bags_by_m[m] = _masked_bags(dataset, masks, geometry)
    plan = make_fold_plan([r.case_id for r in records], cfg.seed, "nested_5x5")
    grid = run_grid(bags_by_m, records, ks, ms, cfg, plan=plan, workers=args.workers)
    out = Path(args.out)
    save_report_csv(out / "grid.csv", grid)
    save_runs_jsonl(out / "runs.jsonl", grid)
    _cfg_sidecar(out, cfg)
    try:
        best = grid.best_cell()
        _log("nested_cv_done", best_top_k=best.top_k, best_m=best.m_percent,
             best_mean_ci=best.mean, best_std=best.std)
    except ValueError:
        _log("nested_cv_done", best_top_k=None, best_m=None)
    return 0


def cmd_predict(args) -> int:
    cfg = _build_cfg(args, top_k=args.top_k)
    dataset = load_dataset(args.manifest)
    geometry = _geometry_for(Path(args.manifest))
    masks = load_mask_csv(args.masks)
    weights_dir = Path(args.weights_dir)
    fold_dirs = sorted(p for p in weights_dir.iterdir()
                       if p.is_dir() and p.name.startswith("fold_"))
    if not fold_dirs:
        raise ConfigError(f"no fold_* weight directories under {weights_dir}")
    fold_params = [load_slow_params(p) for p in fold_dirs]
    rows = dataset.rows
    if args.split != "all":
        rows = [r for r in rows if r.split == args.split]
        if not rows:
            raise ConfigError(f"no cases with split {args.split!r}")
    preds = []
    for row in rows:
        if row.case_id not in masks:
            raise ConfigError(f"no mask for case {row.case_id!r}")
        bag = apply_mask(dataset.load_bag(row, "high"), masks[row.case_id], geometry)
        preds.append(ensemble_predict(bag, fold_params, cfg.top_k))
    out = Path(args.out)
    save_predictions_csv(out / "predictions.csv", preds)
    _cfg_sidecar(out, cfg)
    _log("predict_done", cases=len(preds), folds=len(fold_params))
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    checks = []

    def fast_case(tape):
        rng = np.random.Generator(np.random.PCG64(seed))
        from .models import Bag
        bag = Bag("g", rng.normal(size=(6, 4)), np.zeros((6, 3), dtype=np.int32), 1.0)
        out = fast_forward(bag, fast_case.params, tape=tape)
        return fast_loss(out, 1, fast_case.params, k_inst=2, tape=tape)

    rng = np.random.Generator(np.random.PCG64(seed))
    fast_case.params = init_fast_params(4, 3, rng)

    def slow_case(tape):
        prng = np.random.Generator(np.random.PCG64(seed + 1))
        from .models import Bag
        bags = [Bag(f"g{i}", prng.normal(size=(5, 4)),
                    np.zeros((5, 3), dtype=np.int32), 1.0) for i in range(4)]
        records = [SurvivalRecord(f"g{i}", 1, float(i + 1)) for i in range(4)]
        nodes = [slow_forward(b, slow_case.params, 3, tape=tape).log_risk for b in bags]
        return _cox_loss_node(dc.concat_rows(nodes, tape), records, tape)

    slow_case.params = init_slow_params(4, 3, rng)

    for name, fn, params in (("fast_loss", fast_case, fast_case.params),
                             ("slow_cox", slow_case, slow_case.params)):
        report = grad_check(fn, params.tensors())
        checks.append({"name": name, "passed": report.passed,
                       "max_rel_err": report.max_rel_err,
                       "n_checked": report.n_checked, "n_failed": report.n_failed})
    all_passed = all(c["passed"] for c in checks)
    print(json.dumps({"passed": all_passed, "checks": checks}, sort_keys=True))
    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttrmil",
                                     description="two-stage attention MIL for time to recurrence")
    parser.add_argument("--verbose", action="store_true", help="debug-level logs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--dim", type=int, default=24)
    p.add_argument("--patches", type=int, nargs=2, default=(30, 40),
                   metavar=("LO", "HI"))
    p.add_argument("--hot-fraction", type=float, default=0.1)
    p.add_argument("--hot-direction-seed", type=int, default=7)
    p.add_argument("--baseline-hazard", type=float, default=2e-5)
    p.add_argument("--censoring-rate", type=float, default=0.3)
    p.add_argument("--severity", type=float, nargs=2, default=(1.0, 21.0),
                   metavar=("LO", "HI"))
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-fast", help="train the low-res attention classifier")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=float, default=None, help="recurrence horizon T in years")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_fast)

    p = sub.add_parser("make-masks", help="attention masks at one m percent")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fast-weights", required=True, help="directory from train-fast (…/fast)")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=float, default=None, help="top m percent of cells to keep")
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("train-slow", help="train the Cox head per fold")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True, help="mask CSV from make-masks")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--m", type=float, default=None, help="m used to build the masks")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_slow)

    p = sub.add_parser("nested-cv", help="(top_k, m) grid under nested 5x5 CV")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks-dir", required=True,
                   help="directory holding masks_m{M}.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--ks", default="5,10,15,20,30,40,50",
                   help="comma-separated top_k values")
    p.add_argument("--ms", default="5,10,15,20,25,30,35,40",
                   help="comma-separated m percents")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_nested_cv)

    p = sub.add_parser("predict", help="fold-ensembled TTR predictions")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--weights-dir", required=True,
                   help="directory holding fold_* weight subdirectories")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--split", default="all", choices=("all", "train", "test"))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the core")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))
    try:
        return args.func(args)
    except (TtrmilError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__,
                                     "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
