"""Two-stage orchestration.

Stage one trains the low-resolution attention classifier on a recurrence-
before-T label, then turns its attention ranking into a per-case mask keeping
the top m percent of cells.  Stage two applies the mask to the high-resolution
bag and trains the Cox head on what survives.  Predictions ensemble the
per-fold log risks; ttr = exp(-mean log risk).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import GridGeometry
from .diffcore import Adam, GradTape, Tensor2
from .errors import DegenerateMaskError
from .models import (
    Bag,
    FastModelParams,
    SlowModelParams,
    bag_label,
    fast_forward,
    fast_loss,
    init_fast_params,
    init_slow_params,
    slow_forward,
)
from .survival import SurvivalRecord, binary_auc, cox_neg_log_partial_likelihood

logger = logging.getLogger(__name__)

__all__ = [
    "PatchMask",
    "make_mask",
    "apply_mask",
    "save_mask_csv",
    "load_mask_csv",
    "stage1_exclusion",
    "min_epoch_rule",
    "FastTrainResult",
    "train_fast",
    "SlowTrainResult",
    "train_slow",
    "EnsemblePrediction",
    "ensemble_predict",
    "save_predictions_csv",
    "input_stats",
]

MASK_HEADER = ["case_id", "x", "y", "level", "flag"]
PREDICTIONS_HEADER = ["case_id", "mean_log_risk", "ttr_years"]


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchMask:
    """Keep/drop flag per low-resolution cell of one case."""

    case_id: str
    coords: np.ndarray   # (n, 3) int32, low-resolution grid
    flags: np.ndarray    # (n,) uint8 in {0, 1}
    m_percent: float

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int32)
        flags = np.asarray(self.flags, dtype=np.uint8)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"mask {self.case_id!r}: coords must be (n>=1, 3)")
        if flags.shape != (coords.shape[0],):
            raise ValueError(f"mask {self.case_id!r}: flags shape {flags.shape}")
        if not np.all((flags == 0) | (flags == 1)):
            raise ValueError(f"mask {self.case_id!r}: flags must be 0 or 1")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "flags", flags)

    @property
    def n_kept(self) -> int:
        return int(self.flags.sum())


def make_mask(attention_scores, coords, m_percent: float, case_id: str = "") -> PatchMask:
    """Flag the top ceil(m_percent * n / 100) cells by attention.

    Ties at the cutoff go to the lower patch index.
    """
    if not 0 < m_percent <= 40:
        raise ValueError(f"m_percent must be in (0, 40], got {m_percent}")
    a = np.asarray(attention_scores, dtype=np.float64).reshape(-1)
    n = a.shape[0]
    if n < 1:
        raise ValueError("need at least one attention score")
    count = math.ceil(m_percent * n / 100.0)
    keep = np.argsort(-a, kind="stable")[:count]
    flags = np.zeros(n, dtype=np.uint8)
    flags[keep] = 1
    return PatchMask(case_id, np.asarray(coords), flags, float(m_percent))


def apply_mask(high_bag: Bag, mask: PatchMask, geometry: GridGeometry) -> Bag:
    """Keep high-res patches overlapping any flagged low-res cell.

    Overlap is open-interval rectangle intersection: patch [x, x+hp) x
    [y, y+hp) against cell [cx, cx+cell) x [cy, cy+cell).
    """
    kept_cells = mask.coords[mask.flags == 1, :2].astype(np.int64)
    hp = geometry.high_patch_units
    cell = geometry.low_cell_units
    if kept_cells.shape[0] == 0:
        raise DegenerateMaskError(high_bag.case_id,
                                  f"mask for {high_bag.case_id!r} keeps no cells")
    hx = high_bag.coords[:, 0].astype(np.int64)[:, None]
    hy = high_bag.coords[:, 1].astype(np.int64)[:, None]
    cx = kept_cells[None, :, 0]
    cy = kept_cells[None, :, 1]
    overlap = (hx < cx + cell) & (cx < hx + hp) & (hy < cy + cell) & (cy < hy + hp)
    keep = overlap.any(axis=1)
    if not keep.any():
        raise DegenerateMaskError(high_bag.case_id,
                                  f"mask for {high_bag.case_id!r} drops every high-res patch")
    return Bag(high_bag.case_id, high_bag.embeddings[keep],
               high_bag.coords[keep], high_bag.resolution_mpp)


def save_mask_csv(path, masks) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MASK_HEADER)
        for m in masks:
            for (x, y, level), flag in zip(m.coords, m.flags):
                writer.writerow([m.case_id, int(x), int(y), int(level), int(flag)])


def load_mask_csv(path, m_percent: float = 40.0) -> dict[str, PatchMask]:
    """Read masks back; m_percent is metadata only at this point."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MASK_HEADER:
            raise ValueError(f"mask header {header} != {MASK_HEADER}")
        per_case: dict[str, list] = {}
        for case_id, x, y, level, flag in reader:
            per_case.setdefault(case_id, []).append((int(x), int(y), int(level), int(flag)))
    masks = {}
    for case_id, rows in per_case.items():
        coords = np.array([r[:3] for r in rows], dtype=np.int32)
        flags = np.array([r[3] for r in rows], dtype=np.uint8)
        masks[case_id] = PatchMask(case_id, coords, flags, m_percent)
    return masks


# ---------------------------------------------------------------------------
# Stage-1 exclusion and the checkpoint epoch rule
# ---------------------------------------------------------------------------

def stage1_exclusion(records, T: float) -> set[str]:
    """Case ids retained for stage-1 training: drop censored-before-T cases."""
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    return {r.case_id for r in records if not (r.event == 0 and r.time_years < T)}


def min_epoch_rule(train_losses, default: int = 40) -> int:
    """Earliest epoch eligible for checkpointing.

    Smooths the loss curve with a centered moving average (window 5,
    shrinking at the edges), takes discrete second differences, and returns
    the first epoch whose second difference strictly changes sign relative to
    the last nonzero sign before it.  Curves with no sign change (linear,
    convex throughout) fall back to the default.
    """
    losses = np.asarray(train_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.shape[0] < 5:
        raise ValueError("need at least 5 recorded epochs")
    n = losses.shape[0]
    smooth = np.array([losses[max(0, i - 2):min(n, i + 3)].mean() for i in range(n)])
    # curvature at epoch e uses smooth[e-1:e+2]; only trust epochs whose
    # whole stencil came from full 5-wide windows, otherwise the shrunk edge
    # windows manufacture sign flips even on linear curves
    tol = 1e-9 * max(1.0, float(np.abs(smooth).max()))  # roundoff, not curvature
    prev_sign = 0
    for e in range(3, n - 3):
        value = smooth[e + 1] - 2.0 * smooth[e] + smooth[e - 1]
        sign = 0 if abs(value) <= tol else (1 if value > 0 else -1)
        if sign == 0:
            continue
        if prev_sign != 0 and sign != prev_sign:
            return e
        prev_sign = sign
    return default


# ---------------------------------------------------------------------------
# Shared training plumbing
# ---------------------------------------------------------------------------

def input_stats(bags) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and scale over all patches of the given bags."""
    stacked = np.concatenate([b.embeddings for b in bags], axis=0)
    mean = stacked.mean(axis=0)
    scale = np.maximum(stacked.std(axis=0), 1e-8)
    return mean, scale


def _fast_score(bag: Bag, params: FastModelParams) -> float:
    logits = fast_forward(bag, params).logits.data
    return float(logits[0, 1] - logits[0, 0])


def _cox_loss_node(log_risks: Tensor2, records, tape: GradTape | None) -> Tensor2:
    """Bridge the closed-form Cox loss into the tape as a single node."""
    loss = cox_neg_log_partial_likelihood(log_risks.data[:, 0], records)
    out = Tensor2(np.array([[loss.value]]))
    if tape is not None:
        grad_col = loss.grad[:, None]

        def backward():
            if out.grad is None:
                return
            dc._accum(log_risks, grad_col * out.grad[0, 0])

        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# Fast stage
# ---------------------------------------------------------------------------

@dataclass
class FastTrainResult:
    params: FastModelParams           # best fold's best checkpoint
    best_fold: int
    fold_params: list[FastModelParams]
    fold_val_auc: list[float]
    history: list[list[dict]]         # [fold][epoch] -> metrics
    test_auc: float | None
    retained: set[str] = field(default_factory=set)
    labels: dict[str, int] = field(default_factory=dict)


def train_fast(bags: dict[str, Bag], records, cfg: RunConfig,
               folds, test_ids=()) -> FastTrainResult:
    """Train the low-res attention classifier over explicit (train, val) folds.

    `folds` is a sequence of (train_ids, val_ids) pairs.  Cases censored
    before T are excluded up front; remaining ids missing from any fold are
    simply unused.  The best fold is the one with the highest best-epoch
    validation AUC; its checkpoint is evaluated once on test_ids.
    """
    retained = stage1_exclusion(records, cfg.T)
    by_id = {r.case_id: r for r in records}
    labels = {cid: bag_label(by_id[cid], cfg.T) for cid in retained}

    fold_params: list[FastModelParams] = []
    fold_val_auc: list[float] = []
    history: list[list[dict]] = []
    d = next(iter(bags.values())).dim

    for fold_idx, (train_ids, val_ids) in enumerate(folds):
        train_ids = [c for c in train_ids if c in retained]
        val_ids = [c for c in val_ids if c in retained]
        if not train_ids or not val_ids:
            raise ValueError(f"fold {fold_idx}: empty train or val split after exclusion")
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, 101, fold_idx])))
        params = init_fast_params(d, cfg.hidden_dim, rng,
                                  instance_head=cfg.lambda_inst > 0)
        mean, scale = input_stats([bags[c] for c in train_ids])
        params.input_mean, params.input_scale = mean, scale
        opt = Adam(params.tensors(), cfg.lr, cfg.weight_decay)

        best_auc = -np.inf
        best_params = params.copy()
        epochs = []
        for epoch in range(cfg.fast_epochs):
            order = rng.permutation(len(train_ids))
            total = 0.0
            for idx in order:
                cid = train_ids[int(idx)]
                tape = GradTape()
                out = fast_forward(bags[cid], params, training=True,
                                   dropout_rate=cfg.dropout, rng=rng, tape=tape)
                loss = fast_loss(out, labels[cid], params,
                                 lambda_inst=cfg.lambda_inst, k_inst=cfg.k_inst,
                                 tape=tape)
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
                total += float(loss.data[0, 0])
            val_scores = np.array([_fast_score(bags[c], params) for c in val_ids])
            val_labels = np.array([labels[c] for c in val_ids])
            if val_labels.min() == val_labels.max():
                val_auc = math.nan
            else:
                val_auc = binary_auc(val_scores, val_labels)
            epochs.append({"epoch": epoch, "train_loss": total / len(train_ids),
                           "val_auc": val_auc})
            if not math.isnan(val_auc) and val_auc > best_auc:
                best_auc = val_auc
                best_params = params.copy()
        fold_params.append(best_params)
        fold_val_auc.append(best_auc if np.isfinite(best_auc) else math.nan)
        history.append(epochs)
        logger.info("fast fold %d best val AUC %.4f", fold_idx, best_auc)

    keyed = [(-np.inf if math.isnan(a) else a) for a in fold_val_auc]
    best_fold = int(np.argmax(keyed))
    best = fold_params[best_fold]

    test_auc = None
    test_kept = [c for c in test_ids if c in retained]
    if test_kept:
        scores = np.array([_fast_score(bags[c], best) for c in test_kept])
        test_labels = np.array([labels[c] for c in test_kept])
        if test_labels.min() != test_labels.max():
            test_auc = binary_auc(scores, test_labels)

    return FastTrainResult(params=best, best_fold=best_fold, fold_params=fold_params,
                           fold_val_auc=fold_val_auc, history=history,
                           test_auc=test_auc, retained=retained, labels=labels)


# ---------------------------------------------------------------------------
# Slow stage
# ---------------------------------------------------------------------------

@dataclass
class SlowTrainResult:
    params: SlowModelParams
    train_losses: list[float]
    val_losses: list[float]
    min_epoch: int
    checkpoint_epoch: int


def _epoch_cox_loss(bags, params, cfg: RunConfig, ids, records_by_id,
                    training: bool, rng, opt) -> float:
    """One pass over `ids`; steps the optimizer when training.

    Full-batch when cfg.batch_size is None, otherwise shuffled mini-batches
    with risk sets restricted to the batch.
    """
    if training and cfg.batch_size is not None:
        order = [ids[int(i)] for i in rng.permutation(len(ids))]
        chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    else:
        chunks = [list(ids)]
    total = 0.0
    n_events_total = 0
    for chunk in chunks:
        tape = GradTape() if training else None
        nodes = []
        for cid in chunk:
            out = slow_forward(bags[cid], params, cfg.top_k, training=training,
                               dropout_rate=cfg.dropout if training else 0.0,
                               rng=rng if training else None, tape=tape)
            nodes.append(out.log_risk)
        stacked = dc.concat_rows(nodes, tape)
        chunk_records = [records_by_id[cid] for cid in chunk]
        loss = _cox_loss_node(stacked, chunk_records, tape)
        n_ev = sum(r.event for r in chunk_records)
        total += float(loss.data[0, 0])
        n_events_total += n_ev
        if training:
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
    # mean loss per event keeps curves comparable across batch settings
    return total / max(1, n_events_total)


def train_slow(bags: dict[str, Bag], records, cfg: RunConfig,
               train_ids, val_ids, stream=0) -> SlowTrainResult:
    """Cox training on masked high-res bags with a best-val checkpoint.

    The checkpoint is the epoch with the lowest validation loss among epochs
    >= min_epoch, where min_epoch comes from the second-difference rule on
    the training curve (clamped so at least the final epoch is eligible).
    `stream` (an int or tuple of ints) keys this run's RNG stream so callers
    scheduling many runs get independent, order-free randomness.
    """
    train_ids = list(train_ids)
    val_ids = list(val_ids)
    if not train_ids or not val_ids:
        raise ValueError("train_slow needs non-empty train and val id lists")
    records_by_id = {r.case_id: r for r in records}
    stream_key = stream if isinstance(stream, tuple) else (stream,)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 202, *stream_key])))
    d = next(iter(bags.values())).dim
    params = init_slow_params(d, cfg.hidden_dim, rng,
                              attention_input=cfg.attention_input)
    mean, scale = input_stats([bags[c] for c in train_ids])
    params.input_mean, params.input_scale = mean, scale
    opt = Adam(params.tensors(), cfg.lr, cfg.weight_decay)

    train_losses: list[float] = []
    val_losses: list[float] = []
    snapshots: list[SlowModelParams] = []
    for _ in range(cfg.slow_epochs):
        train_losses.append(_epoch_cox_loss(bags, params, cfg, train_ids,
                                            records_by_id, True, rng, opt))
        val_losses.append(_epoch_cox_loss(bags, params, cfg, val_ids,
                                          records_by_id, False, None, None))
        snapshots.append(params.copy())

    if len(train_losses) >= 5:
        min_epoch = min_epoch_rule(train_losses, default=cfg.min_epoch_default)
    else:
        min_epoch = 0
    min_epoch = min(min_epoch, cfg.slow_epochs - 1)
    eligible = np.arange(min_epoch, cfg.slow_epochs)
    checkpoint_epoch = int(eligible[np.argmin(np.asarray(val_losses)[eligible])])
    logger.info("slow stream %s: min_epoch %d, checkpoint %d, val loss %.5f",
                stream, min_epoch, checkpoint_epoch, val_losses[checkpoint_epoch])
    return SlowTrainResult(params=snapshots[checkpoint_epoch],
                           train_losses=train_losses, val_losses=val_losses,
                           min_epoch=min_epoch, checkpoint_epoch=checkpoint_epoch)


# ---------------------------------------------------------------------------
# Ensembling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsemblePrediction:
    case_id: str
    fold_log_risks: tuple[float, ...]
    mean_log_risk: float
    ttr: float


def ensemble_predict(bag: Bag, fold_params, k: int) -> EnsemblePrediction:
    """Average per-fold bag log risks; ttr = exp(-mean)."""
    fold_params = list(fold_params)
    if not fold_params:
        raise ValueError("need at least one fold's parameters")
    logs = tuple(float(slow_forward(bag, p, k).log_risk.data[0, 0]) for p in fold_params)
    # fsum rounds the exact sum once, so the mean is fold-order invariant
    mean = math.fsum(logs) / len(logs)
    return EnsemblePrediction(bag.case_id, logs, mean, math.exp(-mean))


def save_predictions_csv(path, predictions) -> None:
    predictions = list(predictions)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_folds = len(predictions[0].fold_log_risks) if predictions else 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER + [f"fold_{i}" for i in range(n_folds)])
        for p in predictions:
            writer.writerow([p.case_id, f"{p.mean_log_risk!r}", f"{p.ttr!r}"]
                            + [f"{v!r}" for v in p.fold_log_risks])
