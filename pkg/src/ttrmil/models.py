"""The two bag-level heads: a fast attention classifier and a slow risk head.

Both consume a `Bag` of patch embeddings.  The fast head is a gated-attention
binary classifier whose attention weights later drive patch masking; the slow
head scores every patch with a linear log risk, keeps the top-k riskiest
patches and pools their risks with a small attention net into one bag-level
log risk for the Cox loss.

Patch embeddings can be standardized per feature; the shift/scale pair is
part of the persisted parameters so inference applies exactly what training
saw.  Standardizing keeps the patch risk affine in the raw embedding, which
leaves rankings and risk-set differences untouched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import GradTape, Tensor2
from .errors import DimensionMismatch, ExcludedCaseError
from .survival import SurvivalRecord

logger = logging.getLogger(__name__)

__all__ = [
    "Bag",
    "FastModelParams",
    "SlowModelParams",
    "init_fast_params",
    "init_slow_params",
    "fast_forward",
    "FastOut",
    "fast_loss",
    "bag_label",
    "slow_forward",
    "SlowOut",
    "attention_rows",
    "write_attention_csv",
    "read_attention_csv",
    "save_params",
    "load_fast_params",
    "load_slow_params",
]

ATTENTION_INPUTS = ("embeddings", "risks")


@dataclass
class Bag:
    """A case's patches: embeddings (n,d) float64 plus (x, y, level) coords."""

    case_id: str
    embeddings: np.ndarray
    coords: np.ndarray
    resolution_mpp: float

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        coords = np.asarray(self.coords, dtype=np.int32)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise DimensionMismatch(f"bag {self.case_id!r}: embeddings must be (n>=1, d)")
        if coords.shape != (emb.shape[0], 3):
            raise DimensionMismatch(
                f"bag {self.case_id!r}: coords {coords.shape} vs {emb.shape[0]} patches")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"bag {self.case_id!r}: non-finite embedding values")
        self.embeddings = emb
        self.coords = coords
        self.resolution_mpp = float(self.resolution_mpp)

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def _standardize(emb: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> Tensor2:
    return Tensor2((emb - mean) / scale)


@dataclass
class FastModelParams:
    """Gated-attention classifier: V/U attention branches, w scorer, 2-way head."""

    att_V: Tensor2  # (d, h)
    att_U: Tensor2  # (d, h) sigmoid gate
    att_w: Tensor2  # (h, 1)
    clf_W: Tensor2  # (d, 2)
    inst_W: Tensor2 | None  # (d, 2) instance head for the patch-level loss
    input_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    input_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        d = self.att_V.rows
        if self.input_mean is None:
            self.input_mean = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)

    @property
    def dim(self) -> int:
        return self.att_V.rows

    def tensors(self) -> list[Tensor2]:
        out = [self.att_V, self.att_U, self.att_w, self.clf_W]
        if self.inst_W is not None:
            out.append(self.inst_W)
        return out

    def copy(self) -> "FastModelParams":
        return FastModelParams(self.att_V.copy(), self.att_U.copy(), self.att_w.copy(),
                               self.clf_W.copy(),
                               None if self.inst_W is None else self.inst_W.copy(),
                               self.input_mean.copy(), self.input_scale.copy())


@dataclass
class SlowModelParams:
    """Linear patch risk plus a tanh attention pool over the top-k patches."""

    beta: Tensor2   # (d, 1) patch log-risk direction; no bias, the loss is shift-invariant
    att_V: Tensor2  # (d, h) or (1, h) depending on attention_input
    att_w: Tensor2  # (h, 1)
    attention_input: str = "embeddings"
    input_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    input_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.attention_input not in ATTENTION_INPUTS:
            raise ValueError(f"attention_input must be one of {ATTENTION_INPUTS}")
        expected = self.beta.rows if self.attention_input == "embeddings" else 1
        if self.att_V.rows != expected:
            raise DimensionMismatch(
                f"att_V rows {self.att_V.rows} incompatible with attention_input="
                f"{self.attention_input!r} (expected {expected})")
        if self.input_mean is None:
            self.input_mean = np.zeros(self.beta.rows)
        if self.input_scale is None:
            self.input_scale = np.ones(self.beta.rows)

    @property
    def dim(self) -> int:
        return self.beta.rows

    def tensors(self) -> list[Tensor2]:
        return [self.beta, self.att_V, self.att_w]

    def copy(self) -> "SlowModelParams":
        return SlowModelParams(self.beta.copy(), self.att_V.copy(), self.att_w.copy(),
                               self.attention_input,
                               self.input_mean.copy(), self.input_scale.copy())


def init_fast_params(d: int, hidden: int, rng: np.random.Generator,
                     instance_head: bool = True) -> FastModelParams:
    s_d = 1.0 / np.sqrt(d)
    s_h = 1.0 / np.sqrt(hidden)
    return FastModelParams(
        att_V=Tensor2(rng.normal(0.0, s_d, (d, hidden))),
        att_U=Tensor2(rng.normal(0.0, s_d, (d, hidden))),
        att_w=Tensor2(rng.normal(0.0, s_h, (hidden, 1))),
        clf_W=Tensor2(rng.normal(0.0, s_d, (d, 2))),
        inst_W=Tensor2(rng.normal(0.0, s_d, (d, 2))) if instance_head else None,
    )


def init_slow_params(d: int, hidden: int, rng: np.random.Generator,
                     attention_input: str = "embeddings") -> SlowModelParams:
    in_dim = d if attention_input == "embeddings" else 1
    return SlowModelParams(
        beta=Tensor2(rng.normal(0.0, 0.01, (d, 1))),
        att_V=Tensor2(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden))),
        att_w=Tensor2(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1))),
        attention_input=attention_input,
    )


@dataclass
class FastOut:
    """Forward products of the fast head; tensors live on the caller's tape."""

    logits: Tensor2      # (1, 2)
    attention: Tensor2   # (n, 1), sums to 1
    x: Tensor2           # (n, d) standardized input, kept for the instance loss


def fast_forward(bag: Bag, params: FastModelParams, *, training: bool = False,
                 dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                 tape: GradTape | None = None) -> FastOut:
    """Gated-attention pooling then a 2-way linear classifier.

    attention_i = softmax_i( w^T (tanh(V x_i) * sigmoid(U x_i)) ), pooled
    embedding = sum_i attention_i x_i.  Dropout, when training, is applied to
    the gated hidden activations and to the pooled embedding.
    """
    if bag.dim != params.dim:
        raise DimensionMismatch(f"bag dim {bag.dim} vs params dim {params.dim}")
    x = _standardize(bag.embeddings, params.input_mean, params.input_scale)
    hv = dc.tanh_ew(dc.linear(x, params.att_V, tape=tape), tape)
    hu = dc.sigmoid_ew(dc.linear(x, params.att_U, tape=tape), tape)
    gated = dc.mul_ew(hv, hu, tape)
    gated = dc.dropout(gated, dropout_rate, rng, training, tape)
    scores = dc.linear(gated, params.att_w, tape=tape)
    attention = dc.softmax_subset(scores, np.arange(bag.n_patches), tape)
    pooled = dc.weighted_sum(attention, x, tape)
    pooled = dc.dropout(pooled, dropout_rate, rng, training, tape)
    logits = dc.linear(pooled, params.clf_W, tape=tape)
    return FastOut(logits=logits, attention=attention, x=x)


def fast_loss(out: FastOut, label: int, params: FastModelParams, *,
              lambda_inst: float = 0.3, k_inst: int = 8,
              tape: GradTape | None = None) -> Tensor2:
    """Bag cross-entropy plus lambda_inst times the patch-level instance loss.

    The instance term takes the k_inst highest-attention patches with the bag
    label as pseudo-label and the k_inst lowest with pseudo-label 0, scored by
    the dedicated instance head.  Bags too small for two disjoint groups of
    k_inst shrink the group size to n // 2; single-patch bags skip the term.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    bag_ce = dc.cross_entropy(out.logits, [label], tape)
    n = out.attention.rows
    k_i = min(k_inst, n // 2)
    if lambda_inst <= 0.0 or params.inst_W is None or k_i < 1:
        return bag_ce
    a = out.attention.data[:, 0]
    top = np.argsort(-a, kind="stable")[:k_i]
    bottom = np.argsort(a, kind="stable")[:k_i]
    picked = dc.select_rows(out.x, np.concatenate([top, bottom]), tape)
    inst_logits = dc.linear(picked, params.inst_W, tape=tape)
    pseudo = np.concatenate([np.full(k_i, label), np.zeros(k_i, dtype=int)])
    inst_ce = dc.cross_entropy(inst_logits, pseudo, tape)
    return dc.add(bag_ce, dc.scale(inst_ce, lambda_inst, tape), tape)


def bag_label(record: SurvivalRecord, t_years: float) -> int:
    """Recurrence-by-horizon label: 1 iff an event occurred at or before T.

    Cases censored strictly before T have an unknown status at the horizon
    and raise ExcludedCaseError; the stage-1 exclusion must drop them first.
    """
    if t_years <= 0:
        raise ValueError(f"horizon must be positive, got {t_years}")
    if record.time_years > t_years:
        return 0
    if record.event == 1:
        return 1
    if record.time_years == t_years:
        return 0  # censored exactly at the horizon: event-free up to T
    raise ExcludedCaseError(
        f"case {record.case_id!r} censored at {record.time_years} before horizon {t_years}")


@dataclass
class SlowOut:
    """Forward products of the slow head for one bag."""

    log_risk: Tensor2          # (1, 1) bag-level log risk
    patch_log_risks: Tensor2   # (n, 1)
    attention: Tensor2         # (k_effective, 1) over the selected patches
    selected: np.ndarray       # patch indices, descending risk
    k_requested: int
    k_effective: int


def slow_forward(bag: Bag, params: SlowModelParams, k: int, *, training: bool = False,
                 dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                 tape: GradTape | None = None) -> SlowOut:
    """Score patches, keep the k riskiest, attention-pool their risks.

    Selection is by descending patch log risk with ties broken toward the
    lower patch index; it is treated as constant during backprop.  Bags with
    fewer than k patches fall back to all of them (logged once per call).
    """
    if k < 1:
        raise ValueError(f"top-k must be >= 1, got {k}")
    if bag.dim != params.dim:
        raise DimensionMismatch(f"bag dim {bag.dim} vs params dim {params.dim}")
    x = _standardize(bag.embeddings, params.input_mean, params.input_scale)
    risks = dc.linear(x, params.beta, tape=tape)  # (n, 1)
    n = bag.n_patches
    k_eff = min(k, n)
    if k_eff < k:
        logger.debug("bag %s has %d patches < top_k=%d; using all", bag.case_id, n, k)
    selected = np.argsort(-risks.data[:, 0], kind="stable")[:k_eff]

    att_in = dc.select_rows(x if params.attention_input == "embeddings" else risks,
                            selected, tape)
    hidden = dc.tanh_ew(dc.linear(att_in, params.att_V, tape=tape), tape)
    hidden = dc.dropout(hidden, dropout_rate, rng, training, tape)
    att_scores = dc.linear(hidden, params.att_w, tape=tape)
    attention = dc.softmax_subset(att_scores, np.arange(k_eff), tape)
    picked_risks = dc.select_rows(risks, selected, tape)
    log_risk = dc.weighted_sum(attention, picked_risks, tape)
    return SlowOut(log_risk=log_risk, patch_log_risks=risks, attention=attention,
                   selected=selected, k_requested=k, k_effective=k_eff)


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------

ATTENTION_HEADER = ["case_id", "x", "y", "level", "log_risk", "attention", "selected"]


def attention_rows(bag: Bag, out: SlowOut) -> list[tuple]:
    """One row per patch: coordinates, log risk, attention weight, selected flag.

    Unselected patches carry attention 0.0 and flag 0.
    """
    att = np.zeros(bag.n_patches)
    att[out.selected] = out.attention.data[:, 0]
    flags = np.zeros(bag.n_patches, dtype=int)
    flags[out.selected] = 1
    rows = []
    for i in range(bag.n_patches):
        x, y, level = (int(v) for v in bag.coords[i])
        rows.append((bag.case_id, x, y, level,
                     float(out.patch_log_risks.data[i, 0]), float(att[i]), int(flags[i])))
    return rows


def write_attention_csv(path, rows) -> None:
    """Write export rows with 9 significant digits on every float column."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(ATTENTION_HEADER) + "\n")
        for case_id, x, y, level, log_risk, attention, flag in rows:
            fh.write(f"{case_id},{x},{y},{level},{log_risk:.9g},{attention:.9g},{flag}\n")


def read_attention_csv(path) -> list[tuple]:
    import csv

    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ATTENTION_HEADER:
            raise ValueError(f"unexpected attention header {header}")
        return [(cid, int(x), int(y), int(level), float(lr), float(att), int(flag))
                for cid, x, y, level, lr, att, flag in reader]


# ---------------------------------------------------------------------------
# Parameter persistence: one .npy per tensor plus a json meta file
# ---------------------------------------------------------------------------

_FAST_FIELDS = ("att_V", "att_U", "att_w", "clf_W", "inst_W")
_SLOW_FIELDS = ("beta", "att_V", "att_w")


def save_params(directory, params: FastModelParams | SlowModelParams) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(params, FastModelParams):
        kind, fields = "fast", _FAST_FIELDS
        meta: dict = {}
    else:
        kind, fields = "slow", _SLOW_FIELDS
        meta = {"attention_input": params.attention_input}
    meta.update(kind=kind, dim=params.dim)
    for name in fields:
        tensor = getattr(params, name, None)
        if tensor is not None:
            np.save(directory / f"{name}.npy", tensor.data)
    np.save(directory / "input_mean.npy", params.input_mean)
    np.save(directory / "input_scale.npy", params.input_scale)
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def _load_meta(directory: Path, expected_kind: str) -> dict:
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("kind") != expected_kind:
        raise ValueError(f"{directory} holds {meta.get('kind')!r} weights, expected {expected_kind!r}")
    return meta


def load_fast_params(directory) -> FastModelParams:
    directory = Path(directory)
    _load_meta(directory, "fast")
    inst_path = directory / "inst_W.npy"
    return FastModelParams(
        att_V=Tensor2(np.load(directory / "att_V.npy")),
        att_U=Tensor2(np.load(directory / "att_U.npy")),
        att_w=Tensor2(np.load(directory / "att_w.npy")),
        clf_W=Tensor2(np.load(directory / "clf_W.npy")),
        inst_W=Tensor2(np.load(inst_path)) if inst_path.exists() else None,
        input_mean=np.load(directory / "input_mean.npy"),
        input_scale=np.load(directory / "input_scale.npy"),
    )


def load_slow_params(directory) -> SlowModelParams:
    directory = Path(directory)
    meta = _load_meta(directory, "slow")
    return SlowModelParams(
        beta=Tensor2(np.load(directory / "beta.npy")),
        att_V=Tensor2(np.load(directory / "att_V.npy")),
        att_w=Tensor2(np.load(directory / "att_w.npy")),
        attention_input=meta["attention_input"],
        input_mean=np.load(directory / "input_mean.npy"),
        input_scale=np.load(directory / "input_scale.npy"),
    )
