"""Cross-validation plans, the (top_k, m) grid, and grid reports.

Fold plans are pure functions of the case-id set and a seed.  Grid cells run
5x5 nested cross-validation: five outer hold-out folds, five inner
train/validation splits of each outer complement, one C-index per run
evaluated on the outer hold-out, 25 values per cell.  Every run derives its
own RNG stream from (seed, top_k, m, outer, inner), so results do not depend
on scheduling order or worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import TtrmilError
from .models import slow_forward
from .pipeline import train_slow
from .survival import SurvivalRecord, concordance_index

logger = logging.getLogger(__name__)

__all__ = [
    "FoldPlan",
    "make_fold_plan",
    "RunRecord",
    "GridCell",
    "GridResult",
    "run_grid",
    "save_report_csv",
    "save_runs_jsonl",
    "load_runs_jsonl",
]

SCHEMES = ("fixed_test_5fold", "nested_5x5", "plain_10fold")

REPORT_HEADER = ["top_k", "m_percent", "ci_mean", "ci_std", "n_runs"]


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """Deterministic case-id splits for one scheme.

    fixed_test_5fold: fixed_test holds ~20% of cases; outer_folds are the 5
    validation folds of the remainder (train = remainder minus the fold).
    nested_5x5: outer_folds partition the cohort; inner_folds[o] partitions
    the complement of outer fold o into 5 validation folds.
    plain_10fold: outer_folds are the 10 folds; no test set, no inner folds.
    """

    seed: int
    scheme: str
    outer_folds: tuple[tuple[str, ...], ...]
    inner_folds: tuple[tuple[tuple[str, ...], ...], ...]
    fixed_test: tuple[str, ...]

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        outer_all = [cid for fold in self.outer_folds for cid in fold]
        if len(set(outer_all)) != len(outer_all):
            raise ValueError("outer folds overlap")
        if set(outer_all) & set(self.fixed_test):
            raise ValueError("outer folds intersect the fixed test set")
        for o, inner in enumerate(self.inner_folds):
            pool = set(self.all_ids()) - set(self.outer_folds[o])
            inner_all = [cid for fold in inner for cid in fold]
            if len(set(inner_all)) != len(inner_all):
                raise ValueError(f"inner folds of outer {o} overlap")
            if set(inner_all) != pool:
                raise ValueError(f"inner folds of outer {o} do not partition the pool")

    def all_ids(self) -> tuple[str, ...]:
        ids = [cid for fold in self.outer_folds for cid in fold]
        ids.extend(self.fixed_test)
        return tuple(sorted(ids))

    def fast_folds(self) -> list[tuple[list[str], list[str]]]:
        """(train, val) pairs for the fixed-test scheme."""
        if self.scheme != "fixed_test_5fold":
            raise ValueError("fast_folds applies to the fixed_test_5fold scheme")
        pool = [cid for fold in self.outer_folds for cid in fold]
        out = []
        for fold in self.outer_folds:
            val = set(fold)
            out.append(([c for c in pool if c not in val], list(fold)))
        return out

    def nested_runs(self):
        """Yield (outer, inner, train_ids, val_ids, eval_ids) for all 25 runs."""
        if self.scheme != "nested_5x5":
            raise ValueError("nested_runs applies to the nested_5x5 scheme")
        for o, eval_fold in enumerate(self.outer_folds):
            for i, val_fold in enumerate(self.inner_folds[o]):
                val = set(val_fold)
                train = [c for fold in self.inner_folds[o] for c in fold if c not in val]
                yield o, i, train, list(val_fold), list(eval_fold)


def make_fold_plan(case_ids, seed: int, scheme: str) -> FoldPlan:
    """Split the case-id set; identical (set, seed, scheme) yield identical plans."""
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if len(ids) < 10:
        raise ValueError(f"need at least 10 cases, got {len(ids)}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; pick one of {SCHEMES}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 303])))
    shuffled = [ids[int(i)] for i in rng.permutation(len(ids))]

    if scheme == "fixed_test_5fold":
        n_test = int(round(0.2 * len(ids)))
        test = tuple(shuffled[:n_test])
        rest = shuffled[n_test:]
        outer = tuple(tuple(f) for f in _split(rest, 5))
        return FoldPlan(seed, scheme, outer, (), test)

    if scheme == "plain_10fold":
        outer = tuple(tuple(f) for f in _split(shuffled, 10))
        return FoldPlan(seed, scheme, outer, (), ())

    outer = tuple(tuple(f) for f in _split(shuffled, 5))
    inner = []
    for o in range(5):
        pool = [c for c in shuffled if c not in set(outer[o])]
        inner.append(tuple(tuple(f) for f in _split(pool, 5)))
    return FoldPlan(seed, scheme, outer, tuple(inner), ())


def _split(items, k):
    """k contiguous chunks with sizes differing by at most one."""
    n = len(items)
    base, extra = divmod(n, k)
    out = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(items[start:start + size])
        start += size
    return out


# ---------------------------------------------------------------------------
# Grid runs
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    top_k: int
    m_percent: float
    outer: int
    inner: int
    ci: float | None
    error: str | None
    checkpoint_epoch: int | None
    min_epoch: int | None
    train_ids: list[str]
    val_ids: list[str]
    eval_ids: list[str]
    train_losses: list[float]
    val_losses: list[float]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


@dataclass
class GridCell:
    top_k: int
    m_percent: float
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else math.nan

    @property
    def std(self) -> float:
        # population sigma over the runs
        return float(np.std(self.values)) if self.values else math.nan

    @property
    def n_runs(self) -> int:
        return len(self.values)


@dataclass
class GridResult:
    cells: list[GridCell]
    runs: list[RunRecord]
    expected_runs_per_cell: int = 25

    @classmethod
    def from_runs(cls, runs, expected_runs_per_cell: int = 25) -> "GridResult":
        by_cell: dict[tuple, list] = {}
        for r in runs:
            by_cell.setdefault((r.top_k, r.m_percent), [])
            if r.ci is not None:
                by_cell[(r.top_k, r.m_percent)].append(r.ci)
        cells = [GridCell(k, m, values)
                 for (k, m), values in sorted(by_cell.items())]
        return cls(cells=cells, runs=list(runs),
                   expected_runs_per_cell=expected_runs_per_cell)

    def cell(self, top_k: int, m_percent: float) -> GridCell:
        for c in self.cells:
            if c.top_k == top_k and c.m_percent == m_percent:
                return c
        raise KeyError((top_k, m_percent))

    def best_cell(self) -> GridCell:
        """Highest mean C-index; ties broken by smaller sigma.

        Incomplete cells (failed runs) are excluded.
        """
        complete = [c for c in self.cells if c.n_runs == self.expected_runs_per_cell]
        if not complete:
            raise ValueError("no complete grid cells")
        return max(complete, key=lambda c: (c.mean, -c.std))


def _run_one(args):
    (bags, records, cfg, top_k, m_percent, outer, inner,
     train_ids, val_ids, eval_ids) = args
    cfg_k = cfg.replace(top_k=top_k)
    m_key = int(round(m_percent * 10))
    try:
        result = train_slow(bags, records, cfg_k, train_ids, val_ids,
                            stream=(top_k, m_key, outer, inner))
        by_id = {r.case_id: r for r in records}
        risks = np.array([float(slow_forward(bags[c], result.params, top_k)
                                .log_risk.data[0, 0]) for c in eval_ids])
        ci = concordance_index(risks, [by_id[c] for c in eval_ids])
        return RunRecord(top_k, m_percent, outer, inner, float(ci), None,
                         result.checkpoint_epoch, result.min_epoch,
                         list(train_ids), list(val_ids), list(eval_ids),
                         result.train_losses, result.val_losses)
    except TtrmilError as exc:
        return RunRecord(top_k, m_percent, outer, inner, None,
                         f"{type(exc).__name__}: {exc}",
                         None, None, list(train_ids), list(val_ids),
                         list(eval_ids), [], [])
    except KeyError as exc:
        # a case dropped at masking time (degenerate mask) is a failed run
        return RunRecord(top_k, m_percent, outer, inner, None,
                         f"missing masked bag for case {exc.args[0]!r}",
                         None, None, list(train_ids), list(val_ids),
                         list(eval_ids), [], [])


def run_grid(bags_by_m: dict[float, dict], records, ks, ms, cfg: RunConfig,
             plan: FoldPlan | None = None, workers: int = 1) -> GridResult:
    """Nested 5x5 CV per (top_k, m) cell over pre-masked high-res bags.

    bags_by_m maps each m in ms to its masked bag dict.  Failed runs are
    recorded with their error instead of aborting the grid.  workers=1 runs
    inline; more workers fan runs out to processes, with identical results
    because every run's RNG stream is its own.
    """
    ks = list(ks)
    ms = list(ms)
    missing = [m for m in ms if m not in bags_by_m]
    if missing:
        raise ValueError(f"no masked bags supplied for m={missing}")
    if plan is None:
        plan = make_fold_plan([r.case_id for r in records], cfg.seed, "nested_5x5")
    jobs = []
    for k in ks:
        for m in ms:
            for outer, inner, train_ids, val_ids, eval_ids in plan.nested_runs():
                jobs.append((bags_by_m[m], records, cfg, k, m, outer, inner,
                             train_ids, val_ids, eval_ids))
    if workers <= 1:
        results = [_run_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    results.sort(key=lambda r: (r.top_k, r.m_percent, r.outer, r.inner))
    n_failed = sum(1 for r in results if r.error is not None)
    if n_failed:
        logger.warning("grid finished with %d failed runs", n_failed)
    return GridResult.from_runs(results)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def save_report_csv(path, grid: GridResult) -> None:
    """Rows sorted by (top_k, m_percent); floats at full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for c in sorted(grid.cells, key=lambda c: (c.top_k, c.m_percent)):
            writer.writerow([c.top_k, f"{c.m_percent!r}", f"{c.mean!r}",
                             f"{c.std!r}", c.n_runs])


def save_runs_jsonl(path, grid: GridResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in grid.runs:
            fh.write(r.to_json() + "\n")


def load_runs_jsonl(path, expected_runs_per_cell: int = 25) -> GridResult:
    """Rebuild a grid from its run log; cell stats are recomputed, not read."""
    runs = [RunRecord.from_json(line)
            for line in Path(path).read_text().splitlines() if line.strip()]
    return GridResult.from_runs(runs, expected_runs_per_cell)
