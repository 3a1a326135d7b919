"""Bag serialization, cohort manifests, and the synthetic cohort generator.

Bag container format (all little-endian):

    magic   4 bytes  b"MILB"
    version u16
    d       u32      embedding width
    n       u32      patch count
    coords  n*3 i32  (x, y, level) per patch
    mpp     f64      resolution in microns per pixel
    payload n*d f32  row-major embeddings

Embeddings are float32 on disk and float64 in memory.  The synthetic
generator plants a known risk signal: a fraction of "hot" grid cells whose
patches are background noise plus severity * hot_direction, with event times
drawn from an exponential hazard scaled by exp(severity).  Everything needed
to audit a cohort (severities, hot patch indices, raw times) is persisted
next to the manifest.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BagFormatError, ManifestError
from .models import Bag
from .survival import SurvivalRecord

__all__ = [
    "BAG_MAGIC",
    "BAG_VERSION",
    "save_bag",
    "load_bag",
    "MANIFEST_HEADER",
    "ManifestRow",
    "save_manifest",
    "load_manifest",
    "Dataset",
    "load_dataset",
    "GridGeometry",
    "SyntheticSpec",
    "SyntheticCase",
    "SyntheticCohort",
    "generate_cohort",
    "generate_synthetic",
    "event_times_for_severities",
]

BAG_MAGIC = b"MILB"
BAG_VERSION = 1
_FIXED_HEADER = struct.Struct("<4sHII")


def save_bag(path, bag: Bag) -> None:
    """Serialize a bag; embeddings are cast to float32."""
    n, d = bag.embeddings.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_FIXED_HEADER.pack(BAG_MAGIC, BAG_VERSION, d, n))
        fh.write(np.ascontiguousarray(bag.coords, dtype="<i4").tobytes())
        fh.write(struct.pack("<d", bag.resolution_mpp))
        fh.write(np.ascontiguousarray(bag.embeddings, dtype="<f4").tobytes())


def load_bag(path, case_id: str | None = None) -> Bag:
    """Parse a bag file; corruption raises BagFormatError with a byte offset."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FIXED_HEADER.size:
        raise BagFormatError("file too short for the fixed header", offset=len(raw))
    magic, version, d, n = _FIXED_HEADER.unpack_from(raw, 0)
    if magic != BAG_MAGIC:
        raise BagFormatError(f"bad magic {magic!r}", offset=0)
    if version != BAG_VERSION:
        raise BagFormatError(f"unsupported version {version}", offset=4)
    if d == 0:
        raise BagFormatError("embedding width is zero", offset=6)
    if n == 0:
        raise BagFormatError("patch count is zero", offset=10)
    coords_off = _FIXED_HEADER.size
    mpp_off = coords_off + n * 12
    payload_off = mpp_off + 8
    expected = payload_off + n * d * 4
    if len(raw) != expected:
        raise BagFormatError(f"expected {expected} bytes, found {len(raw)}",
                             offset=min(len(raw), expected))
    coords = np.frombuffer(raw, dtype="<i4", count=n * 3, offset=coords_off).reshape(n, 3).copy()
    (mpp,) = struct.unpack_from("<d", raw, mpp_off)
    if not (math.isfinite(mpp) and mpp > 0):
        raise BagFormatError(f"resolution_mpp {mpp!r} out of range", offset=mpp_off)
    emb32 = np.frombuffer(raw, dtype="<f4", count=n * d, offset=payload_off).reshape(n, d)
    finite = np.isfinite(emb32)
    if not finite.all():
        first_bad = int(np.flatnonzero(~finite.ravel())[0])
        raise BagFormatError("non-finite embedding value", offset=payload_off + first_bad * 4)
    if case_id is None:
        case_id = path.name.split(".")[0]
    return Bag(case_id, emb32.astype(np.float64), coords, float(mpp))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["case_id", "event", "time_years", "split", "bag_path_low", "bag_path_high"]


@dataclass(frozen=True)
class ManifestRow:
    case_id: str
    event: int
    time_years: float
    split: str
    bag_path_low: str
    bag_path_high: str

    def record(self) -> SurvivalRecord:
        return SurvivalRecord(self.case_id, self.event, self.time_years)


def save_manifest(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.case_id, r.event, f"{r.time_years!r}", r.split,
                             r.bag_path_low, r.bag_path_high])


def load_manifest(path, check_files: bool = True) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("manifest is empty") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"manifest header {header} != {MANIFEST_HEADER}")
        rows = []
        seen = set()
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_HEADER):
                raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} fields")
            case_id, event_s, time_s, split, p_low, p_high = rec
            if not case_id:
                raise ManifestError(f"line {lineno}: empty case_id")
            if case_id in seen:
                raise ManifestError(f"line {lineno}: duplicate case_id {case_id!r}")
            seen.add(case_id)
            if event_s not in ("0", "1"):
                raise ManifestError(f"line {lineno}: event must be 0 or 1, got {event_s!r}")
            try:
                time_years = float(time_s)
            except ValueError:
                raise ManifestError(f"line {lineno}: bad time_years {time_s!r}") from None
            if not (math.isfinite(time_years) and time_years > 0):
                raise ManifestError(f"line {lineno}: time_years must be positive, got {time_years}")
            if check_files:
                for p in (p_low, p_high):
                    if not (path.parent / p).exists():
                        raise ManifestError(f"line {lineno}: bag file missing: {p}")
            rows.append(ManifestRow(case_id, int(event_s), time_years, split, p_low, p_high))
    return rows


@dataclass
class Dataset:
    """A loaded manifest with helpers to pull bags off disk."""

    manifest_path: Path
    rows: list[ManifestRow]

    def records(self) -> list[SurvivalRecord]:
        return [r.record() for r in self.rows]

    def row(self, case_id: str) -> ManifestRow:
        for r in self.rows:
            if r.case_id == case_id:
                return r
        raise KeyError(case_id)

    def load_bag(self, row: ManifestRow, which: str) -> Bag:
        rel = row.bag_path_low if which == "low" else row.bag_path_high
        return load_bag(self.manifest_path.parent / rel, case_id=row.case_id)

    def load_all(self, which: str) -> dict[str, Bag]:
        if which not in ("low", "high"):
            raise ValueError("which must be 'low' or 'high'")
        return {r.case_id: self.load_bag(r, which) for r in self.rows}


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    return Dataset(manifest_path, load_manifest(manifest_path))


# ---------------------------------------------------------------------------
# Grid geometry metadata
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridGeometry:
    """Maps high-res patch coordinates onto the low-res cell grid.

    Both resolutions share one integer coordinate space.  Low cells tile it
    without overlap at pitch `low_cell_units`; a high patch covers
    [x, x + high_patch_units) x [y, y + high_patch_units).
    """

    low_cell_units: int
    high_patch_units: int
    high_step_units: int
    low_level: int
    high_level: int

    def __post_init__(self):
        if self.low_cell_units < 1 or self.high_patch_units < 1 or self.high_step_units < 1:
            raise ValueError("geometry sizes must be positive")

    def to_json(self) -> str:
        return json.dumps({
            "low_cell_units": self.low_cell_units,
            "high_patch_units": self.high_patch_units,
            "high_step_units": self.high_step_units,
            "low_level": self.low_level,
            "high_level": self.high_level,
        }, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json_file(cls, path) -> "GridGeometry":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------

LOW_CELL_UNITS = 64
HIGH_PATCH_UNITS = 32
HIGH_STEP_UNITS = 16
LOW_LEVEL = 6
HIGH_LEVEL = 0
LOW_MPP = 16.0
HIGH_MPP = 0.25

_HIGH_OFFSETS = [(ox, oy)
                 for oy in range(0, LOW_CELL_UNITS - HIGH_PATCH_UNITS + 1, HIGH_STEP_UNITS)
                 for ox in range(0, LOW_CELL_UNITS - HIGH_PATCH_UNITS + 1, HIGH_STEP_UNITS)]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for a planted-signal cohort."""

    n_cases: int
    d: int = 24
    patches_per_bag: tuple[int, int] = (30, 40)
    hot_fraction: float = 0.1
    hot_direction_seed: int = 7
    baseline_hazard: float = 2e-5
    censoring_rate: float = 0.3
    seed: int = 0
    severity_range: tuple[float, float] = (1.0, 21.0)
    noise_scale: float = 0.5
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_cases < 2:
            raise ValueError("need at least 2 cases")
        if self.d < 2:
            raise ValueError("embedding width must be >= 2")
        lo, hi = self.patches_per_bag
        if not (1 <= lo <= hi):
            raise ValueError("patches_per_bag must be an increasing positive range")
        if not 0 < self.hot_fraction <= 1:
            raise ValueError("hot_fraction must be in (0, 1]")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring_rate must be in [0, 1)")
        if self.baseline_hazard <= 0:
            raise ValueError("baseline_hazard must be positive")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")


@dataclass
class SyntheticCase:
    low: Bag
    high: Bag
    record: SurvivalRecord
    split: str
    severity: float
    event_time: float
    censor_time: float | None
    hot_low: np.ndarray
    hot_high: np.ndarray


@dataclass
class SyntheticCohort:
    spec: SyntheticSpec
    geometry: GridGeometry
    hot_direction: np.ndarray
    cases: list[SyntheticCase]

    @property
    def realized_censoring(self) -> float:
        return 1.0 - float(np.mean([c.record.event for c in self.cases]))

    def records(self) -> list[SurvivalRecord]:
        return [c.record for c in self.cases]


def event_times_for_severities(rng: np.random.Generator, severities,
                               baseline_hazard: float) -> np.ndarray:
    """Uncensored event times: exponential with rate baseline_hazard * e^s."""
    s = np.asarray(severities, dtype=np.float64)
    rates = baseline_hazard * np.exp(s)
    return rng.exponential(1.0 / rates)


def _calibrated_censor_rate(event_rates: np.ndarray, target: float) -> float:
    """Exponential censoring rate c with mean_i c / (c + r_i) == target.

    For independent exponentials, P(censor before event | rate r) is exactly
    c / (c + r), so the cohort-level expectation can be solved by bisection.
    """
    lo = float(event_rates.min()) * 1e-12
    hi = float(event_rates.max()) * 1e12
    for _ in range(300):
        mid = math.sqrt(lo * hi)
        frac = float(np.mean(mid / (mid + event_rates)))
        if frac < target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def generate_cohort(spec: SyntheticSpec) -> SyntheticCohort:
    """Deterministically build a cohort in memory from the spec's seed."""
    dir_rng = np.random.Generator(np.random.PCG64(spec.hot_direction_seed))
    u = dir_rng.normal(size=spec.d)
    u /= np.linalg.norm(u)

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    lo, hi = spec.patches_per_bag
    sev_lo, sev_hi = spec.severity_range

    n_low_counts = rng.integers(lo, hi + 1, size=spec.n_cases)
    severities = rng.uniform(sev_lo, sev_hi, size=spec.n_cases)
    raw_cases = []
    for i in range(spec.n_cases):
        n_low = int(n_low_counts[i])
        s = float(severities[i])
        side = math.ceil(math.sqrt(n_low))
        cells = [(col, row) for row in range(side) for col in range(side)][:n_low]
        n_hot = math.ceil(spec.hot_fraction * n_low)
        hot_low = np.sort(rng.choice(n_low, size=n_hot, replace=False))

        low_coords = np.array([[cx * LOW_CELL_UNITS, cy * LOW_CELL_UNITS, LOW_LEVEL]
                               for cx, cy in cells], dtype=np.int32)
        low_emb = rng.normal(0.0, spec.noise_scale, size=(n_low, spec.d))
        low_emb[hot_low] += s * u

        hot_set = set(int(v) for v in hot_low)
        high_coords = []
        hot_high = []
        for ci, (cx, cy) in enumerate(cells):
            for ox, oy in _HIGH_OFFSETS:
                if ci in hot_set:
                    hot_high.append(len(high_coords))
                high_coords.append((cx * LOW_CELL_UNITS + ox, cy * LOW_CELL_UNITS + oy, HIGH_LEVEL))
        high_coords = np.array(high_coords, dtype=np.int32)
        n_high = high_coords.shape[0]
        high_emb = rng.normal(0.0, spec.noise_scale, size=(n_high, spec.d))
        hot_high = np.array(hot_high, dtype=np.int64)
        high_emb[hot_high] += s * u

        raw_cases.append((n_low, s, low_coords, low_emb, high_coords, high_emb,
                          hot_low, hot_high))

    event_times = event_times_for_severities(rng, severities, spec.baseline_hazard)
    if spec.censoring_rate > 0:
        rates = spec.baseline_hazard * np.exp(severities)
        c_rate = _calibrated_censor_rate(rates, spec.censoring_rate)
        censor_times = rng.exponential(1.0 / c_rate, size=spec.n_cases)
    else:
        censor_times = None

    n_test = int(round(spec.test_fraction * spec.n_cases))
    test_idx = set(int(v) for v in rng.permutation(spec.n_cases)[:n_test])

    cases = []
    for i, (n_low, s, low_coords, low_emb, high_coords, high_emb,
            hot_low, hot_high) in enumerate(raw_cases):
        case_id = f"case_{i:04d}"
        if censor_times is not None and censor_times[i] < event_times[i]:
            time, event, censor_t = float(censor_times[i]), 0, float(censor_times[i])
        else:
            time, event = float(event_times[i]), 1
            censor_t = float(censor_times[i]) if censor_times is not None else None
        cases.append(SyntheticCase(
            low=Bag(case_id, low_emb, low_coords, LOW_MPP),
            high=Bag(case_id, high_emb, high_coords, HIGH_MPP),
            record=SurvivalRecord(case_id, event, time),
            split="test" if i in test_idx else "train",
            severity=s,
            event_time=float(event_times[i]),
            censor_time=censor_t,
            hot_low=hot_low,
            hot_high=hot_high,
        ))

    geometry = GridGeometry(LOW_CELL_UNITS, HIGH_PATCH_UNITS, HIGH_STEP_UNITS,
                            LOW_LEVEL, HIGH_LEVEL)
    return SyntheticCohort(spec=spec, geometry=geometry, hot_direction=u, cases=cases)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a cohort to disk; returns the manifest path.

    The tree is a pure function of the spec, so identical specs produce
    byte-identical output.
    """
    out_dir = Path(out_dir)
    cohort = generate_cohort(spec)
    bags_dir = out_dir / "bags"
    bags_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    truth_cases = {}
    for case in cohort.cases:
        low_rel = f"bags/{case.record.case_id}.low.bag"
        high_rel = f"bags/{case.record.case_id}.high.bag"
        save_bag(out_dir / low_rel, case.low)
        save_bag(out_dir / high_rel, case.high)
        rows.append(ManifestRow(case.record.case_id, case.record.event,
                                case.record.time_years, case.split, low_rel, high_rel))
        truth_cases[case.record.case_id] = {
            "severity": case.severity,
            "event_time": case.event_time,
            "censor_time": case.censor_time,
            "hot_low": [int(v) for v in case.hot_low],
            "hot_high": [int(v) for v in case.hot_high],
        }

    manifest_path = out_dir / "manifest.csv"
    save_manifest(manifest_path, rows)
    (out_dir / "geometry.json").write_text(cohort.geometry.to_json())
    truth = {
        "hot_direction": [float(v) for v in cohort.hot_direction],
        "baseline_hazard": spec.baseline_hazard,
        "severity_range": list(spec.severity_range),
        "realized_censoring": cohort.realized_censoring,
        "cases": truth_cases,
    }
    (out_dir / "truth.json").write_text(json.dumps(truth, sort_keys=True, indent=2) + "\n")
    return manifest_path
