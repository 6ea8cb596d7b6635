"""Coverage bookkeeping over (class, descriptor, subgroup) cells.

Coverage of a cell is how strongly its descriptor is annotated among the
samples of that class/subgroup: the mean soft probability ("soft" mode) or the
fraction above a threshold ("hard" mode).  The coverage-disparity index is the
absolute Pearson correlation between per-cell coverage and per-cell miss rate;
a large value means the model fails exactly where annotation is thin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, DiagnosticError


class SCGKey(NamedTuple):
    """Identifier of one (class, descriptor, subgroup) cell."""

    class_id: int
    descriptor_id: int
    subgroup_id: int


def enumerate_scgs(
    n_classes: int, n_descriptors: int, n_subgroups: int
) -> list[SCGKey]:
    """All cells in lexicographic (class, descriptor, subgroup) order."""
    return [
        SCGKey(c, d, s)
        for c in range(n_classes)
        for d in range(n_descriptors)
        for s in range(n_subgroups)
    ]


@dataclass(frozen=True)
class CoverageEntry:
    coverage: float
    member_count: int


@dataclass
class CoverageTable:
    """Per-cell coverage; empty cells carry coverage 0 with count 0."""

    entries: dict[SCGKey, CoverageEntry]
    mode: str = "soft"
    tau: float | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def dims(self) -> tuple[int, int, int]:
        t = max(k.class_id for k in self.entries) + 1
        kd = max(k.descriptor_id for k in self.entries) + 1
        s = max(k.subgroup_id for k in self.entries) + 1
        return t, kd, s

    def as_array(self) -> np.ndarray:
        """Coverage as a (n_classes, n_descriptors, n_subgroups) array."""
        t, kd, s = self.dims()
        out = np.zeros((t, kd, s), dtype=np.float64)
        for key, e in self.entries.items():
            out[key.class_id, key.descriptor_id, key.subgroup_id] = e.coverage
        return out

    def counts_array(self) -> np.ndarray:
        t, kd, s = self.dims()
        out = np.zeros((t, kd, s), dtype=np.int64)
        for key, e in self.entries.items():
            out[key.class_id, key.descriptor_id, key.subgroup_id] = e.member_count
        return out


@dataclass(frozen=True)
class ErrorEntry:
    tpr: float
    error: float
    effective_weight: float


@dataclass
class ErrorTable:
    """Per-cell recall statistics; ``error = 1 - tpr``."""

    entries: dict[SCGKey, ErrorEntry]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class CdiResult:
    """Coverage-disparity index plus degeneracy bookkeeping."""

    value: float
    degenerate: bool
    n_groups: int

    def __float__(self) -> float:
        return self.value


def soft_coverage(ds: Dataset, key: SCGKey) -> tuple[float, int]:
    """Mean soft descriptor probability over the cell's members."""
    _check_key(ds, key)
    mask = (ds.labels == key.class_id) & (ds.subgroups == key.subgroup_id)
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0
    return float(ds.descriptors[mask, key.descriptor_id].mean()), count


def hard_coverage(ds: Dataset, key: SCGKey, tau: float) -> tuple[float, int]:
    """Fraction of the cell's members whose probability reaches ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    _check_key(ds, key)
    mask = (ds.labels == key.class_id) & (ds.subgroups == key.subgroup_id)
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0
    return float((ds.descriptors[mask, key.descriptor_id] >= tau).mean()), count


def _check_key(ds: Dataset, key: SCGKey) -> None:
    if not (0 <= key.class_id < ds.dims.n_classes):
        raise ConfigurationError(f"class_id {key.class_id} out of range")
    if not (0 <= key.descriptor_id < ds.dims.n_descriptors):
        raise ConfigurationError(f"descriptor_id {key.descriptor_id} out of range")
    if not (0 <= key.subgroup_id < ds.dims.n_subgroups):
        raise ConfigurationError(f"subgroup_id {key.subgroup_id} out of range")


def coverage_table(
    ds: Dataset, mode: str = "soft", tau: float | None = None
) -> CoverageTable:
    """Coverage for every cell of the dataset's (class, subgroup) grid."""
    if mode not in ("soft", "hard"):
        raise ConfigurationError(f"unknown coverage mode {mode!r}")
    if mode == "hard":
        if tau is None:
            raise ConfigurationError("hard coverage requires tau")
        if not 0.0 <= tau <= 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    dims = ds.dims
    entries: dict[SCGKey, CoverageEntry] = {}
    for c in range(dims.n_classes):
        for s in range(dims.n_subgroups):
            mask = (ds.labels == c) & (ds.subgroups == s)
            count = int(mask.sum())
            block = ds.descriptors[mask]
            for d in range(dims.n_descriptors):
                if count == 0:
                    cov = 0.0
                elif mode == "soft":
                    cov = float(block[:, d].mean())
                else:
                    cov = float((block[:, d] >= tau).mean())
                entries[SCGKey(c, d, s)] = CoverageEntry(cov, count)
    return CoverageTable(entries=entries, mode=mode, tau=tau)


def pearson_with_flag(xs, ys) -> tuple[float, bool]:
    """Pearson correlation plus a degeneracy flag (zero variance on a side)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("pearson expects 1-d inputs")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("pearson needs at least 2 points")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("pearson inputs must be finite")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.dot(xc, xc))
    sy = float(np.dot(yc, yc))
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    r = float(np.dot(xc, yc) / np.sqrt(sx * sy))
    return max(-1.0, min(1.0, r)), False


def pearson(xs, ys) -> float:
    """Pearson correlation; 0.0 when either side has zero variance."""
    return pearson_with_flag(xs, ys)[0]


def eligible_keys(cov: CoverageTable, err: ErrorTable, min_count: int = 1) -> list[SCGKey]:
    """Cells present in both tables with enough members and effective weight."""
    if min_count < 1:
        raise ConfigurationError("min_count must be >= 1")
    keys = [
        k
        for k in cov.entries
        if k in err.entries
        and cov.entries[k].member_count >= min_count
        and err.entries[k].effective_weight >= min_count
    ]
    keys.sort()
    return keys


def cdi(cov: CoverageTable, err: ErrorTable, min_count: int = 1) -> CdiResult:
    """|Pearson| between coverage and miss rate over eligible cells.

    A cell is eligible when present in both tables with at least ``min_count``
    members and effective weight.  Zero variance on either side yields a
    degenerate result with value 0.
    """
    keys = eligible_keys(cov, err, min_count=min_count)
    if len(keys) < 2:
        raise DiagnosticError(
            f"need at least 2 eligible cells for the disparity index, got {len(keys)}"
        )
    c = np.array([cov.entries[k].coverage for k in keys], dtype=np.float64)
    e = np.array([err.entries[k].error for k in keys], dtype=np.float64)
    r, degenerate = pearson_with_flag(c, e)
    if degenerate:
        return CdiResult(value=0.0, degenerate=True, n_groups=len(keys))
    return CdiResult(value=abs(r), degenerate=False, n_groups=len(keys))


@dataclass
class LongTailReport:
    """Coverage viewed as a heatmap plus a ranked tail profile."""

    heatmap: np.ndarray  # (n_descriptors, n_classes * n_subgroups)
    row_labels: list[str]
    col_labels: list[str]
    ranked_coverage: np.ndarray  # descending
    quantiles: dict[str, float]


def coverage_report(cov: CoverageTable) -> LongTailReport:
    t, kd, s = cov.dims()
    arr = cov.as_array()  # (t, kd, s)
    heat = np.zeros((kd, t * s), dtype=np.float64)
    cols = []
    for c in range(t):
        for g in range(s):
            heat[:, c * s + g] = arr[c, :, g]
            cols.append(f"c{c}/s{g}")
    ranked = np.sort(arr.reshape(-1))[::-1].copy()
    quantiles = {
        "min": float(ranked[-1]) if ranked.size else 0.0,
        "median": float(np.median(ranked)) if ranked.size else 0.0,
        "max": float(ranked[0]) if ranked.size else 0.0,
    }
    return LongTailReport(
        heatmap=heat,
        row_labels=[f"d{d + 1}" for d in range(kd)],
        col_labels=cols,
        ranked_coverage=ranked,
        quantiles=quantiles,
    )


def coverage_table_to_csv(cov: CoverageTable) -> str:
    """CSV with header class,descriptor,subgroup,coverage,count."""
    lines = ["class,descriptor,subgroup,coverage,count"]
    for key in sorted(cov.entries):
        e = cov.entries[key]
        lines.append(
            f"{key.class_id},{key.descriptor_id},{key.subgroup_id},"
            f"{e.coverage!r},{e.member_count}"
        )
    return "\n".join(lines) + "\n"


def coverage_table_from_csv(text: str) -> CoverageTable:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "class,descriptor,subgroup,coverage,count":
        raise ConfigurationError("bad coverage CSV header")
    entries: dict[SCGKey, CoverageEntry] = {}
    for ln in lines[1:]:
        c, d, s, cov_val, cnt = ln.split(",")
        entries[SCGKey(int(c), int(d), int(s))] = CoverageEntry(
            float(cov_val), int(cnt)
        )
    return CoverageTable(entries=entries)
