"""Front-quality and regression metrics, plus the comparison statistics.

All metrics are plain functions over arrays. The Wilcoxon signed-rank test
is the normal-approximation variant with average ranks, a tie correction
and a continuity correction; zero differences are dropped, and below six
effective pairs the verdict degrades to "≈" with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import DomainError


def igd(reference: np.ndarray, approx: np.ndarray) -> float:
    """Mean distance from each reference point to its nearest approx point.

    Lower is better; zero iff every reference point is attained.
    """
    ref = np.asarray(reference, dtype=float)
    app = np.asarray(approx, dtype=float)
    if ref.ndim != 2 or app.ndim != 2 or ref.shape[1] != app.shape[1]:
        raise DomainError(f"bad shapes {ref.shape} vs {app.shape}")
    if len(ref) == 0 or len(app) == 0:
        raise DomainError("empty point set")
    d2 = ((ref[:, None, :] - app[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


def smae(
    preds: Sequence[float],
    trues: Sequence[float],
    keys: Sequence[Hashable],
) -> tuple[dict[Hashable, float], float]:
    """Range-scaled mean absolute error per group.

    The scale of a group is the max-min spread of its *true* values, so the
    metric is comparable across objectives of different magnitude. A group
    with zero spread is skipped with a warning. Returns the per-group dict
    and the mean over the surviving groups.
    """
    preds = np.asarray(preds, dtype=float)
    trues = np.asarray(trues, dtype=float)
    if preds.shape != trues.shape or preds.ndim != 1 or len(preds) != len(keys):
        raise DomainError("length mismatch")
    order: list[Hashable] = []
    seen: set[Hashable] = set()
    for k in keys:
        if k not in seen:
            seen.add(k)
            order.append(k)
    out: dict[Hashable, float] = {}
    for k in order:
        m = np.array([kk == k for kk in keys])
        spread = trues[m].max() - trues[m].min()
        if spread == 0.0:
            warnings.warn(f"zero true-value spread for group {k!r}, skipped")
            continue
        out[k] = float(np.abs(preds[m] - trues[m]).mean() / spread)
    if not out:
        raise DomainError("every group had zero spread")
    return out, float(np.mean(list(out.values())))


def r2(preds: Sequence[float], trues: Sequence[float]) -> float:
    """Coefficient of determination; undefined for constant truth."""
    p = np.asarray(preds, dtype=float)
    t = np.asarray(trues, dtype=float)
    if p.shape != t.shape or p.ndim != 1 or len(p) < 2:
        raise DomainError("need two equal-length 1-d arrays")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DomainError("constant true values, undefined")
    return float(1.0 - float(((t - p) ** 2).sum()) / ss_tot)


def _pooled_stats(scores: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    mats = [np.asarray(v, dtype=float) for v in scores.values()]
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1 or any(m.ndim != 2 for m in mats):
        raise DomainError("score matrices must be (runs, tasks) with equal tasks")
    pooled = np.concatenate(mats, axis=0)
    return pooled.mean(axis=0), pooled.std(axis=0)


def mss_per_run(scores: Mapping[str, np.ndarray], algo: str) -> np.ndarray:
    """Standardized score of each run of one algorithm, averaged over tasks.

    scores maps algorithm name to a (runs, tasks) matrix of a lower-is-better
    indicator. Per-task mean and population std pool every algorithm and run;
    a task with zero pooled spread contributes zero.
    """
    if algo not in scores:
        raise DomainError(f"unknown algorithm {algo!r}")
    mu, sd = _pooled_stats(scores)
    mat = np.asarray(scores[algo], dtype=float)
    z = np.where(sd == 0.0, 0.0, (mat - mu) / np.where(sd == 0.0, 1.0, sd))
    return z.mean(axis=1)


def mss(scores: Mapping[str, np.ndarray], algo: str) -> float:
    """Mean standardized score over all runs and tasks. Lower is better."""
    return float(mss_per_run(scores, algo).mean())


@dataclass(frozen=True)
class MetricTables:
    """Per-task aggregates behind the report tables.

    indicator maps algorithm name to a (runs, tasks) matrix (IGD in the
    optimizer reports). mu/sigma are the pooled per-task statistics those
    matrices standardize against. ranges and test_indices carry the
    per-group scale and membership used by the regression tables; they stay
    empty for optimizer-only reports.
    """

    task_ids: tuple[int, ...]
    indicator: Mapping[str, np.ndarray]
    mu: np.ndarray
    sigma: np.ndarray
    ranges: Mapping[Hashable, float] = field(default_factory=dict)
    test_indices: Mapping[Hashable, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise DomainError("need at least one task")
        if self.mu.shape != (self.k,) or self.sigma.shape != (self.k,):
            raise DomainError("pooled stats must be one value per task")
        if np.any(self.sigma < 0.0):
            raise DomainError("negative spread")
        for m in self.indicator.values():
            if np.asarray(m).shape[1:] != (self.k,):
                raise DomainError("indicator width disagrees with task count")

    @property
    def k(self) -> int:
        return len(self.task_ids)

    @classmethod
    def from_scores(
        cls, task_ids: Sequence[int], scores: Mapping[str, np.ndarray]
    ) -> "MetricTables":
        mu, sd = _pooled_stats(scores)
        return cls(tuple(task_ids), dict(scores), mu, sd)

    def mss(self, algo: str) -> float:
        return mss(self.indicator, algo)

    def mss_per_run(self, algo: str) -> np.ndarray:
        return mss_per_run(self.indicator, algo)


@dataclass(frozen=True)
class WilcoxonResult:
    """verdict "+": first sample significantly smaller (better, minimizing);
    "-": significantly larger; "≈": no call."""

    verdict: str
    p_value: float
    n_effective: int
    small_sample: bool = False


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], alpha: float = 0.05
) -> WilcoxonResult:
    """Two-sided paired signed-rank test on a - b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("need paired 1-d samples")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha {alpha} outside (0, 1)")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n < 6:
        warnings.warn(f"only {n} nonzero differences, no verdict possible")
        return WilcoxonResult("≈", float("nan"), n, small_sample=True)
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    sorted_abs = absd[order]
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j < n and sorted_abs[j] == sorted_abs[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average of 1-based ranks i+1..j
        i = j
    w_plus = float(ranks[d > 0].sum())
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(absd, return_counts=True)
    var -= float((counts**3 - counts).sum()) / 48.0
    if var <= 0.0:
        warnings.warn("no spread left after tie correction, no verdict possible")
        return WilcoxonResult("≈", float("nan"), n, small_sample=True)
    diff = w_plus - mu
    if diff == 0.0:
        return WilcoxonResult("≈", 1.0, n)
    z = (diff - 0.5 * math.copysign(1.0, diff)) / math.sqrt(var)
    p = min(2.0 * _norm_sf(abs(z)), 1.0)
    if p >= alpha:
        return WilcoxonResult("≈", p, n)
    return WilcoxonResult("+" if diff < 0.0 else "-", p, n)


# ---------------------------------------------------------------------------
# delimiter-separated tables with a one-line schema header


def format_float(x: float) -> str:
    """Shortest decimal that round-trips the exact double."""
    return repr(float(x))


def write_table(path, name: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [f"# qmetasur.{name}.v1", ",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise DomainError(f"row width {len(row)} != {len(columns)}")
        cells = [format_float(c) if isinstance(c, float) else str(c) for c in row]
        for cell in cells:
            if "," in cell or "\n" in cell:
                raise DomainError(f"cell {cell!r} breaks the delimiter")
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_table(path, name: str | None = None) -> tuple[str, list[str], list[list[str]]]:
    """Returns (schema name, column names, raw string rows)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2 or not lines[0].startswith("# qmetasur."):
        raise DomainError(f"missing schema header in {path}")
    schema = lines[0][2:]
    if name is not None and schema != f"qmetasur.{name}.v1":
        raise DomainError(f"expected qmetasur.{name}.v1, found {schema} in {path}")
    cols = lines[1].split(",")
    rows = [ln.split(",") for ln in lines[2:] if ln]
    for row in rows:
        if len(row) != len(cols):
            raise DomainError(f"ragged row in {path}")
    return schema, cols, rows
