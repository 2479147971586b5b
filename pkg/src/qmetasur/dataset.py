"""Offline datasets: Latin hypercube draws, splits, label noise, rewards.

The offline protocol evaluates every task exactly once up front; everything
downstream (training, augmentation, surrogate fitting) reuses those records.
Objective ranges are always the ones observed on the training split and are
the scale for the noise model, the reward and the decode fallback.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ParseError
from .sne import SneConfig
from .tasks import MtmooSuite, TaskSpec, evaluate_batch

NOISE_LEVELS = ("low", "medium", "high")


@dataclass(frozen=True)
class Sample:
    task_id: int
    metadata: str
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class AugmentedSample:
    task_id: int
    metadata: str
    x: np.ndarray
    y: np.ndarray
    y_tilde: np.ndarray
    reward: float
    noise_level: str


@dataclass(frozen=True)
class ObjectiveRanges:
    """Per-task envelope of training objective values.

    delta substitutes 1.0 wherever the observed range collapses; the
    degenerate mask remembers which components those were.
    """

    y_min: np.ndarray
    y_max: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        d = self.y_max - self.y_min
        return np.where(d == 0.0, 1.0, d)

    @property
    def degenerate(self) -> np.ndarray:
        return self.y_max - self.y_min == 0.0

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.y_min + self.y_max)


@dataclass
class OfflineDataset:
    samples: list[Sample]
    ranges: dict[int, ObjectiveRanges] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ranges:
            self.ranges = {
                t: _ranges_of([s.y for s in self.by_task(t)]) for t in self.task_ids
            }

    @property
    def task_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for s in self.samples:
            seen.setdefault(s.task_id, None)
        return list(seen)

    def by_task(self, task_id: int) -> list[Sample]:
        return [s for s in self.samples if s.task_id == task_id]

    def __len__(self) -> int:
        return len(self.samples)


def _ranges_of(ys: Sequence[np.ndarray]) -> ObjectiveRanges:
    arr = np.asarray(ys, dtype=float)
    return ObjectiveRanges(y_min=arr.min(axis=0), y_max=arr.max(axis=0))


def lhs_sample(task: TaskSpec, n: int, seed: int) -> np.ndarray:
    """Latin hypercube draw over the task box.

    One point per stratum and dimension; strata are permuted independently
    per dimension from a stream keyed by (seed, task_id).
    """
    if n < 1:
        raise DomainError(f"need n >= 1, got {n}")
    rng = np.random.default_rng((seed, task.task_id))
    lo, hi = task.bounds
    w = hi - lo
    cols = []
    for _ in range(task.n_dim):
        perm = rng.permutation(n)
        cols.append(lo + (perm + rng.random(n)) * (w / n))
    return np.stack(cols, axis=1)


def build_offline(suite: MtmooSuite, n_per_task: int, seed: int) -> OfflineDataset:
    """Draw and evaluate n_per_task LHS points for every task of the suite."""
    samples: list[Sample] = []
    for task in suite.tasks:
        X = lhs_sample(task, n_per_task, seed)
        Y = evaluate_batch(task, X)
        text = task.metadata_text
        samples.extend(
            Sample(task.task_id, text, X[i].copy(), Y[i].copy()) for i in range(n_per_task)
        )
    return OfflineDataset(samples)


def split(
    ds: OfflineDataset, ratio: tuple[int, int], seed: int
) -> tuple[OfflineDataset, OfflineDataset]:
    """Per-task seeded shuffle into train/test with an a:b count ratio.

    Both returned datasets carry the ranges observed on the *training*
    part; test records never influence any scale used downstream.
    """
    a, b = ratio
    if a < 1 or b < 0:
        raise ConfigError(f"bad split ratio {ratio}")
    train: list[Sample] = []
    test: list[Sample] = []
    for t in ds.task_ids:
        rows = ds.by_task(t)
        m = len(rows)
        n_train = m * a // (a + b)
        if n_train == 0 or (b > 0 and n_train == m):
            raise ConfigError(f"ratio {ratio} leaves an empty part for task {t}")
        perm = np.random.default_rng((seed, t)).permutation(m)
        train.extend(rows[i] for i in perm[:n_train])
        test.extend(rows[i] for i in perm[n_train:])
    train_ds = OfflineDataset(train)
    test_ds = OfflineDataset(test, ranges=dict(train_ds.ranges))
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# reward


@dataclass(frozen=True)
class RewardConfig:
    scale: float = 0.03
    w_exp: float = 0.2
    w_sgn: float = 0.05
    r_min: float = 0.0
    r_max: float = 5.0


def nrmse(pred: np.ndarray, y: np.ndarray, delta: np.ndarray) -> float:
    """Root mean square of the range-normalized residuals."""
    pred, y, delta = (np.asarray(v, dtype=float) for v in (pred, y, delta))
    if pred.shape != y.shape or y.shape != delta.shape:
        raise DomainError("shape mismatch")
    if np.any(delta <= 0.0):
        raise DomainError("delta must be positive")
    return float(np.sqrt(np.mean(((pred - y) / delta) ** 2)))


def _sign_decade(z: float, n_digit: int) -> tuple[int, int | None]:
    """Sign and post-rounding decade of one value; zero has no decade."""
    if z == 0.0:
        return 0, None
    k = int(f"{abs(z):.{n_digit - 1}e}".split("e")[1])
    return (1 if z > 0 else -1), k


def compute_reward(
    pred: np.ndarray,
    y: np.ndarray,
    delta: np.ndarray,
    cfg: RewardConfig,
    sne_cfg: SneConfig,
) -> float:
    """Terminal episode reward.

    Exponential in the normalized error plus bonuses for matching the
    encoded decade and sign of each objective, clipped to [r_min, r_max].
    Decade/sign matching uses the mathematical rounding rule directly, so
    it coincides with token matching whenever both values are encodable.
    """
    e = nrmse(pred, y, delta)
    pairs = [
        (_sign_decade(float(p), sne_cfg.n_digit), _sign_decade(float(t), sne_cfg.n_digit))
        for p, t in zip(np.atleast_1d(pred), np.atleast_1d(y))
    ]
    acc_exp = np.mean([float(a[1] == b[1]) for a, b in pairs])
    acc_sgn = np.mean([float(a[0] == b[0]) for a, b in pairs])
    r = math.exp(-e / cfg.scale) + cfg.w_exp * acc_exp + cfg.w_sgn * acc_sgn
    return float(min(max(r, cfg.r_min), cfg.r_max))


# ---------------------------------------------------------------------------
# label perturbation


def perturb_labels(
    sample: Sample,
    counts: tuple[int, int, int],
    ranges: ObjectiveRanges,
    seed,
    reward_cfg: RewardConfig,
    sne_cfg: SneConfig,
) -> list[AugmentedSample]:
    """Noisy label copies of one sample at three severities.

    low:    additive Gaussian at 1 percent of the objective range
    medium: decade jitter, multiplies magnitude by 10**N(0, 0.15^2)
    high:   uniform redraw over the range extended by 30 percent

    Degenerate (zero-range) objectives keep their value under low/high
    noise. Every result is clipped to the extended interval and snapped
    to zero when it falls below the smallest encodable decade.
    """
    n_low, n_med, n_high = counts
    if min(counts) < 0:
        raise DomainError(f"negative counts {counts}")
    rng = np.random.default_rng(seed)
    y = sample.y
    delta = ranges.delta
    live = ~ranges.degenerate
    lo_ext = ranges.y_min - 0.3 * delta
    hi_ext = ranges.y_max + 0.3 * delta
    tiny = 10.0**sne_cfg.exp_min
    out: list[AugmentedSample] = []

    def emit(y_tilde: np.ndarray, level: str):
        y_tilde = np.clip(y_tilde, lo_ext, hi_ext)
        y_tilde = np.where(np.abs(y_tilde) < tiny, 0.0, y_tilde)
        r = compute_reward(y_tilde, y, delta, reward_cfg, sne_cfg)
        out.append(
            AugmentedSample(
                sample.task_id, sample.metadata, sample.x, y, y_tilde, r, level
            )
        )

    for _ in range(n_low):
        noise = rng.normal(0.0, 0.01 * delta)
        emit(y + np.where(live, noise, 0.0), "low")
    for _ in range(n_med):
        eps = rng.normal(0.0, 0.15, size=y.shape)
        mag = np.where(y == 0.0, 0.0, 10.0 ** (np.log10(np.abs(np.where(y == 0.0, 1.0, y))) + eps))
        emit(np.sign(y) * mag, "medium")
    for _ in range(n_high):
        draw = rng.uniform(lo_ext, hi_ext)
        emit(np.where(live, draw, y), "high")
    return out


def augment_dataset(
    train: OfflineDataset,
    counts: tuple[int, int, int],
    seed: int,
    reward_cfg: RewardConfig,
    sne_cfg: SneConfig,
) -> list[AugmentedSample]:
    """Perturbed copies for every training sample, deterministic order."""
    out: list[AugmentedSample] = []
    index_in_task: dict[int, int] = {}
    for s in train.samples:
        i = index_in_task.get(s.task_id, 0)
        index_in_task[s.task_id] = i + 1
        out.extend(
            perturb_labels(
                s, counts, train.ranges[s.task_id], (seed, s.task_id, i), reward_cfg, sne_cfg
            )
        )
    return out


# ---------------------------------------------------------------------------
# persistence (line-delimited records, schema header first)

_DS_SCHEMA = "qmetasur.dataset.v1"


def save_dataset(ds: OfflineDataset, path, kind: str = "samples") -> None:
    header = {
        "schema": _DS_SCHEMA,
        "kind": kind,
        "ranges": {
            str(t): {"y_min": r.y_min.tolist(), "y_max": r.y_max.tolist()}
            for t, r in ds.ranges.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in ds.samples:
            fh.write(
                json.dumps(
                    {
                        "task_id": s.task_id,
                        "metadata": s.metadata,
                        "x": s.x.tolist(),
                        "y": s.y.tolist(),
                    }
                )
                + "\n"
            )


def load_dataset(path) -> OfflineDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"empty dataset file {path}")
    header = json.loads(lines[0])
    if header.get("schema") != _DS_SCHEMA:
        raise ParseError(f"unexpected dataset schema {header.get('schema')!r}")
    samples = []
    for ln in lines[1:]:
        d = json.loads(ln)
        samples.append(
            Sample(
                d["task_id"],
                d["metadata"],
                np.asarray(d["x"], dtype=float),
                np.asarray(d["y"], dtype=float),
            )
        )
    ranges = {
        int(t): ObjectiveRanges(
            y_min=np.asarray(r["y_min"], dtype=float),
            y_max=np.asarray(r["y_max"], dtype=float),
        )
        for t, r in header["ranges"].items()
    }
    return OfflineDataset(samples, ranges=ranges)


def save_augmented(rows: Sequence[AugmentedSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": _DS_SCHEMA, "kind": "augmented"}) + "\n")
        for s in rows:
            fh.write(
                json.dumps(
                    {
                        "task_id": s.task_id,
                        "metadata": s.metadata,
                        "x": s.x.tolist(),
                        "y": s.y.tolist(),
                        "y_tilde": s.y_tilde.tolist(),
                        "reward": s.reward,
                        "noise_level": s.noise_level,
                    }
                )
                + "\n"
            )


def load_augmented(path) -> list[AugmentedSample]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0]) if lines else {}
    if header.get("schema") != _DS_SCHEMA or header.get("kind") != "augmented":
        raise ParseError(f"not an augmented dataset file: {path}")
    out = []
    for ln in lines[1:]:
        d = json.loads(ln)
        out.append(
            AugmentedSample(
                d["task_id"],
                d["metadata"],
                np.asarray(d["x"], dtype=float),
                np.asarray(d["y"], dtype=float),
                np.asarray(d["y_tilde"], dtype=float),
                d["reward"],
                d["noise_level"],
            )
        )
    return out
