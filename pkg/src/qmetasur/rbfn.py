"""Radial-basis-function-network baseline, one model per task and objective.

Centers come from seeded k-means++ with a fixed Lloyd iteration cap, widths
from the mean distance to the three nearest co-centers, and output weights
from ridge-stabilized normal equations with an un-penalized bias column.
The center count is picked on a seeded 80/20 validation split, then the
winning count is refit on the full data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import OfflineDataset
from .errors import ArityError, ConfigError, DegenerateError
from .tasks import MtmooSuite, TaskSpec

DEFAULT_C_GRID = (5, 10, 20, 40)
RIDGE = 1e-8
KMEANS_ITER_CAP = 100
WIDTH_NEIGHBORS = 3


@dataclass(frozen=True)
class RbfnModel:
    centers: np.ndarray  # (C, d)
    widths: np.ndarray  # (C,)
    weights: np.ndarray  # (C + 1,), bias last

    def __post_init__(self) -> None:
        if len(self.centers) < 1:
            raise DegenerateError("need at least one center")
        if np.any(self.widths <= 0.0):
            raise DegenerateError("non-positive basis width")
        if self.weights.shape != (len(self.centers) + 1,):
            raise ArityError("weight count must be centers + bias")

    @property
    def n_dim(self) -> int:
        return self.centers.shape[1]


def _design(x: np.ndarray, centers: np.ndarray, widths: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    phi = np.exp(-d2 / (2.0 * widths**2))
    return np.concatenate([phi, np.ones((len(x), 1))], axis=1)


def _mean_pairwise(x: np.ndarray) -> float:
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
    n = len(x)
    return float(d.sum() / (n * (n - 1))) if n > 1 else 0.0


def _kmeans_pp(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((c, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, c):
        total = d2.sum()
        if total > 0.0:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        else:
            centers[j] = x[rng.integers(n)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    assign = None
    for _ in range(KMEANS_ITER_CAP):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(c):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = x[dist.min(axis=1).argmax()]
    return centers


def _widths_for(centers: np.ndarray, x: np.ndarray) -> np.ndarray:
    c = len(centers)
    if c == 1:
        sig = np.array([_mean_pairwise(x)])
    else:
        d = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
        np.fill_diagonal(d, np.inf)
        k = min(WIDTH_NEIGHBORS, c - 1)
        sig = np.sort(d, axis=1)[:, :k].mean(axis=1)
    fallback = _mean_pairwise(x)
    sig = np.where(sig > 0.0, sig, fallback)
    if np.any(sig <= 0.0):
        raise DegenerateError("all training points identical")
    return sig


def _solve(phi: np.ndarray, y: np.ndarray) -> np.ndarray:
    a = phi.T @ phi
    reg = np.full(len(a), RIDGE)
    reg[-1] = 0.0  # bias stays un-penalized so a constant target fits exactly
    a[np.diag_indices_from(a)] += reg
    b = phi.T @ y
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, b, rcond=None)[0]


def _fit_one(x: np.ndarray, y: np.ndarray, c: int, rng: np.random.Generator) -> RbfnModel:
    centers = _kmeans_pp(x, c, rng)
    widths = _widths_for(centers, x)
    weights = _solve(_design(x, centers, widths), y)
    return RbfnModel(centers, widths, weights)


def rbfn_fit(
    x: np.ndarray,
    y: np.ndarray,
    c_grid: Sequence[int] = DEFAULT_C_GRID,
    seed: int = 0,
) -> RbfnModel:
    """Fit one scalar-output network, picking the center count by validation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.shape != (len(x),):
        raise ArityError(f"bad shapes {x.shape}, {y.shape}")
    if len(x) < 2:
        raise DegenerateError("need at least two points")
    if np.all(x == x[0]):
        raise DegenerateError("all training points identical")
    if not c_grid or any(int(c) < 1 for c in c_grid):
        raise ConfigError(f"bad center grid {c_grid!r}")

    candidates = sorted({min(int(c), len(x)) for c in c_grid})
    split_rng = np.random.default_rng((seed, 0))
    perm = split_rng.permutation(len(x))
    n_val = max(1, len(x) // 5)
    val, fit = perm[:n_val], perm[n_val:]
    best_c, best_err = candidates[0], np.inf
    for c in candidates:
        c_eff = min(c, len(fit))
        model = _fit_one(x[fit], y[fit], c_eff, np.random.default_rng((seed, 1, c)))
        err = float(((rbfn_predict(model, x[val]) - y[val]) ** 2).mean())
        if err < best_err:
            best_c, best_err = c, err
    return _fit_one(x, y, best_c, np.random.default_rng((seed, 2, best_c)))


def rbfn_predict(model: RbfnModel, x: np.ndarray):
    """Evaluate the network at one point (scalar out) or a batch (vector out)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_dim:
        raise ArityError(f"expected dimension {model.n_dim}, got shape {x.shape}")
    out = _design(x, model.centers, model.widths) @ model.weights
    return float(out[0]) if single else out


class RbfnOracle:
    """Per-task, per-objective networks behind the common oracle interface."""

    def __init__(self, models: Mapping[int, Sequence[RbfnModel]]):
        if not models:
            raise ConfigError("no models")
        self.models = {t: tuple(ms) for t, ms in models.items()}

    def evaluate(self, task: TaskSpec, x: np.ndarray) -> np.ndarray:
        if task.task_id not in self.models:
            raise ConfigError(f"no model for task {task.task_id}")
        per_obj = self.models[task.task_id]
        x = np.asarray(x, dtype=float)
        return np.stack([rbfn_predict(m, x) for m in per_obj], axis=1)


def fit_rbfn_oracle(
    dataset: OfflineDataset,
    suite: MtmooSuite,
    c_grid: Sequence[int] = DEFAULT_C_GRID,
    seed: int = 0,
) -> RbfnOracle:
    """Fit one network per (task, objective) from the offline samples."""
    models: dict[int, list[RbfnModel]] = {}
    for t in dataset.task_ids:
        samples = dataset.by_task(t)
        x = np.array([s.x for s in samples])
        ys = np.array([s.y for s in samples])
        models[t] = [
            rbfn_fit(
                x,
                ys[:, j],
                c_grid,
                seed=int(np.random.SeedSequence((seed, t, j)).generate_state(1)[0]),
            )
            for j in range(ys.shape[1])
        ]
    return RbfnOracle(models)
