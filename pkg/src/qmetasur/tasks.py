"""Synthetic multi-task benchmark suites and the sensor coverage problem.

Every benchmark task is a two-objective problem over a box. The first
decision variable drives the first objective directly; the remaining
variables pass through a task-specific shift and rotation into one of six
base landscapes that shape the distance function g:

    f1 = (x1 - lo) / (hi - lo)
    z  = R (x[2:] - shift)
    g  = 1 + base(z)
    f2 = g (1 - sqrt(f1 / g))

All base landscapes are non-negative with base(0) = 0, so g >= 1 and the
analytic Pareto front is f2 = 1 - sqrt(f1) regardless of family, reached
when the tail sits exactly on the shift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .sne import Metadata, render_metadata


def _sphere(z: np.ndarray) -> np.ndarray:
    return (z**2).sum(axis=-1)


def _mean_scale(z: np.ndarray) -> np.ndarray:
    return np.abs(z).mean(axis=-1)


def _rosenbrock(z: np.ndarray) -> np.ndarray:
    # shifted so the minimizer sits at z = 0 like the other families
    zp = z + 1.0
    if zp.shape[-1] < 2:
        return np.zeros(zp.shape[:-1])
    a, b = zp[..., :-1], zp[..., 1:]
    return (100.0 * (b - a**2) ** 2 + (a - 1.0) ** 2).sum(axis=-1)


def _rastrigin(z: np.ndarray) -> np.ndarray:
    return (z**2 - 10.0 * np.cos(2.0 * np.pi * z) + 10.0).sum(axis=-1)


def _ackley(z: np.ndarray) -> np.ndarray:
    d = z.shape[-1]
    q = np.sqrt((z**2).sum(axis=-1) / d)
    c = np.cos(2.0 * np.pi * z).sum(axis=-1) / d
    return 20.0 + np.e - 20.0 * np.exp(-0.2 * q) - np.exp(c)


def _griewank(z: np.ndarray) -> np.ndarray:
    i = np.arange(1, z.shape[-1] + 1)
    return 1.0 + (z**2).sum(axis=-1) / 4000.0 - np.cos(z / np.sqrt(i)).prod(axis=-1)


FAMILIES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "Sphere": _sphere,
    "MeanScale": _mean_scale,
    "Rosenbrock": _rosenbrock,
    "Rastrigin": _rastrigin,
    "Ackley": _ackley,
    "Griewank": _griewank,
}


@dataclass(frozen=True)
class TaskSpec:
    """One benchmark task: family, box, shift and rotation of the tail."""

    task_id: int
    family: str
    n_dim: int
    bounds: tuple[float, float]
    shift: np.ndarray
    rotation: np.ndarray
    metadata: Metadata

    @property
    def n_obj(self) -> int:
        return 2

    @property
    def metadata_text(self) -> str:
        return render_metadata(self.metadata)


@dataclass(frozen=True)
class MtmooSuite:
    name: str
    seed: int
    tasks: tuple[TaskSpec, ...]

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"no task {task_id} in suite {self.name!r}")


def _haar_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    """Seeded orthogonal matrix with determinant +1."""
    if d == 1:
        return np.ones((1, 1))
    a = rng.normal(size=(d, d))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q = q.copy()
        q[:, 0] *= -1.0
    return q


def _task_metadata(family: str, task_id: int, n_dim: int) -> Metadata:
    return Metadata(
        f_name=family,
        f_id=f"F{task_id}",
        key_features=(f"instance={family}",),
        dim=n_dim,
    )


def make_suite(
    family: str,
    n_tasks: int,
    n_dim: int,
    seed: int,
    bounds: tuple[float, float] = (0.0, 1.0),
    name: str | None = None,
) -> MtmooSuite:
    """Build n_tasks instances of one family, each with its own shift/rotation.

    Shifts are drawn from the central half of the box so the tail optimum
    is attainable strictly inside bounds.
    """
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}, have {sorted(FAMILIES)}")
    if n_dim < 2:
        raise ConfigError(f"n_dim must be >= 2, got {n_dim}")
    if n_tasks < 1:
        raise ConfigError(f"n_tasks must be >= 1, got {n_tasks}")
    lo, hi = map(float, bounds)
    if not lo < hi:
        raise ConfigError(f"empty bounds ({lo}, {hi})")
    w = hi - lo
    tasks = []
    for t in range(1, n_tasks + 1):
        rng = np.random.default_rng((seed, t))
        shift = rng.uniform(lo + 0.25 * w, hi - 0.25 * w, size=n_dim - 1)
        rot = _haar_rotation(rng, n_dim - 1)
        tasks.append(
            TaskSpec(
                task_id=t,
                family=family,
                n_dim=n_dim,
                bounds=(lo, hi),
                shift=shift,
                rotation=rot,
                metadata=_task_metadata(family, t, n_dim),
            )
        )
    return MtmooSuite(name=name or family.lower(), seed=seed, tasks=tuple(tasks))


def merge_suites(name: str, suites: Sequence[MtmooSuite]) -> MtmooSuite:
    """Concatenate suites into one, renumbering task ids from 1."""
    tasks = []
    tid = 1
    for s in suites:
        for t in s.tasks:
            tasks.append(
                TaskSpec(
                    task_id=tid,
                    family=t.family,
                    n_dim=t.n_dim,
                    bounds=t.bounds,
                    shift=t.shift,
                    rotation=t.rotation,
                    metadata=_task_metadata(t.family, tid, t.n_dim),
                )
            )
            tid += 1
    return MtmooSuite(name=name, seed=suites[0].seed if suites else 0, tasks=tuple(tasks))


def subset_suite(suite: MtmooSuite, task_ids: Sequence[int], name: str | None = None) -> MtmooSuite:
    """Suite restricted to the given task ids, keeping ids and metadata."""
    tasks = tuple(suite.task(t) for t in task_ids)
    return MtmooSuite(name=name or f"{suite.name}-subset", seed=suite.seed, tasks=tasks)


def evaluate_batch(task: TaskSpec, x: np.ndarray) -> np.ndarray:
    """Objectives for a batch of decision vectors, shape (n, 2)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != task.n_dim:
        raise DomainError(f"expected shape (n, {task.n_dim}), got {x.shape}")
    lo, hi = task.bounds
    if np.any(x < lo) or np.any(x > hi):
        raise DomainError("decision vector outside task bounds")
    f1 = (x[:, 0] - lo) / (hi - lo)
    z = (x[:, 1:] - task.shift) @ task.rotation.T
    g = 1.0 + FAMILIES[task.family](z)
    f2 = g * (1.0 - np.sqrt(f1 / g))
    return np.stack([f1, f2], axis=1)


def evaluate(task: TaskSpec, x: np.ndarray) -> np.ndarray:
    """Objectives for a single decision vector, shape (2,)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError(f"expected a flat vector, got shape {x.shape}")
    return evaluate_batch(task, x[None, :])[0]


def true_pf(task: TaskSpec, n_points: int) -> np.ndarray:
    """Analytic Pareto front sampled on a uniform f1 grid."""
    if n_points < 2:
        raise DomainError(f"need at least 2 points, got {n_points}")
    f1 = np.linspace(0.0, 1.0, n_points)
    return np.stack([f1, 1.0 - np.sqrt(f1)], axis=1)


# ---------------------------------------------------------------------------
# suite serialization

_SUITE_SCHEMA = "qmetasur.suite.v1"


def save_suite(suite: MtmooSuite, path) -> None:
    doc = {
        "schema": _SUITE_SCHEMA,
        "name": suite.name,
        "seed": suite.seed,
        "tasks": [
            {
                "task_id": t.task_id,
                "family": t.family,
                "n_dim": t.n_dim,
                "bounds": list(t.bounds),
                "shift": t.shift.tolist(),
                "rotation": t.rotation.tolist(),
                "metadata": {
                    "f_name": t.metadata.f_name,
                    "f_id": t.metadata.f_id,
                    "key_features": list(t.metadata.key_features),
                    "dim": t.metadata.dim,
                },
            }
            for t in suite.tasks
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_suite(path) -> MtmooSuite:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != _SUITE_SCHEMA:
        raise ConfigError(f"unexpected suite schema {doc.get('schema')!r}")
    tasks = tuple(
        TaskSpec(
            task_id=d["task_id"],
            family=d["family"],
            n_dim=d["n_dim"],
            bounds=tuple(d["bounds"]),
            shift=np.asarray(d["shift"], dtype=float),
            rotation=np.asarray(d["rotation"], dtype=float),
            metadata=Metadata(
                f_name=d["metadata"]["f_name"],
                f_id=d["metadata"]["f_id"],
                key_features=tuple(d["metadata"]["key_features"]),
                dim=d["metadata"]["dim"],
            ),
        )
        for d in doc["tasks"]
    )
    return MtmooSuite(name=doc["name"], seed=doc["seed"], tasks=tasks)


# ---------------------------------------------------------------------------
# sensor coverage


@dataclass(frozen=True)
class SensorCoverage:
    """Disk coverage of the square [-1, 1]^2 on a midpoint grid.

    Decision layout is (u, v, r) per sensor: center coordinates in the
    open square and radius in (0.1, 0.25). The first objective is the
    uncovered area fraction measured on a grid_n x grid_n midpoint grid;
    the second is the total sensing cost sum(1 + 10 r^2). Both decrease
    with better placement / smaller radii respectively, so they conflict.

    The search domain is the open box; evaluation accepts its closure so
    boundary configurations (for example the maximal r = 0.25 disk)
    remain measurable.
    """

    n_sensors: int
    grid_n: int = 400
    r_min: float = 0.1
    r_max: float = 0.25

    @property
    def n_dim(self) -> int:
        return 3 * self.n_sensors

    @property
    def n_obj(self) -> int:
        return 2

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_dim,):
            raise DomainError(f"expected shape ({self.n_dim},), got {x.shape}")
        s = x.reshape(self.n_sensors, 3)
        if np.any(np.abs(s[:, :2]) > 1.0):
            raise DomainError("sensor center outside the square")
        if np.any(s[:, 2] < self.r_min) or np.any(s[:, 2] > self.r_max):
            raise DomainError(
                f"radius outside [{self.r_min}, {self.r_max}]"
            )
        return s

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        s = self._check(x)
        g = self.grid_n
        c = -1.0 + (np.arange(g) + 0.5) * (2.0 / g)
        cx, cy = np.meshgrid(c, c, indexing="ij")
        covered = np.zeros((g, g), dtype=bool)
        for u, v, r in s:
            covered |= (cx - u) ** 2 + (cy - v) ** 2 <= r * r
        f1 = 1.0 - covered.mean()
        f2 = float((1.0 + 10.0 * s[:, 2] ** 2).sum())
        return np.array([f1, f2])
