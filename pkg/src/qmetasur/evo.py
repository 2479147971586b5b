"""Multi-task multi-objective evolutionary backbone with adaptive transfer.

Each task evolves its own subpopulation by DE/rand/1 with binomial
crossover under NSGA-II selection. Per generation a task either
self-evolves or, with probability im, imports knowledge: a source task is
picked by a reward-weighted similarity roulette over decision archives,
archive donors cross into the current population, and the source's reward
rises or falls with the outcome. Fitness comes from any oracle exposing
evaluate(task, x) -> (n, k); an oracle may additionally publish a boolean
last_flags array marking untrusted rows of its latest batch, which is
carried into the surviving individuals.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError
from .tasks import MtmooSuite, TaskSpec, evaluate_batch

_VAR_FLOOR = 1e-12
_REW_FLOOR = 1e-300


@dataclass
class Individual:
    dec: np.ndarray
    obj: np.ndarray | None = None
    rank: int | None = None
    crowding: float = 0.0
    flagged: bool = False


@dataclass(frozen=True)
class MaTdeParams:
    im: float = 0.3  # migration (transfer) probability
    a_up: float = 0.2  # archive update probability
    shk: float = 0.8  # reward shrink factor
    pop_size: int = 20
    a_cap: int = 300

    def __post_init__(self) -> None:
        if not 0.0 <= self.im <= 1.0 or not 0.0 <= self.a_up <= 1.0:
            raise ConfigError("probabilities must sit in [0, 1]")
        if not 0.0 < self.shk < 1.0:
            raise ConfigError("shrink factor must sit in (0, 1)")
        if self.pop_size < 4:
            raise ConfigError("population size must be >= 4 for DE")
        if self.a_cap < 1:
            raise ConfigError("archive capacity must be >= 1")


@dataclass
class TransferState:
    """Reward/score matrices and per-task decision archives."""

    task_ids: tuple[int, ...]
    rew: np.ndarray
    pos: np.ndarray
    archives: dict[int, list[np.ndarray]]
    a_cap: int

    @classmethod
    def fresh(cls, task_ids: Sequence[int], a_cap: int) -> "TransferState":
        t = len(task_ids)
        return cls(tuple(task_ids), np.ones((t, t)), np.zeros((t, t)),
                   {tid: [] for tid in task_ids}, a_cap)


# ---------------------------------------------------------------------------
# dominance machinery


def _dominates_matrix(objs: np.ndarray) -> np.ndarray:
    a = objs[:, None, :]
    b = objs[None, :, :]
    return (a <= b).all(axis=2) & (a < b).any(axis=2)


def fast_nondominated_sort(objs: np.ndarray) -> list[np.ndarray]:
    """Partition row indices into Pareto fronts, best first."""
    objs = np.asarray(objs, dtype=float)
    if objs.ndim != 2 or len(objs) == 0:
        raise ConfigError(f"need a non-empty (n, k) matrix, got {objs.shape}")
    dom = _dominates_matrix(objs)
    counts = dom.sum(axis=0)  # how many rows dominate each column
    fronts: list[np.ndarray] = []
    remaining = np.ones(len(objs), dtype=bool)
    while remaining.any():
        current = remaining & (counts == 0)
        if not current.any():  # cannot happen with a strict partial order
            current = remaining.copy()
        idx = np.flatnonzero(current)
        fronts.append(idx)
        remaining[idx] = False
        counts = counts - dom[idx].sum(axis=0)
    return fronts


def crowding_distance(objs: np.ndarray) -> np.ndarray:
    """Crowding of each row within one front; extremes are infinite."""
    objs = np.asarray(objs, dtype=float)
    n = len(objs)
    if n == 0:
        raise ConfigError("empty front")
    if n <= 2:
        return np.full(n, np.inf)
    dist = np.zeros(n)
    for j in range(objs.shape[1]):
        order = np.argsort(objs[:, j], kind="stable")
        v = objs[order, j]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = v[-1] - v[0]
        if span == 0.0:
            continue
        dist[order[1:-1]] += (v[2:] - v[:-2]) / span
    return dist


def nsga2_select(objs: np.ndarray, n: int) -> list[int]:
    """Indices of the n survivors: whole fronts first, the last one
    truncated by descending crowding with ties to the lowest index.
    When n covers everything, all indices return in (front, index) order."""
    objs = np.asarray(objs, dtype=float)
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    selected: list[int] = []
    for front in fast_nondominated_sort(objs):
        if len(selected) + len(front) <= n:
            selected.extend(int(i) for i in np.sort(front))
            if len(selected) == n:
                break
            continue
        need = n - len(selected)
        cd = crowding_distance(objs[front])
        order = sorted(range(len(front)), key=lambda i: (-cd[i], front[i]))
        selected.extend(int(front[i]) for i in order[:need])
        break
    return selected


# ---------------------------------------------------------------------------
# variation


def de_mutant(base: np.ndarray, d1: np.ndarray, d2: np.ndarray, f: float) -> np.ndarray:
    return base + f * (d1 - d2)


def binomial_crossover(
    x: np.ndarray, v: np.ndarray, cr: float, rng: np.random.Generator
) -> np.ndarray:
    """Mix v into x coordinate-wise with rate cr; one coordinate is forced."""
    mask = rng.random(len(x)) < cr
    mask[rng.integers(len(x))] = True
    return np.where(mask, v, x)


def de_generate(
    decs: np.ndarray, bounds: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """One DE/rand/1 trial per row, amplitude and rate drawn per row."""
    decs = np.asarray(decs, dtype=float)
    n = len(decs)
    if n < 4:
        raise DegenerateError(f"DE needs at least 4 individuals, got {n}")
    lo, hi = bounds
    out = np.empty_like(decs)
    indices = np.arange(n)
    for i in range(n):
        f = rng.uniform(0.1, 1.0)
        cr = rng.uniform(0.1, 0.9)
        others = np.delete(indices, i)
        r1, r2, r3 = rng.choice(others, size=3, replace=False)
        v = de_mutant(decs[r1], decs[r2], decs[r3], f)
        out[i] = binomial_crossover(decs[i], v, cr, rng)
    return np.clip(out, lo, hi)


def transfer_crossover(
    x: np.ndarray,
    donor: np.ndarray,
    bounds: tuple[float, float],
    rng: np.random.Generator,
    cr: float | None = None,
) -> np.ndarray:
    """Cross a foreign donor into x; dimension gaps resample uniformly."""
    x = np.asarray(x, dtype=float)
    donor = np.asarray(donor, dtype=float)
    lo, hi = bounds
    if len(donor) > len(x):
        donor = donor[: len(x)]
    elif len(donor) < len(x):
        pad = rng.uniform(lo, hi, size=len(x) - len(donor))
        donor = np.concatenate([donor, pad])
    if cr is None:
        cr = rng.uniform(0.1, 0.9)
    return np.clip(binomial_crossover(x, donor, cr, rng), lo, hi)


# ---------------------------------------------------------------------------
# adaptive source selection


def _diag_gauss_kl(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    var_a = np.maximum(a.var(axis=0), _VAR_FLOOR)
    var_b = np.maximum(b.var(axis=0), _VAR_FLOOR)
    per_dim = 0.5 * (np.log(var_b / var_a) + (var_a + (mu_a - mu_b) ** 2) / var_b - 1.0)
    return float(per_dim.sum())


def adaptive_choose(
    t: int,
    archives: Mapping[int, Sequence[np.ndarray]],
    rew: np.ndarray,
    pos: np.ndarray,
    rng: np.random.Generator,
) -> int:
    """Roulette over reward x archive-similarity; writes scores into pos.

    Candidates with empty archives are excluded; with no usable candidate
    (or an empty target archive) the choice degrades to uniform.
    """
    ids = sorted(archives)
    if t not in archives or len(ids) < 2:
        raise ConfigError("need the target task plus at least one other")
    others = [k for k in ids if k != t]
    ti = ids.index(t)
    target = np.asarray(archives[t], dtype=float)
    cands = [k for k in others if len(archives[k]) > 0]
    if len(target) == 0 or not cands:
        return int(others[rng.integers(len(others))])
    scores = np.empty(len(cands))
    for n, k in enumerate(cands):
        other = np.asarray(archives[k], dtype=float)
        d = min(target.shape[1], other.shape[1])
        sim = 1.0 / (1.0 + _diag_gauss_kl(target[:, :d], other[:, :d]))
        scores[n] = rew[ti, ids.index(k)] * sim
        pos[ti, ids.index(k)] = scores[n]
    total = scores.sum()
    if not total > 0.0:
        return int(cands[rng.integers(len(cands))])
    return int(cands[rng.choice(len(cands), p=scores / total)])


# ---------------------------------------------------------------------------
# the run loop


class TrueOracle:
    """Exact task evaluation with an audit counter per task."""

    def __init__(self) -> None:
        self.counts: dict[int, int] = {}

    def evaluate(self, task: TaskSpec, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self.counts[task.task_id] = self.counts.get(task.task_id, 0) + len(x)
        return evaluate_batch(task, x)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class TraceRecord:
    generation: int
    task_id: int
    mode: str  # "self" or "transfer"
    source: int | None
    rew_hash: str


@dataclass(frozen=True)
class MaTdeResult:
    suite_name: str
    params: MaTdeParams
    seed: int
    pareto_dec: dict[int, np.ndarray]
    pareto_obj: dict[int, np.ndarray]
    pareto_flagged: dict[int, np.ndarray]
    evals: dict[int, int]
    trace: tuple[TraceRecord, ...]
    rew: np.ndarray
    archive_sizes: dict[int, int]

    @property
    def task_ids(self) -> list[int]:
        return list(self.pareto_dec)

    def pareto_individuals(self, task_id: int) -> list[Individual]:
        obj = self.pareto_obj[task_id]
        cd = crowding_distance(obj)
        return [
            Individual(dec=d, obj=o, rank=0, crowding=float(c), flagged=bool(f))
            for d, o, c, f in zip(
                self.pareto_dec[task_id], obj, cd, self.pareto_flagged[task_id]
            )
        ]


def _rew_hash(rew: np.ndarray) -> str:
    return hashlib.sha256(rew.tobytes()).hexdigest()[:16]


def _improved(prev_front: np.ndarray, off: np.ndarray) -> bool:
    """Offspring dominate some previous member, or beat the whole previous
    front on at least one objective."""
    lt = off[:, None, :] < prev_front[None, :, :]
    le = off[:, None, :] <= prev_front[None, :, :]
    if (le.all(axis=2) & lt.any(axis=2)).any():
        return True
    return bool(lt.all(axis=1).any())


def run_mo_matde(
    suite: MtmooSuite,
    oracle,
    params: MaTdeParams,
    *,
    max_evals_per_task: int | None = None,
    n_generations: int | None = None,
    seed: int = 0,
) -> MaTdeResult:
    """Evolve every task of the suite under a shared transfer state.

    Exactly one budget applies: an oracle-call cap per task (each
    generation costs pop_size calls, so the cap is honored exactly when it
    is a multiple of pop_size), or a fixed generation count.
    """
    if (max_evals_per_task is None) == (n_generations is None):
        raise ConfigError("set exactly one of max_evals_per_task, n_generations")
    tasks = suite.tasks
    if not tasks:
        raise ConfigError("empty suite")
    ids = [t.task_id for t in tasks]
    state = TransferState.fresh(ids, params.a_cap)
    rngs = {tid: np.random.default_rng((seed, tid)) for tid in ids}
    n = params.pop_size

    evals = {tid: 0 for tid in ids}

    def ask(task: TaskSpec, dec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        obj = np.asarray(oracle.evaluate(task, dec), dtype=float)
        if obj.shape != (len(dec), task.n_obj):
            raise ConfigError(f"oracle returned shape {obj.shape}")
        flags = getattr(oracle, "last_flags", None)
        if flags is None:
            flags = np.zeros(len(dec), dtype=bool)
        evals[task.task_id] += len(dec)
        return obj, np.asarray(flags, dtype=bool).copy()

    pops: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for task in tasks:
        lo, hi = task.bounds
        dec = rngs[task.task_id].uniform(lo, hi, size=(n, task.n_dim))
        obj, fl = ask(task, dec)
        pops[task.task_id] = (dec, obj, fl)
        state.archives[task.task_id] = [row.copy() for row in dec]

    if max_evals_per_task is not None:
        gens = max(0, (max_evals_per_task - n) // n)
    else:
        gens = n_generations

    trace: list[TraceRecord] = []
    for gen in range(1, gens + 1):
        for ti, task in enumerate(tasks):
            tid = task.task_id
            rng = rngs[tid]
            dec, obj, fl = pops[tid]
            mode, src = "self", None
            off = None
            if len(tasks) >= 2 and rng.random() < params.im:
                chosen = adaptive_choose(tid, state.archives, state.rew, state.pos, rng)
                arc = state.archives[chosen]
                if arc:
                    mode, src = "transfer", chosen
                    donors = [arc[rng.integers(len(arc))] for _ in range(n)]
                    off = np.stack(
                        [
                            transfer_crossover(dec[i], donors[i], task.bounds, rng)
                            for i in range(n)
                        ]
                    )
            if off is None:
                off = de_generate(dec, task.bounds, rng)
            off_obj, off_fl = ask(task, off)
            if mode == "transfer":
                si = ids.index(src)
                prev_front = obj[fast_nondominated_sort(obj)[0]]
                if _improved(prev_front, off_obj):
                    state.rew[ti, si] /= params.shk
                else:
                    state.rew[ti, si] *= params.shk
                state.rew[ti, si] = max(state.rew[ti, si], _REW_FLOOR)
            union_dec = np.concatenate([dec, off])
            union_obj = np.concatenate([obj, off_obj])
            union_fl = np.concatenate([fl, off_fl])
            sel = nsga2_select(union_obj, n)
            pops[tid] = (union_dec[sel], union_obj[sel], union_fl[sel])
            for row in pops[tid][0]:
                if rng.random() < params.a_up:
                    arc = state.archives[tid]
                    if len(arc) >= params.a_cap:
                        arc[rng.integers(len(arc))] = row.copy()
                    else:
                        arc.append(row.copy())
            trace.append(TraceRecord(gen, tid, mode, src, _rew_hash(state.rew)))

    pareto_dec, pareto_obj, pareto_fl = {}, {}, {}
    for task in tasks:
        dec, obj, fl = pops[task.task_id]
        front = fast_nondominated_sort(obj)[0]
        pareto_dec[task.task_id] = dec[front]
        pareto_obj[task.task_id] = obj[front]
        pareto_fl[task.task_id] = fl[front]
    return MaTdeResult(
        suite_name=suite.name,
        params=params,
        seed=seed,
        pareto_dec=pareto_dec,
        pareto_obj=pareto_obj,
        pareto_flagged=pareto_fl,
        evals=evals,
        trace=tuple(trace),
        rew=state.rew.copy(),
        archive_sizes={tid: len(state.archives[tid]) for tid in ids},
    )
