import numpy as np
import pytest

from qmetasur.errors import ConfigError, DegenerateError
from qmetasur.evo import (
    MaTdeParams,
    TrueOracle,
    adaptive_choose,
    binomial_crossover,
    crowding_distance,
    de_generate,
    de_mutant,
    fast_nondominated_sort,
    nsga2_select,
    run_mo_matde,
    transfer_crossover,
)
from qmetasur.metrics import igd
from qmetasur.tasks import make_suite, true_pf


def _dominates(a, b):
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def _brute_fronts(objs):
    """Independent reference: peel nondominated layers by pairwise scans."""
    remaining = list(range(len(objs)))
    fronts = []
    while remaining:
        layer = [
            i
            for i in remaining
            if not any(_dominates(objs[j], objs[i]) for j in remaining if j != i)
        ]
        fronts.append(sorted(layer))
        remaining = [i for i in remaining if i not in layer]
    return fronts


# ---------------------------------------------------------------------------
# sorting and selection


def test_sort_single_and_identical():
    assert [f.tolist() for f in fast_nondominated_sort([[1.0, 2.0]])] == [[0]]
    same = np.ones((5, 2))
    fronts = fast_nondominated_sort(same)
    assert len(fronts) == 1 and sorted(fronts[0].tolist()) == [0, 1, 2, 3, 4]


def test_sort_hand_example():
    objs = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    fronts = [sorted(f.tolist()) for f in fast_nondominated_sort(objs)]
    assert fronts == [[0, 1], [2]]


def test_sort_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(1, 65))
        k = int(rng.choice([2, 3]))
        objs = rng.integers(0, 6, size=(n, k)).astype(float)  # ties likely
        fast = [sorted(f.tolist()) for f in fast_nondominated_sort(objs)]
        assert fast == _brute_fronts(objs), trial


def test_crowding_small_fronts_infinite():
    assert np.all(np.isinf(crowding_distance(np.array([[1.0, 2.0]]))))
    assert np.all(np.isinf(crowding_distance(np.array([[1.0, 2.0], [2.0, 1.0]]))))


def test_crowding_collinear_points():
    objs = np.array([[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]])
    cd = crowding_distance(objs)
    assert np.isinf(cd[0]) and np.isinf(cd[2])
    assert cd[1] == pytest.approx(2.0)  # full normalized span in each objective


def test_select_keeps_union_when_room():
    objs = np.array([[1.0, 1.0], [0.0, 2.0], [2.0, 0.0], [3.0, 3.0]])
    sel = nsga2_select(objs, 4)
    assert sorted(sel) == [0, 1, 2, 3]
    # normalized order: front members ascending, then later fronts
    assert sel == [0, 1, 2, 3]


def test_select_truncates_by_crowding():
    # one front of four; the two extremes and the more isolated interior win
    objs = np.array([[0.0, 3.0], [1.0, 2.0], [1.1, 1.9], [3.0, 0.0]])
    sel = nsga2_select(objs, 3)
    assert set(sel) <= {0, 1, 2, 3} and len(sel) == 3
    assert 0 in sel and 3 in sel  # extremes always survive truncation


def test_select_elitism_property():
    rng = np.random.default_rng(1)
    for trial in range(200):
        n = int(rng.integers(4, 65))
        k = int(rng.choice([2, 3]))
        objs = rng.random(size=(n, k))
        keep = int(rng.integers(1, n + 1))
        sel = nsga2_select(objs, keep)
        assert len(sel) == keep
        excluded = set(range(n)) - set(sel)
        for s in sel:
            for e in excluded:
                assert not _dominates(objs[e], objs[s]), (trial, e, s)


def test_select_tie_breaks_by_lowest_index():
    # four identical points: stable sorting makes 0 and 3 the "extremes"
    # (infinite crowding); among the equal-crowding middles, lowest index wins
    objs = np.ones((4, 2))
    assert nsga2_select(objs, 2) == [0, 3]
    assert nsga2_select(objs, 3) == [0, 3, 1]


# ---------------------------------------------------------------------------
# variation


def test_de_mutant_zero_amplitude():
    base = np.array([1.0, 2.0])
    assert np.array_equal(de_mutant(base, np.array([5.0, 5.0]), np.array([3.0, 1.0]), 0.0), base)


def test_de_generate_respects_bounds_and_size():
    rng = np.random.default_rng(2)
    decs = rng.uniform(0.0, 1.0, size=(12, 4))
    off = de_generate(decs, (0.0, 1.0), rng)
    assert off.shape == decs.shape
    assert np.all(off >= 0.0) and np.all(off <= 1.0)
    with pytest.raises(DegenerateError):
        de_generate(decs[:3], (0.0, 1.0), rng)


def test_de_generate_deterministic():
    decs = np.random.default_rng(3).uniform(size=(8, 3))
    a = de_generate(decs, (0.0, 1.0), np.random.default_rng(42))
    b = de_generate(decs, (0.0, 1.0), np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_de_generate_monte_carlo_mean():
    # with wide bounds (no clipping), E[u_j] = p*mean_others + (1-p)*x_ij
    # where p = E[CR] + (1 - E[CR])/d is the donor-coordinate probability
    rng = np.random.default_rng(4)
    decs = rng.uniform(0.0, 1.0, size=(6, 3))
    draws = np.stack(
        [de_generate(decs, (-100.0, 100.0), np.random.default_rng(s)) for s in range(10_000)]
    )
    d = decs.shape[1]
    p = 0.5 + 0.5 / d
    n = len(decs)
    mean_others = (decs.sum(axis=0) - decs) / (n - 1)
    expect = p * mean_others + (1.0 - p) * decs
    got = draws.mean(axis=0)
    stderr = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(got - expect) < 3.0 * stderr + 1e-12)


def test_transfer_crossover_limits():
    rng = np.random.default_rng(5)
    x = np.zeros(6)
    donor = np.ones(6)
    took_all = transfer_crossover(x, donor, (0.0, 1.0), rng, cr=1.0)
    assert np.array_equal(took_all, donor)
    took_one = transfer_crossover(x, donor, (0.0, 1.0), rng, cr=0.0)
    assert int((took_one == 1.0).sum()) == 1


def test_transfer_crossover_provenance():
    rng = np.random.default_rng(6)
    x = np.arange(5, dtype=float)
    donor = np.arange(5, dtype=float) + 100.0
    for _ in range(50):
        trial = transfer_crossover(x, donor, (-1000.0, 1000.0), rng)
        assert all(t in (a, b) for t, a, b in zip(trial, x, donor))


def test_transfer_crossover_dimension_alignment():
    rng = np.random.default_rng(7)
    x = np.zeros(4)
    long_donor = np.full(7, 9.0)
    trial = transfer_crossover(x, long_donor, (0.0, 10.0), rng, cr=1.0)
    assert np.array_equal(trial, np.full(4, 9.0))
    short_donor = np.full(2, 9.0)
    trial = transfer_crossover(x, short_donor, (0.0, 10.0), rng, cr=1.0)
    assert np.array_equal(trial[:2], [9.0, 9.0])
    assert np.all((trial[2:] >= 0.0) & (trial[2:] <= 10.0))


# ---------------------------------------------------------------------------
# adaptive source choice


def _boxes(rng, center, n=30, d=2):
    return list(center + 0.01 * rng.standard_normal((n, d)))


def test_adaptive_choose_two_tasks():
    rng = np.random.default_rng(8)
    archives = {1: _boxes(rng, 0.0), 2: _boxes(rng, 5.0)}
    rew = np.ones((2, 2))
    pos = np.zeros((2, 2))
    for _ in range(10):
        assert adaptive_choose(1, archives, rew, pos, rng) == 2
    assert pos[0, 1] > 0.0


def test_adaptive_choose_reward_share():
    rng = np.random.default_rng(9)
    base = _boxes(rng, 1.0)
    archives = {1: [r.copy() for r in base], 2: [r.copy() for r in base], 3: [r.copy() for r in base]}
    rew = np.ones((3, 3))
    rew[0, 1] = 9.0  # prefer task 2 strongly
    pos = np.zeros((3, 3))
    n = 10_000
    hits = sum(adaptive_choose(1, archives, rew, pos, rng) == 2 for _ in range(n))
    share = 9.0 / 10.0
    sigma = np.sqrt(share * (1 - share) / n)
    assert abs(hits / n - share) < 3.0 * sigma


def test_adaptive_choose_prefers_similar_archive():
    rng = np.random.default_rng(10)
    archives = {
        1: _boxes(rng, 0.0),
        2: _boxes(rng, 0.0),  # same region as the target
        3: _boxes(rng, 50.0),  # far away
    }
    rew = np.ones((3, 3))
    pos = np.zeros((3, 3))
    picks = [adaptive_choose(1, archives, rew, pos, rng) for _ in range(2000)]
    assert picks.count(2) > picks.count(3) * 5
    assert pos[0, 1] > pos[0, 2] > 0.0


def test_adaptive_choose_empty_archives_fall_back():
    rng = np.random.default_rng(11)
    archives = {1: [], 2: [], 3: []}
    picks = {adaptive_choose(1, archives, np.ones((3, 3)), np.zeros((3, 3)), rng) for _ in range(100)}
    assert picks <= {2, 3} and picks  # uniform over the others
    with pytest.raises(ConfigError):
        adaptive_choose(1, {1: []}, np.ones((1, 1)), np.zeros((1, 1)), rng)


# ---------------------------------------------------------------------------
# full runs


def test_run_budget_equal_to_initialization():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=1)
    params = MaTdeParams()
    oracle = TrueOracle()
    res = run_mo_matde(suite, oracle, params, max_evals_per_task=params.pop_size, seed=1)
    assert all(v == params.pop_size for v in res.evals.values())
    assert oracle.counts == res.evals
    assert res.trace == ()
    for t in res.task_ids:
        assert len(res.pareto_obj[t]) >= 1


def test_run_exact_fe_budget():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=2)
    oracle = TrueOracle()
    res = run_mo_matde(suite, oracle, MaTdeParams(), max_evals_per_task=200, seed=2)
    assert all(v == 200 for v in oracle.counts.values())
    assert all(v == 200 for v in res.evals.values())


def test_run_generation_budget_counts():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=3)
    oracle = TrueOracle()
    params = MaTdeParams(pop_size=8)
    res = run_mo_matde(suite, oracle, params, n_generations=5, seed=3)
    assert all(v == 8 * 6 for v in oracle.counts.values())
    assert len(res.trace) == 2 * 5


def test_run_deterministic():
    suite = make_suite("Rastrigin", n_tasks=2, n_dim=3, seed=4)
    a = run_mo_matde(suite, TrueOracle(), MaTdeParams(), n_generations=4, seed=9)
    b = run_mo_matde(suite, TrueOracle(), MaTdeParams(), n_generations=4, seed=9)
    for t in a.task_ids:
        assert np.array_equal(a.pareto_dec[t], b.pareto_dec[t])
        assert np.array_equal(a.pareto_obj[t], b.pareto_obj[t])
    assert a.trace == b.trace


def test_run_igd_halves_on_sphere():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=5)
    params = MaTdeParams()
    for seed in (0, 1):
        init = run_mo_matde(suite, TrueOracle(), params, max_evals_per_task=params.pop_size, seed=seed)
        final = run_mo_matde(suite, TrueOracle(), params, max_evals_per_task=200, seed=seed)
        for t in init.task_ids:
            ref = true_pf(suite.task(t), 200)
            assert igd(ref, final.pareto_obj[t]) <= 0.5 * igd(ref, init.pareto_obj[t])


def test_run_transfer_state_invariants():
    suite = make_suite("Sphere", n_tasks=3, n_dim=3, seed=6)
    params = MaTdeParams(pop_size=10, a_cap=25, im=0.9)
    res = run_mo_matde(suite, TrueOracle(), params, n_generations=12, seed=7)
    assert np.all(res.rew > 0.0)
    modes = {r.mode for r in res.trace}
    assert "transfer" in modes  # im=0.9 over 36 slots makes self-only absurdly unlikely
    for rec in res.trace:
        assert rec.mode in ("self", "transfer")
        assert (rec.source is None) == (rec.mode == "self")
        assert len(rec.rew_hash) == 16
    assert len(res.trace) == 3 * 12


def test_run_archive_capacity_respected():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=8)
    params = MaTdeParams(pop_size=10, a_cap=15, a_up=1.0)
    # without replacement the archive would overflow after the first generation
    res = run_mo_matde(suite, TrueOracle(), params, n_generations=6, seed=11)
    assert all(s <= 15 for s in res.archive_sizes.values())
    assert all(s > 0 for s in res.archive_sizes.values())


def test_run_config_errors():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=9)
    with pytest.raises(ConfigError):
        run_mo_matde(suite, TrueOracle(), MaTdeParams(), seed=0)
    with pytest.raises(ConfigError):
        run_mo_matde(suite, TrueOracle(), MaTdeParams(), max_evals_per_task=40, n_generations=2)
    with pytest.raises(ConfigError):
        MaTdeParams(im=1.5)
    with pytest.raises(ConfigError):
        MaTdeParams(shk=1.0)
    with pytest.raises(ConfigError):
        MaTdeParams(pop_size=3)


def test_flagged_rows_survive_into_result():
    suite = make_suite("Sphere", n_tasks=1, n_dim=3, seed=10)

    class FlaggingOracle:
        def __init__(self):
            self.inner = TrueOracle()
            self.last_flags = None

        def evaluate(self, task, x):
            out = self.inner.evaluate(task, x)
            self.last_flags = np.ones(len(x), dtype=bool)
            return out

    res = run_mo_matde(suite, FlaggingOracle(), MaTdeParams(pop_size=8), n_generations=2, seed=3)
    assert np.all(res.pareto_flagged[1])
    assert res.pareto_individuals(1)[0].flagged is True
