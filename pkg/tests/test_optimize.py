import csv
import dataclasses
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsaoi.errors import ConfigError, FeasibilityError, InfeasibleSpaceError, ResourceExhaustionError
from spsaoi.model import ChannelConfig, Decision, RadioConfig, ScenarioConfig, aoi, is_feasible
from spsaoi.optimize import (
    TRACE_COLUMNS,
    Candidate,
    GaConfig,
    Objective,
    OptimizerTrace,
    SearchSpace,
    feasible_speed_interval,
    ga_optimize,
    grid_axes,
    grid_search,
)

CFG = ScenarioConfig()


class TestFeasibleInterval:
    def test_default_bounds_coincide(self):
        assert feasible_speed_interval(SearchSpace()) == (30.0, 120.0)

    def test_tighter_density(self):
        cfg = ScenarioConfig(density_bounds=(60, 150))
        assert feasible_speed_interval(SearchSpace(cfg)) == (40.0, 100.0)

    def test_empty(self):
        with pytest.raises(InfeasibleSpaceError) as exc:
            feasible_speed_interval(ScenarioConfig(density_bounds=(300, 400)))
        assert exc.value.bound == "density_bounds"

    @given(st.floats(20, 300), st.floats(20, 300), st.floats(0, 1))
    def test_every_inner_speed_is_feasible(self, d1, d2, t):
        cfg = ScenarioConfig(density_bounds=tuple(sorted((d1, d2))))
        try:
            lo, hi = feasible_speed_interval(cfg)
        except InfeasibleSpaceError:
            return
        v = lo + t * (hi - lo)
        assert is_feasible(Decision(v, 50.0), cfg)


class TestSearchSpace:
    @pytest.mark.parametrize("kw", [{"rri_step": 0}, {"speed_step": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            SearchSpace(**kw)

    def test_axes_include_endpoints(self):
        rris, speeds = grid_axes(SearchSpace())
        assert rris[0] == 10 and rris[-1] == 100 and len(rris) == 19
        assert speeds[0] == 30 and speeds[-1] == 120 and len(speeds) == 91

    def test_axes_append_uneven_endpoint(self):
        rris, _ = grid_axes(SearchSpace(rri_step=40))
        assert rris == [10, 50, 90, 100]


class TestObjective:
    def test_memoised(self):
        obj = Objective()
        a = obj(80, 30)
        b = obj(80.0, 30.0)
        assert a == b and obj.evaluations == 1

    def test_rejects_infeasible(self):
        with pytest.raises(FeasibilityError):
            Objective()(20, 30)

    def test_exhausted_is_inf(self):
        assert Objective()(30, 10) == math.inf
        assert Objective().evaluate(30, 10) is None

    def test_log(self):
        obj = Objective(keep_log=True)
        obj(50, 50)
        obj(60, 50)
        assert obj.log == [Decision(50, 50), Decision(60, 50)]


class TestTrace:
    def test_monotone_enforced(self):
        t = OptimizerTrace("x")
        t.record(0, Candidate(Decision(50, 50), 10.0))
        with pytest.raises(AssertionError):
            t.record(1, Candidate(Decision(50, 50), 11.0))

    def test_csv(self, tmp_path):
        t = OptimizerTrace("x")
        t.record(0, Candidate(Decision(50, 50), 10.0), 12.0)
        path = t.to_csv(tmp_path / "t.csv")
        rows = list(csv.reader(path.open()))
        assert tuple(rows[0]) == TRACE_COLUMNS
        assert TRACE_COLUMNS[:4] == ("iteration", "best_aoi_ms", "speed_kmh", "rri_ms")
        assert [float(x) for x in rows[1]] == [0, 10.0, 50, 50, 12.0]


def brute_force(space):
    """Plain double loop over the same grid, written without the optimizer."""
    cfg = space.scenario
    lo, hi = feasible_speed_interval(space)
    n_r = int(round((cfg.rri_bounds[1] - cfg.rri_bounds[0]) / space.rri_step))
    n_v = int(round((hi - lo) / space.speed_step))
    best = (math.inf, math.inf, math.inf)
    for i in range(n_r + 1):
        r = cfg.rri_bounds[0] + i * space.rri_step
        for j in range(n_v + 1):
            v = lo + j * space.speed_step
            try:
                value = aoi(Decision(v, r), cfg, ChannelConfig(), RadioConfig()).aoi
            except ResourceExhaustionError:
                value = math.inf
            if (value, r, v) < best:
                best = (value, r, v)
    return best


class TestGrid:
    def test_matches_brute_force(self, grid_best):
        best, trace = grid_best
        value, r, v = brute_force(SearchSpace())
        assert best.aoi == value and best.decision == Decision(v, r)
        assert trace.evaluations == 19 * 91

    def test_two_by_two(self):
        cfg = ScenarioConfig(rri_bounds=(40, 60), speed_bounds=(60, 80), density_bounds=(50, 200))
        space = SearchSpace(cfg, rri_step=20, speed_step=20)
        best, _ = grid_search(space)
        obj = Objective(cfg)
        values = [obj(v, r) for r in (40, 60) for v in (60, 80)]
        assert best.aoi == min(values)

    def test_order_independent(self, grid_best):
        shuffled, _ = grid_search(SearchSpace(), shuffle_seed=3)
        assert shuffled == grid_best[0]

    def test_refinement_never_worse(self, grid_best):
        fine, _ = grid_search(SearchSpace(rri_step=2.5, speed_step=0.5))
        assert fine.aoi <= grid_best[0].aoi

    def test_trace_monotone(self, grid_best):
        b = grid_best[1].best_aoi
        assert all(x >= y for x, y in zip(b, b[1:]))

    def test_tie_break(self):
        # Flat objective: the smallest rri, then the smallest speed, must win.
        class Flat(Objective):
            def __call__(self, speed, rri):
                self.evaluate(speed, rri)
                return 1.0

        best, _ = grid_search(SearchSpace(rri_step=30, speed_step=30), Flat(), shuffle_seed=11)
        assert best.decision == Decision(30, 10)

    def test_all_candidates_feasible(self):
        obj = Objective(keep_log=True)
        grid_search(SearchSpace(rri_step=15, speed_step=10), obj)
        assert obj.log and all(is_feasible(d, CFG) for d in obj.log)


class TestGa:
    @pytest.mark.parametrize(
        "kw",
        [
            {"population": 1},
            {"elites": 50},
            {"generations": 0},
            {"crossover_prob": 1.5},
            {"mutation_sigma_frac": -0.1},
        ],
    )
    def test_config_rejects(self, kw):
        with pytest.raises(ConfigError):
            GaConfig(**kw)

    def test_within_two_percent(self, grid_best):
        best, trace = ga_optimize(SearchSpace(), GaConfig())
        assert best.aoi <= 1.02 * grid_best[0].aoi
        assert len(trace.iterations) == 50

    def test_deterministic(self):
        g = GaConfig(population=10, generations=8, seed=5)
        assert ga_optimize(SearchSpace(), g) == ga_optimize(SearchSpace(), g)

    def test_clone_fixed_point(self, grid_best):
        opt = grid_best[0]
        g = GaConfig(population=8, generations=5, mutation_sigma_frac=0.0)
        best, _ = ga_optimize(SearchSpace(), g, initial_population=[opt.decision] * 8)
        assert best == opt

    def test_initial_population_size_checked(self):
        with pytest.raises(ConfigError):
            ga_optimize(SearchSpace(), GaConfig(population=4), initial_population=[Decision(50, 50)])

    @given(st.integers(0, 2**32))
    @settings(max_examples=10)
    def test_monotone_and_feasible(self, seed):
        cfg = ScenarioConfig(density_bounds=(60, 150))
        obj = Objective(cfg, keep_log=True)
        best, trace = ga_optimize(SearchSpace(cfg), GaConfig(population=12, generations=10, seed=seed), obj)
        b = trace.best_aoi
        assert all(x >= y for x, y in zip(b, b[1:]))
        assert all(is_feasible(d, cfg) for d in obj.log)
        assert best.aoi == obj(best.decision.speed, best.decision.rri)

    def test_returns_model_value(self):
        best, _ = ga_optimize(SearchSpace(), GaConfig(population=6, generations=3))
        direct = aoi(best.decision, CFG, ChannelConfig(), RadioConfig()).aoi
        assert best.aoi == direct

    def test_infeasible_space(self):
        cfg = dataclasses.replace(CFG, density_bounds=(300, 400))
        with pytest.raises(InfeasibleSpaceError):
            ga_optimize(SearchSpace(cfg), GaConfig(population=4, generations=2))
