"""Tests for the agent-level QP estimator: projection oracle agreement,
level aggregation algebra, and small end-to-end estimation runs."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridepass.core import DayType, PARAM_NAMES
from ridepass.estimation import (
    AgentQP,
    DEFAULT_LOWER,
    DEFAULT_UPPER,
    EstimationConfig,
    aggregate_levels,
    build_design,
    choice_probabilities,
    compute_margin,
    estimate,
    hit_rate,
    loglikelihood_and_fit,
    solve_agent_qp,
)
from ridepass.generator import GeneratorSpec, generate_population


def cvxpy_objective(qp: AgentQP) -> float:
    """Independent oracle: the same projection (slacked when infeasible)
    solved by cvxpy. The interior-point solution can sit ~1e-10 outside the
    box where the penalized objective's gradient is huge, so the returned
    value is the true objective at the box-clipped solution, not the solver's
    reported optimum."""
    import cvxpy as cp

    k = qp.beta0.size
    m = qp.difference_rows.shape[0]
    b = cp.Variable(k)
    s = cp.Variable(m, nonneg=True)
    obj = cp.sum_squares(b - qp.beta0) + qp.infeasibility_penalty * cp.sum(s)
    cons = [qp.difference_rows @ b + s >= qp.margin,
            b >= qp.lower_bounds, b <= qp.upper_bounds]
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=cp.CLARABEL)
    clipped = np.clip(b.value, qp.lower_bounds, qp.upper_bounds)
    return our_objective(clipped, qp)


def our_objective(beta, qp: AgentQP) -> float:
    d = beta - qp.beta0
    slack = np.maximum(0.0, qp.margin - qp.difference_rows @ beta)
    return float(d @ d + qp.infeasibility_penalty * slack.sum())


def random_qp(rng, k=None, m=None, tight_box=False) -> AgentQP:
    k = k or int(rng.integers(2, 7))
    m = m or int(rng.integers(1, 5))
    beta0 = rng.normal(0, 1.5, k)
    rows = rng.normal(0, 1.0, (k,)) if m == 1 else rng.normal(0, 1.0, (m, k))
    rows = np.atleast_2d(rows)
    lo = np.full(k, -0.5 if tight_box else -6.0)
    hi = np.full(k, 0.5 if tight_box else 6.0)
    return AgentQP(beta0=beta0, difference_rows=rows,
                   margin=float(rng.uniform(0.2, 2.0)),
                   lower_bounds=lo, upper_bounds=hi)


class TestMargin:
    def test_margin_is_logistic_quantile(self):
        assert compute_margin(0.75) == pytest.approx(math.log(3.0), abs=1e-12)
        assert compute_margin(0.5) == pytest.approx(0.0, abs=1e-15)

    def test_margin_domain(self):
        for bad in (0.0, 1.0, -0.1, 1.1):
            with pytest.raises(ValueError):
                compute_margin(bad)

    @given(st.floats(0.51, 0.99), st.floats(0.51, 0.99))
    def test_margin_monotone(self, p, q):
        lo, hi = sorted((p, q))
        assert compute_margin(lo) <= compute_margin(hi) + 1e-12


class TestAgentQP:
    def test_matches_cvxpy_oracle(self):
        rng = np.random.default_rng(7)
        for i in range(40):
            qp = random_qp(rng, tight_box=(i % 3 == 0))
            beta = solve_agent_qp(qp)
            assert np.all(beta >= qp.lower_bounds - 1e-9)
            assert np.all(beta <= qp.upper_bounds + 1e-9)
            assert our_objective(beta, qp) <= cvxpy_objective(qp) + 1e-6

    def test_single_constraint_closed_form(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            k = int(rng.integers(2, 7))
            beta0 = rng.normal(0, 1, k)
            d = rng.normal(0, 1, k)
            margin = float(rng.uniform(0.5, 2.0))
            qp = AgentQP(beta0=beta0, difference_rows=d[None, :],
                         margin=margin,
                         lower_bounds=np.full(k, -100.0),
                         upper_bounds=np.full(k, 100.0))
            beta = solve_agent_qp(qp)
            gap = margin - float(d @ beta0)
            expected = beta0 + (max(gap, 0.0) / float(d @ d)) * d
            assert np.allclose(beta, expected, atol=1e-10)

    def test_interior_anchor_returned_unchanged(self):
        k = 4
        qp = AgentQP(beta0=np.zeros(k),
                     difference_rows=np.eye(k)[:2],
                     margin=-1.0,  # already satisfied at the anchor
                     lower_bounds=np.full(k, -1.0),
                     upper_bounds=np.full(k, 1.0))
        assert np.allclose(solve_agent_qp(qp), np.zeros(k))

    def test_rejects_nonfinite(self):
        qp = AgentQP(beta0=np.array([np.nan, 0.0]),
                     difference_rows=np.ones((1, 2)), margin=1.0,
                     lower_bounds=np.full(2, -1.0),
                     upper_bounds=np.full(2, 1.0))
        with pytest.raises(ValueError):
            solve_agent_qp(qp)


class TestAggregation:
    def _fake(self, rng, n=40):
        vals = rng.normal(0, 1, (n, len(PARAM_NAMES)))
        inds = [f"p{i % 7}" for i in range(n)]
        ods = [("a", f"z{i % 5}") for i in range(n)]
        return vals, inds, ods

    def test_mean_preserving(self):
        rng = np.random.default_rng(0)
        vals, inds, ods = self._fake(rng)
        _, _, pop, new_vals = aggregate_levels(vals, inds, ods)
        assert np.allclose(pop, vals.mean(axis=0))
        assert np.allclose(new_vals.mean(axis=0), vals.mean(axis=0))

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        vals, inds, ods = self._fake(rng)
        _, _, _, once = aggregate_levels(vals, inds, ods)
        _, _, _, twice = aggregate_levels(once, inds, ods)
        assert np.allclose(once, twice)

    def test_level_structure(self):
        from ridepass.core import LEVEL_TAGS, PARAM_INDEX

        rng = np.random.default_rng(2)
        vals, inds, ods = self._fake(rng)
        _, _, pop, new_vals = aggregate_levels(vals, inds, ods)
        for name, tag in LEVEL_TAGS.items():
            col = new_vals[:, PARAM_INDEX[name]]
            if tag == "generic":
                assert np.allclose(col, pop[PARAM_INDEX[name]])
            elif tag == "individual":
                for ind in set(inds):
                    rows = [i for i, x in enumerate(inds) if x == ind]
                    assert np.allclose(col[rows], col[rows[0]])
            else:  # trip level: constant within OD pair
                for od in set(ods):
                    rows = [i for i, x in enumerate(ods) if x == od]
                    assert np.allclose(col[rows], col[rows[0]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            aggregate_levels(np.zeros((0, 13)), [], [])


@pytest.fixture(scope="module")
def small_population():
    spec = GeneratorSpec(population_size=150, seed=11)
    pop, truth = generate_population(spec)
    return pop, truth


class TestEstimation:
    def test_design_dimensions(self, small_population):
        pop, _ = small_population
        trips = pop.trips_of(DayType.weekday)
        design = build_design(trips)
        assert design.X.shape == (len(trips), 5, 13)
        assert design.D.shape == (len(trips), 4, 13)
        # difference rows are chosen-minus-other attribute rows
        i = 0
        x, c = design.X[i], design.chosen[i]
        others = [j for j in range(5) if j != c]
        assert np.allclose(design.D[i], x[c] - x[others])

    def test_fare_override_changes_design(self, small_population):
        pop, _ = small_population
        trips = pop.trips_of(DayType.weekday)[:5]
        from ridepass.core import MODE_INDEX, ModeId, PARAM_INDEX

        fares = {t.trip_id: 0.0 for t in trips}
        d0 = build_design(trips)
        d1 = build_design(trips, fares)
        mt = MODE_INDEX[ModeId.microtransit]
        assert np.all(d1.X[:, mt, PARAM_INDEX["cost"]] == 0.0)
        assert np.any(d0.X[:, mt, PARAM_INDEX["cost"]] > 0.0)

    def test_small_run_properties(self, small_population):
        pop, _ = small_population
        trips = pop.trips_of(DayType.weekday)
        cfg = EstimationConfig(max_outer_iterations=8)
        result = estimate(trips, cfg)
        assert result.iterations <= 8
        # every agent vector respects the box
        assert np.all(result.params.agent_matrix >= DEFAULT_LOWER - 1e-9)
        assert np.all(result.params.agent_matrix <= DEFAULT_UPPER + 1e-9)
        # fit bookkeeping
        P = choice_probabilities(result.params, trips)
        assert P.shape == (len(trips), 5)
        assert np.allclose(P.sum(axis=1), 1.0)
        ll, ll0, rho2 = loglikelihood_and_fit(result.params, trips)
        assert ll0 == pytest.approx(len(trips) * math.log(0.2))
        assert ll >= ll0  # fitted model beats uniform chance
        assert 0.0 <= hit_rate(result.params, trips) <= 1.0

    def test_agent_vectors_consistent_with_levels(self, small_population):
        from ridepass.core import LEVEL_TAGS, PARAM_INDEX

        pop, _ = small_population
        trips = pop.trips_of(DayType.weekend)
        result = estimate(trips, EstimationConfig(max_outer_iterations=5))
        params = result.params
        generic_ref = params.agent_matrix[0]
        for trip in trips[:25]:
            vec = params.agent_vector(trip.trip_id)
            for name, tag in LEVEL_TAGS.items():
                if tag == "individual":
                    assert vec[PARAM_INDEX[name]] == pytest.approx(
                        params.individual_value(trip.individual_id, name))
                elif tag == "generic":
                    # generic components are shared by every agent
                    assert vec[PARAM_INDEX[name]] == pytest.approx(
                        float(generic_ref[PARAM_INDEX[name]]))
