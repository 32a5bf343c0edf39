"""Tests for the day-to-day perception learning loop."""

import numpy as np
import pytest

from ridepass.core import DayType, ModeId, PricingPolicy, SubscriptionParameters
from ridepass.day2day import (
    LoopConfig,
    Perception,
    initial_perception,
    run_to_equilibrium,
    update_population_perception,
    update_user_perception,
)
from ridepass.estimation import EstimationConfig, estimate
from ridepass.generator import GeneratorSpec, generate_population
from ridepass.joint import JointState


@pytest.fixture(scope="module")
def pop():
    population, _ = generate_population(GeneratorSpec(population_size=150, seed=21))
    return population


@pytest.fixture(scope="module")
def params(pop):
    cfg = EstimationConfig(max_outer_iterations=4)
    wd = estimate(pop.trips_of(DayType.weekday), cfg).params
    we = estimate(pop.trips_of(DayType.weekend), cfg).params
    sp = SubscriptionParameters(
        f_rp=0.478, beta_gain_we=3.156, beta_gain_wd=1.505,
        beta_mt_user=4.767, asc_weekly=-0.844, asc_monthly=-1.186)
    return JointState(iteration=1, sub_params=sp, weekday_params=wd,
                      weekend_params=we, ownership_probs={}, converged=True)


class TestUserUpdate:
    def test_endpoints_and_midpoint(self):
        assert update_user_perception(10.0, 30.0, 0.0) == 10.0
        assert update_user_perception(10.0, 30.0, 1.0) == 30.0
        assert update_user_perception(10.0, 30.0, 0.5) == 20.0

    def test_theta_domain(self):
        with pytest.raises(ValueError):
            update_user_perception(1.0, 2.0, 1.5)

    def test_stays_between_prev_and_experienced(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            prev, exp, th = rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(0, 1)
            out = update_user_perception(prev, exp, th)
            assert min(prev, exp) - 1e-12 <= out <= max(prev, exp) + 1e-12


class TestPopulationUpdate:
    def test_exact_running_mean(self):
        state = Perception(avg_tt=0.0, avg_wt=0.0, day=0)
        xs = [12.0, 18.0, 9.0, 21.0]
        for x in xs:
            update_population_perception(state, x, x / 2.0)
        assert state.avg_tt == pytest.approx(np.mean(xs))
        assert state.avg_wt == pytest.approx(np.mean(xs) / 2.0)
        assert state.day == len(xs)

    def test_alternating_sequence_settles_at_midpoint(self):
        state = Perception()
        for d in range(100):
            x = 10.0 if d % 2 == 0 else 20.0
            update_population_perception(state, x, x)
        assert state.avg_tt == pytest.approx(15.0, rel=0.01)

    def test_zero_user_day_carries_forward(self):
        state = Perception(perceived_tt={"a": 5.0}, perceived_wt={"a": 3.0},
                           avg_tt=11.0, avg_wt=7.0, day=4)
        update_population_perception(state, None, None, non_user_ids=["a"])
        assert state.avg_tt == 11.0 and state.avg_wt == 7.0
        assert state.day == 4  # counter does not advance
        assert state.perceived_tt["a"] == 11.0  # non-user adopts the average
        assert state.perceived_wt["a"] == 7.0

    def test_validate_rejects_bad_values(self):
        with pytest.raises(ValueError):
            Perception(perceived_tt={"a": -1.0}).validate()
        with pytest.raises(ValueError):
            Perception(avg_wt=float("nan")).validate()


class TestInitialPerception:
    def test_seeded_from_own_trips(self, pop):
        perc = initial_perception(pop)
        ind = next(iter(pop.individuals.values()))
        trips = [pop.trips[t] for t in ind.weekday_trips + ind.weekend_trips]
        want_tt = np.mean([t.mode_attrs[ModeId.microtransit].travel_time * 60
                           for t in trips])
        want_wt = np.mean([t.mt_wait_time * 60 for t in trips])
        assert perc.perceived_tt[ind.individual_id] == pytest.approx(want_tt)
        assert perc.perceived_wt[ind.individual_id] == pytest.approx(want_wt)
        assert perc.day == 0
        perc.validate()


class TestEquilibriumLoop:
    def test_fixed_service_converges_fast(self, pop, params):
        report = run_to_equilibrium(
            pop, params, PricingPolicy(), dispatch_config=None,
            loop_config=LoopConfig(theta=1.0, expectation_mode=True, max_days=20),
            fixed_service=(18.0, 12.0))
        assert report.converged
        assert len(report.days) <= 10
        # with theta=1 every user's perception equals the constant service
        users = [i for i, v in report.perception.perceived_tt.items()
                 if v == 18.0]
        assert users  # somebody rides
        # perceived average equals realized at the fixed point
        assert report.perception.avg_tt == pytest.approx(18.0)
        assert report.perception.avg_wt == pytest.approx(12.0)

    def test_report_structure(self, pop, params):
        report = run_to_equilibrium(
            pop, params, PricingPolicy(), dispatch_config=None,
            loop_config=LoopConfig(theta=0.5, expectation_mode=True, max_days=15),
            fixed_service=(18.0, 12.0))
        frame = report.trace_frame()
        assert list(frame["day"]) == list(range(1, len(report.days) + 1))
        assert set(report.probabilities) == set(pop.trips)
        for p in report.ownership.values():
            assert sum(p) == pytest.approx(1.0)
            assert all(v >= 0 for v in p)
        assert report.final_dmr == report.days[-1].dmr
        assert report.final_tns >= 0.0

    def test_theta_sensitivity_same_fixed_point(self, pop, params):
        finals = []
        for theta in (0.2, 0.8):
            r = run_to_equilibrium(
                pop, params, PricingPolicy(), dispatch_config=None,
                loop_config=LoopConfig(theta=theta, expectation_mode=True,
                                       max_days=40, tolerance=0.005),
                fixed_service=(18.0, 12.0))
            assert r.converged
            finals.append(r.final_dmr)
        assert finals[0] == pytest.approx(finals[1], rel=0.02)

    def test_loop_config_validation(self):
        with pytest.raises(ValueError):
            LoopConfig(theta=-0.1)
        with pytest.raises(ValueError):
            LoopConfig(tolerance=0.0)
