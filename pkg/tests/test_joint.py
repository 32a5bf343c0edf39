"""Tests for the alternating joint estimation of both choice branches."""

import os

import numpy as np
import pytest

from ridepass.calibration import CalibrationTargets
from ridepass.core import (
    DayType,
    PricingPolicy,
    SubscriptionParameters,
    microtransit_fare,
)
from ridepass.estimation import EstimationConfig, estimate
from ridepass.generator import GeneratorSpec, generate_population
from ridepass.joint import (
    JointConfig,
    joint_estimate,
    scale_parameters,
    update_fares_with_ownership,
)


@pytest.fixture(scope="module")
def pop():
    population, _ = generate_population(GeneratorSpec(population_size=150, seed=11))
    return population


class TestFareWeighting:
    def test_expectation_weighting(self, pop):
        policy = PricingPolicy()
        ownership = {i: (0.25, 0.25, 0.5) for i in pop.individuals}
        fares = update_fares_with_ownership(pop, ownership, policy)
        for trip in pop.trips.values():
            assert fares[trip.trip_id] == pytest.approx(
                0.5 * microtransit_fare(trip, policy))

    def test_hard_assignment(self, pop):
        policy = PricingPolicy()
        ownership = {i: (0.6, 0.1, 0.3) for i in pop.individuals}
        fares = update_fares_with_ownership(pop, ownership, policy, hard=True)
        assert all(f == 0.0 for f in fares.values())  # weekly pass most likely
        ownership = {i: (0.1, 0.2, 0.7) for i in pop.individuals}
        fares = update_fares_with_ownership(pop, ownership, policy, hard=True)
        for trip in pop.trips.values():
            assert fares[trip.trip_id] == microtransit_fare(trip, policy)

    def test_unknown_individual_pays_full_fare(self, pop):
        policy = PricingPolicy()
        fares = update_fares_with_ownership(pop, {}, policy)
        trip = next(iter(pop.trips.values()))
        assert fares[trip.trip_id] == microtransit_fare(trip, policy)


class TestScaling:
    def test_scale_preserves_ratios(self, pop):
        trips = pop.trips_of(DayType.weekday)
        params = estimate(trips, EstimationConfig(max_outer_iterations=3)).params
        scaled = scale_parameters(params, 2.5)
        assert np.allclose(scaled.population_values, 2.5 * params.population_values)
        assert np.allclose(scaled.agent_matrix, 2.5 * params.agent_matrix)
        tid = trips[0].trip_id
        assert np.allclose(scaled.agent_vector(tid), 2.5 * params.agent_vector(tid))

    def test_rejects_nonpositive_scale(self, pop):
        trips = pop.trips_of(DayType.weekday)
        params = estimate(trips, EstimationConfig(max_outer_iterations=2)).params
        with pytest.raises(ValueError):
            scale_parameters(params, 0.0)


@pytest.fixture(scope="module")
def joint_result(pop, tmp_path_factory):
    ckpt = str(tmp_path_factory.mktemp("ckpt"))
    cfg = JointConfig(
        estimation=EstimationConfig(max_outer_iterations=6),
        calibration_starts=4, max_iterations=3, checkpoint_dir=ckpt)
    targets = CalibrationTargets(
        num_weekly=9.0, num_monthly=3.0, population_size=len(pop.individuals))
    state = joint_estimate(pop, targets, PricingPolicy(), cfg)
    return state, ckpt, targets


class TestJointLoop:
    def test_state_shape(self, joint_result):
        state, _, _ = joint_result
        assert isinstance(state.sub_params, SubscriptionParameters)
        assert state.weekday_params.population_values.shape == (13,)
        assert state.weekend_params.population_values.shape == (13,)
        assert 1 <= state.iteration <= 3

    def test_ownership_simplex(self, joint_result, pop):
        state, _, _ = joint_result
        assert set(state.ownership_probs) == set(pop.individuals)
        for p in state.ownership_probs.values():
            assert all(v >= 0 for v in p)
            assert sum(p) == pytest.approx(1.0)

    def test_calibration_tracks_targets(self, joint_result):
        state, _, targets = joint_result
        # the last calibration should get near the marginal targets
        assert state.calibration.predicted_weekly == pytest.approx(
            targets.num_weekly, abs=2.0)
        assert state.calibration.predicted_monthly == pytest.approx(
            targets.num_monthly, abs=2.0)

    def test_checkpoints_written(self, joint_result):
        state, ckpt, _ = joint_result
        files = sorted(os.listdir(ckpt))
        assert f"joint_iter{state.iteration:02d}_taste.csv" in files
        assert any(f.endswith("_subscription.csv") for f in files)
        assert any(f.endswith("_ownership.csv") for f in files)

    def test_gains_and_links_populated(self, joint_result, pop):
        _ = joint_result
        some = list(pop.individuals.values())[:20]
        assert any(ind.gain_we != 0.0 for ind in some)
        assert all(np.isfinite(ind.beta_price) for ind in some)

    def test_requires_both_day_types(self, pop):
        from ridepass.core import Population

        weekday_only = Population(
            dict(pop.individuals),
            {t: r for t, r in pop.trips.items() if r.day_type == DayType.weekday},
        )
        with pytest.raises(ValueError):
            joint_estimate(weekday_only,
                           CalibrationTargets(5, 2, len(pop.individuals)),
                           PricingPolicy(), JointConfig(max_iterations=1))
