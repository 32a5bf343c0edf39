"""Tests for the shared domain model: fares, utilities, gains, links."""

import math

import numpy as np
import pytest

from ridepass.core import (
    MODES,
    MODE_INDEX,
    PARAM_INDEX,
    DayType,
    Individual,
    ModeAttrs,
    ModeId,
    PricingPolicy,
    Purpose,
    SubscriptionParameters,
    SubsidySpec,
    TourType,
    TripRecord,
    attribute_matrix,
    compute_gain,
    link_price_sensitivity,
    microtransit_fare,
    mode_utilities,
    softmax_probabilities,
    subscription_utilities,
)


def make_trip(distance=3.0, purpose=Purpose.shopping, tour=TourType.commute,
              day=DayType.weekday, origin="z00_00", dest="z01_01",
              depart=480.0, trip_id="t0", ind_id="i0"):
    return TripRecord(
        trip_id=trip_id, individual_id=ind_id, origin_zone=origin,
        destination_zone=dest, day_type=day, depart_time=depart,
        distance=distance, purpose=purpose, tour_type=tour,
        observed_mode=ModeId.driving,
        mode_attrs={
            ModeId.driving: ModeAttrs(0.25, 0.30),
            ModeId.biking: ModeAttrs(0.40),
            ModeId.walking: ModeAttrs(0.90),
            ModeId.carpool: ModeAttrs(0.26, 0.15),
            ModeId.microtransit: ModeAttrs(0.27, 4.0),
        },
        mt_wait_time=0.2,
    )


class TestFares:
    def test_bracket_boundaries(self):
        policy = PricingPolicy()
        assert microtransit_fare(make_trip(distance=1.0), policy) == 3.0
        assert microtransit_fare(make_trip(distance=2.0), policy) == 3.0
        assert microtransit_fare(make_trip(distance=2.01), policy) == 4.0
        assert microtransit_fare(make_trip(distance=5.0), policy) == 4.0
        assert microtransit_fare(make_trip(distance=7.5), policy) == 5.0
        assert microtransit_fare(make_trip(distance=50.0), policy) == 5.0

    def test_subsidy_discount(self):
        sub = SubsidySpec(zone_set=frozenset({"z00_00"}),
                          time_window=(0.0, 1440.0), discount_fraction=0.5)
        policy = PricingPolicy(subsidy=sub)
        assert microtransit_fare(make_trip(distance=1.0), policy) == 1.5
        # outside the zone set: full fare
        trip = make_trip(distance=1.0, origin="z05_05", dest="z06_06")
        assert microtransit_fare(trip, policy) == 3.0

    def test_subsidy_window_and_day(self):
        sub = SubsidySpec(zone_set=frozenset({"z00_00"}),
                          time_window=(600.0, 900.0),
                          day_type=DayType.weekday)
        assert sub.applies(make_trip(depart=700.0))
        assert not sub.applies(make_trip(depart=950.0))
        assert not sub.applies(make_trip(depart=700.0, day=DayType.weekend))
        # destination membership is enough
        assert sub.applies(make_trip(depart=700.0, origin="z09_09",
                                     dest="z00_00"))

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            PricingPolicy(price_weekly=-1.0)
        with pytest.raises(ValueError):
            PricingPolicy(fare_brackets=((5.0, 4.0), (2.0, 3.0)))


class TestAttributeMatrix:
    def test_structure(self):
        trip = make_trip()
        x = attribute_matrix(trip, 4.0)
        # carpool is the reference mode: no constant anywhere on its row
        cp = MODE_INDEX[ModeId.carpool]
        for name in ("asc_driving", "asc_biking", "asc_walking",
                     "asc_microtransit"):
            assert x[cp, PARAM_INDEX[name]] == 0.0
        assert x[cp, PARAM_INDEX["tt_auto"]] == pytest.approx(0.26)
        assert x[cp, PARAM_INDEX["cost"]] == pytest.approx(0.15)
        mt = MODE_INDEX[ModeId.microtransit]
        assert x[mt, PARAM_INDEX["cost"]] == 4.0
        assert x[mt, PARAM_INDEX["wt_microtransit"]] == pytest.approx(0.2)
        # purpose and tour dummies load on the microtransit row only
        assert x[mt, PARAM_INDEX["b_shopping"]] == 1.0
        assert x[mt, PARAM_INDEX["b_commute"]] == 1.0
        assert x[mt, PARAM_INDEX["b_school"]] == 0.0
        assert x[:, PARAM_INDEX["b_shopping"]].sum() == 1.0

    def test_work_purpose_is_reference(self):
        x = attribute_matrix(make_trip(purpose=Purpose.work), 4.0)
        mt = MODE_INDEX[ModeId.microtransit]
        for name in ("b_shopping", "b_school", "b_other"):
            assert x[mt, PARAM_INDEX[name]] == 0.0

    def test_pass_zeroes_fare(self):
        trip = make_trip()
        beta = -np.ones(13)
        policy = PricingPolicy()
        u_pay = mode_utilities(trip, beta, holds_pass=False, policy=policy)
        u_free = mode_utilities(trip, beta, holds_pass=True, policy=policy)
        fare = microtransit_fare(trip, policy)
        assert u_free[ModeId.microtransit] - u_pay[ModeId.microtransit] == \
            pytest.approx(-beta[PARAM_INDEX["cost"]] * fare)
        for m in MODES:
            if m != ModeId.microtransit:
                assert u_free[m] == u_pay[m]


class TestChoiceMath:
    def test_softmax_simplex(self):
        p = softmax_probabilities([1.0, 2.0, 3.0, -1.0, 800.0])
        assert p.sum() == pytest.approx(1.0)
        assert np.all(p >= 0)
        assert p.argmax() == 4

    def test_subscription_utilities_arithmetic(self):
        ind = Individual("i0", "student", gain_we=2.0, gain_wd=1.0,
                         mt_user=True, beta_price=-0.1)
        sp = SubscriptionParameters(f_rp=0.5, beta_gain_we=1.0,
                                    beta_gain_wd=0.5, beta_mt_user=2.0,
                                    asc_weekly=-1.0, asc_monthly=-2.0)
        policy = PricingPolicy(price_weekly=20.0, price_monthly=60.0)
        u_w, u_m, u_n = subscription_utilities(ind, sp, policy)
        common = 1.0 * 2.0 + 0.5 * 1.0 + 2.0
        assert u_w == pytest.approx(-0.1 * 20.0 + common - 1.0)
        assert u_m == pytest.approx(-0.1 * 15.0 + common - 2.0)
        assert u_n == 0.0


class TestGain:
    def test_zero_fare_zero_gain(self):
        trip = make_trip()
        policy = PricingPolicy(fare_brackets=((math.inf, 0.0),))
        ind = Individual("i0", "student", weekday_trips=["t0"])
        beta = np.full(13, -0.5)
        g = compute_gain(ind, DayType.weekday, beta, 1.0, policy, {"t0": trip})
        assert g == pytest.approx(0.0, abs=1e-12)

    def test_gain_nonnegative_and_monotone_in_fare(self):
        trip = make_trip()
        ind = Individual("i0", "student", weekday_trips=["t0"])
        beta = np.full(13, -0.5)  # negative cost coefficient
        gains = []
        for fare in (0.0, 1.0, 3.0, 5.0, 8.0):
            policy = PricingPolicy(fare_brackets=((math.inf, fare),))
            gains.append(compute_gain(ind, DayType.weekday, beta, 0.7, policy,
                                      {"t0": trip}))
        assert all(g >= -1e-12 for g in gains)
        assert all(b >= a - 1e-12 for a, b in zip(gains, gains[1:]))

    def test_rejects_nonpositive_nesting(self):
        ind = Individual("i0", "student", weekday_trips=["t0"])
        with pytest.raises(ValueError):
            compute_gain(ind, DayType.weekday, np.zeros(13), 0.0,
                         PricingPolicy(), {"t0": make_trip()})


class TestLinks:
    def test_price_sensitivity_weighting(self):
        # 5/7 weekday + 2/7 weekend day weighting of the cost coefficients
        got = link_price_sensitivity(-0.7, -0.35, 2.0)
        expected = 2.0 * ((5 / 7) * -0.7 + (2 / 7) * -0.35)
        assert got == pytest.approx(expected)

    def test_subscription_parameter_array_round_trip(self):
        sp = SubscriptionParameters(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
        assert SubscriptionParameters.from_array(sp.as_array()) == sp
