"""Domain types and pure utility/probability evaluation for the two-branch
microtransit choice model.

The lower branch is a five-mode trip-level choice (driving, biking, walking,
carpool, microtransit); the upper branch is a weekly/monthly/no ride-pass
subscription choice. Everything in this module is a pure function of its
inputs; all times are stored in HOURS internally (ingest converts from
minutes, see MINUTES_PER_HOUR) and all costs in dollars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

MINUTES_PER_HOUR = 60.0

# weekday/weekend weights used whenever per-week quantities are averaged
WEEKDAY_WEIGHT = 5.0 / 7.0
WEEKEND_WEIGHT = 2.0 / 7.0


class ModeId(str, Enum):
    driving = "driving"
    biking = "biking"
    walking = "walking"
    carpool = "carpool"
    microtransit = "microtransit"


MODES = tuple(ModeId)
MODE_INDEX = {m: i for i, m in enumerate(MODES)}


class DayType(str, Enum):
    weekday = "weekday"
    weekend = "weekend"


class Purpose(str, Enum):
    work = "work"  # reference level, no dummy
    shopping = "shopping"
    school = "school"
    other = "other"


class TourType(str, Enum):
    commute = "commute"
    non_commute = "non_commute"


# Parameter component index K of the lower-branch model. Order matters:
# attribute matrices and parameter vectors are aligned with this tuple.
PARAM_NAMES = (
    "tt_auto",
    "tt_non_auto",
    "wt_microtransit",
    "cost",
    "asc_microtransit",
    "asc_driving",
    "asc_biking",
    "asc_walking",
    "b_shopping",
    "b_school",
    "b_other",
    "b_commute",
    "b_noncommute",
)
N_PARAMS = len(PARAM_NAMES)
PARAM_INDEX = {k: i for i, k in enumerate(PARAM_NAMES)}

# Which level each component varies at: travel time / cost parameters vary
# across individuals, mode constants vary across trip OD pairs, purpose and
# tour dummies are generic (population-wide).
LEVEL_TAGS = {
    "tt_auto": "individual",
    "tt_non_auto": "individual",
    "wt_microtransit": "individual",
    "cost": "individual",
    "asc_microtransit": "trip",
    "asc_driving": "trip",
    "asc_biking": "trip",
    "asc_walking": "trip",
    "b_shopping": "generic",
    "b_school": "generic",
    "b_other": "generic",
    "b_commute": "generic",
    "b_noncommute": "generic",
}

INDIVIDUAL_PARAMS = tuple(k for k in PARAM_NAMES if LEVEL_TAGS[k] == "individual")
TRIP_PARAMS = tuple(k for k in PARAM_NAMES if LEVEL_TAGS[k] == "trip")
GENERIC_PARAMS = tuple(k for k in PARAM_NAMES if LEVEL_TAGS[k] == "generic")


@dataclass
class ModeAttrs:
    travel_time: float  # hours
    cost: float = 0.0  # dollars


@dataclass
class TripRecord:
    trip_id: str
    individual_id: str
    origin_zone: str
    destination_zone: str
    day_type: DayType
    depart_time: float  # minutes from midnight
    distance: float  # miles
    purpose: Purpose
    tour_type: TourType
    observed_mode: ModeId
    mode_attrs: dict[ModeId, ModeAttrs]
    mt_wait_time: float = 0.0  # hours

    @property
    def od_pair(self) -> tuple[str, str]:
        return (self.origin_zone, self.destination_zone)


@dataclass
class Individual:
    individual_id: str
    segment: str  # not_low_income | low_income | senior | student
    weekday_trips: list[str] = field(default_factory=list)
    weekend_trips: list[str] = field(default_factory=list)
    mt_user: bool = False
    gain_we: float = 0.0  # weekday ride-pass gain (logsum difference)
    gain_wd: float = 0.0  # weekend ride-pass gain
    beta_price: float = 0.0
    beta_cost_avg: float = 0.0  # day-weighted cost sensitivity, feeds beta_price

    def trips_for(self, day: DayType) -> list[str]:
        return self.weekday_trips if day == DayType.weekday else self.weekend_trips


SEGMENTS = ("not_low_income", "low_income", "senior", "student")


@dataclass
class SubscriptionParameters:
    """The six upper-branch parameters (bounded in [-10, 10] at calibration)."""

    f_rp: float = 0.0
    beta_gain_we: float = 0.0
    beta_gain_wd: float = 0.0
    beta_mt_user: float = 0.0
    asc_weekly: float = 0.0
    asc_monthly: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.f_rp, self.beta_gain_we, self.beta_gain_wd,
             self.beta_mt_user, self.asc_weekly, self.asc_monthly]
        )

    @classmethod
    def from_array(cls, x) -> "SubscriptionParameters":
        return cls(*(float(v) for v in x))


@dataclass
class SubsidySpec:
    zone_set: frozenset
    time_window: tuple[float, float]  # minutes from midnight, inclusive
    day_type: Optional[DayType] = None  # None = both day types
    discount_fraction: float = 1.0

    def applies(self, trip: TripRecord) -> bool:
        if self.day_type is not None and trip.day_type != self.day_type:
            return False
        lo, hi = self.time_window
        if not (lo <= trip.depart_time <= hi):
            return False
        return trip.origin_zone in self.zone_set or trip.destination_zone in self.zone_set


# Default Arlington-style distance-based fare schedule ($3-$5 per trip).
DEFAULT_FARE_BRACKETS = ((2.0, 3.0), (5.0, 4.0), (math.inf, 5.0))


@dataclass
class PricingPolicy:
    price_weekly: float = 25.0
    price_monthly: float = 80.0
    fare_brackets: tuple = DEFAULT_FARE_BRACKETS
    subsidy: Optional[SubsidySpec] = None

    def __post_init__(self):
        if self.price_weekly < 0 or self.price_monthly < 0:
            raise ValueError("ride pass prices must be nonnegative")
        dists = [d for d, _ in self.fare_brackets]
        if not self.fare_brackets or dists != sorted(dists) or len(set(dists)) != len(dists):
            raise ValueError("fare_brackets must be strictly increasing in distance")


def microtransit_fare(trip: TripRecord, policy: PricingPolicy) -> float:
    """Distance-bracket fare, with any subsidy discount applied.

    Distances beyond the last bracket pay the last bracket's fare.
    """
    fare = policy.fare_brackets[-1][1]
    for max_dist, bracket_fare in policy.fare_brackets:
        if trip.distance <= max_dist:
            fare = bracket_fare
            break
    if policy.subsidy is not None and policy.subsidy.applies(trip):
        fare *= 1.0 - policy.subsidy.discount_fraction
    return fare


def attribute_matrix(trip: TripRecord, mt_fare: float) -> np.ndarray:
    """(5, |K|) matrix of mode attributes; utilities are rows @ params.

    Row order follows MODES. Carpool is the reference mode (no constant).
    """
    x = np.zeros((len(MODES), N_PARAMS))
    a = trip.mode_attrs

    x[0, PARAM_INDEX["tt_auto"]] = a[ModeId.driving].travel_time
    x[0, PARAM_INDEX["cost"]] = a[ModeId.driving].cost
    x[0, PARAM_INDEX["asc_driving"]] = 1.0

    x[1, PARAM_INDEX["tt_non_auto"]] = a[ModeId.biking].travel_time
    x[1, PARAM_INDEX["asc_biking"]] = 1.0

    x[2, PARAM_INDEX["tt_non_auto"]] = a[ModeId.walking].travel_time
    x[2, PARAM_INDEX["asc_walking"]] = 1.0

    x[3, PARAM_INDEX["tt_auto"]] = a[ModeId.carpool].travel_time
    x[3, PARAM_INDEX["cost"]] = a[ModeId.carpool].cost

    mt = MODE_INDEX[ModeId.microtransit]
    x[mt, PARAM_INDEX["tt_auto"]] = a[ModeId.microtransit].travel_time
    x[mt, PARAM_INDEX["wt_microtransit"]] = trip.mt_wait_time
    x[mt, PARAM_INDEX["cost"]] = mt_fare
    x[mt, PARAM_INDEX["asc_microtransit"]] = 1.0
    if trip.purpose == Purpose.shopping:
        x[mt, PARAM_INDEX["b_shopping"]] = 1.0
    elif trip.purpose == Purpose.school:
        x[mt, PARAM_INDEX["b_school"]] = 1.0
    elif trip.purpose == Purpose.other:
        x[mt, PARAM_INDEX["b_other"]] = 1.0
    if trip.tour_type == TourType.commute:
        x[mt, PARAM_INDEX["b_commute"]] = 1.0
    else:
        x[mt, PARAM_INDEX["b_noncommute"]] = 1.0
    return x


def mode_utilities(
    trip: TripRecord,
    params: np.ndarray,
    holds_pass: bool,
    policy: PricingPolicy,
    fare_override: Optional[float] = None,
) -> dict[ModeId, float]:
    """Systematic utilities for all five modes under an agent parameter vector.

    Holding a pass zeroes the microtransit fare term; ``fare_override`` (when
    given) replaces the bracket fare, which the joint loop uses to apply
    ownership-weighted effective fares.
    """
    if holds_pass:
        fare = 0.0
    elif fare_override is not None:
        fare = fare_override
    else:
        fare = microtransit_fare(trip, policy)
    u = attribute_matrix(trip, fare) @ np.asarray(params, dtype=float)
    return {m: float(u[i]) for i, m in enumerate(MODES)}


def softmax_probabilities(utilities: Sequence[float]) -> np.ndarray:
    """Overflow-safe MNL probabilities (max-subtraction)."""
    u = np.asarray(utilities, dtype=float)
    e = np.exp(u - u.max())
    return e / e.sum()


def subscription_utilities(
    ind: Individual, sp: SubscriptionParameters, policy: PricingPolicy
) -> tuple[float, float, float]:
    """Weekly-horizon utilities (u_weekly, u_monthly, u_none).

    The monthly price is divided by 4 to put it on a per-week basis; the
    no-pass alternative is the zero-utility reference.
    """
    common = (
        sp.beta_gain_we * ind.gain_we
        + sp.beta_gain_wd * ind.gain_wd
        + sp.beta_mt_user * float(ind.mt_user)
    )
    u_weekly = ind.beta_price * policy.price_weekly + common + sp.asc_weekly
    u_monthly = ind.beta_price * (policy.price_monthly / 4.0) + common + sp.asc_monthly
    return (u_weekly, u_monthly, 0.0)


def compute_gain(
    ind: Individual,
    day: DayType,
    agent_params,
    nesting: float,
    policy: PricingPolicy,
    trip_store: Mapping[str, TripRecord],
) -> float:
    """Ride-pass benefit for one day type: the sum over the individual's trips
    of the logsum difference between the with-pass and without-pass nests,
    with utilities scaled by the (positive) nesting parameter.

    ``agent_params`` maps a trip id to that agent's parameter vector (a plain
    vector is also accepted and applied to every trip).
    """
    if nesting <= 0:
        raise ValueError("nesting parameter must be positive")
    total = 0.0
    for trip_id in ind.trips_for(day):
        trip = trip_store[trip_id]
        beta = agent_params(trip_id) if callable(agent_params) else np.asarray(agent_params)
        fare = microtransit_fare(trip, policy)
        x = attribute_matrix(trip, fare)
        v_nrp = x @ beta
        v_rp = v_nrp.copy()
        mt = MODE_INDEX[ModeId.microtransit]
        v_rp[mt] -= beta[PARAM_INDEX["cost"]] * fare
        total += float(logsumexp(v_rp / nesting) - logsumexp(v_nrp / nesting))
    return total


def classify_mt_user(ind: Individual, trip_store: Mapping[str, TripRecord]) -> bool:
    """True iff any of the individual's trips was observed on microtransit."""
    for trip_id in ind.weekday_trips + ind.weekend_trips:
        if trip_store[trip_id].observed_mode == ModeId.microtransit:
            return True
    return False


def link_price_sensitivity(
    beta_cost_we: Optional[float],
    beta_cost_wd: Optional[float],
    f_rp: float,
    weights: tuple[float, float] = (WEEKDAY_WEIGHT, WEEKEND_WEIGHT),
) -> float:
    """Ride-pass price sensitivity as f_rp times the day-weighted average of
    the individual's cost parameter.

    A missing day type falls back to the available one. The cost-parameter
    basis (rather than travel time) is the dimensionally consistent reading;
    callers that want the time basis can pass those values instead.
    """
    if beta_cost_we is None and beta_cost_wd is None:
        raise ValueError("at least one day type's cost parameter is required")
    if beta_cost_we is None:
        avg = beta_cost_wd
    elif beta_cost_wd is None:
        avg = beta_cost_we
    else:
        w_we, w_wd = weights
        avg = (w_we * beta_cost_we + w_wd * beta_cost_wd) / (w_we + w_wd)
    return f_rp * avg


@dataclass
class Population:
    """In-memory container binding individuals to their trip records."""

    individuals: dict[str, Individual]
    trips: dict[str, TripRecord]

    def trips_of(self, day: DayType) -> list[TripRecord]:
        return [t for t in self.trips.values() if t.day_type == day]

    def refresh_mt_flags(self) -> None:
        for ind in self.individuals.values():
            ind.mt_user = classify_mt_user(ind, self.trips)

    def size(self) -> int:
        return len(self.individuals)
