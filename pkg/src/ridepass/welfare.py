"""Consumer surplus, compensating variation, ride-pass elasticities, and the
three policy metrics (daily microtransit ridership, total subscribers, total
daily revenue).

All quantities are closed-form over model outputs. Surplus constants are fixed
to zero, so only differences (compensating variation) carry meaning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    MODES,
    MODE_INDEX,
    PARAM_INDEX,
    DayType,
    Individual,
    ModeId,
    Population,
    PricingPolicy,
    SubscriptionParameters,
    TripRecord,
    WEEKDAY_WEIGHT,
    WEEKEND_WEIGHT,
    attribute_matrix,
    logsumexp,
    microtransit_fare,
    softmax_probabilities,
    subscription_utilities,
)

MT_ROW = MODE_INDEX[ModeId.microtransit]


@dataclass
class PolicyMetrics:
    dmr: float  # trips/day
    tns_weekly: float
    tns_monthly: float
    tns_total: float
    tdr_fares: float  # dollars/day from pay-per-ride fares
    tdr_passes: float  # dollars/day from subscriptions
    tdr_total: float

    def __post_init__(self):
        for v in (self.dmr, self.tns_weekly, self.tns_monthly, self.tns_total,
                  self.tdr_fares, self.tdr_passes, self.tdr_total):
            if v < -1e-9:
                raise ValueError("policy metrics must be nonnegative")


def subscription_cs(ind: Individual, sp: SubscriptionParameters,
                    policy: PricingPolicy) -> float:
    """Expected weekly surplus from the subscription choice, in dollars.

    (-1/beta_price) * ln sum_s exp(V_s) with the arbitrary constant fixed to
    zero; only differences across scenarios are meaningful.
    """
    if ind.beta_price >= 0:
        raise ValueError("beta_price must be negative")
    v = np.asarray(subscription_utilities(ind, sp, policy))
    return float(-logsumexp(v) / ind.beta_price)


def subscription_cv(ind: Individual, sp: SubscriptionParameters,
                    policy: PricingPolicy) -> float:
    """Dollar value of having the ride-pass options at all: surplus with the
    full choice set minus surplus with only the no-pass alternative.
    Nonnegative by logsum monotonicity in set inclusion."""
    if ind.beta_price >= 0:
        raise ValueError("beta_price must be negative")
    full = subscription_cs(ind, sp, policy)
    restricted = 0.0  # single zero-utility alternative: logsum = 0
    return full - restricted


def mode_cs(
    ind: Individual,
    trip: TripRecord,
    beta: np.ndarray,
    nesting: float,
    policy: PricingPolicy,
    exclude: Sequence[ModeId] = (),
    fare_override: Optional[float] = None,
) -> float:
    """Expected surplus of one trip's mode choice, in dollars.

    (-1/beta_cost) * ln sum_j exp(V_j / nesting) over the modes not excluded.
    """
    beta = np.asarray(beta, dtype=float)
    b_cost = beta[PARAM_INDEX["cost"]]
    if b_cost >= 0:
        raise ValueError("beta_cost must be negative")
    if nesting <= 0:
        raise ValueError("nesting parameter must be positive")
    fare = microtransit_fare(trip, policy) if fare_override is None else fare_override
    v = attribute_matrix(trip, fare) @ beta
    keep = [i for i, m in enumerate(MODES) if m not in set(exclude)]
    if not keep:
        raise ValueError("choice set must be nonempty")
    return float(-logsumexp(v[keep] / nesting) / b_cost)


def mode_cv_for_microtransit(ind, trip, beta, nesting, policy,
                             fare_override=None) -> float:
    """Dollar value of microtransit being available for one trip: surplus with
    the full mode set minus surplus without microtransit. Nonnegative."""
    full = mode_cs(ind, trip, beta, nesting, policy, fare_override=fare_override)
    without = mode_cs(ind, trip, beta, nesting, policy,
                      exclude=(ModeId.microtransit,), fare_override=fare_override)
    return full - without


def _nest_probabilities(trip, beta, nesting, fare):
    """Microtransit choice probabilities inside the with-pass and no-pass
    nests (utilities scaled by the nesting parameter)."""
    v_nrp = attribute_matrix(trip, fare) @ beta
    v_rp = v_nrp.copy()
    v_rp[MT_ROW] -= beta[PARAM_INDEX["cost"]] * fare
    p_rp = softmax_probabilities(v_rp / nesting)[MT_ROW]
    p_nrp = softmax_probabilities(v_nrp / nesting)[MT_ROW]
    return float(p_rp), float(p_nrp)


def ridepass_elasticity(
    ind: Individual,
    trip: TripRecord,
    params,
    sp: SubscriptionParameters,
    policy: PricingPolicy,
    wrt: str = "wait",
    pass_type: str = "weekly",
    ownership: Optional[tuple] = None,
    paper_form: bool = False,
) -> float:
    """Elasticity of one individual's pass-purchase probability with respect
    to one trip's microtransit waiting or in-vehicle time.

    The analytic form is a product of three factors: a purchase-probability
    sensitivity times the day-matched gain coefficient, the attribute
    coefficient times the difference in microtransit choice probabilities
    between the with-pass and no-pass nests, and the attribute level divided
    by the purchase probability.

    The default is exact for this pipeline (it matches a finite difference of
    the purchase probability): the middle factor carries the 1/nesting from
    the scaled logsum, and the first factor uses P * p_none because the gain
    shifts the weekly and monthly utilities together. ``paper_form`` instead
    uses the textbook binary-logit factors P(1-P) and no nesting division.

    Returns 0.0 when the purchase probability underflows to zero.
    """
    if wrt not in ("wait", "in_vehicle"):
        raise ValueError("wrt must be 'wait' or 'in_vehicle'")
    if pass_type not in ("weekly", "monthly"):
        raise ValueError("pass_type must be 'weekly' or 'monthly'")
    beta = params.agent_vector(trip.trip_id) if hasattr(params, "agent_vector") \
        else np.asarray(params, dtype=float)
    day = trip.day_type
    b_gain = sp.beta_gain_we if day == DayType.weekday else sp.beta_gain_wd
    nesting = b_gain
    if nesting <= 0:
        raise ValueError("day-matched gain coefficient must be positive")

    if ownership is None:
        p = softmax_probabilities(np.asarray(subscription_utilities(ind, sp, policy)))
        ownership = (float(p[0]), float(p[1]), float(p[2]))
    p_w, p_m, p_none = ownership
    p_pass = p_w if pass_type == "weekly" else p_m
    if p_pass <= 0.0:
        return 0.0

    fare = microtransit_fare(trip, policy)
    p_rp, p_nrp = _nest_probabilities(trip, beta, nesting, fare)

    if wrt == "wait":
        b_attr = beta[PARAM_INDEX["wt_microtransit"]]
        attr = trip.mt_wait_time
    else:
        b_attr = beta[PARAM_INDEX["tt_auto"]]
        attr = trip.mode_attrs[ModeId.microtransit].travel_time

    if paper_form:
        factor1 = p_pass * (1.0 - p_pass) * b_gain
        factor2 = b_attr * (p_rp - p_nrp)
    else:
        factor1 = p_pass * p_none * b_gain
        factor2 = b_attr * (p_rp - p_nrp) / nesting
    factor3 = attr / p_pass
    return float(factor1 * factor2 * factor3)


def compute_dmr(population: Population, p_mt: Mapping[str, float]) -> float:
    """Daily microtransit ridership: the 5/7-2/7 day-type weighted sum of
    per-trip microtransit probabilities (or 0/1 indicators)."""
    wd = sum(p_mt[t.trip_id] for t in population.trips.values()
             if t.day_type == DayType.weekday)
    we = sum(p_mt[t.trip_id] for t in population.trips.values()
             if t.day_type == DayType.weekend)
    return WEEKDAY_WEIGHT * wd + WEEKEND_WEIGHT * we


def compute_tns(ownership: Mapping[str, tuple],
                hard: bool = False) -> tuple[float, float, float]:
    """(weekly, monthly, total) subscriber counts: probability sums in
    expectation mode, argmax indicator sums in hard mode."""
    w = m = 0.0
    for p in ownership.values():
        if hard:
            k = int(np.argmax(p))
            w += float(k == 0)
            m += float(k == 1)
        else:
            w += p[0]
            m += p[1]
    return w, m, w + m


def compute_tdr(
    population: Population,
    ownership: Mapping[str, tuple],
    p_mt: Mapping[str, float],
    policy: PricingPolicy,
) -> tuple[float, float, float]:
    """(fare component, pass component, total) daily revenue in dollars.

    Fares accrue only on non-subscriber microtransit trips (weighted by the
    no-pass probability); passes accrue at 1/7 of the weekly and 1/30 of the
    monthly price per subscriber.
    """
    fares = 0.0
    for trip in population.trips.values():
        p = ownership.get(trip.individual_id, (0.0, 0.0, 1.0))
        share = WEEKDAY_WEIGHT if trip.day_type == DayType.weekday else WEEKEND_WEIGHT
        fares += share * p[2] * p_mt[trip.trip_id] * microtransit_fare(trip, policy)
    ns_w, ns_m, _ = compute_tns(ownership)
    passes = (policy.price_weekly / 7.0) * ns_w + (policy.price_monthly / 30.0) * ns_m
    return fares, passes, fares + passes


def policy_metrics(
    population: Population,
    ownership: Mapping[str, tuple],
    p_mt: Mapping[str, float],
    policy: PricingPolicy,
) -> PolicyMetrics:
    dmr = compute_dmr(population, p_mt)
    ns_w, ns_m, ns = compute_tns(ownership)
    fares, passes, total = compute_tdr(population, ownership, p_mt, policy)
    return PolicyMetrics(dmr=dmr, tns_weekly=ns_w, tns_monthly=ns_m,
                         tns_total=ns, tdr_fares=fares, tdr_passes=passes,
                         tdr_total=total)


def vot_by_segment(population: Population, params, segment: str,
                   day: Optional[DayType] = None) -> tuple[float, float]:
    """(in-vehicle, wait) value of time in dollars per hour for one segment:
    segment means of the time coefficients divided by the segment mean cost
    coefficient. Times are in hours and costs in dollars, so the ratio is
    already dollars per hour."""
    tts, wts, costs = [], [], []
    for ind in population.individuals.values():
        if ind.segment != segment:
            continue
        tts.append(params.individual_value(ind.individual_id, "tt_auto"))
        wts.append(params.individual_value(ind.individual_id, "wt_microtransit"))
        costs.append(params.individual_value(ind.individual_id, "cost"))
    if not costs:
        raise ValueError(f"no individuals in segment {segment!r}")
    mean_cost = float(np.mean(costs))
    if mean_cost == 0:
        raise ValueError("mean cost coefficient is zero")
    return float(np.mean(tts)) / mean_cost, float(np.mean(wts)) / mean_cost


def segment_summary(population: Population, params, segments=None):
    """Per-segment value-of-time table as a data frame."""
    import pandas as pd

    from .core import SEGMENTS

    rows = []
    for seg in segments or SEGMENTS:
        try:
            vot_tt, vot_wt = vot_by_segment(population, params, seg)
        except ValueError:
            continue
        rows.append({"segment": seg, "vot_in_vehicle_per_hour": vot_tt,
                     "vot_wait_per_hour": vot_wt})
    return pd.DataFrame(rows)
