"""Seeded synthetic travel-demand generator.

Produces an Arlington-like desk-scale population: four demographic segments,
a square zone grid, per-day-type trips with five-mode attribute tables, and
observed modes drawn from a documented ground-truth utility model so that
estimation recovery is testable. Mode shares are realized by quota sampling
(sequential draws against remaining mode quotas), which pins realized shares
to their targets even for the sub-1% microtransit share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    MODES,
    MODE_INDEX,
    N_PARAMS,
    PARAM_INDEX,
    DayType,
    Individual,
    ModeAttrs,
    ModeId,
    Population,
    PricingPolicy,
    Purpose,
    SubscriptionParameters,
    TourType,
    TripRecord,
    attribute_matrix,
)

SEGMENT_SHARES = {
    "not_low_income": 0.5452,
    "low_income": 0.1156,
    "senior": 0.1025,
    "student": 0.2367,
}

MODE_SHARE_TARGETS = {
    DayType.weekday: {"driving": 0.6355, "biking": 0.0085, "walking": 0.0864,
                      "carpool": 0.2648, "microtransit": 0.0048},
    DayType.weekend: {"driving": 0.6750, "biking": 0.0043, "walking": 0.0611,
                      "carpool": 0.2559, "microtransit": 0.0036},
}

# Ground-truth taste means per segment (utils per hour / per dollar). The
# cost column gives the not-low-income segment the highest and the low-income
# segment the lowest value of time.
SEGMENT_TASTES = {
    "not_low_income": {"tt_auto": -4.0, "tt_non_auto": -4.3, "wt_microtransit": -4.3, "cost": -0.30},
    "low_income": {"tt_auto": -3.4, "tt_non_auto": -4.2, "wt_microtransit": -3.7, "cost": -0.45},
    "senior": {"tt_auto": -3.6, "tt_non_auto": -4.2, "wt_microtransit": -3.9, "cost": -0.40},
    "student": {"tt_auto": -3.8, "tt_non_auto": -4.25, "wt_microtransit": -4.1, "cost": -0.35},
}

GENERIC_TRUE = {
    "b_shopping": -0.25,
    "b_school": -0.35,
    "b_other": -0.45,
    "b_commute": -0.30,
    "b_noncommute": -0.15,
}

ASC_START = {"asc_driving": 1.4, "asc_biking": -0.7, "asc_walking": 0.2,
             "asc_microtransit": -1.0}

PURPOSE_SHARES = {
    DayType.weekday: {Purpose.shopping: 0.17, Purpose.school: 0.20,
                      Purpose.other: 0.59, Purpose.work: 0.04},
    DayType.weekend: {Purpose.shopping: 0.27, Purpose.school: 0.02,
                      Purpose.other: 0.69, Purpose.work: 0.02},
}

COMMUTE_SHARE = {DayType.weekday: 0.45, DayType.weekend: 0.13}

# distance brackets sampled with fixed masses so the mean bracket fare under
# the default (<=2mi $3, <=5mi $4, else $5) schedule lands at $3.82
DISTANCE_BRACKETS = ((0.3, 2.0, 0.33), (2.0, 5.0, 0.52), (5.0, 9.0, 0.15))

MT_WAIT_MINUTES = {DayType.weekday: (14.12, 0.38), DayType.weekend: (11.71, 0.40)}

# street speeds (mph) chosen so mean travel times track the target attribute
# table at the generator's ~3.25 mi mean trip distance
SPEEDS = {"driving": 15.6, "biking": 10.9, "walking": 4.76}


@dataclass
class GeneratorSpec:
    population_size: int = 5000
    segment_shares: dict = field(default_factory=lambda: dict(SEGMENT_SHARES))
    zone_grid: tuple[int, int] = (10, 10)
    zone_spacing_miles: float = 1.0
    mode_share_targets: dict = field(default_factory=lambda: {
        d: dict(v) for d, v in MODE_SHARE_TARGETS.items()})
    trips_per_person: dict = field(default_factory=lambda: {
        DayType.weekday: 2.4, DayType.weekend: 2.2})
    seed: int = 42
    tune_ascs: bool = True
    # "quota" pins realized shares exactly; "logit" draws independently from
    # the generating choice model (preferred for parameter recovery tests)
    sampling: str = "quota"
    distance_brackets: tuple = DISTANCE_BRACKETS
    fixed_ascs: dict = field(default_factory=lambda: dict(ASC_START))
    segment_tastes: dict = field(default_factory=lambda: {
        s: dict(v) for s, v in SEGMENT_TASTES.items()})
    generic_params: dict = field(default_factory=lambda: dict(GENERIC_TRUE))
    taste_jitter: tuple[float, float] = (0.8, 1.15)
    policy: PricingPolicy = field(default_factory=PricingPolicy)
    true_subscription: SubscriptionParameters = field(
        default_factory=lambda: SubscriptionParameters(
            f_rp=0.478, beta_gain_we=3.156, beta_gain_wd=1.505,
            beta_mt_user=4.767, asc_weekly=-0.844, asc_monthly=-1.186))

    def __post_init__(self):
        total = sum(self.segment_shares.values())
        if abs(total - 1.0) > 1e-4:
            raise ValueError("segment shares must sum to 1")
        if self.sampling not in ("quota", "logit", "argmax"):
            raise ValueError("sampling must be 'quota', 'logit' or 'argmax'")


@dataclass
class GroundTruth:
    """What the generator actually used, for recovery tests."""

    ascs: dict
    segment_tastes: dict
    generic_params: dict
    agent_matrix: np.ndarray  # (n_trips, |K|) true per-agent vectors
    trip_order: list  # trip ids aligned with agent_matrix rows
    hit_rate: dict  # day type -> fraction of observed == argmax(true P)
    subscription: SubscriptionParameters


def _exact_allocation(keys, shares, n, rng) -> list:
    """Assign n items to keys matching shares up to rounding, shuffled."""
    keys = list(keys)
    counts = [int(math.floor(shares[k] * n)) for k in keys]
    remainders = [shares[k] * n - c for k, c in zip(keys, counts)]
    for i in np.argsort(remainders)[::-1][: n - sum(counts)]:
        counts[int(i)] += 1
    out = []
    for k, c in zip(keys, counts):
        out.extend([k] * c)
    rng.shuffle(out)
    return out


def _sample_distances(n, rng, brackets=DISTANCE_BRACKETS) -> np.ndarray:
    labels = _exact_allocation(
        range(len(brackets)),
        {i: b[2] for i, b in enumerate(brackets)},
        n,
        rng,
    )
    lo = np.array([brackets[i][0] for i in labels])
    hi = np.array([brackets[i][1] for i in labels])
    return rng.uniform(lo, hi)


def _quota_sample(P: np.ndarray, quotas: np.ndarray, rng) -> np.ndarray:
    """Sequentially draw one category per row with probabilities reweighted
    by remaining quotas; realizes the quota totals exactly."""
    n, k = P.shape
    out = np.zeros(n, dtype=int)
    q = quotas.astype(float).copy()
    order = rng.permutation(n)
    for i in order:
        w = P[i] * q
        s = w.sum()
        if s <= 0:
            w = q.copy()
            s = w.sum()
        out[i] = rng.choice(k, p=w / s)
        q[out[i]] -= 1.0
    return out


def generate_population(spec: GeneratorSpec) -> tuple[Population, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    n = spec.population_size
    if n == 0:
        return Population({}, {}), GroundTruth(
            dict(spec.fixed_ascs), spec.segment_tastes, spec.generic_params,
            np.zeros((0, N_PARAMS)), [], {}, spec.true_subscription)

    segments = _exact_allocation(spec.segment_shares.keys(), spec.segment_shares, n, rng)
    individuals = {
        f"p{i:06d}": Individual(individual_id=f"p{i:06d}", segment=segments[i])
        for i in range(n)
    }

    # per-individual true taste vector (individual-level components)
    lo_j, hi_j = spec.taste_jitter
    ind_ids = list(individuals)
    ind_tastes = {}
    for ind_id in ind_ids:
        seg = individuals[ind_id].segment
        base = spec.segment_tastes[seg]
        jit = rng.uniform(lo_j, hi_j, size=4)
        ind_tastes[ind_id] = {
            "tt_auto": base["tt_auto"] * jit[0],
            "tt_non_auto": base["tt_non_auto"] * jit[1],
            "wt_microtransit": base["wt_microtransit"] * jit[2],
            "cost": base["cost"] * jit[3],
        }

    gx, gy = spec.zone_grid
    zone_ids = [f"z{ix:02d}_{iy:02d}" for ix in range(gx) for iy in range(gy)]

    trips: dict[str, TripRecord] = {}
    all_rows = []  # (trip_id, day, X row info) for choice sampling
    trip_counter = 0
    for day in (DayType.weekday, DayType.weekend):
        mean_trips = spec.trips_per_person[day]
        counts = rng.poisson(mean_trips, size=n)
        total = int(counts.sum())
        distances = _sample_distances(total, rng, spec.distance_brackets)
        purposes = _exact_allocation(
            PURPOSE_SHARES[day].keys(), PURPOSE_SHARES[day], total, rng)
        commute_flags = _exact_allocation(
            [True, False],
            {True: COMMUTE_SHARE[day], False: 1 - COMMUTE_SHARE[day]},
            total, rng)
        wait_mean, wait_std = MT_WAIT_MINUTES[day]

        row = 0
        for ind_idx, ind_id in enumerate(ind_ids):
            for _ in range(counts[ind_idx]):
                d = float(distances[row])
                origin = zone_ids[rng.integers(len(zone_ids))]
                ox, oy = (int(origin[1:3]), int(origin[4:6]))
                ang = rng.uniform(0, 2 * math.pi)
                dx = int(round(d * math.cos(ang) / spec.zone_spacing_miles))
                dy = int(round(d * math.sin(ang) / spec.zone_spacing_miles))
                dest = f"z{min(max(ox + dx, 0), gx - 1):02d}_{min(max(oy + dy, 0), gy - 1):02d}"

                tt_drive = d / SPEEDS["driving"] * rng.normal(1.0, 0.08)
                tt_drive = max(tt_drive, 0.02)
                tt_carpool = tt_drive * max(rng.normal(1.01, 0.04), 0.8)
                tt_bike = max(d / SPEEDS["biking"] * rng.normal(1.0, 0.08), 0.03)
                tt_walk = max(d / SPEEDS["walking"] * rng.normal(1.0, 0.08), 0.05)
                tt_mt = tt_drive * max(rng.normal(1.005, 0.03), 0.8)
                wt_mt = max(rng.normal(wait_mean, wait_std), 1.0) / 60.0

                trip_id = f"t{trip_counter:07d}"
                trip_counter += 1
                trip = TripRecord(
                    trip_id=trip_id,
                    individual_id=ind_id,
                    origin_zone=origin,
                    destination_zone=dest,
                    day_type=day,
                    depart_time=float(rng.uniform(360, 1320)),
                    distance=d,
                    purpose=Purpose(purposes[row]),
                    tour_type=TourType.commute if commute_flags[row] else TourType.non_commute,
                    observed_mode=ModeId.driving,  # placeholder until sampled
                    mode_attrs={
                        ModeId.driving: ModeAttrs(tt_drive, d * 0.095),
                        ModeId.biking: ModeAttrs(tt_bike),
                        ModeId.walking: ModeAttrs(tt_walk),
                        ModeId.carpool: ModeAttrs(tt_carpool, d * 0.049),
                        ModeId.microtransit: ModeAttrs(tt_mt, 0.0),
                    },
                    mt_wait_time=wt_mt,
                )
                from .core import microtransit_fare

                trip.mode_attrs[ModeId.microtransit].cost = microtransit_fare(trip, spec.policy)
                trips[trip_id] = trip
                ind = individuals[ind_id]
                ind.trips_for(day).append(trip_id)
                row += 1

    # build true agent vectors and attribute tensors, then sample choices
    trip_order = list(trips)
    n_trips = len(trip_order)
    B = np.zeros((n_trips, N_PARAMS))
    X = np.zeros((n_trips, len(MODES), N_PARAMS))
    day_of = np.array([trips[t].day_type == DayType.weekday for t in trip_order])
    for i, trip_id in enumerate(trip_order):
        trip = trips[trip_id]
        t = ind_tastes[trip.individual_id]
        for k, v in t.items():
            B[i, PARAM_INDEX[k]] = v
        for k, v in spec.generic_params.items():
            B[i, PARAM_INDEX[k]] = v
        X[i] = attribute_matrix(trip, trip.mode_attrs[ModeId.microtransit].cost)

    ascs = dict(spec.fixed_ascs)
    base_util = np.einsum("njk,nk->nj", X, B)

    hit = {}
    for day, is_day in ((DayType.weekday, day_of), (DayType.weekend, ~day_of)):
        idx = np.flatnonzero(is_day)
        if idx.size == 0:
            hit[day] = float("nan")
            continue
        targets = np.array([spec.mode_share_targets[day][m.value] for m in MODES])
        targets = targets / targets.sum()
        asc_vec = np.array([
            ascs.get(f"asc_{m.value}", 0.0) for m in MODES])
        if spec.tune_ascs:
            for _ in range(40):
                U = base_util[idx] + asc_vec
                U -= U.max(axis=1, keepdims=True)
                E = np.exp(U)
                P = E / E.sum(axis=1, keepdims=True)
                shares = P.mean(axis=0)
                adj = np.log(targets / np.maximum(shares, 1e-12))
                adj -= adj[MODE_INDEX[ModeId.carpool]]  # carpool is the reference
                asc_vec = asc_vec + adj
                if np.abs(adj).max() < 1e-10:
                    break
            for m in MODES:
                if m != ModeId.carpool:
                    ascs[f"asc_{m.value}_{day.value}"] = float(asc_vec[MODE_INDEX[m]])
        U = base_util[idx] + asc_vec
        U -= U.max(axis=1, keepdims=True)
        E = np.exp(U)
        P = E / E.sum(axis=1, keepdims=True)
        if spec.sampling == "quota":
            quotas = np.round(targets * idx.size).astype(float)
            quotas[np.argmax(quotas)] += idx.size - quotas.sum()
            chosen = _quota_sample(P, quotas, rng)
        elif spec.sampling == "argmax":
            chosen = P.argmax(axis=1)
        else:
            cum = P.cumsum(axis=1)
            chosen = (rng.random((idx.size, 1)) < cum).argmax(axis=1)
        for local, i in enumerate(idx):
            trips[trip_order[i]].observed_mode = MODES[chosen[local]]
            for m in MODES:
                col = f"asc_{m.value}"
                if col in PARAM_INDEX and m != ModeId.carpool:
                    B[i, PARAM_INDEX[col]] = asc_vec[MODE_INDEX[m]]
        hit[day] = float(np.mean(chosen == P.argmax(axis=1)))

    pop = Population(individuals, trips)
    pop.refresh_mt_flags()
    truth = GroundTruth(
        ascs=ascs,
        segment_tastes=spec.segment_tastes,
        generic_params=spec.generic_params,
        agent_matrix=B,
        trip_order=trip_order,
        hit_rate=hit,
        subscription=spec.true_subscription,
    )
    return pop, truth
