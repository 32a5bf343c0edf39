"""Scenario orchestration: pricing-grid sweeps and fare-subsidy evaluations.

A scenario bundles a population source, estimated parameters, and the
equilibrium-loop settings; the sweep runs the day-to-day loop to equilibrium
in every pricing cell and reports the revenue-maximizing cell, and the
subsidy evaluation runs paired (same-seed) equilibria with and without the
discount so every delta is a clean difference.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .core import (
    MODE_INDEX,
    DayType,
    ModeId,
    Population,
    PricingPolicy,
    SubsidySpec,
)
from .day2day import LoopConfig, run_to_equilibrium
from .dispatch import DispatchConfig
from .joint import NESTING_FLOOR, JointState
from .welfare import PolicyMetrics, mode_cs, policy_metrics

MT_ROW = MODE_INDEX[ModeId.microtransit]
DRIVE_ROW = MODE_INDEX[ModeId.driving]


@dataclass
class PricingGrid:
    weekly_range: tuple = (10.0, 40.0)
    monthly_range: tuple = (40.0, 100.0)
    intervals: int = 20

    def __post_init__(self):
        if self.intervals < 1:
            raise ValueError("intervals must be >= 1")

    def cells(self) -> list[tuple[float, float]]:
        """intervals^2 (weekly, monthly) price pairs, row-major."""
        w = np.linspace(*self.weekly_range, self.intervals)
        m = np.linspace(*self.monthly_range, self.intervals)
        return [(float(a), float(b)) for a, b in itertools.product(w, m)]


@dataclass
class ScenarioConfig:
    seed: int = 42
    grid: PricingGrid = field(default_factory=PricingGrid)
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    loop: LoopConfig = field(default_factory=lambda: LoopConfig(expectation_mode=True))
    base_policy: PricingPolicy = field(default_factory=PricingPolicy)
    jobs: int = 1


def _equilibrium_metrics(
    population: Population,
    params: JointState,
    policy: PricingPolicy,
    config: ScenarioConfig,
) -> tuple[PolicyMetrics, bool, dict, dict]:
    report = run_to_equilibrium(
        population, params, policy, config.dispatch, config.loop)
    p_mt = {t: float(p[MT_ROW]) for t, p in report.probabilities.items()}
    metrics = policy_metrics(population, report.ownership, p_mt, policy)
    return metrics, report.converged, report.ownership, report.probabilities


def _sweep_cell(args):
    population, params, config, pw, pm = args
    policy = replace(config.base_policy, price_weekly=pw, price_monthly=pm)
    metrics, converged, _, _ = _equilibrium_metrics(population, params, policy, config)
    return {
        "price_weekly": pw,
        "price_monthly": pm,
        "dmr": metrics.dmr,
        "tns_weekly": metrics.tns_weekly,
        "tns_monthly": metrics.tns_monthly,
        "tns_total": metrics.tns_total,
        "tdr_fares": metrics.tdr_fares,
        "tdr_passes": metrics.tdr_passes,
        "tdr_total": metrics.tdr_total,
        "converged": converged,
    }


def run_pricing_sweep(
    population: Population,
    params: JointState,
    config: ScenarioConfig,
) -> tuple[pd.DataFrame, Optional[dict]]:
    """Equilibrium metrics over the full pricing grid.

    Returns the surface (one row per cell, row-major over the grid) and the
    revenue-maximizing converged cell (None if nothing converged).
    Non-converged cells are flagged and excluded from the argmax.
    """
    cells = config.grid.cells()
    jobs = [(population, params, config, pw, pm) for pw, pm in cells]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    surface = pd.DataFrame(rows)
    ok = surface[surface["converged"]]
    best = None
    if len(ok):
        best = ok.loc[ok["tdr_total"].idxmax()].to_dict()
    return surface, best


@dataclass
class SubsidyReport:
    delta_mt_trips: float
    delta_driving_trips: float
    delta_cs_total: float
    delta_cs_per_affected_trip: float
    n_affected_trips: int
    required_subsidy_per_day: float  # forgone fare revenue on discounted trips
    baseline: PolicyMetrics
    subsidized: PolicyMetrics


def _day_weight(trip) -> float:
    from .core import WEEKDAY_WEIGHT, WEEKEND_WEIGHT

    return WEEKDAY_WEIGHT if trip.day_type == DayType.weekday else WEEKEND_WEIGHT


def run_subsidy_scenario(
    population: Population,
    params: JointState,
    subsidy: SubsidySpec,
    config: ScenarioConfig,
) -> SubsidyReport:
    """Paired with/without-subsidy equilibrium comparison.

    Both runs use identical seeds, so with a zero discount every delta is
    exactly zero. The required subsidy is the expected forgone fare revenue
    per day on discounted microtransit trips, valued at the subsidized
    equilibrium's ridership.
    """
    if not subsidy.zone_set:
        raise ValueError("subsidy zone set must be nonempty")
    base_policy = replace(config.base_policy, subsidy=None)
    sub_policy = replace(config.base_policy, subsidy=subsidy)

    m0, conv0, own0, probs0 = _equilibrium_metrics(population, params, base_policy, config)
    m1, conv1, own1, probs1 = _equilibrium_metrics(population, params, sub_policy, config)

    affected = [t for t in population.trips.values() if subsidy.applies(t)]
    d_mt = d_drive = 0.0
    for trip in population.trips.values():
        w = _day_weight(trip)
        d_mt += w * (probs1[trip.trip_id][MT_ROW] - probs0[trip.trip_id][MT_ROW])
        d_drive += w * (probs1[trip.trip_id][DRIVE_ROW] - probs0[trip.trip_id][DRIVE_ROW])

    # consumer-surplus change on affected trips: logsum difference between the
    # discounted and full fare, converted with the agent's cost coefficient
    from .core import microtransit_fare

    d_cs_total = 0.0
    for trip in affected:
        taste = (params.weekday_params if trip.day_type == DayType.weekday
                 else params.weekend_params)
        beta = taste.agent_vector(trip.trip_id)
        sp = params.sub_params
        nesting = max(sp.beta_gain_we if trip.day_type == DayType.weekday
                      else sp.beta_gain_wd, NESTING_FLOOR)
        ind = population.individuals[trip.individual_id]
        cs_sub = mode_cs(ind, trip, beta, nesting, sub_policy)
        cs_base = mode_cs(ind, trip, beta, nesting, base_policy)
        d_cs_total += cs_sub - cs_base

    subsidy_cost = 0.0
    for trip in affected:
        full = microtransit_fare(trip, base_policy)
        discounted = microtransit_fare(trip, sub_policy)
        p_none = own1.get(trip.individual_id, (0, 0, 1.0))[2]
        subsidy_cost += _day_weight(trip) * p_none * probs1[trip.trip_id][MT_ROW] \
            * (full - discounted)

    return SubsidyReport(
        delta_mt_trips=d_mt,
        delta_driving_trips=d_drive,
        delta_cs_total=d_cs_total,
        delta_cs_per_affected_trip=d_cs_total / len(affected) if affected else 0.0,
        n_affected_trips=len(affected),
        required_subsidy_per_day=subsidy_cost,
        baseline=m0,
        subsidized=m1,
    )


def subsidy_report_frame(report: SubsidyReport) -> pd.DataFrame:
    rows = [
        ("delta_mt_trips_per_day", report.delta_mt_trips),
        ("delta_driving_trips_per_day", report.delta_driving_trips),
        ("delta_cs_total", report.delta_cs_total),
        ("delta_cs_per_affected_trip", report.delta_cs_per_affected_trip),
        ("n_affected_trips", report.n_affected_trips),
        ("required_subsidy_per_day", report.required_subsidy_per_day),
        ("baseline_dmr", report.baseline.dmr),
        ("subsidized_dmr", report.subsidized.dmr),
        ("baseline_tdr_total", report.baseline.tdr_total),
        ("subsidized_tdr_total", report.subsidized.tdr_total),
    ]
    return pd.DataFrame(rows, columns=["metric", "value"])
