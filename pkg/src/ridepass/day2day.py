"""Day-to-day perception learning loop.

Travelers who rode microtransit update their perceived in-vehicle and waiting
times toward what they experienced (exponential smoothing with learning rate
theta); everyone else adopts the successive-average population perception.
Each simulated day recomputes ownership-weighted fares, evaluates mode choice
under current perceptions, realizes microtransit requests, runs the dispatch
simulator, and updates perceptions, iterating until daily microtransit
ridership and subscription counts both settle (a stochastic user equilibrium).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .calibration import ownership_probabilities
from .core import (
    MODE_INDEX,
    PARAM_INDEX,
    DayType,
    ModeId,
    Population,
    PricingPolicy,
    SubscriptionParameters,
    WEEKDAY_WEIGHT,
    WEEKEND_WEIGHT,
    attribute_matrix,
    logsumexp,
    microtransit_fare,
    softmax_probabilities,
)
from .dispatch import DispatchConfig, Request, ZoneNetwork, simulate_day
from .joint import NESTING_FLOOR, JointState, update_fares_with_ownership

MT_ROW = MODE_INDEX[ModeId.microtransit]


@dataclass
class Perception:
    """Per-individual and population-average perceived microtransit times.

    All values are minutes. The population averages carry a day counter so the
    successive average uses exact 1/d weights.
    """

    perceived_tt: dict = field(default_factory=dict)  # individual_id -> minutes
    perceived_wt: dict = field(default_factory=dict)
    avg_tt: float = 0.0
    avg_wt: float = 0.0
    day: int = 0

    def validate(self) -> None:
        values = list(self.perceived_tt.values()) + list(self.perceived_wt.values())
        values += [self.avg_tt, self.avg_wt]
        arr = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("perceptions must be nonnegative and finite")


@dataclass
class LoopConfig:
    theta: float = 0.5
    tolerance: float = 0.01  # relative day-over-day change in DMR and TNS
    max_days: int = 50
    seed: int = 0
    expectation_mode: bool = False  # deterministic: no demand sampling
    # expectation mode still needs discrete requests for the simulator; trips
    # below this choice probability are not offered to the fleet
    expectation_floor: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


def update_user_perception(prev: float, experienced: float, theta: float) -> float:
    """Exponential-smoothing update of one traveler's perceived minutes."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    return (1.0 - theta) * prev + theta * experienced


def update_population_perception(
    state: Perception,
    experienced_tt_mean: Optional[float],
    experienced_wt_mean: Optional[float],
    non_user_ids: Sequence[str] = (),
) -> Perception:
    """Advance the population averages one day with exact 1/d weights.

    Days with no microtransit users pass None and carry the previous averages
    forward without advancing the counter (the day's mean is undefined).
    Non-users' individual perceptions are overwritten with the new averages.
    """
    if experienced_tt_mean is None or experienced_wt_mean is None:
        for i in non_user_ids:
            state.perceived_tt[i] = state.avg_tt
            state.perceived_wt[i] = state.avg_wt
        return state
    d = state.day + 1
    state.avg_tt = (1.0 - 1.0 / d) * state.avg_tt + (1.0 / d) * experienced_tt_mean
    state.avg_wt = (1.0 - 1.0 / d) * state.avg_wt + (1.0 / d) * experienced_wt_mean
    state.day = d
    for i in non_user_ids:
        state.perceived_tt[i] = state.avg_tt
        state.perceived_wt[i] = state.avg_wt
    return state


def initial_perception(population: Population) -> Perception:
    """Seed perceptions from each individual's own trip attributes (their mean
    scheduled microtransit times), population averages from the global mean."""
    per_tt, per_wt = {}, {}
    all_tt, all_wt = [], []
    for ind in population.individuals.values():
        tts, wts = [], []
        for trip_id in ind.weekday_trips + ind.weekend_trips:
            trip = population.trips[trip_id]
            tts.append(trip.mode_attrs[ModeId.microtransit].travel_time * 60.0)
            wts.append(trip.mt_wait_time * 60.0)
        per_tt[ind.individual_id] = float(np.mean(tts)) if tts else 0.0
        per_wt[ind.individual_id] = float(np.mean(wts)) if wts else 0.0
        all_tt.extend(tts)
        all_wt.extend(wts)
    return Perception(
        perceived_tt=per_tt,
        perceived_wt=per_wt,
        avg_tt=float(np.mean(all_tt)) if all_tt else 0.0,
        avg_wt=float(np.mean(all_wt)) if all_wt else 0.0,
        day=0,
    )


def _perceived_attribute_matrix(trip, fare: float, tt_min: float,
                                wt_min: float) -> np.ndarray:
    x = attribute_matrix(trip, fare)
    x[MT_ROW, PARAM_INDEX["tt_auto"]] = tt_min / 60.0
    x[MT_ROW, PARAM_INDEX["wt_microtransit"]] = wt_min / 60.0
    return x


def mode_probabilities_under_perception(
    population: Population,
    params: JointState,
    perception: Perception,
    fares: Mapping[str, float],
) -> dict[str, np.ndarray]:
    """Per-trip five-mode choice probabilities with perceived microtransit
    times substituted for the scheduled ones."""
    out = {}
    for trip in population.trips.values():
        taste = (params.weekday_params if trip.day_type == DayType.weekday
                 else params.weekend_params)
        beta = taste.agent_vector(trip.trip_id)
        tt = perception.perceived_tt.get(trip.individual_id, perception.avg_tt)
        wt = perception.perceived_wt.get(trip.individual_id, perception.avg_wt)
        x = _perceived_attribute_matrix(trip, fares[trip.trip_id], tt, wt)
        out[trip.trip_id] = softmax_probabilities(x @ beta)
    return out


def _perceived_gain(ind, day: DayType, taste, nesting: float,
                    policy: PricingPolicy, population: Population,
                    perception: Perception) -> float:
    """Ride-pass logsum gain with perceived microtransit times."""
    total = 0.0
    tt = perception.perceived_tt.get(ind.individual_id, perception.avg_tt)
    wt = perception.perceived_wt.get(ind.individual_id, perception.avg_wt)
    for trip_id in ind.trips_for(day):
        trip = population.trips[trip_id]
        beta = taste.agent_vector(trip_id)
        fare = microtransit_fare(trip, policy)
        x = _perceived_attribute_matrix(trip, fare, tt, wt)
        v_nrp = x @ beta
        v_rp = v_nrp.copy()
        v_rp[MT_ROW] -= beta[PARAM_INDEX["cost"]] * fare
        total += float(logsumexp(v_rp / nesting) - logsumexp(v_nrp / nesting))
    return total


def _refresh_ownership(population: Population, params: JointState,
                       policy: PricingPolicy, perception: Perception) -> dict:
    sp = params.sub_params
    nest_we = max(sp.beta_gain_we, NESTING_FLOOR)
    nest_wd = max(sp.beta_gain_wd, NESTING_FLOOR)
    for ind in population.individuals.values():
        ind.gain_we = _perceived_gain(ind, DayType.weekday, params.weekday_params,
                                      nest_we, policy, population, perception)
        ind.gain_wd = _perceived_gain(ind, DayType.weekend, params.weekend_params,
                                      nest_wd, policy, population, perception)
    return ownership_probabilities(sp, population, policy)


def _realize_requests(
    population: Population,
    day_type: DayType,
    p_mt: Mapping[str, float],
    cfg: LoopConfig,
    day_index: int,
) -> tuple[list, dict]:
    """(time-sorted request list, request_id -> probability weight)."""
    rng = np.random.default_rng((cfg.seed, day_index, int(day_type == DayType.weekend)))
    reqs, weights = [], {}
    for trip in population.trips.values():
        if trip.day_type != day_type:
            continue
        p = p_mt[trip.trip_id]
        if cfg.expectation_mode:
            take = p >= cfg.expectation_floor
            w = p
        else:
            take = rng.random() < p
            w = 1.0
        if take:
            reqs.append(Request(trip.trip_id, trip.origin_zone,
                                trip.destination_zone, trip.depart_time,
                                trip_id=trip.trip_id))
            weights[trip.trip_id] = w
    reqs.sort(key=lambda r: r.request_time)
    return reqs, weights


@dataclass
class DayRecord:
    day: int
    dmr: float
    tns: float
    tns_weekly: float
    tns_monthly: float
    avg_perceived_tt: float
    avg_perceived_wt: float
    realized_tt: float
    realized_wt: float


@dataclass
class EquilibriumReport:
    days: list  # DayRecord per day
    converged: bool
    perception: Perception
    ownership: dict
    probabilities: dict  # trip_id -> mode probability vector at the last day
    final_dmr: float
    final_tns: float

    def trace_frame(self):
        import pandas as pd

        return pd.DataFrame([vars(d) for d in self.days])


def run_to_equilibrium(
    population: Population,
    params: JointState,
    policy: PricingPolicy,
    dispatch_config: Union[DispatchConfig, Mapping[DayType, DispatchConfig], None],
    loop_config: Optional[LoopConfig] = None,
    network: Optional[ZoneNetwork] = None,
    fixed_service: Optional[tuple] = None,
) -> EquilibriumReport:
    """Iterate days until ridership and subscriptions settle.

    ``fixed_service`` = (tt_minutes, wt_minutes) bypasses the simulator with
    constant experienced times (used for deterministic fixed-point tests).
    ``network`` defaults to a grid inferred from the zone ids present.
    """
    cfg = loop_config or LoopConfig()
    if isinstance(dispatch_config, DispatchConfig):
        dispatch_by_day = {DayType.weekday: dispatch_config,
                           DayType.weekend: dispatch_config}
    elif dispatch_config is None:
        if fixed_service is None:
            raise ValueError("dispatch_config is required unless fixed_service is set")
        dispatch_by_day = {}
    else:
        dispatch_by_day = dict(dispatch_config)
    if network is None and fixed_service is None:
        network = _network_from_zones(population)

    perception = initial_perception(population)
    ownership = {i: (0.0, 0.0, 1.0) for i in population.individuals}
    ownership = _refresh_ownership(population, params, policy, perception)

    days: list[DayRecord] = []
    prev_dmr = prev_tns = None
    converged = False
    probabilities: dict = {}

    for day in range(1, cfg.max_days + 1):
        fares = update_fares_with_ownership(population, ownership, policy)
        probs = mode_probabilities_under_perception(population, params,
                                                    perception, fares)
        probabilities = probs
        p_mt = {t: float(p[MT_ROW]) for t, p in probs.items()}

        dmr = (WEEKDAY_WEIGHT * sum(p_mt[t.trip_id] for t in population.trips.values()
                                    if t.day_type == DayType.weekday)
               + WEEKEND_WEIGHT * sum(p_mt[t.trip_id] for t in population.trips.values()
                                      if t.day_type == DayType.weekend))
        tns_w = sum(p[0] for p in ownership.values())
        tns_m = sum(p[1] for p in ownership.values())
        tns = tns_w + tns_m

        # experience the service
        exp_tt: dict[str, list] = {}
        exp_wt: dict[str, list] = {}
        day_tt, day_wt, day_w = [], [], []
        if fixed_service is not None:
            tt_c, wt_c = fixed_service
            for trip in population.trips.values():
                p = p_mt[trip.trip_id]
                if p >= cfg.expectation_floor:
                    exp_tt.setdefault(trip.individual_id, []).append(tt_c)
                    exp_wt.setdefault(trip.individual_id, []).append(wt_c)
                    day_tt.append(tt_c)
                    day_wt.append(wt_c)
                    day_w.append(p if cfg.expectation_mode else 1.0)
        else:
            for day_type in (DayType.weekday, DayType.weekend):
                reqs, weights = _realize_requests(population, day_type, p_mt,
                                                  cfg, day)
                if not reqs:
                    continue
                outcome = simulate_day(reqs, dispatch_by_day[day_type], network)
                share = WEEKDAY_WEIGHT if day_type == DayType.weekday else WEEKEND_WEIGHT
                for rec in outcome.records:
                    if rec["rejected"]:
                        continue
                    trip = population.trips[rec["request_id"]]
                    exp_tt.setdefault(trip.individual_id, []).append(rec["in_vehicle"])
                    exp_wt.setdefault(trip.individual_id, []).append(rec["wait"])
                    day_tt.append(rec["in_vehicle"])
                    day_wt.append(rec["wait"])
                    day_w.append(weights[rec["request_id"]] * share)

        # traveler-level then population-level updates
        users = set(exp_tt)
        for ind_id in users:
            perception.perceived_tt[ind_id] = update_user_perception(
                perception.perceived_tt[ind_id], float(np.mean(exp_tt[ind_id])), cfg.theta)
            perception.perceived_wt[ind_id] = update_user_perception(
                perception.perceived_wt[ind_id], float(np.mean(exp_wt[ind_id])), cfg.theta)
        non_users = [i for i in population.individuals if i not in users]
        if day_w and sum(day_w) > 0:
            w = np.asarray(day_w)
            mean_tt = float(np.average(day_tt, weights=w))
            mean_wt = float(np.average(day_wt, weights=w))
            update_population_perception(perception, mean_tt, mean_wt, non_users)
        else:
            mean_tt = mean_wt = float("nan")
            update_population_perception(perception, None, None, non_users)
        perception.validate()

        ownership = _refresh_ownership(population, params, policy, perception)

        days.append(DayRecord(
            day=day, dmr=dmr, tns=tns, tns_weekly=tns_w, tns_monthly=tns_m,
            avg_perceived_tt=perception.avg_tt, avg_perceived_wt=perception.avg_wt,
            realized_tt=mean_tt, realized_wt=mean_wt,
        ))

        if prev_dmr is not None:
            rel_dmr = abs(dmr - prev_dmr) / max(abs(prev_dmr), 1e-12)
            rel_tns = abs(tns - prev_tns) / max(abs(prev_tns), 1e-12)
            if max(rel_dmr, rel_tns) < cfg.tolerance:
                converged = True
                prev_dmr, prev_tns = dmr, tns
                break
        prev_dmr, prev_tns = dmr, tns

    return EquilibriumReport(
        days=days,
        converged=converged,
        perception=perception,
        ownership=ownership,
        probabilities=probabilities,
        final_dmr=days[-1].dmr if days else 0.0,
        final_tns=days[-1].tns if days else 0.0,
    )


def _network_from_zones(population: Population) -> ZoneNetwork:
    """Reconstruct the generator's grid network from zone id coordinates."""
    zones = set()
    for trip in population.trips.values():
        zones.add(trip.origin_zone)
        zones.add(trip.destination_zone)

    def coords(z: str) -> tuple:
        ix, iy = z[1:].split("_")
        return int(ix), int(iy)

    return ZoneNetwork(sorted((z, (float(coords(z)[0]), float(coords(z)[1])))
                              for z in zones))
