"""Joint estimation of the subscription and mode choice branches.

Alternates lower-branch taste estimation with upper-branch calibration:
estimate weekday/weekend taste parameters under current effective fares,
compute per-individual ride-pass gains and price sensitivities, calibrate the
six subscription parameters against subscriber targets, scale the taste
parameters by the nesting coefficients, average everything with MSA weights,
and recompute ownership-weighted fares until the joint parameter vector
settles.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .calibration import CalibrationResult, CalibrationTargets, calibrate
from .calibration import ownership_probabilities
from .core import (
    DayType,
    ModeId,
    Population,
    PricingPolicy,
    SubscriptionParameters,
    WEEKDAY_WEIGHT,
    WEEKEND_WEIGHT,
    compute_gain,
    link_price_sensitivity,
    microtransit_fare,
)
from .estimation import EstimationConfig, TasteParameterSet, estimate

# Calibration bounds inside the joint loop: the two nesting coefficients are
# floored at a small positive value because later steps divide by them.
NESTING_FLOOR = 0.01
JOINT_CALIBRATION_BOUNDS = (
    (-10.0, 10.0),
    (NESTING_FLOOR, 10.0),
    (NESTING_FLOOR, 10.0),
    (-10.0, 10.0),
    (-10.0, 10.0),
    (-10.0, 10.0),
)


@dataclass
class JointConfig:
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    calibration_starts: int = 8
    calibration_bounds: tuple = JOINT_CALIBRATION_BOUNDS
    tolerance: float = 0.001  # mean relative change across all parameters
    max_iterations: int = 10
    # Algorithm step "scale mode choice parameters using nesting parameters";
    # disabling it keeps the lower branch on the estimation scale (the written
    # procedure both scales parameters and divides utilities by the nesting
    # coefficient, which double-counts the scale -- see the decision record).
    scale_by_nesting: bool = True
    # expectation-weighted fares by default; True thresholds ownership at the
    # most likely alternative instead
    hard_ownership: bool = False
    checkpoint_dir: Optional[str] = None
    seed: int = 0


@dataclass
class JointState:
    iteration: int
    sub_params: SubscriptionParameters
    weekday_params: TasteParameterSet
    weekend_params: TasteParameterSet
    ownership_probs: dict  # individual_id -> (p_weekly, p_monthly, p_none)
    converged: bool
    calibration: Optional[CalibrationResult] = None


def scale_parameters(params: TasteParameterSet, nesting: float) -> TasteParameterSet:
    """Multiply every level of a taste parameter set by a positive nesting
    coefficient; ratios between components are preserved."""
    return params.scaled(nesting)


def update_fares_with_ownership(
    population: Population,
    ownership: Mapping[str, tuple],
    policy: PricingPolicy,
    hard: bool = False,
) -> dict[str, float]:
    """Effective per-trip microtransit fares for the next estimation round.

    Subscribers ride free, so the fare an individual faces is weighted by the
    probability of holding no pass. ``hard`` assigns each individual their
    most likely alternative instead of the expectation.
    """
    fares: dict[str, float] = {}
    for trip in population.trips.values():
        p = ownership.get(trip.individual_id)
        if p is None:
            p_none = 1.0
        elif hard:
            p_none = 1.0 if int(np.argmax(p)) == 2 else 0.0
        else:
            p_none = p[2]
        fares[trip.trip_id] = p_none * microtransit_fare(trip, policy)
    return fares


def _msa_taste(prev: Optional[TasteParameterSet], new: TasteParameterSet,
               i: int) -> TasteParameterSet:
    if prev is None or i == 0:
        return new
    w_old = i / (i + 1.0)
    w_new = 1.0 / (i + 1.0)
    ind = {
        key: {k: w_old * prev.individual_values[key][k] + w_new * v
              for k, v in m.items()}
        for key, m in new.individual_values.items()
        if key in prev.individual_values
    }
    # individuals/ODs present only in one iterate keep the new values
    for key, m in new.individual_values.items():
        ind.setdefault(key, dict(m))
    trip_vals = {
        od: {k: w_old * prev.trip_values[od][k] + w_new * v for k, v in m.items()}
        for od, m in new.trip_values.items()
        if od in prev.trip_values
    }
    for od, m in new.trip_values.items():
        trip_vals.setdefault(od, dict(m))
    return TasteParameterSet(
        population_values=w_old * prev.population_values + w_new * new.population_values,
        agent_matrix=w_old * prev.agent_matrix + w_new * new.agent_matrix,
        agent_keys=list(new.agent_keys),
        individual_values=ind,
        trip_values=trip_vals,
    )


def _joint_vector(sp: SubscriptionParameters, wd: TasteParameterSet,
                  we: TasteParameterSet) -> np.ndarray:
    return np.concatenate([sp.as_array(), wd.population_values, we.population_values])


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    denom = max(float(np.mean(np.abs(old))), 1e-8)
    return float(np.mean(np.abs(new - old)) / denom)


def _update_individual_links(
    population: Population,
    sub_params: SubscriptionParameters,
    weekday: TasteParameterSet,
    weekend: TasteParameterSet,
    policy: PricingPolicy,
) -> None:
    """Recompute per-individual gains, MT-user flags, and the cost-sensitivity
    average feeding the ride-pass price coefficient."""
    nest_we = max(sub_params.beta_gain_we, NESTING_FLOOR) if sub_params.beta_gain_we > 0 else 1.0
    nest_wd = max(sub_params.beta_gain_wd, NESTING_FLOOR) if sub_params.beta_gain_wd > 0 else 1.0
    population.refresh_mt_flags()
    for ind in population.individuals.values():
        ind.gain_we = compute_gain(
            ind, DayType.weekday, weekday.agent_vector, nest_we, policy, population.trips
        )
        ind.gain_wd = compute_gain(
            ind, DayType.weekend, weekend.agent_vector, nest_wd, policy, population.trips
        )
        c_we = weekday.individual_value(ind.individual_id, "cost")
        c_wd = weekend.individual_value(ind.individual_id, "cost")
        ind.beta_cost_avg = (
            WEEKDAY_WEIGHT * c_we + WEEKEND_WEIGHT * c_wd
        ) / (WEEKDAY_WEIGHT + WEEKEND_WEIGHT)
        ind.beta_price = link_price_sensitivity(c_we, c_wd, sub_params.f_rp)


def _write_checkpoint(directory: str, iteration: int, sp: SubscriptionParameters,
                      wd: TasteParameterSet, we: TasteParameterSet,
                      ownership: Mapping[str, tuple]) -> None:
    import pandas as pd

    from .core import PARAM_NAMES

    os.makedirs(directory, exist_ok=True)
    prefix = os.path.join(directory, f"joint_iter{iteration:02d}")
    names = ["f_rp", "beta_gain_we", "beta_gain_wd", "beta_mt_user",
             "asc_weekly", "asc_monthly"]
    pd.DataFrame({"parameter": names, "value": sp.as_array()}).to_csv(
        prefix + "_subscription.csv", index=False)
    pd.DataFrame({
        "parameter": list(PARAM_NAMES),
        "weekday": wd.population_values,
        "weekend": we.population_values,
    }).to_csv(prefix + "_taste.csv", index=False)
    pd.DataFrame(
        [{"individual_id": k, "p_weekly": v[0], "p_monthly": v[1], "p_none": v[2]}
         for k, v in ownership.items()]
    ).to_csv(prefix + "_ownership.csv", index=False)


def joint_estimate(
    population: Population,
    targets: CalibrationTargets,
    policy: PricingPolicy,
    config: Optional[JointConfig] = None,
) -> JointState:
    """Run the alternating two-branch estimation to joint convergence.

    Starts from universal non-ownership (everyone pays the full fare) and
    zero parameters; each iteration re-estimates both day types, recalibrates
    the upper branch, applies the nesting scale, MSA-averages everything, and
    refreshes the effective fares from predicted ownership.
    """
    cfg = config or JointConfig()
    weekday_trips = population.trips_of(DayType.weekday)
    weekend_trips = population.trips_of(DayType.weekend)
    if not weekday_trips or not weekend_trips:
        raise ValueError("population must contain trips for both day types")

    ownership = {i: (0.0, 0.0, 1.0) for i in population.individuals}
    fares = update_fares_with_ownership(population, ownership, policy,
                                        hard=cfg.hard_ownership)
    sub_params = SubscriptionParameters()
    weekday_params: Optional[TasteParameterSet] = None
    weekend_params: Optional[TasteParameterSet] = None
    calib: Optional[CalibrationResult] = None
    prev_vector: Optional[np.ndarray] = None
    converged = False
    iteration = 0

    for i in range(cfg.max_iterations):
        iteration = i + 1
        est_we = estimate(weekday_trips, cfg.estimation, fares=fares)
        est_wd = estimate(weekend_trips, cfg.estimation, fares=fares)
        raw_weekday, raw_weekend = est_we.params, est_wd.params

        _update_individual_links(population, sub_params, raw_weekday,
                                 raw_weekend, policy)
        calib = calibrate(
            targets,
            population,
            policy,
            starts=cfg.calibration_starts,
            bounds=cfg.calibration_bounds,
            seed=cfg.seed,
        )
        new_sub = calib.params
        if cfg.scale_by_nesting:
            raw_weekday = raw_weekday.scaled(max(new_sub.beta_gain_we, NESTING_FLOOR))
            raw_weekend = raw_weekend.scaled(max(new_sub.beta_gain_wd, NESTING_FLOOR))

        # MSA over the subscription vector and both taste sets
        if i == 0:
            sub_params = new_sub
        else:
            w_old = i / (i + 1.0)
            w_new = 1.0 / (i + 1.0)
            sub_params = SubscriptionParameters.from_array(
                w_old * sub_params.as_array() + w_new * new_sub.as_array()
            )
        weekday_params = _msa_taste(weekday_params, raw_weekday, i)
        weekend_params = _msa_taste(weekend_params, raw_weekend, i)

        ownership = ownership_probabilities(sub_params, population, policy)
        fares = update_fares_with_ownership(population, ownership, policy,
                                            hard=cfg.hard_ownership)

        if cfg.checkpoint_dir:
            _write_checkpoint(cfg.checkpoint_dir, iteration, sub_params,
                              weekday_params, weekend_params, ownership)

        vector = _joint_vector(sub_params, weekday_params, weekend_params)
        if prev_vector is not None and _relative_change(vector, prev_vector) < cfg.tolerance:
            converged = True
            prev_vector = vector
            break
        prev_vector = vector

    return JointState(
        iteration=iteration,
        sub_params=sub_params,
        weekday_params=weekday_params,
        weekend_params=weekend_params,
        ownership_probs=ownership,
        converged=converged,
        calibration=calib,
    )
