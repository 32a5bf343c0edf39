"""Population file ingestion, missing-attribute inference, and result
emission.

The on-disk schema is two delimited text files: ``persons.csv`` (individual_id,
segment) and ``trips.csv`` (one row per trip with per-mode attribute columns;
blanks mark unobserved mode attributes). Emission writes result tables plus a
machine-readable run manifest so any run is reproducible from its outputs.
"""

from __future__ import annotations

import json
import math
import os
import platform
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .core import (
    MODES,
    DayType,
    Individual,
    ModeAttrs,
    ModeId,
    Population,
    Purpose,
    SEGMENTS,
    TourType,
    TripRecord,
)

PERSONS_FILE = "persons.csv"
TRIPS_FILE = "trips.csv"

TRIP_META_COLUMNS = [
    "trip_id", "individual_id", "origin_zone", "destination_zone",
    "day_type", "depart_time", "distance", "purpose", "tour_type",
    "observed_mode",
]

# per-mode attribute columns; costless modes omit the cost column
ATTR_COLUMNS = [
    "tt_driving", "cost_driving", "tt_biking", "tt_walking",
    "tt_carpool", "cost_carpool", "tt_microtransit", "cost_microtransit",
    "wt_microtransit",
]

TRIP_COLUMNS = TRIP_META_COLUMNS + ATTR_COLUMNS


@dataclass
class IngestError:
    file: str
    line: int  # 1-based data line number (header excluded)
    message: str


@dataclass
class IngestResult:
    population: Population
    errors: list = field(default_factory=list)
    # trips with blank attributes awaiting inference: trip_id -> set of columns
    missing: dict = field(default_factory=dict)


def _f(value) -> float:
    """Blank-tolerant float: empty/NaN become nan."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return math.nan
    s = str(value).strip()
    return math.nan if s == "" else float(s)


def ingest_population(directory: str) -> IngestResult:
    """Read persons and trips files into a validated population.

    Row-level problems (unknown labels, negative times/costs/distances,
    references to unknown individuals) are collected with line numbers and
    those rows skipped; structural problems (missing files or columns) raise.
    """
    persons_path = os.path.join(directory, PERSONS_FILE)
    trips_path = os.path.join(directory, TRIPS_FILE)
    persons = pd.read_csv(persons_path, dtype=str)
    trips = pd.read_csv(trips_path, dtype=str)

    for col in ("individual_id", "segment"):
        if col not in persons.columns:
            raise ValueError(f"{PERSONS_FILE}: missing column {col!r}")
    missing_cols = [c for c in TRIP_COLUMNS if c not in trips.columns]
    if missing_cols:
        raise ValueError(f"{TRIPS_FILE}: missing columns {missing_cols}")

    errors: list[IngestError] = []
    individuals: dict[str, Individual] = {}
    for i, row in persons.iterrows():
        line = i + 2  # header is line 1
        ind_id = str(row["individual_id"]).strip()
        seg = str(row["segment"]).strip()
        if seg not in SEGMENTS:
            errors.append(IngestError(PERSONS_FILE, line, f"unknown segment {seg!r}"))
            continue
        if ind_id in individuals:
            errors.append(IngestError(PERSONS_FILE, line, f"duplicate individual {ind_id!r}"))
            continue
        individuals[ind_id] = Individual(individual_id=ind_id, segment=seg)

    trip_store: dict[str, TripRecord] = {}
    missing: dict[str, set] = {}
    for i, row in trips.iterrows():
        line = i + 2
        try:
            trip_id = str(row["trip_id"]).strip()
            ind_id = str(row["individual_id"]).strip()
            if ind_id not in individuals:
                raise ValueError(f"unknown individual {ind_id!r}")
            if trip_id in trip_store:
                raise ValueError(f"duplicate trip {trip_id!r}")
            day = DayType(str(row["day_type"]).strip())
            purpose = Purpose(str(row["purpose"]).strip())
            tour = TourType(str(row["tour_type"]).strip())
            mode = ModeId(str(row["observed_mode"]).strip())
            distance = float(row["distance"])
            depart = float(row["depart_time"])
            if distance < 0:
                raise ValueError(f"negative distance {distance}")
            values = {c: _f(row[c]) for c in ATTR_COLUMNS}
            for c, v in values.items():
                if not math.isnan(v) and v < 0:
                    raise ValueError(f"negative {c} {v}")
            blanks = {c for c, v in values.items() if math.isnan(v)}
            trip = TripRecord(
                trip_id=trip_id,
                individual_id=ind_id,
                origin_zone=str(row["origin_zone"]).strip(),
                destination_zone=str(row["destination_zone"]).strip(),
                day_type=day,
                depart_time=depart,
                distance=distance,
                purpose=purpose,
                tour_type=tour,
                observed_mode=mode,
                mode_attrs={
                    ModeId.driving: ModeAttrs(values["tt_driving"], values["cost_driving"]),
                    ModeId.biking: ModeAttrs(values["tt_biking"]),
                    ModeId.walking: ModeAttrs(values["tt_walking"]),
                    ModeId.carpool: ModeAttrs(values["tt_carpool"], values["cost_carpool"]),
                    ModeId.microtransit: ModeAttrs(values["tt_microtransit"],
                                                   values["cost_microtransit"]),
                },
                mt_wait_time=values["wt_microtransit"],
            )
        except (ValueError, KeyError) as exc:
            errors.append(IngestError(TRIPS_FILE, line, str(exc)))
            continue
        trip_store[trip_id] = trip
        if blanks:
            missing[trip_id] = blanks
        individuals[ind_id].trips_for(day).append(trip_id)

    pop = Population(individuals, trip_store)
    pop.refresh_mt_flags()
    return IngestResult(pop, errors, missing)


_COLUMN_TO_SLOT = {
    "tt_driving": (ModeId.driving, "travel_time"),
    "cost_driving": (ModeId.driving, "cost"),
    "tt_biking": (ModeId.biking, "travel_time"),
    "tt_walking": (ModeId.walking, "travel_time"),
    "tt_carpool": (ModeId.carpool, "travel_time"),
    "cost_carpool": (ModeId.carpool, "cost"),
    "tt_microtransit": (ModeId.microtransit, "travel_time"),
    "cost_microtransit": (ModeId.microtransit, "cost"),
    "wt_microtransit": (ModeId.microtransit, "mt_wait_time"),
}

MT_USER_COLUMNS = ("tt_microtransit", "wt_microtransit")


def _get_attr(trip: TripRecord, column: str) -> float:
    mode, slot = _COLUMN_TO_SLOT[column]
    if slot == "mt_wait_time":
        return trip.mt_wait_time
    return getattr(trip.mode_attrs[mode], slot)


def _set_attr(trip: TripRecord, column: str, value: float) -> None:
    mode, slot = _COLUMN_TO_SLOT[column]
    if slot == "mt_wait_time":
        trip.mt_wait_time = value
    else:
        setattr(trip.mode_attrs[mode], slot, value)


def infer_missing_attributes(population: Population) -> int:
    """Fill blank (NaN) mode attributes in place; returns the fill count.

    Fill order per blank: the mean over observed rows on the same OD pair;
    for microtransit times, the mean over trips observed on microtransit;
    otherwise the global mean of the attribute. The chain is total, so every
    trip is attribute-complete afterward (a column blank everywhere falls
    back to zero).
    """
    trips = list(population.trips.values())
    od_sums: dict[tuple, dict] = {}
    global_sum = {c: [0.0, 0] for c in ATTR_COLUMNS}
    mt_user_sum = {c: [0.0, 0] for c in MT_USER_COLUMNS}
    for trip in trips:
        bucket = od_sums.setdefault(trip.od_pair, {c: [0.0, 0] for c in ATTR_COLUMNS})
        for c in ATTR_COLUMNS:
            v = _get_attr(trip, c)
            if not math.isnan(v):
                bucket[c][0] += v
                bucket[c][1] += 1
                global_sum[c][0] += v
                global_sum[c][1] += 1
                if c in mt_user_sum and trip.observed_mode == ModeId.microtransit:
                    mt_user_sum[c][0] += v
                    mt_user_sum[c][1] += 1

    filled = 0
    for trip in trips:
        bucket = od_sums[trip.od_pair]
        for c in ATTR_COLUMNS:
            if not math.isnan(_get_attr(trip, c)):
                continue
            total, count = bucket[c]
            if count == 0 and c in mt_user_sum:
                total, count = mt_user_sum[c]
            if count == 0:
                total, count = global_sum[c]
            _set_attr(trip, c, total / count if count else 0.0)
            filled += 1
    return filled


def population_frames(population: Population) -> tuple[pd.DataFrame, pd.DataFrame]:
    """(persons, trips) data frames in the on-disk schema."""
    persons = pd.DataFrame(
        [{"individual_id": i.individual_id, "segment": i.segment}
         for i in population.individuals.values()]
    )
    rows = []
    for t in population.trips.values():
        row = {
            "trip_id": t.trip_id,
            "individual_id": t.individual_id,
            "origin_zone": t.origin_zone,
            "destination_zone": t.destination_zone,
            "day_type": t.day_type.value,
            "depart_time": t.depart_time,
            "distance": t.distance,
            "purpose": t.purpose.value,
            "tour_type": t.tour_type.value,
            "observed_mode": t.observed_mode.value,
        }
        for c in ATTR_COLUMNS:
            row[c] = _get_attr(t, c)
        rows.append(row)
    trips = pd.DataFrame(rows, columns=TRIP_COLUMNS)
    return persons, trips


def emit_population(population: Population, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    persons, trips = population_frames(population)
    persons.to_csv(os.path.join(directory, PERSONS_FILE), index=False)
    trips.to_csv(os.path.join(directory, TRIPS_FILE), index=False)


def save_joint_state(state, path: str) -> None:
    """Persist a joint estimation result (subscription parameters plus both
    day-type taste sets) to a single npz archive with JSON-coded maps."""
    def _taste_blobs(tag, taste):
        return {
            f"{tag}_pop": taste.population_values,
            f"{tag}_agent": taste.agent_matrix,
            f"{tag}_keys": np.array(taste.agent_keys, dtype=object),
            f"{tag}_individual": json.dumps(taste.individual_values),
            f"{tag}_trip": json.dumps({f"{o}|{d}": m for (o, d), m
                                       in taste.trip_values.items()}),
        }

    blobs = {
        "sub": state.sub_params.as_array(),
        "iteration": np.array([state.iteration]),
        "converged": np.array([state.converged]),
        "ownership": json.dumps({k: list(v) for k, v in state.ownership_probs.items()}),
    }
    blobs.update(_taste_blobs("wd", state.weekday_params))
    blobs.update(_taste_blobs("we", state.weekend_params))
    np.savez(path, **blobs)


def load_joint_state(path: str):
    """Inverse of save_joint_state."""
    from .core import SubscriptionParameters
    from .estimation import TasteParameterSet
    from .joint import JointState

    z = np.load(path, allow_pickle=True)

    def _taste(tag):
        return TasteParameterSet(
            population_values=z[f"{tag}_pop"],
            agent_matrix=z[f"{tag}_agent"],
            agent_keys=[tuple(k) for k in z[f"{tag}_keys"]],
            individual_values=json.loads(str(z[f"{tag}_individual"])),
            trip_values={tuple(k.split("|")): m for k, m
                         in json.loads(str(z[f"{tag}_trip"])).items()},
        )

    return JointState(
        iteration=int(z["iteration"][0]),
        sub_params=SubscriptionParameters.from_array(z["sub"]),
        weekday_params=_taste("wd"),
        weekend_params=_taste("we"),
        ownership_probs={k: tuple(v) for k, v
                         in json.loads(str(z["ownership"])).items()},
        converged=bool(z["converged"][0]),
    )


def emit_outputs(
    results: Mapping[str, pd.DataFrame],
    directory: str,
    manifest: Optional[dict] = None,
    wall_time_s: Optional[float] = None,
) -> list[str]:
    """Write result tables as delimited text plus a run manifest.

    ``results`` maps table names to data frames; each becomes ``<name>.csv``.
    The manifest echoes the configuration/seeds it is given and records
    library versions and wall time, so reruns are reproducible and auditable.
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    for name, frame in results.items():
        path = os.path.join(directory, f"{name}.csv")
        frame.to_csv(path, index=False)
        written.append(path)
    meta = {
        "manifest": manifest or {},
        "tables": sorted(os.path.basename(p) for p in written),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
        },
        "wall_time_s": wall_time_s,
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    written.append(path)
    return written
