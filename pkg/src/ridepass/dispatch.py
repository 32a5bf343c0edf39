"""Within-day microtransit dispatch simulation.

Sequential greedy insertion over a zone network: each arriving request is
inserted at minimum cost into some vehicle's remaining schedule, where cost
trades off added vehicle-minutes against added passenger-minutes, with a
lookahead penalty for insertions that strand the vehicle far from the
demand-weighted centroid. Produces per-request wait / in-vehicle times,
rejections, and fleet utilization, plus grid-search calibration of the
dispatch knobs against aggregate service targets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

STREET_SPEED_MPH = 22.0
WALK_SPEED_MPH = 3.0


@dataclass
class ZoneNetwork:
    """Zone centroids with a travel-time function in minutes."""

    zones: list  # [(zone_id, (x_miles, y_miles)), ...]
    matrix: Optional[np.ndarray] = None  # optional explicit minutes matrix

    def __post_init__(self):
        self._index = {z: i for i, (z, _) in enumerate(self.zones)}
        self._coords = np.array([xy for _, xy in self.zones], dtype=float)
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (len(self.zones), len(self.zones)):
                raise ValueError("travel-time matrix shape mismatch")
            if np.abs(np.diag(m)).max() > 1e-9:
                raise ValueError("travel_time(z, z) must be 0")
            self.matrix = m

    @classmethod
    def grid(cls, nx: int, ny: int, spacing_miles: float = 1.0) -> "ZoneNetwork":
        zones = [
            (f"z{ix:02d}_{iy:02d}", (ix * spacing_miles, iy * spacing_miles))
            for ix in range(nx)
            for iy in range(ny)
        ]
        return cls(zones)

    def travel_time(self, a: str, b: str) -> float:
        i, j = self._index[a], self._index[b]
        if self.matrix is not None:
            return float(self.matrix[i, j])
        d = float(np.hypot(*(self._coords[i] - self._coords[j])))
        return d / STREET_SPEED_MPH * 60.0

    def nearest_zone(self, xy: tuple) -> tuple[str, float]:
        """(zone_id, walk minutes) for the centroid closest to a coordinate."""
        d = np.hypot(self._coords[:, 0] - xy[0], self._coords[:, 1] - xy[1])
        i = int(np.argmin(d))
        return self.zones[i][0], float(d[i] / WALK_SPEED_MPH * 60.0)

    def demand_weighted_centroid(self, weights: Optional[Mapping[str, float]] = None) -> str:
        """Zone whose centroid is closest to the demand-weighted mean point."""
        if weights:
            w = np.array([weights.get(z, 0.0) for z, _ in self.zones], dtype=float)
            if w.sum() <= 0:
                w = np.ones(len(self.zones))
        else:
            w = np.ones(len(self.zones))
        mean = (self._coords * w[:, None]).sum(axis=0) / w.sum()
        return self.nearest_zone(tuple(mean))[0]


@dataclass
class Request:
    request_id: str
    origin_zone: str
    destination_zone: str
    request_time: float  # minutes from midnight
    origin_xy: Optional[tuple] = None  # off-centroid coordinates, if any
    destination_xy: Optional[tuple] = None
    trip_id: Optional[str] = None


@dataclass
class Stop:
    zone: str
    kind: str  # "pickup" | "dropoff"
    request_id: str
    time: float  # planned minutes
    request_time: float  # when the rider asked (for wait checks)


@dataclass
class Vehicle:
    vehicle_id: int
    start_zone: str
    capacity: int = 6
    stops: list = field(default_factory=list)

    def anchor(self, now: float) -> tuple[str, float]:
        """(zone, time) the remaining schedule is rebuilt from."""
        done = [s for s in self.stops if s.time <= now]
        if done:
            last = done[-1]
            pending = len(done) < len(self.stops)
            return last.zone, (last.time if pending else max(last.time, now))
        return self.start_zone, now

    def pending(self, now: float) -> list:
        return [s for s in self.stops if s.time > now]

    def onboard_at(self, now: float) -> int:
        n = 0
        for s in self.stops:
            if s.time <= now:
                n += 1 if s.kind == "pickup" else -1
        return n


@dataclass
class DispatchConfig:
    fleet_size: int = 10
    capacity: int = 6
    max_walk_minutes: float = 12.0
    max_wait_minutes: float = 40.0
    theta_operator_weight: float = 0.2
    beta_lookahead: float = 0.2
    seed: int = 0
    service_hours: Optional[float] = None  # None = derive from the stream span

    def __post_init__(self):
        if not 0.0 <= self.theta_operator_weight <= 1.0:
            raise ValueError("theta_operator_weight must lie in [0, 1]")
        if not 0.0 <= self.beta_lookahead <= 1.0:
            raise ValueError("beta_lookahead must lie in [0, 1]")


@dataclass
class ServiceOutcome:
    records: list  # dicts: request_id, wait, in_vehicle, rejected, reason
    utilization: float
    avg_wait: float
    avg_in_vehicle: float
    n_served: int
    n_rejected: int
    fleet_size: int
    simulated_hours: float
    event_log: list  # final per-vehicle schedules as dicts


def _rebuild_times(zone0: str, t0: float, stops: Sequence[Stop],
                   network: ZoneNetwork) -> list[float]:
    """Chained arrival times along a stop sequence; pickups never happen
    before the rider's request time (the vehicle waits)."""
    times = []
    z, t = zone0, t0
    for s in stops:
        t = t + network.travel_time(z, s.zone)
        if s.kind == "pickup":
            t = max(t, s.request_time)
        times.append(t)
        z = s.zone
    return times


def _feasible(stops: Sequence[Stop], times: Sequence[float], onboard0: int,
              capacity: int, max_wait: float) -> bool:
    n = onboard0
    for s, t in zip(stops, times):
        if s.kind == "pickup":
            n += 1
            if n > capacity:
                return False
            if t - s.request_time > max_wait + 1e-9:
                return False
        else:
            n -= 1
    return True


def insertion_cost(
    vehicle: Vehicle,
    request: Request,
    config: DispatchConfig,
    network: ZoneNetwork,
    now: Optional[float] = None,
    lookahead_zone: Optional[str] = None,
) -> Optional[tuple[float, list, list]]:
    """Best feasible insertion of (pickup, dropoff) into the vehicle's
    remaining schedule.

    Returns (cost, new_pending_stops, new_times) or None when no insertion
    satisfies capacity and maximum-wait constraints. Cost is
    theta * added vehicle-minutes + (1 - theta) * added passenger-minutes,
    plus beta_lookahead times the travel time from the final stop to the
    demand-weighted centroid.
    """
    now = request.request_time if now is None else now
    zone0, t0 = vehicle.anchor(now)
    pending = vehicle.pending(now)
    onboard0 = vehicle.onboard_at(now)
    old_times = _rebuild_times(zone0, t0, pending, network)
    old_end = old_times[-1] if old_times else t0

    pickup = Stop(request.origin_zone, "pickup", request.request_id,
                  0.0, request.request_time)
    dropoff = Stop(request.destination_zone, "dropoff", request.request_id,
                   0.0, request.request_time)

    theta = config.theta_operator_weight
    best = None
    for i in range(len(pending) + 1):
        for j in range(i, len(pending) + 1):
            cand = pending[:i] + [pickup] + pending[i:j] + [dropoff] + pending[j:]
            times = _rebuild_times(zone0, t0, cand, network)
            if not _feasible(cand, times, onboard0, config.capacity,
                             config.max_wait_minutes):
                continue
            t_pick = times[i]
            t_drop = times[j + 1]
            wait = t_pick - request.request_time
            ivt = t_drop - t_pick
            # delays imposed on riders already in the plan
            delay = 0.0
            k_old = 0
            for s, t in zip(cand, times):
                if s.request_id == request.request_id:
                    continue
                delay += max(0.0, t - old_times[k_old])
                k_old += 1
            veh_minutes = times[-1] - old_end
            pax_minutes = wait + ivt + delay
            cost = theta * veh_minutes + (1.0 - theta) * pax_minutes
            if lookahead_zone is not None and config.beta_lookahead > 0:
                cost += config.beta_lookahead * network.travel_time(
                    cand[-1].zone, lookahead_zone)
            if best is None or cost < best[0] - 1e-12:
                best = (cost, cand, times)
    return best


def _snap(request: Request, network: ZoneNetwork,
          max_walk: float) -> Optional[Request]:
    """Snap off-centroid endpoints to the nearest zone within the walk
    budget; None when either endpoint is out of reach."""
    origin, dest = request.origin_zone, request.destination_zone
    if request.origin_xy is not None:
        origin, walk = network.nearest_zone(request.origin_xy)
        if walk > max_walk:
            return None
    if request.destination_xy is not None:
        dest, walk = network.nearest_zone(request.destination_xy)
        if walk > max_walk:
            return None
    return replace(request, origin_zone=origin, destination_zone=dest)


def simulate_day(
    requests: Sequence[Request],
    config: DispatchConfig,
    network: ZoneNetwork,
    demand_weights: Optional[Mapping[str, float]] = None,
) -> ServiceOutcome:
    """Greedy sequential assignment of a time-ordered request stream."""
    times_in = [r.request_time for r in requests]
    if any(b < a for a, b in zip(times_in, times_in[1:])):
        raise ValueError("requests must be sorted by request time")

    if demand_weights is None:
        demand_weights = {}
        for r in requests:
            demand_weights[r.origin_zone] = demand_weights.get(r.origin_zone, 0.0) + 1.0
    lookahead_zone = network.demand_weighted_centroid(demand_weights)

    rng = np.random.default_rng(config.seed)
    zone_ids = [z for z, _ in network.zones]
    starts = rng.choice(len(zone_ids), size=config.fleet_size)
    vehicles = [
        Vehicle(v, zone_ids[int(starts[v])], capacity=config.capacity)
        for v in range(config.fleet_size)
    ]

    records = []
    for req in requests:
        snapped = _snap(req, network, config.max_walk_minutes)
        if snapped is None:
            records.append({"request_id": req.request_id, "wait": math.nan,
                            "in_vehicle": math.nan, "rejected": True,
                            "reason": "walk_budget"})
            continue
        now = snapped.request_time
        best = None
        for veh in vehicles:
            res = insertion_cost(veh, snapped, config, network, now,
                                 lookahead_zone)
            if res is not None and (best is None or res[0] < best[0] - 1e-12):
                best = (res[0], veh, res[1], res[2])
        if best is None:
            records.append({"request_id": req.request_id, "wait": math.nan,
                            "in_vehicle": math.nan, "rejected": True,
                            "reason": "no_feasible_insertion"})
            continue
        _, veh, new_pending, new_times = best
        done = [s for s in veh.stops if s.time <= now]
        veh.stops = done + [replace(s, time=t) for s, t in zip(new_pending, new_times)]
        records.append({"request_id": req.request_id, "wait": 0.0,
                        "in_vehicle": 0.0, "rejected": False, "reason": ""})

    # read final realized times off the schedules
    stop_times: dict[str, dict[str, float]] = {}
    event_log = []
    for veh in vehicles:
        for s in veh.stops:
            stop_times.setdefault(s.request_id, {})[s.kind] = s.time
            event_log.append({"vehicle_id": veh.vehicle_id, "zone": s.zone,
                              "kind": s.kind, "request_id": s.request_id,
                              "time": s.time})
    req_time = {r.request_id: r.request_time for r in requests}
    for rec in records:
        if rec["rejected"]:
            continue
        st = stop_times[rec["request_id"]]
        rec["wait"] = st["pickup"] - req_time[rec["request_id"]]
        rec["in_vehicle"] = st["dropoff"] - st["pickup"]

    served = [r for r in records if not r["rejected"]]
    if config.service_hours is not None:
        hours = config.service_hours
    elif requests:
        end = max((s["time"] for s in event_log), default=times_in[-1])
        hours = max((end - times_in[0]) / 60.0, 1e-9)
    else:
        hours = 0.0
    util = (len(served) / (config.fleet_size * hours)) if hours > 0 else 0.0
    return ServiceOutcome(
        records=records,
        utilization=util,
        avg_wait=float(np.mean([r["wait"] for r in served])) if served else 0.0,
        avg_in_vehicle=float(np.mean([r["in_vehicle"] for r in served])) if served else 0.0,
        n_served=len(served),
        n_rejected=len(records) - len(served),
        fleet_size=config.fleet_size,
        simulated_hours=hours,
        event_log=event_log,
    )


def synthetic_request_stream(
    network: ZoneNetwork,
    n_requests: int,
    seed: int = 0,
    start_minute: float = 360.0,
    end_minute: float = 1320.0,
    min_distance_miles: float = 0.5,
) -> list[Request]:
    """Uniform-in-time, uniform-over-zones request stream for simulator
    calibration and testing."""
    rng = np.random.default_rng(seed)
    zone_ids = [z for z, _ in network.zones]
    out = []
    times = np.sort(rng.uniform(start_minute, end_minute, size=n_requests))
    for i, t in enumerate(times):
        while True:
            o, d = rng.choice(len(zone_ids), size=2)
            if o == d:
                continue
            oz, dz = zone_ids[int(o)], zone_ids[int(d)]
            if network.travel_time(oz, dz) >= min_distance_miles / STREET_SPEED_MPH * 60.0:
                break
        out.append(Request(f"r{i:06d}", oz, dz, float(t)))
    return out


def calibrate_grid_search(
    observed: Mapping[str, float],
    ranges: Mapping[str, Sequence],
    requests: Sequence[Request],
    network: ZoneNetwork,
    base: Optional[DispatchConfig] = None,
) -> tuple[DispatchConfig, list[dict]]:
    """Exhaustive grid search minimizing the sum of squared relative errors
    against observed (in_vehicle, wait, utilization) targets.

    ``ranges`` maps DispatchConfig field names to candidate values; fields not
    listed stay at the base config's value. Returns (best config, grid table).
    """
    if not requests:
        raise ValueError("request stream must be nonempty")
    if not ranges:
        raise ValueError("ranges must be nonempty")
    base = base or DispatchConfig()
    keys = list(ranges)
    table = []
    best = None
    for combo in itertools.product(*(ranges[k] for k in keys)):
        cfg = replace(base, **dict(zip(keys, combo)))
        out = simulate_day(requests, cfg, network)
        err = 0.0
        for name, target, value in (
            ("in_vehicle", observed.get("in_vehicle"), out.avg_in_vehicle),
            ("wait", observed.get("wait"), out.avg_wait),
            ("utilization", observed.get("utilization"), out.utilization),
        ):
            if target is None:
                continue
            err += ((value - target) / target) ** 2 if target else value ** 2
        row = dict(zip(keys, combo))
        row.update({"error": err, "avg_in_vehicle": out.avg_in_vehicle,
                    "avg_wait": out.avg_wait, "utilization": out.utilization,
                    "n_served": out.n_served, "n_rejected": out.n_rejected})
        table.append(row)
        if best is None or err < best[0] - 1e-15:
            best = (err, cfg)
    return best[1], table
