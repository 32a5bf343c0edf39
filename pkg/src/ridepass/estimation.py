"""Lower-branch taste parameter estimation.

Each trip is an agent whose observed mode must be utility-maximal within a
safety margin; the agent vector is the projection of the current population
anchor onto that constraint set (an inverse utility maximization QP). Agent
solutions are averaged into individual-, OD-, and population-level values and
the anchor is updated by the method of successive averages until it settles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import (
    GENERIC_PARAMS,
    INDIVIDUAL_PARAMS,
    LEVEL_TAGS,
    MODES,
    MODE_INDEX,
    N_PARAMS,
    PARAM_INDEX,
    PARAM_NAMES,
    TRIP_PARAMS,
    ModeId,
    TripRecord,
    attribute_matrix,
    softmax_probabilities,
)

# Default estimation bounds: signs follow economic theory (time, wait, and
# cost coefficients nonpositive), constants free, dummy interactions small.
DEFAULT_LOWER = np.array([-5.0, -5.0, -5.0, -5.0, -5, -5, -5, -5, -1, -1, -1, -1, -1], dtype=float)
DEFAULT_UPPER = np.array([0.0, 0.0, 0.0, 0.0, 5, 5, 5, 5, 1, 1, 1, 1, 1], dtype=float)


@dataclass
class EstimationConfig:
    margin_percentile: float = 0.75
    lower_bounds: np.ndarray = field(default_factory=lambda: DEFAULT_LOWER.copy())
    upper_bounds: np.ndarray = field(default_factory=lambda: DEFAULT_UPPER.copy())
    msa_tolerance: float = 0.001  # mean relative change in beta0
    max_outer_iterations: int = 50
    infeasibility_penalty: float = 1e3
    bootstrap_resamples: int = 30
    seed: int = 0


@dataclass
class AgentQP:
    beta0: np.ndarray
    difference_rows: np.ndarray  # (n_alternatives-1, |K|), rows x(j*) - x(j)
    margin: float
    lower_bounds: np.ndarray
    upper_bounds: np.ndarray
    infeasibility_penalty: float = 1e3


def compute_margin(percentile: float) -> float:
    """Quantile of the difference of two iid standard Gumbel variates, i.e.
    the standard logistic quantile ln(p / (1 - p))."""
    if not 0.0 < percentile < 1.0:
        raise ValueError("percentile must lie in (0, 1)")
    return math.log(percentile / (1.0 - percentile))


def _project_active_set(beta0, G, h, tol=1e-9):
    """min ||b - beta0||^2 s.t. G b >= h.

    Solved through the dual (a bound-constrained quadratic in the
    multipliers), then polished to an exact KKT point on the recovered active
    set. Returns (beta, ok); ok=False when no feasible point was found.
    """
    r = h - G @ beta0  # dual linear term; lambda = 0 optimal when r <= 0
    if r.max() <= tol:
        return beta0.copy(), True
    GG = G @ G.T

    def dual(lam):
        Gl = GG @ lam
        return 0.25 * lam @ Gl - lam @ r, 0.5 * Gl - r

    lam0 = np.maximum(r, 0.0)
    res = minimize(dual, lam0, jac=True, method="L-BFGS-B",
                   bounds=[(0.0, None)] * len(r),
                   options={"maxiter": 500, "ftol": 1e-16, "gtol": 1e-12})
    lam = res.x
    beta = beta0 + 0.5 * (G.T @ lam)

    # polish with a dual active-set loop warm-started at the L-BFGS-B support
    support = set(np.flatnonzero(lam > 1e-8))
    for _ in range(60):
        if support:
            idx = sorted(support)
            Gs = G[idx]
            mu, *_ = np.linalg.lstsq(Gs @ Gs.T, h[idx] - Gs @ beta0, rcond=None)
            if mu.min() < -1e-11:
                support.discard(idx[int(np.argmin(mu))])
                continue
            cand = beta0 + Gs.T @ mu
        else:
            cand = beta0.copy()
        slack = G @ cand - h
        worst = int(np.argmin(slack))
        if slack[worst] < -tol and worst not in support:
            support.add(worst)
            continue
        if slack.min() >= -1e-7:
            return cand, True
        break
    ok = (G @ beta - h).min() >= -1e-6
    return beta, ok


def _stacked_constraints(qp: AgentQP):
    k = qp.beta0.size
    eye = np.eye(k)
    G = np.vstack([qp.difference_rows, eye, -eye])
    h = np.concatenate(
        [np.full(qp.difference_rows.shape[0], qp.margin), qp.lower_bounds, -qp.upper_bounds]
    )
    return G, h


def _solve_slacked(qp: AgentQP) -> np.ndarray:
    """Relax each margin row with a nonnegative slack under a linear penalty;
    used when the margin constraints are incompatible with the box."""
    k = qp.beta0.size
    m = qp.difference_rows.shape[0]
    x0 = np.concatenate([np.clip(qp.beta0, qp.lower_bounds, qp.upper_bounds), np.zeros(m)])
    # start slacks at current violations so the start point is feasible
    x0[k:] = np.maximum(0.0, qp.margin - qp.difference_rows @ x0[:k])

    def obj(x):
        d = x[:k] - qp.beta0
        return d @ d + qp.infeasibility_penalty * x[k:].sum()

    def grad(x):
        g = np.empty_like(x)
        g[:k] = 2.0 * (x[:k] - qp.beta0)
        g[k:] = qp.infeasibility_penalty
        return g

    cons = [
        {
            "type": "ineq",
            "fun": lambda x: qp.difference_rows @ x[:k] + x[k:] - qp.margin,
            "jac": lambda x: np.hstack([qp.difference_rows, np.eye(m)]),
        }
    ]
    bounds = [(lo, hi) for lo, hi in zip(qp.lower_bounds, qp.upper_bounds)]
    bounds += [(0.0, None)] * m
    res = minimize(obj, x0, jac=grad, method="SLSQP", bounds=bounds,
                   constraints=cons, options={"maxiter": 200, "ftol": 1e-12})
    best = res.x[:k]
    best_val = _penalized_value(best, qp)
    # SLSQP only gets within ~1e-5 of the optimum; with few margin rows the
    # piecewise-quadratic penalty can be minimized exactly by enumerating
    # which rows end up slacked and solving each region's projection
    if m <= 6:
        exact = _solve_slacked_exact(qp)
        if exact is not None and _penalized_value(exact, qp) < best_val:
            best = exact
    return best


def _penalized_value(beta, qp: AgentQP) -> float:
    d = beta - qp.beta0
    slack = np.maximum(0.0, qp.margin - qp.difference_rows @ beta)
    return float(d @ d + qp.infeasibility_penalty * slack.sum())


def _solve_slacked_exact(qp: AgentQP):
    """Exact minimizer of ||b - beta0||^2 + penalty * sum max(0, margin - Db)
    over the box, by enumerating the set V of slacked rows. Inside a region
    the penalty is linear, so the problem is a projection of a shifted anchor
    onto the region; the best feasible region solution is the global optimum.
    """
    import itertools as _it

    k = qp.beta0.size
    m = qp.difference_rows.shape[0]
    eye = np.eye(k)
    c = qp.infeasibility_penalty
    best, best_val = None, np.inf
    for r in range(m + 1):
        for V in _it.combinations(range(m), r):
            inV = np.zeros(m, dtype=bool)
            inV[list(V)] = True
            shifted = qp.beta0 + (c / 2.0) * qp.difference_rows[inV].sum(axis=0)
            # region: slacked rows sit at or below the margin, others at or
            # above it, plus the box
            G = np.vstack([qp.difference_rows[~inV],
                           -qp.difference_rows[inV], eye, -eye])
            h = np.concatenate([
                np.full(int((~inV).sum()), qp.margin),
                np.full(int(inV.sum()), -qp.margin),
                qp.lower_bounds, -qp.upper_bounds,
            ])
            beta, ok = _project_active_set(shifted, G, h)
            if not ok or (G @ beta - h).min() < -1e-8:
                continue
            beta = np.clip(beta, qp.lower_bounds, qp.upper_bounds)
            val = _penalized_value(beta, qp)
            if val < best_val:
                best, best_val = beta, val
    return best


def _kkt_residual(beta, qp: AgentQP, tol=1e-9) -> float:
    """Max violation of primal feasibility/stationarity for the projection."""
    G, h = _stacked_constraints(qp)
    slack = G @ beta - h
    primal = max(0.0, float(-slack.min()))
    # stationarity: the anti-gradient 2(beta0 - beta) must lie in the cone of
    # active constraint normals; check via nonnegative least squares.
    active = slack < 1e-7
    grad = 2.0 * (beta - qp.beta0)
    if not active.any():
        return max(primal, float(np.abs(grad).max()))
    from scipy.optimize import nnls

    lam, resid = nnls(G[active].T, grad)
    return max(primal, float(resid))


def solve_agent_qp(qp: AgentQP) -> np.ndarray:
    """Project the anchor beta0 onto the agent's margin-and-box constraint
    set; infeasible agents get the slack-penalized relaxation instead."""
    if not (np.all(np.isfinite(qp.beta0)) and np.all(np.isfinite(qp.difference_rows))):
        raise ValueError("non-finite QP inputs")
    beta0 = qp.beta0
    rows = qp.difference_rows
    in_box = bool(
        np.all(beta0 >= qp.lower_bounds - 1e-12)
        and np.all(beta0 <= qp.upper_bounds + 1e-12)
    )
    viol = rows @ beta0 - qp.margin
    if in_box and viol.min() >= -1e-12:
        return np.clip(beta0, qp.lower_bounds, qp.upper_bounds)

    # fast path: single violated margin row -> closed-form halfspace
    # projection, valid whenever the projected point is feasible
    violated = np.flatnonzero(viol < -1e-12)
    if in_box and violated.size == 1:
        a = rows[violated[0]]
        nrm = a @ a
        if nrm > 0:
            cand = beta0 + a * (qp.margin - a @ beta0) / nrm
            if (
                np.all(cand >= qp.lower_bounds - 1e-12)
                and np.all(cand <= qp.upper_bounds + 1e-12)
                and (rows @ cand - qp.margin).min() >= -1e-12
            ):
                return np.clip(cand, qp.lower_bounds, qp.upper_bounds)

    G, h = _stacked_constraints(qp)
    beta, ok = _project_active_set(qp.beta0, G, h)
    if ok and _kkt_residual(beta, qp) <= 1e-8:
        return np.clip(beta, qp.lower_bounds, qp.upper_bounds)

    # robust fallback; also detects genuine infeasibility
    bounds = [(lo, hi) for lo, hi in zip(qp.lower_bounds, qp.upper_bounds)]
    res = minimize(
        lambda b: float((b - qp.beta0) @ (b - qp.beta0)),
        beta0,
        jac=lambda b: 2.0 * (b - qp.beta0),
        method="SLSQP",
        bounds=bounds,
        constraints=[{
            "type": "ineq",
            "fun": lambda b: rows @ b - qp.margin,
            "jac": lambda b: rows,
        }],
        options={"maxiter": 300, "ftol": 1e-14},
    )
    if res.success and (rows @ res.x - qp.margin).min() >= -1e-8:
        return np.clip(res.x, qp.lower_bounds, qp.upper_bounds)
    return np.clip(_solve_slacked(qp), qp.lower_bounds, qp.upper_bounds)


@dataclass
class DesignMatrices:
    """Dense arrays describing one estimation dataset (one agent per trip)."""

    trip_ids: list
    individual_ids: list
    od_pairs: list
    X: np.ndarray  # (n, 5, |K|) mode attribute tensor
    chosen: np.ndarray  # (n,) chosen mode index
    D: np.ndarray  # (n, 4, |K|) difference rows x(j*) - x(j)

    @property
    def n(self) -> int:
        return len(self.trip_ids)


def build_design(trips: Sequence[TripRecord], fares: Optional[Mapping[str, float]] = None) -> DesignMatrices:
    """Assemble attribute tensors; ``fares`` overrides the microtransit cost
    stored on each trip (used for ownership-weighted effective fares)."""
    n = len(trips)
    X = np.zeros((n, len(MODES), N_PARAMS))
    chosen = np.zeros(n, dtype=int)
    trip_ids, ind_ids, ods = [], [], []
    for i, trip in enumerate(trips):
        fare = trip.mode_attrs[ModeId.microtransit].cost
        if fares is not None:
            fare = fares.get(trip.trip_id, fare)
        X[i] = attribute_matrix(trip, fare)
        chosen[i] = MODE_INDEX[trip.observed_mode]
        trip_ids.append(trip.trip_id)
        ind_ids.append(trip.individual_id)
        ods.append(trip.od_pair)
    others = np.array([[j for j in range(len(MODES)) if j != c] for c in chosen])
    D = X[np.arange(n)[:, None], chosen[:, None]] - X[np.arange(n)[:, None], others]
    return DesignMatrices(trip_ids, ind_ids, ods, X, chosen, D)


def aggregate_levels(
    agent_values: np.ndarray,
    individual_ids: Sequence,
    od_pairs: Sequence,
    level_tag: Optional[dict] = None,
) -> tuple[dict, dict, np.ndarray, np.ndarray]:
    """Level aggregation: individual-tagged components are averaged per
    individual, trip-tagged per OD pair, generic over everything; agent rows
    are then overwritten with their level representatives.

    Returns (individual_map, od_map, population_vector, new_agent_values).
    Aggregation is idempotent and mean-preserving, so the population vector
    equals the grand mean both before and after the overwrite.
    """
    values = np.asarray(agent_values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("agent_values must be a nonempty (n, |K|) array")
    n = values.shape[0]
    pop = values.mean(axis=0)
    out = np.tile(pop, (n, 1))

    ind_keys, ind_inv = np.unique(np.asarray(individual_ids, dtype=object), return_inverse=True)
    od_arr = np.array([f"{o}\x00{d}" for o, d in od_pairs], dtype=object)
    od_keys, od_inv = np.unique(od_arr, return_inverse=True)

    tags = level_tag or LEVEL_TAGS
    ind_cols = [PARAM_INDEX[k] for k in PARAM_NAMES if tags[k] == "individual"]
    od_cols = [PARAM_INDEX[k] for k in PARAM_NAMES if tags[k] == "trip"]

    ind_sums = np.zeros((ind_keys.size, len(ind_cols)))
    np.add.at(ind_sums, ind_inv, values[:, ind_cols])
    ind_counts = np.bincount(ind_inv, minlength=ind_keys.size).astype(float)
    ind_means = ind_sums / ind_counts[:, None]
    out[:, ind_cols] = ind_means[ind_inv]

    od_sums = np.zeros((od_keys.size, len(od_cols)))
    np.add.at(od_sums, od_inv, values[:, od_cols])
    od_counts = np.bincount(od_inv, minlength=od_keys.size).astype(float)
    od_means = od_sums / od_counts[:, None]
    out[:, od_cols] = od_means[od_inv]

    ind_names = [PARAM_NAMES[c] for c in ind_cols]
    od_names = [PARAM_NAMES[c] for c in od_cols]
    individual_map = {
        key: dict(zip(ind_names, ind_means[i])) for i, key in enumerate(ind_keys)
    }
    od_map = {
        tuple(key.split("\x00")): dict(zip(od_names, od_means[i]))
        for i, key in enumerate(od_keys)
    }
    return individual_map, od_map, pop, out


@dataclass
class TasteParameterSet:
    """Multi-level lower-branch parameters: one vector per agent (trip), with
    individual-, OD-, and population-level representatives."""

    population_values: np.ndarray
    agent_matrix: np.ndarray  # (n, |K|), rows aligned with agent_keys
    agent_keys: list  # (individual_id, trip_id)
    individual_values: dict  # individual_id -> {param: value}
    trip_values: dict  # (origin, destination) -> {param: value}
    level_tag: dict = field(default_factory=lambda: dict(LEVEL_TAGS))

    def agent_vector(self, trip_id: str) -> np.ndarray:
        return self.agent_matrix[self._key_index[trip_id]]

    def __post_init__(self):
        self._key_index = {trip_id: i for i, (_, trip_id) in enumerate(self.agent_keys)}

    def individual_value(self, individual_id: str, param: str) -> float:
        entry = self.individual_values.get(individual_id)
        if entry is None or param not in entry:
            return float(self.population_values[PARAM_INDEX[param]])
        return float(entry[param])

    def scaled(self, factor: float) -> "TasteParameterSet":
        if factor <= 0:
            raise ValueError("scaling factor must be positive")
        return TasteParameterSet(
            population_values=self.population_values * factor,
            agent_matrix=self.agent_matrix * factor,
            agent_keys=list(self.agent_keys),
            individual_values={
                i: {k: v * factor for k, v in m.items()} for i, m in self.individual_values.items()
            },
            trip_values={
                od: {k: v * factor for k, v in m.items()} for od, m in self.trip_values.items()
            },
        )


@dataclass
class EstimationResult:
    params: TasteParameterSet
    iterations: int
    converged: bool
    n_slack_agents: int
    agent_level_change: float
    margin: float


def _solve_all_agents(design: DesignMatrices, beta0, margin, cfg: EstimationConfig):
    """Vectorized feasibility screen, then per-agent QP only where needed."""
    n = design.n
    beta0 = np.clip(beta0, cfg.lower_bounds, cfg.upper_bounds)
    out = np.tile(beta0, (n, 1))
    viol = np.einsum("nrk,k->nr", design.D, beta0) - margin
    need = np.flatnonzero((viol < -1e-12).any(axis=1))
    n_slack = 0
    for i in need:
        qp = AgentQP(
            beta0=beta0,
            difference_rows=design.D[i],
            margin=margin,
            lower_bounds=cfg.lower_bounds,
            upper_bounds=cfg.upper_bounds,
            infeasibility_penalty=cfg.infeasibility_penalty,
        )
        beta = solve_agent_qp(qp)
        if (design.D[i] @ beta - margin).min() < -1e-6:
            n_slack += 1
        out[i] = beta
    return out, n_slack


def _relative_change(new, old) -> float:
    # mean absolute change relative to the mean parameter magnitude; the
    # aggregate form avoids division blow-ups on near-zero components
    denom = max(float(np.mean(np.abs(old))), 1e-8)
    return float(np.mean(np.abs(new - old)) / denom)


def estimate(
    trips: Sequence[TripRecord],
    config: Optional[EstimationConfig] = None,
    fares: Optional[Mapping[str, float]] = None,
) -> EstimationResult:
    """Run the full decomposition: per-agent QPs anchored at the current
    population vector, level aggregation, and an MSA anchor update, until the
    mean relative change in the anchor drops below the tolerance."""
    cfg = config or EstimationConfig()
    design = build_design(trips, fares)
    margin = compute_margin(cfg.margin_percentile)

    beta0 = np.zeros(N_PARAMS)
    prev_agents = None
    converged = False
    iterations = 0
    n_slack = 0
    agent_change = math.inf
    ind_map: dict = {}
    od_map: dict = {}
    agents = np.zeros((design.n, N_PARAMS))

    for i in range(cfg.max_outer_iterations):
        iterations = i + 1
        agents, n_slack = _solve_all_agents(design, beta0, margin, cfg)
        ind_map, od_map, _, agents = aggregate_levels(
            agents, design.individual_ids, design.od_pairs
        )
        y0 = agents.mean(axis=0)
        new_beta0 = (i * beta0 + y0) / (i + 1)
        if prev_agents is not None:
            agent_change = _relative_change(agents, prev_agents)
        prev_agents = agents
        change = _relative_change(new_beta0, beta0)
        beta0 = new_beta0
        if change < cfg.msa_tolerance:
            converged = True
            break

    params = TasteParameterSet(
        population_values=beta0,
        agent_matrix=agents,
        agent_keys=list(zip(design.individual_ids, design.trip_ids)),
        individual_values=ind_map,
        trip_values=od_map,
    )
    return EstimationResult(
        params=params,
        iterations=iterations,
        converged=converged,
        n_slack_agents=n_slack,
        agent_level_change=agent_change,
        margin=margin,
    )


def choice_probabilities(params: TasteParameterSet, trips: Sequence[TripRecord],
                         fares: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """(n, 5) predicted mode probabilities under the agent-level vectors."""
    design = build_design(trips, fares)
    B = np.vstack([params.agent_vector(t.trip_id) for t in trips])
    U = np.einsum("njk,nk->nj", design.X, B)
    U -= U.max(axis=1, keepdims=True)
    E = np.exp(U)
    return E / E.sum(axis=1, keepdims=True)


def loglikelihood_and_fit(params: TasteParameterSet, trips: Sequence[TripRecord],
                          fares: Optional[Mapping[str, float]] = None):
    """(LL_model, LL_null, McFadden R^2); the null is equal-probability
    choice over the five available modes."""
    P = choice_probabilities(params, trips, fares)
    chosen = np.array([MODE_INDEX[t.observed_mode] for t in trips])
    p_obs = np.clip(P[np.arange(len(trips)), chosen], 1e-300, None)
    ll_model = float(np.log(p_obs).sum())
    ll_null = float(len(trips) * math.log(1.0 / len(MODES)))
    r2 = 1.0 - ll_model / ll_null
    return ll_model, ll_null, r2


def hit_rate(params: TasteParameterSet, trips: Sequence[TripRecord],
             fares: Optional[Mapping[str, float]] = None) -> float:
    P = choice_probabilities(params, trips, fares)
    chosen = np.array([MODE_INDEX[t.observed_mode] for t in trips])
    return float(np.mean(P.argmax(axis=1) == chosen))


def bootstrap_standard_errors(
    trips: Sequence[TripRecord],
    config: Optional[EstimationConfig] = None,
    fares: Optional[Mapping[str, float]] = None,
) -> dict[str, float]:
    """Population-parameter standard errors from day-type-stratified
    resampling with replacement; deterministic under the config seed."""
    cfg = config or EstimationConfig()
    if cfg.bootstrap_resamples < 2:
        raise ValueError("need at least 2 bootstrap resamples")
    rng = np.random.default_rng(cfg.seed)
    strata: dict = {}
    for idx, t in enumerate(trips):
        strata.setdefault(t.day_type, []).append(idx)
    estimates = []
    for _ in range(cfg.bootstrap_resamples):
        pick: list[int] = []
        for members in strata.values():
            members = np.asarray(members)
            pick.extend(rng.choice(members, size=members.size, replace=True))
        sample = [trips[i] for i in pick]
        estimates.append(estimate(sample, cfg, fares).params.population_values)
    ses = np.std(np.vstack(estimates), axis=0, ddof=1)
    return dict(zip(PARAM_NAMES, ses))


def estimation_report(result: EstimationResult, standard_errors=None):
    """Delimited-text-friendly table (parameter, mean, SE, t-stat, level)."""
    import pandas as pd

    rows = []
    for k in PARAM_NAMES:
        mean = float(result.params.population_values[PARAM_INDEX[k]])
        se = None if standard_errors is None else standard_errors.get(k)
        t = mean / se if se else float("nan")
        rows.append({
            "parameter": k,
            "mean": mean,
            "std_error": float("nan") if se is None else se,
            "t_stat": t,
            "level": LEVEL_TAGS[k],
        })
    return pd.DataFrame(rows)
