"""Command-line surface for the ride-pass pricing pipeline.

Subcommands cover the whole workflow: synthetic population generation, data
ingestion, taste estimation, dispatch-simulator calibration, day-to-day
equilibrium runs, pricing-grid sweeps, subsidy evaluations, and report
printing. A single YAML configuration file can supply any option; explicit
flags win over the file. Environment variables are honored only for the
output directory (RIDEPASS_OUTPUT_DIR) and parallelism (RIDEPASS_JOBS).
"""

from __future__ import annotations

import json
import os
import time

import click
import numpy as np
import pandas as pd
import yaml

from .calibration import CalibrationTargets
from .core import DayType, PricingPolicy, SubsidySpec, Population
from .day2day import LoopConfig, run_to_equilibrium
from .dispatch import (
    DispatchConfig,
    ZoneNetwork,
    calibrate_grid_search,
    synthetic_request_stream,
)
from .estimation import (
    EstimationConfig,
    bootstrap_standard_errors,
    estimate,
    estimation_report,
    hit_rate,
    loglikelihood_and_fit,
)
from .generator import GeneratorSpec, generate_population
from .io import (
    emit_outputs,
    emit_population,
    infer_missing_attributes,
    ingest_population,
    load_joint_state,
    save_joint_state,
)
from .joint import JointConfig, joint_estimate
from .scenario import (
    PricingGrid,
    ScenarioConfig,
    run_pricing_sweep,
    run_subsidy_scenario,
    subsidy_report_frame,
)


def _load_config(path):
    if not path:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _opt(ctx_cfg: dict, section: str, key: str, flag_value, default):
    """Flag > config file > default."""
    if flag_value is not None:
        return flag_value
    return ctx_cfg.get(section, {}).get(key, default)


def _out_dir(value: str) -> str:
    return os.environ.get("RIDEPASS_OUTPUT_DIR", value)


def _jobs(value) -> int:
    env = os.environ.get("RIDEPASS_JOBS")
    if env:
        return int(env)
    return int(value or 1)


def _parse_zones(text: str) -> tuple:
    gx, gy = text.lower().split("x")
    return int(gx), int(gy)


def _load_population(cfg, data, size, seed, zones) -> Population:
    data = _opt(cfg, "population", "data", data, None)
    if data:
        res = ingest_population(data)
        if res.errors:
            for e in res.errors:
                click.echo(f"  {e.file}:{e.line}: {e.message}", err=True)
            raise click.ClickException(f"{len(res.errors)} bad rows in {data}")
        infer_missing_attributes(res.population)
        return res.population
    spec = GeneratorSpec(
        population_size=_opt(cfg, "population", "size", size, 5000),
        seed=_opt(cfg, "population", "seed", seed, 42),
        zone_grid=_parse_zones(_opt(cfg, "population", "zones", zones, "10x10")),
    )
    pop, _ = generate_population(spec)
    return pop


@click.group()
@click.option("--config", type=click.Path(exists=True), default=None,
              help="YAML configuration supplying any option.")
@click.pass_context
def main(ctx, config):
    """Ride-pass pricing analysis pipeline."""
    ctx.obj = _load_config(config)


@main.command()
@click.option("--size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--zones", default=None, help="Zone grid, e.g. 10x10.")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def generate(cfg, size, seed, zones, out):
    """Write a seeded synthetic population to a directory."""
    out = _out_dir(out)
    spec = GeneratorSpec(
        population_size=_opt(cfg, "population", "size", size, 5000),
        seed=_opt(cfg, "population", "seed", seed, 42),
        zone_grid=_parse_zones(_opt(cfg, "population", "zones", zones, "10x10")),
    )
    t0 = time.time()
    pop, truth = generate_population(spec)
    emit_population(pop, out)
    truth_frame = pd.DataFrame(
        [{"parameter": k, "value": v} for k, v in truth.ascs.items()]
        + [{"parameter": k, "value": v} for k, v in truth.generic_params.items()]
    )
    emit_outputs({"ground_truth": truth_frame}, out,
                 manifest={"command": "generate", "size": spec.population_size,
                           "seed": spec.seed, "zones": list(spec.zone_grid)},
                 wall_time_s=time.time() - t0)
    click.echo(f"wrote {len(pop.individuals)} individuals, "
               f"{len(pop.trips)} trips to {out}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(),
              help="Re-emit the cleaned population here.")
def ingest(data, out):
    """Validate a population directory; report row-level errors."""
    res = ingest_population(data)
    for e in res.errors:
        click.echo(f"{e.file}:{e.line}: {e.message}")
    filled = infer_missing_attributes(res.population)
    click.echo(f"{len(res.population.individuals)} individuals, "
               f"{len(res.population.trips)} trips, "
               f"{len(res.errors)} rejected rows, {filled} attributes inferred")
    if out:
        emit_population(res.population, _out_dir(out))
    if res.errors:
        raise SystemExit(1)


@main.command(name="estimate")
@click.option("--data", default=None, type=click.Path(exists=True))
@click.option("--size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--zones", default=None)
@click.option("--day-type", type=click.Choice(["weekday", "weekend", "both"]),
              default="both")
@click.option("--max-iterations", type=int, default=None)
@click.option("--bootstrap/--no-bootstrap", default=False)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def estimate_cmd(cfg, data, size, seed, zones, day_type, max_iterations,
                 bootstrap, out):
    """Estimate agent-level mode-choice parameters."""
    out = _out_dir(out)
    pop = _load_population(cfg, data, size, seed, zones)
    est_cfg = EstimationConfig(
        max_outer_iterations=_opt(cfg, "estimation", "max_iterations",
                                  max_iterations, 50))
    days = ([DayType.weekday, DayType.weekend] if day_type == "both"
            else [DayType(day_type)])
    t0 = time.time()
    tables = {}
    for day in days:
        trips = pop.trips_of(day)
        result = estimate(trips, est_cfg)
        ses = bootstrap_standard_errors(trips, est_cfg) if bootstrap else None
        tables[f"estimates_{day.value}"] = estimation_report(result, ses)
        ll, ll0, rho2 = loglikelihood_and_fit(result.params, trips)
        hr = hit_rate(result.params, trips)
        tables[f"fit_{day.value}"] = pd.DataFrame([{
            "iterations": result.iterations, "converged": result.converged,
            "log_likelihood": ll, "ll_null": ll0, "mcfadden_r2": rho2,
            "hit_rate": hr, "n_trips": len(trips),
        }])
        click.echo(f"{day.value}: {result.iterations} iterations, "
                   f"converged={result.converged}, hit rate {hr:.3f}")
    emit_outputs(tables, out, manifest={"command": "estimate",
                                        "day_type": day_type},
                 wall_time_s=time.time() - t0)


@main.command(name="calibrate-sim")
@click.option("--target-in-vehicle", type=float, required=True)
@click.option("--target-wait", type=float, required=True)
@click.option("--target-utilization", type=float, required=True)
@click.option("--zones", default="11x11")
@click.option("--requests", "n_requests", type=int, default=950)
@click.option("--seed", type=int, default=3)
@click.option("--fleet-range", default="8:16:2", help="lo:hi:step")
@click.option("--theta-range", default="0.0:1.0:0.25")
@click.option("--out", required=True, type=click.Path())
def calibrate_sim(target_in_vehicle, target_wait, target_utilization, zones,
                  n_requests, seed, fleet_range, theta_range, out):
    """Grid-search dispatch parameters against observed service levels."""
    out = _out_dir(out)
    gx, gy = _parse_zones(zones)
    net = ZoneNetwork.grid(gx, gy)
    stream = synthetic_request_stream(net, n_requests, seed=seed,
                                      min_distance_miles=1.0)

    def _range(text, cast):
        lo, hi, step = (cast(v) for v in text.split(":"))
        return list(np.arange(lo, hi + step / 2, step))

    t0 = time.time()
    best, table = calibrate_grid_search(
        {"in_vehicle": target_in_vehicle, "wait": target_wait,
         "utilization": target_utilization},
        {"fleet_size": [int(v) for v in _range(fleet_range, float)],
         "theta_operator_weight": _range(theta_range, float)},
        stream, net, base=DispatchConfig(seed=seed, service_hours=20.0))
    emit_outputs({"dispatch_grid": pd.DataFrame(table)}, out,
                 manifest={"command": "calibrate-sim", "seed": seed},
                 wall_time_s=time.time() - t0)
    click.echo(f"best: fleet={best.fleet_size} "
               f"theta={best.theta_operator_weight:.2f}")


def _get_joint_state(cfg, pop, params_path, joint_iterations, est_iterations,
                     cal_starts, weekly_subs, monthly_subs, out):
    if params_path:
        return load_joint_state(params_path)
    n = len(pop.individuals)
    targets = CalibrationTargets(
        num_weekly=_opt(cfg, "joint", "weekly_subs", weekly_subs, round(0.06 * n)),
        num_monthly=_opt(cfg, "joint", "monthly_subs", monthly_subs, round(0.02 * n)),
        population_size=n,
    )
    jcfg = JointConfig(
        estimation=EstimationConfig(
            max_outer_iterations=_opt(cfg, "joint", "est_iterations",
                                      est_iterations, 15)),
        max_iterations=_opt(cfg, "joint", "iterations", joint_iterations, 3),
        calibration_starts=_opt(cfg, "joint", "calibration_starts", cal_starts, 8),
    )
    state = joint_estimate(pop, targets, PricingPolicy(), jcfg)
    save_joint_state(state, os.path.join(out, "joint_state.npz"))
    return state


def _scenario_config(cfg, fleet, theta_learn, max_days, expectation, jobs,
                     weekly, monthly, intervals):
    def _pair(text, default):
        if not text:
            return default
        lo, hi = (float(v) for v in text.split(":"))
        return (lo, hi)

    return ScenarioConfig(
        grid=PricingGrid(
            weekly_range=_pair(weekly, (10.0, 40.0)),
            monthly_range=_pair(monthly, (40.0, 100.0)),
            intervals=_opt(cfg, "grid", "intervals", intervals, 20),
        ),
        dispatch=DispatchConfig(
            fleet_size=_opt(cfg, "dispatch", "fleet", fleet, 10)),
        loop=LoopConfig(
            theta=_opt(cfg, "loop", "theta", theta_learn, 0.5),
            max_days=_opt(cfg, "loop", "max_days", max_days, 50),
            expectation_mode=expectation),
        jobs=_jobs(jobs),
    )


_shared_options = [
    click.option("--data", default=None, type=click.Path(exists=True)),
    click.option("--size", type=int, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--zones", default=None),
    click.option("--params", "params_path", default=None,
                 type=click.Path(exists=True),
                 help="Saved joint_state.npz; skips estimation."),
    click.option("--joint-iterations", type=int, default=None),
    click.option("--est-iterations", type=int, default=None),
    click.option("--cal-starts", type=int, default=None),
    click.option("--weekly-subs", type=float, default=None),
    click.option("--monthly-subs", type=float, default=None),
    click.option("--fleet", type=int, default=None),
    click.option("--theta-learn", type=float, default=None),
    click.option("--max-days", type=int, default=None),
    click.option("--expectation/--sample", default=True),
    click.option("--out", required=True, type=click.Path()),
]


def _with_shared(fn):
    for opt in reversed(_shared_options):
        fn = opt(fn)
    return fn


@main.command()
@_with_shared
@click.pass_obj
def equilibrium(cfg, data, size, seed, zones, params_path, joint_iterations,
                est_iterations, cal_starts, weekly_subs, monthly_subs, fleet,
                theta_learn, max_days, expectation, out):
    """Run the day-to-day loop to a stochastic user equilibrium."""
    out = _out_dir(out)
    os.makedirs(out, exist_ok=True)
    pop = _load_population(cfg, data, size, seed, zones)
    t0 = time.time()
    state = _get_joint_state(cfg, pop, params_path, joint_iterations,
                             est_iterations, cal_starts, weekly_subs,
                             monthly_subs, out)
    sc = _scenario_config(cfg, fleet, theta_learn, max_days, expectation,
                          1, None, None, 1)
    report = run_to_equilibrium(pop, state, PricingPolicy(), sc.dispatch, sc.loop)
    emit_outputs({"day_series": report.trace_frame()}, out,
                 manifest={"command": "equilibrium",
                           "converged": report.converged},
                 wall_time_s=time.time() - t0)
    click.echo(f"{len(report.days)} days, converged={report.converged}, "
               f"DMR {report.final_dmr:.1f}, TNS {report.final_tns:.1f}")


@main.command(name="sweep-pricing")
@_with_shared
@click.option("--weekly", default=None, help="lo:hi weekly price range.")
@click.option("--monthly", default=None, help="lo:hi monthly price range.")
@click.option("--intervals", type=int, default=None)
@click.option("--jobs", type=int, default=None)
@click.pass_obj
def sweep_pricing(cfg, data, size, seed, zones, params_path, joint_iterations,
                  est_iterations, cal_starts, weekly_subs, monthly_subs, fleet,
                  theta_learn, max_days, expectation, out, weekly, monthly,
                  intervals, jobs):
    """Evaluate equilibrium metrics over the pricing grid."""
    out = _out_dir(out)
    os.makedirs(out, exist_ok=True)
    pop = _load_population(cfg, data, size, seed, zones)
    t0 = time.time()
    state = _get_joint_state(cfg, pop, params_path, joint_iterations,
                             est_iterations, cal_starts, weekly_subs,
                             monthly_subs, out)
    sc = _scenario_config(cfg, fleet, theta_learn, max_days, expectation,
                          jobs, weekly, monthly, intervals)
    surface, best = run_pricing_sweep(pop, state, sc)
    tables = {"pricing_surface": surface}
    if best is not None:
        tables["pricing_optimum"] = pd.DataFrame([best])
        click.echo(f"optimum: weekly ${best['price_weekly']:.2f}, "
                   f"monthly ${best['price_monthly']:.2f}, "
                   f"TDR ${best['tdr_total']:.2f}/day")
    emit_outputs(tables, out,
                 manifest={"command": "sweep-pricing",
                           "cells": len(surface)},
                 wall_time_s=time.time() - t0)


@main.command()
@_with_shared
@click.option("--subsidy-zones", required=True,
              help="Comma-separated zone ids.")
@click.option("--discount", type=click.Choice(["0", "0.5", "1.0"]),
              default="1.0")
@click.option("--window", default="0:1440", help="lo:hi minutes from midnight.")
@click.pass_obj
def subsidy(cfg, data, size, seed, zones, params_path, joint_iterations,
            est_iterations, cal_starts, weekly_subs, monthly_subs, fleet,
            theta_learn, max_days, expectation, out, subsidy_zones, discount,
            window):
    """Paired equilibrium comparison with and without a fare subsidy."""
    out = _out_dir(out)
    os.makedirs(out, exist_ok=True)
    pop = _load_population(cfg, data, size, seed, zones)
    t0 = time.time()
    state = _get_joint_state(cfg, pop, params_path, joint_iterations,
                             est_iterations, cal_starts, weekly_subs,
                             monthly_subs, out)
    sc = _scenario_config(cfg, fleet, theta_learn, max_days, expectation,
                          1, None, None, 1)
    lo, hi = (float(v) for v in window.split(":"))
    spec = SubsidySpec(zone_set=frozenset(subsidy_zones.split(",")),
                       time_window=(lo, hi),
                       discount_fraction=float(discount))
    report = run_subsidy_scenario(pop, state, spec, sc)
    emit_outputs({"subsidy_report": subsidy_report_frame(report)}, out,
                 manifest={"command": "subsidy", "discount": float(discount)},
                 wall_time_s=time.time() - t0)
    click.echo(f"delta MT trips/day {report.delta_mt_trips:+.2f}, "
               f"delta driving {report.delta_driving_trips:+.2f}, "
               f"subsidy ${report.required_subsidy_per_day:.2f}/day")


@main.command()
@click.option("--dir", "directory", required=True,
              type=click.Path(exists=True))
def report(directory):
    """Print the manifest and table summaries from an output directory."""
    manifest_path = os.path.join(directory, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            click.echo(json.dumps(json.load(fh), indent=2, sort_keys=True))
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".csv"):
            continue
        frame = pd.read_csv(os.path.join(directory, name))
        click.echo(f"\n== {name} ({len(frame)} rows) ==")
        click.echo(frame.head(10).to_string(index=False))


if __name__ == "__main__":
    main()
