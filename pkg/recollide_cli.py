#!/usr/bin/env python3
"""
recollide - Recollision Experiment Command Line Interface

Runs the bounce simulator, tail and exit-distribution estimators, the
indirect-recollision check, the coupled gas and the invariant suite, and
writes reproducible CSV or JSON artifacts.

Usage:
    recollide bounce --u 0,1,0 --xi 10 --v 1,0,0 --r 1 --format csv
    recollide tails --regime trap-n3 --s 20,40,80,160 --budget 2e6 --seed 7
    recollide exit-dist --R 10,20,40,80 --budget 1e6
    recollide indirect --eps 0.1,0.03,0.01 --budget 1e7
    recollide gas --eps 0.05 --horizon 100 --n-paths 1000
    recollide selftest --seed 1 --html selftest.html
"""

from pathlib import Path
from typing import Any, Callable, Dict, Optional
import logging
import math
import sys
import time

import click
import numpy as np
import pandas as pd

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from src.core import __version__
from src.core.errors import ConfigError, EstimatorError
from src.core.run_config import (
    RunConfig,
    check_seed,
    default_seed,
    load_config,
    parse_budget,
    parse_floats,
    parse_vector,
)

logger = logging.getLogger("recollide")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
REGIMES = ["short", "long-n3", "long-n4plus", "trap-n3", "trap-n4plus"]


@click.group()
@click.version_option(version=__version__, prog_name='recollide')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='YAML file with per-subcommand defaults')
@click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']), default='WARNING', show_default=True)
@click.pass_context
def cli(ctx, config_path, log_level):
    """Recollision geometry of the random Lorentz gas"""
    logging.basicConfig(level=getattr(logging, log_level), format=LOG_FORMAT, stream=sys.stderr, force=True)
    if config_path:
        try:
            ctx.default_map = load_config(config_path)
        except ConfigError as e:
            _fail_config(e)


def common_options(default_format: str = 'json'):
    """Seed, worker, output and format options shared by every subcommand."""

    def decorate(fn):
        fn = click.option('--format', 'fmt', type=click.Choice(['csv', 'json']), default=default_format, show_default=True, help='Artifact format')(fn)
        fn = click.option('--out', 'out_path', type=click.Path(dir_okay=False), help='Output file (default recollide_results/<subcommand>.<format>)')(fn)
        fn = click.option('--workers', type=int, default=1, show_default=True, help='Worker processes; results do not depend on it')(fn)
        fn = click.option('--seed', type=int, default=None, help='Base seed (default: $RECOLLIDE_SEED or 0)')(fn)
        return fn

    return decorate


def _fail_config(error: Exception):
    logger.debug(f"configuration rejected: {error}")
    click.echo(f"error: {error}", err=True)
    sys.exit(2)


def _run(name: str, body: Callable[[], None]) -> None:
    """Execute a subcommand body with the exit-code mapping 0 / 1 (estimator) / 2 (config)."""
    try:
        body()
    except ConfigError as e:
        _fail_config(e)
    except EstimatorError as e:
        logger.error(f"{name}: {e}")
        click.echo(f"❌ Estimator failed: {e}", err=True)
        sys.exit(1)
    except ValueError as e:
        # library argument checks that the command line did not catch first
        _fail_config(e)
    except Exception as e:
        logger.error(f"{name}: {e}")
        click.echo(f"❌ Error: {e}", err=True)
        sys.exit(1)


def make_run(subcommand: str, seed: Optional[int], budget, out_path: Optional[str], fmt: str, workers: int, **params) -> RunConfig:
    resolved = default_seed() if seed is None else check_seed(seed)
    if out_path is None:
        out_path = str(Path("recollide_results") / f"{subcommand}.{fmt}")
    return RunConfig(
        subcommand=subcommand,
        seed=resolved,
        budget=None if budget is None else parse_budget(budget),
        out_path=out_path,
        format=fmt,
        workers=workers,
        params=params,
    )


def _check_budget(run: RunConfig, minimum: int) -> None:
    if run.budget < minimum:
        raise ConfigError(f"{run.subcommand} budget must be at least {minimum}, got {run.budget}")


def emit(run: RunConfig, payload: Dict[str, Any], frame: Optional[pd.DataFrame], started: float) -> Path:
    """Write the artifact in the requested format and echo a summary line."""
    from src.core.output import stamp, strip_volatile, version_string, write_csv, write_json

    wall = time.time() - started
    if run.format == 'csv':
        if frame is None:
            frame = pd.DataFrame([{k: v for k, v in payload.items() if np.isscalar(v) or v is None}])
        path = write_csv(run.out_path, frame, run.seed, {"version": version_string(), "wall_time_s": wall})
    else:
        body = dict(strip_volatile(payload))
        if frame is not None:
            body["rows"] = frame.to_dict(orient="records")
        path = write_json(run.out_path, stamp(body, run.seed, wall, run.to_dict()))
    click.echo(f"✅ {run.subcommand} written to {path} ({wall:.1f}s)")
    return path


def _within(value: float, lo: float, hi: float, name: str) -> float:
    if not lo <= value <= hi:
        raise ConfigError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


@cli.command()
@click.option('--u', required=True, help='Velocity after the first collision, e.g. "0,1,0"')
@click.option('--xi', type=float, required=True, help='Flight time between the first two collisions')
@click.option('--v', required=True, help='Velocity after the second collision')
@click.option('--r', type=float, default=1.0, show_default=True, help='Obstacle radius')
@click.option('--n-max', type=int, default=10_000, show_default=True, help='Collision cap')
@common_options(default_format='csv')
def bounce(u, xi, v, r, n_max, seed, workers, out_path, fmt):
    """Simulate one two-scatterer bounce sequence"""

    def body():
        from src.core.two_scatterer import RecollisionEvent, simulate_bounce

        started = time.time()
        u_vec = parse_vector(u, "u")
        v_vec = parse_vector(v, "v")
        if not xi > 0.0 or not r > 0.0:
            raise ConfigError(f"xi and r must be positive, got xi={xi}, r={r}")
        if n_max < 3:
            raise ConfigError(f"n-max must be at least 3, got {n_max}")
        run = make_run('bounce', seed, None, out_path, fmt, workers, u=u_vec.tolist(), xi=xi, v=v_vec.tolist(), r=r, n_max=n_max)

        trace = simulate_bounce(RecollisionEvent(u=u_vec, xi=xi, v=v_vec, r=r), n_max)
        payload = {
            "n_collisions": trace.n_collisions,
            "beta": trace.beta,
            "w_exit": trace.w_exit.tolist(),
            "truncated": trace.truncated,
            "a": trace.a.tolist(),
            "b": trace.b.tolist(),
        }
        emit(run, payload, trace.to_dataframe(), started)
        click.echo(f"   N = {trace.n_collisions}, beta = {trace.beta:.6g}")

    _run('bounce', body)


@cli.command()
@click.option('--regime', type=click.Choice(REGIMES), required=True, help='Event family')
@click.option('--s', required=True, help='Comma-separated thresholds')
@click.option('--budget', required=True, help='Number of draws (accepts 2e6)')
@click.option('--r', 'radius', type=float, default=None, help='Estimate under mu at this radius instead of lambda')
@click.option('--h-min', type=float, default=0.01, show_default=True, help='Lower flight-time cutoff (lambda)')
@click.option('--h-max', type=float, default=math.inf, help='Upper flight-time cutoff (lambda)')
@click.option('--h-range', type=click.Choice(['short', 'long']), default=None, help='Flight-time split for trap regimes')
@click.option('--fit-window', default=None, help='Fit range "lo,hi" for the slope')
@click.option('--fit/--no-fit', default=True, show_default=True, help='Fit the log-log slope')
@common_options()
def tails(regime, s, budget, radius, h_min, h_max, h_range, fit_window, fit, seed, workers, out_path, fmt):
    """Tail masses of the recollision regimes with a log-log slope fit"""

    def body():
        from src.core.estimators import MIN_BUDGET, estimate_angle_tail, estimate_mu_tails, estimate_trap_tail
        from src.core.sampling import RngStream

        started = time.time()
        grid = parse_floats(s, "s")
        window = None
        if fit_window:
            window = tuple(parse_floats(fit_window, "fit-window"))
            if len(window) != 2 or window[0] >= window[1]:
                raise ConfigError(f"fit-window needs lo,hi with lo < hi, got {fit_window!r}")
        if any(x <= 0 for x in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"s must be positive and strictly increasing, got {grid}")
        if radius is not None:
            _within(radius, 1e-12, 0.1, "r")
        if not 0.0 < h_min < h_max:
            raise ConfigError(f"need 0 < h-min < h-max, got {h_min}, {h_max}")
        run = make_run(
            'tails', seed, budget, out_path, fmt, workers,
            regime=regime, s=grid, r=radius, h_min=h_min, h_max=h_max, h_range=h_range, fit_window=window, fit=fit,
        )
        _check_budget(run, MIN_BUDGET)
        stream = RngStream(seed=run.seed)

        if radius is not None:
            estimate = estimate_mu_tails(radius, regime, grid, run.budget, stream, workers, fit=fit, fit_window=window)
        elif regime.startswith('trap'):
            n_filter = "=3" if regime == 'trap-n3' else ">=4"
            estimate = estimate_trap_tail(
                n_filter, grid, run.budget, stream, h_range=h_range, h_min=h_min, h_max=h_max,
                workers=workers, fit=fit, fit_window=window,
            )
        else:
            if h_range is not None:
                raise ConfigError("--h-range only applies to trap regimes")
            estimate = estimate_angle_tail(
                regime, grid, run.budget, stream, h_min=h_min, h_max=h_max,
                workers=workers, fit=fit, fit_window=window,
            )

        emit(run, estimate.summary(), estimate.to_dataframe(), started)
        if fit:
            lo, hi = estimate.slope_ci
            click.echo(f"   slope {estimate.slope:.3f} [{lo:.3f}, {hi:.3f}], anchor {estimate.anchor:.4g} +- {estimate.anchor_stderr:.2g}")

    _run('tails', body)


@cli.command('exit-dist')
@click.option('--R', 'R', required=True, help='Comma-separated flight lengths R >= 10')
@click.option('--budget', required=True, help='Cone draws per R')
@click.option('--bins', type=int, default=None, help='Equal-area bins (default grows with the sample)')
@click.option('--nu', default='0,1,0', show_default=True, help='Fixed first-flight direction, at least 5 degrees from e = (1,0,0)')
@click.option('--cone-mass/--no-cone-mass', default=False, help='Also estimate the recollision solid angle')
@common_options()
def exit_dist(R, budget, bins, nu, cone_mass, seed, workers, out_path, fmt):
    """TV distance of the exit direction from uniform, per R"""

    def body():
        from src.core.estimators import estimate_exit_tv, fit_loglog_slope, recollision_cone_mass, check_nu
        from src.core.sampling import RngStream
        from src.core.errors import TooFewPoints

        started = time.time()
        radii = parse_floats(R, "R")
        for value in radii:
            _within(value, 10.0, math.inf, "R")
        try:
            nu_vec = check_nu(parse_vector(nu, "nu"))
        except ValueError as error:
            raise ConfigError(str(error)) from error
        if bins is not None and bins < 2:
            raise ConfigError(f"bins must be at least 2, got {bins}")
        run = make_run('exit-dist', seed, budget, out_path, fmt, workers, R=radii, bins=bins, nu=nu_vec.tolist(), cone_mass=cone_mass)
        _check_budget(run, 2)
        stream = RngStream(seed=run.seed)

        rows = []
        for i, radius in enumerate(radii):
            tv = estimate_exit_tv(radius, nu_vec, run.budget, stream.substream(i), bins=bins, workers=workers)
            row = strip_row(tv.to_dict())
            if cone_mass:
                mass = recollision_cone_mass(radius, run.budget, stream.substream(len(radii) + i), nu_vec, workers)
                row.update({
                    "cone_solid_angle": mass.solid_angle,
                    "cone_stderr": mass.stderr,
                    "cone_reference": mass.reference,
                })
            rows.append(row)
            click.echo(f"   R={radius:g}: tv {tv.tv_hat:.4f} +- {tv.stderr:.4f} (bias {tv.bias:.4f}), KS p={tv.ks_pvalue:.3g}")
        frame = pd.DataFrame(rows)

        payload: Dict[str, Any] = {"tv_slope": None, "tv_slope_ci": None}
        try:
            slope, ci = fit_loglog_slope(frame["R"], frame["tv_hat"], frame["stderr"])
            payload.update({"tv_slope": slope, "tv_slope_ci": list(ci)})
        except TooFewPoints:
            logger.info("fewer than four R values, no TV slope")
        emit(run, payload, frame, started)

    _run('exit-dist', body)


def strip_row(row: Dict[str, Any]) -> Dict[str, Any]:
    """Flatten a result dict into a table row."""
    out = {k: v for k, v in row.items() if k not in ("counts", "wall_time_s", "seed", "budget")}
    for name, value in row.get("counts", {}).items():
        out[f"count_{name}"] = value
    return out


@cli.command()
@click.option('--eps', required=True, help='Comma-separated radii')
@click.option('--budget', required=True, help='Flight pairs')
@click.option('--event', type=click.Choice(['endpoint', 'tube']), default='endpoint', show_default=True)
@click.option('--quadrature/--no-quadrature', default=True, show_default=True, help='Compare with the quadrature oracle (endpoint only)')
@common_options()
def indirect(eps, budget, event, quadrature, seed, workers, out_path, fmt):
    """Probability that two free flights return within eps of their start"""

    def body():
        from src.core.estimators import indirect_prob_curve, indirect_prob_quadrature
        from src.core.sampling import RngStream

        started = time.time()
        epsilons = sorted(parse_floats(eps, "eps"))
        for value in epsilons:
            _within(value, 1e-12, 1.0, "eps")
        run = make_run('indirect', seed, budget, out_path, fmt, workers, eps=epsilons, event=event, quadrature=quadrature)
        _check_budget(run, 2)

        frame = indirect_prob_curve(epsilons, run.budget, RngStream(seed=run.seed), event=event, workers=workers)
        frame["p_over_eps2"] = frame["p_hat"] / frame["epsilon"] ** 2
        frame["p_over_eps2_stderr"] = frame["stderr"] / frame["epsilon"] ** 2
        if quadrature and event == 'endpoint':
            frame["quadrature"] = [indirect_prob_quadrature(e) for e in frame["epsilon"]]
            with np.errstate(invalid="ignore", divide="ignore"):
                frame["z"] = (frame["p_hat"] - frame["quadrature"]) / frame["stderr"]

        payload: Dict[str, Any] = {"event": event, "ratio": None, "ratio_stderr": None}
        if len(frame) >= 2:
            from src.aggregators.mc_aggregator import ratio_with_stderr

            small, large = frame.iloc[0], frame.iloc[-1]
            ratio, se = ratio_with_stderr(small["p_over_eps2"], small["p_over_eps2_stderr"], large["p_over_eps2"], large["p_over_eps2_stderr"])
            payload.update({"ratio": ratio, "ratio_stderr": se})
            click.echo(f"   [p/eps^2] ratio eps={small['epsilon']:g} vs {large['epsilon']:g}: {ratio:.3f} +- {se:.3f}")
        emit(run, payload, frame, started)

    _run('indirect', body)


@cli.command()
@click.option('--eps', type=float, default=0.05, show_default=True, help='Obstacle radius')
@click.option('--horizon', type=float, default=100.0, show_default=True, help='Time horizon T')
@click.option('--n-paths', type=int, default=1000, show_default=True)
@click.option('--thinning/--no-thinning', default=True, show_default=True)
@click.option('--mechanics/--no-mechanics', default=True, show_default=True)
@click.option('--classifiers/--no-classifiers', default=True, show_default=True)
@click.option('--shadowing-mode', type=click.Choice(['line', 'half_line']), default='half_line', show_default=True)
@click.option('--msd-grid', default=None, help='Comma-separated times for the MSD table of X, Y and Z')
@click.option('--dump-paths', type=click.Path(dir_okay=False), default=None, help='CSV dump of every path')
@common_options()
def gas(eps, horizon, n_paths, thinning, mechanics, classifiers, shadowing_mode, msd_grid, dump_paths, seed, workers, out_path, fmt):
    """Coupled exploration, flight and memory processes"""

    def body():
        from src.core.lorentz import GasConfig, msd_curve, run_coupled
        from src.core.output import write_csv

        started = time.time()
        grid = parse_floats(msd_grid, "msd-grid") if msd_grid else None
        if grid is not None and (grid[0] < 0 or any(b <= a for a, b in zip(grid, grid[1:]))):
            raise ConfigError(f"msd-grid must be non-negative and increasing, got {grid}")
        run = make_run(
            'gas', seed, None, out_path, fmt, workers,
            eps=eps, horizon=horizon, n_paths=n_paths, thinning=thinning, mechanics=mechanics,
            classifiers=classifiers, shadowing_mode=shadowing_mode, msd_grid=grid,
        )
        config = GasConfig(
            eps=eps, horizon=horizon, seed=run.seed, n_paths=n_paths, thinning=thinning,
            mechanics=mechanics, classifiers=classifiers, shadowing_mode=shadowing_mode,
        )

        coupled = run_coupled(config, workers)
        payload = coupled.summary()
        payload["gas_config"] = config.to_dict()
        if grid is not None:
            tables = []
            for process in ("X", "Y", "Z"):
                table = msd_curve(process, grid, n_paths, config, workers)
                table.insert(0, "process", process)
                tables.append(table)
            payload["msd"] = pd.concat(tables, ignore_index=True).to_dict(orient="records")
        if dump_paths:
            write_csv(dump_paths, coupled.path_dump(), run.seed)

        emit(run, payload, coupled.to_dataframe(), started)
        rate, se = coupled.mismatch_rate()
        click.echo(f"   mismatch rate {rate:.3e} +- {se:.1e} per leg, flags {coupled.flags_histogram()}")

    _run('gas', body)


@cli.command()
@click.option('--budget', default='20000', show_default=True, help='Draws per check')
@click.option('--gas-paths', type=int, default=20, show_default=True)
@click.option('--html', 'html_path', type=click.Path(dir_okay=False), default=None, help='Also write an HTML report')
@common_options()
def selftest(budget, gas_paths, html_path, seed, workers, out_path, fmt):
    """Run the invariant suite"""

    def body():
        from src.core.invariant_suite import run_suite
        from src.core.report_generator import SelftestReportGenerator

        started = time.time()
        run = make_run('selftest', seed, budget, out_path, fmt, workers, gas_paths=gas_paths, html=html_path)
        result = run_suite(run.seed, run.budget, gas_paths)
        if html_path:
            SelftestReportGenerator(result).generate_html_report(Path(html_path))
        emit(run, result.to_dict(), result.to_dataframe(), started)

        for row in result.rows:
            mark = "✅" if row.passed else "❌"
            click.echo(f"   {mark} {row.name}: {row.violations}/{row.checked}")
        if not result.passed:
            click.echo(f"❌ Invariant suite failed: {', '.join(result.failures)}", err=True)
            sys.exit(1)

    _run('selftest', body)


if __name__ == '__main__':
    cli()
