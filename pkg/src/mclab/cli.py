import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer

from mclab import engine
from mclab import logger as logging
from mclab import metrics, orderstats, output, verify
from mclab.context import (
    ConfigError,
    ExperimentConfig,
    StudyKind,
    load_configuration,
    prepare,
)
from mclab.engine import DivergenceError
from mclab.logger import enable_debug
from mclab.noise import NoiseSpec
from mclab.orderstats import MedianLawQuery, QuadratureError
from mclab.rng import CounterStream

logger = logging.getLogger(__name__)

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


option_verbose: bool = typer.Option(
    False,
    "--verbose",
    "-v",
    envvar="MCL_VERBOSE",
    help="Enable more logs.",
    callback=lambda v: enable_debug(v),
)

option_output_directory: Optional[Path] = typer.Option(
    None,
    "--output-dir",
    "-o",
    envvar="MCL_OUTPUT_DIR",
    help="Directory where run directories are created (overrides the config).",
)

option_threads: Optional[int] = typer.Option(
    None,
    "--threads",
    "-t",
    envvar="MCL_THREADS",
    help="Max number of threads for worker simulation and Monte Carlo batches.",
)

argument_configuration: Path = typer.Argument(
    ..., help="Path to a JSON experiment config."
)

app = typer.Typer(no_args_is_help=True)


@contextmanager
def print_summary_and_exit():
    logging.reset_counters()
    start_time = time.monotonic()
    code = 0
    try:
        yield
    except ConfigError as e:
        logger.error(f"invalid configuration: {e}")
        code = EXIT_CONFIG
    except (DivergenceError, QuadratureError) as e:
        logger.error(f"numerical abort: {e}")
        code = EXIT_NUMERICAL
    except VerificationFailed as e:
        logger.error(str(e))
        code = EXIT_FAILED
    logger.summary(
        f"\nWarnings: {logging.get_warning_counter()}. "
        f"Errors: {logging.get_error_counter()}. "
        f"Elapsed: {round(time.monotonic() - start_time, 3)}s."
    )
    sys.exit(code)


class VerificationFailed(Exception):
    pass


def _load(configuration_path: Path, output_directory: Optional[Path]):
    config = load_configuration(configuration_path)
    directory = output_directory or Path(config.output)
    return config, directory


def _require_kind(config: ExperimentConfig, *kinds: StudyKind):
    if config.study.kind not in kinds:
        allowed = " or ".join(kind.value for kind in kinds)
        got = config.study.kind.value
        raise ConfigError("study.kind", f"expected {allowed}, got {got}")


def _run_metrics(config, problem, trace, threads):
    report = metrics.gap_report(
        problem,
        trace,
        gap_points=config.metrics.gap_points,
        mc_samples=config.metrics.mc_samples,
        threads=threads,
    )
    measures = metrics.convergence_measures(trace)
    audits = [
        metrics.audit_theorem1(trace, problem, report=report),
        metrics.audit_theorem2(trace, problem, report=report),
    ]
    block = {
        "gaps": report.to_dict(),
        "convergence": measures.to_dict(),
        "audits": [audit.to_dict() for audit in audits],
    }
    return report, block


@app.command(help="Run one experiment, once per configured seed.")
def run(
    configuration_path: Path = argument_configuration,
    verbose: bool = option_verbose,
    output_directory: Optional[Path] = option_output_directory,
    threads: Optional[int] = option_threads,
) -> None:
    with print_summary_and_exit():
        config, root = _load(configuration_path, output_directory)
        _require_kind(config, StudyKind.SINGLE)
        problem, algos = prepare(config)

        # every run and its metrics complete before anything is written
        results = []
        for algo in algos:
            logger.task(f"Running {algo.aggregation.value} with seed {algo.seed}")
            trace = engine.run(problem, algo, threads)
            report, block = _run_metrics(config, problem, trace, threads)
            summary = trace.summary()
            summary["metrics"] = block
            logger.info(
                f"final |grad f|_1 = {summary['final_mean_grad_l1']:.6g}, "
                f"final |median grad|_1 = {summary['final_median_grad_l1']:.6g}"
            )
            results.append((trace, report, summary))

        directory = output.create_run_directory(root, "run")
        output.write_config(directory, config)
        for index, (trace, report, _) in enumerate(results):
            suffix = "" if len(results) == 1 else f"-{index}"
            output.write_trace(directory, trace, f"trace{suffix}.csv")
            output.write_gaps(directory, report, f"gaps{suffix}.csv")
        summaries = [summary for _, _, summary in results]
        result = summaries[0] if len(summaries) == 1 else {"runs": summaries}
        output.write_json(directory / "summary.json", result)


@app.command(help="Run an experiment for every noise scale of study.b_grid and seed.")
def sweep(
    configuration_path: Path = argument_configuration,
    verbose: bool = option_verbose,
    output_directory: Optional[Path] = option_output_directory,
    threads: Optional[int] = option_threads,
) -> None:
    with print_summary_and_exit():
        config, root = _load(configuration_path, output_directory)
        _require_kind(config, StudyKind.SWEEP)
        problem, algos = prepare(config)

        rows = []
        b_grid = list(config.study.b_grid)
        for algo in algos:
            logger.task(f"Sweeping b over {b_grid} with seed {algo.seed}")
            traces = engine.run_noisy_sweep(problem, algo, b_grid, threads)
            for b, trace in zip(b_grid, traces):
                measures = metrics.convergence_measures(trace)
                summary = trace.summary()
                rows.append(
                    {
                        "b": b,
                        "seed": algo.seed,
                        "avg_grad_l1": measures.avg_grad_l1,
                        "avg_grad_l2sq": measures.avg_grad_l2sq,
                        "mixed": measures.mixed,
                        "final_mean_grad_l1": summary["final_mean_grad_l1"],
                        "final_mean_grad_l2sq": summary["final_mean_grad_l2sq"],
                    }
                )
        directory = output.create_run_directory(root, "sweep")
        output.write_config(directory, config)
        output.write_csv(directory / "sweep.csv", output.SWEEP_COLUMNS, rows)

        averaged = {
            b: float(np.mean([row["avg_grad_l2sq"] for row in rows if row["b"] == b]))
            for b in b_grid
        }
        ordered = [averaged[b] for b in sorted(b_grid)]
        decreasing = all(a > c for a, c in zip(ordered, ordered[1:]))
        output.write_json(
            directory / "summary.json",
            {
                "b_grid": b_grid,
                "seeds": [algo.seed for algo in algos],
                "avg_grad_l2sq": [{"b": b, "value": v} for b, v in averaged.items()],
                "strictly_decreasing_in_b": decreasing,
            },
        )
        logger.info(f"seed-averaged |grad f|_2^2 strictly decreasing in b: {decreasing}")


@app.command(help="Tabulate the law of the median over noise scales and families.")
def medianlab(
    configuration_path: Path = argument_configuration,
    verbose: bool = option_verbose,
    output_directory: Optional[Path] = option_output_directory,
    threads: Optional[int] = option_threads,
) -> None:
    with print_summary_and_exit():
        config, root = _load(configuration_path, output_directory)
        _require_kind(config, StudyKind.MEDIANLAB)
        prepare(config)
        study = config.study

        rows, fits = [], {}
        spread = max(study.u) - min(study.u)
        for family in study.families:
            logger.task(f"Median law of {len(study.u)} values under {family.value} noise")
            summaries = []
            for index, b in enumerate(study.b_grid):
                query = MedianLawQuery(study.u, NoiseSpec(family, b))
                summary = orderstats.summarize(
                    query,
                    mc_samples=study.mc_samples,
                    stream=CounterStream(
                        config.seeds.base, ("medianlab", family.value, index)
                    ),
                    threads=threads,
                    with_asymmetry=True,
                )
                summaries.append(summary)
                rows.append(
                    {
                        "family": family.value,
                        "n": query.n,
                        "u_spread": spread,
                        "b": b,
                        "gap": summary.gap,
                        "variance": summary.variance,
                        "asym_mass": summary.asym_mass,
                        "method": summary.method.value,
                        "error_estimate": summary.error_estimate,
                    }
                )
            fits[family.value] = _fit_slopes(study.b_grid, summaries)
        directory = output.create_run_directory(root, "medianlab")
        output.write_config(directory, config)
        output.write_csv(directory / "medianlab.csv", output.MEDIANLAB_COLUMNS, rows)
        summary = {"u": list(study.u), "slopes": fits}
        output.write_json(directory / "summary.json", summary)


def _fit_slopes(b_grid, summaries) -> dict:
    series = {
        "gap": [abs(s.gap) for s in summaries],
        "variance": [s.variance for s in summaries],
        "asym_mass": [s.asym_mass or 0.0 for s in summaries],
    }
    slopes = {}
    for name, values in series.items():
        try:
            fit = orderstats.rate_fit(b_grid, values)
        except ValueError as e:
            logger.warning(f"no {name} slope: {e}")
            slopes[name] = None
            continue
        slopes[name] = {"slope": fit.slope, "r_squared": fit.r_squared}
        logger.info(f"{name} slope {fit.slope:.4f} (R^2 {fit.r_squared:.4f})")
    return slopes


@app.command(name="verify", help="Run the acceptance suite.")
def verify_command(
    verbose: bool = option_verbose,
    as_json: bool = typer.Option(
        False, "--json", help="Print a machine-readable report."
    ),
    only: Optional[List[str]] = typer.Option(
        None, "--only", help=f"Run only these criteria: {', '.join(verify.CRITERIA)}."
    ),
) -> None:
    with print_summary_and_exit():
        unknown = [name for name in only or [] if name not in verify.CRITERIA]
        if unknown:
            raise ConfigError("--only", f"unknown criteria {', '.join(unknown)}")
        results = verify.run_criteria(only)
        if as_json:
            report = {
                "passed": all(result.passed for result in results),
                "criteria": [result.to_dict() for result in results],
            }
            typer.echo(json.dumps(report, indent=2))
        else:
            verify.print_table(results)
        failed = [result.name for result in results if not result.passed]
        if failed:
            raise VerificationFailed(f"failed criteria: {', '.join(failed)}")


def main() -> None:
    app()
