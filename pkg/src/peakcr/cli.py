"""CLI for peakcr.

Results go to stdout (JSON) or to files; diagnostics go to stderr.
Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numerical failure.
"""

import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any

import click
import numpy as np
import typer
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.table import Table

from peakcr.config import (
    Ball,
    McConfig,
    NoiseSpec,
    SearchSpec,
    SpectrumExperimentConfig,
    WelchSpec,
    describe_validation_error,
    load_config,
    load_spectrum_config,
)
from peakcr.exceptions import ConfigError, DataError, PeakcrError, UnsupportedOperationError
from peakcr.grid_field import GaussianKernel, LatticeSample, SmoothField
from peakcr.logging_config import get_logger, setup_logging
from peakcr.models import (
    CovarianceMode,
    CoverageReport,
    DerivedFieldKind,
    PeakEstimate,
    PeakKind,
    RegionMethod,
    RegionTarget,
)
from peakcr.noisegen import generate_lattice_samples, preset_signal, true_peaks
from peakcr.peaks import argmax_in_ball, default_balls, find_critical_points, seeding_grid
from peakcr.regions import UNSUPPORTED_MC_COHENS_D, bonferroni_joint, rasterize, region_for_peak
from peakcr.sample_fields import FieldCohort
from peakcr.simharness import plot_series, run_coverage, run_identifiability, run_spectrum_coverage
from peakcr.storage import (
    dump_json,
    load_samples,
    read_series_csv,
    write_container,
    write_json,
    write_mask_csv,
    write_records_csv,
)
from peakcr.streams import fresh_seed
from peakcr.welch import spectrum_cohort, spectrum_peak_regions

# Logger will be configured when commands run
logger = get_logger("cli")

app = typer.Typer(
    name="peakcr",
    help="Peak location confidence regions for mean and Cohen's d random fields",
    no_args_is_help=True,
)
config_app = typer.Typer(help="Configuration commands")
app.add_typer(config_app, name="config")

console = Console(stderr=True)

ConfigOption = Annotated[
    Path | None, typer.Option("--config", "-c", help="Experiment config (JSON or YAML)")
]
SeedOption = Annotated[
    int | None, typer.Option("--seed", help="Master seed (default: drawn from entropy)", min=0)
]
ThreadsOption = Annotated[
    int | None,
    typer.Option("--threads", help="Worker threads", envvar="PEAKCR_THREADS", min=1),
]
AlphaOption = Annotated[float | None, typer.Option("--alpha", help="Nominal level", min=0, max=1)]
TargetOption = Annotated[
    RegionTarget | None, typer.Option("--target", help="Field whose peaks are located")
]
OutOption = Annotated[Path | None, typer.Option("--out", "-o", help="Output path")]
VerboseOption = Annotated[
    bool, typer.Option("--verbose", "-v", help="Enable debug logging to stderr")
]
BallOption = Annotated[
    list[str] | None,
    typer.Option("--ball", help="Search ball 'center:radius', center comma-separated"),
]


@contextmanager
def reporting_errors() -> Iterator[None]:
    """Print library errors to stderr and exit with their code."""
    try:
        yield
    except ValidationError as e:
        console.print("[red]Invalid configuration:[/red]")
        console.print(describe_validation_error(e), markup=False)
        raise typer.Exit(1) from None
    except FileNotFoundError as e:
        console.print(f"Error: {e}", style="red", markup=False)
        raise typer.Exit(1) from None
    except PeakcrError as e:
        logger.error(f"{type(e).__name__}: {e}")
        console.print(f"Error: {e}", style="red", markup=False)
        raise typer.Exit(e.exit_code) from None


def resolve_seed(seed: int | None, configured: int | None = None) -> int:
    """The --seed value, a seed set in the config file, or a fresh one (printed)."""
    if seed is not None:
        return seed
    if configured is not None:
        return configured
    chosen = fresh_seed()
    console.print(f"seed: {chosen}")
    return chosen


def _override(model: BaseModel, **updates: Any) -> Any:
    """Revalidated copy of a config with non-None flag values applied."""
    data = model.model_dump()
    for key, value in updates.items():
        if value is None:
            continue
        if "__" in key:
            outer, inner = key.split("__", 1)
            data[outer][inner] = value
        else:
            data[key] = value
    return type(model).model_validate(data)


def parse_ball(text: str) -> Ball:
    """'16,16:4' -> Ball(center=[16, 16], radius=4)."""
    try:
        center, radius = text.split(":")
        return Ball(center=[float(v) for v in center.split(",")], radius=float(radius))
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"cannot parse ball {text!r}; expected 'center:radius'") from e


def _emit(payload: Any, out: Path | None) -> None:
    if out is None:
        typer.echo(dump_json(payload), nl=False)
    else:
        write_json(payload, out)
        console.print(f"[green]Wrote {out}[/green]")


def _check_combination(method: RegionMethod, target: RegionTarget) -> None:
    if method == RegionMethod.MONTE_CARLO and target == RegionTarget.COHENS_D:
        raise UnsupportedOperationError(UNSUPPORTED_MC_COHENS_D)


def _field_kind(target: RegionTarget) -> DerivedFieldKind:
    return DerivedFieldKind.MEAN if target == RegionTarget.MEAN else DerivedFieldKind.COHENS_D


def _load_cohort(path: Path, dim: int, fwhm: float, standardize: bool) -> list[SmoothField]:
    if not path.exists():
        raise DataError(f"Cohort file not found: {path}")
    samples: list[LatticeSample] = load_samples(path, dim)
    kernel = GaussianKernel(fwhm)
    return [SmoothField(sample, kernel, standardize=standardize) for sample in samples]


@config_app.command("validate")
def config_validate(
    config_path: Annotated[Path, typer.Argument(help="Path to config file")],
    spectrum: Annotated[
        bool, typer.Option("--spectrum", help="Validate a spectrum experiment config")
    ] = False,
) -> None:
    """Validate a configuration file."""
    with reporting_errors():
        if spectrum:
            scfg = load_spectrum_config(config_path)
            console.print("[green]Config is valid![/green]")
            console.print(f"  Frequencies: {scfg.frequencies}")
            console.print(f"  Subjects: {scfg.n_subjects}, replicates: {scfg.nsim}")
            return
        cfg = load_config(config_path)
        console.print("[green]Config is valid![/green]")
        console.print(f"  Signal: {cfg.signal.shape.kind} on {cfg.signal.domain.dim}D domain")
        console.print(f"  Sample sizes: {cfg.n_list}, replicates: {cfg.nsim}")
        console.print(f"  Methods: {', '.join(m.value for m in cfg.methods)}")


@app.command("simulate")
def simulate(
    out: Annotated[Path, typer.Option("--out", "-o", help="PKCR container to write")],
    config: ConfigOption = None,
    preset: Annotated[
        str | None, typer.Option("--preset", help="Signal preset: narrow or wide")
    ] = None,
    dim: Annotated[int, typer.Option("--dim", help="Preset dimension (1 or 2)")] = 1,
    n: Annotated[int | None, typer.Option("--n", help="Number of subjects", min=2)] = None,
    fwhm: Annotated[float | None, typer.Option("--fwhm", help="Kernel FWHM (voxels)")] = None,
    seed: SeedOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Generate a synthetic cohort and write its lattice observations."""
    setup_logging(verbose=verbose)
    with reporting_errors():
        if config is not None:
            cfg = load_config(config)
            signal, noise = cfg.signal, cfg.noise
            count = n or cfg.n_list[0]
            configured = cfg.noise.seed if "seed" in cfg.noise.model_fields_set else None
        else:
            signal, noise = preset_signal(preset or "narrow", dim), NoiseSpec()
            count, configured = n or 20, None
        noise = _override(noise, fwhm=fwhm, seed=resolve_seed(seed, configured))

        samples = generate_lattice_samples(signal, noise, count)
        write_container(out, samples)
        lattice = samples[0].lattice
        logger.info(f"Wrote {count} subjects to {out}")
        _emit(
            {
                "out": str(out),
                "subjects": count,
                "seed": noise.seed,
                "fwhm": noise.fwhm,
                "lattice": {
                    "shape": list(lattice.shape),
                    "spacing": list(lattice.spacing),
                    "origin": list(lattice.origin),
                },
                "domain": signal.domain.model_dump(),
                "true_peaks": true_peaks(signal, noise, RegionTarget.MEAN).tolist(),
            },
            None,
        )


@app.command("peaks")
def peaks(
    cohort: Annotated[Path, typer.Option("--cohort", help="PKCR container or lattice CSV")],
    dim: Annotated[int, typer.Option("--dim", help="Lattice dimension for CSV input")] = 1,
    fwhm: Annotated[float, typer.Option("--fwhm", help="Kernel FWHM (voxels)")] = 6.0,
    target: TargetOption = None,
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """List the critical points of the mean or Cohen's d field of a cohort.

    Peak search draws nothing at random; the resolved seed is only logged.
    """
    setup_logging(verbose=verbose)
    with reporting_errors():
        logger.info(f"peaks seed: {resolve_seed(seed)}")
        search = load_config(config).search if config else SearchSpec()
        target = target or RegionTarget.MEAN
        fields = _load_cohort(cohort, dim, fwhm, standardize=True)
        if len(fields) == 1:
            if target != RegionTarget.MEAN:
                raise ConfigError("Cohen's d needs a cohort of at least 2 subjects")
            field = fields[0]
        else:
            field = FieldCohort(tuple(fields)).field(_field_kind(target))
        found = find_critical_points(field, search)
        _print_peaks(found)
        _emit([peak.to_record() for peak in found], out)


@app.command("regions")
def regions(
    cohort: Annotated[Path, typer.Option("--cohort", help="PKCR container of subject samples")],
    dim: Annotated[int, typer.Option("--dim", help="Lattice dimension for CSV input")] = 1,
    fwhm: Annotated[float, typer.Option("--fwhm", help="Kernel FWHM (voxels)")] = 6.0,
    target: TargetOption = None,
    method: Annotated[
        RegionMethod | None, typer.Option("--method", help="asym or mc")
    ] = None,
    alpha: AlphaOption = None,
    ball: BallOption = None,
    covariance: Annotated[
        CovarianceMode, typer.Option("--covariance", help="pooled or pointwise moments")
    ] = CovarianceMode.STATIONARY_POOLED,
    draws: Annotated[int | None, typer.Option("--draws", help="Monte Carlo draws")] = None,
    seed: SeedOption = None,
    masks: Annotated[
        Path | None, typer.Option("--masks", help="Directory for rasterized region masks")
    ] = None,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Marginal and Bonferroni joint confidence regions for peak locations.

    Without --ball, balls are placed around the two highest maxima of the target
    field.
    """
    setup_logging(verbose=verbose)
    with reporting_errors():
        target = target or RegionTarget.MEAN
        method = method or RegionMethod.ASYMPTOTIC
        alpha = 0.05 if alpha is None else alpha
        _check_combination(method, target)

        fields = _load_cohort(cohort, dim, fwhm, standardize=True)
        if len(fields) < 2:
            raise DataError("confidence regions need a cohort of at least 2 subjects")
        group = FieldCohort(tuple(fields))
        field = group.field(_field_kind(target))

        balls = [parse_ball(text) for text in ball or []]
        search = SearchSpec.model_validate({"balls": [b.model_dump() for b in balls] or None})
        if not balls:
            maxima = [p for p in find_critical_points(field, search) if p.kind == PeakKind.MAX]
            if not maxima:
                raise DataError("the target field has no local maximum")
            top = sorted(maxima, key=lambda p: -p.value)[:2]
            balls = default_balls(np.array([p.location for p in top]), field.domain)

        mc = McConfig() if draws is None else McConfig(draws=draws)
        if method == RegionMethod.MONTE_CARLO:
            mc = mc.model_copy(update={"seed": resolve_seed(seed)})

        found = [argmax_in_ball(field, b, search, j) for j, b in enumerate(balls)]
        marginal = [
            region_for_peak(
                group,
                peak,
                method,
                target,
                alpha,
                covariance_mode=covariance,
                mc=mc,
                refinement=search.grid_refinement,
                stream_key=(j,),
            )
            for j, peak in enumerate(found)
        ]
        joint = bonferroni_joint(marginal, alpha)

        if masks is not None:
            masks.mkdir(parents=True, exist_ok=True)
            axes = seeding_grid(field.domain, field.resolution, 1)
            for j, region in enumerate(joint):
                write_mask_csv(rasterize(region, axes), masks / f"region_{j}.csv")

        _emit(
            {
                "target": target.value,
                "method": method.value,
                "alpha": alpha,
                "balls": [b.model_dump() for b in balls],
                "peaks": [peak.to_record() for peak in found],
                "regions": [r.model_dump(mode="json") for r in marginal],
                "joint": [r.model_dump(mode="json") for r in joint],
            },
            out,
        )


@app.command("cover")
def cover(
    config: Annotated[Path, typer.Option("--config", "-c", help="Experiment config")],
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    nsim: Annotated[int | None, typer.Option("--nsim", help="Replicates", min=1)] = None,
    n: Annotated[list[int] | None, typer.Option("--n", help="Sample size (repeatable)")] = None,
    alpha: AlphaOption = None,
    method: Annotated[
        list[RegionMethod] | None, typer.Option("--method", help="asym or mc (repeatable)")
    ] = None,
    target: TargetOption = None,
    fwhm: Annotated[float | None, typer.Option("--fwhm", help="Kernel FWHM (voxels)")] = None,
    identifiability: Annotated[
        bool, typer.Option("--identifiability", help="Also run the identifiability check")
    ] = False,
    out: Annotated[
        Path | None, typer.Option("--out", "-o", help="Directory for coverage.csv/json")
    ] = None,
    plot_data: Annotated[
        Path | None, typer.Option("--plot-data", help="Write coverage-vs-N series as JSON")
    ] = None,
    verbose: VerboseOption = False,
) -> None:
    """Run a coverage experiment."""
    setup_logging(verbose=verbose)
    with reporting_errors():
        cfg = load_config(config)
        configured = cfg.master_seed if "master_seed" in cfg.model_fields_set else None
        cfg = _override(
            cfg,
            master_seed=resolve_seed(seed, configured),
            threads=threads,
            nsim=nsim,
            n_list=n or None,
            alpha=alpha,
            methods=method or None,
            target=target,
            noise__fwhm=fwhm,
        )
        report = run_coverage(cfg)
        _print_coverage(report)
        payload: dict[str, Any] = {"coverage": report.model_dump(mode="json")}
        if identifiability:
            payload["identifiability"] = run_identifiability(cfg).model_dump(mode="json")

        if out is None:
            _emit(payload, None)
        else:
            records = [row.model_dump(mode="json") for row in report.rows]
            write_records_csv(records, out / "coverage.csv")
            write_json(payload, out / "coverage.json")
            console.print(f"[green]Wrote coverage.csv and coverage.json to {out}[/green]")
        if plot_data is not None:
            write_json(plot_series(report), plot_data)


@app.command("spectrum")
def spectrum(
    series: Annotated[
        Path | None, typer.Option("--series", help="CSV time series, one column per subject")
    ] = None,
    config: ConfigOption = None,
    ball: BallOption = None,
    alpha: AlphaOption = None,
    target: TargetOption = None,
    method: Annotated[
        RegionMethod | None, typer.Option("--method", help="asym or mc")
    ] = None,
    segment_length: Annotated[
        int | None, typer.Option("--segment-length", help="Welch segment length a")
    ] = None,
    sample_rate: Annotated[
        float | None, typer.Option("--sample-rate", help="Sampling rate (Hz)")
    ] = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    nsim: Annotated[int | None, typer.Option("--nsim", help="Replicates", min=1)] = None,
    n: Annotated[int | None, typer.Option("--n", help="Subjects per replicate", min=2)] = None,
    export: Annotated[
        Path | None, typer.Option("--export", help="Write subject spectra to a PKCR container")
    ] = None,
    out: OutOption = None,
    plot_data: Annotated[
        Path | None, typer.Option("--plot-data", help="Write coverage series as JSON")
    ] = None,
    verbose: VerboseOption = False,
) -> None:
    """Spectrum peak regions for recorded series, or a synthetic coverage run.

    With --series, Welch spectra of the subjects' series are analysed around the
    given --ball frequencies. Without it, the coverage experiment described by
    --config (or the default two-sine setting) is run.
    """
    setup_logging(verbose=verbose)
    with reporting_errors():
        cfg = load_spectrum_config(config) if config else SpectrumExperimentConfig()
        configured = cfg.master_seed if "master_seed" in cfg.model_fields_set else None
        welch = cfg.welch.model_dump()
        if segment_length is not None:
            welch["segment_length"] = segment_length
        if sample_rate is not None:
            welch["sample_rate"] = sample_rate
        cfg = _override(
            cfg,
            welch=WelchSpec.model_validate(welch).model_dump(),
            alpha=alpha,
            target=target,
            method=method,
            threads=threads,
            nsim=nsim,
            n_subjects=n,
        )
        _check_combination(cfg.method, cfg.target)

        if series is None:
            cfg = _override(cfg, master_seed=resolve_seed(seed, configured))
            report = run_spectrum_coverage(cfg)
            _print_coverage(report)
            _emit(report.model_dump(mode="json"), out)
            if plot_data is not None:
                write_json(plot_series(report), plot_data)
            return

        if not series.exists():
            raise DataError(f"Series file not found: {series}")
        balls = [parse_ball(text) for text in ball or []]
        if not balls:
            raise ConfigError("spectrum analysis needs at least one --ball")
        group = spectrum_cohort(read_series_csv(series), cfg.welch)
        if export is not None:
            write_container(export, [subject.lattice_sample() for subject in group.subjects])

        mc = cfg.mc
        if cfg.method == RegionMethod.MONTE_CARLO:
            mc = mc.model_copy(update={"seed": resolve_seed(seed, configured)})
        result = spectrum_peak_regions(
            group, balls, cfg.alpha, cfg.target, cfg.method, mc=mc, search=cfg.search
        )
        _emit(
            {
                "target": cfg.target.value,
                "method": cfg.method.value,
                "alpha": cfg.alpha,
                "frequency_step": cfg.welch.frequency_step,
                "peaks": [peak.to_record() for peak in result.peaks],
                "regions": [r.model_dump(mode="json") for r in result.marginal],
                "joint": [r.model_dump(mode="json") for r in result.joint],
            },
            out,
        )


def _print_peaks(found: list[PeakEstimate]) -> None:
    table = Table(title="Critical points")
    table.add_column("Location")
    table.add_column("Value")
    table.add_column("Kind")
    for peak in found:
        location = ", ".join(f"{v:.4f}" for v in peak.location)
        table.add_row(location, f"{peak.value:.4g}", peak.kind.value)
    console.print(table)


def _print_coverage(report: CoverageReport) -> None:
    """Print the per-setting coverage table."""
    table = Table(title=f"Coverage (nominal {1 - report.alpha:.0%})")
    table.add_column("N")
    table.add_column("Method")
    table.add_column("Average")
    table.add_column("Joint")
    table.add_column("Failures")
    for summary in report.summaries:
        table.add_row(
            str(summary.n),
            summary.method.value,
            f"{summary.average_empirical_coverage:.3f}",
            f"{summary.empirical_joint_coverage:.3f}",
            str(summary.failures),
        )
    console.print(table)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and return its exit code; usage errors exit with 1."""
    try:
        result = app(args=argv, prog_name="peakcr", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        console.print("[yellow]Aborted[/yellow]")
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code
    except PeakcrError as e:
        console.print(f"Error: {e}", style="red", markup=False)
        return e.exit_code
    return result if isinstance(result, int) else 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
