import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from qpballistic.cocycle import (
    AmbiguousLabel,
    RotationCurve,
    StepTooLarge,
    gap_size_correlation,
    holder_constant,
    rotation_curve,
    spectrum_bottom,
)
from qpballistic.config import ConfigError, RunConfig, config_hash, load_config
from qpballistic.enums import ExitCode, MeasureKind, ReductionStatus, StageStatus
from qpballistic.evolve import (
    ContainmentViolated,
    PacketTooWide,
    SpatialGrid,
    WindowTooSmall,
    check_upper_bound,
    evolve_and_record,
    fit_slope,
    init_packet,
    norms,
    sandwich_bounds,
)
from qpballistic.outputs import (
    OutputWriter,
    RunManifest,
    find_orphans,
    previous_manifest,
    utc_now,
)
from qpballistic.potential import QuasiPeriodicPotential, analytic_norm
from qpballistic.reduce import (
    ConjugationResult,
    HyperbolicInput,
    NoContraction,
    NotConverged,
    bloch_from_reduction,
    reduce_energies,
)
from qpballistic.transform import (
    EmptyFrame,
    GridTooCoarse,
    QuadratureUnderResolved,
    SpectralFrame,
    apply_transform,
    build_frame,
    decay_fit,
    derivative_transform,
    diagonalization_error,
    transform_norm,
)

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

NUMERICAL_ERRORS = (
    StepTooLarge,
    AmbiguousLabel,
    PacketTooWide,
    ContainmentViolated,
    WindowTooSmall,
    HyperbolicInput,
    NoContraction,
    NotConverged,
    EmptyFrame,
    GridTooCoarse,
    QuadratureUnderResolved,
    FloatingPointError,
)


class Run:
    """Per-command state shared by the stage functions."""

    def __init__(self, config: RunConfig, writer: OutputWriter, threads: int, seed: int, progress: bool):
        self.config = config
        self.writer = writer
        self.threads = threads
        self.seed = seed
        self.progress = progress
        self.V: QuasiPeriodicPotential = config.potential.to_potential()
        self.stages: Dict[str, StageStatus] = {}
        self.metrics: Dict[str, Optional[float]] = {}
        self.flags: List[str] = []

    def fail(self, stage: str, error: Exception) -> None:
        logger.error("Stage %s failed: %s", stage, error)
        self.stages[stage] = StageStatus.failed
        self.flags.append(f"{stage}: {type(error).__name__}: {error}")


def _rotation(run: Run) -> RotationCurve:
    spec = run.config.rotation
    kwargs = dict(
        T=spec.T,
        h=spec.h,
        threads=run.threads,
        chunk_size=spec.chunk_size,
        K_max=spec.K_max,
        flat_threshold=spec.flat_threshold,
        lyapunov_tol=spec.lyapunov_tol,
        label_tol=spec.label_tol,
        progress=run.progress,
    )
    curve = rotation_curve(run.V, run.config.energies.energies(), **kwargs)
    if run.config.energies.refinement and curve.gap_labels:
        edges = [e for g in curve.gap_labels for e in (g.e_min, g.e_max)]
        curve = rotation_curve(run.V, run.config.energies.energies(edges), **kwargs)
    run.stages["rotation"] = StageStatus.complete
    return curve


def _reductions(run: Run, curve: RotationCurve) -> List[ConjugationResult]:
    schedule = run.config.schedule.to_schedule(run.V)
    results = reduce_energies(curve.energies, run.V, schedule, run.threads)
    spectrum = curve.spectrum_mask()
    converged = np.array([r.status == ReductionStatus.converged for r in results])
    residuals = np.array([r.residual for r in results])
    fraction = float(converged[spectrum].mean()) if spectrum.any() else None
    run.metrics["converged_fraction"] = fraction
    run.metrics["max_residual"] = float(residuals[converged].max()) if converged.any() else None
    run.stages["reduce"] = StageStatus.complete
    return results


def _frame(run: Run, curve: RotationCurve, results: List[ConjugationResult]) -> SpectralFrame:
    spec = run.config.transform
    frame = build_frame(
        run.V,
        curve,
        results,
        spec.cutoff_rho_c,
        sigma=run.config.schedule.sigma,
        smoothing=spec.smoothing,
    )
    run.metrics["frame_energies"] = int(frame.energies.size)
    run.metrics["cutoff_rho_c"] = float(frame.cutoff_rho_c)
    run.stages["frame"] = StageStatus.complete
    return frame


def _write_frame(run: Run, frame: SpectralFrame) -> None:
    rows = []
    for E, rho, drho, w, bloch in zip(frame.energies, frame.rho, frame.drho, frame.weights, frame.bloch):
        rows.append(
            (E, rho, drho, w, bloch.beta0.mean().real, bloch.beta1.mean().real,
             "smoothed" if bloch.smoothing_applied else "retained")
        )
    run.writer.write_csv(
        "frame.csv", ["E", "rho", "drho", "w", "beta0_0", "beta1_0", "status"], rows
    )


def _join_k(k: List[int]) -> str:
    return ";".join(map(str, k))


def cmd_rotation(run: Run) -> None:
    curve = _rotation(run)
    rows = []
    for E, rho, drho, lyapunov, label in zip(
        curve.energies, curve.rho, curve.drho, curve.lyapunov, curve.classification
    ):
        gap = curve.label_for(E)
        rows.append((E, rho, drho, lyapunov, label, _join_k(gap.k) if gap else ""))
    run.writer.write_csv("rotation.csv", ["E", "rho", "drho", "lyapunov", "class", "gap_k"], rows)
    run.writer.write_csv(
        "gaps.csv",
        ["e_min", "e_max", "k", "level", "deviation"],
        [(g.e_min, g.e_max, _join_k(g.k), g.level, g.deviation) for g in curve.gap_labels],
    )
    run.writer.write_plot_data("rotation.dat", ["E", "rho"], [curve.energies, curve.rho])
    run.writer.write_svg("rotation.svg", curve.energies, {"rho": curve.rho}, "E", "rotation number")
    run.metrics.update(
        n_energies=int(curve.energies.size),
        n_spectrum=int(curve.spectrum_mask().sum()),
        n_gaps=len(curve.gap_labels),
        monotonicity_violations=curve.monotonicity_violations,
        holder_constant=holder_constant(curve, seed=run.seed),
        gap_size_correlation=gap_size_correlation(curve),
        spectrum_bottom=spectrum_bottom(curve),
    )


def _mode_table(series, limit: int = 8) -> List[dict]:
    order = np.argsort(-np.abs(series.coeffs))[:limit]
    return [
        {"m": series.modes[i].tolist(), "re": float(series.coeffs[i].real), "im": float(series.coeffs[i].imag)}
        for i in order
    ]


def cmd_reduce(run: Run) -> None:
    curve = _rotation(run)
    results = _reductions(run, curve)
    rows, reports = [], []
    for result, rho, label in zip(results, curve.rho, curve.classification):
        resonances = ";".join(f"{j}:{' '.join(map(str, k))}" for j, k in result.resonances)
        rows.append(
            (result.E, result.status, result.steps, result.residual, result.alpha, result.xi,
             rho, label, resonances)
        )
        report = {
            "E": result.E,
            "status": result.status.value,
            "steps": result.steps,
            "residual": result.residual,
            "alpha": result.alpha,
            "xi": result.xi,
            "resonances": [[j, k] for j, k in result.resonances],
        }
        if result.status == ReductionStatus.converged and not result.near_resonant and rho > 0:
            bloch = bloch_from_reduction(result, float(rho))
            report["beta0"] = _mode_table(bloch.beta0)
            report["beta1"] = _mode_table(bloch.beta1)
        reports.append(report)
    run.writer.write_csv(
        "reduce.csv",
        ["E", "status", "steps", "residual", "alpha", "xi", "rho", "classification", "resonances"],
        rows,
    )
    run.writer.write_json("reductions.json", reports)
    if run.metrics.get("converged_fraction") is not None and run.metrics["converged_fraction"] < 0.95:
        run.stages["reduce"] = StageStatus.flagged
        run.flags.append("reduce: fewer than 95% of spectrum energies converged")


def cmd_transport(run: Run) -> None:
    config = run.config
    grid = SpatialGrid(half_length=config.grid.half_length, n_points=config.grid.n_points)
    q0 = init_packet(grid, config.packet.x0, config.packet.width, config.packet.momentum)
    t_diag = config.transform.diagonalization_time
    snapshot_times = [t_diag] if 0 < t_diag <= config.grid.T else []
    series = evolve_and_record(
        q0, run.V, config.grid.T, config.grid.dt, config.grid.sample_stride,
        snapshot_times=snapshot_times, progress=run.progress,
    )
    run.stages["evolve"] = StageStatus.complete
    if series.containment_violated:
        run.stages["evolve"] = StageStatus.flagged
        run.flags.append("evolve: containment violated, series truncated")
    run.metrics["l2_drift"] = series.l2_drift
    run.writer.write_csv(
        "norms.csv",
        ["t", "l2", "h1", "diffusion", "boundary_mass"],
        zip(series.times, series.l2, series.h1, series.diffusion, series.boundary_mass),
    )

    q0_norms = norms(q0)
    run.metrics["fitted_c"] = check_upper_bound(series, q0_norms)
    slope = None
    try:
        slope, r2 = fit_slope(series)
        run.metrics.update(slope=slope, r_squared=r2)
        run.stages["slope"] = StageStatus.complete
        start = series.times.size // 2
        fitted = series.diffusion[start] + slope * (series.times - series.times[start])
        run.writer.write_plot_data(
            "diffusion.dat", ["t", "diffusion", "fit"], [series.times, series.diffusion, fitted]
        )
        run.writer.write_svg(
            "diffusion.svg", series.times, {"diffusion": series.diffusion, "fit": fitted},
            "t", "diffusion norm",
        )
    except WindowTooSmall as e:
        run.metrics["slope"] = None
        run.fail("slope", e)

    curve = _rotation(run)
    results = _reductions(run, curve)
    frame = _frame(run, curve, results)
    _write_frame(run, frame)

    G0 = apply_transform(q0, frame, run.threads)
    run.writer.write_csv(
        "transform.csv",
        ["E", "re_g1", "im_g1", "re_g2", "im_g2"],
        zip(frame.energies, G0.g1.real, G0.g1.imag, G0.g2.real, G0.g2.imag),
    )
    C = transform_norm(G0, frame, MeasureKind.dphi)
    l2 = q0_norms.l2
    dG = derivative_transform(q0, frame, config.transform.max_spacing)
    run.metrics.update(
        C=C,
        ratio=slope / C if slope is not None and C > 0 else None,
        isometry=transform_norm(G0, frame, MeasureKind.dphi_hat) / l2,
        isometry_tilde=transform_norm(G0, frame, MeasureKind.dphi_tilde) / l2,
        diffusion_transform=transform_norm(dG, frame, MeasureKind.dphi),
        diffusion_norm=q0_norms.diffusion,
    )
    if series.snapshots:
        Gt = apply_transform(series.snapshots[-1], frame, run.threads)
        run.metrics["diagonalization_error"] = diagonalization_error(G0, Gt, series.snapshots[-1].time)
    lower, upper = sandwich_bounds(C, analytic_norm(run.V), config.schedule.sigma)
    run.metrics.update(sandwich_lower=lower, sandwich_upper=upper)
    run.stages["transform"] = StageStatus.complete


def cmd_integrals(run: Run) -> None:
    spec = run.config.integrals
    curve = _rotation(run)
    results = _reductions(run, curve)
    frame = _frame(run, curve, results)
    _write_frame(run, frame)
    rows, exponents = [], []
    for f_kind in spec.f_kinds:
        for k in spec.powers:
            exponent, values = decay_fit(
                frame, f_kind, k, spec.Ms,
                x_offset=spec.x_offset, y_offset=spec.y_offset, edge_taper=spec.edge_taper,
            )
            rows.extend((f_kind, k, M, v) for M, v in zip(spec.Ms, values))
            exponents.append((f_kind, k, exponent))
            run.metrics[f"exponent_{f_kind.value}_{k}"] = exponent
    run.writer.write_csv("integrals.csv", ["f_kind", "k", "M", "value"], rows)
    run.writer.write_csv("exponents.csv", ["f_kind", "k", "exponent"], exponents)
    run.metrics["min_exponent"] = float(min(e for _, _, e in exponents))
    run.stages["integrals"] = StageStatus.complete


COMMANDS: Dict[str, Callable[[Run], None]] = {
    "rotation": cmd_rotation,
    "reduce": cmd_reduce,
    "transport": cmd_transport,
    "integrals": cmd_integrals,
}


def cmd_report(out: Path) -> int:
    if not out.is_dir():
        logger.error("No output directory at %s", out)
        return ExitCode.io
    rows = []
    for directory in sorted(p for p in out.iterdir() if p.is_dir() and p.name != "report"):
        manifest = previous_manifest(directory)
        if manifest is None:
            continue
        stages = " ".join(f"{k}={v.value}" for k, v in sorted(manifest.stages.items()))
        for name, value in sorted(manifest.metrics.items()):
            rows.append((manifest.command, manifest.config_hash[:12], stages, name, value))
    orphans = find_orphans(out)
    writer = OutputWriter(out, "report")
    writer.clear_previous()
    writer.write_csv("summary.csv", ["command", "config_hash", "stages", "metric", "value"], rows)
    writer.write_csv("orphans.csv", ["path"], [(p,) for p in orphans])
    if orphans:
        logger.warning("%d output files are not referenced by any manifest", len(orphans))
    writer.write_manifest(
        RunManifest(
            command="report",
            config_hash="",
            started=utc_now(),
            stages={"report": StageStatus.flagged if orphans else StageStatus.complete},
            metrics={"n_rows": len(rows), "n_orphans": len(orphans)},
        )
    )
    return ExitCode.ok


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qpballistic", description="Ballistic transport experiments for quasi-periodic Schrödinger operators."
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["report"]:
        sub = subparsers.add_parser(name)
        sub.add_argument("--out", type=Path, help="output root (defaults to the config's output_dir)")
        if name == "report":
            continue
        sub.add_argument("--config", type=Path, required=True)
        sub.add_argument("--force", action="store_true", help="rerun even if the config is unchanged")
        sub.add_argument("--threads", type=int, default=1)
        sub.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _exit_code(stages: Dict[str, StageStatus]) -> ExitCode:
    """Failed stages and flagged ones (divergence, containment) are numerical failures."""
    if any(s in (StageStatus.failed, StageStatus.flagged) for s in stages.values()):
        return ExitCode.numerical
    return ExitCode.ok


def _execute(args) -> Tuple[int, Optional[RunManifest]]:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    if not 0 <= seed < 2**64:
        raise ConfigError([f"--seed must be an unsigned 64-bit integer, got {seed}"])
    digest = config_hash(config, seed)
    root = args.out if args.out is not None else Path(config.output_dir)
    previous = previous_manifest(root / args.command)
    if previous is not None and previous.config_hash == digest and not args.force:
        logger.info("Config %s already ran in %s; use --force to rerun", digest[:12], root / args.command)
        return _exit_code(previous.stages), previous

    writer = OutputWriter(root, args.command)
    writer.clear_previous()
    progress = not args.quiet and sys.stderr.isatty()
    run = Run(config, writer, max(1, args.threads), seed, progress)
    started = utc_now()
    code = ExitCode.ok
    try:
        COMMANDS[args.command](run)
    except NUMERICAL_ERRORS as e:
        run.fail(args.command, e)
        code = ExitCode.numerical
    code = max(code, _exit_code(run.stages))
    manifest = RunManifest(
        command=args.command,
        config_hash=digest,
        started=started,
        stages=run.stages,
        metrics=run.metrics,
        flags=run.flags,
    )
    writer.write_manifest(manifest)
    return code, manifest


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    if args.command == "report":
        return int(cmd_report(args.out or Path("out")))
    try:
        code, _ = _execute(args)
    except ConfigError as e:
        for message in e.messages:
            logger.error(message)
        return int(ExitCode.validation)
    except ValidationError as e:
        logger.error("Invalid parameters: %s", e)
        return int(ExitCode.validation)
    except OSError as e:
        logger.error("I/O failure: %s", e)
        return int(ExitCode.io)
    return int(code)
