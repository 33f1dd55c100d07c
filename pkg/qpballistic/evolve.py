import logging
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator
from scipy import fft
from scipy.stats import linregress
from tqdm import tqdm

from qpballistic.components import Component, ComplexArray, RealArray
from qpballistic.potential import QuasiPeriodicPotential, eval_potential
from qpballistic.validators import validate_finite, validate_power_of_two, validator

__all__ = [
    "PacketTooWide",
    "ContainmentViolated",
    "WindowTooSmall",
    "SpatialGrid",
    "WaveState",
    "NormSeries",
    "Norms",
    "StrangPropagator",
    "init_packet",
    "step_strang",
    "norms",
    "derivative_norm",
    "boundary_mass",
    "evolve_and_record",
    "fit_slope",
    "check_upper_bound",
    "sandwich_bounds",
]

logger = logging.getLogger(__name__)

TAIL_TOLERANCE = 1e-12
CONTAINMENT_THRESHOLD = 1e-6
BOUNDARY_FRACTION = 0.1
MIN_WINDOW = 10


class PacketTooWide(Exception):
    pass


class WindowTooSmall(Exception):
    pass


class SpatialGrid(Component):
    half_length: float = Field(..., gt=0)
    n_points: int

    def __init__(self, *, half_length: float, n_points: int):
        super().__init__(half_length=half_length, n_points=n_points)

    _validate_n_points = validator("n_points", validate_power_of_two, minimum=16)

    @property
    def dx(self) -> float:
        return 2 * self.half_length / self.n_points

    @property
    def x(self) -> np.ndarray:
        return -self.half_length + self.dx * np.arange(self.n_points)

    @property
    def xi(self) -> np.ndarray:
        return 2 * np.pi * fft.fftfreq(self.n_points, d=self.dx)


class WaveState(Component):
    grid: SpatialGrid
    values: ComplexArray
    time: float = 0.0

    _validate_values_finite = validator("values", validate_finite)

    @model_validator(mode="after")
    def _validate_values(self) -> "WaveState":
        if self.values.shape != (self.grid.n_points,):
            raise ValueError("values must have one entry per grid point")
        return self

    def with_values(self, values: np.ndarray, time: float) -> "WaveState":
        return WaveState(grid=self.grid, values=values, time=time)


class ContainmentViolated(Exception):
    def __init__(self, series: "NormSeries"):
        self.series = series
        super().__init__(
            f"Boundary mass exceeded {CONTAINMENT_THRESHOLD:g} at t={series.times[-1]:g}"
        )


class NormSeries(Component):
    times: RealArray
    l2: RealArray
    h1: RealArray
    diffusion: RealArray
    boundary_mass: RealArray
    containment_violated: bool = False
    snapshots: List[WaveState] = []

    @model_validator(mode="after")
    def _validate_values(self) -> "NormSeries":
        n = self.times.shape
        for name in ("l2", "h1", "diffusion", "boundary_mass"):
            if getattr(self, name).shape != n:
                raise ValueError(f"{name} must have one value per sample")
        return self

    @property
    def l2_drift(self) -> float:
        return float(np.max(np.abs(self.l2 - self.l2[0]))) if self.l2.size else 0.0

    def raise_for_containment(self) -> None:
        if self.containment_violated:
            raise ContainmentViolated(self)


class Norms(NamedTuple):
    l2: float
    h1: float
    diffusion: float


class StrangPropagator:
    """Second-order split-step propagator with cached phase factors."""

    def __init__(self, grid: SpatialGrid, V: QuasiPeriodicPotential, dt: float):
        self.grid = grid
        self.dt = dt
        potential = eval_potential(V, grid.x)
        self.half_potential = np.exp(-0.5j * potential * dt)
        self.kinetic = np.exp(-1j * grid.xi**2 * dt)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = self.half_potential * values
        values = fft.ifft(self.kinetic * fft.fft(values))
        return self.half_potential * values


def boundary_mass(state: WaveState) -> float:
    grid = state.grid
    outer = np.abs(grid.x) > (1 - BOUNDARY_FRACTION) * grid.half_length
    return float(grid.dx * np.sum(np.abs(state.values[outer]) ** 2))


def init_packet(grid: SpatialGrid, x0: float, width: float, momentum: float) -> WaveState:
    if width <= 0:
        raise ValueError("width must be positive")
    x = grid.x
    values = np.exp(-((x - x0) ** 2) / (2 * width**2) + 1j * momentum * x)
    values /= np.sqrt(grid.dx * np.sum(np.abs(values) ** 2))
    state = WaveState(grid=grid, values=values, time=0.0)
    tail = boundary_mass(state)
    if tail > TAIL_TOLERANCE:
        raise PacketTooWide(f"Tail mass {tail:.3e} at the boundary exceeds {TAIL_TOLERANCE:g}")
    return state


def step_strang(state: WaveState, V: QuasiPeriodicPotential, dt: float) -> WaveState:
    propagator = StrangPropagator(state.grid, V, dt)
    return state.with_values(propagator(state.values), state.time + dt)


def derivative_norm(state: WaveState) -> float:
    grid = state.grid
    derivative = fft.ifft(1j * grid.xi * fft.fft(state.values))
    return float(np.sqrt(grid.dx * np.sum(np.abs(derivative) ** 2)))


def norms(state: WaveState) -> Norms:
    grid = state.grid
    density = np.abs(state.values) ** 2
    l2 = np.sqrt(grid.dx * np.sum(density))
    h1 = np.sqrt(l2**2 + derivative_norm(state) ** 2)
    diffusion = np.sqrt(grid.dx * np.sum(grid.x**2 * density))
    return Norms(float(l2), float(h1), float(diffusion))


def _max_speed(state: WaveState) -> float:
    power = np.abs(fft.fft(state.values)) ** 2
    support = power > 1e-10 * power.max()
    return float(2 * np.abs(state.grid.xi[support]).max())


def evolve_and_record(
    q0: WaveState,
    V: QuasiPeriodicPotential,
    T: float,
    dt: float,
    sample_stride: int = 20,
    snapshot_times: Sequence[float] = (),
    progress: bool = False,
) -> NormSeries:
    """Evolve q0 up to time T, sampling norms every sample_stride steps.

    The run stops early, flagged, once the mass in the outer tenth of the
    domain exceeds the containment threshold.
    """
    if T < 0 or dt <= 0 or sample_stride < 1:
        raise ValueError("Need T >= 0, dt > 0 and sample_stride >= 1")
    grid = q0.grid
    n_steps = int(round(T / dt))
    extent = np.abs(grid.x[np.abs(q0.values) ** 2 > 1e-10 * np.max(np.abs(q0.values) ** 2)]).max()
    if extent + T * _max_speed(q0) > grid.half_length:
        logger.warning(
            "Packet may reach the boundary before T=%g (extent %.1f, L=%.1f)", T, extent, grid.half_length
        )

    propagator = StrangPropagator(grid, V, dt)
    snapshot_steps = {int(round(t / dt)): t for t in snapshot_times}
    samples: List[Tuple[float, Norms, float]] = []
    snapshots: List[WaveState] = []
    state = q0
    violated = False

    def record(current: WaveState):
        samples.append((current.time, norms(current), boundary_mass(current)))

    record(state)
    if 0 in snapshot_steps:
        snapshots.append(state)
    for step in tqdm(range(1, n_steps + 1), disable=not progress, desc="evolve", leave=False):
        state = state.with_values(propagator(state.values), q0.time + step * dt)
        if step in snapshot_steps:
            snapshots.append(state)
        if step % sample_stride == 0 or step == n_steps:
            record(state)
            if samples[-1][2] > CONTAINMENT_THRESHOLD:
                violated = True
                logger.warning("Containment violated at t=%g; run truncated", state.time)
                break

    times, values, masses = zip(*samples)
    return NormSeries(
        times=times,
        l2=[v.l2 for v in values],
        h1=[v.h1 for v in values],
        diffusion=[v.diffusion for v in values],
        boundary_mass=masses,
        containment_violated=violated,
        snapshots=snapshots,
    )


def fit_slope(series: NormSeries, late_fraction: float = 0.5) -> Tuple[float, float]:
    n = series.times.size
    start = int(np.floor(n * (1 - late_fraction)))
    if n - start < MIN_WINDOW:
        raise WindowTooSmall(f"Only {n - start} samples in the late window, need {MIN_WINDOW}")
    fit = linregress(series.times[start:], series.diffusion[start:])
    return max(float(fit.slope), 0.0), float(fit.rvalue**2)


def check_upper_bound(series: NormSeries, q0_norms: Norms) -> float:
    """Smallest c with ‖q(t)‖_D ≤ ‖q(0)‖_D + c(‖q(0)‖_{H¹}+‖q(0)‖_D)t on all samples."""
    positive = series.times > 0
    if not np.any(positive):
        return 0.0
    scale = (q0_norms.h1 + q0_norms.diffusion) * series.times[positive]
    excess = series.diffusion[positive] - q0_norms.diffusion
    return max(float(np.max(excess / scale)), 0.0)


def sandwich_bounds(C: float, eps0: float, sigma: float = 1 / 50) -> Tuple[float, float]:
    """Asymptotic window [C/(1+ε₀^ζ), C/(1−ε₀^ζ)] for ‖q(t)‖_D/t, ζ = σ²/24."""
    if eps0 <= 0:
        return C, C
    shrink = eps0 ** (sigma**2 / 24)
    upper = C / (1 - shrink) if shrink < 1 else float("inf")
    return C / (1 + shrink), upper
