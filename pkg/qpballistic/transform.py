import functools
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator
from scipy.integrate import trapezoid
from scipy.stats import linregress

from qpballistic.cocycle import RotationCurve
from qpballistic.components import Component, ComplexArray, IntArray, RealArray
from qpballistic.enums import Branch, Classification, FunctionKind, MeasureKind, ReductionStatus
from qpballistic.evolve import WaveState
from qpballistic.parallel import parallel_map
from qpballistic.potential import QuasiPeriodicPotential, analytic_norm
from qpballistic.reduce import BlochCoefficients, ConjugationResult, bloch_from_reduction
from qpballistic.validators import validate_finite, validate_strictly_increasing, validator

__all__ = [
    "EmptyFrame",
    "EnergyNotInFrame",
    "GridTooCoarse",
    "QuadratureUnderResolved",
    "SpectralFrame",
    "TransformedPair",
    "default_cutoff",
    "build_frame",
    "eval_K_J",
    "apply_transform",
    "transform_norm",
    "transform_norms",
    "derivative_transform",
    "ballistic_constant",
    "diagonalization_error",
    "oscillatory_integral",
    "decay_fit",
    "classical_transform",
    "verify_classical_parseval",
]

logger = logging.getLogger(__name__)

CUTOFF_POWER = 8
EDGE_TAPER = 0.1


class EmptyFrame(Exception):
    pass


class EnergyNotInFrame(Exception):
    pass


class GridTooCoarse(Exception):
    pass


class QuadratureUnderResolved(Exception):
    pass


class SpectralFrame(Component):
    """Retained spectrum energies with Bloch data and measure weights.

    Energies are split into components: maximal runs of consecutive
    admitted points of the rotation-curve grid. Quadrature never crosses
    a component boundary, so gaps contribute nothing.
    """

    energies: RealArray
    rho: RealArray
    drho: RealArray
    weights: RealArray
    quad_weights: RealArray
    component: IntArray
    cutoff_rho_c: float = Field(..., gt=0)
    bloch: List[BlochCoefficients]

    _validate_energies = validator("energies", validate_strictly_increasing)
    _validate_weights = validator("weights", validate_finite)

    @model_validator(mode="after")
    def _validate_values(self) -> "SpectralFrame":
        n = self.energies.size
        for name in ("rho", "drho", "weights", "quad_weights", "component"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one value per energy")
        if len(self.bloch) != n:
            raise ValueError("bloch must have one entry per energy")
        if np.any(self.drho <= 0) or np.any(self.weights <= 0):
            raise ValueError("drho and weights must be positive")
        return self

    def index_of(self, E: float) -> int:
        hit = np.flatnonzero(np.isclose(self.energies, E, rtol=0.0, atol=1e-12))
        if hit.size == 0:
            raise EnergyNotInFrame(f"E={E:g} is not a retained energy")
        return int(hit[0])

    def measure(self, kind: MeasureKind) -> np.ndarray:
        kind = MeasureKind(kind)
        if kind == MeasureKind.dphi:
            return self.weights
        if kind == MeasureKind.dphi_hat:
            return self.weights * self.drho**2
        return self.weights * 4 * self.rho**2 * self.drho**2

    def components(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.component == c) for c in np.unique(self.component)]


class TransformedPair(Component):
    energies: RealArray
    g1: ComplexArray
    g2: ComplexArray

    _validate_g1 = validator("g1", validate_finite)
    _validate_g2 = validator("g2", validate_finite)

    @model_validator(mode="after")
    def _validate_values(self) -> "TransformedPair":
        if not (self.g1.shape == self.g2.shape == self.energies.shape):
            raise ValueError("g1 and g2 must have one value per energy")
        return self

    def scaled(self, factor: complex) -> "TransformedPair":
        return TransformedPair(energies=self.energies, g1=self.g1 * factor, g2=self.g2 * factor)


def default_cutoff(V: QuasiPeriodicPotential, sigma: float = 1 / 50) -> float:
    """ρ_c = ε₀^{−σ/4}; unbounded for the free operator."""
    eps0 = analytic_norm(V)
    return float("inf") if eps0 == 0 else float(eps0 ** (-sigma / 4))


def _runs(indices: np.ndarray) -> List[np.ndarray]:
    if indices.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(indices) > 1) + 1
    return np.split(indices, breaks)


def _measure_weights(rho: np.ndarray, drho: np.ndarray, cutoff: float) -> np.ndarray:
    weights = 1 / (np.pi * drho)
    high = rho > cutoff
    weights[high] /= 1 + rho[high] ** CUTOFF_POWER
    return weights


def _rho_trapezoid(rho: np.ndarray) -> np.ndarray:
    weights = np.zeros_like(rho)
    if rho.size > 1:
        steps = np.diff(rho)
        weights[:-1] += steps / 2
        weights[1:] += steps / 2
    return weights


def build_frame(
    V: QuasiPeriodicPotential,
    curve: RotationCurve,
    reductions: Sequence[ConjugationResult],
    cutoff_rho_c: Optional[float] = None,
    *,
    sigma: float = 1 / 50,
    smoothing: bool = False,
) -> SpectralFrame:
    if len(reductions) != curve.energies.size or not np.allclose(
        [r.E for r in reductions], curve.energies, rtol=0, atol=1e-12
    ):
        raise ValueError("Reductions must be computed on the rotation-curve grid")
    cutoff = default_cutoff(V, sigma) if cutoff_rho_c is None else cutoff_rho_c

    admitted = []
    for i, (label, result) in enumerate(zip(curve.classification, reductions)):
        if label != Classification.spectrum or result.status != ReductionStatus.converged:
            continue
        if result.near_resonant and not smoothing:
            continue
        admitted.append(i)

    blochs: Dict[int, BlochCoefficients] = {}
    for i in admitted:
        blochs[i] = bloch_from_reduction(reductions[i], float(curve.rho[i]), smoothing=smoothing)

    energies, rho, drho, component, bloch = [], [], [], [], []
    for c, run in enumerate(_runs(np.asarray(admitted, dtype=int))):
        if run.size < 2:
            logger.warning("Dropping isolated spectrum point E=%g", curve.energies[run[0]])
            continue
        run_energies = curve.energies[run]
        run_rho = np.array([blochs[i].rho for i in run])
        run_drho = np.gradient(run_rho, run_energies)
        for i, E, r, dr in zip(run, run_energies, run_rho, run_drho):
            if dr <= 0:
                logger.warning("Rejecting E=%g with non-increasing rotation (drho=%.3e)", E, dr)
                continue
            energies.append(E)
            rho.append(r)
            drho.append(dr)
            component.append(c)
            bloch.append(blochs[i])
    if not energies:
        raise EmptyFrame("No spectrum energies survived classification and reduction")

    rho, drho, component = np.array(rho), np.array(drho), np.array(component)
    quad = np.zeros_like(rho)
    for c in np.unique(component):
        members = component == c
        quad[members] = _rho_trapezoid(rho[members]) / drho[members]
    logger.info(
        "Frame keeps %d of %d energies in %d components (rho_c=%g)",
        len(energies), curve.energies.size, np.unique(component).size, cutoff,
    )
    return SpectralFrame(
        energies=energies,
        rho=rho,
        drho=drho,
        weights=_measure_weights(rho, drho, cutoff),
        quad_weights=quad,
        component=component,
        cutoff_rho_c=cutoff,
        bloch=bloch,
    )


def _kernels(bloch: BlochCoefficients, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    beta0, beta1 = bloch.values(x)
    rho = bloch.rho
    sin, cos = np.sin(x * rho), np.cos(x * rho)
    return beta0 * sin + beta1 * rho * cos, beta0 * cos - beta1 * rho * sin


def eval_K_J(frame: SpectralFrame, E: float, x):
    K, J = _kernels(frame.bloch[frame.index_of(E)], np.asarray(x, dtype=float))
    if np.ndim(K) == 0:
        return float(K), float(J)
    return K, J


def _pair(bloch: BlochCoefficients, q: WaveState) -> Tuple[complex, complex]:
    K, J = _kernels(bloch, q.grid.x)
    dx = q.grid.dx
    return dx * np.sum(q.values * K), dx * np.sum(q.values * J)


def apply_transform(q: WaveState, frame: SpectralFrame, threads: int = 1) -> TransformedPair:
    task = functools.partial(_pair, q=q)
    pairs = parallel_map(task, frame.bloch, threads=threads, executor="thread")
    g1, g2 = zip(*pairs)
    return TransformedPair(energies=frame.energies, g1=g1, g2=g2)


def transform_norm(G: TransformedPair, frame: SpectralFrame, kind: MeasureKind) -> float:
    if G.energies.shape != frame.energies.shape:
        raise ValueError("Transformed pair does not live on this frame")
    density = np.abs(G.g1) ** 2 + np.abs(G.g2) ** 2
    return float(np.sqrt(np.sum(density * frame.measure(kind) * frame.quad_weights)))


def transform_norms(G: TransformedPair, frame: SpectralFrame) -> Dict[str, float]:
    return {kind.value: transform_norm(G, frame, kind) for kind in MeasureKind}


def _beta_derivatives(frame: SpectralFrame, x: np.ndarray, max_spacing: float):
    n = frame.energies.size
    beta0 = np.empty((n, x.size))
    beta1 = np.empty((n, x.size))
    for i, bloch in enumerate(frame.bloch):
        beta0[i], beta1[i] = bloch.values(x)
    d_beta0 = np.zeros_like(beta0)
    d_beta1 = np.zeros_like(beta1)
    for members in frame.components():
        energies = frame.energies[members]
        spacing = np.max(np.diff(energies))
        if spacing > max_spacing:
            raise GridTooCoarse(
                f"Energy spacing {spacing:.3g} near E={energies[0]:g} exceeds {max_spacing:g}"
            )
        d_beta0[members] = np.gradient(beta0[members], energies, axis=0)
        d_beta1[members] = np.gradient(beta1[members], energies, axis=0)
    return beta0, beta1, d_beta0, d_beta1


def derivative_transform(
    q: WaveState, frame: SpectralFrame, max_spacing: float = 0.05
) -> TransformedPair:
    """Energy derivative of the transform, (∫q·∂K dx, ∫q·∂J dx)."""
    x = q.grid.x
    beta0, beta1, d_beta0, d_beta1 = _beta_derivatives(frame, x, max_spacing)
    rho = frame.rho[:, None]
    drho = frame.drho[:, None]
    sin, cos = np.sin(x * rho), np.cos(x * rho)
    dK = (
        d_beta0 * sin
        + beta0 * x * cos * drho
        + d_beta1 * rho * cos
        + beta1 * drho * cos
        - beta1 * rho * x * sin * drho
    )
    dJ = (
        d_beta0 * cos
        - beta0 * x * sin * drho
        - d_beta1 * rho * sin
        - beta1 * drho * sin
        - beta1 * rho * x * cos * drho
    )
    dx = q.grid.dx
    return TransformedPair(
        energies=frame.energies, g1=dx * dK @ q.values, g2=dx * dJ @ q.values
    )


def ballistic_constant(q0: WaveState, frame: SpectralFrame, threads: int = 1) -> float:
    return transform_norm(apply_transform(q0, frame, threads), frame, MeasureKind.dphi)


def diagonalization_error(G0: TransformedPair, Gt: TransformedPair, t: float) -> float:
    """max_E |G(E,t) − e^{−iEt}G(E,0)| relative to max_E |G(E,0)|."""
    phase = np.exp(-1j * G0.energies * t)
    error = np.maximum(np.abs(Gt.g1 - phase * G0.g1), np.abs(Gt.g2 - phase * G0.g2))
    scale = max(np.abs(G0.g1).max(), np.abs(G0.g2).max())
    return float(error.max() / scale) if scale > 0 else float(error.max())


def _profile(frame: SpectralFrame, f_kind: FunctionKind, x: float, y: float) -> np.ndarray:
    f_kind = FunctionKind(f_kind)
    if f_kind == FunctionKind.const_one:
        return np.ones(frame.energies.size)
    values = []
    for bloch in frame.bloch:
        b0, b1 = bloch.values(np.array([x, y]))
        values.append(b0[0] * b0[1] if f_kind == FunctionKind.beta00 else b1[0] * b1[1])
    return np.array(values)


def _filon_cos(rho: np.ndarray, g: np.ndarray, M: float) -> float:
    """∫ g(ρ) cos(Mρ) dρ with g linear between nodes."""
    if rho.size < 2:
        return 0.0
    slope = np.diff(g) / np.diff(rho)
    sin, cos = np.sin(M * rho), np.cos(M * rho)
    boundary = (g[1:] * sin[1:] - g[:-1] * sin[:-1]) / M
    correction = slope * (cos[1:] - cos[:-1]) / M**2
    return float(np.sum(boundary + correction))


def _edge_window(rho: np.ndarray, lower: bool, upper: bool, width: float) -> np.ndarray:
    """Raised-cosine ramp from 0 to 1 over `width` at the requested ends of a component."""
    window = np.ones_like(rho)
    width = min(width, (rho[-1] - rho[0]) / 2)
    if lower:
        window *= np.sin(np.pi / 2 * np.clip((rho - rho[0]) / width, 0, 1)) ** 2
    if upper:
        window *= np.sin(np.pi / 2 * np.clip((rho[-1] - rho) / width, 0, 1)) ** 2
    return window


def oscillatory_integral(
    frame: SpectralFrame,
    f_kind: FunctionKind,
    power_k: int,
    M: float,
    branch: Branch = Branch.both,
    x_offset: float = 0.3,
    y_offset: float = 1.7,
    edge_taper: float = EDGE_TAPER,
) -> float:
    """∫ f ρ^k cos(Mρ) ∂ρ dE over the spectrum, damped by (1+ρ⁸) above ρ_c.

    Integrates in ρ. The lowest component is extended down to ρ = 0 with f
    held at its first value. Where a gap or an excluded band separates two
    components, f is tapered to zero over `edge_taper` in ρ on both sides;
    the outer ends of the frame are left untouched.
    """
    if power_k not in (0, 2, 4):
        raise ValueError("power_k must be 0, 2 or 4")
    if abs(M) <= 1:
        raise ValueError("Oscillation frequency must satisfy |M| > 1")
    if edge_taper < 0:
        raise ValueError("edge_taper must be nonnegative")
    branch = Branch(branch)
    f = _profile(frame, f_kind, x_offset, y_offset)
    cutoff = frame.cutoff_rho_c
    components = frame.components()
    total = 0.0
    for position, members in enumerate(components):
        rho, values = frame.rho[members], f[members]
        step = np.max(np.diff(rho)) if rho.size > 1 else 0.0
        if abs(M) * step > np.pi:
            raise QuadratureUnderResolved(
                f"Rotation spacing {step:.3g} cannot resolve cos({M:g}ρ)"
            )
        if edge_taper > 0 and len(components) > 1:
            lower, upper = position > 0, position < len(components) - 1
            values = values * _edge_window(rho, lower, upper, edge_taper)
        if position == 0 and rho[0] > 0:
            rho, values = np.concatenate([[0.0], rho]), np.concatenate([[values[0]], values])
        if rho[0] < cutoff < rho[-1] and not np.any(rho == cutoff):
            at = np.searchsorted(rho, cutoff)
            values = np.insert(values, at, np.interp(cutoff, rho, values))
            rho = np.insert(rho, at, cutoff)
        low = rho <= cutoff
        g = values * rho**power_k
        if branch in (Branch.both, Branch.low) and np.count_nonzero(low) > 1:
            total += _filon_cos(rho[low], g[low], M)
        high = rho >= cutoff
        if branch in (Branch.both, Branch.high) and np.count_nonzero(high) > 1:
            damped = g[high] / (1 + rho[high] ** CUTOFF_POWER)
            total += _filon_cos(rho[high], damped, M)
    return total


def decay_fit(
    frame: SpectralFrame,
    f_kind: FunctionKind,
    power_k: int,
    Ms: Sequence[float],
    branch: Branch = Branch.both,
    **kwargs,
) -> Tuple[float, np.ndarray]:
    """Fit |I(M)| ≲ c/M^p through the running envelope; returns (p, values).

    Keyword arguments go to `oscillatory_integral`.
    """
    Ms = np.asarray(Ms, dtype=float)
    values = np.array(
        [oscillatory_integral(frame, f_kind, power_k, M, branch, **kwargs) for M in Ms]
    )
    envelope = np.maximum.accumulate(np.abs(values)[::-1])[::-1]
    if np.all(envelope == 0):
        return float("inf"), values
    keep = envelope > 0
    fit = linregress(np.log(np.abs(Ms[keep])), np.log(envelope[keep]))
    return float(-fit.slope), values


def classical_transform(q: WaveState, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(∫q sin(ρx) dx, ∫q cos(ρx) dx) for the free operator."""
    x = q.grid.x
    rho = np.asarray(rho, dtype=float)
    g1 = np.empty(rho.size, dtype=complex)
    g2 = np.empty(rho.size, dtype=complex)
    for block in np.array_split(np.arange(rho.size), max(1, rho.size // 256)):
        phase = rho[block, None] * x
        g1[block] = q.grid.dx * np.sin(phase) @ q.values
        g2[block] = q.grid.dx * np.cos(phase) @ q.values
    return g1, g2


def verify_classical_parseval(q: WaveState, E_max: float, n_rho: int = 4000) -> float:
    """Relative gap between ‖q‖² and its free spectral expansion cut at E_max."""
    l2_squared = q.grid.dx * np.sum(np.abs(q.values) ** 2)
    if l2_squared == 0:
        return 0.0
    rho = np.linspace(0.0, np.sqrt(E_max), n_rho)
    g1, g2 = classical_transform(q, rho)
    # dμ = (1/2π)(E^{-1/2}dE, E^{1/2}dE) becomes dρ/π in the rotation variable
    expansion = trapezoid(np.abs(g1) ** 2 + np.abs(g2) ** 2, rho) / np.pi
    return float(abs(expansion - l2_squared) / l2_squared)
