import logging
from functools import partial
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator
from scipy.optimize import isotonic_regression
from scipy.stats import spearmanr
from tqdm import tqdm

from qpballistic.components import Component, RealArray
from qpballistic.enums import Classification
from qpballistic.parallel import chunked, parallel_map
from qpballistic.potential import (
    FrequencyVector,
    QuasiPeriodicPotential,
    eval_potential,
    half_lattice_values,
)
from qpballistic.validators import (
    validate_shape,
    validate_strictly_increasing,
    validator,
)

__all__ = [
    "StepTooLarge",
    "AmbiguousLabel",
    "CocycleState",
    "GapLabel",
    "RotationCurve",
    "integrate_cocycle",
    "rotation_number",
    "rotation_curve",
    "lyapunov_exponent",
    "label_gaps",
    "holder_constant",
    "gap_sizes",
    "gap_size_correlation",
    "spectrum_bottom",
]

logger = logging.getLogger(__name__)

GAUSS_NODES = (0.5 - np.sqrt(3.0) / 6.0, 0.5 + np.sqrt(3.0) / 6.0)
MIN_KAPPA = 0.1
MAX_HALVINGS = 20
MONOTONICITY_SLACK = 1e-6


class StepTooLarge(Exception):
    pass


class AmbiguousLabel(Exception):
    def __init__(self, e_min: float, e_max: float, candidates: List[List[int]]):
        self.e_min = e_min
        self.e_max = e_max
        self.candidates = candidates
        super().__init__(
            f"Plateau on [{e_min:g}, {e_max:g}] matches several labels: {candidates}"
        )


class CocycleState(Component):
    x: float
    Phi: RealArray
    phase: float

    _validate_phi = validator("Phi", validate_shape, shape=(2, 2))


class GapLabel(Component):
    e_min: float
    e_max: float
    k: List[int]
    level: float
    deviation: float = Field(..., ge=0)

    @property
    def length(self) -> float:
        return self.e_max - self.e_min


class RotationCurve(Component):
    freq: FrequencyVector
    energies: RealArray
    rho: RealArray
    drho: RealArray
    lyapunov: RealArray
    classification: List[Classification]
    gap_labels: List[GapLabel] = []
    T: float = Field(..., gt=0)
    flat_threshold: float = Field(0.02, gt=0)
    label_tol: float = Field(1e-3, gt=0)
    monotonicity_violations: int = Field(0, ge=0)

    _validate_energies = validator("energies", validate_strictly_increasing)

    @model_validator(mode="after")
    def _validate_values(self) -> "RotationCurve":
        n = self.energies.size
        for name in ("rho", "drho", "lyapunov"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one value per energy")
        if len(self.classification) != n:
            raise ValueError("classification must have one entry per energy")
        return self

    @property
    def resolution(self) -> float:
        """Smallest rotation-number difference the finite run length can resolve."""
        return float(np.pi / (self.T - _burn_in(self.T)))

    def spectrum_mask(self) -> np.ndarray:
        return np.array([c == Classification.spectrum for c in self.classification])

    def label_for(self, energy: float) -> Optional[GapLabel]:
        for label in self.gap_labels:
            if label.e_min <= energy <= label.e_max:
                return label
        return None


def _burn_in(T: float) -> float:
    return min(10.0, T / 10.0)


class _Sweep(NamedTuple):
    phase_burn: np.ndarray
    phase: np.ndarray
    log_burn: np.ndarray
    log_norm: np.ndarray
    burn: float
    Phi: Optional[np.ndarray]


def _prufer_scale(energies: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(np.abs(energies), MIN_KAPPA**2))


def _propagator(energies, v1, v2, h):
    """Entries of exp(Ω) for the two-point Gauss–Magnus generator Ω."""
    w1 = v1 - energies
    w2 = v2 - energies
    c = np.sqrt(3.0) * h**2 / 12.0 * (w1 - w2)
    lower = 0.5 * h * (w1 + w2)
    s = np.sqrt((c**2 + h * lower).astype(complex))
    ch = np.cosh(s).real
    sh = np.sinc(1j * s / np.pi).real
    return ch + sh * c, sh * h, sh * lower, ch - sh * c


class _Integrator:
    def __init__(self, energies, V, X0, track_matrix):
        self.energies = energies
        self.V = V
        self.kappa = _prufer_scale(energies)
        z = self.kappa * X0[0] + 1j * X0[1]
        self.q = X0[0] / np.abs(z)
        self.p = X0[1] / np.abs(z)
        self.z = z / np.abs(z)
        self.phase = np.angle(z)
        self.log_norm = np.log(np.abs(z))
        self.Phi = np.tile(np.eye(2), energies.shape + (1, 1)) if track_matrix else None

    def advance(self, x, h, v1=None, v2=None, depth=0):
        if v1 is None:
            v1, v2 = eval_potential(self.V, x + h * np.asarray(GAUSS_NODES))
        m00, m01, m10, m11 = _propagator(self.energies, v1, v2, h)
        q = m00 * self.q + m01 * self.p
        p = m10 * self.q + m11 * self.p
        z = self.kappa * q + 1j * p
        dphi = np.angle(z * np.conj(self.z))
        if np.any(np.abs(dphi) >= np.pi / 2):
            if depth >= MAX_HALVINGS:
                raise StepTooLarge(f"Phase guard still tripped at step {h:.3e}, x={x:g}")
            self.advance(x, h / 2, depth=depth + 1)
            self.advance(x + h / 2, h / 2, depth=depth + 1)
            return
        r = np.abs(z)
        self.q, self.p = q / r, p / r
        self.z = z / r
        self.phase = self.phase + dphi
        self.log_norm = self.log_norm + np.log(r)
        if self.Phi is not None:
            step = np.stack([np.stack([m00, m01], -1), np.stack([m10, m11], -1)], -2)
            self.Phi = step @ self.Phi


def _sweep(
    energies: np.ndarray,
    V: QuasiPeriodicPotential,
    T: float,
    h: float,
    X0=(1.0, 0.0),
    track_matrix: bool = False,
    progress: bool = False,
) -> _Sweep:
    if T <= 0 or h <= 0:
        raise ValueError("T and h must be positive")
    if not np.any(X0):
        raise ValueError("X0 must be nonzero")
    n_steps = max(1, int(np.ceil(T / h - 1e-9)))
    h = T / n_steps
    burn = _burn_in(T)
    n_burn = int(round(burn / h))
    starts = h * np.arange(n_steps)
    nodes = eval_potential(V, starts[:, None] + h * np.asarray(GAUSS_NODES))
    nodes = np.broadcast_to(nodes, (n_steps, 2))

    state = _Integrator(np.asarray(energies, dtype=float), V, X0, track_matrix)
    phase_burn, log_burn = state.phase, state.log_norm
    for i in tqdm(range(n_steps), disable=not progress, desc="cocycle", leave=False):
        state.advance(starts[i], h, nodes[i, 0], nodes[i, 1])
        if i + 1 == n_burn:
            phase_burn, log_burn = state.phase, state.log_norm
    return _Sweep(phase_burn, state.phase, log_burn, state.log_norm, n_burn * h, state.Phi)


def integrate_cocycle(
    E: float, V: QuasiPeriodicPotential, T: float, h: float, X0=(1.0, 0.0)
) -> CocycleState:
    """Fundamental matrix Φ(T) and the unwrapped phase of Φ(x)X0.

    The phase is measured in the Prüfer frame (κq, q') with κ = √max(|E|, 0.01),
    in which the free elliptic flow rotates uniformly.
    """
    sweep = _sweep(np.array([E]), V, T, h, X0, track_matrix=True)
    return CocycleState(x=T, Phi=sweep.Phi[0], phase=float(sweep.phase[0]))


def _rotation(sweep: _Sweep, T: float) -> np.ndarray:
    return np.abs(sweep.phase - sweep.phase_burn) / (T - sweep.burn)


def _lyapunov(sweep: _Sweep, T: float) -> np.ndarray:
    return np.maximum((sweep.log_norm - sweep.log_burn) / (T - sweep.burn), 0.0)


def rotation_number(E: float, V: QuasiPeriodicPotential, T: float, h: float) -> Tuple[float, float]:
    sweep = _sweep(np.array([E]), V, T, h)
    return float(_rotation(sweep, T)[0]), float(np.pi / (T - sweep.burn))


def lyapunov_exponent(E: float, V: QuasiPeriodicPotential, T: float, h: float) -> float:
    return float(_lyapunov(_sweep(np.array([E]), V, T, h), T)[0])


def _sweep_chunk(energies, V, T, h, progress=False):
    energies = np.asarray(energies, dtype=float)
    try:
        sweep = _sweep(energies, V, T, h, progress=progress)
        return _rotation(sweep, T), _lyapunov(sweep, T)
    except StepTooLarge:
        if energies.size == 1:
            logger.warning("Integration failed at E=%g; marked uncertain", energies[0])
            return np.array([np.nan]), np.array([np.nan])
    parts = [_sweep_chunk(energies[i : i + 1], V, T, h) for i in range(energies.size)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _monotone_projection(rho: np.ndarray) -> Tuple[np.ndarray, int]:
    finite = np.isfinite(rho)
    values = rho[finite]
    violations = int(np.sum(values[:-1] > values[1:] + MONOTONICITY_SLACK))
    projected = rho.copy()
    if values.size > 1:
        projected[finite] = isotonic_regression(values).x
    return projected, violations


def rotation_curve(
    V: QuasiPeriodicPotential,
    energies: Sequence[float],
    T: float,
    h: float,
    *,
    threads: int = 1,
    chunk_size: int = 64,
    K_max: int = 3,
    flat_threshold: float = 0.02,
    lyapunov_tol: float = 1e-2,
    label_tol: float = 1e-3,
    progress: bool = False,
) -> RotationCurve:
    energies = validate_strictly_increasing(np.asarray(energies, dtype=float))
    worker = partial(_sweep_chunk, V=V, T=T, h=h, progress=progress and threads <= 1)
    parts = parallel_map(worker, chunked(energies, chunk_size), threads)
    rho = np.concatenate([p[0] for p in parts])
    lyapunov = np.concatenate([p[1] for p in parts])

    rho, violations = _monotone_projection(rho)
    if violations:
        logger.warning("Rotation number decreased at %d grid points before projection", violations)
    drho = np.gradient(rho, energies) if energies.size > 1 else np.zeros_like(rho)

    _, values = half_lattice_values(V.freq, K_max)
    distance = np.abs(rho[:, None] - values[None, :]).min(axis=1)
    classification = []
    for r, d, lam, dist in zip(rho, drho, lyapunov, distance):
        if not (np.isfinite(r) and np.isfinite(d)):
            classification.append(Classification.uncertain)
        elif lam < lyapunov_tol and d > flat_threshold:
            classification.append(Classification.spectrum)
        elif d < flat_threshold and dist <= label_tol:
            classification.append(Classification.gap)
        else:
            classification.append(Classification.uncertain)

    curve = RotationCurve(
        freq=V.freq,
        energies=energies,
        rho=rho,
        drho=drho,
        lyapunov=lyapunov,
        classification=classification,
        T=T,
        flat_threshold=flat_threshold,
        label_tol=label_tol,
        monotonicity_violations=violations,
    )
    labels = label_gaps(curve, K_max, label_tol, strict=False)
    return curve.model_copy(update={"gap_labels": labels})


def _flat_runs(flat: np.ndarray) -> List[np.ndarray]:
    runs, current = [], []
    for i, is_flat in enumerate(flat):
        if is_flat:
            current.append(i)
        elif current:
            runs.append(np.array(current))
            current = []
    if current:
        runs.append(np.array(current))
    return runs


def label_gaps(
    curve: RotationCurve,
    K_max: int,
    tol: float,
    *,
    min_run: int = 2,
    strict: bool = True,
) -> List[GapLabel]:
    """Label every flat stretch of ρ with the unique k such that ρ = ⟨k,ω⟩/2.

    A stretch is kept only if every interior point lies within tol of the
    level, widened by twice the rotation-number resolution of the run.
    """
    ks, values = half_lattice_values(curve.freq, K_max)
    flat = np.nan_to_num(curve.drho, nan=np.inf) < curve.flat_threshold
    labels = []
    for run in _flat_runs(flat):
        if run.size < min_run:
            continue
        core = run[1:-1] if run.size >= 4 else run
        level = float(np.median(curve.rho[core]))
        distance = np.abs(level - values)
        order = np.argsort(distance)
        e_min, e_max = float(curve.energies[run[0]]), float(curve.energies[run[-1]])
        if distance[order[0]] > tol:
            logger.info("Plateau at rho=%.6f on [%g, %g] left unlabeled", level, e_min, e_max)
            continue
        if order.size > 1 and distance[order[1]] <= tol:
            candidates = [ks[i].tolist() for i in order if distance[i] <= tol]
            if strict:
                raise AmbiguousLabel(e_min, e_max, candidates)
            logger.warning("Ambiguous plateau on [%g, %g]: %s", e_min, e_max, candidates)
            continue
        best = order[0]
        deviation = float(np.max(np.abs(curve.rho[core] - values[best])))
        if deviation > tol + 2 * curve.resolution:
            logger.info(
                "Plateau on [%g, %g] strays %.3g from k=%s; left unlabeled",
                e_min, e_max, deviation, ks[best].tolist(),
            )
            continue
        labels.append(
            GapLabel(e_min=e_min, e_max=e_max, k=ks[best].tolist(), level=level, deviation=deviation)
        )
    return labels


def holder_constant(curve: RotationCurve, n_pairs: int = 500, seed: int = 0) -> float:
    """Single fitted c_H with |ρ(E₁)−ρ(E₂)| ≤ c_H |E₁−E₂|^{1/2} over spectrum pairs."""
    idx = np.flatnonzero(curve.spectrum_mask())
    if idx.size < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    first = rng.choice(idx, size=n_pairs)
    second = rng.choice(idx, size=n_pairs)
    keep = first != second
    dE = np.abs(curve.energies[first[keep]] - curve.energies[second[keep]])
    drho = np.abs(curve.rho[first[keep]] - curve.rho[second[keep]])
    return float(np.max(drho / np.sqrt(dE))) if dE.size else 0.0


def gap_sizes(curve: RotationCurve) -> List[Tuple[int, float]]:
    return [(int(np.max(np.abs(g.k))), g.length) for g in curve.gap_labels if any(g.k)]


def gap_size_correlation(curve: RotationCurve) -> float:
    """Spearman correlation between |k| and gap length; nonpositive when gaps shrink."""
    sizes = gap_sizes(curve)
    if len(sizes) < 3 or len({s[0] for s in sizes}) < 2:
        return float("nan")
    orders, lengths = zip(*sizes)
    return float(spearmanr(orders, lengths)[0])


def spectrum_bottom(curve: RotationCurve) -> Optional[float]:
    idx = np.flatnonzero(curve.spectrum_mask())
    return float(curve.energies[idx[0]]) if idx.size else None
