import functools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field
from scipy.stats import qmc

from qpballistic.components import Component, RealArray
from qpballistic.enums import ReductionStatus
from qpballistic.parallel import parallel_map
from qpballistic.potential import (
    FrequencyVector,
    QuasiPeriodicPotential,
    eval_on_torus,
    eval_potential,
)
from qpballistic.series import FourierSeries, grid_derivative, half_angle_grid
from qpballistic.validators import validate_power_of_two, validate_traceless, validator

__all__ = [
    "HyperbolicInput",
    "NoContraction",
    "NotConverged",
    "KamSchedule",
    "KamState",
    "KamStepResult",
    "ConjugationResult",
    "BlochCoefficients",
    "schrodinger_matrix",
    "homological_solve",
    "kam_step",
    "reduce_cocycle",
    "reduce_energies",
    "conjugation_residual",
    "bloch_from_reduction",
    "bloch_residual",
    "contraction_exponents",
]

logger = logging.getLogger(__name__)

RELATIVE_SIGNIFICANCE = 1e-6
SMOOTHING_POWER = 8


class HyperbolicInput(Exception):
    def __init__(self, message: str, k: Optional[Sequence[int]] = None):
        self.k = None if k is None else [int(i) for i in k]
        super().__init__(message)


class NoContraction(Exception):
    pass


class NotConverged(Exception):
    pass


def schrodinger_matrix(E: float) -> np.ndarray:
    return np.array([[0.0, 1.0], [-E, 0.0]])


class KamSchedule(Component):
    """Step sizes ε_{j+1} = ε_j^{1+σ} and truncations N_j = 4^{j+1}σ|ln ε_j|."""

    eps0: float = Field(..., gt=0, lt=1)
    sigma: float = Field(1 / 50, gt=0, lt=1)
    max_steps: int = Field(8, ge=1)
    divisor_floor: float = Field(1e-6, gt=0)
    resonance_sigma: float = Field(0.5, gt=0)
    residual_target: float = Field(1e-10, gt=0)
    n_trunc_min: int = Field(12, ge=1)
    grid_size: int = 64
    n_theta: int = Field(256, ge=1)

    _validate_grid_size = validator("grid_size", validate_power_of_two, minimum=16)

    @property
    def eps_j(self) -> List[float]:
        return [self.eps0 ** ((1 + self.sigma) ** j) for j in range(self.max_steps + 1)]

    @property
    def N_j(self) -> List[float]:
        return [4 ** (j + 1) * self.sigma * abs(np.log(e)) for j, e in enumerate(self.eps_j)]

    def truncation(self, j: int) -> int:
        wanted = 2 * int(np.ceil(self.N_j[j]))
        return int(np.clip(wanted, self.n_trunc_min, self.grid_size // 4))


class KamState(Component):
    A: RealArray
    F: FourierSeries

    _validate_A = validator("A", validate_traceless)


class KamStepResult(Component):
    A: RealArray
    F: FourierSeries
    conjugation: RealArray
    resonance: Optional[List[int]] = None
    removed: List[List[int]] = []
    f_norm: float
    f_next_norm: float


class ConjugationResult(Component):
    E: float
    B: RealArray
    alpha: float
    Y: FourierSeries
    xi: float
    resonances: List[Tuple[int, List[int]]] = []
    residual: float
    status: ReductionStatus
    steps: int = 0
    f_norms: List[float] = []

    _validate_B = validator("B", validate_traceless, tolerance=0.0)

    @property
    def near_resonant(self) -> bool:
        return bool(self.resonances)


class BlochCoefficients(Component):
    E: float
    rho: float
    beta0: FourierSeries
    beta1: FourierSeries
    smoothing_applied: bool = False

    def values(self, x) -> Tuple[np.ndarray, np.ndarray]:
        return self.beta0.at_x(x).real, self.beta1.at_x(x).real

    def profile(self) -> FourierSeries:
        """f with ψ(x) = e^{iρx} f(ωx/2), f = β₀ + iρβ₁."""
        return self.beta0 + self.beta1.scaled(1j * self.rho)


def _eigenbasis(A: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if det <= 0:
        raise HyperbolicInput(f"Constant part has real eigenvalues (det = {det:.3e})")
    alpha = float(np.sqrt(det))
    v = np.array([A[0, 1], 1j * alpha - A[0, 0]])
    P = np.column_stack([v, v.conj()])
    return alpha, P, np.linalg.inv(P)


def _adjugate(M: np.ndarray) -> np.ndarray:
    adj = np.empty_like(M)
    adj[..., 0, 0] = M[..., 1, 1]
    adj[..., 1, 1] = M[..., 0, 0]
    adj[..., 0, 1] = -M[..., 0, 1]
    adj[..., 1, 0] = -M[..., 1, 0]
    return adj


def _expm_traceless(Z: np.ndarray) -> np.ndarray:
    s = np.sqrt((Z[..., 0, 0] ** 2 + Z[..., 0, 1] * Z[..., 1, 0]).astype(complex))
    cosh = np.cosh(s).real[..., None, None]
    sinhc = np.sinc(1j * s / np.pi).real[..., None, None]
    return cosh * np.eye(2) + sinhc * Z


def _make_traceless(M: np.ndarray) -> np.ndarray:
    trace = (M[..., 0, 0] + M[..., 1, 1]) / 2
    return M - trace[..., None, None] * np.eye(2)


def homological_solve(
    A: np.ndarray,
    F_hat: FourierSeries,
    freq: FrequencyVector,
    N_trunc: int,
    divisor_floor: float,
) -> Tuple[FourierSeries, List[List[int]]]:
    """Solve i⟨m,ω⟩/2·Ŷ(m) = [A, Ŷ(m)] + F̂(m) for every nonzero mode up to N_trunc."""
    alpha, P, Pinv = _eigenbasis(A)
    keep = np.abs(F_hat.modes).max(axis=1, initial=0) <= N_trunc
    modes = F_hat.modes[keep]
    Ft = np.einsum("ij,mjk,kl->mil", Pinv, F_hat.coeffs[keep], P)
    nu = modes @ freq.omega / 2
    divisors = 1j * np.stack(
        [np.stack([nu, nu - 2 * alpha], -1), np.stack([nu + 2 * alpha, nu], -1)], -2
    )
    zero = np.all(modes == 0, axis=1)
    small = (np.abs(divisors) < divisor_floor) & ~zero[:, None, None]
    solvable = ~small & ~zero[:, None, None]
    Zt = np.divide(Ft, divisors, out=np.zeros_like(Ft), where=solvable)
    removed = [m.tolist() for m in modes[np.any(small, axis=(1, 2))]]
    if removed:
        logger.debug("Diverted %d modes below divisor floor %g", len(removed), divisor_floor)
    Z = np.einsum("ij,mjk,kl->mil", P, Zt, Pinv)
    return FourierSeries(freq=freq, modes=modes[~zero], coeffs=Z[~zero]), removed


def _find_resonance(A: np.ndarray, F: FourierSeries, threshold: float) -> Optional[np.ndarray]:
    alpha, P, Pinv = _eigenbasis(A)
    if F.modes.size == 0:
        return None
    upper = np.einsum("j,mjk,k->m", Pinv[0], F.coeffs, P[:, 1])
    half = F.frequencies() / 2
    candidates = (
        np.any(F.modes != 0, axis=1)
        & np.all(F.modes % 2 == 0, axis=1)
        & (np.abs(half - alpha) < threshold)
        & (np.abs(upper) > RELATIVE_SIGNIFICANCE * F.norm())
    )
    if not np.any(candidates):
        return None
    index = np.flatnonzero(candidates)
    best = index[np.argmin(np.abs(half[index] - alpha))]
    return F.modes[best] // 2


def _rotation_grid(A: np.ndarray, k: np.ndarray, phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    J = A / np.sqrt(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])
    phase = phi @ k
    cos = np.cos(phase)[..., None, None]
    sin = np.sin(phase)[..., None, None]
    return cos * np.eye(2) + sin * J, cos * np.eye(2) - sin * J


def kam_step(state: KamState, schedule: KamSchedule, j: int) -> KamStepResult:
    """One Newton step: absorb the mean of F into A and push F to second order.

    Resonant modes are first removed by a rotation R(φ) = exp(⟨k,φ⟩A/α),
    which replaces the rotation α by α − ⟨k,ω⟩/2.
    """
    freq = state.F.freq
    n = schedule.grid_size
    N = schedule.truncation(j)
    axes = tuple(range(freq.d))
    phi = half_angle_grid(freq.d, n)
    A = state.A
    f_norm = state.F.norm()
    if f_norm == 0:
        return KamStepResult(
            A=A,
            F=state.F,
            conjugation=np.broadcast_to(np.eye(2), phi.shape[:-1] + (2, 2)),
            f_norm=0.0,
            f_next_norm=0.0,
        )
    F_grid = state.F.to_grid(n).real
    threshold = max(schedule.divisor_floor, f_norm**schedule.resonance_sigma)

    conjugation = np.broadcast_to(np.eye(2), F_grid.shape)
    k = _find_resonance(A, state.F, threshold)
    if k is not None:
        alpha = np.sqrt(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])
        xi = alpha - k @ freq.omega / 2
        logger.debug("Step %d: resonance k=%s, rotation %.6g -> %.6g", j, k.tolist(), alpha, xi)
        R, R_inv = _rotation_grid(A, k, phi)
        F_grid = R_inv @ F_grid @ R
        A = (xi / alpha) * A
        conjugation = R

    A_next = _make_traceless(A + F_grid.mean(axis=axes))
    if np.linalg.det(A_next) <= 0:
        raise HyperbolicInput(
            f"Step {j} lands in a gap (det = {np.linalg.det(A_next):.3e})",
            k=None if k is None else k,
        )
    F_series = FourierSeries.from_grid(F_grid, freq, N)
    Z_series, removed = homological_solve(A_next, F_series, freq, N, schedule.divisor_floor)
    Z = _make_traceless(Z_series.to_grid(n).real)
    Y = _expm_traceless(Z)
    Y_inv = _adjugate(Y) / np.linalg.det(Y)[..., None, None]
    DY = grid_derivative(Y, freq).real
    F_next_grid = Y_inv @ (A + F_grid) @ Y - Y_inv @ DY - A_next
    F_next = FourierSeries.from_grid(_make_traceless(F_next_grid), freq, N)
    f_next_norm = F_next.norm()
    if f_next_norm >= f_norm:
        raise NoContraction(f"Step {j}: |F| went from {f_norm:.3e} to {f_next_norm:.3e}")
    return KamStepResult(
        A=A_next,
        F=F_next,
        conjugation=conjugation @ Y,
        resonance=None if k is None else k.tolist(),
        removed=removed,
        f_norm=f_norm,
        f_next_norm=f_next_norm,
    )


def _perturbation_grid(V: QuasiPeriodicPotential, phi: np.ndarray) -> np.ndarray:
    values = eval_on_torus(V, 2 * phi)
    F = np.zeros(values.shape + (2, 2))
    F[..., 1, 0] = values
    return F


def conjugation_residual(
    Y: FourierSeries,
    B: np.ndarray,
    E: float,
    V: QuasiPeriodicPotential,
    n_theta: int = 256,
) -> float:
    """sup ‖D_ωY − (A₀(E)+F₀)Y + YB‖ over unscrambled Halton phases."""
    sampler = qmc.Halton(d=V.freq.d, scramble=False)
    phi = 2 * np.pi * sampler.random(n_theta)
    Y_values = Y.at_half_angles(phi)
    DY = Y.derivative().at_half_angles(phi)
    M = schrodinger_matrix(E) + _perturbation_grid(V, phi)
    defect = DY - M @ Y_values + Y_values @ B
    return float(np.max(np.linalg.norm(defect, ord=2, axis=(-2, -1))))


def _finish(
    E: float,
    V: QuasiPeriodicPotential,
    schedule: KamSchedule,
    Y: FourierSeries,
    A: np.ndarray,
    status: ReductionStatus,
    resonances,
    steps: int,
    f_norms: List[float],
) -> ConjugationResult:
    B = np.array([[A[0, 0], A[0, 1]], [A[1, 0], -A[0, 0]]])
    det = -B[0, 0] ** 2 - B[0, 1] * B[1, 0]
    alpha = float(np.sqrt(max(det, 0.0)))
    return ConjugationResult(
        E=E,
        B=B,
        alpha=alpha,
        Y=Y,
        xi=float(np.sign(B[0, 1]) * alpha),
        resonances=resonances,
        residual=conjugation_residual(Y, B, E, V, schedule.n_theta),
        status=status,
        steps=steps,
        f_norms=f_norms,
    )


def reduce_cocycle(E: float, V: QuasiPeriodicPotential, schedule: KamSchedule) -> ConjugationResult:
    freq = V.freq
    n = schedule.grid_size
    if V.is_zero:
        # E <= 0 gives a constant hyperbolic (or parabolic) cocycle
        status = ReductionStatus.converged if E > 0 else ReductionStatus.resonant_skipped
        return _finish(
            E, V, schedule, FourierSeries.identity(freq), schrodinger_matrix(E),
            status, [], 0, [0.0],
        )

    phi = half_angle_grid(freq.d, n)
    F0 = FourierSeries.from_grid(_perturbation_grid(V, phi), freq, n // 2 - 1)
    state = KamState(A=schrodinger_matrix(E), F=F0)
    total = np.broadcast_to(np.eye(2), phi.shape[:-1] + (2, 2))
    Y = FourierSeries.identity(freq)
    resonances: List[Tuple[int, List[int]]] = []
    f_norms = [F0.norm()]
    status = ReductionStatus.diverged
    steps = 0

    for j in range(schedule.max_steps):
        try:
            step = kam_step(state, schedule, j)
        except HyperbolicInput as exc:
            if exc.k is not None:
                resonances.append((j, exc.k))
            logger.info("E=%.6g: %s", E, exc)
            status = ReductionStatus.resonant_skipped
            break
        except NoContraction as exc:
            logger.info("E=%.6g: %s", E, exc)
            status = ReductionStatus.diverged
            break
        steps = j + 1
        if step.resonance is not None:
            resonances.append((j, step.resonance))
        total = total @ step.conjugation
        state = KamState(A=step.A, F=step.F)
        f_norms.append(step.f_next_norm)
        truncation = min(2 * schedule.truncation(j), n // 2 - 1)
        Y = FourierSeries.from_grid(total, freq, truncation)
        if conjugation_residual(Y, state.A, E, V, schedule.n_theta) < schedule.residual_target:
            status = ReductionStatus.converged
            break

    result = _finish(E, V, schedule, Y, state.A, status, resonances, steps, f_norms)
    logger.debug("E=%.6g: %s after %d steps, residual %.3e", E, status.value, steps, result.residual)
    return result


def reduce_energies(
    energies: Sequence[float],
    V: QuasiPeriodicPotential,
    schedule: KamSchedule,
    threads: int = 1,
) -> List[ConjugationResult]:
    task = functools.partial(reduce_cocycle, V=V, schedule=schedule)
    return parallel_map(task, [float(E) for E in energies], threads=threads)


def contraction_exponents(result: ConjugationResult) -> np.ndarray:
    """log‖F_{j+1}‖ / log‖F_j‖ for consecutive steps."""
    norms = np.asarray(result.f_norms[: result.steps + 1])
    norms = norms[norms > 0]
    if norms.size < 2:
        return np.zeros(0)
    logs = np.log(norms)
    return logs[1:] / logs[:-1]


def bloch_from_reduction(
    result: ConjugationResult,
    rho: float,
    smoothing: bool = False,
    smoothing_threshold: float = 0.05,
) -> BlochCoefficients:
    if result.status != ReductionStatus.converged:
        raise NotConverged(f"Reduction at E={result.E:g} ended {result.status.value}")
    B, Y, alpha = result.B, result.Y, result.alpha
    f = Y.entry(0, 0).scaled(B[0, 1]) + Y.entry(0, 1).scaled(1j * alpha - B[0, 0])

    magnitude = np.abs(f.coeffs)
    significant = magnitude > 1e-3 * magnitude.max()
    nu = f.frequencies()
    best = None
    for sign in (1, -1):
        lam = sign * (alpha + nu[significant])
        i = int(np.argmin(np.abs(lam - rho)))
        if best is None or abs(lam[i] - rho) < abs(best[1] - rho):
            best = (sign, float(lam[i]), f.modes[significant][i])
    sign, lam, m = best
    if abs(lam) < 1e-12:
        raise ValueError(f"Bloch exponent vanishes at E={result.E:g}")
    g = f.shifted(m) if sign > 0 else f.conjugate().shifted(-m)

    beta0 = (g + g.conjugate()).scaled(0.5)
    beta1 = (g - g.conjugate()).scaled(1 / (2j * lam))
    applied = False
    if smoothing and result.near_resonant and abs(result.xi) < smoothing_threshold:
        factor = result.xi**SMOOTHING_POWER
        beta0, beta1 = beta0.scaled(factor), beta1.scaled(factor)
        applied = True
    return BlochCoefficients(E=result.E, rho=lam, beta0=beta0, beta1=beta1, smoothing_applied=applied)


def bloch_residual(bloch: BlochCoefficients, V: QuasiPeriodicPotential, x) -> float:
    """sup |−ψ″ + Vψ − Eψ| for ψ(x) = e^{iρx} f(ωx/2) at the sample points x."""
    x = np.asarray(x, dtype=float)
    lam = bloch.rho
    f = bloch.profile()
    df = f.derivative()
    ddf = df.derivative()
    bracket = ddf.at_x(x) + 2j * lam * df.at_x(x) - lam**2 * f.at_x(x)
    potential = eval_potential(V, x)
    defect = -bracket + (potential - bloch.E) * f.at_x(x)
    return float(np.max(np.abs(defect)))
