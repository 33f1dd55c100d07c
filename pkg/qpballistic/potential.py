import itertools
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field, model_validator

from qpballistic.components import Component, ComplexArray, IntArray, RealArray
from qpballistic.validators import validate_finite, validator

__all__ = [
    "FrequencyVector",
    "QuasiPeriodicPotential",
    "GOLDEN_MEAN",
    "diophantine_margin",
    "eval_potential",
    "eval_on_torus",
    "analytic_norm",
    "lattice_box",
    "half_lattice_values",
]

GOLDEN_MEAN = (np.sqrt(5.0) - 1.0) / 2.0


class FrequencyVector(Component):
    """Frequency vector ω with its Diophantine constants γ and τ."""

    omega: RealArray
    gamma: float = Field(..., gt=0)
    tau: float = Field(..., gt=0)

    def __init__(
        self,
        *,
        omega: Union[Sequence[float], np.ndarray],
        gamma: float = 1e-2,
        tau: Optional[float] = None,
    ):
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        super().__init__(
            omega=omega, gamma=gamma, tau=omega.size + 1.0 if tau is None else tau
        )

    _validate_omega = validator("omega", validate_finite)

    @model_validator(mode="after")
    def _validate_values(self) -> "FrequencyVector":
        if self.omega.ndim != 1 or self.omega.size < 1:
            raise ValueError("omega must be a non-empty vector")
        if self.tau <= self.d - 1:
            raise ValueError(f"tau must exceed d - 1 = {self.d - 1}")
        return self

    @property
    def d(self) -> int:
        return int(self.omega.size)

    @classmethod
    def golden(cls, d: int = 2, **kwargs) -> "FrequencyVector":
        if d == 1:
            omega = [2 * np.pi * GOLDEN_MEAN]
        elif d == 2:
            omega = [2 * np.pi, 2 * np.pi * GOLDEN_MEAN]
        else:
            raise ValueError("Golden frequencies are defined for d = 1 or 2")
        return cls(omega=omega, **kwargs)


class QuasiPeriodicPotential(Component):
    """Finite Fourier series V(θ) = Σ v̂_k e^{i⟨k,θ⟩}, evaluated along θ = ωx."""

    freq: FrequencyVector
    modes: IntArray
    coeffs: ComplexArray
    radius_r: float = Field(0.5, gt=0, le=1)

    def __init__(
        self,
        *,
        freq: FrequencyVector,
        modes: Union[Sequence[Sequence[int]], np.ndarray] = (),
        coeffs: Union[Sequence[complex], np.ndarray] = (),
        radius_r: float = 0.5,
    ):
        modes = np.asarray(modes, dtype=np.int64).reshape(-1, freq.d)
        super().__init__(freq=freq, modes=modes, coeffs=coeffs, radius_r=radius_r)

    @model_validator(mode="after")
    def _validate_values(self) -> "QuasiPeriodicPotential":
        if self.coeffs.ndim != 1 or self.coeffs.size != self.modes.shape[0]:
            raise ValueError("Every mode needs exactly one coefficient")
        validate_finite(self.coeffs)
        table = {}
        for k, c in zip(map(tuple, self.modes), self.coeffs):
            if k in table:
                raise ValueError(f"Duplicate mode {k}")
            table[k] = c
        for k, c in table.items():
            partner = table.get(tuple(-np.asarray(k)), 0.0)
            if abs(partner - np.conj(c)) > 1e-12 * max(1.0, abs(c)):
                raise ValueError(f"Mode {k} breaks Hermitian symmetry")
        return self

    @classmethod
    def zero(cls, freq: FrequencyVector, radius_r: float = 0.5) -> "QuasiPeriodicPotential":
        return cls(freq=freq, radius_r=radius_r)

    @classmethod
    def from_cosines(
        cls,
        freq: FrequencyVector,
        amplitudes: Dict[Tuple[int, ...], float],
        radius_r: float = 0.5,
    ) -> "QuasiPeriodicPotential":
        """Build Σ a_k cos⟨k,θ⟩ from a map k -> a_k."""
        table: Dict[Tuple[int, ...], complex] = {}
        for k, a in amplitudes.items():
            k = tuple(int(i) for i in k)
            if len(k) != freq.d:
                raise ValueError(f"Mode {k} does not match d = {freq.d}")
            if not any(k):
                table[k] = table.get(k, 0.0) + a
                continue
            minus = tuple(-i for i in k)
            table[k] = table.get(k, 0.0) + a / 2
            table[minus] = table.get(minus, 0.0) + a / 2
        return cls(
            freq=freq,
            modes=list(table.keys()),
            coeffs=list(table.values()),
            radius_r=radius_r,
        )

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    @property
    def max_mode(self) -> int:
        return int(np.abs(self.modes).max()) if self.modes.size else 0


def lattice_box(d: int, K: int) -> np.ndarray:
    """All integer vectors with max-norm at most K, shape (n, d)."""
    axis = np.arange(-K, K + 1)
    return np.array(list(itertools.product(axis, repeat=d)), dtype=np.int64)


def half_lattice_values(freq: FrequencyVector, K_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gap-label candidates ⟨k,ω⟩/2 ≥ 0 for |k| ≤ K_max, one sign per label."""
    ks = lattice_box(freq.d, K_max)
    values = ks @ freq.omega / 2
    keep = (values > 0) | np.all(ks == 0, axis=1)
    return ks[keep], values[keep]


def diophantine_margin(freq: FrequencyVector, K_max: int) -> float:
    if K_max < 1:
        raise ValueError("K_max must be at least 1")
    ks = lattice_box(freq.d, K_max)
    ks = ks[np.any(ks != 0, axis=1)]
    half = ks @ freq.omega / 2
    distance = np.abs(half - np.pi * np.round(half / np.pi))
    norms = np.abs(ks).max(axis=1).astype(float)
    return float(np.min(norms**freq.tau * distance))


def eval_on_torus(V: QuasiPeriodicPotential, theta: np.ndarray) -> np.ndarray:
    """V at torus points θ of shape (..., d)."""
    theta = np.asarray(theta, dtype=float)
    if V.coeffs.size == 0:
        return np.zeros(theta.shape[:-1])
    phases = np.exp(1j * (theta @ V.modes.T))
    return (phases @ V.coeffs).real


def eval_potential(V: QuasiPeriodicPotential, x):
    x = np.asarray(x, dtype=float)
    value = eval_on_torus(V, x[..., None] * V.freq.omega)
    return float(value) if value.ndim == 0 else value


def analytic_norm(V: QuasiPeriodicPotential) -> float:
    if V.coeffs.size == 0:
        return 0.0
    norms = np.abs(V.modes).max(axis=1)
    return float(np.sum(np.abs(V.coeffs) * np.exp(V.radius_r * norms)))
