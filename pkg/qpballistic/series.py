from typing import Optional, Sequence, Union

import numpy as np
from pydantic import model_validator
from scipy import fft

from qpballistic.components import Component, ComplexArray, IntArray
from qpballistic.potential import FrequencyVector

__all__ = [
    "FourierSeries",
    "half_angle_grid",
    "grid_frequencies",
    "grid_derivative",
]


def half_angle_grid(d: int, n: int) -> np.ndarray:
    """Uniform grid φ_j = 2πj/n on the d-torus, shape (n,)*d + (d,)."""
    axis = 2 * np.pi * np.arange(n) / n
    return np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1)


def grid_frequencies(freq: FrequencyVector, n: int) -> np.ndarray:
    """x-frequencies ⟨m,ω⟩/2 of every FFT bin on an n^d grid; Nyquist bins set to zero."""
    ints = np.rint(fft.fftfreq(n, 1.0 / n)).astype(np.int64)
    grids = np.meshgrid(*([ints] * freq.d), indexing="ij")
    nu = sum(g * w for g, w in zip(grids, freq.omega)) / 2
    nyquist = np.zeros(nu.shape, dtype=bool)
    for g in grids:
        nyquist |= g == -(n // 2)
    return np.where(nyquist, 0.0, nu)


def grid_derivative(values: np.ndarray, freq: FrequencyVector) -> np.ndarray:
    """Spectral derivative along the flow x ↦ ωx/2 of grid samples."""
    d = freq.d
    n = values.shape[0]
    axes = tuple(range(d))
    nu = grid_frequencies(freq, n).reshape((n,) * d + (1,) * (values.ndim - d))
    return fft.ifftn(1j * nu * fft.fftn(values, axes=axes), axes=axes)


class FourierSeries(Component):
    """Trigonometric series Σ c_m e^{i⟨m,φ⟩} on the half-frequency lattice.

    Along the line φ = ωx/2 each mode oscillates at ⟨m,ω⟩/2. Coefficients
    may be scalars or 2×2 matrices.
    """

    freq: FrequencyVector
    modes: IntArray
    coeffs: ComplexArray

    def __init__(
        self,
        *,
        freq: FrequencyVector,
        modes: Union[Sequence[Sequence[int]], np.ndarray],
        coeffs: Union[Sequence, np.ndarray],
    ):
        modes = np.asarray(modes, dtype=np.int64).reshape(-1, freq.d)
        super().__init__(freq=freq, modes=modes, coeffs=coeffs)

    @model_validator(mode="after")
    def _validate_values(self) -> "FourierSeries":
        if self.coeffs.ndim < 1 or self.coeffs.shape[0] != self.modes.shape[0]:
            raise ValueError("Every mode needs exactly one coefficient")
        return self

    @classmethod
    def constant(cls, freq: FrequencyVector, value) -> "FourierSeries":
        value = np.asarray(value, dtype=complex)
        return cls(freq=freq, modes=np.zeros((1, freq.d)), coeffs=value[None])

    @classmethod
    def identity(cls, freq: FrequencyVector) -> "FourierSeries":
        return cls.constant(freq, np.eye(2))

    @classmethod
    def from_grid(
        cls,
        values: np.ndarray,
        freq: FrequencyVector,
        n_trunc: int,
        prune: float = 1e-16,
    ) -> "FourierSeries":
        d = freq.d
        n = values.shape[0]
        spectrum = fft.fftn(values, axes=tuple(range(d))) / n**d
        ints = np.rint(fft.fftfreq(n, 1.0 / n)).astype(np.int64)
        index = np.stack(np.meshgrid(*([ints] * d), indexing="ij"), axis=-1).reshape(-1, d)
        spectrum = spectrum.reshape((n**d,) + values.shape[d:])
        size = np.abs(spectrum).reshape(n**d, -1).max(axis=1)
        reach = np.abs(index).max(axis=1)
        keep = (reach <= min(n_trunc, n // 2 - 1)) & (size > prune)
        order = np.lexsort(index[keep].T[::-1])
        return cls(freq=freq, modes=index[keep][order], coeffs=spectrum[keep][order])

    @property
    def value_shape(self):
        return self.coeffs.shape[1:]

    @property
    def max_mode(self) -> int:
        return int(np.abs(self.modes).max()) if self.modes.size else 0

    def to_grid(self, n: int) -> np.ndarray:
        d = self.freq.d
        if self.max_mode >= n // 2:
            raise ValueError(f"Grid of {n} points cannot hold mode {self.max_mode}")
        spectrum = np.zeros((n,) * d + self.value_shape, dtype=complex)
        np.add.at(spectrum, tuple((self.modes % n).T), self.coeffs)
        return fft.ifftn(spectrum, axes=tuple(range(d))) * n**d

    def at_half_angles(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        phases = np.exp(1j * (phi @ self.modes.T))
        return np.tensordot(phases, self.coeffs, axes=(-1, 0))

    def at_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.at_half_angles(x[..., None] * self.freq.omega / 2)

    def frequencies(self) -> np.ndarray:
        return self.modes @ self.freq.omega / 2

    def derivative(self) -> "FourierSeries":
        factor = (1j * self.frequencies()).reshape((-1,) + (1,) * len(self.value_shape))
        return FourierSeries(freq=self.freq, modes=self.modes, coeffs=self.coeffs * factor)

    def norm(self) -> float:
        if self.coeffs.size == 0:
            return 0.0
        return float(np.abs(self.coeffs).reshape(self.modes.shape[0], -1).max(axis=1).sum())

    def coefficient(self, m: Sequence[int]) -> np.ndarray:
        hit = np.all(self.modes == np.asarray(m), axis=1)
        if not np.any(hit):
            return np.zeros(self.value_shape, dtype=complex)
        return self.coeffs[np.argmax(hit)]

    def mean(self) -> np.ndarray:
        return self.coefficient(np.zeros(self.freq.d, dtype=np.int64))

    def entry(self, i: int, j: Optional[int] = None) -> "FourierSeries":
        coeffs = self.coeffs[:, i] if j is None else self.coeffs[:, i, j]
        return FourierSeries(freq=self.freq, modes=self.modes, coeffs=coeffs)

    def shifted(self, m: Sequence[int]) -> "FourierSeries":
        """Multiply by e^{-i⟨m,φ⟩}."""
        return FourierSeries(freq=self.freq, modes=self.modes - np.asarray(m), coeffs=self.coeffs)

    def conjugate(self) -> "FourierSeries":
        """The series whose values are the complex conjugates of this one's."""
        return FourierSeries(freq=self.freq, modes=-self.modes, coeffs=np.conj(self.coeffs))

    def scaled(self, factor: complex) -> "FourierSeries":
        return FourierSeries(freq=self.freq, modes=self.modes, coeffs=self.coeffs * factor)

    def __add__(self, other: "FourierSeries") -> "FourierSeries":
        modes = np.concatenate([self.modes, other.modes])
        coeffs = np.concatenate([self.coeffs, other.coeffs])
        unique, inverse = np.unique(modes, axis=0, return_inverse=True)
        summed = np.zeros((unique.shape[0],) + self.value_shape, dtype=complex)
        np.add.at(summed, inverse.reshape(-1), coeffs)
        return FourierSeries(freq=self.freq, modes=unique, coeffs=summed)

    def __sub__(self, other: "FourierSeries") -> "FourierSeries":
        return self + other.scaled(-1)
