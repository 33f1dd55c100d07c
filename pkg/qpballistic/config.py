import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import ConfigDict, Field, ValidationError, field_validator, model_validator

from qpballistic.components import Component
from qpballistic.enums import FunctionKind
from qpballistic.potential import FrequencyVector, QuasiPeriodicPotential, analytic_norm
from qpballistic.reduce import KamSchedule
from qpballistic.validators import validate_power_of_two, validator

__all__ = [
    "ConfigError",
    "ModeSpec",
    "PotentialSpec",
    "GridSpec",
    "PacketSpec",
    "EnergyGridSpec",
    "RotationSpec",
    "ScheduleSpec",
    "TransformSpec",
    "IntegralsSpec",
    "RunConfig",
    "load_config",
    "config_hash",
]

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    def __init__(self, messages: List[str]):
        self.messages = messages
        super().__init__("\n".join(messages))


class Spec(Component):
    model_config = ConfigDict(extra="forbid")


class ModeSpec(Spec):
    k: List[int] = Field(..., min_length=1)
    amplitude: float


class PotentialSpec(Spec):
    """Real potential Σ a_k cos⟨k,θ⟩ at frequency ω (golden by default)."""

    d: int = Field(2, ge=1)
    omega: Optional[List[float]] = None
    gamma: float = Field(1e-2, gt=0)
    tau: Optional[float] = None
    radius_r: float = Field(0.5, gt=0, le=1)
    cosines: List[ModeSpec] = []

    @model_validator(mode="after")
    def _validate_values(self) -> "PotentialSpec":
        d = len(self.omega) if self.omega is not None else self.d
        for mode in self.cosines:
            if len(mode.k) != d:
                raise ValueError(f"Mode {mode.k} does not match d = {d}")
        return self

    def frequency(self) -> FrequencyVector:
        if self.omega is None:
            return FrequencyVector.golden(self.d, gamma=self.gamma, tau=self.tau)
        return FrequencyVector(omega=self.omega, gamma=self.gamma, tau=self.tau)

    def to_potential(self) -> QuasiPeriodicPotential:
        amplitudes: Dict[tuple, float] = {}
        for mode in self.cosines:
            amplitudes[tuple(mode.k)] = amplitudes.get(tuple(mode.k), 0.0) + mode.amplitude
        return QuasiPeriodicPotential.from_cosines(self.frequency(), amplitudes, self.radius_r)


class GridSpec(Spec):
    half_length: float = Field(400.0, gt=0)
    n_points: int = 8192
    dt: float = Field(0.005, gt=0)
    T: float = Field(40.0, ge=0)
    sample_stride: int = Field(20, ge=1)

    _validate_n_points = validator("n_points", validate_power_of_two, minimum=16)


class PacketSpec(Spec):
    x0: float = 0.0
    width: float = Field(2.0, gt=0)
    momentum: float = 2.0


class EnergyGridSpec(Spec):
    e_min: float = 0.1
    e_max: float = 25.0
    spacing: float = Field(1e-2, gt=0)
    uniform_in: Literal["energy", "rho"] = "energy"
    refinement: Optional[float] = Field(1e-3, gt=0)
    refine_width: float = Field(0.05, gt=0)

    @model_validator(mode="after")
    def _validate_values(self) -> "EnergyGridSpec":
        if self.e_max <= self.e_min:
            raise ValueError("e_max must exceed e_min")
        if self.uniform_in == "rho" and self.e_min < 0:
            raise ValueError("A rho-uniform grid needs e_min >= 0")
        return self

    def energies(self, edges: Sequence[float] = ()) -> np.ndarray:
        if self.uniform_in == "rho":
            lo, hi = np.sqrt(self.e_min), np.sqrt(self.e_max)
            count = int(np.floor((hi - lo) / self.spacing + 1e-9)) + 1
            grid = (lo + self.spacing * np.arange(count)) ** 2
            grid = grid[grid > 0]
        else:
            count = int(np.floor((self.e_max - self.e_min) / self.spacing + 1e-9)) + 1
            grid = self.e_min + self.spacing * np.arange(count)
        if self.refinement and len(edges):
            fine = [
                np.arange(e - self.refine_width, e + self.refine_width, self.refinement)
                for e in edges
            ]
            grid = np.concatenate([grid] + fine)
            grid = grid[(grid >= self.e_min) & (grid <= self.e_max)]
        return np.unique(np.round(grid, 12))


class RotationSpec(Spec):
    T: float = Field(500.0, gt=0)
    h: float = Field(0.02, gt=0)
    K_max: int = Field(3, ge=1)
    chunk_size: int = Field(64, ge=1)
    flat_threshold: float = Field(0.02, gt=0)
    lyapunov_tol: float = Field(1e-2, gt=0)
    label_tol: float = Field(1e-3, gt=0)


class ScheduleSpec(Spec):
    sigma: float = Field(1 / 50, gt=0, lt=1)
    max_steps: int = Field(8, ge=1)
    divisor_floor: float = Field(1e-6, gt=0)
    resonance_sigma: float = Field(0.5, gt=0)
    residual_target: float = Field(1e-10, gt=0)
    grid_size: int = 64
    n_theta: int = Field(256, ge=1)

    _validate_grid_size = validator("grid_size", validate_power_of_two, minimum=16)

    def to_schedule(self, V: QuasiPeriodicPotential) -> KamSchedule:
        # the free operator needs no steps; any admissible eps0 will do
        eps0 = analytic_norm(V) or 0.5
        if eps0 >= 1:
            raise ConfigError([f"Potential norm {eps0:.3g} is too large for the reduction"])
        return KamSchedule(eps0=eps0, **self.model_dump())


class TransformSpec(Spec):
    cutoff_rho_c: Optional[float] = Field(None, gt=0)
    smoothing: bool = False
    max_spacing: float = Field(0.05, gt=0)
    diagonalization_time: float = Field(10.0, ge=0)


class IntegralsSpec(Spec):
    Ms: List[float] = Field(
        default_factory=lambda: np.geomspace(2, 200, 25).tolist(), min_length=2
    )
    f_kinds: List[FunctionKind] = list(FunctionKind)
    powers: List[Literal[0, 2, 4]] = [0, 2, 4]
    x_offset: float = 0.3
    y_offset: float = 1.7
    edge_taper: float = Field(0.1, ge=0)

    @field_validator("Ms")
    @classmethod
    def _validate_Ms(cls, v: List[float]) -> List[float]:
        rejected = [M for M in v if abs(M) <= 1]
        if rejected:
            raise ValueError(f"Frequencies must satisfy |M| > 1, got {rejected}")
        return v


class RunConfig(Spec):
    potential: Optional[PotentialSpec] = None
    potential_file: Optional[str] = None
    grid: GridSpec = GridSpec()
    packet: PacketSpec = PacketSpec()
    energies: EnergyGridSpec = EnergyGridSpec()
    rotation: RotationSpec = RotationSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    transform: TransformSpec = TransformSpec()
    integrals: IntegralsSpec = IntegralsSpec()
    output_dir: str = "out"
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _validate_values(self) -> "RunConfig":
        if (self.potential is None) == (self.potential_file is None):
            raise ValueError("Give exactly one of potential or potential_file")
        return self


def _line_of(text: str, key: Union[str, int, None]) -> int:
    if isinstance(key, str):
        needle = f'"{key}"'
        for number, line in enumerate(text.splitlines(), start=1):
            if needle in line:
                return number
    return 1


def _anchor(text: str, error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        keys = [k for k in item["loc"] if isinstance(k, str)]
        where = ".".join(str(k) for k in item["loc"]) or "<root>"
        line = _line_of(text, keys[-1] if keys else None)
        messages.append(f"line {line}: {where}: {item['msg']}")
    return messages


def _parse(text: str, model, source: str):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"{source}: line {e.lineno}: {e.msg}"])
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError([f"{source}: {m}" for m in _anchor(text, e)])


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    config = _parse(text, RunConfig, path.name)
    if config.potential_file is not None:
        target = (path.parent / config.potential_file).resolve()
        if not target.is_file():
            line = _line_of(text, "potential_file")
            raise ConfigError(
                [f"{path.name}: line {line}: potential_file: {config.potential_file} does not exist"]
            )
        potential = _parse(target.read_text(encoding="utf-8"), PotentialSpec, target.name)
        config = config.model_copy(update={"potential": potential})
    logger.debug("Loaded config %s", path)
    return config


def config_hash(config: RunConfig, seed: Optional[int] = None) -> str:
    payload = json.dumps(config.build(), sort_keys=True)
    seed = config.seed if seed is None else seed
    return hashlib.sha256(f"{payload}|{seed}".encode()).hexdigest()
