from enum import Enum, IntEnum

__all__ = [
    "Classification",
    "ReductionStatus",
    "MeasureKind",
    "FunctionKind",
    "Branch",
    "StageStatus",
    "ExitCode",
]


class Classification(str, Enum):
    spectrum = "spectrum"
    gap = "gap"
    uncertain = "uncertain"


class ReductionStatus(str, Enum):
    converged = "converged"
    resonant_skipped = "resonant_skipped"
    diverged = "diverged"


class MeasureKind(str, Enum):
    dphi = "dphi"
    dphi_hat = "dphi_hat"
    dphi_tilde = "dphi_tilde"


class FunctionKind(str, Enum):
    beta00 = "beta00"
    beta11 = "beta11"
    const_one = "const_one"


class Branch(str, Enum):
    both = "both"
    low = "low"
    high = "high"


class StageStatus(str, Enum):
    complete = "complete"
    flagged = "flagged"
    failed = "failed"
    skipped = "skipped"


class ExitCode(IntEnum):
    ok = 0
    validation = 2
    numerical = 3
    io = 4
