"""Exception types shared across the lab."""

from __future__ import annotations


class OpdGeoError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(OpdGeoError, ValueError):
    """Invalid or unknown configuration entry."""


class NumericalError(OpdGeoError, ArithmeticError):
    """A numerical routine failed or a precondition on values does not hold."""


class ShapeMismatchError(OpdGeoError, ValueError):
    """Operands have incompatible shapes."""


class ArchitectureMismatchError(OpdGeoError, ValueError):
    """Two parameter sets do not describe the same architecture."""

    def __init__(self, message: str, divergent: list[str]) -> None:
        super().__init__(f"{message}: {', '.join(divergent)}")
        self.divergent = divergent


class MissingCheckpointError(OpdGeoError, KeyError):
    """A required checkpoint step is not present in a run."""

    def __init__(self, steps: list[int], where: str) -> None:
        super().__init__(f"missing checkpoint step(s) {steps} in {where}")
        self.steps = steps

    def __str__(self) -> str:
        return str(self.args[0])


class TeacherConvergenceError(NumericalError):
    """Supervised teacher training stopped below the accuracy target."""

    def __init__(self, accuracy: float, target: float, steps: int) -> None:
        super().__init__(
            f"teacher reached accuracy {accuracy:.4f} < {target:.2f} after {steps} steps"
        )
        self.accuracy = accuracy


class DivergenceError(NumericalError):
    """Training produced a non-finite loss or parameters."""

    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class StoreError(OpdGeoError):
    """A run directory or tensor archive cannot be written or read back."""
