"""Exception types shared across the package."""

from __future__ import annotations


class ModelFormatError(ValueError):
    """Malformed model or dataset byte stream. Carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ModelFormatError):
    """Stream declares a format version this build does not understand."""


class ValidationError(ValueError):
    """A network violates structural invariants. Carries the violation list."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class CapacityError(ValueError):
    """A caller-provided buffer is too small for the requested computation."""


class BudgetError(ValueError):
    """A network does not fit the configured memory budget."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite. Carries the epoch where it happened."""

    def __init__(self, epoch: int, detail: str = ""):
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)
        self.epoch = epoch


class TemplateError(ValueError):
    """Template instantiation failed (missing, duplicated or unknown slot)."""


class CodegenError(ValueError):
    """Code generation cannot proceed (bad options or unsupported model)."""
