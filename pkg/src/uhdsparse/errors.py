"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 2, data and
file-format problems exit 3, numeric runtime failures exit 4.
"""


class UhdError(Exception):
    """Base class for all package-specific errors."""


class FormatError(UhdError):
    """A binary file does not carry the expected magic bytes or version."""


class CorruptFileError(UhdError):
    """A binary file is structurally damaged (truncated, bad checksum)."""


class DataError(UhdError):
    """Input data violates a documented contract (bad TSV, duplicate ids,
    nonfinite values, mismatched shapes between artifacts)."""


class EmptyTextError(DataError):
    """A text produced no tokens after normalization."""


class TrainingDivergedError(UhdError):
    """The training loss became nonfinite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss={value!r}")
        self.step = step
        self.value = value


class NoForwardStateError(UhdError):
    """A backward pass was requested without a recorded forward pass."""
