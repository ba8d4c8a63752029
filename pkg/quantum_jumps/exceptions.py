from typing import Optional, Sequence


class QuantumJumpError(Exception):
    """Base class for every error raised by the quantum_jumps app."""


class InvalidInputError(QuantumJumpError):
    """Raised when an argument violates the precondition of an operation."""
    field: str = ''

    def __init__(self, message: str, field: str = '', *args: object) -> None:
        super().__init__(message, *args)
        self.field = field


class InvalidThresholdError(InvalidInputError):
    """Raised if a jump-detection threshold does not separate the dark and bright count means."""
    threshold: float
    dark_mean: float
    bright_mean: float

    def __init__(self, threshold: float, dark_mean: float, bright_mean: float, *args: object) -> None:
        super().__init__(f'Threshold {threshold} counts/bin must lie strictly between the dark mean '
                         f'{dark_mean:.6g} and the bright mean {bright_mean:.6g} counts/bin.', 'threshold', *args)
        self.threshold = threshold
        self.dark_mean = dark_mean
        self.bright_mean = bright_mean


class DegenerateDynamicsError(QuantumJumpError):
    """Raised if a rate matrix has no unique stationary state."""
    singular_values: Sequence[float] = ()

    def __init__(self, message: str, singular_values: Sequence[float] = (), *args: object) -> None:
        super().__init__(message, *args)
        self.singular_values = tuple(singular_values)


class ResolutionError(QuantumJumpError):
    """Raised if a numeric grid resolves a profile with fewer points per FWHM than required."""
    points_per_fwhm: float
    required: float

    def __init__(self, points_per_fwhm: float, required: float, *args: object) -> None:
        super().__init__(f'Grid resolves the narrower profile with {points_per_fwhm:.1f} points per FWHM; '
                         f'at least {required:.0f} are required.', *args)
        self.points_per_fwhm = points_per_fwhm
        self.required = required


class InsufficientDataError(QuantumJumpError):
    """Raised if an estimator receives fewer samples than it needs."""
    required: int
    available: int

    def __init__(self, required: int, available: int, what: str = 'samples', *args: object) -> None:
        super().__init__(f'At least {required} {what} are required, only {available} available.', *args)
        self.required = required
        self.available = available


class FlatDataError(QuantumJumpError):
    """Raised if a line-shape fit receives data without any structure."""


class ConfigValidationError(QuantumJumpError):
    """Raised if an experiment config file fails validation. Names the offending section and key."""
    section: str
    key: Optional[str]

    def __init__(self, section: str, key: Optional[str], message: str, *args: object) -> None:
        location = f'[{section}]' if key is None else f'[{section}] {key}'
        super().__init__(f'{location}: {message}', *args)
        self.section = section
        self.key = key


class TraceFormatError(QuantumJumpError):
    """Raised if a trace, scan or meta file cannot be parsed."""
    path: str
    line_number: int

    def __init__(self, path: str, line_number: int, message: str, *args: object) -> None:
        super().__init__(f'{path}:{line_number}: {message}', *args)
        self.path = path
        self.line_number = line_number
