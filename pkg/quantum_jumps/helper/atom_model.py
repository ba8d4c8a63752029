'''
Electronic structure of the Ca+ ion as far as the quantum-jump experiment needs it:
steady-state level populations under continuous 397/866 nm excitation, the
D3/2 - P3/2 absorption line, and the metastable D5/2 dark state.

Frequencies are detunings in MHz from the 850 nm line center.
'''
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np
from django.db import models
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from quantum_jumps.exceptions import DegenerateDynamicsError, InvalidInputError
from quantum_jumps.helper.rng import make_generator

logger = logging.getLogger(__name__)

LEVEL_LABELS: Tuple[str, ...] = ('S12', 'P12', 'D32', 'P32', 'D52')

# Relative singular-value threshold below which a direction counts as a null vector
SVD_RELATIVE_TOLERANCE = 1e-10
# Column sums of a rate matrix must vanish to this fraction of the largest entry
CONSERVATION_TOLERANCE = 1e-9
POPULATION_SUM_TOLERANCE = 1e-12

# Calibrated rates (1/s) of the shipped five-level model, keyed (source, destination).
# P1/2 and P3/2 decay with the natural widths 2π·22.4 MHz and 2π·25 MHz, split by
# their branching ratios. The 397 nm (S1/2 <-> P1/2) and 866 nm (D3/2 <-> P1/2) pump
# rates are not measured quantities: they are chosen so that the stationary D3/2
# population equals 0.60, the value quoted for the excitation conditions of the
# experiment. Absorption and stimulated emission share the same pump rate.
# With the 850 nm light off nothing populates P3/2 or D5/2, so both are transient
# and the closed S1/2, P1/2, D3/2 cycle carries all population.
CALIBRATED_TRANSITIONS: Dict[Tuple[str, str], float] = {
    ('S12', 'P12'): 2.0e7,
    ('P12', 'S12'): 1.32e8 + 2.0e7,
    ('P12', 'D32'): 9.0e6 + 7.563e5,
    ('D32', 'P12'): 7.563e5,
    ('P32', 'S12'): 1.4690e8,
    ('P32', 'D52'): 9.27e6,
    ('P32', 'D32'): 1.04e6,
    ('D52', 'S12'): 1.0 / 1.2,
}


class LineShape(models.TextChoices):
    LORENTZIAN = 'lorentzian'
    GAUSSIAN = 'gaussian'
    SAMPLED = 'sampled-grid'


@dataclass(frozen=True, eq=False)
class LevelSet:
    labels: Tuple[str, ...]
    populations: np.ndarray

    def __post_init__(self) -> None:
        populations = np.asarray(self.populations, dtype=float)
        if populations.shape != (len(self.labels),):
            raise InvalidInputError('One population per level label is required.', 'populations')
        if np.any(populations < 0.0) or np.any(populations > 1.0):
            raise InvalidInputError(f'Populations must lie in [0, 1], got {populations}.', 'populations')
        if abs(populations.sum() - 1.0) > POPULATION_SUM_TOLERANCE:
            raise InvalidInputError(f'Populations must sum to 1, got {populations.sum()!r}.', 'populations')
        populations.setflags(write=False)
        object.__setattr__(self, 'labels', tuple(self.labels))
        object.__setattr__(self, 'populations', populations)

    def __getitem__(self, label: str) -> float:
        return float(self.populations[self.labels.index(label)])

    def as_dict(self) -> Dict[str, float]:
        return {label: float(p) for label, p in zip(self.labels, self.populations)}


@dataclass(frozen=True, eq=False)
class RateMatrix:
    '''
    Generator of the level-population rate equations dP/dt = R P.

    Entry `rates[i, j]` (i != j) is the rate from level j into level i; the
    diagonal holds the negative total outflow of each level, so every column
    sums to zero.
    '''
    labels: Tuple[str, ...]
    rates: np.ndarray

    def __post_init__(self) -> None:
        rates = np.array(self.rates, dtype=float)
        n = len(self.labels)
        if rates.shape != (n, n):
            raise InvalidInputError(f'Rate matrix must be {n}x{n} to match its labels, got {rates.shape}.', 'rates')
        if not np.all(np.isfinite(rates)):
            raise InvalidInputError('Rate matrix entries must be finite.', 'rates')
        off_diagonal = rates[~np.eye(n, dtype=bool)]
        if np.any(off_diagonal < 0.0):
            raise InvalidInputError('Off-diagonal transition rates must be non-negative.', 'rates')
        scale = np.max(np.abs(rates)) if rates.size else 0.0
        column_sums = rates.sum(axis=0)
        if np.any(np.abs(column_sums) > CONSERVATION_TOLERANCE * max(scale, 1e-300)):
            raise InvalidInputError(f'Columns of the rate matrix must sum to zero (probability conservation), '
                                    f'got column sums {column_sums}.', 'rates')
        rates.setflags(write=False)
        object.__setattr__(self, 'labels', tuple(self.labels))
        object.__setattr__(self, 'rates', rates)

    @classmethod
    def from_rates(cls, labels: Sequence[str], transitions: Mapping[Tuple[str, str], float]) -> 'RateMatrix':
        '''
        Build a rate matrix from `{(source, destination): rate}`; the diagonal is
        filled in so that probability is conserved.
        '''
        labels = tuple(labels)
        rates = np.zeros((len(labels), len(labels)))
        for (source, destination), rate in transitions.items():
            if source == destination:
                raise InvalidInputError(f'Self-transition {source} -> {destination} is not allowed.', 'rates')
            try:
                j = labels.index(source)
                i = labels.index(destination)
            except ValueError:
                raise InvalidInputError(f'Transition {source} -> {destination} names an unknown level.', 'rates')
            if rate < 0:
                raise InvalidInputError(f'Rate {source} -> {destination} is negative ({rate}).', 'rates')
            rates[i, j] += rate
        rates[np.diag_indices(len(labels))] = -rates.sum(axis=0)
        return cls(labels, rates)

    def scaled(self, factor: float) -> 'RateMatrix':
        if factor <= 0:
            raise InvalidInputError('Scale factor must be positive.', 'factor')
        return RateMatrix(self.labels, self.rates * factor)


def default_rate_matrix() -> RateMatrix:
    '''The shipped calibration, which reproduces a D3/2 population of 0.60.'''
    return RateMatrix.from_rates(LEVEL_LABELS, CALIBRATED_TRANSITIONS)


def load_rate_matrix(path: str) -> RateMatrix:
    '''
    Read a rate matrix from a CSV file. The header row lists the level labels
    (first cell ignored); each following row starts with the destination label
    followed by the rates from every source level.

    Example:
        ,S12,P12
        S12,-5,3
        P12,5,-3
    '''
    with open(path, newline='') as handle:
        rows = [row for row in csv.reader(handle) if len(row) > 0 and not row[0].startswith('#')]
    if len(rows) < 2:
        raise InvalidInputError(f'Rate matrix file {path} holds no matrix.', 'rate_matrix_file')
    labels = tuple(cell.strip() for cell in rows[0][1:])
    body = rows[1:]
    if tuple(row[0].strip() for row in body) != labels:
        raise InvalidInputError(f'Row labels of {path} must repeat the header labels in order.', 'rate_matrix_file')
    try:
        rates = np.array([[float(cell) for cell in row[1:]] for row in body])
    except ValueError as exc:
        raise InvalidInputError(f'Rate matrix file {path} contains a non-numeric entry.', 'rate_matrix_file') from exc
    return RateMatrix(labels, rates)


def coupled_levels(rates: RateMatrix) -> np.ndarray:
    '''Boolean mask of the levels that take part in at least one nonzero transition.'''
    off_diagonal = rates.rates * (1.0 - np.eye(len(rates.labels)))
    return (off_diagonal.sum(axis=0) > 0.0) | (off_diagonal.sum(axis=1) > 0.0)


def recurrent_levels(rates: RateMatrix) -> np.ndarray:
    '''
    Boolean mask of the levels in the closed communicating class of the coupled
    levels. Levels outside it are transient and carry no stationary population.

    Raises DegenerateDynamicsError if the coupled levels hold more than one
    closed class, since each would carry its own stationary state.
    '''
    mask = coupled_levels(rates)
    if not np.any(mask):
        raise DegenerateDynamicsError('Rate matrix has no nonzero transitions.')
    # edges[j, i] is True when level j feeds level i
    edges = (rates.rates.T > 0.0) & ~np.eye(len(rates.labels), dtype=bool)
    edges = edges[np.ix_(mask, mask)]
    n_components, component = connected_components(csr_matrix(edges), directed=True, connection='strong')

    closed = []
    for c in range(n_components):
        members = component == c
        if not np.any(edges[np.ix_(members, ~members)]):
            closed.append(members)
    if len(closed) != 1:
        raise DegenerateDynamicsError(f'Coupled levels form {len(closed)} closed classes; '
                                      f'the stationary state is not unique.')

    recurrent = np.zeros(len(rates.labels), dtype=bool)
    recurrent[np.nonzero(mask)[0][closed[0]]] = True
    return recurrent


def steady_state_populations(rates: RateMatrix) -> LevelSet:
    '''
    Return the stationary distribution of the rate equations: the null vector of
    the rate matrix normalised to unit sum. Uncoupled and transient levels get
    zero population; the null vector is taken from the SVD of the recurrent
    block, which keeps slow transient decays (e.g. D5/2 at ~1/s next to
    optical rates of ~1e8/s) from polluting it with round-off.

    Raises DegenerateDynamicsError if the recurrent block does not have exactly
    one singular value below 1e-10 of the largest.
    '''
    recurrent = recurrent_levels(rates)
    populations = np.zeros(len(rates.labels))
    if np.count_nonzero(recurrent) == 1:
        populations[recurrent] = 1.0
        return LevelSet(rates.labels, populations)

    sub = rates.rates[np.ix_(recurrent, recurrent)]
    _, singular_values, vh = np.linalg.svd(sub)
    null_directions = singular_values <= SVD_RELATIVE_TOLERANCE * singular_values[0]
    if np.count_nonzero(null_directions) != 1:
        raise DegenerateDynamicsError(
            f'Expected exactly one stationary state, found {np.count_nonzero(null_directions)} '
            f'null directions among the coupled levels.', singular_values)

    stationary = vh[null_directions][0]
    stationary = stationary / stationary.sum()
    stationary[np.abs(stationary) < POPULATION_SUM_TOLERANCE] = 0.0
    if np.any(stationary < 0.0):
        raise DegenerateDynamicsError('Null vector of the rate matrix has mixed signs.', singular_values)
    stationary = stationary / stationary.sum()
    populations[recurrent] = stationary
    logger.debug('Stationary populations %s', dict(zip(rates.labels, populations)))
    return LevelSet(rates.labels, populations)


@dataclass(frozen=True, eq=False)
class LineProfile:
    '''
    A spectral response. Analytic shapes are evaluated from (center, fwhm, peak);
    sampled-grid profiles carry their own grid (MHz) and values and are linearly
    interpolated, zero outside the grid.
    '''
    center: float
    fwhm: float
    peak: float = 1.0
    shape: str = LineShape.LORENTZIAN
    grid: Optional[np.ndarray] = field(default=None, repr=False)
    values: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.fwhm > 0:
            raise InvalidInputError(f'FWHM must be positive, got {self.fwhm}.', 'fwhm')
        if self.peak < 0:
            raise InvalidInputError(f'Peak must be non-negative, got {self.peak}.', 'peak')
        if self.shape not in LineShape.values:
            raise InvalidInputError(f'Unknown line shape {self.shape!r}.', 'shape')
        if self.shape == LineShape.SAMPLED:
            if self.grid is None or self.values is None:
                raise InvalidInputError('Sampled-grid profiles need a grid and values.', 'grid')
            grid = np.array(self.grid, dtype=float)
            values = np.array(self.values, dtype=float)
            if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
                raise InvalidInputError('Grid and values must be 1-D arrays of equal length >= 2.', 'grid')
            if np.any(np.diff(grid) <= 0):
                raise InvalidInputError('Grid must be strictly increasing.', 'grid')
            if np.any(values < 0):
                raise InvalidInputError('Sampled-grid profiles must be non-negative.', 'values')
            grid.setflags(write=False)
            values.setflags(write=False)
            object.__setattr__(self, 'grid', grid)
            object.__setattr__(self, 'values', values)

    @classmethod
    def lorentzian(cls, center: float, fwhm: float, peak: float = 1.0) -> 'LineProfile':
        return cls(center=center, fwhm=fwhm, peak=peak, shape=LineShape.LORENTZIAN)

    @classmethod
    def gaussian(cls, center: float, fwhm: float, peak: float = 1.0) -> 'LineProfile':
        return cls(center=center, fwhm=fwhm, peak=peak, shape=LineShape.GAUSSIAN)

    @classmethod
    def sampled(cls, grid: np.ndarray, values: np.ndarray) -> 'LineProfile':
        '''Wrap sampled values; center, peak and FWHM are measured from the samples.'''
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        index = int(np.argmax(values))
        fwhm = measure_fwhm(grid, values)
        return cls(center=float(grid[index]), fwhm=fwhm, peak=float(values[index]),
                   shape=LineShape.SAMPLED, grid=grid, values=values)

    @property
    def sigma(self) -> float:
        '''Standard deviation of the equivalent Gaussian.'''
        return self.fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))

    @property
    def grid_step(self) -> Optional[float]:
        if self.grid is None:
            return None
        return float(np.min(np.diff(self.grid)))

    def evaluate(self, detuning) -> np.ndarray:
        x = np.asarray(detuning, dtype=float)
        if self.shape == LineShape.LORENTZIAN:
            u = 2.0 * (x - self.center) / self.fwhm
            return self.peak / (1.0 + u * u)
        elif self.shape == LineShape.GAUSSIAN:
            u = (x - self.center) / self.fwhm
            return self.peak * np.exp(-4.0 * np.log(2.0) * u * u)
        else:
            return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def recentered(self, center: float) -> 'LineProfile':
        if self.shape == LineShape.SAMPLED:
            shift = center - self.center
            return LineProfile(center=center, fwhm=self.fwhm, peak=self.peak, shape=self.shape,
                               grid=self.grid + shift, values=self.values)
        return LineProfile(center=center, fwhm=self.fwhm, peak=self.peak, shape=self.shape)


def measure_fwhm(grid: np.ndarray, values: np.ndarray) -> float:
    '''
    Full width at half maximum of sampled values around their global maximum,
    using linear interpolation between the samples that bracket each crossing.
    '''
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    index = int(np.argmax(values))
    half = values[index] / 2.0
    if not half > 0:
        raise InvalidInputError('Cannot measure the FWHM of an all-zero profile.', 'values')

    below_left = np.nonzero(values[:index] < half)[0]
    below_right = np.nonzero(values[index:] < half)[0]
    if below_left.size == 0 or below_right.size == 0:
        raise InvalidInputError('Profile does not fall to half maximum within its grid.', 'grid')

    i = below_left[-1]
    left = np.interp(half, [values[i], values[i + 1]], [grid[i], grid[i + 1]])
    j = index + below_right[0]
    right = np.interp(half, [values[j], values[j - 1]], [grid[j], grid[j - 1]])
    return float(right - left)


def absorption_profile(natural_fwhm: float, zeeman_broadening: float) -> LineProfile:
    '''
    The spectroscopic D3/2 - P3/2 line as one effective Lorentzian centered on
    the line, of width natural_fwhm + zeeman_broadening and unit peak.

    Examples:
        - (25, 11) => Lorentzian of FWHM 36 MHz
        - (25, 0) => Lorentzian of FWHM 25 MHz
    '''
    if not natural_fwhm > 0:
        raise InvalidInputError(f'Natural linewidth must be positive, got {natural_fwhm}.', 'natural_fwhm')
    if zeeman_broadening < 0:
        raise InvalidInputError(f'Zeeman broadening must be non-negative, got {zeeman_broadening}.',
                                'zeeman_broadening')
    return LineProfile.lorentzian(center=0.0, fwhm=natural_fwhm + zeeman_broadening, peak=1.0)


@dataclass(frozen=True)
class DarkStateParams:
    mean_dwell: float = 1.2

    def __post_init__(self) -> None:
        if not self.mean_dwell > 0:
            raise InvalidInputError(f'Mean dark dwell must be positive, got {self.mean_dwell}.', 'mean_dwell')

    @property
    def return_rate(self) -> float:
        return 1.0 / self.mean_dwell


class DarkDwellSampler:
    '''
    Stream of D5/2 residence times (s), exponentially distributed with the
    configured mean. Owns its generator: do not share an instance between
    threads, seed one sampler per worker instead.
    '''

    def __init__(self, params: DarkStateParams, seed: int) -> None:
        self.params = params
        self.seed = seed
        self._rng = make_generator(seed)

    def __iter__(self) -> Iterator[float]:
        return self

    def __next__(self) -> float:
        return float(self._rng.exponential(self.params.mean_dwell))

    def sample(self, n: int) -> np.ndarray:
        if n < 0:
            raise InvalidInputError('Sample size must be non-negative.', 'n')
        return self._rng.exponential(self.params.mean_dwell, size=n)


def dark_dwell_sampler(params: DarkStateParams, seed: int) -> DarkDwellSampler:
    return DarkDwellSampler(params, seed)
