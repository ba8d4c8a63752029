'''
Monte Carlo fluorescence traces of a single ion undergoing quantum jumps.

The ion is a two-state telegraph process: bright (fluorescing) and dark
(shelved in D5/2). Dwell times are drawn exactly, so switching times are
continuous; photon counts per time bin are then Poissonian with a mean that
integrates the count rate of each state over its occupancy of the bin.
'''
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from django.db import models

from quantum_jumps.exceptions import InvalidInputError
from quantum_jumps.helper.rng import make_generator

logger = logging.getLogger(__name__)

# Dwells drawn per generator call; even, so a block ends in the state it started in
DWELL_BLOCK = 1024
# Tolerance when deciding how many whole bins fit into a duration
BIN_COUNT_SLACK = 1e-9


class FluorescenceState(models.TextChoices):
    BRIGHT = 'bright'
    DARK = 'dark'


class TransitionDirection(models.TextChoices):
    BRIGHT_TO_DARK = 'bright_to_dark'
    DARK_TO_BRIGHT = 'dark_to_bright'


def leaving(state: str) -> str:
    '''Direction of the transition that leaves `state`.'''
    if state == FluorescenceState.BRIGHT:
        return TransitionDirection.BRIGHT_TO_DARK
    return TransitionDirection.DARK_TO_BRIGHT


def other_state(state: str) -> str:
    if state == FluorescenceState.BRIGHT:
        return FluorescenceState.DARK
    return FluorescenceState.BRIGHT


def reverse(direction: str) -> str:
    if direction == TransitionDirection.BRIGHT_TO_DARK:
        return TransitionDirection.DARK_TO_BRIGHT
    return TransitionDirection.BRIGHT_TO_DARK


@dataclass(frozen=True)
class TelegraphParams:
    '''
    Rates (1/s) of the fluorescence telegraph process. `bright_to_dark_rate`
    is the total shelving rate, SPDC-induced pumping plus background jumps.
    '''
    bright_to_dark_rate: float
    dark_to_bright_rate: float = 1.0 / 1.2
    bright_count_rate: float = 50000.0
    dark_count_rate: float = 500.0

    def __post_init__(self) -> None:
        for name in ('bright_to_dark_rate', 'dark_to_bright_rate', 'bright_count_rate', 'dark_count_rate'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f'{name} must be finite and non-negative, got {value}.', name)
        if not self.dark_to_bright_rate > 0:
            raise InvalidInputError('dark_to_bright_rate must be positive: the dark state always decays.',
                                    'dark_to_bright_rate')
        if not self.bright_count_rate > self.dark_count_rate:
            raise InvalidInputError('bright_count_rate must exceed dark_count_rate.', 'bright_count_rate')

    @classmethod
    def from_jump_rates(cls, pump_rate: float, background_jump_rate_per_min: float, mean_dark_dwell: float,
                        bright_count_rate: float, dark_count_rate: float) -> 'TelegraphParams':
        '''Combine an SPDC pump rate (1/s) with background jumps (1/min) into one shelving rate.'''
        return cls(bright_to_dark_rate=pump_rate + background_jump_rate_per_min / 60.0,
                   dark_to_bright_rate=1.0 / mean_dark_dwell,
                   bright_count_rate=bright_count_rate,
                   dark_count_rate=dark_count_rate)

    def leave_rate(self, state: str) -> float:
        if state == FluorescenceState.BRIGHT:
            return self.bright_to_dark_rate
        return self.dark_to_bright_rate

    def count_rate(self, state: str) -> float:
        if state == FluorescenceState.BRIGHT:
            return self.bright_count_rate
        return self.dark_count_rate


@dataclass(frozen=True, eq=False)
class CountTrace:
    bin_width: float
    counts: np.ndarray
    start_state: str
    seed: int
    true_jumps: Tuple[Tuple[float, str], ...]
    params: TelegraphParams
    stream: Tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)
        if not self.bin_width > 0:
            raise InvalidInputError('Bin width must be positive.', 'bin_width')
        if counts.ndim != 1 or np.any(counts < 0):
            raise InvalidInputError('Counts must be a 1-D array of non-negative integers.', 'counts')
        if self.start_state not in FluorescenceState.values:
            raise InvalidInputError(f'Unknown start state {self.start_state!r}.', 'start_state')
        jumps = tuple((float(t), str(d)) for t, d in self.true_jumps)
        expected = leaving(self.start_state)
        last_time = -np.inf
        for time, direction in jumps:
            if not time > last_time:
                raise InvalidInputError('True jump times must be strictly increasing.', 'true_jumps')
            if direction != expected:
                raise InvalidInputError('True jumps must alternate in direction.', 'true_jumps')
            last_time = time
            expected = reverse(direction)
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, 'true_jumps', jumps)
        object.__setattr__(self, 'stream', tuple(int(i) for i in self.stream))

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def duration(self) -> float:
        return self.n_bins * self.bin_width

    @property
    def true_cycle_count(self) -> int:
        '''Number of shelving events, i.e. on-off jump pairs started inside the trace.'''
        return sum(1 for _, d in self.true_jumps if d == TransitionDirection.BRIGHT_TO_DARK)

    @property
    def true_transition_count(self) -> int:
        return len(self.true_jumps)

    def dark_occupancy(self) -> float:
        '''Fraction of the trace spent dark, from the true switching times.'''
        knots = np.concatenate(([0.0], [t for t, _ in self.true_jumps], [self.duration]))
        durations = np.diff(knots)
        dark_first = self.start_state == FluorescenceState.DARK
        dark_segments = durations[0 if dark_first else 1::2]
        return float(dark_segments.sum() / self.duration)

    def complete_dark_dwells(self) -> np.ndarray:
        '''Durations of dark periods that start and end inside the trace.'''
        dwells: List[float] = []
        entered = None
        for time, direction in self.true_jumps:
            if direction == TransitionDirection.BRIGHT_TO_DARK:
                entered = time
            elif entered is not None:
                dwells.append(time - entered)
                entered = None
        return np.array(dwells)


def switching_times(rng: np.random.Generator, p: TelegraphParams, start_state: str, span: float) -> np.ndarray:
    '''Exact switching times in [0, span) of the telegraph process started in `start_state`.'''
    first_rate = p.leave_rate(start_state)
    second_rate = p.leave_rate(other_state(start_state))
    if first_rate == 0:
        return np.empty(0)
    if second_rate == 0:
        # One switch into a state that is never left
        dwell = rng.standard_exponential() / first_rate
        return np.array([dwell]) if dwell < span else np.empty(0)

    scales = np.empty(DWELL_BLOCK)
    scales[0::2] = 1.0 / first_rate
    scales[1::2] = 1.0 / second_rate
    blocks: List[np.ndarray] = []
    t = 0.0
    while t < span:
        times = t + np.cumsum(rng.standard_exponential(DWELL_BLOCK) * scales)
        blocks.append(times[times < span])
        t = times[-1]
    return np.concatenate(blocks)


def bin_means(p: TelegraphParams, jump_times: Sequence[float], start_state: str, n_bins: int,
              bin_width: float) -> np.ndarray:
    '''
    Expected counts per bin: each state's count rate times the time it occupies
    the bin. A bin switching at fraction φ from bright to dark gets
    φ·r_bright·Δ + (1 - φ)·r_dark·Δ.
    '''
    span = n_bins * bin_width
    knots = np.concatenate(([0.0], np.asarray(jump_times, dtype=float), [span]))
    durations = np.diff(knots)
    bright = np.zeros(durations.size)
    bright[0 if start_state == FluorescenceState.BRIGHT else 1::2] = 1.0
    cumulative_bright = np.concatenate(([0.0], np.cumsum(durations * bright)))
    edges = bin_width * np.arange(n_bins + 1)
    bright_time = np.diff(np.interp(edges, knots, cumulative_bright))
    bright_time = np.clip(bright_time, 0.0, bin_width)
    return p.bright_count_rate * bright_time + p.dark_count_rate * (bin_width - bright_time)


def simulate_trace(p: TelegraphParams, duration: float, bin_width: float, seed: int,
                   start_state: str = FluorescenceState.BRIGHT, stream: Sequence[int] = ()) -> CountTrace:
    '''
    Simulate a binned fluorescence trace of `duration` seconds. The trace
    holds floor(duration / bin_width) whole bins. The generator is the stream
    `(seed, *stream)`, so a trial of a batch can be re-run on its own.
    '''
    if not bin_width > 0:
        raise InvalidInputError('Bin width must be positive.', 'bin_width_s')
    if not np.isfinite(duration):
        raise InvalidInputError(f'Duration must be finite, got {duration}.', 'duration')
    if duration < bin_width:
        raise InvalidInputError(f'Duration {duration} s is shorter than one bin ({bin_width} s).', 'duration')
    if start_state not in FluorescenceState.values:
        raise InvalidInputError(f'Unknown start state {start_state!r}.', 'start_state')
    if not p.dark_to_bright_rate > 0:
        raise InvalidInputError('dark_to_bright_rate must be positive.', 'dark_to_bright_rate')

    rng = make_generator(seed, *stream)
    n_bins = int(np.floor(duration / bin_width + BIN_COUNT_SLACK))
    span = n_bins * bin_width
    times = switching_times(rng, p, start_state, span)
    counts = rng.poisson(bin_means(p, times, start_state, n_bins, bin_width))

    directions = [leaving(start_state), leaving(other_state(start_state))]
    true_jumps = tuple((float(t), directions[i % 2]) for i, t in enumerate(times))
    logger.debug('Simulated %d bins with %d switches (seed %d, stream %s)', n_bins, len(true_jumps), seed,
                 tuple(stream))
    return CountTrace(bin_width=bin_width, counts=counts, start_state=start_state, seed=seed,
                      true_jumps=true_jumps, params=p, stream=tuple(stream))


def simulate_trials(p: TelegraphParams, duration: float, bin_width: float, master_seed: int, n_trials: int,
                    start_state: str = FluorescenceState.BRIGHT) -> List[CountTrace]:
    '''Independent traces; trial k uses the stream (master_seed, k).'''
    if n_trials < 1:
        raise InvalidInputError('At least one trial is required.', 'trials')
    return [simulate_trace(p, duration, bin_width, master_seed, start_state, stream=(k,)) for k in range(n_trials)]


def stationary_dark_fraction(p: TelegraphParams) -> float:
    '''
    Long-time fraction of time spent dark.

    Examples:
        - equal rates => 0.5
        - (0.00909/s, 1/1.2 s) => 0.01079
    '''
    return p.bright_to_dark_rate / (p.bright_to_dark_rate + p.dark_to_bright_rate)


def ensemble_cycle_rate(p: TelegraphParams) -> float:
    '''Mean number of on-off cycles per second of the alternating renewal process.'''
    k1 = p.bright_to_dark_rate
    k2 = p.dark_to_bright_rate
    return k1 * k2 / (k1 + k2)
