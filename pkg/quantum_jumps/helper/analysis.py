'''
Recovering physics from count traces and scans: quantum-jump detection, jump
rates with their error bars, dark-dwell statistics, and Lorentzian and
filter-convolved line-shape fits.
'''
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from django.db import models
from scipy import stats

from quantum_jumps.exceptions import (FlatDataError, InsufficientDataError, InvalidInputError,
                                      InvalidThresholdError, ResolutionError)
from quantum_jumps.helper.atom_model import LineProfile
from quantum_jumps.helper.interaction_model import ScanResult
from quantum_jumps.helper.trajectory_sim import (CountTrace, FluorescenceState, TelegraphParams,
                                                 TransitionDirection, leaving, other_state, reverse)

logger = logging.getLogger(__name__)

SECONDS_PER_MINUTE = 60.0
DEFAULT_MIN_RUN = 2
MIN_DWELLS = 10
MIN_FIT_POINTS = 5

# Fit optimizer contract
MAX_ITERATIONS = 200
RELATIVE_STEP_TOLERANCE = 1e-8
INITIAL_DAMPING = 1e-3
MAX_DAMPING = 1e12
FLAT_DATA_TOLERANCE = 1e-12
# Normal matrices above this condition number leave some parameter undetermined
MAX_CONDITION_NUMBER = 1e14
# Convolved-model quadrature: points per narrower width, half-span in filter widths, size cap
QUADRATURE_POINTS_PER_FWHM = 200
QUADRATURE_HALF_SPAN_FWHM = 40
MAX_QUADRATURE_POINTS = 100_000
PARAMETER_NAMES = ('center', 'fwhm', 'amplitude', 'offset')


class ErrorMethod(models.TextChoices):
    POISSON_SQRT = 'poisson-sqrt'
    SEM = 'sem'


class Polarity(models.TextChoices):
    PEAK = 'peak'
    DIP = 'dip'


@dataclass(frozen=True)
class JumpEvents:
    '''Transitions detected in a binned trace, with the observation it came from.'''
    transitions: Tuple[Tuple[int, str], ...]
    n_cycles: int
    observation_time: float
    bin_width: float
    n_bins: int
    initial_state: str = FluorescenceState.BRIGHT

    def __post_init__(self) -> None:
        transitions = tuple((int(b), str(d)) for b, d in self.transitions)
        for (b1, d1), (b2, d2) in zip(transitions, transitions[1:]):
            if not b2 > b1:
                raise InvalidInputError('Transition bins must be strictly increasing.', 'transitions')
            if d2 != reverse(d1):
                raise InvalidInputError('Transitions must alternate in direction.', 'transitions')
        if transitions and transitions[0][1] != leaving(self.initial_state):
            raise InvalidInputError('First transition must leave the initial state.', 'transitions')
        object.__setattr__(self, 'transitions', transitions)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def final_state(self) -> str:
        return self.initial_state if len(self.transitions) % 2 == 0 else other_state(self.initial_state)

    def bins(self, direction: str) -> np.ndarray:
        return np.array([b for b, d in self.transitions if d == direction], dtype=np.int64)


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    error: float
    n_events: int
    method: str


@dataclass(frozen=True)
class LorentzianFit:
    center: float
    fwhm: float
    amplitude: float
    offset: float
    residual_norm: float
    converged: bool
    stderr: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    dof: int = 0
    model: str = 'lorentzian'
    filter_fwhm: Optional[float] = None

    def confidence_interval(self, name: str, level: float = 0.95) -> Tuple[float, float]:
        value = getattr(self, name)
        error = self.stderr.get(name, math.inf)
        half = stats.t.ppf(0.5 + level / 2.0, max(self.dof, 1)) * error
        return (value - half, value + half)

    def as_report(self) -> Dict[str, str]:
        '''Flat key=value report fields.'''
        report = {
            'center_mhz': f'{self.center:.10g}',
            'fwhm_mhz': f'{self.fwhm:.10g}',
            'amplitude_per_min': f'{self.amplitude:.10g}',
            'offset_per_min': f'{self.offset:.10g}',
            'residual_norm': f'{self.residual_norm:.6g}',
            'converged': str(self.converged).lower(),
        }
        for name in PARAMETER_NAMES:
            if name in self.stderr:
                report[f'{name}_stderr'] = f'{self.stderr[name]:.6g}'
        report['iterations'] = str(self.iterations)
        report['model'] = self.model
        if self.filter_fwhm is not None:
            report['filter_fwhm_mhz'] = f'{self.filter_fwhm:.10g}'
        return report


class DwellStatistics(NamedTuple):
    mean_dwell: float
    mle_mean: float
    ci_low: float
    ci_high: float
    n_dwells: int


class DetectionFidelity(NamedTuple):
    recall: float
    false_cycle_rate: float
    n_true: int
    n_detected: int
    n_matched: int


def count_means(params: TelegraphParams, bin_width: float) -> Tuple[float, float]:
    '''(dark, bright) expected counts per bin.'''
    return params.dark_count_rate * bin_width, params.bright_count_rate * bin_width


def default_threshold(params: TelegraphParams, bin_width: float) -> float:
    '''Midpoint between the dark and bright count means per bin.'''
    dark_mean, bright_mean = count_means(params, bin_width)
    return 0.5 * (dark_mean + bright_mean)


def detect_jumps(trace: CountTrace, threshold: Optional[float] = None, min_run: int = DEFAULT_MIN_RUN) -> JumpEvents:
    '''
    Classify each bin as bright (count above `threshold`) or dark, and flip the
    detected state whenever `min_run` consecutive bins fall on the other side.
    Each transition is recorded at the first bin of the run that caused it.
    The initial state is the side of the first run at least `min_run` long.
    '''
    if min_run < 1:
        raise InvalidInputError('min_run must be at least 1.', 'min_run')
    if trace.n_bins == 0:
        raise InsufficientDataError(1, 0, 'bins')
    dark_mean, bright_mean = count_means(trace.params, trace.bin_width)
    if threshold is None:
        threshold = 0.5 * (dark_mean + bright_mean)
    if not dark_mean < threshold < bright_mean:
        raise InvalidThresholdError(threshold, dark_mean, bright_mean)

    bright = trace.counts > threshold
    starts = np.concatenate(([0], np.flatnonzero(np.diff(bright.astype(np.int8))) + 1))
    lengths = np.diff(np.concatenate((starts, [bright.size])))
    sides = bright[starts]

    long_runs = np.flatnonzero(lengths >= min_run)
    first_side = sides[long_runs[0]] if long_runs.size else sides[0]
    initial_state = FluorescenceState.BRIGHT if first_side else FluorescenceState.DARK

    state_is_bright = bool(first_side)
    transitions: List[Tuple[int, str]] = []
    for start, length, side in zip(starts.tolist(), lengths.tolist(), sides.tolist()):
        if side != state_is_bright and length >= min_run:
            state = FluorescenceState.BRIGHT if state_is_bright else FluorescenceState.DARK
            transitions.append((start, leaving(state)))
            state_is_bright = side

    n_cycles = sum(1 for _, d in transitions if d == TransitionDirection.BRIGHT_TO_DARK)
    logger.debug('Detected %d transitions (%d cycles) in %d bins', len(transitions), n_cycles, trace.n_bins)
    return JumpEvents(transitions=tuple(transitions), n_cycles=n_cycles, observation_time=trace.duration,
                      bin_width=trace.bin_width, n_bins=trace.n_bins, initial_state=initial_state)


def combine_events(first: JumpEvents, second: JumpEvents) -> JumpEvents:
    '''
    Concatenate two observations recorded back to back. Bins of `second` are
    shifted by the length of `first`; the second must start in the state the
    first ends in, so cycle counts add exactly.
    '''
    if first.bin_width != second.bin_width:
        raise InvalidInputError('Only observations with equal bin widths can be combined.', 'bin_width')
    if second.initial_state != first.final_state:
        raise InvalidInputError('Observations do not join: the second starts in a different state than the '
                                'first ends in.', 'initial_state')
    shifted = [(b + first.n_bins, d) for b, d in second.transitions]
    return JumpEvents(transitions=first.transitions + tuple(shifted), n_cycles=first.n_cycles + second.n_cycles,
                      observation_time=first.observation_time + second.observation_time,
                      bin_width=first.bin_width, n_bins=first.n_bins + second.n_bins,
                      initial_state=first.initial_state)


def estimate_rate(events: Union[JumpEvents, Sequence[JumpEvents]],
                  method: str = ErrorMethod.POISSON_SQRT) -> RateEstimate:
    '''
    Jump-cycle rate in events/min of one observation or a batch of them.

    With `poisson-sqrt` the observations are pooled and the error is
    sqrt(n) / minutes. With `sem` each observation is one sub-measurement; the
    rate is their mean and the error the standard deviation of the mean.

    Examples:
        - 42 cycles in 60 min => 0.70 ± 0.108 /min (poisson-sqrt)
        - 0 cycles in 60 min => 0 ± 0
    '''
    batch = [events] if isinstance(events, JumpEvents) else list(events)
    return rate_from_counts([o.n_cycles for o in batch], [o.observation_time for o in batch], method)


def rate_from_counts(counts: Sequence[int], observation_times: Sequence[float],
                     method: str = ErrorMethod.POISSON_SQRT) -> RateEstimate:
    '''Rate estimate from per-observation cycle counts and observation times (s).'''
    if len(counts) == 0 or len(counts) != len(observation_times):
        raise InvalidInputError('One observation time per count, and at least one observation, are required.',
                                'events')
    if any(not t > 0 for t in observation_times):
        raise InvalidInputError('Observation time must be positive.', 'observation_time')
    n_events = int(sum(counts))

    if method == ErrorMethod.POISSON_SQRT:
        minutes = sum(observation_times) / SECONDS_PER_MINUTE
        return RateEstimate(rate=n_events / minutes, error=math.sqrt(n_events) / minutes,
                            n_events=n_events, method=ErrorMethod.POISSON_SQRT.value)
    elif method == ErrorMethod.SEM:
        if len(counts) < 2:
            raise InsufficientDataError(2, len(counts), 'sub-measurements')
        rates = np.asarray(counts, dtype=float) * SECONDS_PER_MINUTE / np.asarray(observation_times, dtype=float)
        return RateEstimate(rate=float(rates.mean()), error=float(rates.std(ddof=1) / math.sqrt(rates.size)),
                            n_events=n_events, method=ErrorMethod.SEM.value)
    raise InvalidInputError(f'Unknown error method {method!r}.', 'method')


def complete_dwell_bins(events: JumpEvents) -> np.ndarray:
    '''Lengths in bins of the dark periods that begin and end inside the observation.'''
    lengths: List[int] = []
    entered: Optional[int] = None
    for b, d in events.transitions:
        if d == TransitionDirection.BRIGHT_TO_DARK:
            entered = b
        elif entered is not None:
            lengths.append(b - entered)
            entered = None
    return np.array(lengths, dtype=np.int64)


def dwell_statistics(events: JumpEvents, trace: CountTrace, confidence: float = 0.95,
                     min_dwells: int = MIN_DWELLS) -> DwellStatistics:
    '''
    Mean dark dwell (s) over complete dwells, the maximum-likelihood mean of an
    exponential fit and its confidence interval from the chi-square
    distribution with 2n degrees of freedom. Dwells cut by the trace edges are
    excluded, so for complete dwells the MLE equals the sample mean.
    '''
    if events.n_bins != trace.n_bins:
        raise InvalidInputError('Events were not detected on this trace.', 'trace')
    dwells = complete_dwell_bins(events) * trace.bin_width
    if dwells.size < min_dwells:
        raise InsufficientDataError(min_dwells, int(dwells.size), 'complete dark dwells')
    n = dwells.size
    mean = float(dwells.mean())
    total = float(dwells.sum())
    alpha = 1.0 - confidence
    ci_low = 2.0 * total / stats.chi2.ppf(1.0 - alpha / 2.0, 2 * n)
    ci_high = 2.0 * total / stats.chi2.ppf(alpha / 2.0, 2 * n)
    return DwellStatistics(mean_dwell=mean, mle_mean=total / n, ci_low=float(ci_low), ci_high=float(ci_high),
                           n_dwells=int(n))


def detection_fidelity(events: JumpEvents, trace: CountTrace, tolerance_bins: int = 1) -> DetectionFidelity:
    '''
    Compare detected shelving events with the trace's true jumps. A true cycle
    counts as recalled if a detected bright-to-dark transition lies within
    `tolerance_bins` of the bin holding the true switch; detected cycles left
    unmatched are false cycles, reported per minute of observation.
    '''
    true_bins = np.array([int(t // trace.bin_width) for t, d in trace.true_jumps
                          if d == TransitionDirection.BRIGHT_TO_DARK], dtype=np.int64)
    detected = events.bins(TransitionDirection.BRIGHT_TO_DARK)
    matched = 0
    j = 0
    for true_bin in true_bins.tolist():
        while j < detected.size and detected[j] < true_bin - tolerance_bins:
            j += 1
        if j < detected.size and detected[j] <= true_bin + tolerance_bins:
            matched += 1
            j += 1
    n_true = int(true_bins.size)
    recall = matched / n_true if n_true else 1.0
    false_rate = (detected.size - matched) * SECONDS_PER_MINUTE / trace.duration
    return DetectionFidelity(recall=recall, false_cycle_rate=false_rate, n_true=n_true,
                             n_detected=int(detected.size), n_matched=matched)


# Line-shape fitting

ModelFunction = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def fit_weights(errors: np.ndarray) -> Tuple[np.ndarray, bool]:
    '''
    Least-squares weights 1/error². All-zero errors give unit weights; isolated
    zero errors (e.g. sqrt(0) for an empty bin) take the smallest nonzero error.
    Returns the weights and whether they carry absolute uncertainties.
    '''
    positive = errors[errors > 0]
    if positive.size == 0:
        return np.ones(errors.size), False
    errors = np.where(errors > 0, errors, positive.min())
    return 1.0 / errors ** 2, True


def initial_guess(x: np.ndarray, y: np.ndarray, polarity: str) -> np.ndarray:
    '''
    Deterministic start: offset at the baseline, amplitude from baseline to
    extremum, center at the extremum and FWHM from the half-maximum crossings
    (x-range / 4 when neither crossing is inside the data).
    '''
    sign = 1.0 if polarity == Polarity.PEAK else -1.0
    s = sign * y
    index = int(np.argmax(s))
    baseline = float(np.min(s))
    height = float(s[index]) - baseline
    half = baseline + height / 2.0

    left = None
    i = index
    while i > 0 and s[i - 1] >= half:
        i -= 1
    if i > 0:
        left = float(np.interp(half, [s[i - 1], s[i]], [x[i - 1], x[i]]))
    right = None
    j = index
    while j < s.size - 1 and s[j + 1] >= half:
        j += 1
    if j < s.size - 1:
        right = float(np.interp(half, [s[j + 1], s[j]], [x[j + 1], x[j]]))

    center = float(x[index])
    if left is not None and right is not None:
        fwhm = right - left
    elif left is not None:
        fwhm = 2.0 * (center - left)
    elif right is not None:
        fwhm = 2.0 * (right - center)
    else:
        fwhm = (x[-1] - x[0]) / 4.0
    if not fwhm > 0:
        fwhm = (x[-1] - x[0]) / 4.0
    return np.array([center, fwhm, sign * height, sign * baseline])


class OptimizerResult(NamedTuple):
    parameters: np.ndarray
    converged: bool
    iterations: int
    covariance: np.ndarray
    residual_norm: float


def damped_gauss_newton(model: ModelFunction, y: np.ndarray, weights: np.ndarray, start: np.ndarray,
                        free: np.ndarray, fwhm_floor: float, absolute_weights: bool) -> OptimizerResult:
    '''
    Minimise sum(w·(y - model)²) by Gauss-Newton steps damped in the
    Levenberg-Marquardt manner. Converges when the relative step size drops
    below 1e-8; gives up after 200 iterations, keeping the best parameters.
    The FWHM (index 1) is held above `fwhm_floor`; a solution pinned to the
    floor is reported as not converged.
    '''
    p = start.astype(float).copy()
    values, jacobian = model(p)
    residual = y - values
    cost = float(np.sum(weights * residual ** 2))
    damping = INITIAL_DAMPING
    converged = False
    iterations = 0

    for iterations in range(1, MAX_ITERATIONS + 1):
        J = jacobian[:, free]
        normal = J.T @ (weights[:, None] * J)
        gradient = J.T @ (weights * residual)
        diagonal = np.where(np.diag(normal) > 0, np.diag(normal), 1.0)

        accepted = False
        while damping <= MAX_DAMPING:
            try:
                step = np.linalg.solve(normal + damping * np.diag(diagonal), gradient)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = p.copy()
            trial[free] += step
            if trial[1] <= fwhm_floor:
                trial[1] = fwhm_floor
            try:
                trial_values, trial_jacobian = model(trial)
            except ResolutionError:
                damping *= 10.0
                continue
            trial_residual = y - trial_values
            trial_cost = float(np.sum(weights * trial_residual ** 2))
            if trial_cost <= cost:
                accepted = True
                relative_step = np.linalg.norm(trial - p) / (np.linalg.norm(p) + 1e-300)
                p, values, jacobian, residual, cost = trial, trial_values, trial_jacobian, trial_residual, trial_cost
                damping = max(damping / 10.0, 1e-12)
                break
            damping *= 10.0

        if not accepted:
            # No downhill step left: converged only if the undamped step is negligible
            undamped = np.linalg.lstsq(normal, gradient, rcond=None)[0]
            converged = np.linalg.norm(undamped) / (np.linalg.norm(p) + 1e-300) < RELATIVE_STEP_TOLERANCE
            break
        if relative_step < RELATIVE_STEP_TOLERANCE:
            converged = True
            break

    pinned = p[1] <= fwhm_floor
    J = jacobian[:, free]
    normal = J.T @ (weights[:, None] * J)
    covariance = np.full((4, 4), np.inf)
    if np.linalg.cond(normal) < MAX_CONDITION_NUMBER:
        inverse = np.linalg.inv(normal)
        dof = max(y.size - int(np.count_nonzero(free)), 1)
        if not absolute_weights:
            inverse = inverse * cost / dof
        covariance[np.ix_(free, free)] = inverse
    else:
        converged = False
    if pinned:
        converged = False

    scale = math.sqrt(float(np.sum(weights * y ** 2)))
    residual_norm = math.sqrt(cost) / scale if scale > 0 else math.sqrt(cost)
    return OptimizerResult(parameters=p, converged=bool(converged), iterations=iterations,
                           covariance=covariance, residual_norm=residual_norm)


def lorentzian_model(x: np.ndarray) -> ModelFunction:
    def evaluate(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        center, fwhm, amplitude, offset = p
        u = 2.0 * (x - center) / fwhm
        d = 1.0 + u * u
        shape = 1.0 / d
        jacobian = np.empty((x.size, 4))
        jacobian[:, 0] = 4.0 * amplitude * u / (fwhm * d * d)
        jacobian[:, 1] = 2.0 * amplitude * u * u / (fwhm * d * d)
        jacobian[:, 2] = shape
        jacobian[:, 3] = 1.0
        return offset + amplitude * shape, jacobian
    return evaluate


def prepare_fit(scan: ScanResult) -> Tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    if len(scan) < MIN_FIT_POINTS:
        raise InsufficientDataError(MIN_FIT_POINTS, len(scan), 'scan points')
    x = scan.x_values
    y = scan.rates
    if np.ptp(y) <= FLAT_DATA_TOLERANCE * max(float(np.max(np.abs(y))), 1e-300):
        raise FlatDataError('Scan rates are constant; there is no line to fit.')
    weights, absolute = fit_weights(scan.errors)
    return x, y, weights, absolute


def free_parameters(background: Optional[float]) -> np.ndarray:
    free = np.ones(4, dtype=bool)
    if background is not None:
        free[3] = False
    return free


def collect_fit(result: OptimizerResult, free: np.ndarray, n_points: int, model: str = 'lorentzian',
                filter_fwhm: Optional[float] = None) -> LorentzianFit:
    center, fwhm, amplitude, offset = result.parameters
    stderr = {name: float(math.sqrt(result.covariance[i, i]))
              for i, name in enumerate(PARAMETER_NAMES)
              if free[i] and np.isfinite(result.covariance[i, i]) and result.covariance[i, i] >= 0}
    return LorentzianFit(center=float(center), fwhm=float(abs(fwhm)), amplitude=float(amplitude),
                         offset=float(offset), residual_norm=result.residual_norm, converged=result.converged,
                         stderr=stderr, iterations=result.iterations,
                         dof=max(n_points - int(np.count_nonzero(free)), 1), model=model, filter_fwhm=filter_fwhm)


def fit_lorentzian(scan: ScanResult, polarity: str = Polarity.PEAK, background: Optional[float] = None) -> LorentzianFit:
    '''
    Weighted least-squares Lorentzian fit of a scan: offset + amplitude /
    (1 + (2(x - center)/fwhm)²). The offset is fixed when `background` is
    given. A dip is fitted with `polarity="dip"` and a negative amplitude.

    Raises FlatDataError on constant data. Non-convergence is reported through
    `converged=False` with the best parameters found.
    '''
    x, y, weights, absolute = prepare_fit(scan)
    start = initial_guess(x, y, polarity)
    free = free_parameters(background)
    if background is not None:
        start[3] = background
    fwhm_floor = 1e-6 * (x[-1] - x[0])
    result = damped_gauss_newton(lorentzian_model(x), y, weights, start, free, fwhm_floor, absolute)
    fit = collect_fit(result, free, x.size)
    logger.info('Lorentzian fit: center %.6g MHz, FWHM %.6g MHz, converged %s after %d iterations',
                fit.center, fit.fwhm, fit.converged, fit.iterations)
    return fit


def quadrature_grid(known_filter: LineProfile, atomic_fwhm: float) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Filter-frame grid y and trapezoid weights times F(y) for the convolution
    integral. The step resolves the narrower of filter and atomic line.
    '''
    narrow = min(known_filter.fwhm, atomic_fwhm)
    step = narrow / QUADRATURE_POINTS_PER_FWHM
    if known_filter.grid is not None:
        half_span = float(np.max(np.abs(known_filter.grid - known_filter.center)))
    else:
        half_span = QUADRATURE_HALF_SPAN_FWHM * known_filter.fwhm
    m = int(math.ceil(half_span / step))
    if 2 * m + 1 > MAX_QUADRATURE_POINTS:
        coarse = 2.0 * half_span / MAX_QUADRATURE_POINTS
        raise ResolutionError(narrow / coarse, QUADRATURE_POINTS_PER_FWHM)
    y = step * np.arange(-m, m + 1)
    q = known_filter.evaluate(y + known_filter.center) * step
    q[0] *= 0.5
    q[-1] *= 0.5
    return y, q


def convolved_model(x: np.ndarray, known_filter: LineProfile) -> ModelFunction:
    '''
    offset + amplitude · K(x - center) / K(0), where K is the atomic Lorentzian
    of width fwhm convolved with the fixed filter profile, evaluated by
    quadrature over the filter so that derivatives stay analytic.
    '''
    def lorentz(z: np.ndarray, fwhm: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = 2.0 * z / fwhm
        d = 1.0 + u * u
        return 1.0 / d, -8.0 * z / (fwhm * fwhm * d * d), 8.0 * z * z / (fwhm ** 3 * d * d)

    def evaluate(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        center, fwhm, amplitude, offset = p
        y, q = quadrature_grid(known_filter, fwhm)
        z = (x - center)[:, None] - y[None, :]
        value, d_dz, d_dfwhm = lorentz(z, fwhm)
        k = value @ q
        k0_value, _, k0_dfwhm = lorentz(-y, fwhm)
        k0 = float(k0_value @ q)
        shape = k / k0
        jacobian = np.empty((x.size, 4))
        jacobian[:, 0] = -amplitude * (d_dz @ q) / k0
        jacobian[:, 1] = amplitude * ((d_dfwhm @ q) / k0 - k * float(k0_dfwhm @ q) / (k0 * k0))
        jacobian[:, 2] = shape
        jacobian[:, 3] = 1.0
        return offset + amplitude * shape, jacobian
    return evaluate


def fit_convolved_line(scan: ScanResult, known_filter: LineProfile,
                       background: Optional[float] = None) -> LorentzianFit:
    '''
    Fit the atomic Lorentzian behind a resonance measured with a filter of
    known spectral profile: the model is the Lorentzian convolved with the
    filter, so the reported FWHM is the atomic one. Same optimizer and error
    contract as `fit_lorentzian`; an unresolvable model (e.g. a filter much
    wider than the scanned span) is reported as not converged.
    '''
    x, y, weights, absolute = prepare_fit(scan)
    free = free_parameters(background)
    start = initial_guess(x, y, Polarity.PEAK)
    # Widths of Lorentzians add under convolution
    start[1] = max(start[1] - known_filter.fwhm, 0.1 * start[1])
    if background is not None:
        start[3] = background
    fwhm_floor = 1e-3 * known_filter.fwhm
    model = convolved_model(x, known_filter)
    try:
        model(start)
    except ResolutionError as exc:
        logger.warning('Convolved line model cannot be resolved at the starting point: %s', exc)
        residual = y - start[3] - start[2]
        residual_norm = math.sqrt(float(np.sum(weights * residual ** 2)) / float(np.sum(weights * y ** 2)))
        return LorentzianFit(center=float(start[0]), fwhm=float(start[1]), amplitude=float(start[2]),
                             offset=float(start[3]), residual_norm=residual_norm, converged=False,
                             dof=max(x.size - int(np.count_nonzero(free)), 1), model='convolved',
                             filter_fwhm=known_filter.fwhm)
    result = damped_gauss_newton(model, y, weights, start, free, fwhm_floor, absolute)
    fit = collect_fit(result, free, x.size, model='convolved', filter_fwhm=known_filter.fwhm)
    logger.info('Convolved fit: atomic FWHM %.6g MHz (filter %.6g MHz), converged %s after %d iterations',
                fit.fwhm, known_filter.fwhm, fit.converged, fit.iterations)
    return fit
