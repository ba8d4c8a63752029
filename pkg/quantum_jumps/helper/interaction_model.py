'''
Absorption of SPDC photons by the ion: the factor-chain estimate of the jump
rate, and the analytic models of the two spectroscopic scans (jump rate vs.
crystal temperature with the unfiltered arm, jump rate vs. filter frequency
with the filtered arm).

Jump rates are events/s inside this module's chain functions and events/min
in every ScanResult.
'''
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models
from scipy.integrate import trapezoid
from scipy.signal import fftconvolve

from quantum_jumps.exceptions import InvalidInputError, ResolutionError
from quantum_jumps.helper.atom_model import LineProfile, LineShape
from quantum_jumps.helper.spdc_source import (MHZ_PER_GHZ, FilterChainConfig, SpdcSourceConfig, chain_fwhm,
                                              chain_profile, filtered_arm_count_rates, filtered_photon_spectrum,
                                              spectral_flux_density, spectrum_grid)

logger = logging.getLogger(__name__)

SECONDS_PER_MINUTE = 60.0

# Convolution grid: default and minimum points across the narrower FWHM
CONVOLUTION_POINTS_PER_FWHM = 200
MIN_POINTS_PER_FWHM = 100
# Half-span of the convolution grid in units of the summed input FWHMs
CONVOLUTION_HALF_SPAN = 40
MAX_CONVOLUTION_POINTS = 2 ** 22
# Grid used to overlap the broadband envelope with the absorption line
OVERLAP_POINTS_PER_FWHM = 20
OVERLAP_HALF_SPAN_FWHM = 200


class ScanKind(models.TextChoices):
    TEMPERATURE = 'temperature'
    FREQUENCY = 'frequency'
    FILTERED_ARM = 'filtered-arm'
    LASER = 'laser'


class FluxModel(models.TextChoices):
    RECTANGULAR = 'rectangular'
    OVERLAP = 'overlap'


class FilterShape(models.TextChoices):
    LORENTZIAN = 'lorentzian'
    CAVITY_CHAIN = 'cavity-chain'


@dataclass(frozen=True)
class CouplingFactors:
    '''The five reductions between photons impinging on the ion and quantum jumps.'''
    d32_population: float = 0.6
    dipole_fraction: float = 0.007
    branching_to_d52: float = 0.059
    polarization_match: float = 1.0 / 3.0
    geometric_overlap: float = 0.02

    def __post_init__(self) -> None:
        for factor in fields(self):
            value = getattr(self, factor.name)
            if not 0 < value <= 1:
                raise InvalidInputError(f'Coupling factor {factor.name} must lie in (0, 1], got {value}.',
                                        factor.name)

    def items(self) -> List[Tuple[str, float]]:
        return [(factor.name, getattr(self, factor.name)) for factor in fields(self)]

    def product(self) -> float:
        result = 1.0
        for _, value in self.items():
            result = result * value
        return result

    def with_factor(self, name: str, value: float) -> 'CouplingFactors':
        return replace(self, **{name: value})


@dataclass(frozen=True)
class BackgroundRates:
    background_jump_rate: float = 0.09
    bright_count_rate: float = 50000.0
    dark_count_rate: float = 500.0

    def __post_init__(self) -> None:
        if min(self.background_jump_rate, self.bright_count_rate, self.dark_count_rate) < 0:
            raise InvalidInputError('Background rates must be non-negative.', 'background')
        if not self.bright_count_rate > self.dark_count_rate:
            raise InvalidInputError('Bright count rate must exceed the dark count rate.', 'bright_count_rate')


@dataclass(frozen=True, eq=False)
class ScanResult:
    x_values: np.ndarray
    rates: np.ndarray
    errors: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        x = np.array(self.x_values, dtype=float)
        rates = np.array(self.rates, dtype=float)
        errors = np.array(self.errors, dtype=float)
        if not (x.shape == rates.shape == errors.shape) or x.ndim != 1:
            raise InvalidInputError('Scan coordinates, rates and errors must be 1-D and of equal length.', 'scan')
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise InvalidInputError('Scan coordinates must be strictly increasing.', 'x_values')
        if np.any(rates < 0) or np.any(errors < 0):
            raise InvalidInputError('Scan rates and errors must be non-negative.', 'rates')
        for array in (x, rates, errors):
            array.setflags(write=False)
        object.__setattr__(self, 'x_values', x)
        object.__setattr__(self, 'rates', rates)
        object.__setattr__(self, 'errors', errors)
        object.__setattr__(self, 'meta', dict(self.meta))

    @property
    def kind(self) -> str:
        return self.meta.get('kind', '')

    def __len__(self) -> int:
        return int(self.x_values.size)


def check_scan_grid(values: Sequence[float], name: str) -> np.ndarray:
    grid = np.asarray(values, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidInputError(f'{name} must be a non-empty list.', name)
    if np.any(np.diff(grid) <= 0):
        raise InvalidInputError(f'{name} must be strictly increasing.', name)
    return grid


def resonant_flux(density: float, absorption_bandwidth: float) -> float:
    '''
    Photons/s inside the absorption window: density (photons/(s·MHz)) times
    bandwidth (MHz).

    Example:
        - (250, 22) => 5500 photons/s
    '''
    if not density > 0 or not absorption_bandwidth > 0:
        raise InvalidInputError('Flux density and absorption bandwidth must both be positive.',
                                'absorption_bandwidth_mhz')
    return density * absorption_bandwidth


def line_area(line: LineProfile) -> float:
    if line.shape == LineShape.LORENTZIAN:
        return 0.5 * math.pi * line.fwhm * line.peak
    elif line.shape == LineShape.GAUSSIAN:
        return math.sqrt(math.pi / (4.0 * math.log(2.0))) * line.fwhm * line.peak
    return float(trapezoid(line.values, line.grid))


def overlap_flux(spectrum: LineProfile, line: LineProfile) -> float:
    '''
    Photons/s absorbed-equivalent from a sampled spectral density weighted by
    the absorption line. Normalised so that a flat density ρ gives ρ·fwhm,
    i.e. the rectangular-window estimate.
    '''
    if spectrum.grid is None:
        raise InvalidInputError('Overlap flux needs a sampled spectrum.', 'spectrum')
    weighted = trapezoid(spectrum.values * line.evaluate(spectrum.grid), spectrum.grid)
    return float(weighted * line.fwhm / line_area(line))


def unfiltered_overlap_flux(config: SpdcSourceConfig, line: LineProfile, temperature: float) -> float:
    grid = spectrum_grid(line.center, line.fwhm, OVERLAP_POINTS_PER_FWHM, OVERLAP_HALF_SPAN_FWHM)
    density = spectral_flux_density(config, grid / MHZ_PER_GHZ, temperature)
    return overlap_flux(LineProfile(center=line.center, fwhm=line.fwhm, peak=float(np.max(density)),
                                    shape=LineShape.SAMPLED, grid=grid, values=density), line)


def predicted_jump_rate(flux: float, f: CouplingFactors) -> float:
    '''
    Jumps/s induced by `flux` photons/s through the factor chain.

    Example:
        - 5500 photons/s, factors (0.6, 0.007, 0.059, 1/3, 0.02) => 9.08e-3 /s
    '''
    if not flux > 0:
        raise InvalidInputError('Photon flux must be positive.', 'flux')
    rate = flux
    for _, value in f.items():
        rate = rate * value
    return rate


def convolve_profiles(a: LineProfile, b: LineProfile, step: Optional[float] = None) -> LineProfile:
    '''
    Numeric convolution of two profiles on a common uniform grid, returned as a
    sampled-grid profile centered at a.center + b.center. The output is scaled
    so that its peak equals a.peak * b.peak; for two Lorentzians its FWHM is the
    sum of the input FWHMs.

    The grid step defaults to 1/200 of the narrower FWHM. Raises
    ResolutionError if the grid (given, or forced coarser by the size cap)
    resolves the narrower FWHM with fewer than 100 points.
    '''
    narrow = min(a.fwhm, b.fwhm)
    for profile in (a, b):
        if profile.grid_step is not None and profile.fwhm / profile.grid_step < MIN_POINTS_PER_FWHM:
            raise ResolutionError(profile.fwhm / profile.grid_step, MIN_POINTS_PER_FWHM)

    half_span = CONVOLUTION_HALF_SPAN * (a.fwhm + b.fwhm)
    for profile in (a, b):
        if profile.grid is not None:
            half_span = max(half_span, float(np.max(np.abs(profile.grid - profile.center))))
    if step is None:
        step = narrow / CONVOLUTION_POINTS_PER_FWHM
        step = max(step, 2.0 * half_span / MAX_CONVOLUTION_POINTS)
    if narrow / step < MIN_POINTS_PER_FWHM:
        raise ResolutionError(narrow / step, MIN_POINTS_PER_FWHM)

    m = int(math.ceil(half_span / step))
    x = step * np.arange(-m, m + 1)
    kernel_a = a.evaluate(x + a.center)
    kernel_b = b.evaluate(x + b.center)
    convolved = np.clip(fftconvolve(kernel_a, kernel_b, mode='same'), 0.0, None)
    if not np.max(convolved) > 0:
        raise InvalidInputError('Convolution of the two profiles vanishes on the grid.', 'profile')
    values = convolved * (a.peak * b.peak / np.max(convolved))
    return LineProfile.sampled(x + a.center + b.center, values)


def temperature_scan_model(spdc: SpdcSourceConfig, line: LineProfile, f: CouplingFactors, bg: BackgroundRates,
                           temperatures: Sequence[float], flux_model: str = FluxModel.RECTANGULAR,
                           meta: Optional[Dict[str, Any]] = None) -> ScanResult:
    '''
    Jump rate (events/min) vs. crystal temperature with the unfiltered arm:
    background plus the factor-chain rate for the flux inside `line`.
    '''
    grid = check_scan_grid(temperatures, 'temperatures')
    rates = np.empty(grid.size)
    for index, temperature in enumerate(grid):
        if flux_model == FluxModel.OVERLAP:
            flux = unfiltered_overlap_flux(spdc, line, temperature)
        else:
            density = float(spectral_flux_density(spdc, 0.0, temperature))
            flux = resonant_flux(density, line.fwhm) if density > 0 else 0.0
        # Far-detuned envelopes underflow to zero flux, which the chain rejects
        signal = predicted_jump_rate(flux, f) if flux > 0 else 0.0
        rates[index] = bg.background_jump_rate + SECONDS_PER_MINUTE * signal
    scan_meta = {'kind': ScanKind.TEMPERATURE.value, 'unit': 'per_min', 'x_unit': 'C'}
    scan_meta.update(meta or {})
    return ScanResult(grid, rates, np.zeros(grid.size), scan_meta)


def filter_kernel(chain: FilterChainConfig, filter_shape: str = FilterShape.LORENTZIAN) -> LineProfile:
    '''Unit-peak spectral shape of the filtered photons, centered on zero.'''
    if filter_shape == FilterShape.CAVITY_CHAIN:
        return chain_profile(chain)
    return LineProfile.lorentzian(center=0.0, fwhm=chain_fwhm(chain))


def frequency_scan_model(chain: FilterChainConfig, line: LineProfile, peak_rate: float, bg: BackgroundRates,
                         detunings: Sequence[float], filter_shape: str = FilterShape.LORENTZIAN,
                         meta: Optional[Dict[str, Any]] = None) -> ScanResult:
    '''
    Jump rate (events/min) vs. filter detuning (MHz) with the filtered arm: the
    filter spectrum convolved with the atomic line, scaled to `peak_rate` on
    the line center, on top of the background.
    '''
    grid = check_scan_grid(detunings, 'detunings')
    if peak_rate < 0:
        raise InvalidInputError('Peak jump rate must be non-negative.', 'frequency_peak_rate_per_min')
    resonance = convolve_profiles(filter_kernel(chain, filter_shape), line)
    shape = resonance.evaluate(grid) / float(resonance.evaluate(line.center))
    rates = bg.background_jump_rate + peak_rate * shape
    scan_meta = {'kind': ScanKind.FREQUENCY.value, 'unit': 'per_min', 'x_unit': 'MHz',
                 'model_fwhm_mhz': resonance.fwhm}
    scan_meta.update(meta or {})
    return ScanResult(grid, rates, np.zeros(grid.size), scan_meta)


def filtered_arm_peak_rate(spdc: SpdcSourceConfig, chain: FilterChainConfig, window: LineProfile,
                           spectroscopic_line: LineProfile, f: CouplingFactors,
                           flux_model: str = FluxModel.RECTANGULAR) -> float:
    '''
    Jump rate (events/min, background excluded) with the filtered arm tuned to
    the line center, at the envelope peak.

    The rectangular model scales the unfiltered-arm estimate by the filter
    transmission. The overlap model weights the filtered spectrum with the
    spectroscopic line and so also includes the bandwidth mismatch.
    '''
    centered = chain.with_offset(spectroscopic_line.center)
    temperature = spdc.ref_temperature
    if flux_model == FluxModel.OVERLAP:
        flux = overlap_flux(filtered_photon_spectrum(spdc, centered, temperature), spectroscopic_line)
    else:
        density = float(spectral_flux_density(spdc, 0.0, temperature)) * chain.peak_transmission
        flux = resonant_flux(density, window.fwhm)
    return SECONDS_PER_MINUTE * predicted_jump_rate(flux, f)


def laser_scan_model(line: LineProfile, peak_rate: float, bg: BackgroundRates, detunings: Sequence[float],
                     meta: Optional[Dict[str, Any]] = None) -> ScanResult:
    '''
    Jump rate (events/min) vs. detuning of a narrow-band laser: the bare
    spectroscopic line, the reference against which the filtered-arm
    resonance is compared.
    '''
    grid = check_scan_grid(detunings, 'detunings')
    if peak_rate < 0:
        raise InvalidInputError('Peak jump rate must be non-negative.', 'laser_peak_rate_per_min')
    rates = bg.background_jump_rate + peak_rate * line.evaluate(grid) / float(line.evaluate(line.center))
    scan_meta = {'kind': ScanKind.LASER.value, 'unit': 'per_min', 'x_unit': 'MHz'}
    scan_meta.update(meta or {})
    return ScanResult(grid, rates, np.zeros(grid.size), scan_meta)


def filtered_arm_count_scan(spdc: SpdcSourceConfig, chain: FilterChainConfig, temperatures: Sequence[float],
                            detection_efficiency: float = 1.0,
                            meta: Optional[Dict[str, Any]] = None) -> ScanResult:
    '''
    Photon rate (counts/s) behind the filters, tuned to the line center, vs.
    crystal temperature. The filters stand in for the ion's absorption window,
    so this curve shares the shape of the temperature scan.
    '''
    grid = check_scan_grid(temperatures, 'temperatures')
    centered = chain.with_offset(0.0)
    rates = filtered_arm_count_rates(spdc, centered, grid, detection_efficiency)
    scan_meta = {'kind': ScanKind.FILTERED_ARM.value, 'unit': 'per_s', 'x_unit': 'C'}
    scan_meta.update(meta or {})
    return ScanResult(grid, rates, np.zeros(grid.size), scan_meta)
