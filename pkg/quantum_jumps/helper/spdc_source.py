'''
The down-conversion photon source as seen by the ion.

The unfiltered arm is a broadband phase-matching envelope whose center tunes
linearly with crystal temperature. The filtered arm passes the same light
through a chain of Fabry-Perot cavities centered `detuning_offset` away from
the line center. Envelope quantities are in GHz, filter quantities in MHz.
'''
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from django.db import models
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from quantum_jumps.exceptions import InvalidInputError
from quantum_jumps.helper.atom_model import LineProfile, LineShape

logger = logging.getLogger(__name__)

MHZ_PER_GHZ = 1000.0
# np.sinc(u)**2 == 1/2 at u = SINC_HALF_POWER
SINC_HALF_POWER = 0.44294647068
FILTERED_SPECTRUM_POINTS_PER_FWHM = 2000
FILTERED_SPECTRUM_HALF_SPAN_FWHM = 10
# Filter chains wider than this fraction of the envelope are flagged
NARROW_FILTER_RATIO = 0.1


class EnvelopeShape(models.TextChoices):
    GAUSSIAN = 'gaussian'
    SINC_SQUARED = 'sinc-squared'


@dataclass(frozen=True)
class SpdcSourceConfig:
    envelope_fwhm: float = 200.0
    peak_flux_density: float = 250.0
    temp_slope: float = -59.0
    ref_temperature: float = 40.0
    envelope_shape: str = EnvelopeShape.GAUSSIAN

    def __post_init__(self) -> None:
        if not self.envelope_fwhm > 0:
            raise InvalidInputError('Envelope FWHM must be positive.', 'envelope_fwhm_ghz')
        if not self.peak_flux_density > 0:
            raise InvalidInputError('Peak spectral flux density must be positive.', 'peak_flux_density')
        if self.temp_slope == 0:
            raise InvalidInputError('Temperature tuning slope must be nonzero.', 'temp_slope_ghz_per_c')
        if self.envelope_shape not in EnvelopeShape.values:
            raise InvalidInputError(f'Unknown envelope shape {self.envelope_shape!r}.', 'envelope_shape')


@dataclass(frozen=True)
class FilterChainConfig:
    cavity_fwhms: Tuple[float, ...] = (34.19, 34.19)
    peak_transmission: float = 0.5
    detuning_offset: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, 'cavity_fwhms', tuple(float(w) for w in self.cavity_fwhms))
        if len(self.cavity_fwhms) == 0:
            raise InvalidInputError('Filter chain needs at least one cavity.', 'cavity_fwhm_mhz')
        if any(not w > 0 for w in self.cavity_fwhms):
            raise InvalidInputError('Every cavity FWHM must be positive.', 'cavity_fwhm_mhz')
        if not 0 < self.peak_transmission <= 1:
            raise InvalidInputError('Peak transmission must lie in (0, 1].', 'peak_transmission')

    def with_offset(self, detuning_offset: float) -> 'FilterChainConfig':
        return FilterChainConfig(self.cavity_fwhms, self.peak_transmission, detuning_offset)


def envelope_center(config: SpdcSourceConfig, temperature: float) -> float:
    '''
    Envelope center (GHz from the line center) at crystal temperature `temperature` (°C).

    Examples:
        - slope -59 GHz/°C, T = ref + 1 => -59 GHz
        - T = ref => 0 GHz
    '''
    return config.temp_slope * (temperature - config.ref_temperature)


def envelope_shape_at(config: SpdcSourceConfig, offset) -> np.ndarray:
    '''Unit-peak envelope at `offset` GHz from its center.'''
    u = np.asarray(offset, dtype=float) / config.envelope_fwhm
    if config.envelope_shape == EnvelopeShape.GAUSSIAN:
        return np.exp(-4.0 * np.log(2.0) * u * u)
    return np.sinc(2.0 * SINC_HALF_POWER * u) ** 2


def spectral_flux_density(config: SpdcSourceConfig, detuning, temperature: float) -> np.ndarray:
    '''Photons/(s·MHz) of the unfiltered arm at `detuning` GHz from the line center.'''
    return config.peak_flux_density * envelope_shape_at(config, np.asarray(detuning, dtype=float)
                                                        - envelope_center(config, temperature))


def envelope_effective_width(config: SpdcSourceConfig) -> float:
    '''Integral of the unit-peak envelope, in GHz.'''
    if config.envelope_shape == EnvelopeShape.GAUSSIAN:
        return config.envelope_fwhm * np.sqrt(np.pi / (4.0 * np.log(2.0)))
    return config.envelope_fwhm / (2.0 * SINC_HALF_POWER)


def unfiltered_arm_flux(config: SpdcSourceConfig) -> float:
    '''Total photon rate (1/s) of the unfiltered arm: density times effective width.'''
    return config.peak_flux_density * envelope_effective_width(config) * MHZ_PER_GHZ


def filter_transmission(chain: FilterChainConfig, detuning) -> np.ndarray:
    '''
    Transmission of the cavity chain at `detuning` MHz: the product of
    unit-peak cavity Lorentzians, scaled to `peak_transmission` on resonance.
    '''
    x = np.asarray(detuning, dtype=float) - chain.detuning_offset
    transmission = np.full(x.shape, chain.peak_transmission)
    for fwhm in chain.cavity_fwhms:
        u = 2.0 * x / fwhm
        transmission = transmission / (1.0 + u * u)
    return transmission


def chain_fwhm(chain: FilterChainConfig) -> float:
    '''Effective FWHM (MHz) of the chain, found by root search on the half-maximum condition.'''
    if len(chain.cavity_fwhms) == 1:
        return chain.cavity_fwhms[0]
    half = chain.peak_transmission / 2.0
    centered = chain.with_offset(0.0)
    # The narrowest cavity alone is down to one half at its half width
    upper = min(chain.cavity_fwhms) / 2.0
    half_width = brentq(lambda x: float(filter_transmission(centered, x)) - half, 0.0, upper, xtol=1e-12)
    return 2.0 * half_width


def per_cavity_fwhm_for_chain(target_fwhm: float, n_cavities: int = 2) -> float:
    '''
    Per-cavity FWHM that makes a chain of `n_cavities` identical cavities
    `target_fwhm` wide.

    Example:
        - (22, 2) => 22 / sqrt(sqrt(2) - 1) ≈ 34.19 MHz
    '''
    if not target_fwhm > 0 or n_cavities < 1:
        raise InvalidInputError('Target width must be positive and the chain non-empty.', 'cavity_fwhm_mhz')
    return target_fwhm / np.sqrt(2.0 ** (1.0 / n_cavities) - 1.0)


def chain_profile(chain: FilterChainConfig) -> LineProfile:
    '''The chain transmission as a unit-peak sampled profile centered on zero.'''
    width = chain_fwhm(chain)
    grid = spectrum_grid(0.0, width)
    return LineProfile.sampled(grid, filter_transmission(chain.with_offset(0.0), grid) / chain.peak_transmission)


def spectrum_grid(center: float, fwhm: float,
                  points_per_fwhm: int = FILTERED_SPECTRUM_POINTS_PER_FWHM,
                  half_span_fwhm: int = FILTERED_SPECTRUM_HALF_SPAN_FWHM) -> np.ndarray:
    n_points = 2 * half_span_fwhm * points_per_fwhm + 1
    return np.linspace(center - half_span_fwhm * fwhm, center + half_span_fwhm * fwhm, n_points)


def filtered_photon_spectrum(config: SpdcSourceConfig, chain: FilterChainConfig, temperature: float) -> LineProfile:
    '''
    Spectral flux density (photons/(s·MHz)) behind the filter chain, sampled on
    a grid of ±10 chain widths around the filter center.
    '''
    width = chain_fwhm(chain)
    if width > NARROW_FILTER_RATIO * config.envelope_fwhm * MHZ_PER_GHZ:
        logger.warning('Filter chain (%.6g MHz) is not much narrower than the SPDC envelope (%.6g GHz); '
                       'the filtered spectrum follows the envelope shape.', width, config.envelope_fwhm)
    grid = spectrum_grid(chain.detuning_offset, width)
    density = spectral_flux_density(config, grid / MHZ_PER_GHZ, temperature) * filter_transmission(chain, grid)
    profile = LineProfile(center=chain.detuning_offset, fwhm=width, peak=float(np.max(density)),
                          shape=LineShape.SAMPLED, grid=grid, values=density)
    return profile


def integrated_rate(profile: LineProfile) -> float:
    '''Integral of a sampled spectral density over its grid, e.g. photons/s for photons/(s·MHz).'''
    if profile.grid is None:
        raise InvalidInputError('Only sampled-grid profiles can be integrated on their grid.', 'profile')
    return float(trapezoid(profile.values, profile.grid))


def filtered_arm_count_rate(config: SpdcSourceConfig, chain: FilterChainConfig, temperature: float,
                            detection_efficiency: float = 1.0) -> float:
    '''Photon rate (1/s) detected behind the filter chain.'''
    if not 0 < detection_efficiency <= 1:
        raise InvalidInputError('Detection efficiency must lie in (0, 1].', 'detection_efficiency')
    return detection_efficiency * integrated_rate(filtered_photon_spectrum(config, chain, temperature))


def filtered_arm_count_rates(config: SpdcSourceConfig, chain: FilterChainConfig, temperatures: Sequence[float],
                             detection_efficiency: float = 1.0) -> np.ndarray:
    '''Filtered-arm photon rate (1/s) at each crystal temperature.'''
    return np.array([filtered_arm_count_rate(config, chain, t, detection_efficiency) for t in temperatures])
