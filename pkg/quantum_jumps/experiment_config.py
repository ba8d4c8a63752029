'''
Experiment configuration: a flat INI file with one section per model component.

Every key has a default, so an empty file (or no file) describes the reference
experiment. Values are validated against the schema below and again by the
model types they build. The digest is computed over the fully defaulted,
canonicalised content and is written into every output file.
'''
import configparser
import hashlib
import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.core.exceptions import ValidationError
from django.core.validators import MaxValueValidator, MinValueValidator
from django.db import models

from quantum_jumps.exceptions import ConfigValidationError, InvalidInputError
from quantum_jumps.helper.analysis import ErrorMethod
from quantum_jumps.helper.atom_model import (DarkStateParams, LineProfile, RateMatrix, absorption_profile,
                                             default_rate_matrix, load_rate_matrix, steady_state_populations)
from quantum_jumps.helper.interaction_model import (BackgroundRates, CouplingFactors, FilterShape, FluxModel,
                                                    check_scan_grid)
from quantum_jumps.helper.rng import GENERATOR_NAME
from quantum_jumps.helper.spdc_source import EnvelopeShape, FilterChainConfig, SpdcSourceConfig
from quantum_jumps.helper.trajectory_sim import FluorescenceState, TelegraphParams
from quantum_jumps.validators import ChoiceValidator, GreaterThanValidator, NonEmptyValidator, NonZeroValidator

logger = logging.getLogger(__name__)

AUTO = 'auto'


class ValueKind(models.TextChoices):
    FLOAT = 'float'
    OPTIONAL_FLOAT = 'optional-float'
    INTEGER = 'integer'
    CHOICE = 'choice'
    FLOAT_LIST = 'float-list'
    PATH = 'path'


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: str
    default: str
    help: str
    validators: Tuple[Callable[[Any], None], ...] = ()
    list_validators: Tuple[Callable[[Any], None], ...] = ()


def positive(*extra: Callable[[Any], None]) -> Tuple[Callable[[Any], None], ...]:
    return (GreaterThanValidator(0),) + extra


def fraction_of_one() -> Tuple[Callable[[Any], None], ...]:
    return (GreaterThanValidator(0), MaxValueValidator(1))


def choices(enum: Any) -> Tuple[Callable[[Any], None], ...]:
    return (ChoiceValidator(enum.values),)


SCHEMA: Dict[str, Tuple[ConfigKey, ...]] = {
    'atom': (
        ConfigKey('natural_fwhm_mhz', ValueKind.FLOAT, '25', 'Natural linewidth of P3/2 (MHz)', positive()),
        ConfigKey('zeeman_broadening_mhz', ValueKind.FLOAT, '11',
                  'Additional broadening of the 850 nm line (MHz)', (MinValueValidator(0),)),
        ConfigKey('dark_dwell_s', ValueKind.FLOAT, '1.2', 'Mean residence time in D5/2 (s)', positive()),
        ConfigKey('rate_matrix_file', ValueKind.PATH, '',
                  'CSV rate matrix; empty uses the shipped calibration'),
    ),
    'spdc': (
        ConfigKey('envelope_fwhm_ghz', ValueKind.FLOAT, '200', 'FWHM of the phase-matching envelope (GHz)',
                  positive()),
        ConfigKey('peak_flux_density', ValueKind.FLOAT, '250', 'On-peak flux density (photons/(s MHz))',
                  positive()),
        ConfigKey('temp_slope_ghz_per_c', ValueKind.FLOAT, '-59', 'Envelope tuning with crystal temperature',
                  (NonZeroValidator(),)),
        ConfigKey('ref_temperature_c', ValueKind.FLOAT, '40',
                  'Crystal temperature at which the envelope is centered on the line (C)'),
        ConfigKey('envelope_shape', ValueKind.CHOICE, EnvelopeShape.GAUSSIAN.value, 'Envelope shape',
                  choices(EnvelopeShape)),
    ),
    'filter': (
        ConfigKey('cavity_fwhm_mhz', ValueKind.FLOAT_LIST, '34.19, 34.19', 'Per-cavity FWHM (MHz)',
                  positive(), (NonEmptyValidator(),)),
        ConfigKey('peak_transmission', ValueKind.FLOAT, '0.5', 'On-resonance transmission of the chain',
                  fraction_of_one()),
        ConfigKey('detuning_offset_mhz', ValueKind.FLOAT, '0', 'Filter center relative to the line (MHz)'),
        ConfigKey('filter_shape', ValueKind.CHOICE, FilterShape.LORENTZIAN.value,
                  'Spectral shape of the filtered photons in the frequency scan', choices(FilterShape)),
        ConfigKey('detection_efficiency', ValueKind.FLOAT, '1', 'Detector efficiency behind the filters',
                  fraction_of_one()),
    ),
    'coupling': (
        ConfigKey('d32_population', ValueKind.OPTIONAL_FLOAT, AUTO,
                  'D3/2 population; auto takes it from the steady state of the rate matrix',
                  fraction_of_one()),
        ConfigKey('dipole_fraction', ValueKind.FLOAT, '0.007', 'Share of the total dipole', fraction_of_one()),
        ConfigKey('branching_to_d52', ValueKind.FLOAT, '0.059', 'P3/2 -> D5/2 branching', fraction_of_one()),
        ConfigKey('polarization_match', ValueKind.FLOAT, '1/3', 'Polarization match', fraction_of_one()),
        ConfigKey('geometric_overlap', ValueKind.FLOAT, '0.02', 'Spatial mode overlap', fraction_of_one()),
        ConfigKey('absorption_bandwidth_mhz', ValueKind.FLOAT, '22', 'Width of the flux window (MHz)',
                  positive()),
        ConfigKey('flux_model', ValueKind.CHOICE, FluxModel.RECTANGULAR.value, 'Flux estimate',
                  choices(FluxModel)),
        ConfigKey('frequency_peak_rate_per_min', ValueKind.OPTIONAL_FLOAT, AUTO,
                  'Filtered-arm peak jump rate; auto derives it from the factor chain',
                  (MinValueValidator(0),)),
        ConfigKey('laser_peak_rate_per_min', ValueKind.OPTIONAL_FLOAT, AUTO,
                  'Peak jump rate of the laser reference scan; auto uses the filtered-arm peak rate',
                  (MinValueValidator(0),)),
    ),
    'telegraph': (
        ConfigKey('background_jump_rate_per_min', ValueKind.FLOAT, '0.09', 'Jumps without SPDC light (1/min)',
                  (MinValueValidator(0),)),
        ConfigKey('bright_count_rate', ValueKind.FLOAT, '50000', 'Detected fluorescence, bright (counts/s)',
                  (MinValueValidator(0),)),
        ConfigKey('dark_count_rate', ValueKind.FLOAT, '500', 'Detected background, dark (counts/s)',
                  (MinValueValidator(0),)),
        ConfigKey('bin_width_s', ValueKind.FLOAT, '0.002', 'Counting bin width (s)', positive()),
        ConfigKey('start_state', ValueKind.CHOICE, FluorescenceState.BRIGHT.value, 'State at t = 0',
                  choices(FluorescenceState)),
        ConfigKey('duration_s', ValueKind.FLOAT, '3600', 'Default trace duration for simulate (s)', positive()),
    ),
    'scan': (
        ConfigKey('temperature_span_c', ValueKind.FLOAT, '5', 'Temperature scan half-span around ref (C)',
                  positive()),
        ConfigKey('temperature_points', ValueKind.INTEGER, '11', 'Temperature scan points',
                  (MinValueValidator(1),)),
        ConfigKey('temperature_duration_s', ValueKind.FLOAT, '3600', 'Measurement time per temperature (s)',
                  positive()),
        ConfigKey('frequency_span_mhz', ValueKind.FLOAT, '150', 'Frequency scan half-span (MHz)', positive()),
        ConfigKey('frequency_points', ValueKind.INTEGER, '13', 'Frequency scan points', (MinValueValidator(1),)),
        ConfigKey('frequency_submeasurements', ValueKind.INTEGER, '16', 'Sub-measurements per frequency',
                  (MinValueValidator(2),)),
        ConfigKey('frequency_submeasurement_s', ValueKind.FLOAT, '300', 'Duration of one sub-measurement (s)',
                  positive()),
        ConfigKey('count_measurements', ValueKind.INTEGER, '120', 'Counting intervals per filtered-arm point',
                  (MinValueValidator(2),)),
        ConfigKey('count_measurement_s', ValueKind.FLOAT, '1', 'Duration of one counting interval (s)',
                  positive()),
    ),
    'rng': (
        ConfigKey('master_seed', ValueKind.INTEGER, '20090101', 'Master seed of every random stream',
                  (MinValueValidator(0),)),
        ConfigKey('generator', ValueKind.CHOICE, GENERATOR_NAME, 'Bit generator', (ChoiceValidator([GENERATOR_NAME]),)),
    ),
    'analysis': (
        ConfigKey('threshold_counts', ValueKind.OPTIONAL_FLOAT, AUTO,
                  'Bright/dark threshold (counts/bin); auto is the midpoint of the means', positive()),
        ConfigKey('min_run', ValueKind.INTEGER, '2', 'Consecutive bins needed to flip state',
                  (MinValueValidator(1),)),
        ConfigKey('min_dwells', ValueKind.INTEGER, '10', 'Complete dwells needed for dwell statistics',
                  (MinValueValidator(1),)),
        ConfigKey('confidence', ValueKind.FLOAT, '0.95', 'Confidence level of intervals',
                  (GreaterThanValidator(0), MaxValueValidator(0.999999))),
        ConfigKey('background_per_min', ValueKind.OPTIONAL_FLOAT, AUTO,
                  'Known scan background; auto fits the offset freely', (MinValueValidator(0),)),
        ConfigKey('frequency_error_method', ValueKind.CHOICE, ErrorMethod.SEM.value,
                  'Error rule of Monte Carlo frequency scans', choices(ErrorMethod)),
    ),
}


def parse_number(raw: str) -> float:
    '''Parse a float, also accepting fractions such as "1/3".'''
    try:
        value = float(raw)
    except ValueError:
        value = float(Fraction(raw.replace(' ', '')))
    if not math.isfinite(value):
        raise ValueError(f'{raw!r} is not a finite number')
    return value


def parse_value(spec: ConfigKey, raw: str) -> Any:
    raw = raw.strip()
    if spec.kind == ValueKind.FLOAT:
        return parse_number(raw)
    elif spec.kind == ValueKind.OPTIONAL_FLOAT:
        if raw in ('', AUTO):
            return None
        return parse_number(raw)
    elif spec.kind == ValueKind.INTEGER:
        return int(raw)
    elif spec.kind == ValueKind.FLOAT_LIST:
        return tuple(parse_number(item) for item in raw.split(',') if item.strip())
    return raw


def canonical_value(spec: ConfigKey, value: Any) -> str:
    if value is None:
        return AUTO
    if spec.kind in (ValueKind.FLOAT, ValueKind.OPTIONAL_FLOAT):
        return repr(float(value))
    if spec.kind == ValueKind.FLOAT_LIST:
        return ', '.join(repr(float(v)) for v in value)
    return str(value)


def run_validators(section: str, spec: ConfigKey, value: Any) -> None:
    if value is None:
        return
    scalars = value if spec.kind == ValueKind.FLOAT_LIST else (value,)
    try:
        for validator in spec.list_validators:
            validator(value)
        for scalar in scalars:
            for validator in spec.validators:
                validator(scalar)
    except ValidationError as exc:
        raise ConfigValidationError(section, spec.name, '; '.join(exc.messages)) from exc


def parse_override(override: str) -> Tuple[str, str, str]:
    '''Split "section.key=value".'''
    target, sep, value = override.partition('=')
    section, dot, key = target.strip().partition('.')
    if not sep or not dot or not section or not key:
        raise ConfigValidationError(section or '?', key or None,
                                    f'Override {override!r} is not of the form section.key=value.')
    return section, key, value


class ExperimentConfig:
    '''
    Validated experiment parameters. Build one with `load` (file plus
    overrides) or `defaults`; read typed values with `value(section, key)`
    and the model objects with the builder methods.
    '''

    def __init__(self, raw: Dict[str, Dict[str, str]], source: str = '<defaults>',
                 base_dir: Optional[str] = None) -> None:
        self.source = source
        self.base_dir = base_dir or os.getcwd()
        self._values: Dict[str, Dict[str, Any]] = {}
        for section, entries in raw.items():
            if section not in SCHEMA:
                raise ConfigValidationError(section, None, f'Unknown section. Known sections: {", ".join(SCHEMA)}.')
            known = {spec.name for spec in SCHEMA[section]}
            for key in entries:
                if key not in known:
                    raise ConfigValidationError(section, key, 'Unknown key.')
        for section, specs in SCHEMA.items():
            self._values[section] = {}
            for spec in specs:
                text = raw.get(section, {}).get(spec.name, spec.default)
                try:
                    value = parse_value(spec, text)
                except (ValueError, ZeroDivisionError) as exc:
                    raise ConfigValidationError(section, spec.name, f'Cannot parse {text!r} as {spec.kind}.') from exc
                run_validators(section, spec, value)
                self._values[section][spec.name] = value
        self._validate_models()

    @classmethod
    def defaults(cls) -> 'ExperimentConfig':
        return cls({})

    @classmethod
    def from_string(cls, text: str, overrides: Sequence[str] = (), source: str = '<string>',
                    base_dir: Optional[str] = None) -> 'ExperimentConfig':
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'),
                                           empty_lines_in_values=False)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigValidationError(getattr(exc, 'section', None) or '?', getattr(exc, 'option', None),
                                        f'Malformed config file {source}: {exc}') from exc
        raw: Dict[str, Dict[str, str]] = {section: dict(parser[section]) for section in parser.sections()}
        for override in overrides:
            section, key, value = parse_override(override)
            raw.setdefault(section, {})[key] = value
        return cls(raw, source, base_dir)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> 'ExperimentConfig':
        '''Read `path` (None for pure defaults) and apply `section.key=value` overrides.'''
        if path is None:
            return cls.from_string('', overrides, '<defaults>')
        with open(path) as handle:
            text = handle.read()
        return cls.from_string(text, overrides, path, os.path.dirname(os.path.abspath(path)))

    def value(self, section: str, key: str) -> Any:
        return self._values[section][key]

    def section(self, section: str) -> Dict[str, Any]:
        return dict(self._values[section])

    def canonical_text(self) -> str:
        lines: List[str] = []
        for section in sorted(SCHEMA):
            lines.append(f'[{section}]')
            for spec in sorted(SCHEMA[section], key=lambda s: s.name):
                lines.append(f'{spec.name} = {canonical_value(spec, self._values[section][spec.name])}')
        return '\n'.join(lines) + '\n'

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode('utf-8')).hexdigest()

    @property
    def master_seed(self) -> int:
        return self.value('rng', 'master_seed')

    def _validate_models(self) -> None:
        builders = (('atom', self.line), ('atom', self.dark_state), ('spdc', self.spdc),
                    ('filter', self.filter_chain), ('telegraph', self.background),
                    ('scan', self.temperature_grid), ('scan', self.frequency_grid))
        for section, build in builders:
            try:
                build()
            except InvalidInputError as exc:
                raise ConfigValidationError(section, exc.field or None, str(exc)) from exc

    # Model builders

    def line(self) -> LineProfile:
        return absorption_profile(self.value('atom', 'natural_fwhm_mhz'), self.value('atom', 'zeeman_broadening_mhz'))

    def dark_state(self) -> DarkStateParams:
        return DarkStateParams(mean_dwell=self.value('atom', 'dark_dwell_s'))

    def rate_matrix(self) -> RateMatrix:
        path = self.value('atom', 'rate_matrix_file')
        if not path:
            return default_rate_matrix()
        return load_rate_matrix(os.path.join(self.base_dir, path))

    def d32_population(self) -> float:
        value = self.value('coupling', 'd32_population')
        if value is None:
            value = steady_state_populations(self.rate_matrix())['D32']
        return value

    def spdc(self) -> SpdcSourceConfig:
        return SpdcSourceConfig(envelope_fwhm=self.value('spdc', 'envelope_fwhm_ghz'),
                                peak_flux_density=self.value('spdc', 'peak_flux_density'),
                                temp_slope=self.value('spdc', 'temp_slope_ghz_per_c'),
                                ref_temperature=self.value('spdc', 'ref_temperature_c'),
                                envelope_shape=self.value('spdc', 'envelope_shape'))

    def filter_chain(self) -> FilterChainConfig:
        return FilterChainConfig(cavity_fwhms=self.value('filter', 'cavity_fwhm_mhz'),
                                 peak_transmission=self.value('filter', 'peak_transmission'),
                                 detuning_offset=self.value('filter', 'detuning_offset_mhz'))

    def coupling(self) -> CouplingFactors:
        try:
            return CouplingFactors(d32_population=self.d32_population(),
                                   dipole_fraction=self.value('coupling', 'dipole_fraction'),
                                   branching_to_d52=self.value('coupling', 'branching_to_d52'),
                                   polarization_match=self.value('coupling', 'polarization_match'),
                                   geometric_overlap=self.value('coupling', 'geometric_overlap'))
        except InvalidInputError as exc:
            raise ConfigValidationError('coupling', exc.field or None, str(exc)) from exc

    def absorption_window(self) -> LineProfile:
        '''The rectangular flux window, carried as a profile of the configured width.'''
        return LineProfile.lorentzian(center=0.0, fwhm=self.value('coupling', 'absorption_bandwidth_mhz'))

    def background(self) -> BackgroundRates:
        return BackgroundRates(background_jump_rate=self.value('telegraph', 'background_jump_rate_per_min'),
                               bright_count_rate=self.value('telegraph', 'bright_count_rate'),
                               dark_count_rate=self.value('telegraph', 'dark_count_rate'))

    def telegraph_params(self, pump_rate: float = 0.0) -> TelegraphParams:
        '''Telegraph rates for an SPDC pump rate (1/s) on top of the background jumps.'''
        return TelegraphParams.from_jump_rates(pump_rate=pump_rate,
                                               background_jump_rate_per_min=self.value(
                                                   'telegraph', 'background_jump_rate_per_min'),
                                               mean_dark_dwell=self.value('atom', 'dark_dwell_s'),
                                               bright_count_rate=self.value('telegraph', 'bright_count_rate'),
                                               dark_count_rate=self.value('telegraph', 'dark_count_rate'))

    def temperature_grid(self) -> np.ndarray:
        ref = self.value('spdc', 'ref_temperature_c')
        span = self.value('scan', 'temperature_span_c')
        n = self.value('scan', 'temperature_points')
        grid = np.array([ref]) if n == 1 else np.linspace(ref - span, ref + span, n)
        return check_scan_grid(grid, 'temperature_points')

    def frequency_grid(self) -> np.ndarray:
        span = self.value('scan', 'frequency_span_mhz')
        n = self.value('scan', 'frequency_points')
        grid = np.array([0.0]) if n == 1 else np.linspace(-span, span, n)
        return check_scan_grid(grid, 'frequency_points')
