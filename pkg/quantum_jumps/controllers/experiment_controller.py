import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

from celery import group
from celery.canvas import Signature
from django.db import models

from quantum_jumps.exceptions import InvalidInputError
from quantum_jumps.experiment_config import ExperimentConfig
from quantum_jumps.file_paths import get_report_path, get_scan_path, get_spectrum_path, get_trace_path
from quantum_jumps.helper.analysis import (ErrorMethod, JumpEvents, LorentzianFit, Polarity, default_threshold,
                                           detect_jumps, detection_fidelity, dwell_statistics, estimate_rate,
                                           fit_convolved_line, fit_lorentzian, rate_from_counts)
from quantum_jumps.helper.interaction_model import (SECONDS_PER_MINUTE, FluxModel, ScanKind, ScanResult,
                                                    filter_kernel, filtered_arm_count_scan, filtered_arm_peak_rate,
                                                    frequency_scan_model, laser_scan_model, predicted_jump_rate,
                                                    resonant_flux, temperature_scan_model, unfiltered_overlap_flux)
from quantum_jumps.helper.rng import generator_label
from quantum_jumps.helper.spdc_source import (chain_fwhm, filtered_photon_spectrum, integrated_rate,
                                              spectral_flux_density, unfiltered_arm_flux)
from quantum_jumps.helper.trajectory_sim import CountTrace, ensemble_cycle_rate, stationary_dark_fraction
from quantum_jumps.renderers import (fmt, read_scan, read_trace, render_report, render_scan, render_spectrum,
                                     write_lines)
from quantum_jumps.tasks import count_photons_point, measure_jump_point, params_to_dict, simulate_trial

logger = logging.getLogger(__name__)


class ScanMode(models.TextChoices):
    ANALYTIC = 'analytic'
    MONTECARLO = 'montecarlo'


class AnalysisTask(models.TextChoices):
    JUMPS = 'jumps'
    DWELL = 'dwell'
    FIT = 'fit'
    FIT_CONVOLVED = 'fit-convolved'


@dataclass
class AnalysisOutcome:
    report: Dict[str, str]
    converged: bool = True


def output_header(config: ExperimentConfig, **extra: Any) -> Dict[str, Any]:
    '''Provenance lines written at the top of every output file.'''
    header: Dict[str, Any] = {'config_digest': config.digest, 'generator': generator_label()}
    header.update(extra)
    return header


def dispatch(signatures: Sequence[Signature], parallel: bool = True) -> List[Any]:
    '''
    Run task signatures and return their results in submission order. With
    `parallel` the tasks go out as one Celery group (executed in-process when
    no broker is configured); otherwise they run one after the other here.
    '''
    if len(signatures) == 0:
        return []
    if parallel:
        return [result.get() for result in group(signatures).apply_async().results]
    return [signature.apply().get() for signature in signatures]


# Rate prediction

def resonant_photon_flux(config: ExperimentConfig, temperature: float) -> float:
    '''Photons/s driving the 850 nm line at crystal temperature `temperature`.'''
    spdc = config.spdc()
    if config.value('coupling', 'flux_model') == FluxModel.OVERLAP:
        return unfiltered_overlap_flux(spdc, config.line(), temperature)
    density = float(spectral_flux_density(spdc, 0.0, temperature))
    return resonant_flux(density, config.value('coupling', 'absorption_bandwidth_mhz'))


def peak_pump_rate(config: ExperimentConfig) -> float:
    '''SPDC-induced jump rate (1/s) with the envelope centered on the line.'''
    return predicted_jump_rate(resonant_photon_flux(config, config.value('spdc', 'ref_temperature_c')),
                               config.coupling())


def frequency_peak_rate(config: ExperimentConfig) -> float:
    configured = config.value('coupling', 'frequency_peak_rate_per_min')
    if configured is not None:
        return configured
    return filtered_arm_peak_rate(config.spdc(), config.filter_chain(), config.absorption_window(), config.line(),
                                  config.coupling(), config.value('coupling', 'flux_model'))


def laser_peak_rate(config: ExperimentConfig) -> float:
    configured = config.value('coupling', 'laser_peak_rate_per_min')
    return frequency_peak_rate(config) if configured is None else configured


def factor_chain_report(config: ExperimentConfig) -> Dict[str, str]:
    '''
    The rate estimate line by line: photon flux, each coupling factor, their
    product and the resulting jump rate, in the order the chain applies them.
    '''
    spdc = config.spdc()
    f = config.coupling()
    flux = resonant_photon_flux(config, spdc.ref_temperature)
    rate = predicted_jump_rate(flux, f)
    background = config.value('telegraph', 'background_jump_rate_per_min')

    report: Dict[str, str] = {
        'flux_model': config.value('coupling', 'flux_model'),
        'peak_flux_density': fmt(spdc.peak_flux_density),
        'absorption_bandwidth_mhz': fmt(config.value('coupling', 'absorption_bandwidth_mhz')),
        'flux_photons_per_s': fmt(flux),
    }
    for name, value in f.items():
        report[name] = fmt(value)
    report['factor_product'] = fmt(f.product())
    report['rate_per_s'] = fmt(rate)
    report['rate_per_min'] = fmt(rate * SECONDS_PER_MINUTE)
    report['seconds_per_jump'] = fmt(1.0 / rate)
    report['background_per_min'] = fmt(background)
    report['total_rate_per_min'] = fmt(background + rate * SECONDS_PER_MINUTE)
    report['unfiltered_arm_flux_per_s'] = fmt(unfiltered_arm_flux(spdc))
    report['filter_chain_fwhm_mhz'] = fmt(chain_fwhm(config.filter_chain()))
    report['filtered_arm_peak_rate_per_min'] = fmt(frequency_peak_rate(config))
    return report


def run_predict(config: ExperimentConfig, out_dir: Optional[str]) -> Tuple[Dict[str, str], List[str]]:
    '''Compute the factor-chain report and write it with the filtered-arm spectrum.'''
    report = factor_chain_report(config)
    spdc = config.spdc()
    spectrum = filtered_photon_spectrum(spdc, config.filter_chain(), spdc.ref_temperature)
    report['filtered_arm_photons_per_s'] = fmt(integrated_rate(spectrum))
    header = output_header(config)
    report_path = write_lines(get_report_path(out_dir, 'predict'), render_report(report, header))
    spectrum_path = write_lines(get_spectrum_path(out_dir), render_spectrum(spectrum, header))
    return report, [report_path, spectrum_path]


# Scans

def analytic_scan(config: ExperimentConfig, kind: str) -> ScanResult:
    meta = {'mode': ScanMode.ANALYTIC.value}
    bg = config.background()
    if kind == ScanKind.TEMPERATURE:
        flux_model = config.value('coupling', 'flux_model')
        line = config.line() if flux_model == FluxModel.OVERLAP else config.absorption_window()
        return temperature_scan_model(config.spdc(), line, config.coupling(), bg, config.temperature_grid(),
                                      flux_model, meta)
    elif kind == ScanKind.FREQUENCY:
        return frequency_scan_model(config.filter_chain(), config.line(), frequency_peak_rate(config), bg,
                                    config.frequency_grid(), config.value('filter', 'filter_shape'), meta)
    elif kind == ScanKind.LASER:
        return laser_scan_model(config.line(), laser_peak_rate(config), bg, config.frequency_grid(), meta)
    elif kind == ScanKind.FILTERED_ARM:
        return filtered_arm_count_scan(config.spdc(), config.filter_chain(), config.temperature_grid(),
                                       config.value('filter', 'detection_efficiency'), meta)
    raise InvalidInputError(f'Unknown scan kind {kind!r}.', 'kind')


def jump_protocol(config: ExperimentConfig, kind: str) -> Tuple[List[float], str]:
    '''Sub-measurement durations (s) per point and the error rule of a Monte Carlo jump scan.'''
    if kind == ScanKind.TEMPERATURE:
        return [config.value('scan', 'temperature_duration_s')], ErrorMethod.POISSON_SQRT.value
    n = config.value('scan', 'frequency_submeasurements')
    method = config.value('analysis', 'frequency_error_method')
    return [config.value('scan', 'frequency_submeasurement_s')] * n, method


def detection_threshold(config: ExperimentConfig, trace_or_params: Any, bin_width: float) -> float:
    configured = config.value('analysis', 'threshold_counts')
    if configured is not None:
        return configured
    params = trace_or_params.params if isinstance(trace_or_params, CountTrace) else trace_or_params
    return default_threshold(params, bin_width)


def montecarlo_scan(config: ExperimentConfig, kind: str, parallel: bool = True) -> ScanResult:
    '''
    Simulate the measurement behind each point of the analytic scan. Point i
    draws from the streams (master_seed, i, ...), so the result does not
    depend on how the points are scheduled.
    '''
    model = analytic_scan(config, kind)
    seed = config.master_seed
    meta: Dict[str, Any] = dict(model.meta)
    meta.update({'mode': ScanMode.MONTECARLO.value, 'master_seed': seed})

    if kind == ScanKind.FILTERED_ARM:
        n = config.value('scan', 'count_measurements')
        dt = config.value('scan', 'count_measurement_s')
        signatures = [count_photons_point.s(float(rate), n, dt, seed, i) for i, rate in enumerate(model.rates)]
        rates, errors = [], []
        for samples in dispatch(signatures, parallel):
            mean = math.fsum(samples) / len(samples)
            std = math.sqrt(math.fsum((s - mean) ** 2 for s in samples) / (len(samples) - 1))
            rates.append(mean)
            errors.append(std / math.sqrt(len(samples)))
        meta['error_method'] = ErrorMethod.SEM.value
        return ScanResult(model.x_values, rates, errors, meta)

    durations, method = jump_protocol(config, kind)
    bg_per_s = config.value('telegraph', 'background_jump_rate_per_min') / SECONDS_PER_MINUTE
    bin_width = config.value('telegraph', 'bin_width_s')
    start_state = config.value('telegraph', 'start_state')
    min_run = config.value('analysis', 'min_run')
    signatures = []
    for i, rate in enumerate(model.rates):
        pump = max(rate / SECONDS_PER_MINUTE - bg_per_s, 0.0)
        params = config.telegraph_params(pump)
        threshold = detection_threshold(config, params, bin_width)
        signatures.append(measure_jump_point.s(params_to_dict(params), durations, bin_width, seed, i, start_state,
                                               threshold, min_run))
    rates, errors = [], []
    for results in dispatch(signatures, parallel):
        estimate = rate_from_counts([r['n_cycles'] for r in results], [r['observation_time'] for r in results],
                                    method)
        rates.append(estimate.rate)
        errors.append(estimate.error)
    meta['error_method'] = method
    return ScanResult(model.x_values, rates, errors, meta)


def run_scan(config: ExperimentConfig, kind: str, mode: str, out_dir: Optional[str],
             parallel: bool = True) -> Tuple[ScanResult, str]:
    if mode == ScanMode.MONTECARLO:
        scan = montecarlo_scan(config, kind, parallel)
    else:
        scan = analytic_scan(config, kind)
    header = output_header(config, kind=kind, mode=mode, unit=scan.meta['unit'], x_unit=scan.meta['x_unit'])
    if mode == ScanMode.MONTECARLO:
        header.update({'master_seed': config.master_seed, 'error_method': scan.meta['error_method']})
    path = write_lines(get_scan_path(out_dir, kind, mode), render_scan(scan, header))
    logger.info('Wrote %s scan (%s, %d points) to %s', kind, mode, len(scan), path)
    return scan, path


# Simulation

def run_simulation(config: ExperimentConfig, out_dir: Optional[str], duration: Optional[float] = None,
                   seed: Optional[int] = None, trials: Optional[int] = None, trial: Optional[int] = None,
                   parallel: bool = True) -> List[Dict[str, Any]]:
    '''
    Simulate traces at the peak pump rate (envelope on the line). A single run
    uses the stream of the seed alone; trial k of a batch the stream (seed, k),
    so `trial=k` reproduces that member of the batch on its own.
    '''
    duration = config.value('telegraph', 'duration_s') if duration is None else duration
    bin_width = config.value('telegraph', 'bin_width_s')
    if not math.isfinite(duration):
        raise InvalidInputError(f'Duration must be a finite number of seconds, got {duration}.', 'duration')
    if duration < bin_width:
        raise InvalidInputError(f'Duration {duration} s is shorter than one bin ({bin_width} s).', 'duration')
    seed = config.master_seed if seed is None else seed
    if seed < 0:
        raise InvalidInputError('Seed must be non-negative.', 'seed')
    if trials is not None and trials < 1:
        raise InvalidInputError('At least one trial is required.', 'trials')
    if trial is not None and trial < 0:
        raise InvalidInputError(f'Trial index must be non-negative, got {trial}.', 'trial')

    if trial is not None:
        runs = [([trial], get_trace_path(out_dir, trial))]
    elif trials is not None:
        runs = [([k], get_trace_path(out_dir, k)) for k in range(trials)]
    else:
        runs = [([], get_trace_path(out_dir))]

    params = config.telegraph_params(peak_pump_rate(config))
    header = output_header(config)
    start_state = config.value('telegraph', 'start_state')
    signatures = [simulate_trial.s(params_to_dict(params), duration, bin_width, seed, stream, start_state, path,
                                   header) for stream, path in runs]
    return dispatch(signatures, parallel)


# Analysis

def jumps_report(config: ExperimentConfig, traces: Sequence[CountTrace], method: str) -> Dict[str, str]:
    min_run = config.value('analysis', 'min_run')
    batch: List[JumpEvents] = []
    recalled = true_cycles = false_cycles = 0
    for trace in traces:
        events = detect_jumps(trace, detection_threshold(config, trace, trace.bin_width), min_run)
        batch.append(events)
        fidelity = detection_fidelity(events, trace)
        recalled += fidelity.n_matched
        true_cycles += fidelity.n_true
        false_cycles += fidelity.n_detected - fidelity.n_matched
    estimate = estimate_rate(batch, method)
    minutes = sum(e.observation_time for e in batch) / SECONDS_PER_MINUTE
    params = traces[0].params

    report = {
        'n_traces': str(len(traces)),
        'observation_time_s': fmt(minutes * SECONDS_PER_MINUTE),
        'n_transitions': str(sum(e.n_transitions for e in batch)),
        'n_cycles': str(estimate.n_events),
        'rate_per_min': fmt(estimate.rate),
        'error_per_min': fmt(estimate.error),
        'error_method': estimate.method,
        'min_run': str(min_run),
        'configured_jump_rate_per_min': fmt(params.bright_to_dark_rate * SECONDS_PER_MINUTE),
        'expected_cycle_rate_per_min': fmt(ensemble_cycle_rate(params) * SECONDS_PER_MINUTE),
        'expected_dark_fraction': fmt(stationary_dark_fraction(params)),
        'true_cycles': str(true_cycles),
        'recall': fmt(recalled / true_cycles) if true_cycles else '1',
        'false_cycle_rate_per_min': fmt(false_cycles / minutes),
    }
    return report


def dwell_report(config: ExperimentConfig, trace: CountTrace) -> Dict[str, str]:
    events = detect_jumps(trace, detection_threshold(config, trace, trace.bin_width),
                          config.value('analysis', 'min_run'))
    confidence = config.value('analysis', 'confidence')
    result = dwell_statistics(events, trace, confidence, config.value('analysis', 'min_dwells'))
    return {
        'n_dwells': str(result.n_dwells),
        'mean_dwell_s': fmt(result.mean_dwell),
        'mle_mean_s': fmt(result.mle_mean),
        'ci_low_s': fmt(result.ci_low),
        'ci_high_s': fmt(result.ci_high),
        'confidence': fmt(confidence),
    }


def fit_report(config: ExperimentConfig, fit: LorentzianFit, scan: ScanResult) -> Dict[str, str]:
    report = fit.as_report()
    confidence = config.value('analysis', 'confidence')
    for name in ('center', 'fwhm'):
        if name in fit.stderr:
            low, high = fit.confidence_interval(name, confidence)
            report[f'{name}_ci_low_mhz'] = f'{low:.10g}'
            report[f'{name}_ci_high_mhz'] = f'{high:.10g}'
    report['scan_kind'] = scan.kind or 'unknown'
    report['x_unit'] = str(scan.meta.get('x_unit', 'MHz'))
    report['n_points'] = str(len(scan))
    return report


def run_analysis(config: ExperimentConfig, paths: Sequence[str], task: str, out_dir: Optional[str],
                 method: Optional[str] = None, polarity: str = Polarity.PEAK) -> Tuple[AnalysisOutcome, str]:
    '''
    Analyse trace files (jumps, dwell) or one scan file (fit, fit-convolved)
    and write `<task>_report.txt`. A fit that does not converge still gets its
    report, flagged `converged=false`.
    '''
    if len(paths) == 0:
        raise InvalidInputError('At least one input file is required.', 'files')
    background = config.value('analysis', 'background_per_min')
    if task == AnalysisTask.JUMPS:
        traces = [read_trace(path) for path in paths]
        outcome = AnalysisOutcome(jumps_report(config, traces, method or ErrorMethod.POISSON_SQRT))
    elif task == AnalysisTask.DWELL:
        if len(paths) != 1:
            raise InvalidInputError('Dwell statistics take exactly one trace file.', 'files')
        outcome = AnalysisOutcome(dwell_report(config, read_trace(paths[0])))
    elif task in (AnalysisTask.FIT, AnalysisTask.FIT_CONVOLVED):
        if len(paths) != 1:
            raise InvalidInputError('Line fits take exactly one scan file.', 'files')
        scan = read_scan(paths[0])
        if task == AnalysisTask.FIT:
            fit = fit_lorentzian(scan, polarity, background)
        else:
            known_filter = filter_kernel(config.filter_chain(), config.value('filter', 'filter_shape'))
            fit = fit_convolved_line(scan, known_filter, background)
        outcome = AnalysisOutcome(fit_report(config, fit, scan), fit.converged)
    else:
        raise InvalidInputError(f'Unknown analysis task {task!r}.', 'task')

    header = output_header(config, task=task, inputs=','.join(paths))
    path = write_lines(get_report_path(out_dir, task.replace('-', '_')), render_report(outcome.report, header))
    return outcome, path
