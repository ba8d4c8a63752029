import math
import os
import shutil
import tempfile
from io import StringIO
from typing import List

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from scipy import stats
from scipy.integrate import quad
from scipy.linalg import expm

from quantum_jumps.controllers.experiment_controller import (AnalysisTask, ScanMode, analytic_scan,
                                                             factor_chain_report, montecarlo_scan, peak_pump_rate,
                                                             run_analysis, run_scan, run_simulation)
from quantum_jumps.exceptions import (ConfigValidationError, DegenerateDynamicsError, FlatDataError,
                                      InsufficientDataError, InvalidInputError, InvalidThresholdError,
                                      ResolutionError, TraceFormatError)
from quantum_jumps.experiment_config import ExperimentConfig, parse_number
from quantum_jumps.helper.analysis import (ErrorMethod, JumpEvents, Polarity, combine_events, default_threshold,
                                           detect_jumps, detection_fidelity, dwell_statistics, estimate_rate,
                                           fit_convolved_line, fit_lorentzian, rate_from_counts)
from quantum_jumps.helper.atom_model import (DarkStateParams, LineProfile, RateMatrix, absorption_profile,
                                             dark_dwell_sampler, default_rate_matrix, load_rate_matrix,
                                             measure_fwhm, steady_state_populations)
from quantum_jumps.helper.interaction_model import (BackgroundRates, CouplingFactors, ScanResult, convolve_profiles,
                                                    filter_kernel, filtered_arm_count_scan, filtered_arm_peak_rate,
                                                    frequency_scan_model, laser_scan_model, overlap_flux,
                                                    predicted_jump_rate, resonant_flux, temperature_scan_model)
from quantum_jumps.helper.rng import generator_label, make_generator
from quantum_jumps.helper.spdc_source import (FilterChainConfig, SpdcSourceConfig, chain_fwhm, envelope_center,
                                              filter_transmission, filtered_photon_spectrum, integrated_rate,
                                              per_cavity_fwhm_for_chain, spectral_flux_density,
                                              unfiltered_arm_flux)
from quantum_jumps.helper.trajectory_sim import (CountTrace, FluorescenceState, TelegraphParams,
                                                 TransitionDirection, bin_means, ensemble_cycle_rate,
                                                 simulate_trace, simulate_trials, stationary_dark_fraction)
from quantum_jumps.renderers import read_comments, read_key_values, read_scan, read_spectrum, read_trace
from quantum_jumps.tasks import count_photons_point, measure_jump_point, params_to_dict
from spdc_jump_lab.celery import app

app.conf.task_always_eager = True
app.conf.task_eager_propagates = True

# Kolmogorov-Smirnov critical value at alpha = 0.01 for large n is 1.628 / sqrt(n)
KS_CRITICAL_COEFFICIENT = 1.628
SEED = 20090101
DEFAULT_FACTORS = CouplingFactors(0.6, 0.007, 0.059, 1.0 / 3.0, 0.02)


def make_trace(counts: List[int], params: TelegraphParams = None, bin_width: float = 0.002) -> CountTrace:
    params = params or TelegraphParams(bright_to_dark_rate=0.01)
    return CountTrace(bin_width=bin_width, counts=np.array(counts), start_state=FluorescenceState.BRIGHT, seed=0,
                      true_jumps=(), params=params)


def read_report(path: str):
    return {key: value for _, key, value in read_key_values(path)}


class OutputDirTestCase(SimpleTestCase):
    '''Base class for tests writing files; each test gets a fresh output directory.'''

    def setUp(self) -> None:
        self.out = tempfile.mkdtemp(prefix='quantum_jumps_')

    def tearDown(self) -> None:
        shutil.rmtree(self.out, ignore_errors=True)


class RngTest(SimpleTestCase):

    def test_same_stream_same_numbers(self):
        a = make_generator(7, 3, 15).random(5)
        b = make_generator(7, 3, 15).random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_distinct(self):
        self.assertFalse(np.array_equal(make_generator(7, 3).random(5), make_generator(7, 4).random(5)))
        self.assertFalse(np.array_equal(make_generator(7).random(5), make_generator(8).random(5)))

    def test_negative_indices_rejected(self):
        with self.assertRaises(ValueError):
            make_generator(-1)
        with self.assertRaises(ValueError):
            make_generator(1, -2)

    def test_label(self):
        self.assertEqual(generator_label(), 'philox-4x64-v1')


class AtomModelTest(SimpleTestCase):

    def test_calibration_gives_d32_population(self):
        populations = steady_state_populations(default_rate_matrix())
        self.assertAlmostEqual(populations['D32'], 0.6, places=6)
        self.assertEqual(populations['P32'], 0.0)
        self.assertEqual(populations['D52'], 0.0)
        self.assertAlmostEqual(float(populations.populations.sum()), 1.0, places=12)

    def test_two_level_balance(self):
        rates = RateMatrix.from_rates(('g', 'e'), {('g', 'e'): 1.0, ('e', 'g'): 3.0})
        populations = steady_state_populations(rates)
        self.assertAlmostEqual(populations['g'], 0.75, places=12)
        self.assertAlmostEqual(populations['e'], 0.25, places=12)

    def test_matches_time_integration_on_random_systems(self):
        rng = np.random.default_rng(12)
        labels = ('a', 'b', 'c')
        for _ in range(10):
            transitions = {(s, d): float(rng.uniform(0.5, 2.0)) for s in labels for d in labels if s != d}
            rates = RateMatrix.from_rates(labels, transitions)
            integrated = expm(rates.rates * 50.0) @ np.array([1.0, 0.0, 0.0])
            np.testing.assert_allclose(steady_state_populations(rates).populations, integrated, atol=1e-6)

    def test_uncoupled_level_gets_no_population(self):
        rates = RateMatrix.from_rates(('g', 'e', 'x'), {('g', 'e'): 1.0, ('e', 'g'): 1.0})
        populations = steady_state_populations(rates)
        self.assertEqual(populations['x'], 0.0)
        self.assertAlmostEqual(populations['g'], 0.5, places=12)

    def test_disconnected_blocks_are_degenerate(self):
        rates = RateMatrix.from_rates(('a', 'b', 'c', 'd'),
                                      {('a', 'b'): 1.0, ('b', 'a'): 1.0, ('c', 'd'): 1.0, ('d', 'c'): 1.0})
        with self.assertRaises(DegenerateDynamicsError):
            steady_state_populations(rates)

    def test_rejects_non_conserving_matrix(self):
        with self.assertRaises(InvalidInputError):
            RateMatrix(('a', 'b'), np.array([[-1.0, 1.0], [0.5, -1.0]]))

    def test_load_rate_matrix(self):
        with tempfile.NamedTemporaryFile('w', suffix='.csv', delete=False) as handle:
            handle.write(',S12,P12\nS12,-5,3\nP12,5,-3\n')
        try:
            rates = load_rate_matrix(handle.name)
        finally:
            os.remove(handle.name)
        self.assertEqual(rates.labels, ('S12', 'P12'))
        self.assertAlmostEqual(steady_state_populations(rates)['S12'], 3.0 / 8.0, places=12)

    def test_line_profiles(self):
        line = absorption_profile(25, 11)
        self.assertEqual(line.fwhm, 36)
        self.assertAlmostEqual(float(line.evaluate(18.0)), 0.5)
        self.assertAlmostEqual(float(LineProfile.gaussian(0.0, 10.0).evaluate(5.0)), 0.5)
        with self.assertRaises(InvalidInputError):
            absorption_profile(0, 11)

    def test_measure_fwhm_of_sampled_line(self):
        grid = np.linspace(-500, 500, 20001)
        values = LineProfile.lorentzian(3.0, 36.0).evaluate(grid)
        self.assertAlmostEqual(measure_fwhm(grid, values), 36.0, places=3)
        sampled = LineProfile.sampled(grid, values)
        self.assertAlmostEqual(sampled.center, 3.0, places=6)
        self.assertEqual(float(sampled.evaluate(1000.0)), 0.0)

    def test_dark_dwell_distribution(self):
        n = 10_000
        samples = dark_dwell_sampler(DarkStateParams(1.2), seed=SEED).sample(n)
        self.assertAlmostEqual(float(samples.mean()), 1.2, delta=0.05 * 1.2)
        statistic = stats.kstest(samples, 'expon', args=(0.0, 1.2)).statistic
        self.assertLess(statistic, KS_CRITICAL_COEFFICIENT / math.sqrt(n))

    def test_populations_ignore_time_scale(self):
        rates = default_rate_matrix()
        reference = steady_state_populations(rates).populations
        for factor in (1e-3, 7.5, 1e4):
            np.testing.assert_allclose(steady_state_populations(rates.scaled(factor)).populations, reference,
                                       atol=1e-10)
        with self.assertRaises(InvalidInputError):
            rates.scaled(0.0)

    def test_dark_dwell_moments(self):
        samples = dark_dwell_sampler(DarkStateParams(1.2), seed=SEED).sample(100_000)
        mean = float(samples.mean())
        self.assertGreaterEqual(mean, 1.188)
        self.assertLessEqual(mean, 1.212)
        self.assertAlmostEqual(float(samples.var()) / mean ** 2, 1.0, delta=0.02)

    def test_gaussian_area(self):
        line = LineProfile.gaussian(4.0, 10.0)
        area, _ = quad(lambda x: float(line.evaluate(x)), 4.0 - 30.0, 4.0 + 30.0)
        expected = 10.0 * math.sqrt(math.pi / (4.0 * math.log(2.0)))
        self.assertAlmostEqual(area, expected, delta=1e-3 * expected)

    def test_dark_dwell_sampler_is_reproducible(self):
        a = dark_dwell_sampler(DarkStateParams(), seed=3)
        b = dark_dwell_sampler(DarkStateParams(), seed=3)
        self.assertEqual([next(a) for _ in range(5)], [next(b) for _ in range(5)])


class SpdcSourceTest(SimpleTestCase):

    def test_temperature_tuning(self):
        spdc = SpdcSourceConfig()
        self.assertEqual(envelope_center(spdc, spdc.ref_temperature), 0.0)
        self.assertEqual(envelope_center(spdc, spdc.ref_temperature + 1), -59.0)

    def test_envelope_half_width(self):
        spdc = SpdcSourceConfig()
        self.assertAlmostEqual(float(spectral_flux_density(spdc, 0.0, spdc.ref_temperature)), 250.0)
        half_width_c = 100.0 / 59.0
        self.assertAlmostEqual(float(spectral_flux_density(spdc, 0.0, spdc.ref_temperature + half_width_c)), 125.0)

    def test_unfiltered_arm_flux(self):
        expected = 250.0 * 200.0 * math.sqrt(math.pi / (4.0 * math.log(2.0))) * 1000.0
        self.assertAlmostEqual(unfiltered_arm_flux(SpdcSourceConfig()), expected, delta=1e-6 * expected)

    def test_cavity_chain_width(self):
        self.assertAlmostEqual(per_cavity_fwhm_for_chain(22.0, 2), 34.19, places=2)
        self.assertAlmostEqual(chain_fwhm(FilterChainConfig()), 22.0, delta=0.01)
        self.assertEqual(chain_fwhm(FilterChainConfig(cavity_fwhms=(30.0,))), 30.0)
        self.assertAlmostEqual(float(filter_transmission(FilterChainConfig(), 0.0)), 0.5)

    def test_filtered_spectrum(self):
        spdc = SpdcSourceConfig()
        spectrum = filtered_photon_spectrum(spdc, FilterChainConfig(), spdc.ref_temperature)
        self.assertAlmostEqual(spectrum.peak, 125.0, delta=0.01)
        # Two equal cavities of width w have equivalent width pi * w / 4 on a flat envelope
        expected = 125.0 * math.pi * 34.19 / 4.0
        self.assertAlmostEqual(integrated_rate(spectrum), expected, delta=1e-3 * expected)

    def test_single_cavity_filtered_rate(self):
        spdc = SpdcSourceConfig()
        spectrum = filtered_photon_spectrum(spdc, FilterChainConfig(cavity_fwhms=(22.0,)), spdc.ref_temperature)
        expected = 250.0 * 0.5 * math.pi / 2.0 * 22.0
        self.assertAlmostEqual(integrated_rate(spectrum), expected, delta=0.05 * expected)

    def test_filtered_rate_follows_joint_detuning(self):
        spdc = SpdcSourceConfig()
        on_peak = integrated_rate(filtered_photon_spectrum(spdc, FilterChainConfig(), spdc.ref_temperature))
        for offset_mhz in (-80.0, 30.0, 150.0):
            temperature = spdc.ref_temperature + offset_mhz / 1000.0 / spdc.temp_slope
            chain = FilterChainConfig().with_offset(offset_mhz)
            rate = integrated_rate(filtered_photon_spectrum(spdc, chain, temperature))
            self.assertAlmostEqual(rate, on_peak, delta=0.005 * on_peak)

    def test_envelope_center_is_odd(self):
        spdc = SpdcSourceConfig()
        for dt in (0.3, 1.0, 4.5):
            self.assertAlmostEqual(envelope_center(spdc, spdc.ref_temperature + dt),
                                   -envelope_center(spdc, spdc.ref_temperature - dt), places=12)
        self.assertAlmostEqual(envelope_center(spdc, spdc.ref_temperature - 1.695), 100.0, delta=0.01)

    def test_transmission_peaks_at_offset(self):
        chain = FilterChainConfig().with_offset(15.0)
        grid = np.linspace(-285.0, 315.0, 1201)
        transmission = filter_transmission(chain, grid)
        self.assertEqual(int(np.argmax(transmission)), 600)
        self.assertTrue(np.all(np.diff(transmission[:601]) > 0))
        self.assertTrue(np.all(np.diff(transmission[600:]) < 0))

    def test_invalid_source(self):
        with self.assertRaises(InvalidInputError):
            SpdcSourceConfig(temp_slope=0.0)
        with self.assertRaises(InvalidInputError):
            FilterChainConfig(cavity_fwhms=())


class InteractionModelTest(SimpleTestCase):

    def test_factor_chain(self):
        flux = resonant_flux(250.0, 22.0)
        self.assertEqual(flux, 5500.0)
        rate = predicted_jump_rate(flux, DEFAULT_FACTORS)
        self.assertAlmostEqual(rate, 9.08e-3, delta=1e-5)
        # One jump per ~110 s, within 15% of one per 100 s
        self.assertAlmostEqual(1.0 / rate, 100.0, delta=15.0)

    def test_rejects_invalid_factor(self):
        with self.assertRaises(InvalidInputError):
            CouplingFactors(d32_population=1.5)
        with self.assertRaises(InvalidInputError):
            predicted_jump_rate(0.0, DEFAULT_FACTORS)

    def test_lorentzian_widths_add(self):
        result = convolve_profiles(LineProfile.lorentzian(0.0, 22.0), LineProfile.lorentzian(0.0, 36.0))
        self.assertAlmostEqual(result.fwhm, 58.0, delta=0.1)
        self.assertAlmostEqual(result.peak, 1.0)

    def test_gaussian_variances_add(self):
        a = LineProfile.gaussian(0.0, 10.0)
        b = LineProfile.gaussian(5.0, 20.0)
        result = convolve_profiles(a, b)
        self.assertAlmostEqual(result.sigma ** 2, a.sigma ** 2 + b.sigma ** 2, delta=0.005 * (a.sigma ** 2 + b.sigma ** 2))
        self.assertAlmostEqual(result.center, 5.0, delta=0.01)

    def test_convolution_commutes(self):
        a = LineProfile.lorentzian(2.0, 22.0)
        b = LineProfile.gaussian(-3.0, 30.0)
        ab = convolve_profiles(a, b)
        ba = convolve_profiles(b, a)
        np.testing.assert_allclose(ab.grid, ba.grid)
        np.testing.assert_allclose(ab.values, ba.values, rtol=1e-9, atol=1e-12)

    def test_narrow_kernel_leaves_line_unchanged(self):
        line = LineProfile.lorentzian(5.0, 36.0)
        result = convolve_profiles(line, LineProfile.lorentzian(0.0, 0.5))
        self.assertAlmostEqual(result.fwhm, 36.5, delta=0.05)
        self.assertAlmostEqual(result.center, 5.0, delta=0.01)
        x = np.linspace(-100.0, 110.0, 211)
        np.testing.assert_allclose(result.evaluate(x), line.evaluate(x), atol=0.01)

    def test_shifted_input_shifts_convolution(self):
        a = LineProfile.lorentzian(0.0, 22.0)
        b = LineProfile.lorentzian(0.0, 36.0)
        base = convolve_profiles(a, b)
        shifted = convolve_profiles(a.recentered(7.3), b)
        self.assertAlmostEqual(shifted.center, base.center + 7.3, delta=0.01)
        self.assertAlmostEqual(shifted.fwhm, base.fwhm, delta=0.01)
        resampled = convolve_profiles(shifted.recentered(0.0), LineProfile.lorentzian(0.0, 1.0))
        self.assertAlmostEqual(resampled.center, 0.0, delta=0.01)

    def test_coarse_convolution_grid(self):
        with self.assertRaises(ResolutionError):
            convolve_profiles(LineProfile.lorentzian(0.0, 22.0), LineProfile.lorentzian(0.0, 36.0), step=1.0)

    def test_overlap_flux_of_flat_density(self):
        grid = np.linspace(-1e5, 1e5, 400_001)
        flat = LineProfile(center=0.0, fwhm=1.0, peak=250.0, shape='sampled-grid', grid=grid,
                           values=np.full(grid.size, 250.0))
        self.assertAlmostEqual(overlap_flux(flat, LineProfile.lorentzian(0.0, 22.0)), 5500.0, delta=5.5)

    def test_temperature_scan(self):
        spdc = SpdcSourceConfig()
        ref = spdc.ref_temperature
        scan = temperature_scan_model(spdc, LineProfile.lorentzian(0.0, 22.0), DEFAULT_FACTORS, BackgroundRates(),
                                      [ref - 10, ref, ref + 10])
        self.assertAlmostEqual(scan.rates[1], 0.635, delta=0.002)
        self.assertAlmostEqual(scan.rates[1], 0.7, delta=0.15 * 0.7)
        self.assertAlmostEqual(scan.rates[0], 0.09, delta=0.01 * 0.09)
        self.assertAlmostEqual(scan.rates[2], 0.09, delta=0.01 * 0.09)
        self.assertEqual(scan.meta['unit'], 'per_min')

    def test_temperature_scan_width(self):
        spdc = SpdcSourceConfig()
        grid = np.linspace(spdc.ref_temperature - 6, spdc.ref_temperature + 6, 1201)
        scan = temperature_scan_model(spdc, LineProfile.lorentzian(0.0, 22.0), DEFAULT_FACTORS, BackgroundRates(),
                                      grid)
        self.assertAlmostEqual(measure_fwhm(grid, scan.rates - 0.09), 200.0 / 59.0, delta=0.05)

    def test_frequency_scan_width(self):
        chain = FilterChainConfig()
        grid = np.linspace(-300, 300, 1201)
        scan = frequency_scan_model(chain, absorption_profile(25, 11), 0.27, BackgroundRates(), grid)
        self.assertAlmostEqual(measure_fwhm(grid, scan.rates - 0.09), 58.0, delta=1.0)
        self.assertAlmostEqual(float(scan.rates[600]), 0.36, places=6)

    def test_cavity_chain_kernel_is_narrower_in_the_wings(self):
        chain = FilterChainConfig()
        lorentzian = filter_kernel(chain)
        cavity_chain = filter_kernel(chain, 'cavity-chain')
        self.assertAlmostEqual(cavity_chain.fwhm, lorentzian.fwhm, delta=0.01)
        self.assertLess(float(cavity_chain.evaluate(100.0)), float(lorentzian.evaluate(100.0)))

    def test_filtered_arm_peak_rate(self):
        spdc = SpdcSourceConfig()
        rate = filtered_arm_peak_rate(spdc, FilterChainConfig(), LineProfile.lorentzian(0.0, 22.0),
                                      absorption_profile(25, 11), DEFAULT_FACTORS)
        self.assertAlmostEqual(rate, 60.0 * 9.086e-3 * 0.5, delta=1e-4)

    def test_laser_scan_is_the_bare_line(self):
        grid = np.linspace(-300, 300, 1201)
        scan = laser_scan_model(absorption_profile(25, 11), 0.27, BackgroundRates(), grid)
        self.assertAlmostEqual(measure_fwhm(grid, scan.rates - 0.09), 36.0, delta=0.05)

    def test_filtered_arm_count_scan_follows_temperature_scan(self):
        spdc = SpdcSourceConfig()
        grid = np.linspace(spdc.ref_temperature - 5, spdc.ref_temperature + 5, 11)
        counts = filtered_arm_count_scan(spdc, FilterChainConfig(), grid)
        jumps = temperature_scan_model(spdc, LineProfile.lorentzian(0.0, 22.0), DEFAULT_FACTORS,
                                       BackgroundRates(background_jump_rate=0.0), grid)
        np.testing.assert_allclose(counts.rates / counts.rates.max(), jumps.rates / jumps.rates.max(), atol=1e-3)
        self.assertEqual(counts.meta['unit'], 'per_s')

    def test_scan_rejects_bad_grid(self):
        with self.assertRaises(InvalidInputError):
            laser_scan_model(absorption_profile(25, 11), 0.27, BackgroundRates(), [])
        with self.assertRaises(InvalidInputError):
            ScanResult([0.0, 0.0], [1.0, 1.0], [0.0, 0.0])


class TrajectorySimTest(SimpleTestCase):

    def test_same_seed_same_trace(self):
        p = TelegraphParams(bright_to_dark_rate=0.5)
        a = simulate_trace(p, 100.0, 0.002, seed=5)
        b = simulate_trace(p, 100.0, 0.002, seed=5)
        np.testing.assert_array_equal(a.counts, b.counts)
        self.assertEqual(a.true_jumps, b.true_jumps)
        self.assertEqual(a.n_bins, 50_000)

    def test_trial_matches_its_stream(self):
        p = TelegraphParams(bright_to_dark_rate=0.5)
        trials = simulate_trials(p, 20.0, 0.01, master_seed=9, n_trials=3)
        alone = simulate_trace(p, 20.0, 0.01, seed=9, stream=(2,))
        np.testing.assert_array_equal(trials[2].counts, alone.counts)
        self.assertFalse(np.array_equal(trials[0].counts, trials[1].counts))

    def test_duration_shorter_than_bin(self):
        with self.assertRaises(InvalidInputError):
            simulate_trace(TelegraphParams(bright_to_dark_rate=0.5), 0.001, 0.002, seed=1)
        with self.assertRaises(InvalidInputError):
            simulate_trace(TelegraphParams(bright_to_dark_rate=0.5), float('nan'), 0.002, seed=1)

    def test_zero_pump_rate_never_jumps(self):
        trace = simulate_trace(TelegraphParams(bright_to_dark_rate=0.0), 60.0, 0.002, seed=1)
        self.assertEqual(trace.true_transition_count, 0)

    def test_zero_pump_counts_stay_bright(self):
        p = TelegraphParams(bright_to_dark_rate=0.0)
        trace = simulate_trace(p, 60.0, 0.002, seed=SEED)
        expected = p.bright_count_rate * 0.002
        self.assertAlmostEqual(float(trace.counts.mean()), expected, delta=3 * math.sqrt(expected / trace.n_bins))

    def test_bin_means_split_bin(self):
        p = TelegraphParams(bright_to_dark_rate=1.0)
        means = bin_means(p, [0.003], FluorescenceState.BRIGHT, 3, 0.002)
        np.testing.assert_allclose(means, [100.0, 0.5 * (100.0 + 1.0), 1.0])

    def test_jumps_alternate(self):
        trace = simulate_trace(TelegraphParams(bright_to_dark_rate=1.0), 100.0, 0.01, seed=2)
        directions = [d for _, d in trace.true_jumps]
        self.assertEqual(directions[0], TransitionDirection.BRIGHT_TO_DARK)
        self.assertTrue(all(a != b for a, b in zip(directions, directions[1:])))

    def test_stationary_fraction(self):
        self.assertAlmostEqual(stationary_dark_fraction(TelegraphParams(1.0, 1.0)), 0.5)
        self.assertAlmostEqual(stationary_dark_fraction(TelegraphParams(0.00909, 1 / 1.2)), 0.01079, places=5)

    def test_dark_occupancy_matches_stationary_fraction(self):
        p = TelegraphParams(bright_to_dark_rate=0.5, dark_to_bright_rate=1 / 1.2)
        occupancies = np.array([t.dark_occupancy() for t in simulate_trials(p, 5000.0, 1.0, SEED, 40)])
        standard_error = occupancies.std(ddof=1) / math.sqrt(occupancies.size)
        self.assertAlmostEqual(float(occupancies.mean()), stationary_dark_fraction(p), delta=3 * standard_error)

    def test_cycle_rate_at_calibrated_pump(self):
        target = 0.7 / 60.0
        k2 = 1 / 1.2
        p = TelegraphParams(bright_to_dark_rate=target * k2 / (k2 - target), dark_to_bright_rate=k2)
        self.assertAlmostEqual(ensemble_cycle_rate(p), target, places=12)
        trace = simulate_trace(p, 100 * 3600.0, 1.0, seed=SEED)
        minutes = trace.duration / 60.0
        n = trace.true_cycle_count
        self.assertAlmostEqual(n / minutes, 0.7, delta=3 * math.sqrt(n) / minutes)


class DetectionTest(SimpleTestCase):

    def test_detects_one_cycle(self):
        trace = make_trace([100] * 10 + [1] * 10 + [100] * 10)
        events = detect_jumps(trace)
        self.assertEqual(events.transitions, ((10, TransitionDirection.BRIGHT_TO_DARK),
                                              (20, TransitionDirection.DARK_TO_BRIGHT)))
        self.assertEqual(events.n_cycles, 1)
        self.assertEqual(events.observation_time, 30 * 0.002)

    def test_single_bin_glitch_is_ignored(self):
        events = detect_jumps(make_trace([100] * 10 + [1] + [100] * 10))
        self.assertEqual(events.n_transitions, 0)
        self.assertEqual(detect_jumps(make_trace([100] * 10 + [1] + [100] * 10), min_run=1).n_cycles, 1)

    def test_trace_starting_dark(self):
        events = detect_jumps(make_trace([1] * 5 + [100] * 5))
        self.assertEqual(events.initial_state, FluorescenceState.DARK)
        self.assertEqual(events.n_cycles, 0)
        self.assertEqual(events.transitions, ((5, TransitionDirection.DARK_TO_BRIGHT),))

    def test_threshold_outside_means(self):
        with self.assertRaises(InvalidThresholdError):
            detect_jumps(make_trace([100] * 10), threshold=150.0)
        with self.assertRaises(InvalidThresholdError):
            detect_jumps(make_trace([100] * 10), threshold=0.5)

    def test_empty_trace(self):
        with self.assertRaises(InsufficientDataError):
            detect_jumps(make_trace([]))

    def test_default_threshold(self):
        self.assertAlmostEqual(default_threshold(TelegraphParams(0.01), 0.002), 50.5)

    def test_combined_observations_add_cycles(self):
        first = detect_jumps(make_trace([100] * 4 + [1] * 4 + [100] * 4))
        second = detect_jumps(make_trace([100] * 4 + [1] * 4))
        combined = combine_events(first, second)
        self.assertEqual(combined.n_cycles, first.n_cycles + second.n_cycles)
        self.assertEqual(combined.transitions[-1], (16, TransitionDirection.BRIGHT_TO_DARK))
        with self.assertRaises(InvalidInputError):
            combine_events(second, first)

    def test_clean_trace_detects_true_switches(self):
        p = TelegraphParams(bright_to_dark_rate=0.1, dark_to_bright_rate=0.1, bright_count_rate=1e7,
                            dark_count_rate=0.0)
        trace = simulate_trace(p, 300.0, 1e-4, seed=SEED)
        events = detect_jumps(trace, min_run=1)
        self.assertGreater(trace.true_transition_count, 0)
        self.assertEqual(events.n_transitions, trace.true_transition_count)
        for (detected_bin, detected), (time, direction) in zip(events.transitions, trace.true_jumps):
            self.assertEqual(detected, direction)
            self.assertLessEqual(abs(detected_bin - int(time // trace.bin_width)), 1)

    def test_recall_and_false_cycles_on_default_traces(self):
        config = ExperimentConfig.defaults()
        p = config.telegraph_params(peak_pump_rate(config))
        matched = n_true = false_cycles = 0
        minutes = 0.0
        # 20 h holds ~770 cycles: recall to +-0.002 and false cycles below 0.003/min at 95%
        for trace in simulate_trials(p, 3600.0, 0.002, SEED, 20):
            fidelity = detection_fidelity(detect_jumps(trace), trace)
            matched += fidelity.n_matched
            n_true += fidelity.n_true
            false_cycles += fidelity.n_detected - fidelity.n_matched
            minutes += trace.duration / 60.0
        self.assertGreater(n_true, 500)
        self.assertGreaterEqual(matched / n_true, 0.99)
        self.assertLess(false_cycles / minutes, 0.01)


class RateEstimateTest(SimpleTestCase):

    def observation(self, n_cycles: int, seconds: float) -> JumpEvents:
        return JumpEvents(transitions=(), n_cycles=n_cycles, observation_time=seconds, bin_width=1.0,
                          n_bins=int(seconds))

    def test_poisson_rule(self):
        estimate = estimate_rate(self.observation(42, 3600.0))
        self.assertAlmostEqual(estimate.rate, 0.70)
        self.assertAlmostEqual(estimate.error, 0.108, places=3)
        zero = estimate_rate(self.observation(0, 3600.0))
        self.assertEqual((zero.rate, zero.error), (0.0, 0.0))

    def test_standard_error_of_the_mean(self):
        estimate = estimate_rate([self.observation(3, 300.0), self.observation(5, 300.0)], ErrorMethod.SEM)
        self.assertAlmostEqual(estimate.rate, 0.8)
        self.assertAlmostEqual(estimate.error, 0.2)
        self.assertEqual(estimate.n_events, 8)

    def test_combined_rate_lies_between_parts(self):
        first = self.observation(10, 600.0)
        second = self.observation(6, 1200.0)
        combined = estimate_rate(combine_events(first, second))
        low, high = sorted((estimate_rate(first).rate, estimate_rate(second).rate))
        self.assertGreater(combined.rate, low)
        self.assertLess(combined.rate, high)
        self.assertAlmostEqual(combined.rate, 16 / 30.0)

    def test_sem_needs_two_measurements(self):
        with self.assertRaises(InsufficientDataError):
            rate_from_counts([3], [300.0], ErrorMethod.SEM)

    def test_zero_observation_time(self):
        with self.assertRaises(InvalidInputError):
            rate_from_counts([3], [0.0])


class DwellStatisticsTest(SimpleTestCase):

    def test_mean_dark_dwell(self):
        p = TelegraphParams(bright_to_dark_rate=0.5, dark_to_bright_rate=1 / 1.2)
        trace = simulate_trace(p, 40_000.0, 0.005, seed=SEED)
        result = dwell_statistics(detect_jumps(trace), trace)
        self.assertGreaterEqual(result.n_dwells, 10_000)
        self.assertAlmostEqual(result.mean_dwell, 1.2, delta=0.05 * 1.2)
        self.assertAlmostEqual(result.mle_mean, result.mean_dwell)
        self.assertLess(result.ci_low, result.mle_mean)
        self.assertGreater(result.ci_high, result.mle_mean)

    def test_equal_dwells_are_exact(self):
        counts = [5000] * 5 + ([50] * 10 + [5000] * 5) * 12
        trace = make_trace(counts, bin_width=0.1)
        result = dwell_statistics(detect_jumps(trace), trace)
        self.assertEqual(result.n_dwells, 12)
        self.assertAlmostEqual(result.mean_dwell, 1.0, places=12)
        self.assertLess(result.ci_low, 1.0)
        self.assertGreater(result.ci_high, 1.0)

    def test_mean_dwell_is_unbiased_over_repetitions(self):
        p = TelegraphParams(bright_to_dark_rate=0.5, dark_to_bright_rate=1 / 1.2)
        means = np.array([dwell_statistics(detect_jumps(trace), trace).mean_dwell
                          for trace in simulate_trials(p, 300.0, 0.002, SEED, 100)])
        standard_error = means.std(ddof=1) / math.sqrt(means.size)
        self.assertAlmostEqual(float(means.mean()), 1.2, delta=3 * standard_error)

    def test_too_few_dwells(self):
        trace = make_trace([100] * 4 + [1] * 4 + [100] * 4)
        with self.assertRaises(InsufficientDataError):
            dwell_statistics(detect_jumps(trace), trace)


class LineFitTest(SimpleTestCase):
    x = np.linspace(-150, 150, 13)

    def lorentzian_scan(self, center=3.0, fwhm=58.0, amplitude=0.27, offset=0.09) -> ScanResult:
        y = offset + amplitude / (1.0 + (2.0 * (self.x - center) / fwhm) ** 2)
        return ScanResult(self.x, y, np.zeros(self.x.size))

    def test_exact_on_model_data(self):
        fit = fit_lorentzian(self.lorentzian_scan())
        self.assertTrue(fit.converged)
        self.assertLess(fit.residual_norm, 1e-10)
        self.assertAlmostEqual(fit.center, 3.0, places=6)
        self.assertAlmostEqual(fit.fwhm, 58.0, places=6)
        self.assertAlmostEqual(fit.amplitude, 0.27, places=8)
        self.assertAlmostEqual(fit.offset, 0.09, places=8)

    def test_dip(self):
        y = 1.0 - 0.5 / (1.0 + (2.0 * self.x / 40.0) ** 2)
        fit = fit_lorentzian(ScanResult(self.x, y, np.zeros(self.x.size)), polarity=Polarity.DIP)
        self.assertTrue(fit.converged)
        self.assertAlmostEqual(fit.amplitude, -0.5, places=6)
        self.assertAlmostEqual(fit.fwhm, 40.0, places=6)

    def test_fixed_background(self):
        fit = fit_lorentzian(self.lorentzian_scan(), background=0.09)
        self.assertEqual(fit.offset, 0.09)
        self.assertNotIn('offset', fit.stderr)
        self.assertAlmostEqual(fit.fwhm, 58.0, places=5)

    def test_confidence_interval_on_noisy_data(self):
        scan = self.lorentzian_scan()
        rng = np.random.default_rng(4)
        errors = np.full(self.x.size, 0.01)
        noisy = ScanResult(self.x, scan.rates + rng.normal(0.0, 0.01, self.x.size), errors)
        fit = fit_lorentzian(noisy)
        low, high = fit.confidence_interval('fwhm')
        self.assertLess(low, fit.fwhm)
        self.assertGreater(high, fit.fwhm)
        self.assertIn('fwhm_stderr', fit.as_report())

    def test_flat_data(self):
        with self.assertRaises(FlatDataError):
            fit_lorentzian(ScanResult(self.x, np.full(self.x.size, 0.09), np.zeros(self.x.size)))

    def test_too_few_points(self):
        with self.assertRaises(InsufficientDataError):
            fit_lorentzian(ScanResult([0.0, 1.0, 2.0], [1.0, 2.0, 1.0], [0.0, 0.0, 0.0]))

    def test_convolved_fit_recovers_atomic_width(self):
        chain = FilterChainConfig()
        scan = frequency_scan_model(chain, absorption_profile(25, 11), 0.27, BackgroundRates(), self.x)
        fit = fit_convolved_line(scan, filter_kernel(chain))
        self.assertTrue(fit.converged)
        self.assertAlmostEqual(fit.fwhm, 36.0, delta=0.5)
        self.assertAlmostEqual(fit.center, 0.0, delta=0.1)
        self.assertEqual(fit.as_report()['model'], 'convolved')

    def test_convolved_fit_with_cavity_chain_filter(self):
        chain = FilterChainConfig()
        kernel = filter_kernel(chain, 'cavity-chain')
        scan = frequency_scan_model(chain, absorption_profile(25, 11), 0.27, BackgroundRates(), self.x,
                                    filter_shape='cavity-chain')
        fit = fit_convolved_line(scan, kernel)
        self.assertAlmostEqual(fit.fwhm, 36.0, delta=0.5)

    def test_shifted_scan_shifts_center(self):
        base = fit_lorentzian(self.lorentzian_scan())
        y = 0.09 + 0.27 / (1.0 + (2.0 * (self.x - 3.0) / 58.0) ** 2)
        shifted = fit_lorentzian(ScanResult(self.x + 7.3, y, np.zeros(self.x.size)))
        self.assertAlmostEqual(shifted.center - base.center, 7.3, delta=1e-8)
        self.assertAlmostEqual(shifted.fwhm, base.fwhm, delta=1e-8)
        self.assertAlmostEqual(shifted.amplitude, base.amplitude, delta=1e-8)

    def test_narrow_filter_fit_matches_plain_fit(self):
        scan = self.lorentzian_scan(center=0.0, fwhm=36.0)
        plain = fit_lorentzian(scan)
        convolved = fit_convolved_line(scan, LineProfile.lorentzian(0.0, 0.1))
        self.assertTrue(convolved.converged)
        self.assertAlmostEqual(convolved.fwhm, plain.fwhm, delta=0.01 * plain.fwhm)
        self.assertAlmostEqual(convolved.center, plain.center, delta=0.01)

    def test_filter_wider_than_scan_is_not_converged(self):
        scan = self.lorentzian_scan()
        fit = fit_convolved_line(scan, LineProfile.lorentzian(0.0, 1e5))
        self.assertFalse(fit.converged)


class ExperimentConfigTest(SimpleTestCase):

    def test_defaults(self):
        config = ExperimentConfig.defaults()
        self.assertEqual(config.value('coupling', 'polarization_match'), 1.0 / 3.0)
        self.assertAlmostEqual(config.coupling().d32_population, 0.6, places=6)
        self.assertEqual(config.master_seed, SEED)
        self.assertEqual(len(config.temperature_grid()), 11)
        self.assertEqual(list(config.frequency_grid()[[0, -1]]), [-150.0, 150.0])

    def test_shipped_file_matches_defaults(self):
        shipped = ExperimentConfig.load(os.path.join(settings.BASE_DIR, 'configs', 'default.ini'))
        self.assertEqual(shipped.digest, ExperimentConfig.defaults().digest)

    def test_digest_tracks_content(self):
        base = ExperimentConfig.defaults()
        changed = ExperimentConfig.from_string('[telegraph]\nbin_width_s = 0.005\n')
        same = ExperimentConfig.from_string('[atom]\nnatural_fwhm_mhz = 25.0\n')
        self.assertNotEqual(base.digest, changed.digest)
        self.assertEqual(base.digest, same.digest)

    def test_overrides(self):
        config = ExperimentConfig.from_string('[rng]\nmaster_seed = 1\n', overrides=['rng.master_seed=7'])
        self.assertEqual(config.master_seed, 7)
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_string('', overrides=['master_seed=7'])

    def test_unknown_section_and_key(self):
        with self.assertRaises(ConfigValidationError) as cm:
            ExperimentConfig.from_string('[atom]\nbogus = 1\n')
        self.assertEqual((cm.exception.section, cm.exception.key), ('atom', 'bogus'))
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_string('[nowhere]\nkey = 1\n')

    def test_invalid_values(self):
        with self.assertRaises(ConfigValidationError) as cm:
            ExperimentConfig.from_string('[atom]\nnatural_fwhm_mhz = -3\n')
        self.assertEqual(cm.exception.key, 'natural_fwhm_mhz')
        self.assertIn('[atom] natural_fwhm_mhz', str(cm.exception))
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_string('[spdc]\nenvelope_shape = square\n')
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_string('[coupling]\ngeometric_overlap = 2\n')
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_string('[filter]\ncavity_fwhm_mhz = \n')

    def test_parse_number(self):
        self.assertEqual(parse_number('1/3'), 1.0 / 3.0)
        self.assertEqual(parse_number('2.5e-3'), 2.5e-3)
        with self.assertRaises(ValueError):
            parse_number('nan')


class FileFormatTest(OutputDirTestCase):

    def test_trace_replays_from_disk(self):
        config = ExperimentConfig.defaults()
        summary = run_simulation(config, self.out, duration=30.0, parallel=False)[0]
        trace = read_trace(summary['path'])
        again = simulate_trace(trace.params, 30.0, trace.bin_width, trace.seed, trace.start_state, trace.stream)
        np.testing.assert_array_equal(trace.counts, again.counts)
        self.assertEqual(trace.true_jumps, again.true_jumps)

    def test_parse_failure_names_line(self):
        path = os.path.join(self.out, 'scan.csv')
        with open(path, 'w') as handle:
            handle.write('# kind=laser\nx,rate_per_min,err_per_min\n1,2,3\n2,x,3\n')
        with self.assertRaises(TraceFormatError) as cm:
            read_scan(path)
        self.assertEqual(cm.exception.line_number, 4)
        self.assertIn(f'{path}:4', str(cm.exception))

    def test_missing_meta_file(self):
        path = os.path.join(self.out, 'trace.csv')
        with open(path, 'w') as handle:
            handle.write('bin_index,count\n0,100\n')
        with self.assertRaises(OSError):
            read_trace(path)


class TasksTest(SimpleTestCase):

    def test_scan_point_is_reproducible(self):
        p = params_to_dict(TelegraphParams(bright_to_dark_rate=0.05))
        alone = measure_jump_point.apply(args=(p, [300.0, 300.0], 0.01, SEED, 4, 'bright', 250.5, 2)).get()
        again = measure_jump_point.apply(args=(p, [300.0, 300.0], 0.01, SEED, 4, 'bright', 250.5, 2)).get()
        self.assertEqual(alone, again)
        self.assertEqual(len(alone), 2)
        self.assertEqual(alone[0]['observation_time'], 300.0)

    def test_photon_counts(self):
        rates = count_photons_point.apply(args=(2000.0, 120, 1.0, SEED, 0)).get()
        self.assertEqual(len(rates), 120)
        self.assertAlmostEqual(float(np.mean(rates)), 2000.0, delta=5 * math.sqrt(2000.0 / 120))


class ControllerTest(OutputDirTestCase):

    def test_factor_chain_report(self):
        report = factor_chain_report(ExperimentConfig.defaults())
        self.assertAlmostEqual(float(report['rate_per_s']), 9.08e-3, delta=1e-5)
        self.assertAlmostEqual(float(report['flux_photons_per_s']), 5500.0)
        self.assertEqual(report['polarization_match'], '0.333333')

    def test_temperature_scan_montecarlo_follows_model(self):
        config = ExperimentConfig.defaults()
        model = analytic_scan(config, 'temperature')
        simulated = montecarlo_scan(config, 'temperature', parallel=False)
        minutes = config.value('scan', 'temperature_duration_s') / 60.0
        sigma = np.sqrt(model.rates * minutes) / minutes
        # Two error bars hold 95% of points; 9 of 11 is the 2% binomial tail
        self.assertGreaterEqual(int(np.sum(np.abs(simulated.rates - model.rates) <= 2 * sigma)), 9)
        self.assertEqual(simulated.meta['error_method'], ErrorMethod.POISSON_SQRT)

    def test_frequency_pipeline_closure(self):
        model = analytic_scan(ExperimentConfig.defaults(), 'frequency')
        true_fwhm = model.meta['model_fwhm_mhz']
        covered = {'center': 0, 'fwhm': 0}
        for seed in range(20):
            config = ExperimentConfig.from_string('', overrides=[f'rng.master_seed={seed}',
                                                                 'telegraph.bin_width_s=0.05'])
            scan, path = run_scan(config, 'frequency', ScanMode.MONTECARLO, self.out, parallel=False)
            fit = fit_lorentzian(read_scan(path))
            for name, truth in (('center', 0.0), ('fwhm', true_fwhm)):
                low, high = fit.confidence_interval(name)
                if fit.converged and low <= truth <= high:
                    covered[name] += 1
        # With 95% coverage, 17 of 20 is the 2% binomial tail
        self.assertGreaterEqual(covered['center'], 17)
        self.assertGreaterEqual(covered['fwhm'], 17)

    def test_analysis_needs_files(self):
        with self.assertRaises(InvalidInputError):
            run_analysis(ExperimentConfig.defaults(), [], AnalysisTask.JUMPS, self.out)


class CommandsTest(OutputDirTestCase):

    def call(self, name: str, *args, **options) -> str:
        stdout = StringIO()
        call_command(name, *args, out=self.out, stdout=stdout, **options)
        return stdout.getvalue()

    def test_predict(self):
        output = self.call('predict')
        report = read_report(os.path.join(self.out, 'predict_report.txt'))
        self.assertAlmostEqual(float(report['rate_per_s']), 9.08e-3, delta=1e-5)
        self.assertAlmostEqual(float(report['seconds_per_jump']), 110.0, delta=0.5)
        self.assertEqual(report['config_digest'], ExperimentConfig.defaults().digest)
        self.assertIn('rate_per_min=', output)
        spectrum = read_spectrum(os.path.join(self.out, 'filtered_spectrum.csv'))
        self.assertAlmostEqual(spectrum.peak, 125.0, delta=0.01)
        self.assertAlmostEqual(integrated_rate(spectrum), float(report['filtered_arm_photons_per_s']),
                               delta=1e-3 * integrated_rate(spectrum))

    def test_temperature_scan(self):
        self.call('scan', kind='temperature', mode='analytic')
        path = os.path.join(self.out, 'scan_temperature_analytic.csv')
        scan = read_scan(path)
        self.assertAlmostEqual(float(scan.rates.max()), 0.635, delta=0.002)
        self.assertEqual(read_comments(path)['config_digest'], ExperimentConfig.defaults().digest)

    def test_digest_follows_config(self):
        self.call('scan', kind='laser', overrides=['atom.zeeman_broadening_mhz=5'])
        header = read_comments(os.path.join(self.out, 'scan_laser_analytic.csv'))
        self.assertNotEqual(header['config_digest'], ExperimentConfig.defaults().digest)

    def test_serial_and_parallel_runs_are_identical(self):
        overrides = ['scan.temperature_points=3', 'scan.temperature_duration_s=600']
        serial_dir = self.out
        parallel_dir = os.path.join(self.out, 'parallel')
        call_command('scan', kind='temperature', mode='montecarlo', overrides=overrides, parallel=False,
                     out=serial_dir, stdout=StringIO())
        call_command('scan', kind='temperature', mode='montecarlo', overrides=overrides, parallel=True,
                     out=parallel_dir, stdout=StringIO())
        name = 'scan_temperature_montecarlo.csv'
        with open(os.path.join(serial_dir, name), 'rb') as serial, open(os.path.join(parallel_dir, name), 'rb') as par:
            self.assertEqual(serial.read(), par.read())

    def test_simulate_and_detect(self):
        self.call('simulate')
        path = os.path.join(self.out, 'trace.csv')
        meta = {key: value for _, key, value in read_key_values(os.path.join(self.out, 'trace.meta'))
                if key != 'jump'}
        self.assertEqual(meta['config_digest'], ExperimentConfig.defaults().digest)
        self.assertEqual(int(meta['n_bins']), 1_800_000)

        self.call('analyze', path, task='jumps')
        report = read_report(os.path.join(self.out, 'jumps_report.txt'))
        configured = float(report['configured_jump_rate_per_min'])
        self.assertAlmostEqual(float(report['rate_per_min']), configured, delta=3 * float(report['error_per_min']))

    def test_trial_reruns_alone(self):
        self.call('simulate', duration=60.0, trials=3)
        batch = os.path.join(self.out, 'trace_0001.csv')
        with open(batch, 'rb') as handle:
            expected = handle.read()
        os.remove(batch)
        self.call('simulate', duration=60.0, trial=1)
        with open(batch, 'rb') as handle:
            self.assertEqual(handle.read(), expected)
        with open(os.path.join(self.out, 'trace_0000.csv'), 'rb') as handle:
            self.assertNotEqual(handle.read(), expected)

    def test_duration_shorter_than_bin(self):
        with self.assertRaises(CommandError) as cm:
            self.call('simulate', duration=0.001)
        self.assertEqual(cm.exception.returncode, 2)

    def test_negative_trial(self):
        with self.assertRaises(CommandError) as cm:
            self.call('simulate', duration=60.0, trial=-1)
        self.assertEqual(cm.exception.returncode, 2)

    def test_non_finite_duration(self):
        for duration in (float('nan'), float('inf')):
            with self.assertRaises(CommandError) as cm:
                self.call('simulate', duration=duration)
            self.assertEqual(cm.exception.returncode, 2)

    def test_fit_frequency_scan(self):
        self.call('scan', kind='frequency')
        self.call('analyze', os.path.join(self.out, 'scan_frequency_analytic.csv'), task='fit')
        report = read_report(os.path.join(self.out, 'fit_report.txt'))
        self.assertEqual(report['converged'], 'true')
        self.assertAlmostEqual(float(report['fwhm_mhz']), 58.0, delta=2.0)

    def test_fit_convolved_frequency_scan(self):
        self.call('scan', kind='frequency')
        self.call('analyze', os.path.join(self.out, 'scan_frequency_analytic.csv'), task='fit-convolved')
        report = read_report(os.path.join(self.out, 'fit_convolved_report.txt'))
        self.assertAlmostEqual(float(report['fwhm_mhz']), 36.0, delta=0.5)

    def test_non_convergence_is_reported(self):
        self.call('scan', kind='frequency')
        with self.assertRaises(CommandError) as cm:
            self.call('analyze', os.path.join(self.out, 'scan_frequency_analytic.csv'), task='fit-convolved',
                      overrides=['filter.cavity_fwhm_mhz=100000'])
        self.assertEqual(cm.exception.returncode, 3)
        report = read_report(os.path.join(self.out, 'fit_convolved_report.txt'))
        self.assertEqual(report['converged'], 'false')

    def test_missing_file(self):
        with self.assertRaises(CommandError) as cm:
            self.call('analyze', os.path.join(self.out, 'nothing.csv'), task='jumps')
        self.assertEqual(cm.exception.returncode, 1)

    def test_invalid_config(self):
        with self.assertRaises(CommandError) as cm:
            self.call('predict', overrides=['atom.bogus=1'])
        self.assertEqual(cm.exception.returncode, 2)
