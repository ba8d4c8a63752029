from dataclasses import asdict
from typing import Any, Dict, List, Sequence

from celery.utils.log import get_task_logger

from quantum_jumps.helper.analysis import detect_jumps
from quantum_jumps.helper.rng import make_generator
from quantum_jumps.helper.trajectory_sim import TelegraphParams, simulate_trace
from quantum_jumps.renderers import meta_path, render_trace, render_trace_meta, write_lines
from spdc_jump_lab.celery import app

logger = get_task_logger(__name__)

# Max time for any task to be running for
HARD_TIME_LIMIT_IN_SECONDS = 900


def params_to_dict(p: TelegraphParams) -> Dict[str, float]:
    return {key: float(value) for key, value in asdict(p).items()}


@app.task(time_limit=HARD_TIME_LIMIT_IN_SECONDS)
def measure_jump_point(params: Dict[str, float], durations: Sequence[float], bin_width: float, master_seed: int,
                       point: int, start_state: str, threshold: float, min_run: int) -> List[Dict[str, Any]]:
    '''
    Simulate and analyse the sub-measurements of one scan point. Sub-measurement
    k of point i uses the random stream (master_seed, i, k).

    Returns one {n_cycles, observation_time, n_true_cycles} dict per sub-measurement.
    '''
    p = TelegraphParams(**params)
    results = []
    for sub, duration in enumerate(durations):
        trace = simulate_trace(p, duration, bin_width, master_seed, start_state, stream=(point, sub))
        events = detect_jumps(trace, threshold, min_run)
        results.append({'n_cycles': events.n_cycles, 'observation_time': events.observation_time,
                        'n_true_cycles': trace.true_cycle_count})
    logger.info('Scan point %d: %d cycles detected over %d sub-measurements', point,
                sum(r['n_cycles'] for r in results), len(results))
    return results


@app.task(time_limit=HARD_TIME_LIMIT_IN_SECONDS)
def count_photons_point(rate: float, n_measurements: int, measurement_time: float, master_seed: int,
                        point: int) -> List[float]:
    '''Poisson photon counts of one filtered-arm scan point, as rates (1/s) per measurement interval.'''
    rng = make_generator(master_seed, point)
    counts = rng.poisson(rate * measurement_time, size=n_measurements)
    return [float(c) / measurement_time for c in counts.tolist()]


@app.task(time_limit=HARD_TIME_LIMIT_IN_SECONDS)
def simulate_trial(params: Dict[str, float], duration: float, bin_width: float, master_seed: int, stream: List[int],
                   start_state: str, out_path: str, header: Dict[str, Any]) -> Dict[str, Any]:
    '''
    Simulate the trace of stream (master_seed, *stream) and write its CSV and
    meta files. Trial k of a batch has stream [k], a single run the empty
    stream. Returns a summary of the written trace.
    '''
    p = TelegraphParams(**params)
    trace = simulate_trace(p, duration, bin_width, master_seed, start_state, stream=tuple(stream))
    write_lines(out_path, render_trace(trace, header))
    write_lines(meta_path(out_path), render_trace_meta(trace, header))
    logger.info('Stream %s written to %s (%d bins, %d true cycles)', tuple(stream), out_path, trace.n_bins,
                trace.true_cycle_count)
    return {'stream': list(stream), 'path': out_path, 'n_bins': trace.n_bins, 'true_cycles': trace.true_cycle_count,
            'true_transitions': trace.true_transition_count}
