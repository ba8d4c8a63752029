'''
Text formats written and read by the experiment commands.

Every file starts with `# key=value` comment lines carrying the config digest
and provenance; readers skip comment lines. Tabular values use 6 significant
digits, trace metadata uses repr() floats so that a trace read back from disk
replays bit for bit.
'''
import os
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from quantum_jumps.exceptions import QuantumJumpError, TraceFormatError
from quantum_jumps.helper.atom_model import LineProfile
from quantum_jumps.helper.interaction_model import ScanKind, ScanResult
from quantum_jumps.helper.trajectory_sim import CountTrace, TelegraphParams

TRACE_FORMAT_VERSION = 1
SPECTRUM_HEADER = 'detuning_mhz,flux_density'
TRACE_HEADER = 'bin_index,count'
SCAN_HEADERS = {
    'per_min': 'x,rate_per_min,err_per_min',
    'per_s': 'x,rate_per_s,err_per_s',
}
META_SUFFIX = '.meta'
JUMP_KEY = 'jump'
TRACE_PARAM_KEYS = ('bright_to_dark_rate', 'dark_to_bright_rate', 'bright_count_rate', 'dark_count_rate')


def fmt(value: float) -> str:
    return f'{value:.6g}'


def comment_lines(header: Dict[str, object]) -> List[str]:
    return [f'# {key}={value}\n' for key, value in header.items()]


def write_lines(path: str, lines: Iterable[str]) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        handle.writelines(lines)
    return path


def meta_path(trace_path: str) -> str:
    '''Sidecar of `runs/trace.csv` is `runs/trace.meta`.'''
    return os.path.splitext(trace_path)[0] + META_SUFFIX


# Writers

def render_spectrum(profile: LineProfile, header: Dict[str, object]) -> List[str]:
    lines = comment_lines(header)
    lines.append(SPECTRUM_HEADER + '\n')
    for x, y in zip(profile.grid, profile.values):
        lines.append(f'{fmt(x)},{fmt(y)}\n')
    return lines


def render_scan(scan: ScanResult, header: Dict[str, object]) -> List[str]:
    lines = comment_lines(header)
    lines.append(SCAN_HEADERS[scan.meta.get('unit', 'per_min')] + '\n')
    for x, rate, error in zip(scan.x_values, scan.rates, scan.errors):
        lines.append(f'{fmt(x)},{fmt(rate)},{fmt(error)}\n')
    return lines


def render_trace(trace: CountTrace, header: Dict[str, object]) -> List[str]:
    lines = comment_lines(header)
    lines.append(TRACE_HEADER + '\n')
    lines.extend(f'{i},{c}\n' for i, c in enumerate(trace.counts.tolist()))
    return lines


def render_trace_meta(trace: CountTrace, header: Dict[str, object]) -> List[str]:
    '''key=value sidecar with everything needed to reproduce and verify the trace.'''
    entries: Dict[str, object] = {'format_version': TRACE_FORMAT_VERSION}
    entries.update(header)
    entries.update({
        'seed': trace.seed,
        'stream': ','.join(str(i) for i in trace.stream),
        'bin_width_s': repr(trace.bin_width),
        'n_bins': trace.n_bins,
        'start_state': trace.start_state,
    })
    for key in TRACE_PARAM_KEYS:
        entries[key] = repr(float(getattr(trace.params, key)))
    lines = [f'{key}={value}\n' for key, value in entries.items()]
    lines.extend(f'{JUMP_KEY}={time!r},{direction}\n' for time, direction in trace.true_jumps)
    return lines


def render_report(report: Dict[str, object], header: Dict[str, object]) -> List[str]:
    entries: Dict[str, object] = dict(header)
    entries.update(report)
    return [f'{key}={value}\n' for key, value in entries.items()]


# Readers

def data_lines(path: str) -> Iterable[Tuple[int, str]]:
    '''(line number, stripped line) of every non-blank, non-comment line.'''
    with open(path) as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if len(line) == 0 or line.startswith('#'):
                continue
            yield number, line


def read_comments(path: str) -> Dict[str, str]:
    '''The `# key=value` header of a file.'''
    header: Dict[str, str] = {}
    with open(path) as handle:
        for line in handle:
            if not line.startswith('#'):
                break
            key, sep, value = line[1:].strip().partition('=')
            if sep:
                header[key.strip()] = value.strip()
    return header


def read_key_values(path: str) -> List[Tuple[int, str, str]]:
    entries = []
    for number, line in data_lines(path):
        key, sep, value = line.partition('=')
        if not sep:
            raise TraceFormatError(path, number, f'Expected key=value, got {line!r}.')
        entries.append((number, key.strip(), value.strip()))
    return entries


def read_table(path: str, headers: Iterable[str]) -> Tuple[str, np.ndarray]:
    '''Return the header found and the numeric rows of a CSV file.'''
    rows: List[List[float]] = []
    header: Optional[str] = None
    for number, line in data_lines(path):
        if header is None:
            if line not in headers:
                raise TraceFormatError(path, number, f'Unexpected header {line!r}; expected one of '
                                                     f'{", ".join(headers)}.')
            header = line
            width = len(header.split(','))
            continue
        cells = line.split(',')
        if len(cells) != width:
            raise TraceFormatError(path, number, f'Expected {width} columns, got {len(cells)}.')
        try:
            rows.append([float(cell) for cell in cells])
        except ValueError:
            raise TraceFormatError(path, number, f'Non-numeric value in {line!r}.')
    if header is None:
        raise TraceFormatError(path, 1, 'File holds no header line.')
    return header, np.array(rows, dtype=float).reshape(-1, width)


def read_scan(path: str) -> ScanResult:
    header, table = read_table(path, SCAN_HEADERS.values())
    meta: Dict[str, object] = dict(read_comments(path))
    meta['unit'] = 'per_s' if header == SCAN_HEADERS['per_s'] else 'per_min'
    meta.setdefault('kind', ScanKind.FILTERED_ARM.value if meta['unit'] == 'per_s' else '')
    try:
        return ScanResult(table[:, 0], table[:, 1], table[:, 2], meta)
    except (ValueError, QuantumJumpError) as exc:
        raise TraceFormatError(path, 1, str(exc)) from exc


def read_spectrum(path: str) -> LineProfile:
    _, table = read_table(path, (SPECTRUM_HEADER,))
    try:
        return LineProfile.sampled(table[:, 0], table[:, 1])
    except (ValueError, QuantumJumpError) as exc:
        raise TraceFormatError(path, 1, str(exc)) from exc


def read_trace(path: str) -> CountTrace:
    '''Read a trace CSV and its `.meta` sidecar back into a CountTrace.'''
    _, table = read_table(path, (TRACE_HEADER,))
    indices = table[:, 0].astype(np.int64)
    if not np.array_equal(indices, np.arange(indices.size)):
        raise TraceFormatError(path, 1, 'Bin indices must run 0, 1, 2, ... without gaps.')
    counts = table[:, 1]
    if np.any(counts != np.round(counts)) or np.any(counts < 0):
        raise TraceFormatError(path, 1, 'Counts must be non-negative integers.')

    sidecar = meta_path(path)
    meta: Dict[str, str] = {}
    jumps: List[Tuple[float, str]] = []
    for number, key, value in read_key_values(sidecar):
        if key == JUMP_KEY:
            time, _, direction = value.partition(',')
            try:
                jumps.append((float(time), direction))
            except ValueError:
                raise TraceFormatError(sidecar, number, f'Bad jump entry {value!r}.')
        else:
            meta[key] = value

    missing = [key for key in ('seed', 'bin_width_s', 'start_state') + TRACE_PARAM_KEYS if key not in meta]
    if missing:
        raise TraceFormatError(sidecar, 1, f'Missing keys: {", ".join(missing)}.')
    try:
        params = TelegraphParams(**{key: float(meta[key]) for key in TRACE_PARAM_KEYS})
        stream = tuple(int(i) for i in meta.get('stream', '').split(',') if i)
        trace = CountTrace(bin_width=float(meta['bin_width_s']), counts=counts.astype(np.int64),
                           start_state=meta['start_state'], seed=int(meta['seed']), true_jumps=tuple(jumps),
                           params=params, stream=stream)
    except (ValueError, TypeError, QuantumJumpError) as exc:
        raise TraceFormatError(sidecar, 1, str(exc)) from exc
    if 'n_bins' in meta and int(meta['n_bins']) != trace.n_bins:
        raise TraceFormatError(path, 1, f'Meta file announces {meta["n_bins"]} bins, the trace holds {trace.n_bins}.')
    return trace
