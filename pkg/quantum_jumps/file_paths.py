import os
from typing import Optional

from django.conf import settings


def get_output_root(out_dir: Optional[str] = None):
    '''
    Return the absolute path of the folder receiving the output files of a
    command: `out_dir` if given, otherwise the configured output root.
    '''
    return os.path.abspath(out_dir or settings.SPDC_JUMP_LAB_OUTPUT_ROOT)


def get_scan_path(out_dir: Optional[str], kind: str, mode: str):
    '''E.g. `<out>/scan_temperature_analytic.csv`'''
    return os.path.join(get_output_root(out_dir), f'scan_{kind.replace("-", "_")}_{mode}.csv')


def get_trace_path(out_dir: Optional[str], trial: Optional[int] = None):
    '''
    Get the absolute path of a trace CSV. Trials of a batch are numbered,
    a single run is just `trace.csv`.
    '''
    name = 'trace.csv' if trial is None else f'trace_{trial:04d}.csv'
    return os.path.join(get_output_root(out_dir), name)


def get_spectrum_path(out_dir: Optional[str]):
    return os.path.join(get_output_root(out_dir), 'filtered_spectrum.csv')


def get_report_path(out_dir: Optional[str], name: str):
    '''Get the absolute path of a key=value report, e.g. `<out>/fit_report.txt`.'''
    return os.path.join(get_output_root(out_dir), f'{name}_report.txt')
