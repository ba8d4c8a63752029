'''
Seeding scheme for every stochastic component.

All random streams are numpy `Generator` instances on the counter-based Philox
bit generator. A stream is identified by the master seed plus a tuple of
integer indices (trial, scan point, sub-measurement), which become the
`spawn_key` of a `SeedSequence`. The same identifiers always give the same
stream, independent of the order or process in which streams are created.
'''
from typing import Tuple

import numpy as np

GENERATOR_NAME = 'philox-4x64'
GENERATOR_VERSION = 1


def generator_label() -> str:
    '''Name and version of the generator, recorded in every output file.'''
    return f'{GENERATOR_NAME}-v{GENERATOR_VERSION}'


def stream_key(master_seed: int, *indices: int) -> Tuple[int, ...]:
    if master_seed < 0:
        raise ValueError(f'Master seed must be non-negative, got {master_seed}.')
    if any(index < 0 for index in indices):
        raise ValueError(f'Stream indices must be non-negative, got {indices}.')
    return (int(master_seed),) + tuple(int(i) for i in indices)


def make_generator(master_seed: int, *indices: int) -> np.random.Generator:
    '''
    Return the generator for stream `(master_seed, *indices)`.

    Examples:
        - make_generator(7) is the stream of a single run seeded with 7
        - make_generator(7, 3) is trial 3 of a batch seeded with 7
        - make_generator(7, 3, 15) is sub-measurement 15 of scan point 3
    '''
    key = stream_key(master_seed, *indices)
    sequence = np.random.SeedSequence(entropy=key[0], spawn_key=key[1:])
    return np.random.Generator(np.random.Philox(sequence))
