"""Counter-based random streams keyed by (seed, trajectory, stream, position).

Every random number used by a simulation is a pure function of its
coordinates: the 64-bit seed, the trajectory index, a stream tag (normals,
uniforms, ...) and a position inside that stream.  The position of the
normal for step ``k`` and channel ``i`` is ``k * n_channels + i``.  Nothing
depends on how trajectories are grouped or which worker draws them, which
is what makes ensembles bit-identical at any thread count.

The generator is numpy's Philox-4x64 with the 128-bit key
``seed + 2**64 * trajectory`` and the stream tag in the top counter word.
Uniforms take the upper 53 bits of a raw word; normals are the inverse
normal CDF of those uniforms, so one raw word maps to exactly one variate.
"""
from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .errors import ValidationError

STREAM_NORMAL = 0
STREAM_UNIFORM = 1
STREAM_AUX = 2

_MASK64 = (1 << 64) - 1
_WORDS_PER_COUNTER = 4


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= _MASK64:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def raw_words(seed: int, trajectory: int, stream: int, start: int, count: int) -> np.ndarray:
    """``count`` raw 64-bit words beginning at ``start`` in one stream."""
    if trajectory < 0 or start < 0 or count < 0:
        raise ValidationError("trajectory, start and count must be non-negative")
    key = check_seed(seed) | (int(trajectory) << 64)
    block, offset = divmod(int(start), _WORDS_PER_COUNTER)
    gen = Philox(key=key, counter=[block, 0, 0, int(stream)])
    return gen.random_raw(count + offset)[offset:]


def uniforms(seed: int, trajectory: int, stream: int, start: int, count: int) -> np.ndarray:
    """Uniform variates in the open interval (0, 1)."""
    words = raw_words(seed, trajectory, stream, start, count)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, trajectory: int, stream: int, start: int, count: int) -> np.ndarray:
    """Standard normal variates by inversion of :func:`uniforms`."""
    return ndtri(uniforms(seed, trajectory, stream, start, count))


def normal_block(
    seed: int, trajectories, first_step: int, n_steps: int, n_channels: int, stream: int = STREAM_NORMAL
) -> np.ndarray:
    """Normals for a block of steps, shape ``(len(trajectories), n_steps, n_channels)``."""
    trajectories = list(trajectories)
    out = np.empty((len(trajectories), n_steps, n_channels))
    if n_channels == 0 or n_steps == 0:
        return out
    for row, j in enumerate(trajectories):
        z = normals(seed, j, stream, first_step * n_channels, n_steps * n_channels)
        out[row] = z.reshape(n_steps, n_channels)
    return out


def uniform_block(
    seed: int, trajectories, first_step: int, n_steps: int, stream: int = STREAM_UNIFORM
) -> np.ndarray:
    """One uniform per step, shape ``(len(trajectories), n_steps)``."""
    trajectories = list(trajectories)
    out = np.empty((len(trajectories), n_steps))
    for row, j in enumerate(trajectories):
        out[row] = uniforms(seed, j, stream, first_step, n_steps)
    return out


def generator(seed: int, trajectory: int = 0, stream: int = STREAM_AUX) -> np.random.Generator:
    """A full numpy Generator on a dedicated stream, for auxiliary sampling."""
    key = check_seed(seed) | (int(trajectory) << 64)
    return np.random.Generator(Philox(key=key, counter=[0, 0, 0, int(stream)]))
