"""
Complex matrix helpers shared by the simulator and the recovery engines.

Matrices are plain ``numpy`` complex arrays. Batched quantities keep the
matrix in the last two axes, e.g. ``H[p, b]`` is the ``K x Mc`` channel
block of pilot subcarrier ``p`` and AP ``b``.
"""

import math
import zlib

import numpy as np
from scipy import special

from .errors import InvalidDimensionError, InvalidParameterError

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def dft_unitary(m):
    """Unitary DFT matrix ``A[a, b] = exp(-2j*pi*a*b/m) / sqrt(m)``.

    For a half-wavelength ULA this is the angular-domain transform.
    """
    if int(m) != m or m < 1:
        raise InvalidDimensionError(f"antenna count must be a positive integer, got {m!r}")
    m = int(m)
    idx = np.arange(m)
    # reduce the exponent modulo m first so large products keep full precision
    phase = np.outer(idx, idx) % m
    return np.exp(-2j * np.pi * phase / m) / math.sqrt(m)


def spatial_to_angular(h_block, a_r):
    """Angular representation ``W = H conj(A_R)`` (batched over leading axes)."""
    h_block = np.asarray(h_block)
    a_r = np.asarray(a_r)
    if a_r.ndim != 2 or a_r.shape[0] != a_r.shape[1]:
        raise InvalidDimensionError("a_r must be square")
    if h_block.shape[-1] != a_r.shape[0]:
        raise InvalidDimensionError(
            f"h_block has {h_block.shape[-1]} columns but a_r has {a_r.shape[0]} rows")
    return h_block @ np.conj(a_r)


def angular_to_spatial(w_block, a_r):
    """Inverse of :func:`spatial_to_angular`: ``H = W A_R^T``."""
    w_block = np.asarray(w_block)
    a_r = np.asarray(a_r)
    if w_block.shape[-1] != a_r.shape[1]:
        raise InvalidDimensionError(
            f"w_block has {w_block.shape[-1]} columns but a_r has {a_r.shape[1]} columns")
    return w_block @ a_r.T


# -- random streams ---------------------------------------------------------

def purpose_key(name):
    """Stable integer for a purpose label (used as a spawn-key element)."""
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed, *key):
    """Counter-based generator for the substream ``(seed, *key)``.

    Keys may be integers or strings. Distinct keys give non-overlapping
    Philox streams; the same ``(seed, key)`` always reproduces the same
    sequence.
    """
    spawn_key = tuple(purpose_key(k) if isinstance(k, str) else int(k) for k in key)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def sample_cgaussian(mean, var, rng, size=None):
    """Draw from ``CN(mean, var)``; real and imaginary parts each get ``var/2``."""
    if var < 0:
        raise InvalidParameterError(f"variance must be nonnegative, got {var}")
    if var == 0:
        if size is None:
            return complex(mean)
        return np.full(size, complex(mean), dtype=complex)
    scale = math.sqrt(var / 2.0)
    re = rng.standard_normal(size)
    im = rng.standard_normal(size)
    return mean + scale * (re + 1j * im)


# -- standard normal --------------------------------------------------------

def std_normal(x):
    """Standard normal ``(pdf, cdf)`` at ``x``; cdf via ``erfc``.

    Accepts scalars or arrays; infinite inputs give the limiting values.
    """
    x = np.asarray(x, dtype=float)
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    cdf = 0.5 * special.erfc(-x / math.sqrt(2.0))
    if pdf.ndim == 0:
        return float(pdf), float(cdf)
    return pdf, cdf


def log_std_pdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - math.log(_SQRT_2PI)
