"""
Per-AP uniform scalar quantizer for complex pilot observations.

The real and imaginary parts share one symmetric midrise codebook
``{-(2^Q-1)/2 * delta, ..., (2^Q-1)/2 * delta}`` whose step is set by the
observed dynamic range of that AP.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class QuantizerSpec:
    q_bits: int
    delta: float
    y_min: float
    y_max: float

    @property
    def degenerate(self):
        return not self.delta > 0

    @property
    def levels_per_side(self):
        return 2 ** (self.q_bits - 1)

    @property
    def codebook(self):
        n = 2 ** self.q_bits
        return (np.arange(n) - (n - 1) / 2.0) * self.delta

    @property
    def top_level(self):
        return (self.levels_per_side - 0.5) * self.delta

    def to_dict(self):
        return {"q_bits": self.q_bits, "delta": self.delta,
                "y_min": self.y_min, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["q_bits"]), float(d["delta"]), float(d["y_min"]), float(d["y_max"]))


def build_codebook(observations, q_bits):
    """Spec for one AP from all of its subcarrier blocks.

    ``y_min``/``y_max`` range over both the real and the imaginary parts.
    """
    if q_bits < 1 or int(q_bits) != q_bits:
        raise InvalidParameterError("q_bits must be a positive integer")
    blocks = [np.asarray(o) for o in observations]
    if not blocks or all(b.size == 0 for b in blocks):
        raise InvalidParameterError("no observations to build a codebook from")
    flat = np.concatenate([np.concatenate([b.real.ravel(), b.imag.ravel()]) for b in blocks])
    y_min, y_max = float(flat.min()), float(flat.max())
    delta = (y_max - y_min) / 2.0 ** q_bits
    return QuantizerSpec(int(q_bits), delta, y_min, y_max)


def quantize_real(x, spec):
    """Nearest codebook level; midpoint ties go to the level nearer zero and
    values beyond the outermost levels saturate."""
    x = np.asarray(x, dtype=float)
    j = np.clip(np.ceil(np.abs(x) / spec.delta), 1, spec.levels_per_side)
    return np.where(x < 0, -1.0, 1.0) * (j - 0.5) * spec.delta


def quantize(y, spec):
    """Quantize real and imaginary parts separately.

    A degenerate spec (zero step) yields an all-zero result and a
    ``RuntimeWarning``.
    """
    y = np.asarray(y)
    if spec.degenerate:
        warnings.warn("degenerate quantizer (zero step); emitting zeros", RuntimeWarning,
                      stacklevel=2)
        return np.zeros(y.shape, dtype=complex)
    return quantize_real(y.real, spec) + 1j * quantize_real(y.imag, spec)


def bin_edges(y_bar, spec, bounded=False):
    """Lower/upper edges of the quantization bin of each level in ``y_bar``.

    The outermost bins are half-infinite. With ``bounded=True`` they are
    closed at the recorded ``y_min``/``y_max`` instead, since the quantizer
    input never left that range.
    """
    y_bar = np.asarray(y_bar, dtype=float)
    half = spec.delta / 2.0
    lo = y_bar - half
    hi = y_bar + half
    top = spec.top_level - 1e-9 * spec.delta
    upper_out = y_bar >= top
    lower_out = y_bar <= -top
    if bounded:
        hi = np.where(upper_out, np.maximum(spec.y_max, hi), hi)
        lo = np.where(lower_out, np.minimum(spec.y_min, lo), lo)
    else:
        hi = np.where(upper_out, np.inf, hi)
        lo = np.where(lower_out, -np.inf, lo)
    return lo, hi


def quantize_blocks(y, q_bits):
    """Quantize a ``(P~, B, G, Mc)`` tensor with one spec per AP.

    Returns the quantized tensor and the list of per-AP specs.
    """
    y = np.asarray(y)
    specs = []
    out = np.empty_like(y, dtype=complex)
    for b in range(y.shape[1]):
        spec = build_codebook([y[p, b] for p in range(y.shape[0])], q_bits)
        specs.append(spec)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[:, b] = quantize(y[:, b], spec)
    return out, specs
