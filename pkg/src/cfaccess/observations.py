"""Per-AP pilot observations as delivered to a processing unit."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidDimensionError
from .quantizer import QuantizerSpec, bin_edges, quantize_blocks


@dataclass
class ObservationSet:
    """Quantized pilot blocks of a set of APs.

    ``y`` holds what the APs forwarded (codebook values when quantized).
    ``offset`` is a known signal already subtracted by interference
    cancellation; the working observation is ``y - offset`` while the
    quantization bins still refer to ``y``. ``bin_offset`` is the exact
    (unquantized) subtracted signal used to shift the bins; it defaults
    to ``offset``.
    """

    y: np.ndarray                  # (P~, B_sel, G, Mc)
    specs: tuple                   # QuantizerSpec per block, or None when unquantized
    ap_indices: np.ndarray         # global AP index of each block
    offset: np.ndarray = None
    bin_offset: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=complex)
        if self.y.ndim != 4:
            raise InvalidDimensionError("observations must be (P, B, G, Mc)")
        self.ap_indices = np.asarray(self.ap_indices, dtype=int)
        if len(self.ap_indices) != self.y.shape[1]:
            raise InvalidDimensionError("one AP index per block required")
        if self.specs is not None:
            self.specs = tuple(self.specs)
            if len(self.specs) != self.y.shape[1]:
                raise InvalidDimensionError("one quantizer spec per AP block required")
        for off in (self.offset, self.bin_offset):
            if off is not None and off.shape != self.y.shape:
                raise InvalidDimensionError("offset must match observation shape")

    @property
    def quantized(self):
        return self.specs is not None

    @property
    def m_c(self):
        return self.y.shape[-1]

    @property
    def g(self):
        return self.y.shape[2]

    @property
    def values(self):
        if self.offset is None:
            return self.y
        return self.y - self.offset

    @property
    def column_map(self):
        """Global column index (in the ``B * Mc`` concatenated layout) of
        every local column."""
        m = self.m_c
        return (self.ap_indices[:, None] * m + np.arange(m)[None, :]).ravel()

    def concatenated(self):
        """``(P~, G, B_sel * Mc)`` horizontally stacked blocks."""
        v = self.values
        p, b, g, m = v.shape
        return v.transpose(0, 2, 1, 3).reshape(p, g, b * m)

    def select(self, positions):
        """Observation set restricted to the given block positions."""
        pos = np.asarray(positions, dtype=int)
        specs = None if self.specs is None else tuple(self.specs[i] for i in pos)
        off = None if self.offset is None else self.offset[:, pos]
        boff = None if self.bin_offset is None else self.bin_offset[:, pos]
        return ObservationSet(self.y[:, pos], specs, self.ap_indices[pos], off, boff)

    def with_offset(self, offset, bin_offset=None):
        def arr(x):
            return None if x is None else np.asarray(x, dtype=complex)
        return replace(self, offset=arr(offset), bin_offset=arr(bin_offset))

    def bins(self, bounded=True):
        """Real/imag bin edges of every sample, shifted by ``offset``.

        Returns ``(lo_re, hi_re, lo_im, hi_im)`` arrays shaped like ``y``.
        """
        if not self.quantized:
            raise ValueError("unquantized observations have no bins")
        shape = self.y.shape
        lo_re, hi_re = np.empty(shape), np.empty(shape)
        lo_im, hi_im = np.empty(shape), np.empty(shape)
        for i, spec in enumerate(self.specs):
            blk = self.y[:, i]
            lo_re[:, i], hi_re[:, i] = bin_edges(blk.real, spec, bounded)
            lo_im[:, i], hi_im[:, i] = bin_edges(blk.imag, spec, bounded)
        off = self.offset if self.bin_offset is None else self.bin_offset
        if off is not None:
            lo_re -= off.real
            hi_re -= off.real
            lo_im -= off.imag
            hi_im -= off.imag
        return lo_re, hi_re, lo_im, hi_im

    def to_dict(self):
        doc = {
            "ap_indices": self.ap_indices.tolist(),
            "shape": list(self.y.shape),
            "re": self.y.real.ravel().tolist(),
            "im": self.y.imag.ravel().tolist(),
            "specs": None if self.specs is None else [s.to_dict() for s in self.specs],
        }
        if self.offset is not None:
            doc["offset_re"] = self.offset.real.ravel().tolist()
            doc["offset_im"] = self.offset.imag.ravel().tolist()
        if self.bin_offset is not None:
            doc["bin_offset_re"] = self.bin_offset.real.ravel().tolist()
            doc["bin_offset_im"] = self.bin_offset.imag.ravel().tolist()
        return doc

    @classmethod
    def from_dict(cls, doc):
        shape = tuple(doc["shape"])
        y = (np.asarray(doc["re"]) + 1j * np.asarray(doc["im"])).reshape(shape)
        specs = None
        if doc.get("specs") is not None:
            specs = tuple(QuantizerSpec.from_dict(s) for s in doc["specs"])
        def arr(key):
            if key + "_re" not in doc:
                return None
            return (np.asarray(doc[key + "_re"]) + 1j * np.asarray(doc[key + "_im"])).reshape(shape)
        return cls(y, specs, np.asarray(doc["ap_indices"]), arr("offset"), arr("bin_offset"))


def observe(rx, q_bits=None, ap_indices=None):
    """Quantize raw received blocks per AP (``q_bits=None`` leaves them as is)."""
    rx = np.asarray(rx)
    if ap_indices is None:
        ap_indices = np.arange(rx.shape[1])
    if q_bits is None:
        return ObservationSet(rx, None, ap_indices)
    yq, specs = quantize_blocks(rx, q_bits)
    return ObservationSet(yq, specs, ap_indices)
