"""
Network geometry, user activity, multipath channels, pilots and received
pilot observations for one grant-free access frame.

Array layout used throughout the package::

    H, W   : (P~, B, K, Mc)   channel / angular channel per subcarrier and AP
    S      : (P~, G, K)       pilot matrices
    Y      : (P~, B, G, Mc)   received pilot block per subcarrier and AP
"""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor
from .errors import (InvalidDimensionError, InvalidDistanceError,
                     InvalidParameterError, UnsupportedLayoutError)

SQRT3 = math.sqrt(3.0)


def dbm_to_watt(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class ScenarioConfig:
    """Physical-layer parameters. Defaults reproduce the full-scale network."""

    k: int = 2800
    k_a: int = 140
    b: int = 7
    m_c: int = 16
    g: int = 40
    p: int = 64
    p_tilde: int = 1
    n: int = 2048
    n_cp: int = 64
    bandwidth: float = 10e6
    radius_km: float = 2.65
    ap_spacing_km: float = SQRT3
    tx_power_dbm: float = 23.0
    noise_psd_dbm_hz: float = -174.0
    min_paths: int = 40
    max_paths: int = 100
    angular_spread_deg: float = 10.0
    guard_km: float = 0.03
    # 1-based pilot subcarrier indices; None selects the first p_tilde
    subcarriers: tuple = None
    noiseless: bool = False

    def validate(self):
        for name in ("k", "b", "m_c", "g", "p", "p_tilde", "n", "n_cp"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if not 0 <= self.k_a <= self.k:
            raise InvalidParameterError("need 0 <= k_a <= k")
        if self.p_tilde > self.p:
            raise InvalidParameterError("p_tilde cannot exceed p")
        if not 1 <= self.min_paths <= self.max_paths:
            raise InvalidParameterError("need 1 <= min_paths <= max_paths")
        if self.subcarriers is not None and len(self.subcarriers) != self.p_tilde:
            raise InvalidParameterError("subcarriers must list p_tilde indices")
        return self

    @property
    def tx_power(self):
        """Per-UE transmit power in watts."""
        return dbm_to_watt(self.tx_power_dbm)

    @property
    def noise_var(self):
        """AWGN variance of one subcarrier sample (PSD times subcarrier spacing)."""
        if self.noiseless:
            return 0.0
        return dbm_to_watt(self.noise_psd_dbm_hz) * self.bandwidth / self.p

    @property
    def pilot_indices(self):
        if self.subcarriers is not None:
            return np.asarray(self.subcarriers, dtype=int)
        return np.arange(1, self.p_tilde + 1)

    @property
    def pilot_freqs(self):
        """Baseband frequency of each selected pilot subcarrier (Hz)."""
        return -self.bandwidth / 2 + self.bandwidth * self.pilot_indices / self.p


# -- geometry ---------------------------------------------------------------

@dataclass
class NetworkGeometry:
    ap_positions: np.ndarray      # (B, 2) km
    ue_positions: np.ndarray      # (K, 2) km
    coverage_radius: float
    ap_spacing: float

    @property
    def num_aps(self):
        return len(self.ap_positions)

    @property
    def num_users(self):
        return len(self.ue_positions)

    def distances(self):
        """AP-to-UE distances ``d[b, k]`` in km."""
        diff = self.ap_positions[:, None, :] - self.ue_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    def nearest_ap(self, aps=None):
        """Index of the nearest AP per user (ties to the lowest index).

        With ``aps`` given, the search is restricted to that AP subset and
        the returned values are positions within ``aps``.
        """
        d = self.distances()
        if aps is not None:
            d = d[np.asarray(aps)]
        return np.argmin(d, axis=0)


def layout_hex(b, spacing):
    """AP positions: one AP at the origin plus (for ``b=7``) a hexagonal ring."""
    if spacing <= 0:
        raise InvalidParameterError("spacing must be positive")
    if b == 1:
        return np.zeros((1, 2))
    if b == 7:
        ang = np.arange(6) * np.pi / 3
        ring = spacing * np.column_stack([np.cos(ang), np.sin(ang)])
        return np.vstack([np.zeros((1, 2)), ring])
    raise UnsupportedLayoutError(f"hexagonal layout supports 1 or 7 APs, not {b}")


def place_users(k, ap_positions, radius, guard, rng):
    """Uniform placement over the coverage disk, rejecting points within
    ``guard`` km of any AP."""
    out = np.empty((k, 2))
    filled = 0
    while filled < k:
        need = k - filled
        r = radius * np.sqrt(rng.random(2 * need + 8))
        a = 2 * np.pi * rng.random(r.size)
        pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
        d = np.hypot(*(pts[:, None, :] - ap_positions[None, :, :]).transpose(2, 0, 1))
        ok = pts[np.all(d >= guard, axis=1)][:need]
        out[filled:filled + len(ok)] = ok
        filled += len(ok)
    return out


def make_geometry(cfg, rng):
    aps = layout_hex(cfg.b, cfg.ap_spacing_km)
    ues = place_users(cfg.k, aps, cfg.radius_km, cfg.guard_km, rng)
    return NetworkGeometry(aps, ues, cfg.radius_km, cfg.ap_spacing_km)


# -- activity ---------------------------------------------------------------

@dataclass
class ActivityPattern:
    alpha: np.ndarray       # (K,) 0/1
    active_set: np.ndarray  # sorted user indices

    @property
    def k_a(self):
        return len(self.active_set)

    @classmethod
    def from_set(cls, k, active):
        alpha = np.zeros(k, dtype=np.int8)
        active = np.sort(np.asarray(active, dtype=int))
        alpha[active] = 1
        return cls(alpha, active)


def draw_activity(k, k_a, rng):
    if k_a > k or k_a < 0:
        raise InvalidParameterError(f"cannot activate {k_a} of {k} users")
    active = rng.choice(k, size=k_a, replace=False)
    return ActivityPattern.from_set(k, active)


# -- channels ---------------------------------------------------------------

def path_loss_db(d):
    """Distance-dependent path loss ``128.1 + 37.6 log10(d)`` with ``d`` in km."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise InvalidDistanceError("distance must be positive")
    out = 128.1 + 37.6 * np.log10(d)
    return float(out) if out.ndim == 0 else out


def large_scale_gain(d):
    """Linear amplitude gain ``10^(-PL/20)``."""
    return 10.0 ** (-np.asarray(path_loss_db(d)) / 20.0)


@dataclass
class MultipathParams:
    """One-ring multipath parameters.

    ``n_paths`` and ``large_scale`` cover every (AP, UE) pair; the per-path
    arrays cover only the users listed in ``users`` and are padded to the
    longest path count (entries past ``n_paths`` are ignored).
    """

    n_paths: np.ndarray       # (B, K) int
    large_scale: np.ndarray   # (B, K) linear amplitude gain
    tx_power: np.ndarray      # (K,) W
    users: np.ndarray         # (U,) user indices with drawn paths
    gains: np.ndarray         # (U, B, L) complex
    delays: np.ndarray        # (U, B, L) seconds
    spatial_freq: np.ndarray  # (U, B, L) d/lambda * sin(aoa)

    def path_mask(self):
        lmax = self.gains.shape[-1]
        n = self.n_paths[:, self.users].T  # (U, B)
        return np.arange(lmax)[None, None, :] < n[..., None]


@dataclass
class ChannelTensor:
    spatial: np.ndarray   # (P~, B, K, Mc)
    params: MultipathParams

    @property
    def angular(self):
        a_r = tensor.dft_unitary(self.spatial.shape[-1])
        return tensor.spatial_to_angular(self.spatial, a_r)


def assemble_channels(params, alpha, freqs, m_c):
    """Evaluate the multipath sum for the users in ``params.users``.

    Row ``k`` of ``H[p, b]`` is ``sqrt(P_k) rho_bk alpha_k`` times the
    small-scale vector ``sum_l beta_l a_R(phi_l) exp(-j 2 pi tau_l f_p)``.
    """
    k = len(alpha)
    b = params.n_paths.shape[0]
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    h = np.zeros((len(freqs), b, k, m_c), dtype=complex)
    if len(params.users) == 0:
        return h
    mask = params.path_mask()
    beta = np.where(mask, params.gains, 0.0)
    m = np.arange(m_c)
    steer = np.exp(-2j * np.pi * params.spatial_freq[..., None] * m)        # (U,B,L,Mc)
    delay = np.exp(-2j * np.pi * params.delays[..., None] * freqs)         # (U,B,L,P)
    small = np.einsum("ubl,ublm,ublp->pbum", beta, steer, delay)
    u = params.users
    scale = (np.sqrt(params.tx_power[u])[None, :] * params.large_scale[:, u]
             * alpha[u][None, :])                                          # (B,U)
    h[:, :, u, :] = small * scale[None, :, :, None]
    return h


def gen_channels(geom, act, cfg, rng):
    """Draw one-ring multipath parameters and build the channel tensor."""
    b, k = geom.num_aps, geom.num_users
    n_paths = rng.integers(cfg.min_paths, cfg.max_paths + 1, size=(b, k))
    rho = large_scale_gain(geom.distances())
    power = np.full(k, cfg.tx_power)
    users = np.asarray(act.active_set, dtype=int)
    u = len(users)
    lmax = cfg.max_paths
    gains = tensor.sample_cgaussian(0.0, 1.0, rng, size=(u, b, lmax))
    delays = rng.uniform(0.0, cfg.n_cp / cfg.bandwidth, size=(u, b, lmax))
    nominal = rng.uniform(-np.pi / 2, np.pi / 2, size=(u, b, 1))
    spread = np.deg2rad(cfg.angular_spread_deg)
    aoa = nominal + rng.uniform(-spread, spread, size=(u, b, lmax))
    # half-wavelength element spacing
    phi = 0.5 * np.sin(aoa)
    params = MultipathParams(n_paths, rho, power, users, gains, delays, phi)
    h = assemble_channels(params, act.alpha, cfg.pilot_freqs, cfg.m_c)
    return ChannelTensor(h, params)


# -- pilots and observations -------------------------------------------------

@dataclass
class PilotBook:
    s: np.ndarray       # (P~, G, K)
    freqs: np.ndarray   # (P~,) Hz

    @property
    def g(self):
        return self.s.shape[1]

    def restrict(self, users):
        return PilotBook(self.s[:, :, np.asarray(users, dtype=int)], self.freqs)


def gen_pilots(g, k, p_tilde, rng, freqs=None):
    """i.i.d. ``CN(0, 1)`` pilot entries, drawn independently per subcarrier."""
    if g < 1:
        raise InvalidParameterError("pilot length must be >= 1")
    s = tensor.sample_cgaussian(0.0, 1.0, rng, size=(p_tilde, g, k))
    if freqs is None:
        freqs = np.zeros(p_tilde)
    return PilotBook(s, np.asarray(freqs, dtype=float))


def synthesize_rx(pilots, h, noise_var, rng):
    """Received pilot blocks ``Y[p, b] = S_p H[p, b] + N``."""
    s = pilots.s
    h = np.asarray(h)
    if h.ndim != 4 or s.shape[0] != h.shape[0] or s.shape[2] != h.shape[2]:
        raise InvalidDimensionError(
            f"pilots {s.shape} incompatible with channel tensor {h.shape}")
    if noise_var < 0:
        raise InvalidParameterError("noise variance must be nonnegative")
    y = np.einsum("pgk,pbkm->pbgm", s, h)
    if noise_var > 0:
        y = y + tensor.sample_cgaussian(0.0, noise_var, rng, size=y.shape)
    return y


# -- frame timing -------------------------------------------------------------

def pilot_latency(g, n_cp, dft_len, b_s):
    """Duration of ``g`` CP-OFDM pilot symbols (seconds)."""
    if min(g, n_cp, dft_len, b_s) <= 0:
        raise InvalidParameterError("all arguments must be positive")
    return g * (n_cp + dft_len) / b_s


def latency_reduction(n_cp, p, n):
    """Fractional pilot-phase latency saving of a short-DFT pilot symbol."""
    if min(n_cp, p, n) <= 0:
        raise InvalidParameterError("all arguments must be positive")
    return 1.0 - (n_cp + p) / (n_cp + n)


# -- whole scenario -----------------------------------------------------------

@dataclass
class Scenario:
    cfg: ScenarioConfig
    geometry: NetworkGeometry
    activity: ActivityPattern
    channels: ChannelTensor
    pilots: PilotBook
    rx: np.ndarray                 # unquantized Y, (P~, B, G, Mc)
    seed: int = 0
    trial: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def noise_var(self):
        return self.cfg.noise_var


def generate_scenario(cfg, seed, trial=0):
    """Build one frame from independent substreams of ``(seed, trial)``."""
    cfg.validate()
    geom = make_geometry(cfg, tensor.make_rng(seed, trial, "geometry"))
    act = draw_activity(cfg.k, cfg.k_a, tensor.make_rng(seed, trial, "activity"))
    ch = gen_channels(geom, act, cfg, tensor.make_rng(seed, trial, "channels"))
    pilots = gen_pilots(cfg.g, cfg.k, cfg.p_tilde, tensor.make_rng(seed, trial, "pilots"),
                        freqs=cfg.pilot_freqs)
    rx = synthesize_rx(pilots, ch.spatial, cfg.noise_var,
                       tensor.make_rng(seed, trial, "noise"))
    return Scenario(cfg, geom, act, ch, pilots, rx, seed=seed, trial=trial)


# -- dump / replay ------------------------------------------------------------

def _cplx(a):
    a = np.asarray(a)
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


def _uncplx(d):
    return np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)


def dump_scenario(scn, path):
    """Write everything needed to rebuild ``scn`` bit-for-bit as JSON."""
    cfg = asdict(scn.cfg)
    if cfg["subcarriers"] is not None:
        cfg["subcarriers"] = list(cfg["subcarriers"])
    prm = scn.channels.params
    doc = {
        "format": "cfaccess-scenario/1",
        "seed": int(scn.seed),
        "trial": int(scn.trial),
        "config": cfg,
        "geometry": {
            "ap_positions": scn.geometry.ap_positions.tolist(),
            "ue_positions": scn.geometry.ue_positions.tolist(),
            "coverage_radius": scn.geometry.coverage_radius,
            "ap_spacing": scn.geometry.ap_spacing,
        },
        "active_set": scn.activity.active_set.tolist(),
        "multipath": {
            "n_paths": prm.n_paths.tolist(),
            "large_scale": prm.large_scale.tolist(),
            "tx_power": prm.tx_power.tolist(),
            "users": prm.users.tolist(),
            "gains": _cplx(prm.gains),
            "delays": prm.delays.tolist(),
            "spatial_freq": prm.spatial_freq.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_scenario(path):
    """Rebuild a scenario written by :func:`dump_scenario`.

    Channels come from the stored multipath parameters; pilots and noise
    are regenerated from the stored seed, so the result matches the
    original exactly.
    """
    with open(path) as fh:
        doc = json.load(fh)
    raw = dict(doc["config"])
    if raw.get("subcarriers") is not None:
        raw["subcarriers"] = tuple(raw["subcarriers"])
    cfg = ScenarioConfig(**raw)
    g = doc["geometry"]
    geom = NetworkGeometry(np.asarray(g["ap_positions"], dtype=float).reshape(-1, 2),
                           np.asarray(g["ue_positions"], dtype=float).reshape(-1, 2),
                           g["coverage_radius"], g["ap_spacing"])
    act = ActivityPattern.from_set(cfg.k, doc["active_set"])
    mp = doc["multipath"]
    lmax = cfg.max_paths
    u = len(mp["users"])
    params = MultipathParams(
        np.asarray(mp["n_paths"], dtype=int),
        np.asarray(mp["large_scale"], dtype=float),
        np.asarray(mp["tx_power"], dtype=float),
        np.asarray(mp["users"], dtype=int),
        _uncplx(mp["gains"]).reshape(u, cfg.b, lmax),
        np.asarray(mp["delays"], dtype=float).reshape(u, cfg.b, lmax),
        np.asarray(mp["spatial_freq"], dtype=float).reshape(u, cfg.b, lmax),
    )
    h = assemble_channels(params, act.alpha, cfg.pilot_freqs, cfg.m_c)
    seed, trial = doc["seed"], doc["trial"]
    pilots = gen_pilots(cfg.g, cfg.k, cfg.p_tilde, tensor.make_rng(seed, trial, "pilots"),
                        freqs=cfg.pilot_freqs)
    rx = synthesize_rx(pilots, h, cfg.noise_var, tensor.make_rng(seed, trial, "noise"))
    return Scenario(cfg, geom, act, ChannelTensor(h, params), pilots, rx,
                    seed=seed, trial=trial)
