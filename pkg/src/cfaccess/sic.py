"""
Successive interference cancellation for joint activity detection and
channel estimation.

Each SIC iteration runs spatial-domain SS-GAMP on the residual
observations, thresholds the belief indicators at each user's nearest AP
(a loose threshold for the rough active set, a strict one for the
reliable set), re-estimates the channels of every detected user in the
angular domain from the original observations, and cancels a random
subset of the reliable users.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .gamp import GampConfig, PriorSpec, quantization_noise_floor, ss_gamp
from .observations import ObservationSet
from .quantizer import quantize
from .tensor import angular_to_spatial, dft_unitary, make_rng, spatial_to_angular

LOW_RES_MAX_BITS = 6


@dataclass
class SicConfig:
    t_sic: int = 3
    p_det: float = 0.1
    p_rel: float = 0.9
    lambda_aus: float = 0.8
    # None: re-quantize the cancelled signal when Q <= LOW_RES_MAX_BITS
    low_res_quantize: bool = None
    # "auto": nonlinear module for low-resolution observations only
    aud_mode: str = "auto"
    angular_spread_deg: float = 10.0
    ce_gamma0: float = 0.2

    def validate(self):
        if self.t_sic < 1:
            raise InvalidParameterError("t_sic must be >= 1")
        if not 0 <= self.p_det < self.p_rel <= 1:
            raise InvalidParameterError("need 0 <= p_det < p_rel <= 1")
        if not 0 <= self.lambda_aus <= 1:
            raise InvalidParameterError("lambda_aus must lie in [0, 1]")
        if self.aud_mode not in ("auto", "nonlinear", "slm-only"):
            raise InvalidParameterError(f"unknown aud_mode {self.aud_mode!r}")
        return self


@dataclass
class DetectionResult:
    """Activity and channel estimates of one processing unit.

    ``h_hat`` is ``(P, B_sel, K, Mc)`` in the spatial domain with zero rows
    outside ``a_hat``; ``belief[k]`` is the averaged belief indicator at the
    user's nearest AP.
    """

    alpha_hat: np.ndarray
    a_hat: np.ndarray
    xi: np.ndarray
    h_hat: np.ndarray
    ap_indices: np.ndarray
    belief: np.ndarray
    diagnostics: list = field(default_factory=list)
    diverged: bool = False

    @property
    def num_users(self):
        return len(self.alpha_hat)


def low_res(obs, cfg):
    if not obs.quantized:
        return False
    if cfg.low_res_quantize is not None:
        return bool(cfg.low_res_quantize)
    return max(s.q_bits for s in obs.specs) <= LOW_RES_MAX_BITS


def aud_mode(obs, cfg):
    """SS-GAMP mode of the detection stage."""
    if cfg.aud_mode == "slm-only" or not obs.quantized:
        return "slm-only-spatial"
    if cfg.aud_mode == "nonlinear":
        return "spatial-with-quantizer"
    q = max(s.q_bits for s in obs.specs)
    return "spatial-with-quantizer" if q <= LOW_RES_MAX_BITS else "slm-only-spatial"


def user_belief(theta, nearest):
    """Average of ``theta[:, b*, k, :]`` over subcarriers and antennas.

    ``nearest[k]`` is the block position of user k's nearest AP.
    """
    theta = np.asarray(theta, dtype=float)
    k = theta.shape[2]
    per_ap = theta.mean(axis=(0, 3))
    return per_ap[np.asarray(nearest), np.arange(k)]


def bi_aue_detect(theta, geom, p_th, ap_indices=None):
    """Users whose averaged belief at the nearest AP reaches ``p_th``.

    ``ap_indices`` lists the global APs of ``theta``'s blocks (all APs by
    default); the nearest AP is searched within them.
    """
    if ap_indices is None:
        ap_indices = np.arange(np.shape(theta)[1])
    nearest = geom.nearest_ap(ap_indices)
    belief = user_belief(theta, nearest)
    return np.flatnonzero(belief >= p_th)


def angular_prior(prior, users, m_c, spread_deg, gamma0=0.2):
    """Prior of the restricted angular system.

    The angular energy of a user concentrates on roughly
    ``ceil(Mc * sin(spread))`` bins, so the slab variance grows by the
    inverse of that fraction.
    """
    support = max(1, math.ceil(m_c * math.sin(math.radians(spread_deg))))
    tau = prior.tau[:, np.asarray(users, dtype=int)] * (m_c / support)
    return PriorSpec(tau, gamma0, None)


def estimate_channels_angular(obs_angular, pilots, a_hat, prior, cfg=None, spread_deg=10.0,
                              gamma0=0.2, noise_floor=None):
    """Angular-domain channel rows of the users in ``a_hat``.

    Parameters
    ----------
    obs_angular : ObservationSet
        Observations already multiplied by ``conj(A_R)``.
    pilots : ndarray
        Full pilot tensor ``(P, G, K)``.
    a_hat : array of int
        Users to estimate.
    prior : PriorSpec
        Spatial prior over all users; restricted and rescaled here.
    noise_floor : array_like, optional
        Per-block lower bound on the noise estimate (the DFT keeps the
        quantization-error variance of the spatial samples).

    Returns
    -------
    w_hat : ndarray
        ``(P, B, |a_hat|, Mc)`` angular rows (empty when ``a_hat`` is empty).
    result : GampResult or None
    """
    a_hat = np.asarray(a_hat, dtype=int)
    y = obs_angular.values
    p, b, _, m = y.shape
    if a_hat.size == 0:
        return np.zeros((p, b, 0, m), dtype=complex), None
    s = np.asarray(getattr(pilots, "s", pilots))[:, :, a_hat]
    ce_prior = angular_prior(prior, a_hat, m, spread_deg, gamma0)
    res = ss_gamp(obs_angular, s, ce_prior, "slm-only-angular", cfg, noise_floor=noise_floor)
    return res.h_hat, res


def select_cancellation_set(xi, lambda_aus, rng):
    """Uniformly random subset of ``floor(lambda_aus * |xi|)`` reliable users."""
    if not 0 <= lambda_aus <= 1:
        raise InvalidParameterError("lambda_aus must lie in [0, 1]")
    xi = np.asarray(xi, dtype=int)
    n = int(math.floor(lambda_aus * len(xi) + 1e-12))
    if n == 0:
        return np.zeros(0, dtype=int)
    if n == len(xi):
        return np.sort(xi)
    return np.sort(rng.choice(xi, size=n, replace=False))


def reconstruct(h_hat, gamma_set, pilots):
    """``S[:, Gamma] H[Gamma, :]`` for every block, shape ``(P, B, G, Mc)``."""
    s = np.asarray(getattr(pilots, "s", pilots))
    g = np.asarray(gamma_set, dtype=int)
    return s[:, None][..., g] @ h_hat[:, :, g, :]


def cancel_identified(obs, h_hat, gamma_set, pilots, low_res_quantize=False):
    """Residual observations after removing the users in ``gamma_set``.

    The reconstructed contribution is re-quantized with each AP's original
    quantizer when ``low_res_quantize`` is set. The result keeps the
    forwarded samples and carries the subtracted signal as ``offset``; the
    bins are shifted by the exact reconstruction (``bin_offset``) so they
    still bound the residual of the unquantized signal.
    """
    gamma_set = np.asarray(gamma_set, dtype=int)
    if gamma_set.size == 0:
        return obs
    exact = reconstruct(h_hat, gamma_set, pilots)
    sub = exact
    if low_res_quantize and obs.quantized:
        sub = exact.copy()
        for i, spec in enumerate(obs.specs):
            if not spec.degenerate:
                sub[:, i] = quantize(exact[:, i], spec)
    base = 0.0 if obs.offset is None else obs.offset
    base_bins = base if obs.bin_offset is None else obs.bin_offset
    bin_offset = None if sub is exact and obs.bin_offset is None else base_bins + exact
    return obs.with_offset(base + sub, bin_offset)


def sic_aud_ce(obs, pilots, geom, prior, cfg=None, gamp_cfg=None, noise_var=None, rng=None,
               users=None):
    """Run the SIC-based detection and estimation loop.

    Parameters
    ----------
    obs : ObservationSet
        Observations of one processing unit (all APs, or one edge group).
    pilots : PilotBook or ndarray
        Pilots of the users in the model, ``(P, G, K)``.
    geom : NetworkGeometry
    prior : PriorSpec
        Spatial prior with ``tau`` shaped ``(B_sel, K)``.
    noise_var : float, optional
        Known AWGN variance (per complex sample) for the nonlinear module.
    rng : numpy.random.Generator, optional
        Source of the cancellation subsets.
    users : array of int, optional
        Global indices of the model's users (all users by default); used
        only to find each user's nearest AP.

    Returns
    -------
    DetectionResult
    """
    cfg = (cfg or SicConfig()).validate()
    gamp_cfg = gamp_cfg or GampConfig()
    rng = rng if rng is not None else make_rng(0, "sic")
    s = np.asarray(getattr(pilots, "s", pilots))
    p, nb, g, m = obs.y.shape
    k = s.shape[2]
    if users is None:
        users = np.arange(k)
    nearest = geom.nearest_ap(obs.ap_indices)[np.asarray(users, dtype=int)]
    mode = aud_mode(obs, cfg)
    requant = low_res(obs, cfg)
    a_r = dft_unitary(m)
    obs_ang = ObservationSet(spatial_to_angular(obs.values, a_r), None, obs.ap_indices)
    ang_floor = None
    if gamp_cfg.quant_noise_floor:
        ang_floor = quantization_noise_floor(obs, noise_var)

    xi = np.zeros(0, dtype=int)
    a_hat = np.zeros(0, dtype=int)
    h_hat = np.zeros((p, nb, k, m), dtype=complex)
    belief = np.zeros(k)
    current = obs
    diagnostics = []
    diverged = False

    for j in range(1, cfg.t_sic + 1):
        res = ss_gamp(current, s, prior, mode, gamp_cfg, noise_var)
        if res.diverged and j > 1:
            diverged = True
            diagnostics.append({"sic_iter": j, "aborted": True})
            break
        diverged = diverged or res.diverged
        b_j = user_belief(res.theta, nearest)
        detected = np.flatnonzero(b_j >= cfg.p_det)
        reliable = np.flatnonzero(b_j >= cfg.p_rel)
        a_new = np.union1d(detected, xi)
        xi_new = np.union1d(xi, reliable)

        w_rows, ce = estimate_channels_angular(obs_ang, s, a_new, prior, gamp_cfg,
                                               cfg.angular_spread_deg, cfg.ce_gamma0, ang_floor)
        if ce is not None and ce.diverged and j > 1:
            diverged = True
            diagnostics.append({"sic_iter": j, "aborted": True})
            break
        diverged = diverged or (ce is not None and ce.diverged)
        h_new = np.zeros((p, nb, k, m), dtype=complex)
        h_new[:, :, a_new, :] = angular_to_spatial(w_rows, a_r)

        a_hat, xi, h_hat, belief = a_new, xi_new, h_new, b_j
        gamma_set = np.zeros(0, dtype=int)
        if j < cfg.t_sic:
            gamma_set = select_cancellation_set(xi, cfg.lambda_aus, rng)
            current = cancel_identified(obs, h_hat, gamma_set, s, requant)
        diagnostics.append({
            "sic_iter": j,
            "n_a_hat": int(a_hat.size),
            "n_xi": int(xi.size),
            "n_gamma": int(gamma_set.size),
            "residual_energy": float(np.sum(np.abs(current.values) ** 2)),
            "amp_iterations": res.iterations,
            "sigma_hat": res.sigma_hat,
        })

    alpha = np.zeros(k, dtype=np.int8)
    alpha[a_hat] = 1
    return DetectionResult(alpha, a_hat, xi, h_hat, np.array(obs.ap_indices), belief,
                           diagnostics, diverged)


def joint_aud_ce(obs, pilots, geom, prior, gamp_cfg=None, noise_var=None, users=None,
                 threshold=0.1, mode=None):
    """Single-pass joint detection and estimation without cancellation.

    Spatial-domain SS-GAMP gives both the activity (belief at the nearest
    AP against ``threshold``) and the channel estimates.
    """
    s = np.asarray(getattr(pilots, "s", pilots))
    k = s.shape[2]
    if users is None:
        users = np.arange(k)
    nearest = geom.nearest_ap(obs.ap_indices)[np.asarray(users, dtype=int)]
    if mode is None:
        mode = aud_mode(obs, SicConfig())
    res = ss_gamp(obs, s, prior, mode, gamp_cfg, noise_var)
    belief = user_belief(res.theta, nearest)
    a_hat = np.flatnonzero(belief >= threshold)
    h_hat = np.zeros_like(res.h_hat)
    h_hat[:, :, a_hat, :] = res.h_hat[:, :, a_hat, :]
    alpha = np.zeros(k, dtype=np.int8)
    alpha[a_hat] = 1
    diag = [{"sic_iter": 1, "n_a_hat": int(a_hat.size), "amp_iterations": res.iterations,
             "sigma_hat": res.sigma_hat}]
    return DetectionResult(alpha, a_hat, a_hat.copy(), h_hat, np.array(obs.ap_indices), belief,
                           diag, res.diverged)
