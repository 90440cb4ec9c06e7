"""
Structured-sparsity generalized AMP.

Two modules exchange extrinsic messages in a turbo loop:

* the nonlinear module turns quantized samples into an equivalent linear
  measurement ``Y_hat = S H + noise`` by MMSE-estimating the unquantized
  signal inside each quantization bin;
* the linear module runs AMP with a spike-and-slab prior on ``H``, learns
  the noise level and sparsity ratios by EM, and shares the sparsity
  ratios across subcarriers/antennas/APs (spatial mode) or across
  neighbouring angular bins (angular mode).

All blocks are processed as batched arrays: observations ``(P, B, G, M)``,
pilots ``(P, G, K)``, coefficients ``(P, B, K, M)``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .errors import InvalidDimensionError, InvalidParameterError, NumericalGuardError
from .quantizer import bin_edges

MODES = ("spatial-with-quantizer", "slm-only-spatial", "slm-only-angular")

VAR_FLOOR = 1e-15
GAMMA_FLOOR = 1e-12

_SQRT2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)
_PANELS = np.arange(4.0)


@dataclass
class GampConfig:
    t_amp: int = 20
    t_tur: int = 10
    eta: float = 1e-5
    damping: float = 0.3
    gamma0: float = None          # None: min(0.5, G / (K ln(K/G)))
    sigma0_ratio: float = 0.01    # initial noise level relative to mean received power
    # "gamp": extrinsic prior mean/variance of the linear module are the
    # Onsager-corrected output estimate and its average variance.
    # "literal": S H_hat plus the correction term, variance mean(C^2).
    extrinsic: str = "gamp"
    bound_outer_bins: bool = True
    # the relative-change stop also waits for the EM noise estimate to settle
    # (relative change below this); None uses the change test alone
    sigma_rtol: float = 1e-2
    divergence_patience: int = 5
    # relative changes below this never count toward divergence
    divergence_floor: float = 0.0
    # "global": one noise estimate averaged over all blocks; "block": one per (p, b)
    sigma_scope: str = "block"
    # mixing weight of the previous extrinsic prior from the second turbo pass on
    turbo_damping: float = 0.0
    # stop the turbo loop once a pass changes the estimate more than the
    # previous one did (or by more than its own energy), keeping the
    # previous pass
    turbo_guard: bool = True
    # keep the EM noise estimate of quantized blocks above the quantization
    # error: delta^2/6 in the linear-only modes, the nonlinear module's
    # extrinsic variance in the quantizer mode
    quant_noise_floor: bool = True
    trace: bool = False

    def validate(self):
        if self.t_amp < 1 or self.t_tur < 1:
            raise InvalidParameterError("iteration limits must be >= 1")
        if not 0 <= self.damping < 1:
            raise InvalidParameterError("damping must lie in [0, 1)")
        if self.sigma_scope not in ("global", "block"):
            raise InvalidParameterError(f"unknown sigma_scope {self.sigma_scope!r}")
        if self.extrinsic not in ("gamp", "literal"):
            raise InvalidParameterError(f"unknown extrinsic rule {self.extrinsic!r}")
        return self


@dataclass
class PriorSpec:
    """Spike-and-slab prior of the channel coefficients.

    ``tau[b, k]`` is the slab variance (constant over subcarriers and
    antennas), the slab mean is zero. ``distances[b, k]`` weights the
    cross-AP sparsity refinement.
    """

    tau: np.ndarray
    gamma: object = None          # scalar or array broadcastable to (P, B, K, M)
    distances: np.ndarray = None

    def restrict(self, aps=None, users=None):
        tau, dist, gamma = self.tau, self.distances, self.gamma
        if aps is not None:
            tau = tau[np.asarray(aps)]
            dist = None if dist is None else dist[np.asarray(aps)]
        if users is not None:
            tau = tau[:, np.asarray(users)]
            dist = None if dist is None else dist[:, np.asarray(users)]
        if gamma is not None and np.ndim(gamma) > 0:
            raise InvalidParameterError("restrict() supports scalar gamma only")
        return PriorSpec(tau, gamma, dist)


def default_gamma0(g, k):
    if k <= g:
        return 0.5
    return min(0.5, g / (k * math.log(k / g)))


# -- nonlinear module -------------------------------------------------------

def _gl_moments(x, logw, w):
    """Mean and centred variance along the last axis for nodes ``x`` with
    quadrature weights ``w * exp(logw)``."""
    f = w * np.exp(logw - logw.max(axis=-1, keepdims=True))
    m0 = f.sum(axis=-1)
    m1 = (f * x).sum(axis=-1) / m0
    m2 = (f * (x - m1[..., None]) ** 2).sum(axis=-1) / m0
    return m1, m2


def _one_sided_moments(a, w):
    """Moments of ``X ~ N(0,1)`` restricted to ``[a, a + w]`` with ``a >= 0``.

    Works with ``t = X - a`` whose density is ``exp(-a t - t^2/2)`` on
    ``[0, w]``; the range is cut where the density has dropped by e^-50.
    Composite Gauss-Legendre avoids the cancellation that the closed form
    suffers far in the tail.
    """
    cut = np.sqrt(a * a + 100.0) - a
    top = np.minimum(w, cut)[:, None]
    panels = _PANELS[None, :, None]
    x = (top[:, :, None] * (panels + 0.5 * (_GL_X[None, None, :] + 1.0)) / len(_PANELS))
    x = x.reshape(len(a), -1)
    wts = np.tile(_GL_W, len(_PANELS))[None, :]
    logw = -a[:, None] * x - 0.5 * x * x
    m1, m2 = _gl_moments(x, logw, wts)
    return a + m1, m2


def _std_truncated_moments(a, b):
    """Mean and variance of a standard normal truncated to ``[a, b]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    shape = a.shape
    a, b = a.ravel(), b.ravel()
    mean = np.zeros(a.shape)
    var = np.zeros(a.shape)

    # one-sided bins, reflected so that they lie on the positive axis
    lower = b <= 0
    upper = a >= 0
    for sel, sign in ((upper & ~lower, 1.0), (lower, -1.0)):
        if np.any(sel):
            lo = a[sel] if sign > 0 else -b[sel]
            hi = b[sel] if sign > 0 else -a[sel]
            m, v = _one_sided_moments(lo, hi - lo)
            mean[sel] = sign * m
            var[sel] = v

    straddle = ~(lower | upper)
    narrow = straddle & (b - a <= 1.0)
    if np.any(narrow):
        an, bn = a[narrow], b[narrow]
        x = 0.5 * (bn + an)[:, None] + 0.5 * (bn - an)[:, None] * _GL_X[None, :]
        mean[narrow], var[narrow] = _gl_moments(x, -0.5 * x * x, _GL_W[None, :])

    wide = straddle & ~narrow
    if np.any(wide):
        aw, bw = a[wide], b[wide]
        z = 0.5 * (special.erf(bw / _SQRT2) - special.erf(aw / _SQRT2))
        pa = np.where(np.isfinite(aw), np.exp(-0.5 * aw * aw) / (_SQRT_2PI * z), 0.0)
        pb = np.where(np.isfinite(bw), np.exp(-0.5 * bw * bw) / (_SQRT_2PI * z), 0.0)
        with np.errstate(invalid="ignore"):
            apa = np.where(np.isfinite(aw), aw * pa, 0.0)
            bpb = np.where(np.isfinite(bw), bw * pb, 0.0)
        m = pa - pb
        mean[wide] = m
        var[wide] = np.maximum(1.0 + apa - bpb - m * m, 0.0)
    return mean.reshape(shape), var.reshape(shape)


def quantized_posterior(y_pri, v_pri, lo, hi, sigma):
    """Posterior mean/variance of one real part of a noiseless sample.

    The real part ``z ~ N(y_pri, v_pri/2)`` is observed through
    ``z + n in [lo, hi]`` with ``n ~ N(0, sigma/2)``; ``v_pri`` and
    ``sigma`` are complex-sample variances. The returned variance is per
    real part.
    """
    y_pri = np.asarray(y_pri, dtype=float)
    v_pri = np.asarray(v_pri, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    half_v = 0.5 * v_pri
    s2 = 0.5 * (np.asarray(sigma, dtype=float) + v_pri)
    s = np.sqrt(s2)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = (lo - y_pri) / s
        b = (hi - y_pri) / s
    zero_width = ~(hi > lo)
    a = np.where(zero_width, -1.0, a)
    b = np.where(zero_width, 1.0, b)
    mean_x, var_x = _std_truncated_moments(a, b)
    gain = half_v / s
    post_mean = y_pri + gain * mean_x
    post_var = half_v * (1.0 - half_v / s2) + gain * gain * var_x
    center = np.where(zero_width, lo, 0.0)
    post_mean = np.where(zero_width, center, post_mean)
    post_var = np.where(zero_width, 0.0, post_var)
    if post_mean.ndim == 0:
        return float(post_mean), float(post_var)
    return post_mean, post_var


def denoise_quantized(y_pri, v_pri, y_bar, spec, sigma, bounded=False):
    """MMSE estimate of the real part given its quantized value ``y_bar``.

    Outer bins are half-infinite unless ``bounded`` closes them at the
    recorded input range.
    """
    if np.any(np.asarray(v_pri) <= 0):
        raise InvalidParameterError("v_pri must be positive")
    if np.any(np.asarray(sigma) < 0):
        raise InvalidParameterError("sigma must be nonnegative")
    lo, hi = bin_edges(y_bar, spec, bounded)
    return quantized_posterior(y_pri, v_pri, lo, hi, sigma)


def ext_nonlinear(y_post, v_post, y_pri, v_pri):
    """Extrinsic measurement and noise variance leaving the nonlinear module.

    Returns ``(y_hat, sigma_ext, clamped)``; ``clamped`` is True when the
    posterior variance was not below the prior one and had to be pulled
    under it.
    """
    v_post = np.asarray(v_post, dtype=float)
    v_pri = np.asarray(v_pri, dtype=float)
    bad = v_post >= v_pri
    clamped = bool(np.any(bad))
    v_post = np.where(bad, (1.0 - 1e-9) * v_pri, v_post)
    v_post = np.maximum(v_post, VAR_FLOOR)
    sigma_ext = v_post * v_pri / (v_pri - v_post)
    y_hat = sigma_ext * (np.asarray(y_post) / v_post - np.asarray(y_pri) / v_pri)
    if np.ndim(sigma_ext) == 0:
        sigma_ext = float(sigma_ext)
    return y_hat, sigma_ext, clamped


# -- linear module ----------------------------------------------------------

def spike_slab_denoise(a, b, gamma, mu, tau):
    """Posterior of ``h`` under ``(1-gamma) delta(h) + gamma CN(mu, tau)``
    given the decoupled observation ``a = h + CN(0, b)``.

    Returns ``(h_hat, v, theta)``; ``theta`` is the posterior probability of
    the slab (belief indicator), evaluated in the log domain.
    """
    a = np.asarray(a)
    b = np.asarray(b, dtype=float)
    tau = np.asarray(tau, dtype=float)
    gamma = np.clip(np.asarray(gamma, dtype=float), GAMMA_FLOOR, 1.0 - GAMMA_FLOOR)
    bt = b + tau
    z = (tau * a + mu * b) / bt
    vz = tau * b / bt
    j = np.log(b / bt) + np.abs(a) ** 2 / b - np.abs(a - mu) ** 2 / bt
    theta = special.expit(j + np.log(gamma) - np.log1p(-gamma))
    h_hat = theta * z
    v = theta * (np.abs(z) ** 2 + vz) - np.abs(h_hat) ** 2
    # exact algebra gives theta*vz + theta*(1-theta)|z|^2 >= 0
    v = np.maximum(v, theta * vz)
    return h_hat, v, theta


@dataclass
class GampState:
    """AMP messages for all blocks. Shapes: ``A, B, h_hat, v, theta`` are
    ``(P, B, K, M)``; ``C, D`` are ``(P, B, G, M)``."""

    h_hat: np.ndarray
    v: np.ndarray
    C: np.ndarray
    D: np.ndarray
    A: np.ndarray = None
    B: np.ndarray = None
    theta: np.ndarray = None
    gamma: np.ndarray = None
    sigma_hat: float = 1.0
    C_prev: np.ndarray = None
    D_prev: np.ndarray = None
    q: int = 1
    i: int = 1


def init_state(y_hat, tau, gamma, k, sigma_hat):
    p, b, g, m = y_hat.shape
    shape = (p, b, k, m)
    tau4 = np.broadcast_to(tau[None, :, :, None], shape)
    return GampState(
        h_hat=np.zeros(shape, dtype=complex),
        v=np.array(tau4, dtype=float),
        C=np.ones((p, b, g, m)),
        D=np.array(y_hat, dtype=complex),
        gamma=np.array(np.broadcast_to(gamma, shape), dtype=float),
        sigma_hat=sigma_hat,
    )


def _output_step(s, abs2s, h_hat, v, y_hat, sigma, c_old, d_old):
    c = np.maximum(abs2s[:, None] @ v, VAR_FLOOR)
    d = s[:, None] @ h_hat - c / (sigma + c_old) * (y_hat - d_old)
    return c, d


def amp_iteration(state, y_hat, s, tau, damping=0.3, abs2s=None):
    """One AMP pass: output step with damping, decoupled measurements,
    spike-and-slab posterior. Returns a new state."""
    if abs2s is None:
        abs2s = np.abs(s) ** 2
    sigma = state.sigma_hat
    c_new, d_new = _output_step(s, abs2s, state.h_hat, state.v, y_hat, sigma, state.C, state.D)
    c = damping * state.C + (1.0 - damping) * c_new
    d = damping * state.D + (1.0 - damping) * d_new
    denom = sigma + c
    if not np.all(denom > 0) or not np.all(np.isfinite(denom)):
        raise NumericalGuardError("sigma_hat + C must be positive and finite")
    inv = 1.0 / denom
    sh = np.conj(np.swapaxes(s, -1, -2))[:, None]
    bvar = 1.0 / (np.swapaxes(abs2s, -1, -2)[:, None] @ inv)
    bvar = np.maximum(bvar, VAR_FLOOR)
    a = state.h_hat + bvar * (sh @ ((y_hat - d) * inv))
    tau4 = tau[None, :, :, None]
    h_hat, v, theta = spike_slab_denoise(a, bvar, state.gamma, 0.0, tau4)
    v = np.maximum(v, VAR_FLOOR)
    return replace(state, h_hat=h_hat, v=v, C=c, D=d, A=a, B=bvar, theta=theta,
                   C_prev=state.C, D_prev=state.D)


def em_update(state, y_hat):
    """EM estimates: per-block noise variance and the new sparsity ratios.

    Returns ``(sigma_blocks, gamma)`` where ``sigma_blocks`` has shape
    ``(P, B)``; the engine averages it over blocks.
    """
    sigma = state.sigma_hat
    c, d = state.C, state.D
    resid = np.abs(y_hat - d) ** 2 / np.abs(1.0 + c / sigma) ** 2
    per = resid + sigma * c / (sigma + c)
    sig_blocks = np.maximum(per.mean(axis=(-2, -1)), VAR_FLOOR)
    return sig_blocks, np.array(state.theta, dtype=float)


def spatial_weights(distances):
    """Inverse-distance weights ``w[b, k] = (1/d_bk) / sum_b (1/d_bk)``."""
    inv = 1.0 / np.asarray(distances, dtype=float)
    return inv / inv.sum(axis=0, keepdims=True)


def refine_sparsity_spatial(theta, distances=None):
    """Share one sparsity ratio per user.

    Average ``theta`` over subcarriers and antennas of each AP, then
    combine APs with inverse-distance weights (uniform when ``distances``
    is None). The result is broadcast back to ``theta``'s shape.
    """
    theta = np.asarray(theta, dtype=float)
    per_ap = theta.mean(axis=(0, 3))                       # (B, K)
    if distances is None:
        w = np.full(per_ap.shape, 1.0 / per_ap.shape[0])
    else:
        w = spatial_weights(distances)
    gamma_k = (w * per_ap).sum(axis=0)                     # (K,)
    gamma_k = np.clip(gamma_k, GAMMA_FLOOR, 1.0 - GAMMA_FLOOR)
    return np.broadcast_to(gamma_k[None, None, :, None], theta.shape).copy()


def refine_sparsity_angular(theta):
    """Average ``theta`` over the in-range neighbours ``(p +- 1, m +- 1)``.

    The coefficient itself is excluded; out-of-range neighbours are
    dropped and the mean is taken over the survivors.
    """
    theta = np.asarray(theta, dtype=float)
    total = np.zeros_like(theta)
    count = np.zeros_like(theta)
    total[1:] += theta[:-1]
    count[1:] += 1
    total[:-1] += theta[1:]
    count[:-1] += 1
    total[..., 1:] += theta[..., :-1]
    count[..., 1:] += 1
    total[..., :-1] += theta[..., 1:]
    count[..., :-1] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(count > 0, total / np.maximum(count, 1), theta)
    return np.clip(gamma, GAMMA_FLOOR, 1.0 - GAMMA_FLOOR)


def ext_slm(state, s, y_hat, rule="gamp", abs2s=None):
    """Extrinsic prior ``(Y_pri, V_pri)`` of the unquantized signal.

    ``V_pri`` is one value per block, shape ``(P, B)``.
    """
    if abs2s is None:
        abs2s = np.abs(s) ** 2
    sigma = state.sigma_hat
    c_new = np.maximum(abs2s[:, None] @ state.v, VAR_FLOOR)
    sh = s[:, None] @ state.h_hat
    corr = c_new / (sigma + state.C) * (y_hat - state.D)
    if rule == "literal":
        g, m = c_new.shape[-2:]
        return sh + corr, (c_new ** 2).sum(axis=(-2, -1)) / (g * m)
    return sh - corr, c_new.mean(axis=(-2, -1))


# -- engine -----------------------------------------------------------------

@dataclass
class GampResult:
    h_hat: np.ndarray         # (P, B, K, M) posterior mean
    v: np.ndarray             # posterior variance
    theta: np.ndarray         # refined sparsity ratios returned as belief indicators
    theta_raw: np.ndarray     # last per-coefficient belief indicators
    sigma_hat: float
    iterations: int
    turbo_iterations: int
    converged: bool
    diverged: bool = False
    clamped: int = 0
    turbo_stopped: bool = False
    trace: list = field(default_factory=list)


def _rel_change(new, old):
    num = float(np.sum(np.abs(new - old) ** 2))
    den = float(np.sum(np.abs(old) ** 2))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def nonlinear_module(y_pri, v_pri, bins, sigma):
    """Posterior mean and block-averaged variance of the unquantized signal.

    ``v_pri`` is per block ``(P, B)``; the returned variance is per block
    too (complex-sample convention).
    """
    lo_re, hi_re, lo_im, hi_im = bins
    vb = v_pri[:, :, None, None]
    m_re, v_re = quantized_posterior(y_pri.real, vb, lo_re, hi_re, sigma)
    m_im, v_im = quantized_posterior(y_pri.imag, vb, lo_im, hi_im, sigma)
    v_post = (v_re + v_im).mean(axis=(-2, -1))
    return m_re + 1j * m_im, v_post


def quantization_noise_floor(obs, noise_var=None):
    """Per-block lower bound ``(B,)`` on the effective noise variance when
    quantized samples are treated as linear observations.

    A uniform quantizer with step ``delta`` adds error of variance
    ``delta**2 / 12`` per real part; the thermal noise adds on top.
    """
    if not obs.quantized:
        return None
    delta = np.array([0.0 if s.degenerate else s.delta for s in obs.specs])
    return delta ** 2 / 6.0 + (noise_var or 0.0)


def ss_gamp(obs, pilots, prior, mode="slm-only-spatial", cfg=None, noise_var=None,
            noise_floor=None):
    """Run the turbo SS-GAMP engine.

    Parameters
    ----------
    obs : ObservationSet
        Per-AP blocks ``(P, B, G, M)``. For the angular mode pass the
        angular-domain observations.
    pilots : PilotBook or ndarray
        Pilot matrices ``(P, G, K)`` (already column-restricted if needed).
    prior : PriorSpec
        Slab variances ``tau[b, k]`` in the same units as ``obs``.
    mode : str
        One of ``MODES``.
    cfg : GampConfig
    noise_var : float, optional
        Thermal-noise variance used by the nonlinear module. When None the
        current EM noise estimate is used.
    noise_floor : array_like, optional
        Per-block lower bound ``(B,)`` on the EM noise estimate. Defaults to
        the quantization-noise floor in the linear-only modes when
        ``cfg.quant_noise_floor`` is set.

    Returns
    -------
    GampResult
    """
    cfg = (cfg or GampConfig()).validate()
    if mode not in MODES:
        raise InvalidParameterError(f"unknown mode {mode!r}")
    s = np.asarray(getattr(pilots, "s", pilots), dtype=complex)
    y = obs.values
    p, nb, g, m = y.shape
    if s.ndim != 3 or s.shape[0] != p or s.shape[1] != g:
        raise InvalidDimensionError(f"pilots {s.shape} do not match observations {y.shape}")
    k = s.shape[2]
    tau = np.asarray(prior.tau, dtype=float)
    if tau.shape != (nb, k):
        raise InvalidDimensionError(f"prior tau {tau.shape} != ({nb}, {k})")
    quantized_mode = mode == "spatial-with-quantizer"
    if quantized_mode and not obs.quantized:
        raise InvalidParameterError("quantizer mode needs quantized observations")

    # work in units where the mean received power is one
    power = float(np.mean(np.abs(y) ** 2)) if y.size else 0.0
    scale2 = power if power > 0 else 1.0
    scale = math.sqrt(scale2)
    y_n = y / scale
    tau_n = np.maximum(tau / scale2, VAR_FLOOR)
    awgn = None if noise_var is None else noise_var / scale2
    bins = None
    if quantized_mode:
        bins = tuple(e / scale for e in obs.bins(bounded=cfg.bound_outer_bins))

    gamma0 = prior.gamma
    if gamma0 is None:
        gamma0 = cfg.gamma0 if cfg.gamma0 is not None else default_gamma0(g, k)
    if noise_floor is None and cfg.quant_noise_floor and not quantized_mode:
        noise_floor = quantization_noise_floor(obs, noise_var)
    floor_n = None
    if noise_floor is not None:
        floor_n = np.broadcast_to(np.asarray(noise_floor, dtype=float) / scale2, (nb,))
        floor_n = np.broadcast_to(floor_n[None, :], (p, nb))
    abs2s = np.abs(s) ** 2
    sigma0 = max(cfg.sigma0_ratio * float(np.mean(np.abs(y_n) ** 2)) if y.size else 1.0,
                 VAR_FLOOR)
    if power == 0:
        sigma0 = cfg.sigma0_ratio

    refine = (refine_sparsity_angular if mode == "slm-only-angular"
              else (lambda th: refine_sparsity_spatial(th, prior.distances)))

    t_tur = cfg.t_tur if quantized_mode else 1

    nl_floor = None

    def pool(blocks):
        if floor_n is not None:
            blocks = np.maximum(blocks, floor_n)
        if nl_floor is not None:
            blocks = np.maximum(blocks, nl_floor)
        if cfg.sigma_scope == "block":
            return np.asarray(blocks, dtype=float)[:, :, None, None]
        return float(np.mean(blocks))

    y_pri = np.zeros_like(y_n)
    v_pri = np.full((p, nb), 1e6)
    state = None
    q = 1
    clamped = 0
    trace = []
    best = None
    best_rel = math.inf
    last_rel = math.inf
    growth = 0
    diverged = False
    converged = False
    turbo_done = 0
    pass_state = None
    pass_rel = math.inf
    turbo_stopped = False

    for i in range(1, t_tur + 1):
        if quantized_mode:
            nl_sigma = awgn if awgn is not None else (state.sigma_hat if state else sigma0)
            y_post, v_post = nonlinear_module(y_pri, v_pri, bins, nl_sigma)
            y_hat, sig_blocks, cl = ext_nonlinear(y_post, v_post[:, :, None, None],
                                                  y_pri, v_pri[:, :, None, None])
            clamped += int(cl)
            sig_blocks = np.asarray(sig_blocks)[:, :, 0, 0]
            if cfg.quant_noise_floor:
                nl_floor = sig_blocks
            sigma_i = pool(sig_blocks)
        else:
            y_hat = y_n
            sigma_i = pool(np.full((p, nb), sigma0))
        if state is None:
            state = init_state(y_hat, tau_n, gamma0, k, sigma_i)
        else:
            state = replace(state, sigma_hat=sigma_i)

        while True:
            h_old = state.h_hat
            state = amp_iteration(state, y_hat, s, tau_n, cfg.damping, abs2s)
            sig_blocks, theta = em_update(state, y_hat)
            sigma_next = pool(sig_blocks)
            sigma_moved = float(np.max(np.abs(sigma_next - state.sigma_hat) / state.sigma_hat))
            gamma = refine(theta)
            state = replace(state, gamma=gamma, sigma_hat=sigma_next, q=q, i=i)
            rel = _rel_change(state.h_hat, h_old)
            if cfg.trace:
                trace.append({"turbo": i, "amp": q, "residual": rel,
                          "sigma_in": float(np.mean(sigma_i)) * scale2,
                          "v_pri": float(np.mean(v_pri)) * scale2,
                              "sigma_hat": float(np.mean(sigma_next)) * scale2,
                              "mean_theta": float(np.mean(state.theta))})
            if not np.all(np.isfinite(state.h_hat)):
                diverged = True
                break
            if q > 1:
                growth = growth + 1 if rel > last_rel and rel > cfg.divergence_floor else 0
                if rel < best_rel:
                    best_rel, best = rel, state
                if growth >= cfg.divergence_patience:
                    diverged = True
                    break
            last_rel = rel
            q += 1
            settled = cfg.sigma_rtol is None or sigma_moved < cfg.sigma_rtol
            if rel < cfg.eta and settled:
                converged = True
                break
            if q >= cfg.t_amp:
                break
        turbo_done = i
        if diverged:
            break
        if quantized_mode and cfg.turbo_guard and pass_state is not None:
            r_pass = _rel_change(state.h_hat, pass_state.h_hat)
            grew = i > 2 and r_pass > pass_rel
            if grew or not r_pass <= 1.0:
                state = pass_state
                turbo_done = i - 1
                turbo_stopped = True
                break
            pass_rel = r_pass
        pass_state = state
        if quantized_mode and i < t_tur:
            y_new, v_new = ext_slm(state, s, y_hat, cfg.extrinsic, abs2s)
            if i > 1 and cfg.turbo_damping > 0:
                rho = cfg.turbo_damping
                y_new = rho * y_pri + (1 - rho) * y_new
                v_new = rho * v_pri + (1 - rho) * v_new
            y_pri, v_pri = y_new, np.maximum(v_new, VAR_FLOOR)

    if diverged and best is not None:
        state = best
    elif diverged:
        state = replace(state, h_hat=np.nan_to_num(state.h_hat))

    return GampResult(
        h_hat=state.h_hat * scale,
        v=state.v * scale2,
        theta=np.array(state.gamma),
        theta_raw=np.array(state.theta),
        sigma_hat=(state.sigma_hat * scale2 if np.ndim(state.sigma_hat) == 0
                   else np.asarray(state.sigma_hat)[:, :, 0, 0] * scale2),
        iterations=q - 1 if not diverged else q,
        turbo_iterations=turbo_done,
        converged=converged,
        diverged=diverged,
        clamped=clamped,
        turbo_stopped=turbo_stopped,
        trace=trace,
    )
