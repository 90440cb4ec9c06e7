"""
Cloud and edge processing of the per-AP observations.

Cloud: one processing unit sees every AP. Edge: each DPU-AP processes its
own block plus those of its ``N_co - 1`` nearest APs, and a user's result
is taken from the group of its nearest DPU-AP. Also holds the
non-cooperative multi-cell baseline and the operation-count estimators.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimensionError, InvalidParameterError
from .gamp import GampConfig, PriorSpec
from .observations import ObservationSet
from .sic import DetectionResult, SicConfig, joint_aud_ce, sic_aud_ce
from .tensor import make_rng

__all__ = [
    "ObservationSet", "EdgeGrouping", "assemble_cloud", "form_edge_groups", "default_dpus",
    "build_prior", "run_paradigm", "baseline_multicell", "complexity_cloud", "complexity_edge",
    "complexity_estimate",
]


def build_prior(params, geom=None):
    """Slab variances ``tau[b, k] = P_k * rho_bk^2 * L_bk`` from the channel
    statistics, with AP-user distances for the spatial refinement."""
    tau = params.tx_power[None, :] * params.large_scale ** 2 * params.n_paths
    dist = None if geom is None else geom.distances()
    return PriorSpec(np.asarray(tau, dtype=float), None, dist)


def assemble_cloud(per_ap_obs):
    """Stack single-AP observation sets into one cloud observation set."""
    per_ap_obs = list(per_ap_obs)
    if not per_ap_obs:
        raise InvalidDimensionError("no observations to assemble")
    shapes = {(o.y.shape[0], o.y.shape[2], o.y.shape[3]) for o in per_ap_obs}
    if len(shapes) != 1:
        raise InvalidDimensionError(f"inconsistent (P, G, Mc) across APs: {sorted(shapes)}")
    quant = {o.quantized for o in per_ap_obs}
    if len(quant) != 1:
        raise InvalidDimensionError("cannot mix quantized and unquantized blocks")
    y = np.concatenate([o.y for o in per_ap_obs], axis=1)
    specs = None
    if quant.pop():
        specs = tuple(s for o in per_ap_obs for s in o.specs)
    aps = np.concatenate([o.ap_indices for o in per_ap_obs])
    offs = [o.offset for o in per_ap_obs]
    offset = None
    if any(x is not None for x in offs):
        offset = np.concatenate([np.zeros_like(o.y) if x is None else x
                                 for o, x in zip(per_ap_obs, offs)], axis=1)
    return ObservationSet(y, specs, aps, offset)


@dataclass
class EdgeGrouping:
    """AP groups of the DPU-APs.

    ``groups[i]`` lists the APs (ascending) processed by DPU-AP
    ``dpu_ap_indices[i]``; ``ue_owner[k]`` is the group number owning
    user k.
    """

    dpu_ap_indices: np.ndarray
    groups: list
    ue_owner: np.ndarray
    n_co: int

    def columns(self, i, m_c):
        """Global antenna columns of group ``i`` in the ``B * Mc`` layout."""
        g = np.asarray(self.groups[i])
        return (g[:, None] * m_c + np.arange(m_c)[None, :]).ravel()


def default_dpus(b, i):
    """DPU placement on the hexagonal layout: the centre AP, or every AP."""
    if i == 1:
        return np.array([0])
    if i == b:
        return np.arange(b)
    raise InvalidParameterError(f"no default placement of {i} DPUs over {b} APs")


def form_edge_groups(geom, dpu_set, n_co):
    b = geom.num_aps
    dpus = np.asarray(sorted(set(int(x) for x in dpu_set)), dtype=int)
    if dpus.size == 0:
        raise InvalidParameterError("dpu_set must be nonempty")
    if np.any((dpus < 0) | (dpus >= b)):
        raise InvalidParameterError("DPU index out of range")
    if not 1 <= n_co <= b:
        raise InvalidParameterError(f"n_co must lie in [1, {b}], got {n_co}")
    pos = geom.ap_positions
    groups = []
    for d in dpus:
        dist = np.hypot(*(pos - pos[d]).T)
        # distances equal up to rounding count as ties (lowest index wins)
        dist = np.round(dist / geom.ap_spacing, 9)
        dist[d] = -1.0  # the DPU-AP itself always comes first
        order = np.lexsort((np.arange(b), dist))
        groups.append(np.sort(order[:n_co]))
    owner = geom.nearest_ap(dpus)
    return EdgeGrouping(dpus, groups, owner, int(n_co))


def _run_unit(scheme, obs, pilots, geom, prior, sic_cfg, gamp_cfg, noise_var, rng):
    if scheme == "sic":
        return sic_aud_ce(obs, pilots, geom, prior, sic_cfg, gamp_cfg, noise_var, rng)
    if scheme == "joint":
        mode = None
        if sic_cfg is not None and sic_cfg.aud_mode == "slm-only":
            mode = "slm-only-spatial"
        elif sic_cfg is not None and sic_cfg.aud_mode == "nonlinear" and obs.quantized:
            mode = "spatial-with-quantizer"
        return joint_aud_ce(obs, pilots, geom, prior, gamp_cfg, noise_var, mode=mode,
                            threshold=sic_cfg.p_det if sic_cfg is not None else 0.1)
    raise InvalidParameterError(f"unknown scheme {scheme!r}")


def run_paradigm(paradigm, obs, pilots, geom, prior, sic_cfg=None, gamp_cfg=None, noise_var=None,
                 seed=0, trial=0, scheme="sic"):
    """Detect and estimate under the cloud or an edge paradigm.

    Parameters
    ----------
    paradigm : "cloud" or EdgeGrouping
    obs : ObservationSet
        Observations of all APs, blocks in AP order.
    scheme : {"sic", "joint"}
        SIC pipeline or single-pass joint SS-GAMP.
    seed, trial : int
        Key of the cancellation-subset streams; group ``i`` draws from
        ``(seed, trial, "sic", i)`` and the cloud uses group 0.

    Returns
    -------
    DetectionResult
        ``h_hat`` covers every AP; for edge, user k's rows are filled only
        at the APs of its owner group.
    """
    sic_cfg = sic_cfg or SicConfig()
    gamp_cfg = gamp_cfg or GampConfig()
    if isinstance(paradigm, str):
        if paradigm != "cloud":
            raise InvalidParameterError(f"unknown paradigm {paradigm!r}")
        rng = make_rng(seed, trial, "sic", 0)
        return _run_unit(scheme, obs, pilots, geom, prior, sic_cfg, gamp_cfg, noise_var, rng)

    grouping = paradigm
    s = np.asarray(getattr(pilots, "s", pilots))
    k = s.shape[2]
    p, nb, _, m = obs.y.shape
    where = {int(a): i for i, a in enumerate(obs.ap_indices)}
    results = []
    for i, aps in enumerate(grouping.groups):
        pos = [where[int(a)] for a in aps]
        sub = obs.select(pos)
        sub_prior = prior.restrict(aps=pos)
        rng = make_rng(seed, trial, "sic", i)
        results.append(_run_unit(scheme, sub, s, geom, sub_prior, sic_cfg, gamp_cfg, noise_var, rng))

    owner = np.asarray(grouping.ue_owner)
    alpha = np.zeros(k, dtype=np.int8)
    belief = np.zeros(k)
    in_xi = np.zeros(k, dtype=bool)
    h_hat = np.zeros((p, nb, k, m), dtype=complex)
    for i, (aps, res) in enumerate(zip(grouping.groups, results)):
        mine = owner == i
        alpha[mine] = res.alpha_hat[mine]
        belief[mine] = res.belief[mine]
        xi_mask = np.zeros(k, dtype=bool)
        xi_mask[res.xi] = True
        in_xi[mine] = xi_mask[mine]
        pos = np.array([where[int(a)] for a in aps])
        users = np.flatnonzero(mine)
        h_hat[:, pos[:, None], users[None, :], :] = res.h_hat[:, :, users, :]
    if len(results) == 1:
        diagnostics = results[0].diagnostics
    else:
        diagnostics = [dict(d, group=i) for i, r in enumerate(results) for d in r.diagnostics]
    return DetectionResult(alpha, np.flatnonzero(alpha), np.flatnonzero(in_xi), h_hat,
                           np.array(obs.ap_indices), belief, diagnostics,
                           any(r.diverged for r in results))


def baseline_multicell(obs, pilots, geom, prior, gamp_cfg=None, noise_var=None, mode=None,
                       threshold=0.1):
    """Non-cooperative multi-cell detection.

    Each AP runs joint SS-GAMP over the users of its own cell (nearest AP)
    using only its own block; the other cells' signals stay in the
    observation as interference.
    """
    s = np.asarray(getattr(pilots, "s", pilots))
    k = s.shape[2]
    p, nb, _, m = obs.y.shape
    home = geom.nearest_ap(obs.ap_indices)
    alpha = np.zeros(k, dtype=np.int8)
    belief = np.zeros(k)
    h_hat = np.zeros((p, nb, k, m), dtype=complex)
    diagnostics = []
    diverged = False
    for b in range(nb):
        cell = np.flatnonzero(home == b)
        if cell.size == 0:
            continue
        sub = obs.select([b])
        cell_prior = PriorSpec(prior.tau[b:b + 1, cell], prior.gamma, None)
        res = joint_aud_ce(sub, s[:, :, cell], geom, cell_prior, gamp_cfg, noise_var,
                           users=cell, threshold=threshold, mode=mode)
        alpha[cell] = res.alpha_hat
        belief[cell] = res.belief
        h_hat[:, b:b + 1, cell, :] = res.h_hat
        diagnostics.extend(dict(d, cell=b) for d in res.diagnostics)
        diverged = diverged or res.diverged
    a_hat = np.flatnonzero(alpha)
    return DetectionResult(alpha, a_hat, a_hat.copy(), h_hat, np.array(obs.ap_indices), belief,
                           diagnostics, diverged)


# -- operation counts -------------------------------------------------------

def complexity_cloud(t_sic, t_amp, t_tur, g, k, m, p, b, m_c, k_a):
    """Complex multiplications of the SIC pipeline at the central unit."""
    terms = complexity_terms_cloud(t_sic, t_amp, t_tur, g, k, m, p, b, m_c, k_a)
    return terms["total"]


def complexity_terms_cloud(t_sic, t_amp, t_tur, g, k, m, p, b, m_c, k_a):
    amp = 2 * t_amp * (4 * g * k * m * p + 3 * g * k * p + 16 * g * m * p + 20 * k * m * p)
    turbo = t_tur * (g * k * m * p + g * m * p)
    dft = 2 * b * m_c ** 2 * p
    cancel = g * k_a * m * p
    return {"amp": amp, "turbo": turbo, "dft": dft, "cancel": cancel,
            "total": t_sic * (amp + turbo + dft + cancel)}


def complexity_edge(t_sic, t_amp, t_tur, g, k, k_i, m, p, n_co, m_c, k_a_i, m_i=None):
    """Complex multiplications of the SIC pipeline at one DPU-AP.

    ``m_i`` defaults to ``n_co * m_c``. The turbo term keeps the full user
    count ``k`` and the cancellation term the full antenna count ``m``,
    as in the published expression.
    """
    return complexity_terms_edge(t_sic, t_amp, t_tur, g, k, k_i, m, p, n_co, m_c, k_a_i,
                                 m_i)["total"]


def complexity_terms_edge(t_sic, t_amp, t_tur, g, k, k_i, m, p, n_co, m_c, k_a_i, m_i=None):
    if m_i is None:
        m_i = n_co * m_c
    amp = 2 * t_amp * (4 * g * k_i * m_i * p + 3 * g * k_i * p + 16 * g * m_i * p
                       + 20 * k_i * m_i * p)
    turbo = t_tur * (g * k * m_i * p + g * m_i * p)
    dft = 2 * n_co * m_c ** 2 * p
    cancel = g * k_a_i * m * p
    return {"amp": amp, "turbo": turbo, "dft": dft, "cancel": cancel,
            "total": t_sic * (amp + turbo + dft + cancel)}


def complexity_estimate(params, paradigm="cloud"):
    """Term-by-term operation counts from a parameter mapping.

    Cloud keys: t_sic, t_amp, t_tur, g, k, m, p, b, m_c, k_a. Edge adds
    k_i, n_co, k_a_i and optionally m_i.
    """
    params = {kk: int(v) for kk, v in params.items()}
    try:
        if paradigm == "cloud":
            keys = ("t_sic", "t_amp", "t_tur", "g", "k", "m", "p", "b", "m_c", "k_a")
            return complexity_terms_cloud(*(params[x] for x in keys))
        if paradigm == "edge":
            keys = ("t_sic", "t_amp", "t_tur", "g", "k", "k_i", "m", "p", "n_co", "m_c", "k_a_i")
            return complexity_terms_edge(*(params[x] for x in keys), m_i=params.get("m_i"))
    except KeyError as exc:
        raise InvalidParameterError(f"missing complexity parameter {exc.args[0]!r}") from None
    raise InvalidParameterError(f"unknown paradigm {paradigm!r}")
