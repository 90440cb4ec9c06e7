"""
Monte Carlo experiments: configuration, trial execution, metrics and
result files.

One scenario is drawn per (trial, G, Mc, P~) and shared by every scheme
and by the remaining sweep axes, so scheme comparisons are paired.
"""

import csv
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .errors import ConfigError, InvalidDimensionError
from .gamp import GampConfig
from .observations import observe
from .paradigms import (baseline_multicell, build_prior, default_dpus, form_edge_groups,
                        run_paradigm)
from .scenario import ScenarioConfig, generate_scenario
from .sic import SicConfig

SCHEMES = ("cloud-sic", "cloud-joint", "multicell", "edge-sic", "edge-joint")
AXES = ("g", "m_c", "p_tilde", "q_bits", "n_co", "t_sic", "nonlinear")
NONLINEAR = {"auto": "auto", "on": "nonlinear", "off": "slm-only"}
NMSE_FLOOR_DB = -120.0


@dataclass
class ExperimentConfig:
    """Experiment description.

    ``scenario``, ``gamp`` and ``sic`` override fields of
    :class:`ScenarioConfig`, :class:`GampConfig` and :class:`SicConfig`.
    ``sweep`` maps axis names (``AXES``) to value lists; every combination
    is one config point. Axes left out take a single default value.
    """

    scenario: dict = field(default_factory=dict)
    gamp: dict = field(default_factory=dict)
    sic: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    schemes: list = field(default_factory=lambda: ["cloud-sic"])
    trials: int = 10
    seed: int = 0
    n_dpu: int = None          # None: one DPU per AP
    dpus: list = None          # explicit DPU-AP indices, overrides n_dpu
    workers: int = 1
    timing: bool = False

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        return cls.from_dict(doc or {})

    def scenario_config(self, **over):
        try:
            return ScenarioConfig(**{**self.scenario, **over}).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def gamp_config(self):
        try:
            return GampConfig(**self.gamp).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def sic_config(self, **over):
        try:
            return SicConfig(**{**self.sic, **over}).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self):
        if int(self.trials) < 1:
            raise ConfigError("trials must be >= 1")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; choose from {list(SCHEMES)}")
        extra = set(self.sweep) - set(AXES)
        if extra:
            raise ConfigError(f"unknown sweep axes {sorted(extra)}; choose from {list(AXES)}")
        for axis, values in self.sweep.items():
            if not isinstance(values, (list, tuple)):
                raise ConfigError(f"sweep axis {axis!r} needs a list")
        for v in self.sweep.get("nonlinear", []):
            if v not in NONLINEAR:
                raise ConfigError(f"nonlinear must be one of {list(NONLINEAR)}")
        try:
            base = self.scenario_config()
            for pt in self.points():
                self.scenario_config(g=pt["g"], m_c=pt["m_c"], p_tilde=pt["p_tilde"])
                if pt["q_bits"] is not None and int(pt["q_bits"]) < 1:
                    raise ConfigError("q_bits must be >= 1")
                if any(s.startswith("edge") for s in self.schemes):
                    if not 1 <= int(pt["n_co"]) <= base.b:
                        raise ConfigError(f"n_co must lie in [1, {base.b}]")
            self.gamp_config()
            self.sic_config()
        except ConfigError:
            raise
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def defaults(self):
        base = ScenarioConfig(**self.scenario)
        sic = SicConfig(**self.sic)
        return {"g": base.g, "m_c": base.m_c, "p_tilde": base.p_tilde, "q_bits": None,
                "n_co": base.b, "t_sic": sic.t_sic, "nonlinear": "auto"}

    def points(self):
        """Config points in a fixed order (axes in ``AXES`` order)."""
        d = self.defaults()
        lists = [list(self.sweep.get(a, [d[a]])) for a in AXES]
        return [dict(zip(AXES, combo)) for combo in itertools.product(*lists)]

    def to_dict(self):
        return asdict(self)


@dataclass
class TrialRecord:
    seed: int
    trial: int
    scheme: str
    point: dict
    pe: float
    nmse_db: float
    n_false_alarm: int
    n_missed: int
    diverged: bool = False
    nmse_undefined: bool = False
    error: str = ""
    diagnostics: list = field(default_factory=list)
    wall_time: float = None


# -- metrics ----------------------------------------------------------------

def compute_pe(alpha_hat, alpha):
    """Fraction of users whose activity is decided wrongly."""
    alpha_hat = np.asarray(alpha_hat)
    alpha = np.asarray(alpha)
    if alpha_hat.shape != alpha.shape:
        raise InvalidDimensionError(f"length mismatch {alpha_hat.shape} vs {alpha.shape}")
    if alpha.size == 0:
        return 0.0
    return float(np.abs(alpha_hat.astype(int) - alpha.astype(int)).sum() / alpha.size)


def compute_nmse(h_hat, h_true, geom=None, active=None, b_star=None, floor_db=NMSE_FLOOR_DB):
    """Channel NMSE in dB at each active user's nearest AP.

    ``h_hat`` and ``h_true`` are ``(P, B, K, Mc)``. ``b_star[k]`` overrides
    the nearest-AP block of user k. Returns ``None`` when the active set is
    empty (undefined ratio).
    """
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise InvalidDimensionError(f"shape mismatch {h_hat.shape} vs {h_true.shape}")
    k = h_true.shape[2]
    if b_star is None:
        b_star = geom.nearest_ap() if geom is not None else np.zeros(k, dtype=int)
    if active is None:
        active = np.arange(k)
    active = np.asarray(active, dtype=int)
    if active.size == 0:
        return None
    bs = np.asarray(b_star)[active]
    est = h_hat[:, bs, active, :]
    ref = h_true[:, bs, active, :]
    den = float(np.sum(np.abs(ref) ** 2))
    if den == 0.0:
        return None
    num = float(np.sum(np.abs(est - ref) ** 2))
    if num == 0.0:
        return floor_db
    return max(10.0 * math.log10(num / den), floor_db)


# -- execution --------------------------------------------------------------

def _edge_b_star(geom, grouping):
    """Nearest AP of each user inside its owner group."""
    d = geom.distances()
    out = np.empty(geom.num_users, dtype=int)
    for i, aps in enumerate(grouping.groups):
        users = np.flatnonzero(grouping.ue_owner == i)
        aps = np.asarray(aps)
        out[users] = aps[np.argmin(d[aps][:, users], axis=0)]
    return out


def run_scheme(scheme, scn, obs, point, exp, seed, trial):
    """Run one scheme on one scenario; returns ``(DetectionResult, b_star)``."""
    geom = scn.geometry
    prior = build_prior(scn.channels.params, geom)
    gamp_cfg = exp.gamp_config()
    sic_cfg = exp.sic_config(t_sic=int(point["t_sic"]), aud_mode=NONLINEAR[point["nonlinear"]])
    nv = scn.noise_var
    if scheme == "multicell":
        mode = None
        if sic_cfg.aud_mode == "slm-only":
            mode = "slm-only-spatial"
        elif sic_cfg.aud_mode == "nonlinear" and obs.quantized:
            mode = "spatial-with-quantizer"
        return baseline_multicell(obs, scn.pilots, geom, prior, gamp_cfg, nv, mode,
                                  sic_cfg.p_det), None
    kind, method = scheme.split("-")
    if kind == "cloud":
        res = run_paradigm("cloud", obs, scn.pilots, geom, prior, sic_cfg, gamp_cfg, nv,
                           seed, trial, method)
        return res, None
    b = geom.num_aps
    if exp.dpus is not None:
        dpus = exp.dpus
    else:
        dpus = default_dpus(b, b if exp.n_dpu is None else int(exp.n_dpu))
    grouping = form_edge_groups(geom, dpus, int(point["n_co"]))
    res = run_paradigm(grouping, obs, scn.pilots, geom, prior, sic_cfg, gamp_cfg, nv,
                       seed, trial, method)
    return res, _edge_b_star(geom, grouping)


def run_trial(exp, trial):
    """Every (config point, scheme) record of one trial index."""
    seed = int(exp.seed)
    scenarios = {}
    out = []
    for pi, point in enumerate(exp.points()):
        key = (point["g"], point["m_c"], point["p_tilde"])
        if key not in scenarios:
            cfg = exp.scenario_config(g=int(point["g"]), m_c=int(point["m_c"]),
                                      p_tilde=int(point["p_tilde"]))
            scenarios[key] = generate_scenario(cfg, seed, trial)
        scn = scenarios[key]
        q = point["q_bits"]
        obs = observe(scn.rx, None if q is None else int(q))
        for scheme in exp.schemes:
            t0 = time.perf_counter()
            try:
                res, b_star = run_scheme(scheme, scn, obs, point, exp, seed, trial)
            except Exception as exc:  # recorded, the run goes on
                out.append((pi, TrialRecord(seed, trial, scheme, dict(point), math.nan, math.nan,
                                            0, 0, error=f"{type(exc).__name__}: {exc}")))
                continue
            alpha = scn.activity.alpha
            if b_star is None:
                b_star = scn.geometry.nearest_ap()
            nmse = compute_nmse(res.h_hat, scn.channels.spatial, active=scn.activity.active_set,
                                b_star=b_star)
            rec = TrialRecord(
                seed=seed, trial=trial, scheme=scheme, point=dict(point),
                pe=compute_pe(res.alpha_hat, alpha),
                nmse_db=math.nan if nmse is None else nmse,
                n_false_alarm=int(np.sum((res.alpha_hat == 1) & (alpha == 0))),
                n_missed=int(np.sum((res.alpha_hat == 0) & (alpha == 1))),
                diverged=bool(res.diverged), nmse_undefined=nmse is None,
                diagnostics=_plain(res.diagnostics),
                wall_time=time.perf_counter() - t0 if exp.timing else None,
            )
            out.append((pi, rec))
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.generic, np.ndarray)):
        return obj.tolist()
    return obj


def run_monte_carlo(exp, workers=None, progress=None):
    """Run every trial; records ordered by (config point, scheme, trial).

    Trials are independent and may run in a process pool; the ordering
    makes the output independent of the worker count.
    """
    exp.validate()
    workers = int(workers or exp.workers)
    trials = range(int(exp.trials))
    if not exp.points() or not exp.schemes:
        return []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(run_trial, itertools.repeat(exp), trials))
    else:
        batches = []
        for t in trials:
            batches.append(run_trial(exp, t))
            if progress:
                progress(t + 1, exp.trials)
    order = {s: i for i, s in enumerate(exp.schemes)}
    flat = [item for batch in batches for item in batch]
    flat.sort(key=lambda it: (it[0], order[it[1].scheme], it[1].trial))
    return [rec for _, rec in flat]


def aggregate(records):
    """Mean and standard error of Pe and mean NMSE per (point, scheme)."""
    groups = {}
    for r in records:
        key = (json.dumps(r.point, sort_keys=True), r.scheme)
        groups.setdefault(key, []).append(r)
    rows = []
    for (pt, scheme), recs in groups.items():
        pe = np.array([r.pe for r in recs if not r.error])
        nm = np.array([r.nmse_db for r in recs if not r.error and not r.nmse_undefined])
        n = len(pe)
        rows.append({
            **json.loads(pt), "scheme": scheme, "trials": len(recs), "failed": len(recs) - n,
            "pe_mean": float(pe.mean()) if n else math.nan,
            "pe_se": float(pe.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
            "nmse_db_mean": float(nm.mean()) if len(nm) else math.nan,
        })
    return rows


# -- result files -----------------------------------------------------------

BASE_COLUMNS = ["seed", "trial", "scheme", *AXES, "pe", "nmse_db", "n_false_alarm", "n_missed",
                "diverged", "nmse_undefined", "error", "diagnostics"]


def _columns(timing):
    return BASE_COLUMNS + (["wall_time"] if timing else [])


def _row(rec, timing):
    row = {"seed": rec.seed, "trial": rec.trial, "scheme": rec.scheme}
    row.update({a: rec.point.get(a) for a in AXES})
    row.update({"pe": rec.pe, "nmse_db": rec.nmse_db, "n_false_alarm": rec.n_false_alarm,
                "n_missed": rec.n_missed, "diverged": rec.diverged,
                "nmse_undefined": rec.nmse_undefined, "error": rec.error,
                "diagnostics": rec.diagnostics})
    if timing:
        row["wall_time"] = rec.wall_time
    return row


def emit_results(records, path, fmt="csv", timing=False):
    """Write one row (CSV) or one JSON object per line (``fmt="json"``).

    Floats are written with ``repr`` precision so reading back recovers
    them exactly. Wall times are included only with ``timing``; without
    them the file is a deterministic function of the configuration.
    """
    cols = _columns(timing)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for rec in records:
                row = _row(rec, timing)
                row["diagnostics"] = json.dumps(row["diagnostics"], sort_keys=True)
                row = {k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                       for k, v in row.items()}
                w.writerow(row)
    elif fmt == "json":
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(_row(rec, timing), sort_keys=False) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def _parse_cell(col, text):
    if col in ("scheme", "error"):
        return text
    if col == "nonlinear":
        return text or None
    if col == "diagnostics":
        return json.loads(text) if text else []
    if col in ("diverged", "nmse_undefined"):
        return text == "True"
    if text == "":
        return None
    if col in ("pe", "nmse_db", "wall_time"):
        return float(text)
    return int(text)


def read_results(path, fmt="csv"):
    """Read a result file back into :class:`TrialRecord` objects."""
    rows = []
    if fmt == "csv":
        with open(path, newline="") as fh:
            for raw in csv.DictReader(fh):
                rows.append({k: _parse_cell(k, v) for k, v in raw.items()})
    elif fmt == "json":
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    else:
        raise ValueError(f"unknown format {fmt!r}")
    out = []
    for row in rows:
        point = {a: row[a] for a in AXES}
        out.append(TrialRecord(row["seed"], row["trial"], row["scheme"], point, row["pe"],
                               row["nmse_db"], row["n_false_alarm"], row["n_missed"],
                               row["diverged"], row["nmse_undefined"], row["error"],
                               row["diagnostics"], row.get("wall_time")))
    return out
