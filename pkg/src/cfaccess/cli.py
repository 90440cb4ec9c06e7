"""Command-line entry point: ``cfaccess {run,latency,complexity,replay}``."""

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError
from .harness import ExperimentConfig, aggregate, emit_results, run_monte_carlo
from .paradigms import complexity_estimate
from .scenario import (ScenarioConfig, dump_scenario, generate_scenario, latency_reduction,
                       load_scenario, pilot_latency)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _cmd_run(args):
    exp = ExperimentConfig.load(args.config)
    if args.seed is not None:
        exp.seed = args.seed
    if args.trials is not None:
        exp.trials = args.trials
    if args.workers is not None:
        exp.workers = args.workers
    if args.timing:
        exp.timing = True
    exp.validate()

    def progress(done, total):
        if not args.quiet:
            print(f"trial {done}/{total}", file=sys.stderr)

    records = run_monte_carlo(exp, progress=progress)
    if args.out:
        emit_results(records, args.out, args.format, timing=exp.timing)
    rows = aggregate(records)
    cols = ["scheme", "g", "m_c", "p_tilde", "q_bits", "n_co", "t_sic", "nonlinear",
            "trials", "failed", "pe_mean", "pe_se", "nmse_db_mean"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(_fmt(r[c]) for c in cols))
    return EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _cmd_latency(args):
    cfg = ScenarioConfig()
    n_cp = args.n_cp if args.n_cp is not None else cfg.n_cp
    p = args.p if args.p is not None else cfg.p
    n = args.n if args.n is not None else cfg.n
    bw = args.bandwidth if args.bandwidth is not None else cfg.bandwidth
    g = args.g if args.g is not None else cfg.g
    ofdm = pilot_latency(g, n_cp, p, bw)
    conventional = pilot_latency(g, n_cp, n, bw)
    red = latency_reduction(n_cp, p, n)
    out = {"g": g, "n_cp": n_cp, "p": p, "n": n, "bandwidth_hz": bw,
           "pilot_latency_s": ofdm, "conventional_latency_s": conventional,
           "reduction": red, "reduction_percent": 100.0 * red}
    if args.json:
        print(json.dumps(out))
    else:
        print(f"pilot latency ({p}-point OFDM):  {ofdm * 1e6:.2f} us")
        print(f"pilot latency ({n}-point OFDM): {conventional * 1e6:.2f} us")
        print(f"reduction: {100.0 * red:.2f}%")
    return EXIT_OK


def _cmd_complexity(args):
    params = {k: getattr(args, k) for k in ("t_sic", "t_amp", "t_tur", "g", "k", "p", "m_c")}
    params["b"] = args.b
    params["m"] = args.m if args.m is not None else args.b * args.m_c
    if args.paradigm == "cloud":
        params["k_a"] = args.k_a
    else:
        params.update(n_co=args.n_co, k_i=args.k_i, k_a_i=args.k_a_i)
        if args.m_i is not None:
            params["m_i"] = args.m_i
        missing = [n for n in ("n_co", "k_i", "k_a_i") if params[n] is None]
        if missing:
            raise ConfigError(f"edge complexity needs --{', --'.join(m.replace('_', '-') for m in missing)}")
    terms = complexity_estimate(params, args.paradigm)
    if args.json:
        print(json.dumps(terms))
    else:
        for k, v in terms.items():
            print(f"{k}\t{v}")
    return EXIT_OK


def _cmd_replay(args):
    if args.generate:
        cfg = ScenarioConfig(**(json.loads(args.scenario) if args.scenario else {})).validate()
        scn = generate_scenario(cfg, args.seed, args.trial)
        dump_scenario(scn, args.path)
        print(f"wrote {args.path}")
        return EXIT_OK
    scn = load_scenario(args.path)
    h = scn.channels.spatial
    print(json.dumps({
        "seed": scn.seed, "trial": scn.trial, "k": scn.cfg.k, "k_a": scn.cfg.k_a, "b": scn.cfg.b,
        "active": scn.activity.active_set.tolist(),
        "channel_energy": float(np.sum(np.abs(h) ** 2)),
        "rx_energy": float(np.sum(np.abs(scn.rx) ** 2)),
        "noise_var": scn.noise_var,
    }))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="cfaccess", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="Monte Carlo experiment from a YAML/JSON config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out", help="per-trial result file")
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--timing", action="store_true", help="record wall times (non-deterministic)")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=_cmd_run)

    lt = sub.add_parser("latency", help="pilot-phase latency of the short-DFT design")
    lt.add_argument("--g", type=int)
    lt.add_argument("--n-cp", dest="n_cp", type=int)
    lt.add_argument("--p", type=int)
    lt.add_argument("--n", type=int)
    lt.add_argument("--bandwidth", type=float)
    lt.add_argument("--json", action="store_true")
    lt.set_defaults(func=_cmd_latency)

    c = sub.add_parser("complexity", help="operation counts of the SIC pipeline")
    c.add_argument("--paradigm", choices=("cloud", "edge"), default="cloud")
    c.add_argument("--t-sic", dest="t_sic", type=int, default=3)
    c.add_argument("--t-amp", dest="t_amp", type=int, default=20)
    c.add_argument("--t-tur", dest="t_tur", type=int, default=10)
    c.add_argument("--g", type=int, default=40)
    c.add_argument("--k", type=int, default=2800)
    c.add_argument("--k-a", dest="k_a", type=int, default=140)
    c.add_argument("--p", type=int, default=1, help="number of pilot subcarriers")
    c.add_argument("--b", type=int, default=7)
    c.add_argument("--m-c", dest="m_c", type=int, default=16)
    c.add_argument("--m", type=int, help="total antennas (default B*Mc)")
    c.add_argument("--n-co", dest="n_co", type=int)
    c.add_argument("--k-i", dest="k_i", type=int)
    c.add_argument("--k-a-i", dest="k_a_i", type=int)
    c.add_argument("--m-i", dest="m_i", type=int)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=_cmd_complexity)

    rp = sub.add_parser("replay", help="dump or inspect a scenario file")
    rp.add_argument("path")
    rp.add_argument("--generate", action="store_true", help="write a new scenario to PATH")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--trial", type=int, default=0)
    rp.add_argument("--scenario", help="JSON object of ScenarioConfig overrides")
    rp.set_defaults(func=_cmd_replay)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        if args.cmd in ("latency", "complexity", "replay"):
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
