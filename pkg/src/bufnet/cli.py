"""Command-line front end: ``bufnet {validate,simulate,analyze,sweep,casestudy}``.

Every command reads one JSON run configuration::

    {"network": {...}, "policy": {...}, "options": {...}, "seed": 0}

``casestudy`` reads a ``"casestudy"`` block instead of ``"network"``.
Exit codes: 0 the command ran (whatever the scientific outcome),
1 it could not run (invalid network, bracket error, failed stage),
2 the configuration could not be parsed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .casestudy import (HypothesisError, OneHopSharedConfig, admissible_range_two_commodity,
                        admissible_ranges_c_commodity, beta_limit, sweep_validation)
from .dynamics import DEFAULT_STEP, integrate, throughput_estimate
from .equilibrium import (BracketError, BoxConstructionError, DIVERGED, FOUND, GROWTH_TOL, NEWTON_TOL,
                          construct_backpressure_box, existence_sweep, find_equilibrium,
                          per_commodity_box, verify_poincare_miranda)
from .model import build_model
from .network import (PER_COMMODITY, ConfigError, InvalidNetworkError, network_from_config,
                      overloaded_sources, require_valid, validate_topology)
from .policies import PolicyError, policy_from_config
from .report import atomic_write, dumps, envelope
from .stability import (PerronError, TOL, check_block_dominance, check_column_dominance, check_m_matrix,
                        eigen_spectrum, grid_condition_scan, jacobian, lyapunov_certificate,
                        perron_null_vector)

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2

TOLERANCES = {
    "newton_residual": NEWTON_TOL,
    "matrix_checks": TOL,
    "stability_margin": 1e-8,
    "growth_rate": GROWTH_TOL,
    "pointwise_condition": 1e-12,
}


class RunError(RuntimeError):
    pass


def _load(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(path, f"cannot read file ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    if not isinstance(cfg, dict):
        raise ConfigError(path, "top level must be an object")
    return cfg


def _options(cfg: dict, args) -> dict:
    opts = dict(cfg.get("options") or {})
    if not isinstance(cfg.get("options", {}), dict):
        raise ConfigError("options", "expected an object")
    for key in ("horizon", "step", "samples", "commodity"):
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    if getattr(args, "bracket", None):
        try:
            lo, hi = (float(x) for x in args.bracket.split(":"))
        except ValueError:
            raise ConfigError("--bracket", "expected LO:HI") from None
        opts["bracket"] = [lo, hi]
    return opts


def _seed(cfg: dict, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    try:
        return int(cfg.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError("seed", "expected an integer") from None


def _number(opts: dict, key: str, default: float) -> float:
    try:
        return float(opts.get(key, default))
    except (TypeError, ValueError):
        raise ConfigError(f"options.{key}", "expected a number") from None


def _saturation(net, opts) -> tuple[tuple[str, str], ...]:
    sat = opts.get("saturate", "auto")
    if sat == "auto":
        return tuple(overloaded_sources(net))
    if sat in (None, False, "none"):
        return ()
    try:
        return tuple((str(n), str(c)) for n, c in sat)
    except (TypeError, ValueError):
        raise ConfigError("options.saturate", "expected 'auto', 'none' or a list of [node, commodity]") from None


def _network(cfg: dict):
    if "network" not in cfg:
        raise ConfigError("network", "missing")
    return network_from_config(cfg["network"])


def _policy(cfg: dict):
    try:
        return policy_from_config(cfg.get("policy"))
    except (PolicyError, TypeError, ValueError) as exc:
        raise ConfigError("policy", str(exc)) from None


def _emit(args, name: str, report: dict) -> str:
    text = dumps(report)
    atomic_write(os.path.join(args.out, name), text)
    return text


# -- commands -----------------------------------------------------------------

def cmd_validate(args, cfg) -> int:
    net = _network(cfg)
    rep = validate_topology(net)
    out = envelope("validate", cfg, _seed(cfg, args), TOLERANCES, rep.to_dict(), __version__)
    sys.stdout.write(dumps(out))
    for v in rep.violations:
        print(v.message, file=sys.stderr)
    return EXIT_OK if rep.valid else EXIT_RUN


def cmd_simulate(args, cfg) -> int:
    net, pol = _network(cfg), _policy(cfg)
    require_valid(net)
    opts = _options(cfg, args)
    horizon = _number(opts, "horizon", 1000.0)
    step = _number(opts, "step", DEFAULT_STEP)
    record = int(_number(opts, "record_every", max(1, round(0.1 / step))))
    sat = () if opts.get("saturate", "none") in ("none", None, False) else _saturation(net, opts)
    m = build_model(net, pol, sat)
    q0 = np.asarray(opts.get("q0", np.zeros(m.n)), dtype=float)
    traj = integrate(m, None, q0, horizon, h=step, record_every=record, saturated=sat)
    window = traj.t_end / 2
    thr = {c: throughput_estimate(traj, c, window) for c in m.layout.commodities} if window > 0 else {}
    growth = (traj.final - traj.at(traj.t_end - window)) / window if window > 0 else np.zeros(m.n)
    labels = m.layout.labels()
    growing = [lab for lab, g, unb in zip(labels, growth, m.unbounded) if unb and g > GROWTH_TOL]
    status = "UNSTABLE" if traj.diverged or growing else "STABLE"
    lam = {c: net.commodity(c).total_rate for c in m.layout.commodities}
    summary = {
        "status": status,
        "unstable_states": growing,
        "final_state": dict(zip(labels, traj.final.tolist())),
        "growth_rates": dict(zip(labels, growth.tolist())),
        "throughput": thr,
        "arrival_rate": lam,
        "window": window,
        "integration": traj.metadata(),
        "saturated": [list(s) for s in sat],
        "trajectory_csv": "trajectory.csv",
    }
    atomic_write(os.path.join(args.out, "trajectory.csv"), traj.to_csv())
    text = _emit(args, "simulate.json", envelope("simulate", cfg, _seed(cfg, args),
                                                 TOLERANCES, summary, __version__))
    sys.stdout.write(text)
    return EXIT_OK


def _stage(stages: dict, name: str, fn):
    try:
        out = fn()
        stages[name] = out
        return out
    except Exception as exc:  # recorded so the conclusion can name the failing stage
        stages[name] = {"status": "ERROR", "error": f"{type(exc).__name__}: {exc}"}
        return None


def analyze(net, pol, opts: dict, seed: int) -> dict:
    """Condition scan, equilibrium search, matrix certificates at ``q*`` and box certificates."""
    sat = _saturation(net, opts)
    samples = int(_number(opts, "samples", 2000))
    m = build_model(net, pol, sat)
    stages: dict = {}
    scan = _stage(stages, "condition_scan",
                  lambda: grid_condition_scan(net, pol, samples, "lhs", seed, saturated=sat).to_dict())
    eq = _stage(stages, "equilibrium", lambda: find_equilibrium(m, seed=seed))
    if eq is not None:
        stages["equilibrium"] = eq.to_dict()
    at_q: dict = {}
    spectrum_ok = None
    if eq is not None and eq.status == FOUND:
        J = jacobian(m, None, eq.q)
        ev = eigen_spectrum(J)
        spectrum_ok = bool(ev.real.max() < -TOLERANCES["stability_margin"])
        at_q["eigenvalues"] = [[float(z.real), float(z.imag)] for z in ev]
        at_q["max_real_part"] = float(ev.real.max())
        at_q["column_dominance"] = check_column_dominance(J).to_dict()
        if m.ncom > 1:
            at_q["block_dominance"] = check_block_dominance(J).to_dict()
            at_q["m_matrix"] = {c: check_m_matrix(-J.J[s, s]).to_dict() for c, s in J.blocks.items()}

        def lyap():
            pr = perron_null_vector(J.without_egress)
            return {"perron": pr.to_dict(), "certificate": lyapunov_certificate(J, pr.delta).to_dict()}
        try:
            at_q["lyapunov"] = lyap()
        except PerronError as exc:
            at_q["lyapunov"] = {"status": "NOT APPLICABLE", "reason": str(exc)}
        stages["at_equilibrium"] = at_q

    def box():
        if net.buffer_mode == PER_COMMODITY and m.ncom > 1:
            region, faces = per_commodity_box(net, pol, seed=seed)
            bm = build_model(net, pol)
        else:
            region = construct_backpressure_box(net, pol, saturated=sat)
            faces = verify_poincare_miranda(m, region, seed=seed)
            bm = m
        out = {"box": region.to_dict(), "faces": faces.to_dict()}
        if faces.certified:
            sol = find_equilibrium(bm, q0=region.center, starts=1, seed=seed)
            out["solve_from_center"] = {"status": sol.status, "method": sol.method, "residual": sol.residual,
                                        "inside_box": bool(sol.status == FOUND and region.contains(sol.q))}
        return out
    try:
        stages["box"] = box()
    except BoxConstructionError as exc:
        stages["box"] = {"status": "NOT APPLICABLE", "reason": str(exc)}
    except Exception as exc:
        stages["box"] = {"status": "ERROR", "error": f"{type(exc).__name__}: {exc}"}

    failed = [k for k, v in stages.items() if isinstance(v, dict) and v.get("status") == "ERROR"]
    flags = {}
    sat_coms = {c for _, c in sat}
    for c in m.layout.commodities:
        if c in sat_coms:
            flags[c] = "overloaded (source treated as saturated)"
    if failed:
        conclusion, reason = "INCONCLUSIVE", f"stage failed: {', '.join(failed)}"
    elif eq.status == FOUND:
        if spectrum_ok:
            conclusion, reason = "STABLE", "equilibrium found with all eigenvalues in the left half-plane"
        else:
            conclusion, reason = "INCONCLUSIVE", "equilibrium found but the spectrum is not strictly stable"
    elif eq.status == DIVERGED:
        conclusion, reason = "NO-EQUILIBRIUM EVIDENCE", eq.evidence
    else:
        conclusion, reason = "INCONCLUSIVE", "equilibrium search failed (solver failure)"
    for c in m.layout.commodities:
        if c in flags:
            continue
        if eq is not None and eq.status == FOUND:
            flags[c] = "stable" if spectrum_ok else "undecided"
        elif eq is not None and eq.growth is not None:
            idx = [i for i, (_, cc) in enumerate(m.layout.entries) if cc == c]
            grow = any(m.unbounded[i] and eq.growth[i] > GROWTH_TOL for i in idx)
            flags[c] = "unstable" if grow else "no growth observed"
        else:
            flags[c] = "undecided"
    caveats = []
    if isinstance(scan, dict) and scan.get("pointwise_failed", 0) > 0:
        caveats.append(f"pointwise sign conditions failed at {scan['pointwise_failed']} of "
                       f"{scan['samples']} samples")
    if isinstance(scan, dict) and scan.get("failed", 0) > scan.get("pointwise_failed", 0):
        caveats.append("multi-commodity matrix conditions (M-matrix or block dominance) failed at "
                       f"{scan['failed'] - scan['pointwise_failed']} of {scan['samples']} samples")
    if sat:
        caveats.append("analysis covers the subsystem left after saturating the overloaded sources")
    return {"saturated": [list(s) for s in sat], "stages": stages, "conclusion": conclusion,
            "reason": reason, "commodity_flags": flags, "caveats": caveats}


def cmd_analyze(args, cfg) -> int:
    net, pol = _network(cfg), _policy(cfg)
    require_valid(net)
    pol.check_network(net)
    opts = _options(cfg, args)
    seed = _seed(cfg, args)
    result = analyze(net, pol, opts, seed)
    text = _emit(args, "analysis.json", envelope("analyze", cfg, seed, TOLERANCES, result, __version__))
    sys.stdout.write(text)
    print(f"CONCLUSION: {result['conclusion']} ({result['reason']})")
    for c, f in result["commodity_flags"].items():
        print(f"  commodity {c}: {f}")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    net, pol = _network(cfg), _policy(cfg)
    require_valid(net)
    opts = _options(cfg, args)
    seed = _seed(cfg, args)
    com = opts.get("commodity")
    if com is None:
        raise ConfigError("options.commodity", "sweep needs the commodity to vary (--commodity)")
    com = str(com)
    try:
        net.commodity(com)
    except KeyError:
        raise ConfigError("options.commodity", f"unknown commodity {com!r}") from None
    br = opts.get("bracket")
    if not (isinstance(br, (list, tuple)) and len(br) == 2):
        raise ConfigError("options.bracket", "sweep needs a bracket [lo, hi] (--bracket LO:HI)")
    sat = opts.get("saturate", "auto")
    if sat != "auto":
        sat = _saturation(net, opts)
    res = existence_sweep(net, pol, com, (float(br[0]), float(br[1])), int(_number(opts, "iterations", 12)),
                          saturated=sat, seed=seed)
    atomic_write(os.path.join(args.out, "sweep.csv"), res.to_csv())
    text = _emit(args, "sweep.json", envelope("sweep", cfg, seed, TOLERANCES, res.to_dict(), __version__))
    sys.stdout.write(text)
    print(f"THRESHOLD: {res.threshold:.6f} (bracket {res.bracket[0]:.6f}..{res.bracket[1]:.6f})")
    return EXIT_OK


def cmd_casestudy(args, cfg) -> int:
    block = cfg.get("casestudy")
    if not isinstance(block, dict):
        raise ConfigError("casestudy", "missing or not an object")
    try:
        cs = OneHopSharedConfig.from_dict(block)
    except KeyError as exc:
        raise ConfigError(f"casestudy.{exc.args[0]}", "missing") from None
    except HypothesisError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("casestudy", str(exc)) from None
    seed = _seed(cfg, args)
    pol = _policy(cfg) if cfg.get("policy") else None
    over = block.get("overloaded")
    rep = admissible_ranges_c_commodity(cs, over)
    result = {"config": cs.to_dict(), "ranges": rep.to_dict(),
              "beta_limit": beta_limit(cs, rep.overloaded)}
    if cs.C == 2 and rep.overloaded == cs.names[0]:
        result["two_commodity_range"] = admissible_range_two_commodity(cs).to_dict()
    opts = _options(cfg, args)
    if opts.get("validate", False):
        rows = sweep_validation(cs, pol, rep.overloaded, seed=seed)
        result["validation"] = [r.to_dict() for r in rows]
        lines = ["commodity,closed_form,threshold,abs_error,flag"]
        lines += [f"{r.commodity},{r.closed_form!r},{r.threshold!r},{r.error!r},{r.flag}" for r in rows]
        atomic_write(os.path.join(args.out, "casestudy_validation.csv"), "\n".join(lines) + "\n")
    text = _emit(args, "casestudy.json", envelope("casestudy", cfg, seed, TOLERANCES, result, __version__))
    sys.stdout.write(text)
    print("commodity  interval")
    for name, iv in rep.intervals.items():
        print(f"  {name:8s} {iv}  {rep.flags[name]}")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "analyze": cmd_analyze,
            "sweep": cmd_sweep, "casestudy": cmd_casestudy}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bufnet", description="Stability analysis of finite-buffer networks.")
    p.add_argument("--version", action="version", version=f"bufnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--out", default=".", metavar="DIR")
        s.add_argument("--seed", type=int, metavar="N")
        s.add_argument("--horizon", type=float, metavar="T")
        s.add_argument("--step", type=float, metavar="H")
        s.add_argument("--samples", type=int, metavar="N")
        s.add_argument("--bracket", metavar="LO:HI")
        s.add_argument("--commodity", metavar="ID")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidNetworkError, HypothesisError, BracketError, PolicyError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
