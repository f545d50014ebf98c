"""Command-line experiment runner: ``pamlab run | validate | report``.

Configs are flat ``key = value`` text files; ``#`` starts a comment and list
values are comma separated. Every run writes ``config.resolved.txt`` (all
defaults materialized), ``report.json`` and CSV tables into the output
directory. Output bytes depend only on the config and the seed, never on
``--workers``.
"""

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import coupling, stats
from .errors import DomainError, NumericError, OrderingError, PositivityError
from .noise import parse_seed
from .reaction import PRESETS, check_high_noise, preset
from .solver import SolverConfig
from .torus import Field, Grid

SCHEMA_VERSION = 1
KINDS = ("simulate", "pam", "couple-pair", "staged-coupling", "lyapunov", "clt",
         "dissipation", "oscillation", "schedule", "tailsum")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_DEGENERACY = 0, 2, 3, 4


class ConfigError(DomainError):
    pass


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
KEYS = {
    "kind": (str, None),
    "preset": (str, "linear"),
    "mu": (float, 0.0),
    "sigma": (float, 1.0),
    "a": (float, 0.001),
    "b": (float, 1.0),
    "cap": (float, 10.0),
    "n": (int, 128),
    "dt": (float, 2.5e-4),
    "theta": (float, 1.0),
    "positivity_floor": (float, 0.0),
    "blowup_cap": (float, 1e12),
    "t_end": (float, 1.0),
    "trajectories": (int, 10),
    "seed": (parse_seed, 0),
    "record_every": (float, 0.1),
    "w0": (float, 1.0),
    "w0_cos": (float, 0.0),
    "u0": (float, 1.0),
    "v0": (float, 1.05),
    "alpha": (float, 1.0),
    "meet_tol": (float, coupling.MEET_TOL),
    "epsilon": (float, coupling.EPS_MAX),
    "L_star": (float, 2.0),
    "eta": (float, 0.1),
    "n_max": (int, 30),
    "gamma": (float, 0.25),
    "T": (_floats, [20.0]),
    "horizon": (float, 60.0),
    "times": (_floats, [1.0]),
    "k": (float, 2.0),
    "window_start": (float, 0.0),
    "deltas": (_floats, [0.05, 0.1, 0.2, 0.4]),
    "write_trajectories": (_bool, True),
}

_SPEC = ("preset", "mu", "sigma", "a", "b", "cap")
_SOLVER = ("n", "dt", "theta", "positivity_floor", "blowup_cap")
_ENSEMBLE = ("trajectories", "seed", "record_every", "w0", "w0_cos", "write_trajectories")
KIND_KEYS = {
    "simulate": _SPEC + _SOLVER + _ENSEMBLE + ("t_end",),
    "pam": ("mu", "sigma") + _SOLVER + _ENSEMBLE + ("t_end",),
    "couple-pair": ("mu", "sigma", "alpha", "u0", "v0", "meet_tol", "t_end", "trajectories",
                    "seed") + _SOLVER,
    "staged-coupling": _SPEC + _SOLVER + ("w0", "w0_cos", "epsilon", "L_star", "eta", "n_max",
                                          "trajectories", "seed", "meet_tol"),
    "lyapunov": ("mu", "sigma") + _SOLVER + _ENSEMBLE + ("t_end", "window_start"),
    "clt": ("mu", "sigma") + _SOLVER + _ENSEMBLE + ("times",),
    "dissipation": _SPEC + _SOLVER + _ENSEMBLE + ("gamma", "T", "horizon"),
    "oscillation": _SPEC + _SOLVER + _ENSEMBLE + ("times", "k"),
    "schedule": ("epsilon", "L_star", "eta", "n_max"),
    "tailsum": ("deltas",),
}


def parse_config_text(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve(raw, seed=None):
    """Typed config with every default of the chosen kind materialized."""
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {kind!r}")
    allowed = set(KIND_KEYS[kind]) | {"kind"}
    extra = sorted(set(raw) - allowed)
    if extra:
        raise ConfigError(f"keys not used by kind {kind!r}: {', '.join(extra)}")
    cfg = {"kind": kind}
    for key in KIND_KEYS[kind]:
        parser, default = KEYS[key]
        if key in raw:
            try:
                cfg[key] = parser(raw[key])
            except (ValueError, DomainError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        else:
            cfg[key] = default
    if seed is not None and "seed" in cfg:
        cfg["seed"] = parse_seed(seed)
    if cfg.get("preset", "linear") not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    return cfg


def _fmt(value):
    if isinstance(value, list):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def echo_config(cfg):
    lines = [f"kind = {cfg['kind']}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.items() if k not in ("kind",)]
    return "\n".join(lines) + "\n"


def load_config(path, seed=None):
    with open(path) as fh:
        return resolve(parse_config_text(fh.read()), seed)


# ------------------------------------------------------------- builders

def build_spec(cfg):
    name = cfg.get("preset", "linear")
    if name == "linear":
        return preset("linear", mu=cfg["mu"], sigma=cfg["sigma"])
    return preset(name, a=cfg["a"], b=cfg["b"], sigma=cfg["sigma"], cap=cfg["cap"])


def build_solver(cfg):
    grid = Grid(cfg["n"])
    scfg = SolverConfig(dt=cfg["dt"], theta=cfg["theta"],
                        positivity_floor=cfg["positivity_floor"], blowup_cap=cfg["blowup_cap"])
    scfg.check_grid(grid)
    return grid, scfg


def build_w0(cfg, grid):
    c, amp = cfg.get("w0", 1.0), cfg.get("w0_cos", 0.0)
    return Field.from_function(grid, lambda x: c + amp * np.cos(np.pi * x))


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _map(func, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, jobs))
    return [func(j) for j in jobs]


def _chunks(n, size):
    ids = list(range(n))
    return [tuple(ids[i:i + size]) for i in range(0, n, size)]


# ------------------------------------------------------------ experiments

def _ensemble(cfg, out, workers, t_end):
    grid, scfg = build_solver(cfg)
    ens = stats.simulate_ensemble(grid, build_w0(cfg, grid), build_spec(cfg), scfg, t_end,
                                  cfg["trajectories"], cfg["seed"], cfg["record_every"], workers)
    if cfg["write_trajectories"]:
        ens.write_csv_dir(os.path.join(out, "trajectories"))
    return ens


def _ensemble_summary(ens, cfg):
    k = len(ens.times) - 1
    n_cells = cfg["n"]
    steps = ens.times[-1] / cfg["dt"]
    return {
        "t_end": ens.times[-1],
        "mean_log_sup": float(np.mean(ens.log_sup[k])),
        "mean_log_mass": float(np.mean(ens.log_mass[k])),
        "clamp_fraction": float(ens.clamp_count[k].sum() / max(steps * n_cells * ens.n_trajectories, 1)),
    }


def _summarize(cfg, ens):
    """Aggregate an ensemble according to the experiment kind."""
    kind = cfg["kind"]
    res = {"ensemble": _ensemble_summary(ens, cfg)}
    if kind == "pam":
        # the cosine mode integrates to zero over the torus
        res["expected_mean_mass"] = 2.0 * cfg["w0"] * math.exp(cfg["mu"] * ens.times[-1])
        mass = np.exp(ens.log_mass[-1])
        res["mean_mass"] = float(np.mean(mass))
        res["mean_mass_stderr"] = float(np.std(mass, ddof=1) / math.sqrt(mass.size)) \
            if mass.size > 1 else None
    elif kind == "lyapunov":
        est = stats.lyapunov_estimate(ens, (cfg["window_start"], ens.times[-1]))
        res.update(lambda_hat=est.lambda_hat, stderr=est.stderr, slope=est.slope,
                   slope_stderr=est.slope_stderr, window=est.window,
                   target=stats.lln_limit(cfg["mu"], cfg["sigma"]),
                   gamma2=stats.gamma2(cfg["sigma"]))
        res["checks"] = {"within_30_percent": bool(abs(est.lambda_hat - res["target"])
                                                   <= 0.3 * abs(res["target"]))}
    elif kind == "clt":
        res["diagnostics"] = [vars(stats.clt_diagnostics(ens, t, cfg["mu"], cfg["sigma"]))
                              for t in cfg["times"]]
    elif kind == "dissipation":
        rows = []
        for T in cfg["T"]:
            p = stats.dissipation_probability(ens, cfg["gamma"], T, cfg["horizon"])
            rows.append({"T": T, "frequency": p.frequency, "wilson_low": p.low,
                         "wilson_high": p.high, "successes": p.successes, "trials": p.trials})
        res["dissipation"] = rows
        freqs = [r["frequency"] for r in rows]
        order = np.argsort(cfg["T"], kind="stable")
        res["checks"] = {"nondecreasing_in_T": bool(np.all(np.diff(np.array(freqs)[order]) >= 0))}
    elif kind == "oscillation":
        rep = stats.oscillation_moments(ens, cfg["times"], cfg["k"])
        res["oscillation"] = {"times": rep.times, "moments": rep.moments, "stderr": rep.stderr,
                              "max_moment": rep.max_moment, "non_growing": rep.non_growing}
        res["checks"] = {"non_growing": rep.non_growing}
    return res


def _pair_chunk(args):
    cfg, ids = args
    grid, scfg = build_solver(cfg)
    u, v = coupling.pair_states(grid, cfg["u0"], cfg["v0"], cfg["seed"], ids)
    rec = coupling.PairRecorder(stride=max(1, int(round(0.01 / scfg.dt))))
    u2, v2, meet = coupling.evolve_coupled_pam_pair(u, v, cfg["alpha"], cfg["mu"], cfg["sigma"],
                                                    scfg, cfg["t_end"], cfg["meet_tol"],
                                                    recorder=rec)
    return np.atleast_1d(meet), np.array(rec.times), np.array(rec.X)


def run_couple_pair(cfg, out, workers):
    parts = _map(_pair_chunk, [(cfg, c) for c in _chunks(cfg["trajectories"], stats.CHUNK)],
                 workers)
    meet = np.concatenate([p[0] for p in parts])
    times = parts[0][1]
    X = np.concatenate([p[2] for p in parts], axis=1)
    with open(os.path.join(out, "meetings.csv"), "w") as fh:
        fh.write("trajectory,meeting_time\n")
        for i, t in enumerate(meet):
            fh.write(f"{i},{'' if np.isnan(t) else repr(float(t))}\n")
    with open(os.path.join(out, "l1_difference.csv"), "w") as fh:
        fh.write("time,mean_X,stderr_X\n")
        for k, t in enumerate(times):
            fh.write(f"{float(t)!r},{float(np.mean(X[k]))!r},"
                     f"{float(np.std(X[k], ddof=1) / math.sqrt(X.shape[1])) if X.shape[1] > 1 else 0.0!r}\n")
    p = stats.wilson_interval(int(np.sum(~np.isnan(meet))), meet.size)
    return {"meeting_frequency": p.frequency, "wilson_low": p.low, "wilson_high": p.high,
            "median_meeting_time": float(np.nanmedian(meet)) if p.successes else None,
            "X0": float(np.mean(X[0])), "mean_X_end": float(np.mean(X[-1]))}


def _staged_chunk(args):
    cfg, ids = args
    grid, scfg = build_solver(cfg)
    sched = coupling.build_schedule(cfg["epsilon"], cfg["L_star"], cfg["eta"], cfg["n_max"])
    res = coupling.run_staged_coupling(build_spec(cfg), build_w0(cfg, grid), sched, scfg,
                                       seed=cfg["seed"], trajectory_ids=ids,
                                       meet_tol=cfg["meet_tol"])
    return res.log


def run_staged(cfg, out, workers):
    logs = _map(_staged_chunk, [(cfg, c) for c in _chunks(cfg["trajectories"], 10)], workers)
    log = coupling.CouplingEventLog(
        logs[0].schedule, sum((l.trajectory_ids for l in logs), ()),
        *(np.concatenate([getattr(l, f) for l in logs], axis=1)
          for f in ("meeting_time", "A", "B", "jump_gap", "log_ratio_sup")))
    log.write_csv(os.path.join(out, "events.csv"))
    sched = log.schedule
    med = np.median(log.log_ratio_sup, axis=1)
    fit = stats.decay_exponent_fit(sched.T, med)
    return {"T": sched.T, "median_log_ratio_sup": med,
            "A_frequency": np.mean(log.A, axis=1),
            "decay_fit": {"beta_hat": fit.beta_hat, "half_width": fit.half_width,
                          "n_used": fit.n_used, "n_excluded": fit.n_excluded},
            "checks": {"beta_positive": fit.positive,
                       "tail_nonincreasing": bool(np.all(np.diff(med[-21:]) <= 0))}}


def run_schedule(cfg, out):
    s = coupling.build_schedule(cfg["epsilon"], cfg["L_star"], cfg["eta"], cfg["n_max"])
    with open(os.path.join(out, "schedule.csv"), "w") as fh:
        fh.write("n,T_n,eps_n,alpha_n\n")
        for n in range(s.n_max + 1):
            fh.write(f"{n},{float(s.T[n])!r},{float(s.eps[n])!r},{float(s.alpha[n])!r}\n")
    return {"delta": s.delta, "T0": s.T[0], "T1_minus_T0": s.T[1] - s.T[0],
            "T": s.T, "eps": s.eps, "alpha": s.alpha,
            "growth_ratio": coupling.growth_ratio(s),
            "checks": {"T_increasing": bool(np.all(np.diff(s.T) > 0)),
                       "T1_minus_T0_is_delta": bool(abs(s.T[1] - s.T[0] - s.delta) <= 1e-12)}}


def run_tailsum(cfg, out):
    rows = stats.tail_sum_check(cfg["deltas"])
    with open(os.path.join(out, "tailsum.csv"), "w") as fh:
        fh.write("delta,S,ratio,N,remainder_bound\n")
        for r in rows:
            fh.write(f"{r.delta!r},{r.S!r},{r.ratio!r},{r.N},{r.remainder_bound!r}\n")
    c = stats.tail_constant()
    return {"rows": [vars(r) for r in rows], "constant": c,
            "checks": {"ratios_below_constant": all(r.ratio <= c for r in rows)}}


def execute(cfg, out, workers=1):
    """Run one experiment; returns the result dict written to ``report.json``."""
    kind = cfg["kind"]
    if kind == "schedule":
        return run_schedule(cfg, out)
    if kind == "tailsum":
        return run_tailsum(cfg, out)
    if kind == "couple-pair":
        return run_couple_pair(cfg, out, workers)
    if kind == "staged-coupling":
        return run_staged(cfg, out, workers)
    if kind == "dissipation":
        t_end = cfg["horizon"]
    elif kind in ("clt", "oscillation"):
        t_end = max(cfg["times"])
    else:
        t_end = cfg["t_end"]
    return _summarize(cfg, _ensemble(cfg, out, workers, t_end))


# ------------------------------------------------------------ validation

def validate(cfg):
    checks = []
    if "sigma" in cfg:
        spec = build_spec(cfg)
        rep = check_high_noise(spec)
        checks.append({"check": "high_noise", "ok": rep.holds, "sup_f_ratio": rep.sup_f_ratio,
                       "threshold": rep.threshold, "margin": rep.margin,
                       "detail": rep.describe(), "required": cfg["kind"] == "staged-coupling"})
    if "dt" in cfg:
        try:
            build_solver(cfg)
            checks.append({"check": "cfl", "ok": True, "theta": cfg["theta"]})
        except DomainError as exc:
            checks.append({"check": "cfl", "ok": False, "detail": str(exc)})
    if "epsilon" in cfg:
        eps = cfg["epsilon"]
        ok = 0 < eps <= coupling.EPS_MAX
        checks.append({"check": "epsilon_range", "ok": ok, "epsilon": eps,
                       "upper": coupling.EPS_MAX,
                       "detail": f"epsilon must lie in (0, exp(-e^e)] = (0, {coupling.EPS_MAX:.6g}]"})
        if ok:
            try:
                s = coupling.build_schedule(eps, cfg["L_star"], cfg["eta"], cfg["n_max"])
                checks.append({"check": "schedule", "ok": bool(np.all(np.diff(s.T) > 0)),
                               "delta": s.delta, "T0": s.T[0]})
            except DomainError as exc:
                checks.append({"check": "schedule", "ok": False, "detail": str(exc)})
    required = [c for c in checks if c.get("required", True)]
    return {"schema_version": SCHEMA_VERSION, "kind": cfg["kind"],
            "ok": all(c["ok"] for c in required), "checks": checks}


# ------------------------------------------------------------- entry point

def _error_report(out, code, exc):
    report = {"schema_version": SCHEMA_VERSION, "status": "error", "exit_code": code,
              "error_type": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "time", None) is not None:
        report["time"] = exc.time
    if out:
        os.makedirs(out, exist_ok=True)
        write_json(os.path.join(out, "error.json"), report)
    print(json.dumps(_clean(report), sort_keys=True), file=sys.stderr)
    return code


def _exit_code(exc):
    if isinstance(exc, (PositivityError, OrderingError)):
        return EXIT_DEGENERACY
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def cmd_run(args):
    out = args.out or "out"
    try:
        cfg = load_config(args.config, args.seed)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.resolved.txt"), "w") as fh:
            fh.write(echo_config(cfg))
        result = execute(cfg, out, max(1, args.workers))
    except (DomainError, NumericError, PositivityError, OrderingError) as exc:
        return _error_report(out, _exit_code(exc), exc)
    except OSError as exc:
        return _error_report(None, EXIT_VALIDATION, exc)
    write_json(os.path.join(out, "report.json"),
               {"schema_version": SCHEMA_VERSION, "status": "ok", "kind": cfg["kind"],
                "config": cfg, "result": result})
    return EXIT_OK


def cmd_validate(args):
    try:
        cfg = load_config(args.config, args.seed)
    except (DomainError, OSError) as exc:
        report = {"schema_version": SCHEMA_VERSION, "ok": False,
                  "checks": [{"check": "config", "ok": False, "detail": str(exc)}]}
    else:
        report = validate(cfg)
    text = json.dumps(_clean(report), indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "validate.json"), report)
    return EXIT_OK


def cmd_report(args):
    out = args.out or "out"
    try:
        cfg = load_config(args.config or os.path.join(out, "config.resolved.txt"), args.seed)
        if cfg["kind"] not in ("simulate", "pam", "lyapunov", "clt", "dissipation", "oscillation"):
            raise ConfigError(f"kind {cfg['kind']!r} has no per-trajectory CSVs to aggregate")
        ens = stats.EnsembleResult.read_csv_dir(os.path.join(out, "trajectories"))
        result = _summarize(cfg, ens)
    except (DomainError, NumericError, PositivityError, OrderingError) as exc:
        return _error_report(out, _exit_code(exc), exc)
    except OSError as exc:
        return _error_report(None, EXIT_VALIDATION, exc)
    write_json(os.path.join(out, "report.reaggregated.json"),
               {"schema_version": SCHEMA_VERSION, "status": "ok", "kind": cfg["kind"],
                "config": cfg, "result": result})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pamlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run an experiment"),
                           ("validate", "dry-run checks of a config"),
                           ("report", "re-aggregate per-trajectory CSVs of a finished run")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=name != "report")
        p.add_argument("--seed", default=None, help="decimal or 0x-hex seed overriding the config")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "validate": cmd_validate, "report": cmd_report}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
