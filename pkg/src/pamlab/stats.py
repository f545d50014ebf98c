"""Ensemble runs and the statistics computed from them.

An :class:`EnsembleResult` holds recorded series of shape
``(records, trajectories)``, one array per name in ``RECORD_FIELDS``
(``mean_log`` is the spatial mean of ``log w``). Every statistic below is a
reduction over those arrays.
"""

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats as sps

from .errors import DomainError, PositivityError
from .solver import RECORD_FIELDS, Recorder, evolve, first_exceedance_time, initial_state

CHUNK = 50
CSV_COLUMNS = ("time", "sup", "inf", "mass", "clamp_count",
               "log_sup", "log_inf", "log_mass", "mean_log")


def gamma2(sigma):
    """``(sigma^2 / 8) (1 + sigma^2 / 12)``."""
    s2 = float(sigma) ** 2
    return s2 / 8.0 * (1.0 + s2 / 12.0)


def lln_limit(mu, sigma):
    """Almost-sure limit of ``t^-1 log w(t, x)``: ``mu - 2 gamma2(sigma)``."""
    return float(mu) - 2.0 * gamma2(sigma)


# ---------------------------------------------------------------- ensembles

@dataclass
class EnsembleResult:
    times: np.ndarray
    trajectory_ids: tuple
    log_sup: np.ndarray
    log_inf: np.ndarray
    log_mass: np.ndarray
    mean_log: np.ndarray
    clamp_count: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.trajectory_ids = tuple(int(t) for t in self.trajectory_ids)
        shape = (len(self.times), len(self.trajectory_ids))
        for name in RECORD_FIELDS:
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def n_trajectories(self):
        return len(self.trajectory_ids)

    @property
    def log_oscillation(self):
        """``log(sup w / inf w)`` per record and trajectory."""
        return self.log_sup - self.log_inf

    @classmethod
    def from_recorder(cls, recorder, trajectory_ids, meta=None):
        cols = {name: recorder.series(name) for name in RECORD_FIELDS}
        return cls(np.array(recorder.times), trajectory_ids, meta=dict(meta or {}), **cols)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        t0 = parts[0].times
        for p in parts[1:]:
            if not np.array_equal(p.times, t0):
                raise DomainError("ensembles do not share a time grid")
        cols = {name: np.concatenate([getattr(p, name) for p in parts], axis=1)
                for name in RECORD_FIELDS}
        ids = sum((p.trajectory_ids for p in parts), ())
        return cls(t0, ids, meta=dict(parts[0].meta), **cols)

    def index_of(self, t, atol=1e-9):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol * max(1.0, abs(t)):
            raise DomainError(f"time {t} was not recorded (nearest {self.times[k]})")
        return k

    # -- per-trajectory CSV files

    def write_csv_dir(self, directory):
        os.makedirs(directory, exist_ok=True)
        paths = []
        for j, tid in enumerate(self.trajectory_ids):
            path = os.path.join(directory, f"trajectory_{tid:06d}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                for k, t in enumerate(self.times):
                    ls, li, lm = self.log_sup[k, j], self.log_inf[k, j], self.log_mass[k, j]
                    w.writerow([repr(float(t)), repr(math.exp(ls)) if ls < 709 else "inf",
                                repr(math.exp(li)) if li < 709 else "inf",
                                repr(math.exp(lm)) if lm < 709 else "inf",
                                int(self.clamp_count[k, j]), repr(float(ls)), repr(float(li)),
                                repr(float(lm)), repr(float(self.mean_log[k, j]))])
            paths.append(path)
        return paths

    @classmethod
    def read_csv_dir(cls, directory, meta=None):
        names = sorted(f for f in os.listdir(directory)
                       if f.startswith("trajectory_") and f.endswith(".csv"))
        if not names:
            raise DomainError(f"no trajectory CSV files in {directory}")
        times, ids, cols = None, [], {name: [] for name in RECORD_FIELDS}
        for name in names:
            with open(os.path.join(directory, name), newline="") as fh:
                rows = list(csv.DictReader(fh))
            t = np.array([float(r["time"]) for r in rows])
            if times is None:
                times = t
            elif not np.array_equal(t, times):
                raise DomainError(f"{name} has a different time grid")
            ids.append(int(name[len("trajectory_"):-len(".csv")]))
            for c in RECORD_FIELDS:
                conv = int if c == "clamp_count" else float
                cols[c].append([conv(r[c]) for r in rows])
        cols = {c: np.array(v).T for c, v in cols.items()}
        return cls(times, ids, meta=dict(meta or {}), **cols)


def _simulate_chunk(args):
    grid, w0, spec, cfg, t_end, seed, ids, stride = args
    state = initial_state(grid, w0, spec, seed, trajectory_ids=ids)
    rec = Recorder(stride)
    evolve(state, cfg, t_end, [rec])
    return EnsembleResult.from_recorder(rec, ids)


def simulate_ensemble(grid, w0, spec, cfg, t_end, n_trajectories, seed, record_every=None,
                      workers=1, first_id=0, meta=None):
    """Run trajectories ``first_id .. first_id + n - 1`` and record them.

    Trajectories are grouped in fixed chunks of :data:`CHUNK` ids; each chunk
    is one batched run. Because every noise value is keyed by
    (seed, trajectory id, step) and every update is row-wise, the result is
    bit-identical for any ``workers``.
    """
    stride = 1 if record_every is None else max(1, int(round(record_every / cfg.dt)))
    ids = list(range(first_id, first_id + int(n_trajectories)))
    chunks = [tuple(ids[i:i + CHUNK]) for i in range(0, len(ids), CHUNK)]
    jobs = [(grid, w0, spec, cfg, t_end, seed, c, stride) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    result = EnsembleResult.concat(parts)
    result.meta.update(meta or {})
    return result


# -------------------------------------------------------------- estimators

@dataclass(frozen=True)
class LyapunovEstimate:
    lambda_hat: float
    stderr: float
    slope: float
    slope_stderr: float
    window: tuple

    def __iter__(self):
        return iter((self.lambda_hat, self.stderr))


def _window(ens, t_window):
    if np.ndim(t_window) == 0:
        t0, t1 = 0.0, float(t_window)
    else:
        t0, t1 = map(float, t_window)
    k1 = ens.index_of(t1)
    sel = (ens.times >= t0 - 1e-12) & (np.arange(len(ens.times)) <= k1)
    return t0, t1, k1, sel


def _require_positive(values, what):
    if np.any(~np.isfinite(values)):
        raise PositivityError(f"{what}: a field value was not strictly positive")


def lyapunov_estimate(ens, t_window):
    """``t^-1 mean_x log w(t)`` at the window end, averaged over trajectories.

    ``t_window`` is the end time or ``(start, end)``. The regression variant
    fits ``mean_x log w`` linearly in ``t`` over the window per trajectory.
    """
    t0, t1, k1, sel = _window(ens, t_window)
    _require_positive(ens.mean_log[sel], "lyapunov_estimate")
    if t1 <= 0:
        raise DomainError("the window must end at a positive time")
    per = ens.mean_log[k1] / t1
    m = per.size
    lam = float(np.mean(per))
    se = float(np.std(per, ddof=1) / math.sqrt(m)) if m > 1 else math.nan
    t = ens.times[sel]
    if t.size >= 2:
        tc = t - t.mean()
        slopes = tc @ (ens.mean_log[sel] - ens.mean_log[sel].mean(axis=0)) / (tc @ tc)
        slope = float(np.mean(slopes))
        slope_se = float(np.std(slopes, ddof=1) / math.sqrt(m)) if m > 1 else math.nan
    else:
        slope = slope_se = math.nan
    return LyapunovEstimate(lam, se, slope, slope_se, (t0, t1))


@dataclass(frozen=True)
class CLTReport:
    t: float
    spatial_flatness: float
    flatness_stderr: float
    skewness: float
    excess_kurtosis: float
    mean: float
    variance: float


def clt_diagnostics(ens, t, mu, sigma):
    """Moments of ``Y = (mean_x log w(t) - (mu - 2 gamma2) t) / sqrt(t)`` and the flatness."""
    k = ens.index_of(t)
    _require_positive(ens.mean_log[k], "clt_diagnostics")
    _require_positive(ens.log_inf[k], "clt_diagnostics")
    t = float(ens.times[k])
    y = (ens.mean_log[k] - lln_limit(mu, sigma) * t) / math.sqrt(t)
    osc = ens.log_oscillation[k]
    m = y.size
    if np.ptp(y) == 0:
        skew = kurt = 0.0
    else:
        skew = float(sps.skew(y))
        kurt = float(sps.kurtosis(y, fisher=True))
    return CLTReport(t, float(np.mean(osc)), float(np.std(osc, ddof=1) / math.sqrt(m)),
                     skew, kurt, float(np.mean(y)), float(np.var(y, ddof=1)))


@dataclass(frozen=True)
class Proportion:
    successes: int
    trials: int
    low: float
    high: float

    @property
    def frequency(self):
        return self.successes / self.trials


def wilson_interval(successes, trials, level=0.95):
    ci = sps.binomtest(int(successes), int(trials)).proportion_ci(level, method="wilson")
    return Proportion(int(successes), int(trials), float(ci.low), float(ci.high))


def dissipation_probability(ens, gamma, T, horizon, level=0.95):
    """Fraction of trajectories with ``sup w(t) <= exp(-gamma t)`` on all records in ``[T, horizon]``."""
    if ens.times[-1] < horizon - 1e-9:
        raise DomainError(f"records end at {ens.times[-1]}, before the horizon {horizon}")
    sel = ens.times <= horizon + 1e-9
    first = first_exceedance_time(ens.times[sel], ens.log_sup[sel], gamma, T)
    return wilson_interval(int(np.sum(np.isinf(first))), ens.n_trajectories, level)


@dataclass(frozen=True)
class OscillationReport:
    k: float
    times: tuple
    moments: tuple
    stderr: tuple

    @property
    def max_moment(self):
        return max(self.moments)

    @property
    def non_growing(self):
        """Last moment does not exceed the first by more than 2 combined SE."""
        return self.moments[-1] <= self.moments[0] + 2.0 * math.hypot(self.stderr[0], self.stderr[-1])


def oscillation_moments(ens, t_list, k):
    """``E[(sup w / inf w)^k]`` at each time, with standard errors."""
    moms, ses = [], []
    for t in t_list:
        i = ens.index_of(t)
        lo = ens.log_oscillation[i]
        _require_positive(lo, "oscillation_moments")
        r = np.exp(k * lo)
        moms.append(float(np.mean(r)))
        ses.append(float(np.std(r, ddof=1) / math.sqrt(r.size)) if r.size > 1 else math.nan)
    return OscillationReport(float(k), tuple(float(t) for t in t_list), tuple(moms), tuple(ses))


@dataclass(frozen=True)
class DecayFit:
    beta_hat: float
    half_width: float
    window: tuple
    n_used: int
    n_excluded: int
    level: float = 0.95

    @property
    def positive(self):
        """``beta_hat > 0`` at the fit's confidence level."""
        return self.beta_hat is not None and self.beta_hat - self.half_width > 0


MIN_STAGE_POINTS = 10


def decay_exponent_fit(T, series, level=0.95):
    """Least-squares fit of ``log series`` against ``log T``; ``beta_hat = -slope``.

    Nonpositive or non-finite values are excluded and counted. With fewer
    than 10 usable points ``beta_hat`` and ``half_width`` are ``None``.
    """
    T = np.asarray(T, dtype=float)
    s = np.asarray(series, dtype=float)
    if T.shape != s.shape:
        raise DomainError("T and series must have the same shape")
    ok = np.isfinite(s) & (s > 0) & (T > 0)
    used = int(ok.sum())
    window = (float(T[ok].min()), float(T[ok].max())) if used else (math.nan, math.nan)
    if used < MIN_STAGE_POINTS:
        return DecayFit(None, None, window, used, int(s.size - used), level)
    x, y = np.log(T[ok]), np.log(s[ok])
    fit = sps.linregress(x, y)
    tq = sps.t.ppf(0.5 + level / 2.0, used - 2)
    return DecayFit(float(-fit.slope) + 0.0, float(tq * fit.stderr), window, used,
                    int(s.size - used), level)


# ------------------------------------------------------------- tail sums

TAIL_REMAINDER = 1e-15


def tail_constant():
    """``c = int_0^inf exp(z - z^(3/2)) dz``, the constant of the tail-sum bound."""
    val, _ = integrate.quad(lambda z: math.exp(z - z ** 1.5), 0.0, math.inf,
                            epsabs=1e-14, epsrel=1e-13)
    return val


def _remainder_bound(N, a):
    # sum_{n > N} exp(-a (log n)^1.5) <= int_N^inf = int_{log N}^inf exp(z - a z^1.5) dz,
    # and for a convex exponent phi the tail integral is <= exp(-phi(z0)) / phi'(z0)
    z0 = math.log(N)
    dphi = 1.5 * a * math.sqrt(z0) - 1.0
    if dphi <= 0:
        return math.inf
    return math.exp(z0 - a * z0 ** 1.5) / dphi


@dataclass(frozen=True)
class TailSumRow:
    delta: float
    S: float
    ratio: float
    N: int
    remainder_bound: float


def tail_sum(delta, tol=TAIL_REMAINDER):
    """``S(delta) = sum_{n>=3} exp(-delta^-1/2 (log n)^(3/2))`` with a certified remainder."""
    delta = float(delta)
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    a = delta ** -0.5
    # smallest z = log N with a certified remainder below tol (bisection on log N)
    lo, hi = math.log(3.0), 1.0
    while _remainder_bound(math.exp(hi), a) >= tol:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _remainder_bound(math.exp(mid), a) < tol:
            hi = mid
        else:
            lo = mid
    N = max(3, math.ceil(math.exp(hi)))
    n = np.arange(3, N + 1, dtype=float)
    S = math.fsum(np.exp(-a * np.log(n) ** 1.5))
    return TailSumRow(delta, S, S / delta ** (1.0 / 3.0), N, _remainder_bound(N, a))


def tail_sum_check(delta_list, tol=TAIL_REMAINDER):
    """One :class:`TailSumRow` per ``delta``; ratios should stay below :func:`tail_constant`."""
    return [tail_sum(d, tol) for d in delta_list]
