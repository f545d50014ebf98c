"""Noise-mixing couplings of parabolic Anderson solutions.

Two constructions:

* the pair coupling: ``u`` is driven by ``W``; ``v`` by
  ``Psi(y) W + Phi(y) W0`` with ``y = (u - v) / v`` and an independent
  ``W0``. Once the two fields agree to ``meet_tol`` they are identified;
* the staged coupling of a nonlinear solution ``w`` with a single PAM solution
  ``u`` along deterministic times ``T_0 < T_1 < ...``. On each stage a fresh
  PAM copy ``v`` restarts from ``w(T_n)`` and shares ``w``'s noise, while
  ``u`` (continuous in time) is driven by ``Psi_n W + Phi_n W_n`` with
  ``y = (v - u) / u``; note the roles of the two processes are swapped with
  respect to the pair coupling.

Streams: ``W`` is stream 0 of the seed, the pair's ``W0`` is ``v``'s own
stream, and the staged construction uses stream ``n + 1`` for ``W_n``.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegeneracyError, DegeneracyWarning, DomainError, OrderingError, PositivityError
from .noise import NoiseStream, stream_keys, standard_normals
from .reaction import check_high_noise, linear
from .solver import LN2, TrajectoryState, advance_arrays, check_finite, next_step, normalize
from .torus import Field

MEET_TOL = 1e-8
V_FLOOR = 1e-30
CLAMP_BUDGET = 1e-3
ORDER_TOL = 1e-9
EPS_MAX = math.exp(-math.e ** math.e)


# ------------------------------------------------------------------ mixing

@dataclass(frozen=True)
class MixingProfile:
    """``Phi(y) = sqrt(min(alpha |y|, 1))`` and ``Psi = sqrt(1 - Phi^2)``."""

    alpha: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise DomainError(f"mixing gain must be positive and finite, got {self.alpha}")

    def __call__(self, y):
        return mixing(y, self.alpha)


def mixing(y, alpha):
    """``(phi, psi)`` for scalar or array ``y``."""
    if not np.all(np.asarray(alpha) > 0):
        raise DomainError(f"mixing gain must be positive, got {alpha}")
    s = np.minimum(alpha * np.abs(np.asarray(y, dtype=float)), 1.0)
    phi = np.sqrt(s)
    psi = np.sqrt(1.0 - s)
    if np.ndim(phi) == 0:
        return float(phi), float(psi)
    return phi, psi


def _relative(num_m, num_e, den_m, den_e):
    # physical (num - den) / max(den, V_FLOOR) from scaled rows
    shift = (num_e - den_e)[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        diff = np.ldexp(num_m, shift) - den_m
        return diff / np.maximum(den_m, np.ldexp(V_FLOOR, -den_e)[:, None])


def _sup_gap(a_m, a_e, b_m, b_e):
    """``(sup |a - b|, sup |b|)`` in units of ``2**b_e``."""
    with np.errstate(over="ignore"):
        gap = np.max(np.abs(np.ldexp(a_m, (a_e - b_e)[:, None]) - b_m), axis=1)
    return gap, np.max(np.abs(b_m), axis=1)


# ------------------------------------------------------------- pair runs

class PairRecorder:
    """Records ``X(t) = int (v - u) dx`` and ``min (v - u)`` every ``stride`` steps."""

    def __init__(self, stride=1):
        if int(stride) < 1:
            raise DomainError("stride must be a positive integer")
        self.stride = int(stride)
        self.times, self.X, self.min_gap = [], [], []

    def observe(self, step, time, u_m, u_e, v_m, v_e, dx):
        if step % self.stride:
            return
        d = np.ldexp(v_m, v_e[:, None]) - np.ldexp(u_m, u_e[:, None])
        self.times.append(time)
        self.X.append(np.sum(d, axis=1) * dx)
        self.min_gap.append(np.min(d, axis=1))


def pair_states(grid, u0, v0, seed, trajectory_ids=0, time=0.0):
    """``u`` on stream 0 and ``v`` on stream 1 (its independent noise) of ``seed``."""
    from .solver import initial_state
    spec = linear(0.0, 0.0)
    u = initial_state(grid, u0, spec, seed, trajectory_ids, stream_id=0, time=time)
    v = initial_state(grid, v0, spec, seed, trajectory_ids, stream_id=1, time=time)
    return u, v


def initial_order(ref_m, ref_e, mix_m, mix_e):
    """Per row: +1 if ``mix >= ref`` everywhere, -1 if ``mix <= ref``, else 0."""
    d = _relative(mix_m, mix_e, ref_m, ref_e)
    return np.where(np.all(d >= 0, axis=1), 1, np.where(np.all(d <= 0, axis=1), -1, 0))


def enforce_order(ref_m, ref_e, mix_m, mix_e, order, counts):
    """Mass-conserving projection of ``d = order * (mix - ref)`` onto ``d >= 0``.

    Rows with ``order != 0`` where some cell of ``d`` is negative get
    ``d -> d+ * sum(d) / sum(d+)`` (or ``d -> 0`` when ``sum(d) <= 0``), so the
    integral of ``mix - ref`` is unchanged by the projection and remains a
    discrete martingale. ``mix_m`` is modified in place; returns its new
    sup-norm per row.
    """
    with np.errstate(over="ignore"):
        ref = np.ldexp(ref_m, (ref_e - mix_e)[:, None])
    sign = order[:, None]
    d = sign * (mix_m - ref)
    neg = (d < 0) & (sign != 0)
    rows = np.flatnonzero(neg.any(axis=1))
    if rows.size:
        counts[rows] += np.sum(neg[rows], axis=1)
        dr = d[rows]
        total = np.sum(dr, axis=1)
        pos = np.maximum(dr, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            factor = np.where(total > 0, total / np.sum(pos, axis=1), 0.0)
        mix_m[rows] = ref[rows] + sign[rows] * pos * factor[:, None]
    return np.max(np.abs(mix_m), axis=1)


def evolve_coupled_pam_pair(u, v, alpha, mu, sigma, cfg, t_end, meet_tol=MEET_TOL,
                            met_at=None, recorder=None, clamp_budget=CLAMP_BUDGET,
                            preserve_order=True):
    """Advance the coupled pair to ``t_end``.

    ``u`` consumes its own stream; ``v`` consumes the mixture of ``u``'s
    increments with those of its own stream. Returns ``(u', v', meeting)``:
    the meeting time (``None`` if none) for a single trajectory, or an array
    with ``nan`` for trajectories that did not meet. ``met_at`` carries
    meeting times of an earlier call.
    """
    if u.grid != v.grid or u.time != v.time or u.n_trajectories != v.n_trajectories:
        raise DomainError("u and v must share their grid and trajectory count and start at the same time")
    if (u.stream.master_seed, u.stream.stream_id) == (v.stream.master_seed, v.stream.stream_id):
        raise DomainError("v needs a noise stream independent of u's")
    if u.stream.step_counter != v.stream.step_counter:
        raise DomainError("u and v streams must be at the same step counter")
    t_end = float(t_end)
    if t_end < u.time:
        raise DomainError(f"t_end={t_end} is before the current time {u.time}")
    profile = MixingProfile(alpha)
    spec = linear(mu, sigma)
    grid = u.grid
    cfg.check_grid(grid)
    m = u.n_trajectories
    um, ue = u.mantissa.copy(), u.exponent.copy()
    vm, ve = v.mantissa.copy(), v.exponent.copy()
    uc, vc = u.clamp_count.copy(), v.clamp_count.copy()
    meet = np.full(m, np.nan) if met_at is None else np.array(np.atleast_1d(met_at), dtype=float)
    ukeys, vkeys = u.stream.keys, v.stream.keys
    step0 = u.stream.step_counter
    t, k = u.time, 0

    def identify(t_now):
        fresh = np.isnan(meet)
        if fresh.any():
            gap, ref = _sup_gap(um, ue, vm, ve)
            hit = fresh & (gap < meet_tol * ref)
            meet[hit] = t_now
        done = ~np.isnan(meet)
        vm[done] = um[done]
        ve[done] = ue[done]

    identify(t)
    order = initial_order(um, ue, vm, ve)
    order_clamps = np.zeros(m, dtype=np.int64)
    if recorder is not None:
        recorder.observe(0, t, um, ue, vm, ve, grid.spacing)
    warned = False
    while t_end - t > 1e-9 * cfg.dt:
        h = next_step(t_end - t, cfg.dt)
        scale = math.sqrt(h / grid.spacing)
        dw = standard_normals(ukeys, step0 + k, grid.n_points)
        dw *= scale
        dw0 = standard_normals(vkeys, step0 + k, grid.n_points)
        dw0 *= scale
        phi, psi = profile(_relative(um, ue, vm, ve))
        mixed = psi * dw + phi * dw0
        ru = advance_arrays(grid, cfg, spec, h, um, ue, uc, dw)
        rv = advance_arrays(grid, cfg, spec, h, vm, ve, vc, mixed)
        if preserve_order:
            rv = enforce_order(um, ue, vm, ve, order, order_clamps)
        k += 1
        t = t_end if t_end - (t + h) <= 1e-9 * cfg.dt else t + h
        check_finite(ru, ue, cfg.blowup_cap, t)
        check_finite(rv, ve, cfg.blowup_cap, t)
        identify(t)
        if recorder is not None:
            recorder.observe(k, t, um, ue, vm, ve, grid.spacing)
        if not warned and np.any(vc > clamp_budget * (v.steps + k) * grid.n_points):
            warnings.warn("v hit the positivity floor on more than "
                          f"{clamp_budget:.1%} of cell-steps", DegeneracyWarning, stacklevel=2)
            warned = True
    u2 = replace(u, mantissa=um, exponent=ue, clamp_count=uc, time=t, steps=u.steps + k,
                 stream=u.stream.advance(k))
    v2 = replace(v, mantissa=vm, exponent=ve, clamp_count=vc, time=t, steps=v.steps + k,
                 stream=v.stream.advance(k))
    if not u.stream.batched:
        return u2, v2, None if np.isnan(meet[0]) else float(meet[0])
    return u2, v2, meet


def l1_difference_series(recorder, tol=ORDER_TOL):
    """``(times, X)`` with ``X(t) = int (v - u) dx`` of shape ``(records, trajectories)``.

    Raises :class:`OrderingError` if ``v - u`` fell below ``-tol`` anywhere.
    """
    times = np.asarray(recorder.times, dtype=float)
    X = np.asarray(recorder.X, dtype=float)
    lo = np.asarray(recorder.min_gap, dtype=float)
    if lo.size and lo.min() < -tol:
        k, r = np.unravel_index(np.argmin(lo), lo.shape)
        raise OrderingError(f"v - u = {lo[k, r]:.3g} < -{tol:g} at t={times[k]:.6g} "
                            f"(trajectory {r})")
    return times, X


def ordering_violations(recorder, tol=ORDER_TOL):
    """Number of recorded (time, trajectory) pairs with ``min (v - u) < -tol``."""
    return int(np.sum(np.asarray(recorder.min_gap) < -tol))


# --------------------------------------------------------------- schedule

def log_plus(x):
    return np.log(np.maximum(x, math.e))


@dataclass(frozen=True)
class CouplingSchedule:
    """Stage times ``T[0..n_max]`` and the sequences ``eps``, ``alpha``, ``eta``.

    ``eps[0]`` is undefined (``nan``); ``alpha[0] = 1`` is the gain of the
    first stage.
    """

    epsilon: float
    delta: float
    L_star: float
    eta: float
    n_max: int
    T: np.ndarray = field(repr=False)
    eps: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def eta_seq(self):
        return self.alpha

    def stage_length(self, n):
        return float(self.T[n + 1] - self.T[n])


def growth_ratio(schedule):
    """``(T_n - T_0) / (n delta (log+ n)^-3)`` for ``n = 1..n_max``."""
    n = np.arange(1, schedule.n_max + 1)
    return (schedule.T[1:] - schedule.T[0]) / (n * schedule.delta * log_plus(n) ** -3.0)


# the ratio above is >= 1 for every n (the increments decrease) and its
# maximum over all n is 7.545 (attained at n = 32); it tends to 1 slowly
GROWTH_BOUNDS = (1.0, 7.6)


def build_schedule(epsilon=EPS_MAX / 2, L_star=2.0, eta=0.1, n_max=30):
    """Materialize the staged-coupling schedule for ``n <= n_max``."""
    epsilon = float(epsilon)
    if not 0.0 < epsilon <= EPS_MAX:
        raise DomainError(f"epsilon must lie in (0, exp(-e^e)] = (0, {EPS_MAX:.6g}], got {epsilon}")
    if not L_star > 1:
        raise DomainError(f"L_star must exceed 1, got {L_star}")
    if not eta > 0:
        raise DomainError(f"eta must be positive, got {eta}")
    n_max = int(n_max)
    if n_max < 1:
        raise DomainError("n_max must be at least 1")
    delta = 1.0 / math.log(math.log(1.0 / epsilon))
    ld = abs(math.log(delta))
    T = np.empty(n_max + 1)
    T[0] = L_star * math.log(L_star / epsilon)
    T[1:] = T[0] + np.cumsum(delta * log_plus(np.arange(n_max)) ** -3.0)
    n = np.arange(n_max + 1, dtype=float)
    with np.errstate(divide="ignore"):
        eps = delta * n ** (-2.0 - 4.0 * eta) / ld ** 4
        alpha = n ** -eta / ld
    eps[0] = np.nan
    alpha[0] = 1.0
    sched = CouplingSchedule(epsilon, delta, float(L_star), float(eta), n_max, T, eps, alpha)
    r = growth_ratio(sched)
    if not (np.all(np.diff(T) > 0) and np.all(r >= GROWTH_BOUNDS[0] - 1e-12)
            and np.all(r <= GROWTH_BOUNDS[1])):
        raise DomainError("schedule failed its growth check")
    return sched


# ----------------------------------------------------------- staged runs

@dataclass
class CouplingEventLog:
    """Per-stage records, arrays of shape ``(n_max + 1, trajectories)``.

    Row ``n`` describes the boundary time ``T_n`` and the stage
    ``[T_n, T_{n+1})`` that starts there: ``meeting_time`` is the first
    meeting of ``u`` and ``v`` in that stage (``nan`` if none, and for the
    last row, whose stage is not simulated); ``A`` is the event
    ``|w - u| <= eps_n |w|`` at ``T_n``; ``B`` is the event that
    ``sup |u - w|`` over the previous stage stays below ``M_{n-1}``
    (``nan`` where ``eps_{n-1}`` is undefined, i.e. ``n <= 1``);
    ``jump_gap`` is ``|v(T_n-) - w(T_n)|`` (``nan`` at ``n = 0``) and
    ``log_ratio_sup`` is ``|log w(T_n) - log u(T_n)|``.
    """

    schedule: CouplingSchedule
    trajectory_ids: tuple
    meeting_time: np.ndarray
    A: np.ndarray
    B: np.ndarray
    jump_gap: np.ndarray
    log_ratio_sup: np.ndarray

    def write_csv(self, path):
        s = self.schedule
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "n", "T_n", "eps_n", "alpha_n", "meeting_time",
                        "A_n", "B_n", "jump_gap", "log_ratio_sup"])
            for j, tid in enumerate(self.trajectory_ids):
                for n in range(s.n_max + 1):
                    b = self.B[n, j]
                    w.writerow([tid, n, repr(float(s.T[n])), repr(float(s.eps[n])),
                                repr(float(s.alpha[n])), repr(float(self.meeting_time[n, j])),
                                int(self.A[n, j]), "" if np.isnan(b) else int(b),
                                repr(float(self.jump_gap[n, j])),
                                repr(float(self.log_ratio_sup[n, j]))])


@dataclass
class StagedResult:
    log: CouplingEventLog
    w: TrajectoryState
    u: TrajectoryState


def _log_sup_diff(a_m, a_e, b_m, b_e):
    # sup |log a - log b| for strictly positive rows
    return np.max(np.abs(np.log(a_m) - np.log(b_m) + LN2 * (a_e - b_e)[:, None]), axis=1)


def _check_budget(clamps, steps, n, budget, what):
    if np.any(clamps > budget * max(steps, 1) * n):
        bad = np.flatnonzero(clamps > budget * max(steps, 1) * n)
        raise DegeneracyError(f"{what} hit the positivity floor on more than {budget:.1%} "
                              f"of cell-steps (trajectories {bad[:8].tolist()})")


def run_staged_coupling(spec, w0, schedule, cfg, grid=None, seed=0, trajectory_ids=0,
                        meet_tol=MEET_TOL, clamp_budget=CLAMP_BUDGET, preserve_order=True):
    """Couple the solution ``w`` of ``spec`` to a single PAM solution ``u``.

    ``w`` runs on ``[0, T_{n_max}]`` with its driving noise; ``u`` starts at
    ``w(T_0)`` and stage ``n`` uses gain ``alpha_n`` and the auxiliary stream
    ``n + 1``. Stage ``n`` is cut into equal steps no longer than ``cfg.dt``.
    """
    report = check_high_noise(spec)
    if not report:
        raise DomainError("staged coupling needs the high-noise condition: " + report.describe())
    spec.require_intermittency()
    if isinstance(w0, Field):
        grid = w0.grid
        w0 = w0.values
    if grid is None:
        raise DomainError("grid is required when w0 is not a Field")
    cfg.check_grid(grid)
    ids = (trajectory_ids,) if np.ndim(trajectory_ids) == 0 else tuple(int(t) for t in trajectory_ids)
    m, n_cells = len(ids), grid.n_points
    w0 = np.broadcast_to(np.asarray(w0, dtype=float), (m, n_cells))
    if np.any(w0 < 0) or np.any(np.max(w0, axis=1) <= 0):
        raise DomainError("w0 must be nonnegative and not identically zero")
    pam = linear(spec.mu, spec.sigma)
    stream = NoiseStream(seed, 0, ids if np.ndim(trajectory_ids) else ids[0])
    keys = stream.keys
    wm, we = normalize(w0)
    wc = np.zeros(m, dtype=np.int64)
    floor_budget = clamp_budget

    # ---- w alone until T_0
    T0, k = schedule.T[0], 0
    t = 0.0
    while T0 - t > 1e-9 * cfg.dt:
        h = next_step(T0 - t, cfg.dt)
        rw = advance_arrays(grid, cfg, spec, h, wm, we, wc, None, keys, k)
        k += 1
        t += h
        check_finite(rw, we, cfg.blowup_cap, t)
    t = float(T0)
    _check_budget(wc, k, n_cells, floor_budget, "w")

    N = schedule.n_max
    meeting = np.full((N + 1, m), np.nan)
    A = np.zeros((N + 1, m), dtype=bool)
    B = np.full((N + 1, m), np.nan)
    jump = np.full((N + 1, m), np.nan)
    ratio = np.full((N + 1, m), np.nan)
    um, ue = wm.copy(), we.copy()
    uc = np.zeros(m, dtype=np.int64)
    vc = np.zeros(m, dtype=np.int64)
    order_clamps = np.zeros(m, dtype=np.int64)
    u_steps = v_steps = 0
    for n in range(N + 1):
        if np.any(np.min(wm, axis=1) <= 0):
            raise PositivityError(f"inf w = 0 at T_{n} = {schedule.T[n]:.6g}")
        if np.any(np.min(um, axis=1) <= 0):
            raise PositivityError(f"inf u = 0 at T_{n} = {schedule.T[n]:.6g}")
        ratio[n] = _log_sup_diff(wm, we, um, ue)
        gap, wref = _sup_gap(um, ue, wm, we)
        K = gap
        A[n] = gap <= (schedule.eps[n] if n > 0 else 0.0) * wref
        if n == N:
            break
        # restart v from w; v and w share the driving increments
        if n > 0:
            jg, _ = _sup_gap(vm, ve, wm, we)
            jump[n] = np.ldexp(jg, we)
        vm, ve = wm.copy(), we.copy()
        alpha = schedule.alpha[n]
        M = K + (schedule.eps[n] + max(alpha, schedule.eps[n])) * wref if n > 0 else None
        sup_uw = K.copy()
        ref_e = we.copy()
        aux = stream_keys(stream.master_seed, n + 1, ids)
        L = schedule.T[n + 1] - schedule.T[n]
        steps = max(1, math.ceil(L / cfg.dt - 1e-9))
        h = L / steps
        scale = math.sqrt(h / grid.spacing)
        gap_uv, vref = _sup_gap(um, ue, vm, ve)
        met = gap_uv < meet_tol * vref
        meeting[n, met] = schedule.T[n]
        um[met] = vm[met]
        ue[met] = ve[met]
        order = initial_order(vm, ve, um, ue)
        for j in range(steps):
            dw = standard_normals(keys, k, n_cells)
            dw *= scale
            dwn = standard_normals(aux, k, n_cells)
            dwn *= scale
            phi, psi = mixing(_relative(vm, ve, um, ue), alpha)
            mixed = psi * dw + phi * dwn
            rw = advance_arrays(grid, cfg, spec, h, wm, we, wc, dw)
            rv = advance_arrays(grid, cfg, pam, h, vm, ve, vc, dw)
            ru = advance_arrays(grid, cfg, pam, h, um, ue, uc, mixed)
            if preserve_order:
                ru = enforce_order(vm, ve, um, ue, order, order_clamps)
            k += 1
            u_steps += 1
            v_steps += 1
            t = schedule.T[n + 1] if j == steps - 1 else t + h
            for r_, e_ in ((rw, we), (rv, ve), (ru, ue)):
                check_finite(r_, e_, cfg.blowup_cap, t)
            gap_uv, vref = _sup_gap(um, ue, vm, ve)
            hit = ~met & (gap_uv < meet_tol * vref)
            meeting[n, hit] = t
            met |= hit
            um[met] = vm[met]
            ue[met] = ve[met]
            if n > 0:
                g_uw = np.max(np.abs(np.ldexp(um, (ue - ref_e)[:, None])
                                     - np.ldexp(wm, (we - ref_e)[:, None])), axis=1)
                sup_uw = np.maximum(sup_uw, g_uw)
        _check_budget(wc, k, n_cells, floor_budget, "w")
        _check_budget(uc, u_steps, n_cells, floor_budget, "u")
        if n > 0:
            B[n + 1] = sup_uw <= M
    if N > 0:
        jg, _ = _sup_gap(vm, ve, wm, we)
        jump[N] = np.ldexp(jg, we)
    log = CouplingEventLog(schedule, ids, meeting, A, B, jump, ratio)
    t = float(t)
    w_state = TrajectoryState(grid, spec, stream.at(k), wm, we, t, k, wc)
    u_state = TrajectoryState(grid, pam, stream.at(k), um, ue, t, u_steps, uc)
    return StagedResult(log, w_state, u_state)
