"""Finite-difference solver for ``dw = w'' dt + f(w) dt + g(w) dW`` on the torus.

Scheme (theta = 1 is fully implicit in the Laplacian)::

    (I - theta dt L) w_{k+1} = e^{mu dt} [ w_k + (1 - theta) dt L w_k
                                          + dt (f(w_k) - mu w_k) + g(w_k) dW_k ]

where ``L`` is the periodic three-point Laplacian, ``mu = f'(0+)`` and ``dW_k``
has variance ``dt / spacing`` per cell. Taking the linear part of the drift as
the exact factor ``e^{mu dt}`` makes every trajectory exactly equivariant
under ``mu -> mu + c`` (the field is multiplied by ``e^{c t}``); otherwise the
step is the usual semi-implicit Euler-Maruyama step, first order in ``dt``.

Fields are stored as ``mantissa * 2**exponent`` with one integer exponent per
trajectory, renormalised by exact powers of two, so fields that decay like
``e^{-100}`` or grow like ``e^{+100}`` never leave the double range.
"""

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from ._kernels import _FN, _KN, _WN, cyclic_factor, implicit_finish, pam_fused_step
from .errors import BlowupError, DomainError, NumericError
from .noise import NoiseStream, standard_normals
from .reaction import linear
from .torus import Field, Grid

LN2 = math.log(2.0)


@dataclass(frozen=True)
class SolverConfig:
    """Time step and safeguards.

    ``positivity_floor`` clamps every cell from below after each step (set it
    to ``None`` to disable); ``blowup_cap`` bounds the sup-norm.
    """

    dt: float = 2.5e-4
    theta: float = 1.0
    positivity_floor: float = 0.0
    blowup_cap: float = 1e12

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DomainError(f"dt must be positive and finite, got {self.dt}")
        if not 0.0 <= self.theta <= 1.0:
            raise DomainError(f"theta must lie in [0, 1], got {self.theta}")
        if not self.blowup_cap > 0:
            raise DomainError("blowup_cap must be positive")
        if self.positivity_floor is not None and not self.positivity_floor >= 0:
            raise DomainError(f"positivity_floor must be >= 0 or None, got {self.positivity_floor}")

    def check_grid(self, grid):
        """Explicit-type schemes need ``(1 - theta) dt / spacing^2 <= 1/2``."""
        if self.theta < 1.0 and (1.0 - self.theta) * self.dt / grid.spacing ** 2 > 0.5:
            raise DomainError(
                f"unstable: (1 - theta) dt / dx^2 = "
                f"{(1 - self.theta) * self.dt / grid.spacing ** 2:.3g} > 1/2")


@lru_cache(maxsize=256)
def _factors(n, r):
    # I - r * (shift_left - 2 I + shift_right)
    lower = np.full(n, -r)
    return cyclic_factor(lower, np.full(n, 1.0 + 2.0 * r), np.full(n, -r))


@lru_cache(maxsize=64)
def _linear_spec(mu, sigma):
    return linear(mu, sigma)


@dataclass(frozen=True)
class TrajectoryState:
    """Snapshot of ``m`` trajectories advanced in lockstep.

    ``mantissa[r] * 2**exponent[r]`` is the field of trajectory ``r``. The
    state is immutable; stepping returns a new one.
    """

    grid: Grid
    spec: object
    stream: NoiseStream
    mantissa: np.ndarray = field(repr=False)
    exponent: np.ndarray = field(repr=False)
    time: float = 0.0
    steps: int = 0
    clamp_count: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        mant = np.array(self.mantissa, dtype=float, ndmin=2)
        expo = np.array(self.exponent, dtype=np.int64, ndmin=1)
        if mant.shape != (self.stream.n_trajectories, self.grid.n_points):
            raise DomainError(
                f"mantissa shape {mant.shape} does not match "
                f"{self.stream.n_trajectories} trajectories x {self.grid.n_points} cells")
        clamps = (np.zeros(mant.shape[0], dtype=np.int64) if self.clamp_count is None
                  else np.array(self.clamp_count, dtype=np.int64, ndmin=1))
        for a in (mant, expo, clamps):
            a.flags.writeable = False
        object.__setattr__(self, "mantissa", mant)
        object.__setattr__(self, "exponent", expo)
        object.__setattr__(self, "clamp_count", clamps)

    @property
    def n_trajectories(self):
        return self.mantissa.shape[0]

    @property
    def values(self):
        """Physical field(s); underflows to 0 for extremely small fields."""
        vals = np.ldexp(self.mantissa, self.exponent[:, None])
        return vals if self.stream.batched else vals[0]

    def field(self, r=0):
        return Field(self.grid, np.ldexp(self.mantissa[r], self.exponent[r]))

    def _squeeze(self, a):
        return a if self.stream.batched else a[0]

    @property
    def log_values(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(self.mantissa) + LN2 * self.exponent[:, None]
        return self._squeeze(out)

    @property
    def log_sup(self):
        with np.errstate(divide="ignore"):
            out = np.log(np.max(np.abs(self.mantissa), axis=1)) + LN2 * self.exponent
        return self._squeeze(out)

    @property
    def log_inf(self):
        """Log of the minimum (``nan`` when the minimum is not positive)."""
        lo = np.min(self.mantissa, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(lo > 0, np.log(np.where(lo > 0, lo, 1.0)), np.nan) + LN2 * self.exponent
        return self._squeeze(out)

    @property
    def log_mass(self):
        s = np.sum(self.mantissa, axis=1) * self.grid.spacing
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)), np.nan) + LN2 * self.exponent
        return self._squeeze(out)

    @property
    def sup(self):
        return np.exp(self.log_sup)

    @property
    def mean_log(self):
        """Spatial mean of ``log w`` (``nan`` unless the field is strictly positive)."""
        lo = np.min(self.mantissa, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ml = np.mean(np.log(self.mantissa), axis=1)
        out = np.where(lo > 0, ml, np.nan) + LN2 * self.exponent
        return self._squeeze(out)

    def clamp_fraction(self):
        cells = max(self.steps, 1) * self.grid.n_points
        return self._squeeze(self.clamp_count / cells)


def _as_rows(w0, grid, m):
    if isinstance(w0, Field):
        vals = w0.values
    elif np.ndim(w0) == 0:
        vals = np.full(grid.n_points, float(w0))
    else:
        vals = np.asarray(w0, dtype=float)
    vals = np.array(np.broadcast_to(vals, (m, grid.n_points)), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("initial data must be finite")
    return vals


def normalize(values):
    """Split rows into ``(mantissa, exponent)`` with row maxima in [1/2, 1)."""
    values = np.array(values, dtype=float, ndmin=2)
    mx = np.max(np.abs(values), axis=1)
    e = np.where(mx > 0, np.frexp(mx)[1], 0).astype(np.int64)
    return np.ldexp(values, -e[:, None]), e


def initial_state(grid, w0, spec, seed, trajectory_ids=0, stream_id=0, time=0.0):
    """State at ``time`` for the given initial data and noise stream.

    ``trajectory_ids`` is an id or a sequence of ids (one trajectory each);
    ``w0`` is a :class:`Field`, a scalar, an ``(n,)`` array or an ``(m, n)``
    array.
    """
    stream = NoiseStream(seed, stream_id, trajectory_ids if np.ndim(trajectory_ids) == 0
                         else tuple(np.ravel(trajectory_ids)))
    mant, expo = normalize(_as_rows(w0, grid, stream.n_trajectories))
    return TrajectoryState(grid, spec, stream, mant, expo, float(time))


def check_finite(row_max, expo, cap, time):
    if np.isnan(row_max).any():
        bad = np.flatnonzero(np.isnan(row_max))
        raise NumericError(f"non-finite values at t={time:.6g} in trajectories {bad[:8].tolist()}")
    with np.errstate(divide="ignore"):
        log_sup = np.log(row_max) + LN2 * expo
    if np.any(log_sup > math.log(cap)):
        raise BlowupError(f"sup-norm exceeded {cap:g} at t={time:.6g}", time=time)


def implicit_update(grid, cfg, dt, mantissa, exponent, multiplier, growth, clamp_count):
    """Apply one step given the pointwise multiplier of the explicit part.

    ``mantissa``, ``exponent`` and ``clamp_count`` are updated in place.
    ``multiplier`` is ``1 + dt (f(w)/w - mu) + (g(w)/w) dW`` evaluated on the
    current field. Returns the new mantissa sup-norm of each row (``nan``
    where a value is not finite).
    """
    rhs = mantissa * multiplier
    if cfg.theta < 1.0:
        lap = (np.roll(mantissa, 1, axis=1) - 2.0 * mantissa + np.roll(mantissa, -1, axis=1))
        rhs += (1.0 - cfg.theta) * dt / grid.spacing ** 2 * lap
    implicit = cfg.theta > 0.0
    fac = _factors(grid.n_points, cfg.theta * dt / grid.spacing ** 2 if implicit else 0.0)
    floor = -math.inf if cfg.positivity_floor is None else float(cfg.positivity_floor)
    row_max = np.empty(mantissa.shape[0])
    implicit_finish(rhs, mantissa, exponent, growth, *fac, implicit, floor, clamp_count, row_max)
    return row_max


def rate_arrays(spec, mantissa, exponent):
    """``(f(w)/w - mu, g(w)/w)`` on the physical field."""
    z = np.ldexp(mantissa, exponent[:, None])
    return spec.rate_f(z) - spec.mu, spec.rate_g(z)


def _is_linear(spec):
    return spec.name == "linear"


def advance_arrays(grid, cfg, spec, dt, mant, expo, clamps, dW=None, keys=None, step=None):
    """One step on raw ``(mantissa, exponent)`` arrays, in place.

    Either ``dW`` (increments of variance ``dt / spacing``) or the Philox
    ``keys`` and ``step`` counter must be given. Returns the new mantissa
    sup-norm per row; raises on non-finite values or blow-up.
    """
    growth = math.exp(spec.mu * dt)
    floor = -math.inf if cfg.positivity_floor is None else float(cfg.positivity_floor)
    if dW is None and _is_linear(spec) and cfg.theta == 1.0:
        fac = _factors(grid.n_points, dt / grid.spacing ** 2)
        row_max = np.empty(mant.shape[0])
        pam_fused_step(mant, expo, keys, step, math.sqrt(dt / grid.spacing), spec.sigma,
                       0.0, growth, *fac, floor, clamps, row_max, _KN, _WN, _FN)
    else:
        if dW is None:
            dW = standard_normals(keys, step, grid.n_points)
            dW *= math.sqrt(dt / grid.spacing)
        rem, gz = rate_arrays(spec, mant, expo)
        row_max = implicit_update(grid, cfg, dt, mant, expo, 1.0 + dt * rem + gz * dW,
                                  growth, clamps)
    return row_max


def step_she(state, cfg, dt=None, dW=None):
    """Advance every trajectory by one step of size ``dt`` (default ``cfg.dt``).

    ``dW`` overrides the stream's increment (shape ``(m, n)``, variance
    ``dt / spacing``); the stream counter advances either way.
    """
    dt = cfg.dt if dt is None else float(dt)
    grid = state.grid
    cfg.check_grid(grid)
    mant = state.mantissa.copy()
    expo = state.exponent.copy()
    clamps = state.clamp_count.copy()
    if dW is not None:
        dW = np.reshape(dW, mant.shape)
    row_max = advance_arrays(grid, cfg, state.spec, dt, mant, expo, clamps, dW,
                             state.stream.keys, state.stream.step_counter)
    t = state.time + dt
    check_finite(row_max, expo, cfg.blowup_cap, t)
    return replace(state, mantissa=mant, exponent=expo, time=t, steps=state.steps + 1,
                   stream=state.stream.advance(), clamp_count=clamps)


def step_pam(state, cfg, mu, sigma, dt=None):
    """One step of the linear equation ``f = mu z``, ``g = sigma z``."""
    spec = _linear_spec(float(mu), float(sigma))
    out = step_she(replace(state, spec=spec), cfg, dt)
    return replace(out, spec=state.spec)


RECORD_FIELDS = ("log_sup", "log_inf", "log_mass", "mean_log", "clamp_count")


class Recorder:
    """Collects ``time`` and :data:`RECORD_FIELDS` every ``stride`` steps.

    ``profile_times`` lists times at which the full log-profile is stored
    (matched to the nearest step within half a step).
    """

    def __init__(self, stride=1, profile_times=()):
        if int(stride) < 1:
            raise DomainError("stride must be a positive integer")
        self.stride = int(stride)
        self.profile_times = sorted(float(t) for t in profile_times)
        self.times = []
        self.columns = {name: [] for name in RECORD_FIELDS}
        self.profiles = {}
        self._last_step = None

    def observe(self, state, dt):
        if state.steps == self._last_step:
            return
        if state.steps % self.stride == 0:
            self.times.append(state.time)
            for name in RECORD_FIELDS:
                self.columns[name].append(np.atleast_1d(getattr(state, name)).copy())
            self._last_step = state.steps
        for t in self.profile_times:
            if t not in self.profiles and abs(state.time - t) <= 0.5 * dt:
                self.profiles[t] = np.atleast_2d(state.log_values).copy()

    def series(self, name):
        """Array ``(records, trajectories)`` of one recorded column."""
        return np.array(self.columns[name])


def next_step(remaining, dt):
    """Step size towards a target ``remaining`` away.

    Returns ``dt`` itself unless the target is closer, so that runs split at
    grid times reproduce unsplit runs bit for bit.
    """
    return dt if remaining >= dt * (1.0 - 1e-9) else remaining


def evolve(state, cfg, t_end, recorders=(), step=None):
    """Step until ``t_end``; the last step is shortened to land exactly on it.

    ``step(state, cfg, dt)`` defaults to :func:`step_she`.
    """
    t_end = float(t_end)
    if t_end < state.time:
        raise DomainError(f"t_end={t_end} is before the current time {state.time}")
    step = step or (lambda s, c, h: step_she(s, c, h))
    for rec in recorders:
        if state.steps == 0:
            rec.observe(state, cfg.dt)
    # tolerance keeps accumulated rounding from producing a spurious tiny step
    while t_end - state.time > 1e-9 * cfg.dt:
        state = step(state, cfg, next_step(t_end - state.time, cfg.dt))
        if t_end - state.time <= 1e-9 * cfg.dt:
            state = replace(state, time=t_end)
        for rec in recorders:
            rec.observe(state, cfg.dt)
    return state


def first_exceedance_time(times, log_sup, gamma, T):
    """First recorded ``t >= T`` with ``sup w(t) > exp(-gamma t)``.

    ``log_sup`` of shape ``(k,)`` gives a float or ``None`` (never exceeded);
    shape ``(k, m)`` gives an array with ``inf`` for trajectories that never
    exceed.
    """
    times = np.asarray(times, dtype=float)
    ls = np.asarray(log_sup, dtype=float)
    single = ls.ndim == 1
    ls = ls.reshape(len(times), -1)
    window = times >= T
    hit = (ls > -gamma * times[:, None]) & window[:, None]
    first = np.where(hit.any(axis=0), times[np.argmax(hit, axis=0)], np.inf)
    if single:
        return None if math.isinf(first[0]) else float(first[0])
    return first
