"""Uniform grids and fields on the circle [-1, 1), with the periodic heat kernel.

The heat kernel is the one of ``d/dt = d^2/dx^2``: a sum over the images of the
Gaussian ``(4 pi t)^(-1/2) exp(-a^2 / (4t))``. It integrates to one over the
torus and relaxes to the uniform density 1/2.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import circulant

from .errors import DomainError

CIRCUMFERENCE = 2.0
MAX_IMAGES = 1_000_000


@dataclass(frozen=True)
class Grid:
    """Cell grid ``x_i = -1 + i * spacing`` with cyclic indexing."""

    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 4:
            raise DomainError(f"n_points must be an integer >= 4, got {self.n_points!r}")
        object.__setattr__(self, "n_points", int(self.n_points))

    @property
    def spacing(self):
        return CIRCUMFERENCE / self.n_points

    @property
    def points(self):
        return -1.0 + self.spacing * np.arange(self.n_points)

    def neighbor(self, i, offset=1):
        return (i + offset) % self.n_points


@dataclass(frozen=True)
class Field:
    """A real profile sampled on a grid. Values are stored read-only."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.grid.n_points,):
            raise DomainError(f"expected {self.grid.n_points} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("field values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid, func):
        return cls(grid, func(grid.points))

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.n_points, float(c)))

    def integral(self):
        return float(np.sum(self.values) * self.grid.spacing)

    def mean(self):
        return float(np.mean(self.values))


def _values(phi):
    return phi.values if isinstance(phi, Field) else np.asarray(phi, dtype=float)


def wrap(dx):
    """Reduce a displacement to [-1, 1] by subtracting the nearest multiple of 2.

    Odd-symmetric (``wrap(-a) == -wrap(a)`` exactly), which keeps the kernel
    bitwise even; the endpoints +-1 are the same point of the torus.
    """
    dx = np.asarray(dx, dtype=float)
    return dx - CIRCUMFERENCE * np.rint(dx / CIRCUMFERENCE)


def default_images(t):
    """Number of image pairs so that dropped terms are below exp(-40) of the peak."""
    # dropped terms have |a| >= 2k - 1; need (2k - 1)^2 / (4t) >= 40
    return max(3, math.ceil((math.sqrt(160.0 * t) + 1.0) / 2.0))


def heat_kernel(t, dx, k_images=None):
    """Periodic heat kernel ``p_t(dx)`` on the torus of circumference 2.

    Parameters
    ----------
    t : float
        Positive time.
    dx : float or array
        Displacement; reduced to [-1, 1) before summing images.
    k_images : int, optional
        Images ``n = -k..k`` are summed. Defaults to :func:`default_images`.
    """
    t = float(t)
    if not t > 0 or not math.isfinite(t):
        raise DomainError(f"heat kernel needs t > 0, got {t}")
    k = default_images(t) if k_images is None else int(k_images)
    if k < 0 or k > MAX_IMAGES:
        raise DomainError(f"k_images out of range: {k}")
    a = wrap(dx)
    # sum images symmetrically so that p(dx) == p(-dx) bit for bit
    shifts = CIRCUMFERENCE * np.arange(1, k + 1, dtype=float)
    a_exp = np.expand_dims(a, -1)
    total = np.exp(-a * a / (4.0 * t))
    total = total + np.sum(np.exp(-(a_exp + shifts) ** 2 / (4.0 * t))
                           + np.exp(-(a_exp - shifts) ** 2 / (4.0 * t)), axis=-1)
    out = total / math.sqrt(4.0 * math.pi * t)
    return float(out) if np.ndim(out) == 0 else out


def kernel_weights(grid, t):
    """Quadrature weights ``p_t(x_j - x_0) * spacing`` for j = 0..n-1."""
    return heat_kernel(t, grid.points - grid.points[0]) * grid.spacing


def convolve(kernel_time, phi, grid=None):
    """Cyclic rectangle-rule approximation of ``(p_t * phi)(x_i)``.

    ``phi`` may be a :class:`Field` or an array of shape ``(..., n)`` together
    with ``grid``. Returns the same kind of object it was given. For
    ``kernel_time`` below ``spacing**2`` the kernel is under-resolved on the
    grid and the input is returned unchanged with a warning.
    """
    kernel_time = float(kernel_time)
    if not kernel_time > 0:
        raise DomainError(f"convolve needs kernel_time > 0, got {kernel_time}")
    is_field = isinstance(phi, Field)
    if is_field:
        grid = phi.grid
    elif grid is None:
        grid = Grid(np.shape(phi)[-1])
    vals = _values(phi)
    if kernel_time < grid.spacing ** 2:
        warnings.warn(
            f"kernel_time={kernel_time:g} < spacing^2={grid.spacing ** 2:g}: "
            "heat kernel under-resolved, returning input unchanged",
            RuntimeWarning, stacklevel=2)
        out = vals.copy()
    else:
        # C[i, j] = w[(i - j) mod n]; every entry is nonnegative
        mat = circulant(kernel_weights(grid, kernel_time))
        out = vals @ mat.T
    return Field(grid, out) if is_field else out


def sup_norm(phi):
    return float(np.max(np.abs(_values(phi))))


def inf_value(phi):
    return float(np.min(_values(phi)))


def oscillation_ratio(phi):
    """``max(phi) / min(phi)``; requires a strictly positive minimum."""
    vals = _values(phi)
    lo = np.min(vals, axis=-1)
    if np.any(lo <= 0):
        raise DomainError("oscillation ratio undefined: field is not strictly positive")
    ratio = np.max(vals, axis=-1) / lo
    return float(ratio) if np.ndim(ratio) == 0 else ratio
