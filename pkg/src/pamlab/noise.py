"""Reproducible space-time white-noise increments.

Every increment value is a pure function of
``(master_seed, stream_id, trajectory_id, step_counter, cell)``: the first
three are hashed into a Philox key, the step and cell index form the counter.
Trajectories can therefore be simulated in any order, in any batch layout and
on any number of workers without changing a single bit of their noise.

Stream ids: 0 is the driving noise, ``k >= 1`` is the k-th auxiliary
independent noise used by the couplings.
"""

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from ._kernels import philox_normals
from .errors import DomainError

SEED_BITS = 64


def parse_seed(text):
    """Parse a decimal or ``0x``-prefixed hexadecimal 64-bit seed."""
    if isinstance(text, (int, np.integer)):
        value = int(text)
    else:
        s = str(text).strip().replace("_", "")
        try:
            value = int(s, 16) if s.lower().startswith("0x") else int(s, 10)
        except ValueError:
            raise DomainError(f"not a decimal or hexadecimal seed: {text!r}") from None
    if not 0 <= value < 2 ** SEED_BITS:
        raise DomainError(f"seed must fit in 64 unsigned bits, got {value}")
    return value


@lru_cache(maxsize=65536)
def _key(master_seed, stream_id, trajectory_id):
    seq = np.random.SeedSequence([master_seed, stream_id, trajectory_id])
    return seq.generate_state(2, np.uint32)


@lru_cache(maxsize=1024)
def _keys(master_seed, stream_id, ids):
    out = np.stack([_key(master_seed, stream_id, t) for t in ids])
    out.flags.writeable = False
    return out


def stream_keys(master_seed, stream_id, trajectory_ids):
    """Philox keys, one row of two uint32 words per trajectory id."""
    ids = tuple(int(t) for t in np.atleast_1d(np.asarray(trajectory_ids, dtype=np.int64)))
    return _keys(int(master_seed), int(stream_id), ids)


@dataclass(frozen=True)
class NoiseStream:
    """Position in one deterministic noise sequence.

    ``trajectory_id`` may be a single id or a tuple of ids; a tuple yields one
    row of increments per id (all advancing in lockstep).
    """

    master_seed: int
    stream_id: int = 0
    trajectory_id: object = 0
    step_counter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "master_seed", parse_seed(self.master_seed))
        if self.stream_id < 0 or self.step_counter < 0:
            raise DomainError("stream_id and step_counter must be nonnegative")
        tid = self.trajectory_id
        if np.ndim(tid) == 0:
            tid = int(tid)
            bad = tid < 0
        else:
            tid = tuple(int(t) for t in np.ravel(tid))
            bad = any(t < 0 for t in tid)
        if bad:
            raise DomainError("trajectory ids must be nonnegative")
        object.__setattr__(self, "trajectory_id", tid)

    @property
    def batched(self):
        return isinstance(self.trajectory_id, tuple)

    @property
    def n_trajectories(self):
        return len(self.trajectory_id) if self.batched else 1

    @property
    def keys(self):
        ids = self.trajectory_id if self.batched else (self.trajectory_id,)
        return _keys(self.master_seed, self.stream_id, ids)

    def _moved(self, step_counter):
        # fields are already validated; skip __post_init__ on the hot path
        out = object.__new__(NoiseStream)
        out.__dict__.update(self.__dict__)
        object.__setattr__(out, "step_counter", int(step_counter))
        return out

    def advance(self, steps=1):
        if steps < 0:
            raise DomainError("cannot move a stream backwards")
        return self._moved(self.step_counter + steps)

    def at(self, step_counter):
        if step_counter < 0:
            raise DomainError("step_counter must be nonnegative")
        return self._moved(step_counter)

    def sibling(self, stream_id):
        """Same seed and trajectories at the same position, on another stream id."""
        return replace(self, stream_id=stream_id)


def standard_normals(keys, step, n_cells, out=None):
    """Standard normals of shape ``(len(keys), n_cells)`` for one step."""
    if out is None:
        out = np.empty((keys.shape[0], n_cells))
    return philox_normals(keys, int(step), out)


def sample_increment(stream, grid, dt):
    """White-noise increment of the next step and the advanced stream.

    Values are i.i.d. centred Gaussians of variance ``dt / spacing`` per cell
    (cell average of the noise integrated over the step).
    """
    dt = float(dt)
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    z = standard_normals(stream.keys, stream.step_counter, grid.n_points)
    z *= np.sqrt(dt / grid.spacing)
    if not stream.batched:
        z = z[0]
    return z, stream.advance()


def mix_noise(dW, dW0, phi, psi, atol=1e-12):
    """Cellwise ``psi * dW + phi * dW0``; requires ``phi**2 + psi**2 == 1``."""
    dW, dW0, phi, psi = (np.asarray(a, dtype=float) for a in (dW, dW0, phi, psi))
    if dW.shape != dW0.shape:
        raise DomainError(f"increment shapes differ: {dW.shape} vs {dW0.shape}")
    norm_err = np.abs(phi * phi + psi * psi - 1.0)
    if np.any(norm_err > atol):
        raise DomainError(f"mixing profile not normalized (max error {norm_err.max():.3g})")
    return psi * dW + phi * dW0
